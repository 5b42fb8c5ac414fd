#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace embmerge {

using TokenSeq = std::vector<std::int32_t>;

/// One training instance: query text, one similar text, K dissimilar texts.
struct ContrastiveInstance {
    TokenSeq query;
    TokenSeq positive;
    std::vector<TokenSeq> negatives;
    /// Graded similarity label, present only in symmetric eval sets.
    std::optional<double> gold_similarity;
};

using Dataset = std::vector<ContrastiveInstance>;

/// Eval sets reuse the instance record: asymmetric instances rank the
/// positive against the negatives; symmetric instances carry gold_similarity.
struct LabeledEvalSet {
    std::vector<ContrastiveInstance> instances;
};

/// Line-delimited JSON records:
///   {"query_tokens":[...],"positive_tokens":[...],"negative_tokens":[[...],...],
///    "gold_similarity":0.5}            (gold_similarity optional)
void save_dataset_jsonl(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset_jsonl(const std::filesystem::path& path);

inline void save_evalset_jsonl(const LabeledEvalSet& e, const std::filesystem::path& p) {
    save_dataset_jsonl(e.instances, p);
}
inline LabeledEvalSet load_evalset_jsonl(const std::filesystem::path& p) {
    return LabeledEvalSet{load_dataset_jsonl(p)};
}

}  // namespace embmerge
