#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "embmerge/dataset.hpp"

namespace embmerge {

enum class TaskKind { symmetric, asymmetric };

TaskKind task_kind_from_string(const std::string& s);
std::string to_string(TaskKind k);

/// Synthetic task recipe. Topic token blocks are carved out of the vocabulary;
/// the symmetric and asymmetric kinds read the *same* blocks through opposed
/// token-to-topic mappings, which is what makes a (symmetric, asymmetric) task
/// pair conflict when trained jointly.
struct TaskSpec {
    std::string name = "task";
    TaskKind kind = TaskKind::symmetric;
    int topics = 4;
    int vocab = 512;
    int query_len_min = 6, query_len_max = 10;
    int doc_len_min = 20, doc_len_max = 40;
    int negatives = 3;
    std::int64_t size = 1024;
    double noise = 0.0;  // probability the positive is drawn from a wrong topic
    std::uint64_t seed = 0;
    std::int64_t eval_size = 256;
};

struct GeneratedTask {
    Dataset train;
    LabeledEvalSet eval;
};

/// Deterministic per seed; identical bytes on repeated calls.
GeneratedTask generate(const TaskSpec& spec);

/// Token membership for a topic under a kind's mapping; exposed so tests can
/// run the exact generating model as a Bayes decoding oracle.
std::vector<std::pair<int, int>> topic_token_ranges(const TaskSpec& spec, TaskKind kind,
                                                    int topic);

/// Resamples to exact per-dataset sizes round(ratio_i/sum * total) with
/// largest-remainder rounding; upsampling draws with replacement, downsampling
/// without. Output sizes always add to `total`.
std::vector<Dataset> resample_total_length(const std::vector<Dataset>& datasets,
                                           const std::vector<double>& ratios,
                                           std::int64_t total, std::uint64_t seed);

/// The largest dataset keeps its full size byte-for-byte; the others are
/// scaled to anchor_size * ratio_i / ratio_anchor with the same sampling rules.
std::vector<Dataset> resample_max_length(const std::vector<Dataset>& datasets,
                                         const std::vector<double>& ratios,
                                         std::uint64_t seed);

struct ProbeProvenance {
    std::string source;
    double ratio = 0.0;  // requested proportion; all entries sum to 1
    std::int64_t count = 0;
};

/// Target dataset D_t for Self Positioning: a proportional, shuffled sample.
struct ProbeDataset {
    Dataset instances;
    std::vector<ProbeProvenance> provenance;
};

ProbeDataset build_probe(const std::vector<Dataset>& datasets,
                         const std::vector<std::string>& names,
                         const std::vector<double>& ratios, std::int64_t size,
                         std::uint64_t seed);

void save_probe(const ProbeDataset& probe, const std::filesystem::path& stem);
ProbeDataset load_probe(const std::filesystem::path& stem);

}  // namespace embmerge
