#include "embmerge/dataset.hpp"

#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "embmerge/io_util.hpp"

namespace embmerge {

using ordered_json = nlohmann::ordered_json;

void save_dataset_jsonl(const Dataset& data, const std::filesystem::path& path) {
    std::string out;
    for (const auto& inst : data) {
        ordered_json j;
        j["query_tokens"] = inst.query;
        j["positive_tokens"] = inst.positive;
        j["negative_tokens"] = inst.negatives;
        if (inst.gold_similarity) j["gold_similarity"] = *inst.gold_similarity;
        out += j.dump();
        out += '\n';
    }
    atomic_write_file(path, out);
}

Dataset load_dataset_jsonl(const std::filesystem::path& path) {
    Dataset data;
    std::istringstream in(read_text_file(path));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                                     ": bad record: " + e.what());
        }
        ContrastiveInstance inst;
        inst.query = j.at("query_tokens").get<TokenSeq>();
        inst.positive = j.at("positive_tokens").get<TokenSeq>();
        inst.negatives = j.at("negative_tokens").get<std::vector<TokenSeq>>();
        if (j.contains("gold_similarity"))
            inst.gold_similarity = j.at("gold_similarity").get<double>();
        data.push_back(std::move(inst));
    }
    return data;
}

}  // namespace embmerge
