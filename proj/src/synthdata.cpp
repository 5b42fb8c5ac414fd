#include "embmerge/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "embmerge/io_util.hpp"
#include "embmerge/rng.hpp"

namespace embmerge {

using ordered_json = nlohmann::ordered_json;

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "symmetric") return TaskKind::symmetric;
    if (s == "asymmetric") return TaskKind::asymmetric;
    throw std::invalid_argument("unknown task kind: " + s);
}

std::string to_string(TaskKind k) {
    return k == TaskKind::symmetric ? "symmetric" : "asymmetric";
}

namespace {

struct BlockLayout {
    int block_size = 0;
    int block_count = 0;  // 2 * topics
    int background_start = 0;
    int vocab = 0;
};

BlockLayout layout_for(const TaskSpec& spec) {
    if (spec.topics < 2) throw std::invalid_argument("generate: need >= 2 topics");
    BlockLayout l;
    l.vocab = spec.vocab;
    l.block_count = 2 * spec.topics;
    l.block_size = (spec.vocab * 3 / 4) / l.block_count;
    if (l.block_size < 2)
        throw std::invalid_argument("generate: vocab too small for requested topics");
    l.background_start = l.block_size * l.block_count;
    return l;
}

/// The two blocks a topic reads under each kind. Symmetric topic t owns the
/// adjacent pair {2t, 2t+1}; asymmetric topic t pairs its even block with the
/// next topic's odd block, so the odd blocks carry opposed topic labels.
std::pair<int, int> topic_blocks(const TaskSpec& spec, TaskKind kind, int topic) {
    if (kind == TaskKind::symmetric) return {2 * topic, 2 * topic + 1};
    return {2 * topic, 2 * ((topic + 1) % spec.topics) + 1};
}

constexpr double kBackgroundRate = 0.2;

TokenSeq draw_text(const TaskSpec& spec, const BlockLayout& l, TaskKind kind, int topic,
                   int len, Rng& rng) {
    auto [b0, b1] = topic_blocks(spec, kind, topic);
    TokenSeq out(static_cast<std::size_t>(len));
    for (auto& tok : out) {
        if (rng.uniform() < kBackgroundRate) {
            tok = static_cast<std::int32_t>(
                l.background_start + rng.uniform_index(static_cast<std::uint64_t>(
                                         l.vocab - l.background_start)));
        } else {
            const int b = rng.uniform() < 0.5 ? b0 : b1;
            tok = static_cast<std::int32_t>(
                b * l.block_size +
                rng.uniform_index(static_cast<std::uint64_t>(l.block_size)));
        }
    }
    return out;
}

int other_topic(int topic, int topics, Rng& rng) {
    const auto pick = static_cast<int>(rng.uniform_index(
        static_cast<std::uint64_t>(topics - 1)));
    return pick >= topic ? pick + 1 : pick;
}

ContrastiveInstance draw_instance(const TaskSpec& spec, const BlockLayout& l, Rng& rng) {
    const int topic =
        static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(spec.topics)));
    const int qlen = static_cast<int>(rng.uniform_int(spec.query_len_min, spec.query_len_max));
    ContrastiveInstance inst;
    inst.query = draw_text(spec, l, spec.kind, topic, qlen, rng);

    int pos_topic = topic;
    if (spec.noise > 0.0 && rng.uniform() < spec.noise)
        pos_topic = other_topic(topic, spec.topics, rng);

    const bool sym = spec.kind == TaskKind::symmetric;
    const int plen = sym ? qlen
                         : static_cast<int>(rng.uniform_int(spec.doc_len_min,
                                                            spec.doc_len_max));
    inst.positive = draw_text(spec, l, spec.kind, pos_topic, plen, rng);

    inst.negatives.reserve(static_cast<std::size_t>(spec.negatives));
    for (int k = 0; k < spec.negatives; ++k) {
        const int nt = other_topic(topic, spec.topics, rng);
        const int nlen = sym ? qlen
                             : static_cast<int>(rng.uniform_int(spec.doc_len_min,
                                                                spec.doc_len_max));
        inst.negatives.push_back(draw_text(spec, l, spec.kind, nt, nlen, rng));
    }
    return inst;
}

std::vector<std::size_t> largest_remainder_sizes(const std::vector<double>& ratios,
                                                 std::int64_t total) {
    const double rsum = std::accumulate(ratios.begin(), ratios.end(), 0.0);
    if (!(rsum > 0.0)) throw std::invalid_argument("ratios must be positive");
    std::vector<std::size_t> sizes(ratios.size());
    std::vector<std::pair<double, std::size_t>> rema;
    std::int64_t assigned = 0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        if (!(ratios[i] > 0.0)) throw std::invalid_argument("ratios must be positive");
        const double quota = ratios[i] / rsum * static_cast<double>(total);
        sizes[i] = static_cast<std::size_t>(std::floor(quota));
        assigned += static_cast<std::int64_t>(sizes[i]);
        rema.emplace_back(quota - std::floor(quota), i);
    }
    std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::int64_t r = 0; r < total - assigned; ++r)
        ++sizes[rema[static_cast<std::size_t>(r)].second];
    return sizes;
}

Dataset sample_to_size(const Dataset& src, std::size_t target, Rng& rng) {
    if (src.empty()) throw std::invalid_argument("resample: empty source dataset");
    Dataset out;
    out.reserve(target);
    if (target <= src.size()) {
        std::vector<std::size_t> idx(src.size());
        std::iota(idx.begin(), idx.end(), std::size_t(0));
        rng.shuffle(idx);
        for (std::size_t i = 0; i < target; ++i) out.push_back(src[idx[i]]);
    } else {
        for (std::size_t i = 0; i < target; ++i)
            out.push_back(src[rng.uniform_index(src.size())]);
    }
    return out;
}

}  // namespace

std::vector<std::pair<int, int>> topic_token_ranges(const TaskSpec& spec, TaskKind kind,
                                                    int topic) {
    const BlockLayout l = layout_for(spec);
    auto [b0, b1] = topic_blocks(spec, kind, topic);
    return {{b0 * l.block_size, (b0 + 1) * l.block_size},
            {b1 * l.block_size, (b1 + 1) * l.block_size}};
}

GeneratedTask generate(const TaskSpec& spec) {
    if (spec.size <= 0) throw std::invalid_argument("generate: size must be > 0");
    if (spec.query_len_min < 1 || spec.query_len_max < spec.query_len_min ||
        spec.doc_len_min < 1 || spec.doc_len_max < spec.doc_len_min)
        throw std::invalid_argument("generate: bad length range");
    if (spec.noise < 0.0 || spec.noise >= 1.0)
        throw std::invalid_argument("generate: noise must be in [0,1)");
    if (spec.negatives < 0) throw std::invalid_argument("generate: negatives < 0");
    const BlockLayout l = layout_for(spec);

    GeneratedTask out;
    Rng train_rng = Rng(spec.seed).derive(1);
    out.train.reserve(static_cast<std::size_t>(spec.size));
    for (std::int64_t i = 0; i < spec.size; ++i)
        out.train.push_back(draw_instance(spec, l, train_rng));

    Rng eval_rng = Rng(spec.seed).derive(2);
    out.eval.instances.reserve(static_cast<std::size_t>(spec.eval_size));
    if (spec.kind == TaskKind::asymmetric) {
        for (std::int64_t i = 0; i < spec.eval_size; ++i)
            out.eval.instances.push_back(draw_instance(spec, l, eval_rng));
    } else {
        // Graded pairs: the positive mixes the query's topic with a foil topic
        // at rate m; m is the gold similarity.
        for (std::int64_t i = 0; i < spec.eval_size; ++i) {
            const int topic = static_cast<int>(
                eval_rng.uniform_index(static_cast<std::uint64_t>(spec.topics)));
            const int foil = other_topic(topic, spec.topics, eval_rng);
            const int len = static_cast<int>(
                eval_rng.uniform_int(spec.query_len_min, spec.query_len_max));
            const double m = eval_rng.uniform();
            ContrastiveInstance inst;
            inst.query = draw_text(spec, l, spec.kind, topic, len, eval_rng);
            inst.positive.resize(static_cast<std::size_t>(len));
            TokenSeq from_topic = draw_text(spec, l, spec.kind, topic, len, eval_rng);
            TokenSeq from_foil = draw_text(spec, l, spec.kind, foil, len, eval_rng);
            for (int t = 0; t < len; ++t)
                inst.positive[static_cast<std::size_t>(t)] =
                    eval_rng.uniform() < m ? from_topic[static_cast<std::size_t>(t)]
                                           : from_foil[static_cast<std::size_t>(t)];
            inst.gold_similarity = m;
            out.eval.instances.push_back(std::move(inst));
        }
    }
    return out;
}

std::vector<Dataset> resample_total_length(const std::vector<Dataset>& datasets,
                                           const std::vector<double>& ratios,
                                           std::int64_t total, std::uint64_t seed) {
    if (datasets.size() != ratios.size())
        throw std::invalid_argument("resample_total_length: |ratios| != |datasets|");
    if (total <= 0) throw std::invalid_argument("resample_total_length: total must be > 0");
    const auto sizes = largest_remainder_sizes(ratios, total);
    std::vector<Dataset> out;
    out.reserve(datasets.size());
    Rng rng(seed);
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        Rng r = rng.derive(i + 1);
        out.push_back(sample_to_size(datasets[i], sizes[i], r));
    }
    return out;
}

std::vector<Dataset> resample_max_length(const std::vector<Dataset>& datasets,
                                         const std::vector<double>& ratios,
                                         std::uint64_t seed) {
    if (datasets.size() != ratios.size())
        throw std::invalid_argument("resample_max_length: |ratios| != |datasets|");
    std::size_t anchor = 0;
    for (std::size_t i = 1; i < datasets.size(); ++i)
        if (datasets[i].size() > datasets[anchor].size()) anchor = i;
    if (!(ratios[anchor] > 0.0))
        throw std::invalid_argument("resample_max_length: ratios must be positive");

    std::vector<Dataset> out;
    out.reserve(datasets.size());
    Rng rng(seed);
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        if (i == anchor) {
            out.push_back(datasets[i]);  // kept byte-for-byte
            continue;
        }
        const auto target = static_cast<std::size_t>(std::llround(
            static_cast<double>(datasets[anchor].size()) * ratios[i] / ratios[anchor]));
        Rng r = rng.derive(i + 1);
        out.push_back(sample_to_size(datasets[i], target, r));
    }
    return out;
}

ProbeDataset build_probe(const std::vector<Dataset>& datasets,
                         const std::vector<std::string>& names,
                         const std::vector<double>& ratios, std::int64_t size,
                         std::uint64_t seed) {
    if (datasets.size() != ratios.size() || datasets.size() != names.size())
        throw std::invalid_argument("build_probe: length mismatch");
    if (size <= 0) throw std::invalid_argument("build_probe: size must be > 0");
    const auto sizes = largest_remainder_sizes(ratios, size);
    const double rsum = std::accumulate(ratios.begin(), ratios.end(), 0.0);

    ProbeDataset probe;
    Rng rng(seed);
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        Rng r = rng.derive(i + 1);
        Dataset part = sample_to_size(datasets[i], sizes[i], r);
        probe.provenance.push_back(
            {names[i], ratios[i] / rsum, static_cast<std::int64_t>(part.size())});
        for (auto& inst : part) probe.instances.push_back(std::move(inst));
    }
    Rng shuffler = rng.derive(0xfeed);
    shuffler.shuffle(probe.instances);
    return probe;
}

namespace {
std::filesystem::path probe_stem(const std::filesystem::path& path) {
    if (path.extension() == ".jsonl") {
        auto stem = path;
        stem.replace_extension();
        return stem;
    }
    return path;
}
}  // namespace

void save_probe(const ProbeDataset& probe, const std::filesystem::path& path) {
    const auto stem = probe_stem(path);
    auto data_path = stem;
    data_path += ".jsonl";
    save_dataset_jsonl(probe.instances, data_path);
    ordered_json j = ordered_json::array();
    for (const auto& p : probe.provenance) {
        ordered_json e;
        e["source"] = p.source;
        e["ratio"] = p.ratio;
        e["count"] = p.count;
        j.push_back(std::move(e));
    }
    auto prov_path = stem;
    prov_path += ".provenance.json";
    atomic_write_file(prov_path, j.dump(2) + "\n");
}

ProbeDataset load_probe(const std::filesystem::path& path) {
    const auto stem = probe_stem(path);
    auto data_path = stem;
    data_path += ".jsonl";
    ProbeDataset probe;
    probe.instances = load_dataset_jsonl(data_path);
    if (probe.instances.empty())
        throw std::runtime_error("probe dataset is empty: " + data_path.string());
    auto prov_path = stem;
    prov_path += ".provenance.json";
    if (std::filesystem::exists(prov_path)) {
        const auto j = ordered_json::parse(read_text_file(prov_path));
        for (const auto& e : j)
            probe.provenance.push_back({e.at("source").get<std::string>(),
                                        e.at("ratio").get<double>(),
                                        e.at("count").get<std::int64_t>()});
    } else {
        probe.provenance.push_back(
            {"unknown", 1.0, static_cast<std::int64_t>(probe.instances.size())});
    }
    return probe;
}

}  // namespace embmerge
