#include "embmerge/tensorio.hpp"

#include <bit>
#include <cstring>

#include <json.hpp>

#include "embmerge/io_util.hpp"
#include "embmerge/task_vector.hpp"

namespace embmerge {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

struct Fnv1a64 {
    std::uint64_t h = kFnvOffset;
    void byte(std::uint8_t b) {
        h ^= b;
        h *= kFnvPrime;
    }
    void bytes(const void* p, std::size_t n) {
        const auto* q = static_cast<const std::uint8_t*>(p);
        for (std::size_t i = 0; i < n; ++i) byte(q[i]);
    }
    void u64le(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) byte(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32le(float v) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int i = 0; i < 4; ++i) byte(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
};

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

void append_f32le(std::vector<char>& out, const float* data, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(data[i]);
        for (int b = 0; b < 4; ++b)
            out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
}

float read_f32le(const char* p) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(p[b])) << (8 * b);
    return std::bit_cast<float>(bits);
}

ordered_json manifest_to_json(const CheckpointManifest& m) {
    ordered_json j;
    j["version"] = m.version;
    j["hash_algorithm"] = m.hash_algorithm;
    j["fingerprint"] = m.fingerprint;
    if (m.base_fingerprint) j["base_fingerprint"] = *m.base_fingerprint;
    j["tensors"] = ordered_json::array();
    for (const auto& t : m.tensors) {
        ordered_json rec;
        rec["name"] = t.name;
        rec["shape"] = t.shape;
        rec["dtype"] = t.dtype;
        rec["offset"] = t.offset;
        rec["nbytes"] = t.nbytes;
        j["tensors"].push_back(std::move(rec));
    }
    return j;
}

CheckpointManifest manifest_from_json(const ordered_json& j) {
    CheckpointManifest m;
    m.version = j.at("version").get<int>();
    m.hash_algorithm = j.at("hash_algorithm").get<std::string>();
    m.fingerprint = j.at("fingerprint").get<std::string>();
    if (j.contains("base_fingerprint"))
        m.base_fingerprint = j.at("base_fingerprint").get<std::string>();
    for (const auto& rec : j.at("tensors")) {
        TensorRecord t;
        t.name = rec.at("name").get<std::string>();
        t.shape = rec.at("shape").get<std::vector<std::int64_t>>();
        t.dtype = rec.at("dtype").get<std::string>();
        t.offset = rec.at("offset").get<std::uint64_t>();
        t.nbytes = rec.at("nbytes").get<std::uint64_t>();
        m.tensors.push_back(std::move(t));
    }
    return m;
}

}  // namespace

std::filesystem::path checkpoint_stem(const std::filesystem::path& path) {
    if (path.extension() == ".manifest" || path.extension() == ".bin") {
        std::filesystem::path stem = path;
        stem.replace_extension();
        return stem;
    }
    return path;
}

std::string fingerprint(const WeightMap& weights) {
    Fnv1a64 h;
    for (const auto& [name, t] : weights.entries) {
        h.bytes(name.data(), name.size());
        h.byte(0);
        h.u64le(static_cast<std::uint64_t>(t.shape.size()));
        for (auto d : t.shape) h.u64le(static_cast<std::uint64_t>(d));
        for (std::int64_t i = 0; i < t.size(); ++i) h.f32le(t.data[i]);
    }
    return hex64(h.h);
}

CheckpointManifest save_checkpoint(const WeightMap& weights,
                                   const std::filesystem::path& path,
                                   const std::optional<std::string>& base_fingerprint) {
    if (weights.empty())
        throw std::invalid_argument("save_checkpoint: empty weight map");
    if (!weights.all_finite())
        throw std::invalid_argument("save_checkpoint: non-finite value present");

    const auto stem = checkpoint_stem(path);
    CheckpointManifest m;
    m.fingerprint = fingerprint(weights);
    m.base_fingerprint = base_fingerprint;

    std::vector<char> blob;
    blob.reserve(static_cast<std::size_t>(weights.total_size()) * 4);
    std::uint64_t offset = 0;
    for (const auto& [name, t] : weights.entries) {
        TensorRecord rec;
        rec.name = name;
        rec.shape = t.shape;
        rec.dtype = "f32le";
        rec.offset = offset;
        rec.nbytes = static_cast<std::uint64_t>(t.size()) * 4;
        append_f32le(blob, t.data.data(), t.size());
        offset += rec.nbytes;
        m.tensors.push_back(std::move(rec));
    }

    auto manifest_path = stem;
    manifest_path += ".manifest";
    auto bin_path = stem;
    bin_path += ".bin";
    atomic_write_file(bin_path, blob);
    atomic_write_file(manifest_path, manifest_to_json(m).dump(2) + "\n");
    return m;
}

LoadedCheckpoint load_checkpoint_full(const std::filesystem::path& path) {
    const auto stem = checkpoint_stem(path);
    auto manifest_path = stem;
    manifest_path += ".manifest";
    auto bin_path = stem;
    bin_path += ".bin";

    CheckpointManifest m;
    try {
        m = manifest_from_json(ordered_json::parse(read_text_file(manifest_path)));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("invalid manifest " + manifest_path.string() + ": " +
                                 e.what());
    }
    if (m.version != 1)
        throw std::runtime_error("unsupported checkpoint version");
    if (m.hash_algorithm != "fnv1a64")
        throw std::runtime_error("unknown hash algorithm: " + m.hash_algorithm);

    const auto blob = read_binary_file(bin_path);

    WeightMap weights;
    std::uint64_t prev_end = 0;
    bool first = true;
    for (const auto& rec : m.tensors) {
        if (rec.dtype != "f32le")
            throw std::runtime_error("unknown dtype tag '" + rec.dtype + "' for tensor " +
                                     rec.name);
        const std::int64_t count = TensorT<float>::shape_size(rec.shape);
        if (rec.nbytes != static_cast<std::uint64_t>(count) * 4)
            throw std::runtime_error("shape/byte-length mismatch for tensor " + rec.name);
        if (!first && rec.offset < prev_end)
            throw std::runtime_error("overlapping or non-ascending tensor offsets");
        first = false;
        prev_end = rec.offset + rec.nbytes;
        if (prev_end > blob.size())
            throw std::runtime_error("blob length mismatch: tensor " + rec.name +
                                     " extends past end of blob");
        VecX<float> data(count);
        const char* src = blob.data() + rec.offset;
        for (std::int64_t i = 0; i < count; ++i) data[i] = read_f32le(src + 4 * i);
        weights.insert(rec.name, TensorT<float>{rec.shape, std::move(data)});
    }
    if (prev_end != blob.size())
        throw std::runtime_error("blob length mismatch: trailing bytes");

    if (fingerprint(weights) != m.fingerprint)
        throw std::runtime_error("fingerprint mismatch for " + stem.string());
    if (!weights.all_finite())
        throw std::runtime_error("non-finite value in checkpoint " + stem.string());
    return {std::move(weights), std::move(m)};
}

WeightMap load_checkpoint(const std::filesystem::path& path) {
    return load_checkpoint_full(path).weights;
}

CheckpointManifest save_task_vector(const TaskVector& v,
                                    const std::filesystem::path& stem) {
    return save_checkpoint(v.delta, stem, v.base_fingerprint);
}

TaskVector load_task_vector(const std::filesystem::path& stem) {
    auto loaded = load_checkpoint_full(stem);
    if (!loaded.manifest.base_fingerprint)
        throw std::runtime_error("checkpoint " + stem.string() +
                                 " has no base_fingerprint; not a task vector");
    return TaskVector{std::move(loaded.weights), *loaded.manifest.base_fingerprint};
}

}  // namespace embmerge
