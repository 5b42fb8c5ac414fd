#include <doctest.h>

#include <fstream>
#include <functional>
#include <set>

#include <json.hpp>

#include "embmerge/task_vector.hpp"
#include "embmerge/tensorio.hpp"
#include "test_support.hpp"

using namespace embmerge;
using test_support::TempDir;
using test_support::random_weight_map;

namespace {

WeightMap tiny_map() {
    WeightMap m;
    VecX<float> d(4);
    d << 1, 2, 3, 4;
    m.insert("w", TensorT<float>{{2, 2}, d});
    return m;
}

}  // namespace

TEST_CASE("save writes a 16-byte tensor entry at offset 0 for the smallest map") {
    TempDir dir("tensorio_smallest");
    const auto m = save_checkpoint(tiny_map(), dir.path() / "ckpt");
    REQUIRE(m.tensors.size() == 1);
    CHECK(m.tensors[0].name == "w");
    CHECK(m.tensors[0].shape == std::vector<std::int64_t>{2, 2});
    CHECK(m.tensors[0].offset == 0);
    CHECK(m.tensors[0].nbytes == 16);
    CHECK(std::filesystem::file_size(dir.path() / "ckpt.bin") == 16);
}

TEST_CASE("save/load round-trips bit-exactly with identical fingerprint") {
    TempDir dir("tensorio_roundtrip");
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        const auto w = random_weight_map(rng);
        const auto stem = dir.path() / ("m" + std::to_string(trial));
        const auto manifest = save_checkpoint(w, stem);
        const auto loaded = load_checkpoint_full(stem);
        CHECK(bit_equal(w, loaded.weights));
        CHECK(loaded.manifest.fingerprint == manifest.fingerprint);
        CHECK(fingerprint(loaded.weights) == fingerprint(w));
    }
}

TEST_CASE("flipping one blob byte changes the recomputed fingerprint") {
    TempDir dir("tensorio_flip");
    Rng rng(7);
    const auto w = random_weight_map(rng);
    const auto stem = dir.path() / "m";
    const auto manifest = save_checkpoint(w, stem);

    // Corrupt one byte, reload without verification by recomputing the hash
    // from the mutated tensor data.
    auto blob = [&] {
        std::ifstream in(dir.path() / "m.bin", std::ios::binary);
        return std::vector<char>(std::istreambuf_iterator<char>(in),
                                 std::istreambuf_iterator<char>());
    }();
    blob[3] = static_cast<char>(blob[3] ^ 0x01);
    {
        std::ofstream out(dir.path() / "m.bin", std::ios::binary | std::ios::trunc);
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(stem), doctest::Contains("fingerprint"),
                         std::runtime_error);

    // Same property at the API level: mutate one value, fingerprints differ.
    auto w2 = w;
    auto& data = w2.entries.begin()->second.data;
    data[0] = std::nextafter(data[0], 1e30f);
    CHECK(fingerprint(w2) != manifest.fingerprint);
}

TEST_CASE("empty map hashes to the FNV offset basis constant") {
    CHECK(fingerprint(WeightMap{}) == "cbf29ce484222325");
    CHECK(fingerprint(WeightMap{}) == fingerprint(WeightMap{}));
}

TEST_CASE("fingerprint ignores insertion order") {
    WeightMap a, b;
    VecX<float> d1(2), d2(3);
    d1 << 1, 2;
    d2 << 3, 4, 5;
    a.insert("x", TensorT<float>{{2}, d1});
    a.insert("y", TensorT<float>{{3}, d2});
    b.insert("y", TensorT<float>{{3}, d2});
    b.insert("x", TensorT<float>{{2}, d1});
    CHECK(fingerprint(a) == fingerprint(b));
}

TEST_CASE("truncated blob is a length-mismatch error") {
    TempDir dir("tensorio_truncate");
    Rng rng(3);
    const auto w = random_weight_map(rng);
    save_checkpoint(w, dir.path() / "m");
    const auto size = std::filesystem::file_size(dir.path() / "m.bin");
    std::filesystem::resize_file(dir.path() / "m.bin", size - 4);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir.path() / "m"),
                         doctest::Contains("length mismatch"), std::runtime_error);
}

namespace {

void rewrite_manifest(const std::filesystem::path& path,
                      const std::function<void(nlohmann::json&)>& edit) {
    std::ifstream in(path);
    auto j = nlohmann::json::parse(in);
    edit(j);
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2);
}

}  // namespace

TEST_CASE("manifest edited to a wrong shape is rejected as a shape error") {
    TempDir dir("tensorio_badshape");
    save_checkpoint(tiny_map(), dir.path() / "m");
    rewrite_manifest(dir.path() / "m.manifest",
                     [](nlohmann::json& j) { j["tensors"][0]["shape"] = {4, 2}; });
    CHECK_THROWS_WITH_AS(load_checkpoint(dir.path() / "m"),
                         doctest::Contains("shape"), std::runtime_error);
}

TEST_CASE("unknown dtype tag is rejected") {
    TempDir dir("tensorio_dtype");
    save_checkpoint(tiny_map(), dir.path() / "m");
    rewrite_manifest(dir.path() / "m.manifest",
                     [](nlohmann::json& j) { j["tensors"][0]["dtype"] = "f64le"; });
    CHECK_THROWS_WITH_AS(load_checkpoint(dir.path() / "m"),
                         doctest::Contains("dtype"), std::runtime_error);
}

TEST_CASE("non-finite values are rejected on save") {
    auto w = tiny_map();
    w.at("w").data[2] = std::numeric_limits<float>::infinity();
    TempDir dir("tensorio_nonfinite");
    CHECK_THROWS_AS(save_checkpoint(w, dir.path() / "m"), std::invalid_argument);
}

TEST_CASE("empty map cannot be saved") {
    TempDir dir("tensorio_empty");
    CHECK_THROWS_AS(save_checkpoint(WeightMap{}, dir.path() / "m"),
                    std::invalid_argument);
}

TEST_CASE("task vector round-trip keeps the base fingerprint") {
    TempDir dir("tensorio_tv");
    Rng rng(11);
    const auto base = random_weight_map(rng);
    TaskVector v{zeros_like(base), fingerprint(base)};
    v.delta.entries.begin()->second.data[0] = 0.5f;
    save_task_vector(v, dir.path() / "tv");
    const auto loaded = load_task_vector(dir.path() / "tv");
    CHECK(loaded.base_fingerprint == v.base_fingerprint);
    CHECK(bit_equal(loaded.delta, v.delta));

    // A plain checkpoint is not a task vector.
    save_checkpoint(base, dir.path() / "plain");
    CHECK_THROWS_AS(load_task_vector(dir.path() / "plain"), std::runtime_error);
}

TEST_CASE("fingerprints are collision-free over 10^4 random small maps") {
    Rng rng(2024);
    std::set<std::string> seen;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        auto w = random_weight_map(rng, 1, 3);
        // Mix in the counter so every map is distinct even if data repeats.
        w.at("t0").data[0] = static_cast<float>(i);
        seen.insert(fingerprint(w));
    }
    CHECK(static_cast<int>(seen.size()) == n);
}
