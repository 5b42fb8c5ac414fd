#pragma once

#include <filesystem>
#include <string>

#include "embmerge/rng.hpp"
#include "embmerge/weight_map.hpp"

namespace test_support {

/// Unique scratch directory under the build tree, wiped on construction.
class TempDir {
public:
    explicit TempDir(const std::string& name)
        : path_(std::filesystem::temp_directory_path() /
                ("embmerge_test_" + name + "_" + std::to_string(counter()++))) {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }

private:
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::filesystem::path path_;
};

inline embmerge::WeightMap random_weight_map(embmerge::Rng& rng, int tensors = 3,
                                             int max_dim = 6) {
    embmerge::WeightMap m;
    for (int t = 0; t < tensors; ++t) {
        const auto rows = static_cast<std::int64_t>(rng.uniform_int(1, max_dim));
        const auto cols = static_cast<std::int64_t>(rng.uniform_int(1, max_dim));
        embmerge::VecX<float> data(rows * cols);
        for (std::int64_t i = 0; i < data.size(); ++i)
            data[i] = static_cast<float>(rng.normal());
        m.insert("t" + std::to_string(t),
                 embmerge::TensorT<float>{{rows, cols}, std::move(data)});
    }
    return m;
}

}  // namespace test_support
