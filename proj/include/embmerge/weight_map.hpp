#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "embmerge/reduce.hpp"

namespace embmerge {

template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMajorMatX =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One named dense tensor: explicit shape plus row-major flattened data.
template <typename Scalar>
struct TensorT {
    std::vector<std::int64_t> shape;
    VecX<Scalar> data;

    TensorT() = default;
    TensorT(std::vector<std::int64_t> s, VecX<Scalar> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != shape_size(shape))
            throw std::invalid_argument("tensor data length does not match shape");
    }

    static std::int64_t shape_size(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (auto d : s) {
            if (d <= 0) throw std::invalid_argument("tensor shape entries must be positive");
            n *= d;
        }
        return n;
    }

    std::int64_t size() const { return data.size(); }

    bool is_matrix() const { return shape.size() == 2; }

    /// Row-major 2-D view. Only valid for rank-2 tensors.
    Eigen::Map<const RowMajorMatX<Scalar>> mat() const {
        if (!is_matrix()) throw std::logic_error("tensor is not rank-2");
        return {data.data(), shape[0], shape[1]};
    }
    Eigen::Map<RowMajorMatX<Scalar>> mat() {
        if (!is_matrix()) throw std::logic_error("tensor is not rank-2");
        return {data.data(), shape[0], shape[1]};
    }
};

/// Named collection of tensors; iteration is lexicographic by name via std::map.
template <typename Scalar>
struct WeightMapT {
    std::map<std::string, TensorT<Scalar>> entries;

    bool empty() const { return entries.empty(); }
    std::size_t tensor_count() const { return entries.size(); }

    std::int64_t total_size() const {
        std::int64_t n = 0;
        for (const auto& [_, t] : entries) n += t.size();
        return n;
    }

    void insert(const std::string& name, TensorT<Scalar> t) {
        if (!entries.emplace(name, std::move(t)).second)
            throw std::invalid_argument("duplicate tensor name: " + name);
    }

    const TensorT<Scalar>& at(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::out_of_range("no tensor named " + name);
        return it->second;
    }
    TensorT<Scalar>& at(const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::out_of_range("no tensor named " + name);
        return it->second;
    }

    bool all_finite() const {
        for (const auto& [_, t] : entries)
            if (!t.data.allFinite()) return false;
        return true;
    }

    template <typename Other>
    WeightMapT<Other> cast() const {
        WeightMapT<Other> out;
        for (const auto& [name, t] : entries)
            out.entries.emplace(name,
                                TensorT<Other>{t.shape, t.data.template cast<Other>()});
        return out;
    }
};

using WeightMap = WeightMapT<float>;

template <typename Scalar>
bool same_structure(const WeightMapT<Scalar>& a, const WeightMapT<Scalar>& b) {
    if (a.entries.size() != b.entries.size()) return false;
    auto ia = a.entries.begin();
    auto ib = b.entries.begin();
    for (; ia != a.entries.end(); ++ia, ++ib) {
        if (ia->first != ib->first || ia->second.shape != ib->second.shape) return false;
    }
    return true;
}

template <typename Scalar>
void require_same_structure(const WeightMapT<Scalar>& a, const WeightMapT<Scalar>& b,
                            const char* what) {
    if (!same_structure(a, b))
        throw std::invalid_argument(std::string(what) + ": tensor names/shapes differ");
}

template <typename Scalar>
WeightMapT<Scalar> zeros_like(const WeightMapT<Scalar>& m) {
    WeightMapT<Scalar> out;
    for (const auto& [name, t] : m.entries)
        out.entries.emplace(name,
                            TensorT<Scalar>{t.shape, VecX<Scalar>::Zero(t.size())});
    return out;
}

/// out[k] = f(a[k]) tensor-wise; f maps an Eigen vector expression to another.
template <typename Scalar, typename Fn>
WeightMapT<Scalar> map_tensors(const WeightMapT<Scalar>& a, const Fn& f) {
    WeightMapT<Scalar> out;
    for (const auto& [name, t] : a.entries)
        out.entries.emplace(name, TensorT<Scalar>{t.shape, f(t.data)});
    return out;
}

template <typename Scalar, typename Fn>
WeightMapT<Scalar> zip_tensors(const WeightMapT<Scalar>& a, const WeightMapT<Scalar>& b,
                               const Fn& f) {
    require_same_structure(a, b, "zip_tensors");
    WeightMapT<Scalar> out;
    auto ib = b.entries.begin();
    for (auto ia = a.entries.begin(); ia != a.entries.end(); ++ia, ++ib)
        out.entries.emplace(ia->first,
                            TensorT<Scalar>{ia->second.shape, f(ia->second.data, ib->second.data)});
    return out;
}

/// Global dot product over the lexicographic flattening, fixed pairwise order.
template <typename Scalar>
Scalar global_dot(const WeightMapT<Scalar>& a, const WeightMapT<Scalar>& b) {
    require_same_structure(a, b, "global_dot");
    std::vector<Scalar> parts;
    parts.reserve(a.entries.size());
    auto ib = b.entries.begin();
    for (auto ia = a.entries.begin(); ia != a.entries.end(); ++ia, ++ib)
        parts.push_back(pairwise_dot(ia->second.data.data(), ib->second.data.data(),
                                     static_cast<std::size_t>(ia->second.size())));
    return pairwise_sum(parts.data(), parts.size());
}

template <typename Scalar>
Scalar global_squared_norm(const WeightMapT<Scalar>& a) {
    std::vector<Scalar> parts;
    parts.reserve(a.entries.size());
    for (const auto& [_, t] : a.entries) {
        const Scalar* p = t.data.data();
        parts.push_back(pairwise_reduce<Scalar>(
            static_cast<std::size_t>(t.size()),
            [p](std::size_t i) { return p[i] * p[i]; }));
    }
    return pairwise_sum(parts.data(), parts.size());
}

template <typename Scalar>
Scalar global_norm(const WeightMapT<Scalar>& a) {
    using std::sqrt;
    return sqrt(global_squared_norm(a));
}

template <typename Scalar>
bool bit_equal(const WeightMapT<Scalar>& a, const WeightMapT<Scalar>& b) {
    if (!same_structure(a, b)) return false;
    auto ib = b.entries.begin();
    for (auto ia = a.entries.begin(); ia != a.entries.end(); ++ia, ++ib) {
        if (std::memcmp(ia->second.data.data(), ib->second.data.data(),
                        sizeof(Scalar) * ia->second.size()) != 0)
            return false;
    }
    return true;
}

}  // namespace embmerge
