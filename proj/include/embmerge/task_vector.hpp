#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "embmerge/weight_map.hpp"

namespace embmerge {

/// Weight-space delta V = theta_model - theta_base, tagged with the base
/// model's fingerprint so it is only applied where it was extracted.
template <typename Scalar>
struct TaskVectorT {
    WeightMapT<Scalar> delta;
    std::string base_fingerprint;
};

using TaskVector = TaskVectorT<float>;

struct DirectionReport {
    double angle_to_first = 0.0;
    double angle_to_second = 0.0;
    double metric = 0.0;  // angle_to_first / (angle_to_first + angle_to_second)
};

/// Angles below this are treated as parallel by SLERP's linear fallback.
inline constexpr double kParallelAngleThreshold = 1e-6;

template <typename Scalar>
void require_same_base(const TaskVectorT<Scalar>& a, const TaskVectorT<Scalar>& b,
                       const char* what) {
    if (a.base_fingerprint != b.base_fingerprint)
        throw std::invalid_argument(std::string(what) + ": base fingerprints differ");
}

template <typename Scalar>
TaskVectorT<Scalar> extract(const WeightMapT<Scalar>& model,
                            const WeightMapT<Scalar>& base,
                            const std::string& base_fp) {
    require_same_structure(model, base, "extract");
    TaskVectorT<Scalar> v;
    v.delta = zip_tensors(model, base, [](const auto& m, const auto& b) {
        return VecX<Scalar>(m - b);
    });
    v.base_fingerprint = base_fp;
    return v;
}

/// Adds the delta without a base-identity check; the float-level apply()
/// wrapper (tensorio) verifies fingerprints first.
template <typename Scalar>
WeightMapT<Scalar> apply_unchecked(const WeightMapT<Scalar>& base,
                                   const TaskVectorT<Scalar>& v) {
    require_same_structure(base, v.delta, "apply");
    return zip_tensors(base, v.delta, [](const auto& b, const auto& d) {
        return VecX<Scalar>(b + d);
    });
}

std::string fingerprint(const WeightMap& weights);  // tensorio.cpp

/// extract/apply with the base identity recorded and enforced.
inline TaskVector extract(const WeightMap& model, const WeightMap& base) {
    return extract(model, base, fingerprint(base));
}

inline WeightMap apply(const WeightMap& base, const TaskVector& v, bool force = false) {
    if (!force && fingerprint(base) != v.base_fingerprint)
        throw std::invalid_argument(
            "apply: task vector was extracted against a different base (pass force to "
            "override)");
    return apply_unchecked(base, v);
}

/// Global L2 norm over the concatenation of all flattened tensors.
template <typename Scalar>
double norm(const TaskVectorT<Scalar>& v) {
    return std::sqrt(static_cast<double>(global_squared_norm(v.delta)));
}

template <typename Scalar>
double angle(const TaskVectorT<Scalar>& a, const TaskVectorT<Scalar>& b) {
    require_same_base(a, b, "angle");
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0)
        throw std::invalid_argument("angle: zero-norm task vector");
    const double dot = static_cast<double>(global_dot(a.delta, b.delta));
    const double cosv = std::clamp(dot / (na * nb), -1.0, 1.0);
    return std::acos(cosv);
}

template <typename Scalar>
DirectionReport direction_metric(const TaskVectorT<Scalar>& combined,
                                 const TaskVectorT<Scalar>& first,
                                 const TaskVectorT<Scalar>& second) {
    require_same_base(combined, first, "direction_metric");
    require_same_base(combined, second, "direction_metric");
    DirectionReport r;
    r.angle_to_first = angle(combined, first);
    r.angle_to_second = angle(combined, second);
    const double sum = r.angle_to_first + r.angle_to_second;
    if (sum <= 0.0)
        throw std::domain_error(
            "direction_metric: degenerate configuration (first and second are parallel "
            "to combined)");
    r.metric = r.angle_to_first / sum;
    return r;
}

/// Elementwise sum of scaled task vectors. Shared kernel for averaging,
/// SLERP and landscape interpolation.
template <typename Scalar>
TaskVectorT<Scalar> lincomb(
    const std::vector<std::pair<Scalar, const TaskVectorT<Scalar>*>>& terms) {
    if (terms.empty()) throw std::invalid_argument("lincomb: empty term list");
    for (const auto& [_, v] : terms) {
        require_same_base(*terms.front().second, *v, "lincomb");
        require_same_structure(terms.front().second->delta, v->delta, "lincomb");
    }
    TaskVectorT<Scalar> out;
    out.base_fingerprint = terms.front().second->base_fingerprint;
    out.delta = zeros_like(terms.front().second->delta);
    for (const auto& [c, v] : terms) {
        auto it_out = out.delta.entries.begin();
        for (auto it = v->delta.entries.begin(); it != v->delta.entries.end();
             ++it, ++it_out)
            it_out->second.data += c * it->second.data;
    }
    return out;
}

template <typename Scalar>
TaskVectorT<Scalar> scaled(const TaskVectorT<Scalar>& v, Scalar c) {
    return lincomb<Scalar>({{c, &v}});
}

template <typename Scalar>
TaskVectorT<Scalar> zero_like(const TaskVectorT<Scalar>& v) {
    return TaskVectorT<Scalar>{zeros_like(v.delta), v.base_fingerprint};
}

}  // namespace embmerge
