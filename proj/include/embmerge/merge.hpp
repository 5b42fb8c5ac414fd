#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "embmerge/task_vector.hpp"

namespace embmerge {

enum class MergeMethod { average, slerp, ties, fisher, regmean };

MergeMethod merge_method_from_string(const std::string& s);
std::string to_string(MergeMethod m);

/// Hyperparameters for all five methods; only the fields for `method` are read.
struct MergeConfig {
    MergeMethod method = MergeMethod::average;
    std::vector<double> weights;        // average: w_i
    std::vector<double> slerp_weights;  // slerp: a_i > 0
    double ties_lambda = 1.0;
    double trim_fraction = 0.2;
    std::vector<double> fisher_lambdas;  // fisher: lambda_i
    double regmean_sigma = 0.0;          // in [0,1): off-diagonal shrinkage
};

/// Per-parameter nonnegative merging mass (diagonal Fisher estimate).
template <typename Scalar>
using FisherCoefficientsT = WeightMapT<Scalar>;
using FisherCoefficients = FisherCoefficientsT<float>;

/// Per-linear-layer input Gram matrix sum X X^T, keyed by the weight tensor name.
template <typename Scalar>
struct GramStatsT {
    std::map<std::string, MatX<Scalar>> gram;
    std::map<std::string, std::int64_t> counts;
};
using GramStats = GramStatsT<float>;

inline constexpr double kFisherDenominatorEps = 1e-8;
inline constexpr double kRegmeanRidgeEps = 1e-6;

namespace detail {
template <typename Scalar>
void require_nonempty_shared_base(const std::vector<TaskVectorT<Scalar>>& vs,
                                  const char* what) {
    if (vs.empty()) throw std::invalid_argument(std::string(what) + ": no task vectors");
    for (const auto& v : vs) {
        require_same_base(vs.front(), v, what);
        require_same_structure(vs.front().delta, v.delta, what);
    }
}
}  // namespace detail

/// Average merging: sum(w_i V_i) / sum(w_i).
template <typename Scalar>
TaskVectorT<Scalar> average_merge(const std::vector<TaskVectorT<Scalar>>& vectors,
                                  const std::vector<double>& weights) {
    detail::require_nonempty_shared_base(vectors, "average_merge");
    if (weights.size() != vectors.size())
        throw std::invalid_argument("average_merge: |weights| != |vectors|");
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (std::abs(wsum) < 1e-12)
        throw std::invalid_argument("average_merge: weights sum to zero");
    std::vector<std::pair<Scalar, const TaskVectorT<Scalar>*>> terms;
    terms.reserve(vectors.size());
    for (std::size_t i = 0; i < vectors.size(); ++i)
        terms.emplace_back(static_cast<Scalar>(weights[i] / wsum), &vectors[i]);
    return lincomb(terms);
}

/// Spherical linear interpolation between two task vectors:
///   (sin((a_j/(a_i+a_j)) alpha) V_i + sin((a_i/(a_i+a_j)) alpha) V_j) / sin(alpha)
/// with alpha the global angle. Near-parallel inputs fall back to linear
/// interpolation at t = a_i/(a_i+a_j).
template <typename Scalar>
TaskVectorT<Scalar> slerp_pair(const TaskVectorT<Scalar>& vi,
                               const TaskVectorT<Scalar>& vj, double ai, double aj) {
    if (!(ai > 0.0) || !(aj > 0.0))
        throw std::invalid_argument("slerp_pair: weights must be > 0");
    if (norm(vi) == 0.0 || norm(vj) == 0.0)
        throw std::invalid_argument("slerp_pair: zero task vector");
    const double alpha = angle(vi, vj);
    const double t = ai / (ai + aj);
    if (alpha < kParallelAngleThreshold) {
        return lincomb<Scalar>({{static_cast<Scalar>(1.0 - t), &vi},
                                {static_cast<Scalar>(t), &vj}});
    }
    const double s = std::sin(alpha);
    const double ci = std::sin((1.0 - t) * alpha) / s;
    const double cj = std::sin(t * alpha) / s;
    return lincomb<Scalar>(
        {{static_cast<Scalar>(ci), &vi}, {static_cast<Scalar>(cj), &vj}});
}

/// Iterative SLERP fold:
///   V_(1..k) = slerp_pair(V_(1..k-1), V_k, (sum_{i<k} a_i)/(k-1), a_k)
template <typename Scalar>
TaskVectorT<Scalar> slerp_iterative(const std::vector<TaskVectorT<Scalar>>& vectors,
                                    const std::vector<double>& a) {
    detail::require_nonempty_shared_base(vectors, "slerp_iterative");
    if (vectors.size() < 2)
        throw std::invalid_argument("slerp_iterative: need at least 2 vectors");
    if (a.size() != vectors.size())
        throw std::invalid_argument("slerp_iterative: |a| != |vectors|");
    for (double ai : a)
        if (!(ai > 0.0))
            throw std::invalid_argument("slerp_iterative: weights must be > 0");
    TaskVectorT<Scalar> acc = slerp_pair(vectors[0], vectors[1], a[0], a[1]);
    double prev_sum = a[0] + a[1];
    for (std::size_t k = 2; k < vectors.size(); ++k) {
        acc = slerp_pair(acc, vectors[k], prev_sum / static_cast<double>(k), a[k]);
        prev_sum += a[k];
    }
    return acc;
}

/// TIES: trim each vector to its top trim_fraction coordinates by global
/// magnitude rank, elect per-coordinate signs from the kept sum, disjoint-mean
/// the sign-consistent kept values, then scale by lambda.
template <typename Scalar>
TaskVectorT<Scalar> ties_merge(const std::vector<TaskVectorT<Scalar>>& vectors,
                               double trim_fraction, double lambda) {
    detail::require_nonempty_shared_base(vectors, "ties_merge");
    if (!(trim_fraction > 0.0) || trim_fraction > 1.0)
        throw std::invalid_argument("ties_merge: trim_fraction must be in (0,1]");

    const std::size_t total = static_cast<std::size_t>(vectors.front().delta.total_size());
    const std::size_t keep = std::min<std::size_t>(
        total, static_cast<std::size_t>(
                   std::ceil(trim_fraction * static_cast<double>(total))));

    // Flatten views in lexicographic tensor order.
    auto flatten = [&](const TaskVectorT<Scalar>& v) {
        std::vector<const Scalar*> ptrs;
        std::vector<std::size_t> sizes;
        for (const auto& [_, t] : v.delta.entries) {
            ptrs.push_back(t.data.data());
            sizes.push_back(static_cast<std::size_t>(t.size()));
        }
        return std::make_pair(ptrs, sizes);
    };

    const std::size_t n = vectors.size();
    std::vector<std::vector<Scalar>> kept(n, std::vector<Scalar>(total, Scalar(0)));
    for (std::size_t m = 0; m < n; ++m) {
        auto [ptrs, sizes] = flatten(vectors[m]);
        std::vector<Scalar> flat(total);
        std::size_t pos = 0;
        for (std::size_t ti = 0; ti < ptrs.size(); ++ti)
            for (std::size_t i = 0; i < sizes[ti]; ++i) flat[pos++] = ptrs[ti][i];

        std::vector<std::size_t> idx(total);
        std::iota(idx.begin(), idx.end(), std::size_t(0));
        // Deterministic ranking: magnitude descending, index ascending on ties.
        std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep),
                         idx.end(), [&](std::size_t a, std::size_t b) {
                             const auto ma = std::abs(flat[a]);
                             const auto mb = std::abs(flat[b]);
                             return ma != mb ? ma > mb : a < b;
                         });
        for (std::size_t r = 0; r < keep; ++r) kept[m][idx[r]] = flat[idx[r]];
    }

    std::vector<Scalar> merged(total, Scalar(0));
    for (std::size_t c = 0; c < total; ++c) {
        Scalar sum = Scalar(0);
        for (std::size_t m = 0; m < n; ++m) sum += kept[m][c];
        if (sum == Scalar(0)) continue;
        const Scalar sign = sum > Scalar(0) ? Scalar(1) : Scalar(-1);
        Scalar acc = Scalar(0);
        int count = 0;
        for (std::size_t m = 0; m < n; ++m) {
            if (kept[m][c] != Scalar(0) && kept[m][c] * sign > Scalar(0)) {
                acc += kept[m][c];
                ++count;
            }
        }
        if (count > 0)
            merged[c] = static_cast<Scalar>(lambda) * acc / static_cast<Scalar>(count);
    }

    TaskVectorT<Scalar> out = zero_like(vectors.front());
    std::size_t pos = 0;
    for (auto& [_, t] : out.delta.entries)
        for (std::int64_t i = 0; i < t.size(); ++i) t.data[i] = merged[pos++];
    return out;
}

/// Diagonal Fisher estimate: mean over the dataset of the squared per-sample
/// gradient. The gradient provider is the encoder's exact backward pass (or a
/// test oracle).
template <typename Scalar, typename Instance>
FisherCoefficientsT<Scalar> fisher_coefficients(
    const std::function<WeightMapT<Scalar>(const Instance&)>& grad_oracle,
    const std::vector<Instance>& dataset) {
    if (dataset.empty())
        throw std::invalid_argument("fisher_coefficients: empty dataset");
    WeightMapT<Scalar> acc;
    bool first = true;
    for (const auto& inst : dataset) {
        WeightMapT<Scalar> g = grad_oracle(inst);
        if (first) {
            acc = zeros_like(g);
            first = false;
        } else {
            require_same_structure(acc, g, "fisher_coefficients");
        }
        auto it_acc = acc.entries.begin();
        for (auto it = g.entries.begin(); it != g.entries.end(); ++it, ++it_acc)
            it_acc->second.data.array() += it->second.data.array().square();
    }
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(dataset.size());
    for (auto& [_, t] : acc.entries) t.data *= inv_n;
    return acc;
}

/// Fisher merging, coordinate-wise:
///   (sum_i lambda_i F_i v_i) / (sum_i lambda_i F_i + eps)
/// Coordinates whose raw denominator falls below eps are guarded; the count of
/// guarded coordinates is reported through `guarded_count` when non-null.
template <typename Scalar>
TaskVectorT<Scalar> fisher_merge(const std::vector<TaskVectorT<Scalar>>& vectors,
                                 const std::vector<FisherCoefficientsT<Scalar>>& fishers,
                                 const std::vector<double>& lambdas,
                                 std::int64_t* guarded_count = nullptr) {
    detail::require_nonempty_shared_base(vectors, "fisher_merge");
    if (fishers.size() != vectors.size() || lambdas.size() != vectors.size())
        throw std::invalid_argument("fisher_merge: length mismatch");
    for (const auto& f : fishers) {
        require_same_structure(vectors.front().delta, f, "fisher_merge");
        for (const auto& [_, t] : f.entries)
            if ((t.data.array() < Scalar(0)).any())
                throw std::invalid_argument("fisher_merge: negative Fisher entry");
    }

    const auto eps = static_cast<Scalar>(kFisherDenominatorEps);
    TaskVectorT<Scalar> out = zero_like(vectors.front());
    std::int64_t guarded = 0;
    std::int64_t healthy = 0;
    for (auto& [name, t] : out.delta.entries) {
        VecX<Scalar> num = VecX<Scalar>::Zero(t.size());
        VecX<Scalar> den = VecX<Scalar>::Zero(t.size());
        for (std::size_t m = 0; m < vectors.size(); ++m) {
            const auto lam = static_cast<Scalar>(lambdas[m]);
            const auto& f = fishers[m].at(name).data;
            const auto& v = vectors[m].delta.at(name).data;
            num.array() += lam * f.array() * v.array();
            den.array() += lam * f.array();
        }
        guarded += (den.array() < eps).count();
        healthy += (den.array() >= eps).count();
        t.data = num.array() / (den.array() + eps);
    }
    if (guarded_count) *guarded_count = guarded;
    if (healthy == 0)
        throw std::domain_error("fisher_merge: denominator vanishes everywhere");
    return out;
}

/// RegMean: closed-form per-layer least squares. For every tensor with a Gram
/// entry, solves (sum_i G_i') W = sum_i G_i' W_i with off-diagonal entries of
/// each G scaled by (1 - sigma); tensors without Gram stats are merged by
/// unweighted average. By linearity the solve applies equally to deltas, so
/// inputs and output stay in task-vector form.
template <typename Scalar>
TaskVectorT<Scalar> regmean_merge(const std::vector<TaskVectorT<Scalar>>& vectors,
                                  const std::vector<GramStatsT<Scalar>>& grams,
                                  double sigma) {
    detail::require_nonempty_shared_base(vectors, "regmean_merge");
    if (grams.size() != vectors.size())
        throw std::invalid_argument("regmean_merge: |grams| != |vectors|");
    if (!(sigma >= 0.0) || sigma >= 1.0)
        throw std::invalid_argument("regmean_merge: sigma must be in [0,1)");

    const std::vector<double> unit(vectors.size(), 1.0);
    TaskVectorT<Scalar> out = average_merge(vectors, unit);

    for (auto& [name, t] : out.delta.entries) {
        if (grams.front().gram.find(name) == grams.front().gram.end()) continue;
        if (!t.is_matrix())
            throw std::invalid_argument("regmean_merge: gram stats for non-matrix tensor " +
                                        name);
        const auto rows = t.shape[0];
        const auto cols = t.shape[1];

        MatX<Scalar> gsum = MatX<Scalar>::Zero(rows, rows);
        MatX<Scalar> rhs = MatX<Scalar>::Zero(rows, cols);
        for (std::size_t m = 0; m < vectors.size(); ++m) {
            auto it = grams[m].gram.find(name);
            if (it == grams[m].gram.end())
                throw std::invalid_argument("regmean_merge: missing gram for " + name);
            if (it->second.rows() != rows || it->second.cols() != rows)
                throw std::invalid_argument("regmean_merge: gram dimension mismatch for " +
                                            name);
            // Symmetrize, then shrink off-diagonal mass by (1 - sigma).
            MatX<Scalar> g =
                ((it->second + it->second.transpose()) * Scalar(0.5)).eval();
            MatX<Scalar> gp = g * static_cast<Scalar>(1.0 - sigma);
            gp.diagonal() = g.diagonal();
            gsum += gp;
            rhs += gp * vectors[m].delta.at(name).mat();
        }

        Eigen::LDLT<MatX<Scalar>> solver(gsum);
        MatX<Scalar> solved;
        bool ok = solver.info() == Eigen::Success;
        if (ok) {
            solved = solver.solve(rhs);
            ok = ((gsum * solved - rhs).norm() <=
                  Scalar(1e-3) * (rhs.norm() + Scalar(1)));
        }
        if (!ok) {
            MatX<Scalar> ridged = gsum;
            ridged.diagonal().array() += static_cast<Scalar>(kRegmeanRidgeEps);
            Eigen::LDLT<MatX<Scalar>> solver2(ridged);
            if (solver2.info() != Eigen::Success)
                throw std::domain_error("regmean_merge: singular system for " + name +
                                        " even after ridge");
            solved = solver2.solve(rhs);
        }
        t.mat() = solved;
    }
    return out;
}

/// Exhaustive hyperparameter search. Evaluates every grid point in order and
/// returns the argmax (first occurrence wins ties) with the full score table.
struct GridSearchEntry {
    MergeConfig config;
    double score = 0.0;
    bool ok = false;
    std::string error;
};

struct GridSearchResult {
    std::vector<GridSearchEntry> table;
    std::size_t best_index = 0;
    bool aborted = false;
};

GridSearchResult grid_search(const std::vector<MergeConfig>& grid,
                             const std::function<double(const MergeConfig&)>& eval_oracle);

/// The hyperparameter grids used for tuning each method.
std::vector<MergeConfig> default_merge_grid(MergeMethod method);

}  // namespace embmerge
