#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "embmerge/encoder.hpp"
#include "embmerge/merge.hpp"
#include "embmerge/synthdata.hpp"

namespace embmerge {

struct SelfPosConfig {
    double mu = 0.05;        // searched over {0.00, 0.05, 0.10}
    int steps = 1000;
    double lr = 5e-3;
    int batch_size = 32;
    double tau = 0.02;       // reuses the training temperature
    double fd_eps_scale = 1e-3;  // eps_i = scale * max(a_i, 1)
    std::uint64_t seed = 0;
    double init_a = 1.0;
    double init_lambda = 1.0;
};

inline constexpr double kSelfPosAMin = 1e-4;

/// Learnable search state over ({a_i}, lambda) with Adam moments.
struct SelfPosState {
    std::vector<double> a;
    double lambda = 1.0;
    double mu = 0.0;
    std::vector<double> adam_m;  // N+1 entries, lambda last
    std::vector<double> adam_v;
    std::int64_t step = 0;
    SelfPosConfig config;

    static SelfPosState init(std::size_t n, const SelfPosConfig& cfg) {
        SelfPosState s;
        s.a.assign(n, cfg.init_a);
        s.lambda = cfg.init_lambda;
        s.mu = cfg.mu;
        s.adam_m.assign(n + 1, 0.0);
        s.adam_v.assign(n + 1, 0.0);
        s.config = cfg;
        return s;
    }
};

/// lambda * V_(1..N): every position in the interpolation space.
template <typename Scalar>
TaskVectorT<Scalar> merged_position(const std::vector<TaskVectorT<Scalar>>& vectors,
                                    const std::vector<double>& a, double lambda) {
    return scaled(slerp_iterative(vectors, a), static_cast<Scalar>(lambda));
}

/// Loss-and-gradient provider at a full model; the probe batch is forwarded so
/// the contrastive objective can use it (test oracles may ignore it).
template <typename Scalar>
using ModelLossFn = std::function<std::pair<double, WeightMapT<Scalar>>(
    const WeightMapT<Scalar>& model, std::span<const ContrastiveInstance> batch)>;

/// Contrastive probe loss: mean encoder loss with its exact backward pass.
template <typename Scalar>
ModelLossFn<Scalar> contrastive_model_loss(double tau) {
    return [tau](const WeightMapT<Scalar>& model,
                 std::span<const ContrastiveInstance> batch) {
        const auto params = EncoderParamsT<Scalar>::from_weight_map(model);
        std::vector<ContrastiveInstance> b(batch.begin(), batch.end());
        auto lg = loss_and_grad(params, b, tau);
        return std::make_pair(static_cast<double>(lg.loss), lg.grad.to_weight_map());
    };
}

/// Probe objective: mean contrastive loss of theta_0 + V_p over the batch,
/// plus mu * lambda.
template <typename Scalar>
double objective(const TaskVectorT<Scalar>& position, const WeightMapT<Scalar>& base,
                 std::span<const ContrastiveInstance> batch, double tau, double mu,
                 double lambda) {
    if (batch.empty()) throw std::invalid_argument("objective: empty batch");
    const auto params =
        EncoderParamsT<Scalar>::from_weight_map(apply_unchecked(base, position));
    std::vector<Scalar> losses;
    losses.reserve(batch.size());
    for (const auto& inst : batch)
        losses.push_back(contrastive_loss(params, inst, tau));
    const double mean = static_cast<double>(pairwise_sum(losses.data(), losses.size())) /
                        static_cast<double>(losses.size());
    return mean + mu * lambda;
}

template <typename Scalar>
struct HyperGrad {
    double objective = 0.0;  // loss + mu * lambda at the evaluation point
    std::vector<double> d_a;
    double d_lambda = 0.0;
};

/// Gradient of the search objective: exact dL/dtheta from one backward pass,
/// chained with the merge parameterization. d(lambda) is exact
/// (<dL/dtheta, V_(1..N)> + mu); d(a_i) uses central differences on the merge
/// only, so no extra passes through the loss are needed.
template <typename Scalar>
HyperGrad<Scalar> hypergrad_at(const std::vector<TaskVectorT<Scalar>>& vectors,
                               const std::vector<double>& a, double lambda, double mu,
                               double fd_eps_scale, const WeightMapT<Scalar>& base,
                               std::span<const ContrastiveInstance> batch,
                               const ModelLossFn<Scalar>& loss_fn) {
    const TaskVectorT<Scalar> merged = slerp_iterative(vectors, a);
    const TaskVectorT<Scalar> position = scaled(merged, static_cast<Scalar>(lambda));
    const WeightMapT<Scalar> model = apply_unchecked(base, position);
    auto [loss, grad] = loss_fn(model, batch);

    HyperGrad<Scalar> out;
    out.objective = loss + mu * lambda;
    out.d_lambda = static_cast<double>(global_dot(grad, merged.delta)) + mu;
    out.d_a.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double eps = fd_eps_scale * std::max(a[i], 1.0);
        std::vector<double> ap = a, am = a;
        ap[i] = a[i] + eps;
        am[i] = std::max(kSelfPosAMin, a[i] - eps);
        const double denom = ap[i] - am[i];
        const TaskVectorT<Scalar> vp = merged_position(vectors, ap, lambda);
        const TaskVectorT<Scalar> vm = merged_position(vectors, am, lambda);
        const TaskVectorT<Scalar> diff =
            lincomb<Scalar>({{Scalar(1), &vp}, {Scalar(-1), &vm}});
        out.d_a[i] =
            static_cast<double>(global_dot(grad, diff.delta)) / denom;
    }
    return out;
}

/// Spec-facing wrapper over the current search state.
template <typename Scalar>
HyperGrad<Scalar> hypergrad(const std::vector<TaskVectorT<Scalar>>& vectors,
                            const SelfPosState& state, const WeightMapT<Scalar>& base,
                            std::span<const ContrastiveInstance> batch) {
    return hypergrad_at(vectors, state.a, state.lambda, state.mu,
                        state.config.fd_eps_scale, base, batch,
                        contrastive_model_loss<Scalar>(state.config.tau));
}

struct TracePoint {
    std::int64_t step = 0;
    double objective = 0.0;
};

struct OptimizeResult {
    std::vector<double> a_hat;
    double lambda_hat = 1.0;
    std::vector<TracePoint> trace;
    bool aborted = false;  // objective went non-finite; trace holds history
    double initial_holdout_objective = 0.0;
    double final_holdout_objective = 0.0;
};

/// Adam over ({a_i}, lambda). Batches are sampled without replacement per
/// epoch over the probe, reshuffled per epoch from the seed. Deterministic.
template <typename Scalar>
OptimizeResult optimize_with(const std::vector<TaskVectorT<Scalar>>& vectors,
                             const WeightMapT<Scalar>& base, const Dataset& probe,
                             const SelfPosConfig& config,
                             const ModelLossFn<Scalar>& loss_fn) {
    if (probe.empty()) throw std::invalid_argument("optimize: empty probe");
    if (vectors.size() < 2)
        throw std::invalid_argument("optimize: need at least 2 task vectors");
    constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

    SelfPosState st = SelfPosState::init(vectors.size(), config);
    const std::size_t n = vectors.size();

    const std::size_t holdout =
        std::min<std::size_t>(probe.size(), 256);
    auto holdout_objective = [&](const std::vector<double>& a, double lambda) {
        const auto pos = merged_position(vectors, a, lambda);
        const auto model = apply_unchecked(base, pos);
        auto [loss, grad] = loss_fn(model, std::span<const ContrastiveInstance>(
                                               probe.data(), holdout));
        (void)grad;
        return loss + config.mu * lambda;
    };

    OptimizeResult res;
    res.initial_holdout_objective = holdout_objective(st.a, st.lambda);

    Rng rng(config.seed);
    std::vector<std::size_t> order(probe.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::size_t cursor = probe.size();  // force shuffle on first use
    std::uint64_t epoch = 0;

    std::vector<ContrastiveInstance> batch;
    for (int step = 0; step < config.steps; ++step) {
        batch.clear();
        for (int b = 0; b < config.batch_size; ++b) {
            if (cursor >= order.size()) {
                auto r = rng.derive(++epoch);
                r.shuffle(order);
                cursor = 0;
            }
            batch.push_back(probe[order[cursor++]]);
        }

        auto hg = hypergrad_at(vectors, st.a, st.lambda, st.mu, config.fd_eps_scale,
                               base, batch, loss_fn);
        res.trace.push_back({st.step, hg.objective});
        if (!std::isfinite(hg.objective)) {
            res.aborted = true;
            break;
        }

        ++st.step;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
        auto adam_step = [&](std::size_t slot, double g, double& x) {
            st.adam_m[slot] = beta1 * st.adam_m[slot] + (1.0 - beta1) * g;
            st.adam_v[slot] = beta2 * st.adam_v[slot] + (1.0 - beta2) * g * g;
            x -= config.lr * (st.adam_m[slot] / bc1) /
                 (std::sqrt(st.adam_v[slot] / bc2) + adam_eps);
        };
        for (std::size_t i = 0; i < n; ++i) {
            adam_step(i, hg.d_a[i], st.a[i]);
            st.a[i] = std::max(kSelfPosAMin, st.a[i]);
        }
        adam_step(n, hg.d_lambda, st.lambda);
    }

    res.a_hat = st.a;
    res.lambda_hat = st.lambda;
    res.final_holdout_objective = holdout_objective(st.a, st.lambda);
    return res;
}

template <typename Scalar>
OptimizeResult optimize(const std::vector<TaskVectorT<Scalar>>& vectors,
                        const WeightMapT<Scalar>& base, const ProbeDataset& probe,
                        const SelfPosConfig& config) {
    return optimize_with(vectors, base, probe.instances, config,
                         contrastive_model_loss<Scalar>(config.tau));
}

// ---- neighborhood sweep (Fig. 6 reproduction) ----

struct SweepPoint {
    double x = 0.0;  // ratio a1/(a1+a2), or lambda
    double score = 0.0;
};

struct SweepResult {
    std::vector<SweepPoint> ratio_curve;   // ratio in {0/6 .. 6/6} at fixed lambda_hat
    std::vector<SweepPoint> lambda_curve;  // lambda in {0.7 .. 1.3} at fixed a_hat
    double found_score = 0.0;
};

/// Score oracle maps a merged task vector to an eval score.
template <typename Scalar>
SweepResult neighborhood_sweep(
    const std::vector<TaskVectorT<Scalar>>& vectors, const std::vector<double>& a_hat,
    double lambda_hat,
    const std::function<double(const TaskVectorT<Scalar>&)>& eval_oracle) {
    if (vectors.size() != 2)
        throw std::invalid_argument("neighborhood_sweep: ratio sweep needs N = 2");
    SweepResult res;
    for (int k = 0; k <= 6; ++k) {
        const double ratio = static_cast<double>(k) / 6.0;
        const std::vector<double> a = {std::max(kSelfPosAMin, ratio),
                                       std::max(kSelfPosAMin, 1.0 - ratio)};
        res.ratio_curve.push_back(
            {ratio, eval_oracle(merged_position(vectors, a, lambda_hat))});
    }
    for (int k = 0; k <= 6; ++k) {
        const double lambda = 0.7 + 0.1 * static_cast<double>(k);
        res.lambda_curve.push_back(
            {lambda, eval_oracle(merged_position(vectors, a_hat, lambda))});
    }
    res.found_score = eval_oracle(merged_position(vectors, a_hat, lambda_hat));
    return res;
}

/// Run report (a_hat, lambda_hat, trace, optimizer details) as JSON.
void save_selfpos_report(const OptimizeResult& result, const SelfPosConfig& config,
                         const std::filesystem::path& path);
OptimizeResult load_selfpos_report(const std::filesystem::path& path,
                                   SelfPosConfig* config_out = nullptr);

}  // namespace embmerge
