#include <algorithm>
#include <limits>
#include <numeric>

#include "embmerge/encoder.hpp"

namespace embmerge {

EvalMetric eval_metric_from_string(const std::string& s) {
    if (s == "acc_at_1") return EvalMetric::acc_at_1;
    if (s == "spearman") return EvalMetric::spearman;
    throw std::invalid_argument("unknown eval metric: " + s);
}

std::string to_string(EvalMetric m) {
    return m == EvalMetric::acc_at_1 ? "acc_at_1" : "spearman";
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const auto n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sab / std::sqrt(saa * sbb);
}

}  // namespace

EvalResult evaluate(const EncoderParams& p, const LabeledEvalSet& evalset,
                    EvalMetric metric) {
    if (evalset.instances.empty())
        throw std::invalid_argument("evaluate: empty eval set");
    EvalResult res;
    if (metric == EvalMetric::acc_at_1) {
        std::vector<double> hits(evalset.instances.size());
        for (std::size_t i = 0; i < evalset.instances.size(); ++i) {
            const auto& inst = evalset.instances[i];
            const auto eq = embed(p, std::span<const std::int32_t>(inst.query));
            const float pos = eq.dot(embed(p, std::span<const std::int32_t>(inst.positive)));
            bool win = true;
            for (const auto& neg : inst.negatives) {
                if (eq.dot(embed(p, std::span<const std::int32_t>(neg))) >= pos) {
                    win = false;
                    break;
                }
            }
            hits[i] = win ? 1.0 : 0.0;
        }
        res.value = pairwise_sum(hits.data(), hits.size()) /
                    static_cast<double>(hits.size());
        return res;
    }

    std::vector<double> pred, gold;
    pred.reserve(evalset.instances.size());
    for (const auto& inst : evalset.instances) {
        if (!inst.gold_similarity)
            throw std::invalid_argument("evaluate: spearman needs gold_similarity labels");
        const auto eq = embed(p, std::span<const std::int32_t>(inst.query));
        pred.push_back(eq.dot(embed(p, std::span<const std::int32_t>(inst.positive))));
        gold.push_back(*inst.gold_similarity);
    }
    const double rho = pearson(average_ranks(pred), average_ranks(gold));
    if (std::isnan(rho)) {
        res.value = 0.0;
        res.degenerate = true;
    } else {
        res.value = rho;
    }
    return res;
}

namespace {

struct AdamState {
    EncoderParams m, v;
    std::int64_t t = 0;
    static constexpr double beta1 = 0.9;
    static constexpr double beta2 = 0.999;
    static constexpr double eps = 1e-8;
};

}  // namespace

TrainResult train(const EncoderParams& initial, const TrainConfig& config,
                  const std::vector<Dataset>& datasets) {
    if (datasets.empty()) throw std::invalid_argument("train: no datasets");
    for (const auto& d : datasets)
        if (d.empty()) throw std::invalid_argument("train: empty dataset");
    if (config.epochs <= 0 || config.batch_size <= 0)
        throw std::invalid_argument("train: epochs and batch_size must be positive");
    if (config.warmup_ratio < 0.0 || config.warmup_ratio > 1.0)
        throw std::invalid_argument("train: warmup_ratio must be in [0,1]");
    const bool use_adam = config.optimizer == "adam";
    if (!use_adam && config.optimizer != "sgd")
        throw std::invalid_argument("train: unknown optimizer " + config.optimizer);

    auto batches_of = [&](std::size_t n) {
        return (n + static_cast<std::size_t>(config.batch_size) - 1) /
               static_cast<std::size_t>(config.batch_size);
    };
    std::size_t steps_per_epoch = 0;
    for (const auto& d : datasets) steps_per_epoch += batches_of(d.size());
    const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(config.epochs);
    const std::size_t warmup_steps = static_cast<std::size_t>(
        std::ceil(config.warmup_ratio * static_cast<double>(total_steps)));

    EncoderParams params = initial;
    AdamState adam;
    if (use_adam) {
        adam.m = EncoderParams::zeros(initial.dims());
        adam.v = EncoderParams::zeros(initial.dims());
    }

    Rng rng(config.seed);
    TrainResult result;
    result.step_loss.reserve(total_steps);

    std::size_t step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        // Per-dataset shuffles, then a shuffled task-homogeneous batch order.
        std::vector<std::vector<std::size_t>> order(datasets.size());
        for (std::size_t d = 0; d < datasets.size(); ++d) {
            order[d].resize(datasets[d].size());
            std::iota(order[d].begin(), order[d].end(), std::size_t(0));
            auto r = rng.derive(0x10000u * (epoch + 1) + d);
            r.shuffle(order[d]);
        }
        std::vector<std::pair<std::size_t, std::size_t>> batch_plan;  // (dataset, batch)
        for (std::size_t d = 0; d < datasets.size(); ++d)
            for (std::size_t b = 0; b < batches_of(datasets[d].size()); ++b)
                batch_plan.emplace_back(d, b);
        auto r = rng.derive(0x20000u * (epoch + 1));
        r.shuffle(batch_plan);

        for (const auto& [d, b] : batch_plan) {
            std::vector<ContrastiveInstance> batch;
            const std::size_t lo = b * static_cast<std::size_t>(config.batch_size);
            const std::size_t hi =
                std::min(datasets[d].size(), lo + static_cast<std::size_t>(config.batch_size));
            batch.reserve(hi - lo);
            for (std::size_t i = lo; i < hi; ++i) batch.push_back(datasets[d][order[d][i]]);

            auto lg = loss_and_grad(params, batch, config.tau);
            result.step_loss.push_back(static_cast<double>(lg.loss));

            const double warm =
                warmup_steps == 0
                    ? 1.0
                    : std::min(1.0, static_cast<double>(step + 1) /
                                        static_cast<double>(warmup_steps));
            const auto lr = static_cast<float>(config.lr * warm);

            if (use_adam) {
                ++adam.t;
                const auto b1 = static_cast<float>(AdamState::beta1);
                const auto b2 = static_cast<float>(AdamState::beta2);
                const auto bc1 = static_cast<float>(
                    1.0 - std::pow(AdamState::beta1, static_cast<double>(adam.t)));
                const auto bc2 = static_cast<float>(
                    1.0 - std::pow(AdamState::beta2, static_cast<double>(adam.t)));
                const auto eps = static_cast<float>(AdamState::eps);
                auto adam_update = [&](auto& theta, const auto& g, auto& m, auto& v) {
                    m = b1 * m + (1.0f - b1) * g;
                    v.array() = b2 * v.array() + (1.0f - b2) * g.array().square();
                    theta.array() -=
                        lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
                };
                adam_update(params.emb, lg.grad.emb, adam.m.emb, adam.v.emb);
                adam_update(params.l1w, lg.grad.l1w, adam.m.l1w, adam.v.l1w);
                adam_update(params.l1b, lg.grad.l1b, adam.m.l1b, adam.v.l1b);
                adam_update(params.l2w, lg.grad.l2w, adam.m.l2w, adam.v.l2w);
                adam_update(params.l2b, lg.grad.l2b, adam.m.l2b, adam.v.l2b);
            } else {
                params.emb -= lr * lg.grad.emb;
                params.l1w -= lr * lg.grad.l1w;
                params.l1b -= lr * lg.grad.l1b;
                params.l2w -= lr * lg.grad.l2w;
                params.l2b -= lr * lg.grad.l2b;
            }
            ++step;
        }
        result.epoch_checkpoints.push_back(params);
    }
    return result;
}

}  // namespace embmerge
