#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "embmerge/dataset.hpp"
#include "embmerge/merge.hpp"
#include "embmerge/rng.hpp"
#include "embmerge/weight_map.hpp"

namespace embmerge {

struct EncoderDims {
    int vocab = 512;
    int dim = 32;      // token embedding width
    int hidden = 64;   // first dense layer width
    int out_dim = 32;  // embedding output width
};

/// Dual-encoder parameters: token embeddings, two dense layers, tanh between.
/// WeightMap names are fixed: "emb", "l1.w", "l1.b", "l2.w", "l2.b".
template <typename Scalar>
struct EncoderParamsT {
    MatX<Scalar> emb;  // vocab x dim
    MatX<Scalar> l1w;  // dim x hidden
    VecX<Scalar> l1b;  // hidden
    MatX<Scalar> l2w;  // hidden x out_dim
    VecX<Scalar> l2b;  // out_dim

    EncoderDims dims() const {
        return EncoderDims{static_cast<int>(emb.rows()), static_cast<int>(emb.cols()),
                           static_cast<int>(l1w.cols()), static_cast<int>(l2w.cols())};
    }

    static EncoderParamsT zeros(const EncoderDims& d) {
        EncoderParamsT p;
        p.emb = MatX<Scalar>::Zero(d.vocab, d.dim);
        p.l1w = MatX<Scalar>::Zero(d.dim, d.hidden);
        p.l1b = VecX<Scalar>::Zero(d.hidden);
        p.l2w = MatX<Scalar>::Zero(d.hidden, d.out_dim);
        p.l2b = VecX<Scalar>::Zero(d.out_dim);
        return p;
    }

    /// Seeded init: N(0, 1/sqrt(fan_in)) weights, zero biases.
    static EncoderParamsT init(const EncoderDims& d, std::uint64_t seed) {
        Rng rng(seed);
        EncoderParamsT p = zeros(d);
        auto fill = [&rng](MatX<Scalar>& m, double scale) {
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c)
                    m(r, c) = static_cast<Scalar>(rng.normal() * scale);
        };
        fill(p.emb, 1.0 / std::sqrt(static_cast<double>(d.dim)));
        fill(p.l1w, 1.0 / std::sqrt(static_cast<double>(d.dim)));
        fill(p.l2w, 1.0 / std::sqrt(static_cast<double>(d.hidden)));
        return p;
    }

    WeightMapT<Scalar> to_weight_map() const {
        WeightMapT<Scalar> m;
        auto put_mat = [&m](const std::string& name, const MatX<Scalar>& x) {
            VecX<Scalar> flat(x.size());
            Eigen::Map<RowMajorMatX<Scalar>>(flat.data(), x.rows(), x.cols()) = x;
            m.insert(name, TensorT<Scalar>{{x.rows(), x.cols()}, std::move(flat)});
        };
        put_mat("emb", emb);
        put_mat("l1.w", l1w);
        m.insert("l1.b", TensorT<Scalar>{{l1b.size()}, l1b});
        put_mat("l2.w", l2w);
        m.insert("l2.b", TensorT<Scalar>{{l2b.size()}, l2b});
        return m;
    }

    static EncoderParamsT from_weight_map(const WeightMapT<Scalar>& m) {
        EncoderParamsT p;
        auto get_mat = [&m](const std::string& name) -> MatX<Scalar> {
            const auto& t = m.at(name);
            if (!t.is_matrix())
                throw std::invalid_argument("encoder tensor " + name + " must be rank-2");
            return t.mat();
        };
        p.emb = get_mat("emb");
        p.l1w = get_mat("l1.w");
        p.l1b = m.at("l1.b").data;
        p.l2w = get_mat("l2.w");
        p.l2b = m.at("l2.b").data;
        if (p.l1w.rows() != p.emb.cols() || p.l2w.rows() != p.l1w.cols() ||
            p.l1b.size() != p.l1w.cols() || p.l2b.size() != p.l2w.cols())
            throw std::invalid_argument("encoder weight map has inconsistent shapes");
        return p;
    }

    template <typename Other>
    EncoderParamsT<Other> cast() const {
        EncoderParamsT<Other> o;
        o.emb = emb.template cast<Other>();
        o.l1w = l1w.template cast<Other>();
        o.l1b = l1b.template cast<Other>();
        o.l2w = l2w.template cast<Other>();
        o.l2b = l2b.template cast<Other>();
        return o;
    }
};

using EncoderParams = EncoderParamsT<float>;

template <typename Scalar>
struct ForwardCacheT {
    VecX<Scalar> pooled;  // mean of token embedding rows
    VecX<Scalar> act;     // tanh(l1w^T pooled + l1b)
    VecX<Scalar> pre2;    // l2w^T act + l2b
    Scalar pre2_norm = Scalar(0);
    VecX<Scalar> out;  // pre2 / |pre2|
};

/// Mean-pool -> dense -> tanh -> dense -> L2 normalize. Output has unit norm.
template <typename Scalar>
VecX<Scalar> embed_cached(const EncoderParamsT<Scalar>& p,
                          std::span<const std::int32_t> tokens,
                          ForwardCacheT<Scalar>& cache) {
    if (tokens.empty()) throw std::invalid_argument("embed: empty token sequence");
    const auto vocab = p.emb.rows();
    cache.pooled = VecX<Scalar>::Zero(p.emb.cols());
    for (auto t : tokens) {
        if (t < 0 || t >= vocab)
            throw std::out_of_range("embed: token id " + std::to_string(t) +
                                    " outside vocab of " + std::to_string(vocab));
        cache.pooled += p.emb.row(t).transpose();
    }
    cache.pooled /= static_cast<Scalar>(tokens.size());
    cache.act = (p.l1w.transpose() * cache.pooled + p.l1b).array().tanh();
    cache.pre2 = p.l2w.transpose() * cache.act + p.l2b;
    cache.pre2_norm = cache.pre2.norm();
    if (cache.pre2_norm == Scalar(0))
        throw std::domain_error("embed: zero pre-normalization output");
    cache.out = cache.pre2 / cache.pre2_norm;
    return cache.out;
}

template <typename Scalar>
VecX<Scalar> embed(const EncoderParamsT<Scalar>& p, std::span<const std::int32_t> tokens) {
    ForwardCacheT<Scalar> cache;
    return embed_cached(p, tokens, cache);
}

namespace detail {

template <typename Scalar>
Scalar logsumexp(const std::vector<Scalar>& z) {
    Scalar m = z[0];
    for (Scalar v : z) m = std::max(m, v);
    Scalar s = Scalar(0);
    for (Scalar v : z) s += std::exp(v - m);
    return m + std::log(s);
}

/// Backprop one text's embedding gradient through its forward cache.
template <typename Scalar>
void backward_text(const EncoderParamsT<Scalar>& p, std::span<const std::int32_t> tokens,
                   const ForwardCacheT<Scalar>& c, const VecX<Scalar>& g_out,
                   EncoderParamsT<Scalar>& grad) {
    // y = pre2 / |pre2|  =>  dL/dpre2 = (g - (y.g) y) / |pre2|
    VecX<Scalar> g_pre2 = (g_out - c.out.dot(g_out) * c.out) / c.pre2_norm;
    grad.l2b += g_pre2;
    grad.l2w += c.act * g_pre2.transpose();
    VecX<Scalar> g_act = p.l2w * g_pre2;
    VecX<Scalar> g_pre1 =
        (Scalar(1) - c.act.array().square()).matrix().cwiseProduct(g_act);
    grad.l1b += g_pre1;
    grad.l1w += c.pooled * g_pre1.transpose();
    VecX<Scalar> g_pooled = p.l1w * g_pre1;
    const Scalar inv_len = Scalar(1) / static_cast<Scalar>(tokens.size());
    for (auto t : tokens) grad.emb.row(t) += (g_pooled * inv_len).transpose();
}

}  // namespace detail

/// InfoNCE-style loss at temperature tau: the positive text anchors, scored
/// against the query and the K negatives. K = 0 gives exactly zero loss.
template <typename Scalar>
Scalar contrastive_loss(const EncoderParamsT<Scalar>& p, const ContrastiveInstance& inst,
                        double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("contrastive_loss: tau must be > 0");
    const VecX<Scalar> eq = embed(p, std::span<const std::int32_t>(inst.query));
    const VecX<Scalar> ep = embed(p, std::span<const std::int32_t>(inst.positive));
    std::vector<Scalar> z;
    z.reserve(inst.negatives.size() + 1);
    const auto inv_tau = static_cast<Scalar>(1.0 / tau);
    z.push_back(ep.dot(eq) * inv_tau);
    for (const auto& neg : inst.negatives)
        z.push_back(ep.dot(embed(p, std::span<const std::int32_t>(neg))) * inv_tau);
    return -z[0] + detail::logsumexp(z);
}

template <typename Scalar>
struct LossAndGrad {
    Scalar loss = Scalar(0);
    EncoderParamsT<Scalar> grad;
};

/// Mean loss over the batch with the exact gradient for every parameter.
template <typename Scalar>
LossAndGrad<Scalar> loss_and_grad(const EncoderParamsT<Scalar>& p,
                                  const std::vector<ContrastiveInstance>& batch,
                                  double tau) {
    if (batch.empty()) throw std::invalid_argument("loss_and_grad: empty batch");
    if (!(tau > 0.0)) throw std::invalid_argument("loss_and_grad: tau must be > 0");
    LossAndGrad<Scalar> res;
    res.grad = EncoderParamsT<Scalar>::zeros(p.dims());
    const auto inv_tau = static_cast<Scalar>(1.0 / tau);

    std::vector<Scalar> losses;
    losses.reserve(batch.size());
    for (const auto& inst : batch) {
        ForwardCacheT<Scalar> cq, cp;
        const VecX<Scalar> eq =
            embed_cached(p, std::span<const std::int32_t>(inst.query), cq);
        const VecX<Scalar> ep =
            embed_cached(p, std::span<const std::int32_t>(inst.positive), cp);
        const std::size_t K = inst.negatives.size();
        std::vector<ForwardCacheT<Scalar>> cn(K);
        std::vector<VecX<Scalar>> en(K);
        std::vector<Scalar> z(K + 1);
        z[0] = ep.dot(eq) * inv_tau;
        for (std::size_t k = 0; k < K; ++k) {
            en[k] = embed_cached(p, std::span<const std::int32_t>(inst.negatives[k]),
                                 cn[k]);
            z[k + 1] = ep.dot(en[k]) * inv_tau;
        }
        const Scalar lse = detail::logsumexp(z);
        losses.push_back(-z[0] + lse);

        // softmax over logits; dL/dz_j = sigma_j - [j == 0]
        std::vector<Scalar> g(K + 1);
        for (std::size_t j = 0; j <= K; ++j) g[j] = std::exp(z[j] - lse);
        g[0] -= Scalar(1);

        const Scalar w = inv_tau / static_cast<Scalar>(batch.size());
        VecX<Scalar> g_ep = (g[0] * w) * eq;
        detail::backward_text(p, std::span<const std::int32_t>(inst.query), cq,
                              VecX<Scalar>((g[0] * w) * ep), res.grad);
        for (std::size_t k = 0; k < K; ++k) {
            g_ep += (g[k + 1] * w) * en[k];
            detail::backward_text(p, std::span<const std::int32_t>(inst.negatives[k]),
                                  cn[k], VecX<Scalar>((g[k + 1] * w) * ep), res.grad);
        }
        detail::backward_text(p, std::span<const std::int32_t>(inst.positive), cp, g_ep,
                              res.grad);
    }
    res.loss = pairwise_sum(losses.data(), losses.size()) /
               static_cast<Scalar>(losses.size());
    return res;
}

/// Diagonal Fisher from per-sample gradients (Eq. of merge::fisher_coefficients,
/// with this encoder's backward pass as the concrete oracle).
template <typename Scalar>
FisherCoefficientsT<Scalar> per_sample_grad_sq(const EncoderParamsT<Scalar>& p,
                                               const std::vector<ContrastiveInstance>& dataset,
                                               double tau) {
    std::function<WeightMapT<Scalar>(const ContrastiveInstance&)> oracle =
        [&](const ContrastiveInstance& inst) {
            return loss_and_grad(p, std::vector<ContrastiveInstance>{inst}, tau)
                .grad.to_weight_map();
        };
    return fisher_coefficients(oracle, dataset);
}

/// Accumulates the input Gram matrix of each dense layer over every text in
/// the dataset: l1.w sees pooled embeddings, l2.w sees tanh activations.
template <typename Scalar>
GramStatsT<Scalar> capture_gram(const EncoderParamsT<Scalar>& p,
                                const std::vector<ContrastiveInstance>& dataset) {
    if (dataset.empty()) throw std::invalid_argument("capture_gram: empty dataset");
    GramStatsT<Scalar> stats;
    const auto d = p.dims();
    stats.gram["l1.w"] = MatX<Scalar>::Zero(d.dim, d.dim);
    stats.gram["l2.w"] = MatX<Scalar>::Zero(d.hidden, d.hidden);
    stats.counts["l1.w"] = 0;
    stats.counts["l2.w"] = 0;
    auto accumulate = [&](std::span<const std::int32_t> tokens) {
        ForwardCacheT<Scalar> c;
        embed_cached(p, tokens, c);
        stats.gram["l1.w"].noalias() += c.pooled * c.pooled.transpose();
        stats.gram["l2.w"].noalias() += c.act * c.act.transpose();
        ++stats.counts["l1.w"];
        ++stats.counts["l2.w"];
    };
    for (const auto& inst : dataset) {
        accumulate(inst.query);
        accumulate(inst.positive);
        for (const auto& n : inst.negatives) accumulate(n);
    }
    return stats;
}

enum class EvalMetric { acc_at_1, spearman };

EvalMetric eval_metric_from_string(const std::string& s);
std::string to_string(EvalMetric m);

struct EvalResult {
    double value = 0.0;
    bool degenerate = false;  // constant predictions: spearman undefined, reported 0
};

/// acc_at_1: fraction of instances whose positive outranks every negative by
/// cosine to the query. spearman: rank correlation between predicted cosine
/// and gold graded similarity.
EvalResult evaluate(const EncoderParams& p, const LabeledEvalSet& evalset,
                    EvalMetric metric);

// ---- training ----

struct TrainConfig {
    int epochs = 3;
    int batch_size = 32;  // paper reference scale uses 256
    double lr = 1e-3;     // paper reference scale uses 1e-5
    double tau = 0.02;
    double warmup_ratio = 0.1;
    std::uint64_t seed = 0;
    std::string optimizer = "sgd";  // "sgd" | "adam"
};

struct TrainResult {
    std::vector<EncoderParams> epoch_checkpoints;  // one per epoch; back() is final
    std::vector<double> step_loss;
};

/// Deterministic trainer. Every batch is drawn from a single dataset
/// (task-homogeneous batching); linear warmup to lr over
/// ceil(warmup_ratio * total_steps) steps, constant after.
TrainResult train(const EncoderParams& initial, const TrainConfig& config,
                  const std::vector<Dataset>& datasets);

}  // namespace embmerge
