#include "embmerge/landscape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "embmerge/io_util.hpp"
#include "embmerge/rng.hpp"

namespace embmerge {

using ordered_json = nlohmann::ordered_json;

namespace {

/// Fixed probe-batch index sequence shared by every cell, so cell losses are
/// comparable: without-replacement epochs reshuffled from the seed.
std::vector<std::vector<std::size_t>> batch_sequence(std::size_t n_probe, int steps,
                                                     int batch, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> order(n_probe);
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::size_t cursor = n_probe;
    std::uint64_t epoch = 0;
    std::vector<std::vector<std::size_t>> seq(static_cast<std::size_t>(steps));
    for (auto& b : seq) {
        b.reserve(static_cast<std::size_t>(batch));
        for (int i = 0; i < batch; ++i) {
            if (cursor >= order.size()) {
                auto r = rng.derive(++epoch);
                r.shuffle(order);
                cursor = 0;
            }
            b.push_back(order[cursor++]);
        }
    }
    return seq;
}

double mean_loss_at(const TaskVector& vs, const TaskVector& vr, const WeightMap& base,
                    const Dataset& probe,
                    const std::vector<std::vector<std::size_t>>& batches, double tau,
                    double c_s, double c_r) {
    const TaskVector mix = lincomb<float>(
        {{static_cast<float>(c_s), &vs}, {static_cast<float>(c_r), &vr}});
    const auto params = EncoderParams::from_weight_map(apply_unchecked(base, mix));
    std::vector<double> step_means(batches.size());
    for (std::size_t s = 0; s < batches.size(); ++s) {
        std::vector<float> losses(batches[s].size());
        for (std::size_t i = 0; i < batches[s].size(); ++i)
            losses[i] = contrastive_loss(params, probe[batches[s][i]], tau);
        step_means[s] = static_cast<double>(pairwise_sum(losses.data(), losses.size())) /
                        static_cast<double>(losses.size());
    }
    return pairwise_sum(step_means.data(), step_means.size()) /
           static_cast<double>(step_means.size());
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const auto nt = static_cast<std::size_t>(
        std::min<std::size_t>(static_cast<std::size_t>(threads), n));
    std::vector<std::thread> pool;
    pool.reserve(nt);
    for (std::size_t t = 0; t < nt; ++t) {
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += nt) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace

LandscapeGrid build_landscape(const TaskVector& vs, const TaskVector& vr,
                              const WeightMap& base, const Dataset& probe,
                              const LandscapeConfig& config) {
    if (probe.empty()) throw std::invalid_argument("build_landscape: empty probe");
    if (config.resolution < 2)
        throw std::invalid_argument("build_landscape: resolution must be >= 2");
    const double alpha = angle(vs, vr);
    if (alpha < kParallelAngleThreshold)
        throw std::domain_error("build_landscape: task vectors are parallel");

    LandscapeGrid grid;
    grid.resolution = config.resolution;
    grid.batch_size = config.batch_size;
    grid.steps = config.steps;

    // V_s below the diagonal at angle pi/4 - alpha/2, V_r above at
    // pi/4 + alpha/2; the longer vector's dominant axis coordinate is 0.7.
    const double ns = norm(vs);
    const double nr = norm(vr);
    const double th_s = M_PI / 4.0 - alpha / 2.0;
    const double th_r = M_PI / 4.0 + alpha / 2.0;
    const double long_axis = std::cos(th_s);  // == sin(th_r)
    double len_s, len_r;
    if (ns >= nr) {
        len_s = 0.7 / long_axis;
        len_r = len_s * (nr / ns);
    } else {
        len_r = 0.7 / long_axis;
        len_s = len_r * (ns / nr);
    }
    grid.p_s = {len_s * std::cos(th_s), len_s * std::sin(th_s)};
    grid.p_r = {len_r * std::cos(th_r), len_r * std::sin(th_r)};

    const int R = config.resolution;
    grid.loss.resize(R, R);
    grid.coef_s.resize(R, R);
    grid.coef_r.resize(R, R);

    const auto batches =
        batch_sequence(probe.size(), config.steps, config.batch_size, config.seed);

    std::vector<std::pair<int, int>> cells;
    cells.reserve(static_cast<std::size_t>(R) * R);
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < R; ++j) cells.emplace_back(i, j);

    parallel_for(cells.size(), config.threads, [&](std::size_t idx) {
        const auto [i, j] = cells[idx];
        const double x = static_cast<double>(i) / (R - 1);
        const double y = static_cast<double>(j) / (R - 1);
        const auto c = landscape_coefficients(grid, x, y);
        grid.coef_s(i, j) = c[0];
        grid.coef_r(i, j) = c[1];
        grid.loss(i, j) =
            mean_loss_at(vs, vr, base, probe, batches, config.tau, c[0], c[1]);
    });
    return grid;
}

std::array<double, 2> landscape_coefficients(const LandscapeGrid& grid, double x,
                                             double y) {
    // Solve [p_s p_r] c = u.
    const double a = grid.p_s[0], b = grid.p_r[0];
    const double c = grid.p_s[1], d = grid.p_r[1];
    const double det = a * d - b * c;
    if (std::abs(det) < 1e-12)
        throw std::domain_error("landscape: singular plane basis");
    return {(d * x - b * y) / det, (a * y - c * x) / det};
}

double landscape_loss_at(const TaskVector& vs, const TaskVector& vr,
                         const WeightMap& base, const Dataset& probe,
                         const LandscapeConfig& config, double c_s, double c_r) {
    const auto batches =
        batch_sequence(probe.size(), config.steps, config.batch_size, config.seed);
    return mean_loss_at(vs, vr, base, probe, batches, config.tau, c_s, c_r);
}

double landscape_interpolate(const LandscapeGrid& grid, double x, double y) {
    const int R = grid.resolution;
    const double fx = std::clamp(x, 0.0, 1.0) * (R - 1);
    const double fy = std::clamp(y, 0.0, 1.0) * (R - 1);
    const int i0 = std::min(static_cast<int>(fx), R - 2);
    const int j0 = std::min(static_cast<int>(fy), R - 2);
    const double tx = fx - i0;
    const double ty = fy - j0;
    return (1 - tx) * (1 - ty) * grid.loss(i0, j0) +
           tx * (1 - ty) * grid.loss(i0 + 1, j0) +
           (1 - tx) * ty * grid.loss(i0, j0 + 1) + tx * ty * grid.loss(i0 + 1, j0 + 1);
}

std::array<double, 2> project_to_plane(const LandscapeGrid& grid, const TaskVector& vs,
                                       const TaskVector& vr, const TaskVector& v) {
    // Gram solve: [<s,s> <s,r>; <r,s> <r,r>] c = [<s,v>; <r,v>]
    const double ss = static_cast<double>(global_dot(vs.delta, vs.delta));
    const double sr = static_cast<double>(global_dot(vs.delta, vr.delta));
    const double rr = static_cast<double>(global_dot(vr.delta, vr.delta));
    const double sv = static_cast<double>(global_dot(vs.delta, v.delta));
    const double rv = static_cast<double>(global_dot(vr.delta, v.delta));
    const double det = ss * rr - sr * sr;
    if (std::abs(det) < 1e-18)
        throw std::domain_error("project_to_plane: degenerate span");
    const double c_s = (rr * sv - sr * rv) / det;
    const double c_r = (ss * rv - sr * sv) / det;
    return {c_s * grid.p_s[0] + c_r * grid.p_r[0],
            c_s * grid.p_s[1] + c_r * grid.p_r[1]};
}

void save_landscape_csv(const LandscapeGrid& grid, const std::filesystem::path& path) {
    CsvWriter csv({"i", "j", "x", "y", "coef_s", "coef_r", "loss"});
    const int R = grid.resolution;
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < R; ++j)
            csv.add_row(csv.number_row({static_cast<double>(i), static_cast<double>(j),
                                        static_cast<double>(i) / (R - 1),
                                        static_cast<double>(j) / (R - 1),
                                        grid.coef_s(i, j), grid.coef_r(i, j),
                                        grid.loss(i, j)}));
    csv.write(path);
}

void save_landscape_summary(const LandscapeGrid& grid,
                            const std::filesystem::path& path) {
    ordered_json j;
    j["resolution"] = grid.resolution;
    j["batch_size"] = grid.batch_size;
    j["steps"] = grid.steps;
    j["p_s"] = grid.p_s;
    j["p_r"] = grid.p_r;
    j["convention"] = grid.convention;
    j["min_loss"] = grid.loss.minCoeff();
    j["max_loss"] = grid.loss.maxCoeff();
    if (grid.resolution != 20 || grid.steps != 200)
        j["note"] = "desk-scale grid (reference settings: 20x20, 200 steps, batch 32)";
    atomic_write_file(path, j.dump(2) + "\n");
}

// ---- studies ----

namespace {

LinearFit fit_line(const std::vector<std::array<double, 2>>& pts) {
    const auto n = static_cast<double>(pts.size());
    double sx = 0, sy = 0;
    for (const auto& p : pts) {
        sx += p[0];
        sy += p[1];
    }
    const double mx = sx / n, my = sy / n;
    double sxx = 0, sxy = 0, syy = 0;
    for (const auto& p : pts) {
        sxx += (p[0] - mx) * (p[0] - mx);
        sxy += (p[0] - mx) * (p[1] - my);
        syy += (p[1] - my) * (p[1] - my);
    }
    if (sxx == 0.0) throw std::domain_error("degenerate fit: all sizes equal");
    if (syy == 0.0) throw std::domain_error("degenerate fit: all norms equal");
    LinearFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.r2 = (sxy * sxy) / (sxx * syy);
    return f;
}

}  // namespace

NormStudyResult norm_study(const std::function<Dataset(std::int64_t)>& task_generator,
                           const std::vector<std::int64_t>& sizes,
                           const TrainConfig& train_config,
                           const EncoderParams& backbone) {
    if (sizes.size() < 2) throw std::invalid_argument("norm_study: need >= 2 sizes");
    for (std::size_t i = 1; i < sizes.size(); ++i)
        if (sizes[i] <= sizes[i - 1])
            throw std::invalid_argument("norm_study: sizes must be strictly increasing");

    const WeightMap base_map = backbone.to_weight_map();
    NormStudyResult res;
    for (const auto sz : sizes) {
        const Dataset data = task_generator(sz);
        auto trained = train(backbone, train_config, {data});
        const TaskVector v =
            extract(trained.epoch_checkpoints.back().to_weight_map(), base_map);
        res.points.push_back({static_cast<double>(sz), norm(v)});
    }
    res.fit = fit_line(res.points);
    return res;
}

std::vector<DirectionStudyPoint> direction_study(
    const std::vector<std::pair<Dataset, Dataset>>& dataset_pairs,
    const TrainConfig& train_config, const EncoderParams& backbone) {
    const WeightMap base_map = backbone.to_weight_map();
    std::vector<DirectionStudyPoint> out;
    for (const auto& [di, dj] : dataset_pairs) {
        auto solo_i = train(backbone, train_config, {di});
        auto solo_j = train(backbone, train_config, {dj});
        auto joint = train(backbone, train_config, {di, dj});
        const TaskVector vi =
            extract(solo_i.epoch_checkpoints.back().to_weight_map(), base_map);
        const TaskVector vj =
            extract(solo_j.epoch_checkpoints.back().to_weight_map(), base_map);
        const TaskVector vij =
            extract(joint.epoch_checkpoints.back().to_weight_map(), base_map);
        DirectionStudyPoint p;
        p.size_ratio = static_cast<double>(di.size()) / static_cast<double>(dj.size());
        p.angle_ratio = angle(vij, vi) / angle(vij, vj);
        out.push_back(p);
    }
    return out;
}

std::vector<ConflictStudyRow> conflict_study(const std::vector<Dataset>& task_datasets,
                                             const TrainConfig& train_config,
                                             const std::vector<LabeledEvalSet>& evalsets,
                                             const std::vector<EvalMetric>& metrics,
                                             const EncoderParams& backbone) {
    if (task_datasets.size() < 2)
        throw std::invalid_argument("conflict_study: need >= 2 tasks");
    if (evalsets.size() != task_datasets.size() || metrics.size() != task_datasets.size())
        throw std::invalid_argument("conflict_study: evalsets/metrics length mismatch");

    std::vector<EncoderParams> solos;
    for (const auto& d : task_datasets)
        solos.push_back(train(backbone, train_config, {d}).epoch_checkpoints.back());
    const EncoderParams joint =
        train(backbone, train_config, task_datasets).epoch_checkpoints.back();

    std::vector<ConflictStudyRow> rows;
    for (std::size_t t = 0; t < task_datasets.size(); ++t) {
        ConflictStudyRow row;
        row.task = t;
        row.joint_score = evaluate(joint, evalsets[t], metrics[t]).value;
        row.best_solo_score = -1e30;
        for (const auto& solo : solos)
            row.best_solo_score =
                std::max(row.best_solo_score, evaluate(solo, evalsets[t], metrics[t]).value);
        row.delta = row.joint_score - row.best_solo_score;
        rows.push_back(row);
    }
    return rows;
}

// ---- k-means ----

namespace {

double sq_dist(const VecX<double>& a, const VecX<double>& b) {
    return (a - b).squaredNorm();
}

struct SingleRun {
    std::vector<int> assignment;
    std::vector<VecX<double>> centroids;
    double inertia = 0.0;
    std::vector<double> inertia_history;
};

SingleRun kmeans_once(const std::vector<VecX<double>>& pts, int k, int max_iter,
                      Rng& rng) {
    const std::size_t n = pts.size();
    std::vector<VecX<double>> centroids;
    centroids.reserve(static_cast<std::size_t>(k));

    // k-means++ seeding
    centroids.push_back(pts[rng.uniform_index(n)]);
    std::vector<double> d2(n);
    while (centroids.size() < static_cast<std::size_t>(k)) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = sq_dist(pts[i], centroids[0]);
            for (std::size_t c = 1; c < centroids.size(); ++c)
                best = std::min(best, sq_dist(pts[i], centroids[c]));
            d2[i] = best;
            total += best;
        }
        if (total <= 0.0) {
            centroids.push_back(pts[rng.uniform_index(n)]);
            continue;
        }
        double target = rng.uniform() * total;
        std::size_t pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
            target -= d2[i];
            if (target <= 0.0) {
                pick = i;
                break;
            }
        }
        centroids.push_back(pts[pick]);
    }

    SingleRun run;
    run.assignment.assign(n, -1);
    for (int iter = 0; iter < max_iter; ++iter) {
        bool changed = false;
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double bd = sq_dist(pts[i], centroids[0]);
            for (int c = 1; c < k; ++c) {
                const double d = sq_dist(pts[i], centroids[static_cast<std::size_t>(c)]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (run.assignment[i] != best) {
                run.assignment[i] = best;
                changed = true;
            }
            inertia += bd;
        }
        run.inertia_history.push_back(inertia);
        run.inertia = inertia;
        if (!changed && iter > 0) break;

        std::vector<VecX<double>> sums(static_cast<std::size_t>(k),
                                       VecX<double>::Zero(pts[0].size()));
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        for (std::size_t i = 0; i < n; ++i) {
            sums[static_cast<std::size_t>(run.assignment[i])] += pts[i];
            ++counts[static_cast<std::size_t>(run.assignment[i])];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                centroids[static_cast<std::size_t>(c)] =
                    sums[static_cast<std::size_t>(c)] /
                    counts[static_cast<std::size_t>(c)];
            } else {
                // Empty cluster: re-seed at the point farthest from its centroid.
                std::size_t far = 0;
                double fd = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = sq_dist(
                        pts[i],
                        centroids[static_cast<std::size_t>(run.assignment[i])]);
                    if (d > fd) {
                        fd = d;
                        far = i;
                    }
                }
                centroids[static_cast<std::size_t>(c)] = pts[far];
            }
        }
    }
    run.centroids = std::move(centroids);
    return run;
}

}  // namespace

KMeansResult kmeans(const std::vector<VecX<double>>& points, int k, int restarts,
                    int max_iter, std::uint64_t seed) {
    if (points.empty()) throw std::invalid_argument("kmeans: no points");
    if (k <= 0 || static_cast<std::size_t>(k) > points.size())
        throw std::invalid_argument("kmeans: k out of range");
    Rng rng(seed);
    KMeansResult best;
    bool have = false;
    for (int r = 0; r < restarts; ++r) {
        Rng rr = rng.derive(static_cast<std::uint64_t>(r) + 1);
        SingleRun run = kmeans_once(points, k, max_iter, rr);
        if (!have || run.inertia < best.inertia) {
            best.assignment = run.assignment;
            best.centroids = run.centroids;
            best.inertia = run.inertia;
            best.inertia_history = run.inertia_history;
            have = true;
        }
    }
    return best;
}

KMeansResult cluster_tasks(const std::vector<Dataset>& datasets,
                           const EncoderParams& encoder_params,
                           const ClusterConfig& config) {
    if (config.k > static_cast<int>(datasets.size()))
        throw std::invalid_argument("cluster_tasks: k exceeds dataset count");
    std::vector<VecX<double>> signatures;
    signatures.reserve(datasets.size());
    Rng rng(config.seed);
    const int out_dim = encoder_params.dims().out_dim;
    for (std::size_t d = 0; d < datasets.size(); ++d) {
        if (datasets[d].empty())
            throw std::invalid_argument("cluster_tasks: empty dataset");
        Rng r = rng.derive(d + 1);
        std::vector<std::size_t> idx(datasets[d].size());
        std::iota(idx.begin(), idx.end(), std::size_t(0));
        r.shuffle(idx);
        const std::size_t take = std::min<std::size_t>(
            datasets[d].size(), static_cast<std::size_t>(config.samples_per_dataset));
        VecX<double> q_mean = VecX<double>::Zero(out_dim);
        VecX<double> p_mean = VecX<double>::Zero(out_dim);
        for (std::size_t i = 0; i < take; ++i) {
            const auto& inst = datasets[d][idx[i]];
            q_mean += embed(encoder_params, std::span<const std::int32_t>(inst.query))
                          .cast<double>();
            p_mean += embed(encoder_params, std::span<const std::int32_t>(inst.positive))
                          .cast<double>();
        }
        q_mean /= static_cast<double>(take);
        p_mean /= static_cast<double>(take);
        VecX<double> sig(2 * out_dim);
        sig << q_mean, p_mean;
        signatures.push_back(std::move(sig));
    }
    return kmeans(signatures, config.k, config.restarts, config.max_iter, config.seed);
}

}  // namespace embmerge
