#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <vector>

#include "embmerge/encoder.hpp"
#include "embmerge/synthdata.hpp"
#include "embmerge/task_vector.hpp"

namespace embmerge {

/// Loss grid over the 2-task interpolation plane. The backbone sits at the
/// bottom-left lattice point (0,0) with interpolation coefficients exactly
/// (0,0); V_s is placed below the image diagonal, V_r above, separated by
/// their weight-space angle, with the longer vector's axis coordinate at 0.7.
struct LandscapeGrid {
    int resolution = 20;
    int batch_size = 32;
    int steps = 200;
    std::array<double, 2> p_s{0, 0};
    std::array<double, 2> p_r{0, 0};
    // Row i, column j correspond to plane position (i, j) / (resolution - 1).
    MatX<double> loss;
    MatX<double> coef_s;
    MatX<double> coef_r;
    std::string convention = "V_s below diagonal, V_r above";
};

struct LandscapeConfig {
    int resolution = 20;  // desk scale: 10
    int steps = 200;      // desk scale: 20
    int batch_size = 32;
    double tau = 0.02;
    std::uint64_t seed = 0;
    int threads = 1;
};

LandscapeGrid build_landscape(const TaskVector& vs, const TaskVector& vr,
                              const WeightMap& base, const Dataset& probe,
                              const LandscapeConfig& config);

/// Interpolation coefficients (c_s, c_r) of an arbitrary plane position.
std::array<double, 2> landscape_coefficients(const LandscapeGrid& grid, double x,
                                             double y);

/// Mean probe loss at explicit coefficients, using the grid's fixed batch
/// sequence; the cell losses are exactly this function at lattice points.
double landscape_loss_at(const TaskVector& vs, const TaskVector& vr,
                         const WeightMap& base, const Dataset& probe,
                         const LandscapeConfig& config, double c_s, double c_r);

/// Bilinear interpolation of the stored grid at a plane position (clamped).
double landscape_interpolate(const LandscapeGrid& grid, double x, double y);

/// Plane position of a task vector lying in span(V_s, V_r): exact Gram solve
/// for its (c_s, c_r), mapped through p_s, p_r.
std::array<double, 2> project_to_plane(const LandscapeGrid& grid, const TaskVector& vs,
                                       const TaskVector& vr, const TaskVector& v);

void save_landscape_csv(const LandscapeGrid& grid, const std::filesystem::path& path);
void save_landscape_summary(const LandscapeGrid& grid, const std::filesystem::path& path);

// ---- diagnostic studies ----

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};

struct NormStudyResult {
    std::vector<std::array<double, 2>> points;  // (N_i, |V|)
    LinearFit fit;
};

/// Trains one model per size from the same backbone and fits |V| against N.
NormStudyResult norm_study(const std::function<Dataset(std::int64_t)>& task_generator,
                           const std::vector<std::int64_t>& sizes,
                           const TrainConfig& train_config, const EncoderParams& backbone);

struct DirectionStudyPoint {
    double size_ratio = 0.0;   // N_i / N_j
    double angle_ratio = 0.0;  // alpha_(i+j,i) / alpha_(i+j,j)
};

std::vector<DirectionStudyPoint> direction_study(
    const std::vector<std::pair<Dataset, Dataset>>& dataset_pairs,
    const TrainConfig& train_config, const EncoderParams& backbone);

struct ConflictStudyRow {
    std::size_t task = 0;
    double joint_score = 0.0;
    double best_solo_score = 0.0;
    double delta = 0.0;  // joint - best solo
};

std::vector<ConflictStudyRow> conflict_study(const std::vector<Dataset>& task_datasets,
                                             const TrainConfig& train_config,
                                             const std::vector<LabeledEvalSet>& evalsets,
                                             const std::vector<EvalMetric>& metrics,
                                             const EncoderParams& backbone);

// ---- task clustering (k-means over dataset signatures) ----

struct KMeansResult {
    std::vector<int> assignment;
    std::vector<VecX<double>> centroids;
    double inertia = 0.0;
    std::vector<double> inertia_history;  // winning restart, per iteration
};

KMeansResult kmeans(const std::vector<VecX<double>>& points, int k, int restarts,
                    int max_iter, std::uint64_t seed);

struct ClusterConfig {
    int k = 2;
    int samples_per_dataset = 100;
    int restarts = 10;
    int max_iter = 300;
    std::uint64_t seed = 0;
};

/// Embeds sampled queries and positives per dataset, mean-pools each side,
/// concatenates into a signature, then clusters the signatures.
KMeansResult cluster_tasks(const std::vector<Dataset>& datasets,
                           const EncoderParams& encoder_params,
                           const ClusterConfig& config);

}  // namespace embmerge
