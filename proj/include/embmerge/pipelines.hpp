#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "embmerge/encoder.hpp"
#include "embmerge/merge.hpp"
#include "embmerge/selfpos.hpp"

namespace embmerge {

enum class PipelineKind { separate, iterative };

struct PipelineTask {
    std::string name;
    Dataset train;
    LabeledEvalSet eval;
    EvalMetric metric = EvalMetric::acc_at_1;
};

/// How the trained models get merged: a fixed config, a grid search over the
/// method's default grid, or Self Positioning.
struct MergeStrategy {
    enum class Kind { fixed, gridsearch, selfpos };
    Kind kind = Kind::fixed;
    MergeConfig config;                                // fixed
    MergeMethod gridsearch_method = MergeMethod::slerp;
    SelfPosConfig selfpos;
    std::vector<double> probe_ratios;  // selfpos; defaults to equal proportions
    std::int64_t probe_size = 1024;    // paper-scale default is 32000
};

struct StageRecord {
    std::string name;
    std::string config_hash;
    std::string artifact;     // checkpoint stem relative to the run dir, if any
    std::string fingerprint;  // of the stage's checkpoint artifact
    double wall_ms = 0.0;
    bool reused = false;  // satisfied from a previous completed run
};

struct TaskScore {
    std::string task;
    std::string metric;
    double score = 0.0;
};

struct PipelineRun {
    PipelineKind kind = PipelineKind::separate;
    std::vector<StageRecord> stages;
    std::string final_checkpoint;  // stem relative to run dir
    std::string final_fingerprint;
    std::vector<TaskScore> scores;
    double average_score = 0.0;
    std::string merge_description;
};

struct PipelineOptions {
    std::filesystem::path run_dir;
    TrainConfig train;
    std::uint64_t seed = 0;
};

/// Trains one model per task from the shared backbone, merges the task
/// vectors, evaluates the merged model on every task. Stages are
/// content-addressed and reused when a completed run is replayed.
PipelineRun separate_merging(const EncoderParams& backbone,
                             const std::vector<PipelineTask>& tasks,
                             const MergeStrategy& strategy,
                             const PipelineOptions& options);

/// Trains the task sequence cumulatively (each stage initialized from the
/// previous stage's weights), extracts every stage's task vector against the
/// original backbone, merges the stage models. A single-task sequence returns
/// that model unmerged.
PipelineRun iterative_merging(const EncoderParams& backbone,
                              const std::vector<PipelineTask>& tasks,
                              const MergeStrategy& strategy,
                              const PipelineOptions& options);

}  // namespace embmerge
