#include "embmerge/pipelines.hpp"

#include <chrono>
#include <numeric>

#include <json.hpp>

#include "embmerge/io_util.hpp"
#include "embmerge/tensorio.hpp"

namespace embmerge {

using ordered_json = nlohmann::ordered_json;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string hash_train_config(const TrainConfig& c) {
    ordered_json j = {{"epochs", c.epochs},     {"batch_size", c.batch_size},
                      {"lr", c.lr},             {"tau", c.tau},
                      {"warmup_ratio", c.warmup_ratio}, {"seed", c.seed},
                      {"optimizer", c.optimizer}};
    return content_hash(j.dump());
}

std::string hash_dataset(const Dataset& d) {
    // Cheap structural digest: sizes plus a token sample; datasets here are
    // deterministic per seed so this is enough to key a stage.
    ordered_json j;
    j["n"] = d.size();
    std::uint64_t acc = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (auto t : d[i].query) acc = acc * 1099511628211ULL + static_cast<std::uint64_t>(t);
        for (auto t : d[i].positive) acc = acc * 1099511628211ULL + static_cast<std::uint64_t>(t);
        for (const auto& n : d[i].negatives)
            for (auto t : n) acc = acc * 1099511628211ULL + static_cast<std::uint64_t>(t);
    }
    j["tokens"] = acc;
    return content_hash(j.dump());
}

std::string describe_strategy(const MergeStrategy& s) {
    switch (s.kind) {
        case MergeStrategy::Kind::fixed:
            return "fixed:" + to_string(s.config.method);
        case MergeStrategy::Kind::gridsearch:
            return "gridsearch:" + to_string(s.gridsearch_method);
        case MergeStrategy::Kind::selfpos:
            return "selfpos";
    }
    return "?";
}

std::string hash_strategy(const MergeStrategy& s) {
    ordered_json j;
    j["kind"] = describe_strategy(s);
    j["config"] = {{"method", to_string(s.config.method)},
                   {"weights", s.config.weights},
                   {"slerp_weights", s.config.slerp_weights},
                   {"ties_lambda", s.config.ties_lambda},
                   {"trim_fraction", s.config.trim_fraction},
                   {"fisher_lambdas", s.config.fisher_lambdas},
                   {"regmean_sigma", s.config.regmean_sigma}};
    j["selfpos"] = {{"mu", s.selfpos.mu},
                    {"steps", s.selfpos.steps},
                    {"lr", s.selfpos.lr},
                    {"batch_size", s.selfpos.batch_size},
                    {"seed", s.selfpos.seed}};
    j["probe_ratios"] = s.probe_ratios;
    j["probe_size"] = s.probe_size;
    return content_hash(j.dump());
}

/// Stage log persisted as run.json; append-only across resumed runs.
class RunLog {
public:
    RunLog(std::filesystem::path run_dir, PipelineKind kind, std::uint64_t seed)
        : dir_(std::move(run_dir)), kind_(kind), seed_(seed) {
        std::filesystem::create_directories(dir_ / "ckpt");
        std::filesystem::create_directories(dir_ / "reports");
        const auto path = dir_ / "run.json";
        if (std::filesystem::exists(path)) {
            const auto j = ordered_json::parse(read_text_file(path));
            for (const auto& s : j.at("stages")) {
                StageRecord r;
                r.name = s.at("name").get<std::string>();
                r.config_hash = s.at("config_hash").get<std::string>();
                r.artifact = s.at("artifact").get<std::string>();
                r.fingerprint = s.at("fingerprint").get<std::string>();
                r.wall_ms = s.at("wall_ms").get<double>();
                prior_.push_back(std::move(r));
            }
        }
    }

    const std::filesystem::path& dir() const { return dir_; }

    /// Returns a prior completed record if its config hash matches and the
    /// artifact still verifies (or has no artifact).
    const StageRecord* find_reusable(const std::string& name,
                                     const std::string& config_hash) const {
        for (const auto& r : prior_) {
            if (r.name != name || r.config_hash != config_hash) continue;
            if (r.artifact.empty()) return &r;
            try {
                const auto loaded = load_checkpoint_full(dir_ / r.artifact);
                if (loaded.manifest.fingerprint == r.fingerprint) return &r;
            } catch (const std::exception&) {
                return nullptr;
            }
        }
        return nullptr;
    }

    void record(StageRecord r) { stages_.push_back(std::move(r)); }

    void finalize(const PipelineRun& run) {
        ordered_json j;
        j["pipeline"] = kind_ == PipelineKind::separate ? "separate" : "iterative";
        j["seed"] = seed_;
        j["merge"] = run.merge_description;
        j["stages"] = ordered_json::array();
        for (const auto& s : stages_) {
            j["stages"].push_back({{"name", s.name},
                                   {"config_hash", s.config_hash},
                                   {"artifact", s.artifact},
                                   {"fingerprint", s.fingerprint},
                                   {"wall_ms", s.wall_ms},
                                   {"reused", s.reused}});
        }
        j["final"] = {{"checkpoint", run.final_checkpoint},
                      {"fingerprint", run.final_fingerprint},
                      {"average_score", run.average_score}};
        atomic_write_file(dir_ / "run.json", j.dump(2) + "\n");
    }

    const std::vector<StageRecord>& stages() const { return stages_; }

private:
    std::filesystem::path dir_;
    PipelineKind kind_;
    std::uint64_t seed_;
    std::vector<StageRecord> prior_;
    std::vector<StageRecord> stages_;
};

/// Runs (or reuses) a training stage producing a checkpoint artifact.
EncoderParams train_stage(RunLog& log, const std::string& stage_name,
                          const std::string& config_hash, const EncoderParams& init,
                          const TrainConfig& cfg, const std::vector<Dataset>& data) {
    const std::string artifact = "ckpt/" + stage_name;
    if (const auto* prior = log.find_reusable(stage_name, config_hash)) {
        StageRecord r = *prior;
        r.reused = true;
        log.record(r);
        return EncoderParams::from_weight_map(load_checkpoint(log.dir() / artifact));
    }
    const auto t0 = Clock::now();
    auto result = train(init, cfg, data);
    const auto& final_params = result.epoch_checkpoints.back();
    const auto manifest =
        save_checkpoint(final_params.to_weight_map(), log.dir() / artifact);
    StageRecord r;
    r.name = stage_name;
    r.config_hash = config_hash;
    r.artifact = artifact;
    r.fingerprint = manifest.fingerprint;
    r.wall_ms = ms_since(t0);
    log.record(std::move(r));
    return final_params;
}

double mean_eval(const EncoderParams& model, const std::vector<PipelineTask>& tasks,
                 std::vector<TaskScore>* out) {
    std::vector<double> vals;
    for (const auto& t : tasks) {
        const double s = evaluate(model, t.eval, t.metric).value;
        vals.push_back(s);
        if (out) out->push_back({t.name, to_string(t.metric), s});
    }
    return std::accumulate(vals.begin(), vals.end(), 0.0) /
           static_cast<double>(vals.size());
}

/// Merges the task vectors under the given strategy. Fisher/RegMean stats are
/// computed from each stage model on its own training data.
TaskVector merge_vectors(const MergeStrategy& strategy,
                         const std::vector<TaskVector>& vectors,
                         const std::vector<EncoderParams>& models,
                         const std::vector<PipelineTask>& tasks,
                         const EncoderParams& backbone, const WeightMap& base_map,
                         const TrainConfig& train_cfg, RunLog& log,
                         std::string* description) {
    const std::size_t n = vectors.size();
    auto run_config = [&](const MergeConfig& cfg) -> TaskVector {
        switch (cfg.method) {
            case MergeMethod::average: {
                auto w = cfg.weights;
                if (w.empty()) w.assign(n, 1.0);
                return average_merge(vectors, w);
            }
            case MergeMethod::slerp: {
                auto a = cfg.slerp_weights;
                if (a.empty()) a.assign(n, 1.0);
                return n == 2 ? slerp_pair(vectors[0], vectors[1], a[0], a[1])
                              : slerp_iterative(vectors, a);
            }
            case MergeMethod::ties:
                return ties_merge(vectors, cfg.trim_fraction, cfg.ties_lambda);
            case MergeMethod::fisher: {
                std::vector<FisherCoefficients> fishers;
                for (std::size_t i = 0; i < n; ++i)
                    fishers.push_back(
                        per_sample_grad_sq(models[i], tasks[i].train, train_cfg.tau));
                auto lam = cfg.fisher_lambdas;
                if (lam.empty()) lam.assign(n, 1.0);
                return fisher_merge(vectors, fishers, lam);
            }
            case MergeMethod::regmean: {
                std::vector<GramStats> grams;
                for (std::size_t i = 0; i < n; ++i)
                    grams.push_back(capture_gram(models[i], tasks[i].train));
                return regmean_merge(vectors, grams, cfg.regmean_sigma);
            }
        }
        throw std::logic_error("unreachable merge method");
    };

    switch (strategy.kind) {
        case MergeStrategy::Kind::fixed: {
            *description = "fixed " + to_string(strategy.config.method);
            return run_config(strategy.config);
        }
        case MergeStrategy::Kind::gridsearch: {
            const auto grid = default_merge_grid(strategy.gridsearch_method);
            auto oracle = [&](const MergeConfig& cfg) {
                const auto merged = run_config(cfg);
                const auto model =
                    EncoderParams::from_weight_map(apply(base_map, merged));
                return mean_eval(model, tasks, nullptr);
            };
            const auto result = grid_search(grid, oracle);
            if (result.aborted)
                throw std::runtime_error("pipeline grid search aborted: " +
                                         result.table.back().error);
            CsvWriter csv({"index", "score"});
            for (std::size_t i = 0; i < result.table.size(); ++i)
                csv.add_row(csv.number_row(
                    {static_cast<double>(i), result.table[i].score}));
            csv.write(log.dir() / "reports" / "gridsearch.csv");
            *description = "gridsearch " + to_string(strategy.gridsearch_method) +
                           " best=" + std::to_string(result.best_index);
            return run_config(result.table[result.best_index].config);
        }
        case MergeStrategy::Kind::selfpos: {
            std::vector<Dataset> sources;
            std::vector<std::string> names;
            for (const auto& t : tasks) {
                sources.push_back(t.train);
                names.push_back(t.name);
            }
            auto ratios = strategy.probe_ratios;
            if (ratios.empty()) ratios.assign(sources.size(), 1.0);
            const auto probe = build_probe(sources, names, ratios, strategy.probe_size,
                                           strategy.selfpos.seed);
            save_probe(probe, log.dir() / "reports" / "probe");
            const auto result = optimize(vectors, base_map, probe, strategy.selfpos);
            save_selfpos_report(result, strategy.selfpos,
                                log.dir() / "reports" / "selfpos.json");
            if (result.aborted)
                throw std::runtime_error("self positioning aborted (non-finite objective)");
            *description = "selfpos mu=" + format_number(strategy.selfpos.mu);
            return merged_position(vectors, result.a_hat, result.lambda_hat);
        }
    }
    throw std::logic_error("unreachable merge strategy");
    (void)backbone;
}

PipelineRun finish_run(RunLog& log, PipelineKind kind, const MergeStrategy& strategy,
                       const TaskVector& merged, const WeightMap& base_map,
                       const std::vector<PipelineTask>& tasks,
                       const std::string& description) {
    PipelineRun run;
    run.kind = kind;
    run.merge_description = description;

    const auto merged_map = apply(base_map, merged);
    const auto manifest = save_checkpoint(merged_map, log.dir() / "ckpt/merged");
    save_task_vector(merged, log.dir() / "ckpt/merged_tv");
    run.final_checkpoint = "ckpt/merged";
    run.final_fingerprint = manifest.fingerprint;

    const auto model = EncoderParams::from_weight_map(merged_map);
    run.average_score = mean_eval(model, tasks, &run.scores);

    CsvWriter csv({"task", "metric", "score"});
    for (const auto& s : run.scores)
        csv.add_row({s.task, s.metric, format_number(s.score)});
    csv.write(log.dir() / "reports" / "scores.csv");

    ordered_json js;
    js["merge"] = description;
    js["average_score"] = run.average_score;
    js["scores"] = ordered_json::array();
    for (const auto& s : run.scores)
        js["scores"].push_back({{"task", s.task}, {"metric", s.metric}, {"score", s.score}});
    atomic_write_file(log.dir() / "reports" / "scores.json", js.dump(2) + "\n");

    run.stages = log.stages();
    log.finalize(run);
    (void)strategy;
    return run;
}

}  // namespace

PipelineRun separate_merging(const EncoderParams& backbone,
                             const std::vector<PipelineTask>& tasks,
                             const MergeStrategy& strategy,
                             const PipelineOptions& options) {
    if (tasks.size() < 2)
        throw std::invalid_argument("separate_merging: need >= 2 datasets");
    RunLog log(options.run_dir, PipelineKind::separate, options.seed);

    const WeightMap base_map = backbone.to_weight_map();
    const std::string base_fp = fingerprint(base_map);
    save_checkpoint(base_map, log.dir() / "ckpt/backbone");

    std::vector<EncoderParams> models;
    std::vector<TaskVector> vectors;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const auto& task = tasks[i];
        TrainConfig cfg = options.train;
        cfg.seed = Rng(options.seed).derive(i + 1).next_u64();
        const std::string h =
            content_hash(hash_train_config(cfg) + hash_dataset(task.train) + base_fp);
        models.push_back(train_stage(log, "solo_" + task.name, h, backbone, cfg,
                                     {task.train}));
        vectors.push_back(extract(models.back().to_weight_map(), base_map));
        save_task_vector(vectors.back(), log.dir() / ("ckpt/tv_" + task.name));
    }

    std::string description;
    const auto t0 = Clock::now();
    const TaskVector merged =
        merge_vectors(strategy, vectors, models, tasks, backbone, base_map,
                      options.train, log, &description);
    StageRecord merge_rec;
    merge_rec.name = "merge";
    merge_rec.config_hash = hash_strategy(strategy);
    merge_rec.wall_ms = ms_since(t0);
    log.record(std::move(merge_rec));

    return finish_run(log, PipelineKind::separate, strategy, merged, base_map, tasks,
                      description);
}

PipelineRun iterative_merging(const EncoderParams& backbone,
                              const std::vector<PipelineTask>& tasks,
                              const MergeStrategy& strategy,
                              const PipelineOptions& options) {
    if (tasks.empty())
        throw std::invalid_argument("iterative_merging: need >= 1 dataset");
    RunLog log(options.run_dir, PipelineKind::iterative, options.seed);

    const WeightMap base_map = backbone.to_weight_map();
    const std::string base_fp = fingerprint(base_map);
    save_checkpoint(base_map, log.dir() / "ckpt/backbone");

    // Cumulative fine-tuning; every stage's task vector is measured against
    // the original backbone.
    std::vector<EncoderParams> models;
    std::vector<TaskVector> vectors;
    EncoderParams current = backbone;
    std::string chain_hash = base_fp;
    for (std::size_t s = 0; s < tasks.size(); ++s) {
        TrainConfig cfg = options.train;
        cfg.seed = Rng(options.seed).derive(1000 + s).next_u64();
        chain_hash = content_hash(chain_hash + hash_train_config(cfg) +
                                  hash_dataset(tasks[s].train));
        current = train_stage(log, "stage_" + std::to_string(s) + "_" + tasks[s].name,
                              chain_hash, current, cfg, {tasks[s].train});
        models.push_back(current);
        vectors.push_back(extract(current.to_weight_map(), base_map));
        save_task_vector(vectors.back(),
                         log.dir() / ("ckpt/tv_stage_" + std::to_string(s)));
    }

    if (tasks.size() == 1) {
        // No merge: the run's final model is the single stage model.
        PipelineRun run;
        run.kind = PipelineKind::iterative;
        run.merge_description = "none (single stage)";
        const auto map = models.back().to_weight_map();
        const auto manifest = save_checkpoint(map, log.dir() / "ckpt/merged");
        run.final_checkpoint = "ckpt/merged";
        run.final_fingerprint = manifest.fingerprint;
        run.average_score = mean_eval(models.back(), tasks, &run.scores);
        CsvWriter csv({"task", "metric", "score"});
        for (const auto& sc : run.scores)
            csv.add_row({sc.task, sc.metric, format_number(sc.score)});
        csv.write(log.dir() / "reports" / "scores.csv");
        run.stages = log.stages();
        log.finalize(run);
        return run;
    }

    std::string description;
    const auto t0 = Clock::now();
    const TaskVector merged =
        merge_vectors(strategy, vectors, models, tasks, backbone, base_map,
                      options.train, log, &description);
    StageRecord merge_rec;
    merge_rec.name = "merge";
    merge_rec.config_hash = hash_strategy(strategy);
    merge_rec.wall_ms = ms_since(t0);
    log.record(std::move(merge_rec));

    return finish_run(log, PipelineKind::iterative, strategy, merged, base_map, tasks,
                      description);
}

}  // namespace embmerge
