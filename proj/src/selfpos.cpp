#include "embmerge/selfpos.hpp"

#include <json.hpp>

#include "embmerge/io_util.hpp"

namespace embmerge {

using ordered_json = nlohmann::ordered_json;

void save_selfpos_report(const OptimizeResult& result, const SelfPosConfig& config,
                         const std::filesystem::path& path) {
    ordered_json j;
    j["a_hat"] = result.a_hat;
    j["lambda_hat"] = result.lambda_hat;
    j["aborted"] = result.aborted;
    j["initial_holdout_objective"] = result.initial_holdout_objective;
    j["final_holdout_objective"] = result.final_holdout_objective;
    j["config"] = {{"mu", config.mu},
                   {"steps", config.steps},
                   {"lr", config.lr},
                   {"batch_size", config.batch_size},
                   {"tau", config.tau},
                   {"fd_eps_scale", config.fd_eps_scale},
                   {"seed", config.seed},
                   {"init_a", config.init_a},
                   {"init_lambda", config.init_lambda}};
    j["optimizer"] = {{"name", "adam"},
                      {"beta1", 0.9},
                      {"beta2", 0.999},
                      {"eps", 1e-8},
                      {"bias_correction", true}};
    ordered_json trace = ordered_json::array();
    for (const auto& t : result.trace)
        trace.push_back({{"step", t.step}, {"objective", t.objective}});
    j["trace"] = std::move(trace);
    atomic_write_file(path, j.dump(2) + "\n");
}

OptimizeResult load_selfpos_report(const std::filesystem::path& path,
                                   SelfPosConfig* config_out) {
    const auto j = ordered_json::parse(read_text_file(path));
    OptimizeResult r;
    r.a_hat = j.at("a_hat").get<std::vector<double>>();
    r.lambda_hat = j.at("lambda_hat").get<double>();
    r.aborted = j.at("aborted").get<bool>();
    r.initial_holdout_objective = j.at("initial_holdout_objective").get<double>();
    r.final_holdout_objective = j.at("final_holdout_objective").get<double>();
    for (const auto& t : j.at("trace"))
        r.trace.push_back(
            {t.at("step").get<std::int64_t>(), t.at("objective").get<double>()});
    if (config_out) {
        const auto& c = j.at("config");
        config_out->mu = c.at("mu").get<double>();
        config_out->steps = c.at("steps").get<int>();
        config_out->lr = c.at("lr").get<double>();
        config_out->batch_size = c.at("batch_size").get<int>();
        config_out->tau = c.at("tau").get<double>();
        config_out->fd_eps_scale = c.at("fd_eps_scale").get<double>();
        config_out->seed = c.at("seed").get<std::uint64_t>();
        config_out->init_a = c.at("init_a").get<double>();
        config_out->init_lambda = c.at("init_lambda").get<double>();
    }
    return r;
}

}  // namespace embmerge
