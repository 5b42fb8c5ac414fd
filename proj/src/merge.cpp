#include "embmerge/merge.hpp"

namespace embmerge {

MergeMethod merge_method_from_string(const std::string& s) {
    if (s == "average") return MergeMethod::average;
    if (s == "slerp") return MergeMethod::slerp;
    if (s == "ties") return MergeMethod::ties;
    if (s == "fisher") return MergeMethod::fisher;
    if (s == "regmean") return MergeMethod::regmean;
    throw std::invalid_argument("unknown merge method: " + s);
}

std::string to_string(MergeMethod m) {
    switch (m) {
        case MergeMethod::average: return "average";
        case MergeMethod::slerp: return "slerp";
        case MergeMethod::ties: return "ties";
        case MergeMethod::fisher: return "fisher";
        case MergeMethod::regmean: return "regmean";
    }
    return "?";
}

GridSearchResult grid_search(
    const std::vector<MergeConfig>& grid,
    const std::function<double(const MergeConfig&)>& eval_oracle) {
    if (grid.empty()) throw std::invalid_argument("grid_search: empty grid");
    GridSearchResult res;
    res.table.reserve(grid.size());
    bool any = false;
    for (const auto& cfg : grid) {
        GridSearchEntry e;
        e.config = cfg;
        try {
            e.score = eval_oracle(cfg);
            e.ok = true;
        } catch (const std::exception& ex) {
            e.error = ex.what();
            res.table.push_back(std::move(e));
            res.aborted = true;
            break;  // partial table preserved
        }
        if (!any || e.score > res.table[res.best_index].score) {
            res.best_index = res.table.size();
            any = true;
        }
        res.table.push_back(std::move(e));
    }
    if (!any && !res.table.empty()) res.best_index = 0;
    return res;
}

std::vector<MergeConfig> default_merge_grid(MergeMethod method) {
    std::vector<MergeConfig> grid;
    const std::vector<std::pair<double, double>> pairs = {
        {1, 5}, {2, 4}, {3, 3}, {4, 2}, {5, 1}};
    switch (method) {
        case MergeMethod::average:
            for (auto [a, b] : pairs) {
                MergeConfig c;
                c.method = method;
                c.weights = {a, b};
                grid.push_back(c);
            }
            break;
        case MergeMethod::slerp:
            for (auto [a, b] : pairs) {
                MergeConfig c;
                c.method = method;
                c.slerp_weights = {a, b};
                grid.push_back(c);
            }
            break;
        case MergeMethod::fisher:
            for (auto [a, b] : pairs) {
                MergeConfig c;
                c.method = method;
                c.fisher_lambdas = {a, b};
                grid.push_back(c);
            }
            break;
        case MergeMethod::ties:
            for (double lam : {0.8, 1.0, 1.2, 1.4, 1.6}) {
                MergeConfig c;
                c.method = method;
                c.ties_lambda = lam;
                grid.push_back(c);
            }
            break;
        case MergeMethod::regmean:
            for (double sigma : {0.0, 0.1, 0.2, 0.3, 0.4}) {
                MergeConfig c;
                c.method = method;
                c.regmean_sigma = sigma;
                grid.push_back(c);
            }
            break;
    }
    return grid;
}

}  // namespace embmerge
