#include <doctest.h>

#include <cmath>

#include "embmerge/merge.hpp"
#include "test_support.hpp"

using namespace embmerge;

namespace {

template <typename S>
TaskVectorT<S> tv(const std::vector<S>& v, const std::string& name = "w") {
    WeightMapT<S> m;
    VecX<S> d(static_cast<std::int64_t>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) d[static_cast<std::int64_t>(i)] = v[i];
    m.insert(name, TensorT<S>{{static_cast<std::int64_t>(v.size())}, d});
    return TaskVectorT<S>{std::move(m), "base"};
}

TaskVectorT<float> random_tv(Rng& rng, int n) {
    std::vector<float> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return tv<float>(v);
}

}  // namespace

// ---- average ----

TEST_CASE("average merge of equal-weight copies is the vector itself") {
    const auto v = tv<float>({1, -2, 3});
    const auto m = average_merge<float>({v, v}, {1, 1});
    CHECK(m.delta.at("w").data.isApprox(v.delta.at("w").data));
}

TEST_CASE("average merge hand value") {
    const auto m = average_merge<float>({tv<float>({2, 0}), tv<float>({0, 4})}, {1, 1});
    CHECK(m.delta.at("w").data[0] == doctest::Approx(1));
    CHECK(m.delta.at("w").data[1] == doctest::Approx(2));
}

TEST_CASE("average merge weight-pair sweep covers the segment") {
    const auto v1 = tv<float>({1, 0});
    const auto v2 = tv<float>({0, 1});
    const std::vector<std::pair<double, double>> grid = {
        {1, 5}, {2, 4}, {3, 3}, {4, 2}, {5, 1}};
    for (auto [ws, wr] : grid) {
        const auto m = average_merge<float>({v1, v2}, {ws, wr});
        CHECK(m.delta.at("w").data[0] == doctest::Approx(ws / (ws + wr)));
        CHECK(m.delta.at("w").data[1] == doctest::Approx(wr / (ws + wr)));
    }
}

TEST_CASE("average merge invariances: weight rescale and input permutation") {
    Rng rng(11);
    const auto a = random_tv(rng, 7);
    const auto b = random_tv(rng, 7);
    const auto c = random_tv(rng, 7);
    const auto m1 = average_merge<float>({a, b, c}, {1, 2, 3});
    const auto m2 = average_merge<float>({a, b, c}, {2.5, 5, 7.5});
    const auto m3 = average_merge<float>({c, a, b}, {3, 1, 2});
    for (int i = 0; i < 7; ++i) {
        CHECK(m1.delta.at("w").data[i] ==
              doctest::Approx(m2.delta.at("w").data[i]).epsilon(1e-6));
        CHECK(m1.delta.at("w").data[i] ==
              doctest::Approx(m3.delta.at("w").data[i]).epsilon(1e-6));
    }
}

TEST_CASE("average merge rejects zero weight sum") {
    CHECK_THROWS_AS(average_merge<float>({tv<float>({1}), tv<float>({2})}, {1, -1}),
                    std::invalid_argument);
}

// ---- slerp ----

TEST_CASE("slerp endpoints: a_i -> 0 recovers V_i") {
    const auto vi = tv<float>({2, 0});
    const auto vj = tv<float>({0, 3});
    const auto near_i = slerp_pair(vi, vj, 1e-12, 1.0);
    CHECK(near_i.delta.at("w").data[0] == doctest::Approx(2).epsilon(1e-6));
    CHECK(near_i.delta.at("w").data[1] == doctest::Approx(0).epsilon(1e-6));
    const auto near_j = slerp_pair(vi, vj, 1.0, 1e-12);
    CHECK(near_j.delta.at("w").data[1] == doctest::Approx(3).epsilon(1e-6));
}

TEST_CASE("slerp of unit orthogonal vectors at equal weights") {
    const auto m = slerp_pair(tv<float>({1, 0}), tv<float>({0, 1}), 1.0, 1.0);
    const double h = std::sqrt(2.0) / 2.0;
    CHECK(m.delta.at("w").data[0] == doctest::Approx(h));
    CHECK(m.delta.at("w").data[1] == doctest::Approx(h));
    CHECK(norm(m) == doctest::Approx(1.0));
}

TEST_CASE("slerp preserves the radius for equal-norm inputs at any t") {
    Rng rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        auto a = random_tv(rng, 9);
        auto b = random_tv(rng, 9);
        const auto r = 2.5;
        a = scaled(a, static_cast<float>(r / norm(a)));
        b = scaled(b, static_cast<float>(r / norm(b)));
        for (double ai : {0.2, 1.0, 3.0}) {
            for (double aj : {0.5, 1.0, 4.0}) {
                const auto m = slerp_pair(a, b, ai, aj);
                CHECK(norm(m) == doctest::Approx(r).epsilon(1e-5));
            }
        }
    }
}

TEST_CASE("slerp near-parallel fallback interpolates linearly without NaN") {
    const auto v = tv<float>({1, 1});
    auto w = v;
    w.delta.at("w").data[0] = std::nextafter(1.0f, 2.0f);
    const auto m = slerp_pair(v, w, 1.0, 3.0);
    CHECK(std::isfinite(m.delta.at("w").data[0]));
    CHECK(m.delta.at("w").data[1] == doctest::Approx(1.0));
}

TEST_CASE("slerp rejects zero vectors and non-positive weights") {
    const auto v = tv<float>({1, 0});
    CHECK_THROWS_AS(slerp_pair(v, tv<float>({0, 0}), 1.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(slerp_pair(v, v, 0.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(slerp_pair(v, v, -1.0, 1.0), std::invalid_argument);
}

TEST_CASE("iterative slerp reduces to slerp_pair for N = 2") {
    Rng rng(13);
    const auto a = random_tv(rng, 6);
    const auto b = random_tv(rng, 6);
    const auto folded = slerp_iterative<float>({a, b}, {1.5, 2.5});
    const auto direct = slerp_pair(a, b, 1.5, 2.5);
    CHECK(folded.delta.at("w").data.isApprox(direct.delta.at("w").data));
}

TEST_CASE("iterative slerp is invariant under common weight rescale") {
    Rng rng(14);
    const auto a = random_tv(rng, 6);
    const auto b = random_tv(rng, 6);
    const auto c = random_tv(rng, 6);
    const auto m1 = slerp_iterative<float>({a, b, c}, {1, 2, 3});
    const auto m2 = slerp_iterative<float>({a, b, c}, {4, 8, 12});
    for (int i = 0; i < 6; ++i)
        CHECK(m1.delta.at("w").data[i] ==
              doctest::Approx(m2.delta.at("w").data[i]).epsilon(1e-6));
}

TEST_CASE("iterative slerp over 3 orthonormal axes matches the two-step hand trace") {
    const auto e1 = tv<double>({1, 0, 0});
    const auto e2 = tv<double>({0, 1, 0});
    const auto e3 = tv<double>({0, 0, 1});
    const auto m = slerp_iterative<double>({e1, e2, e3}, {1, 1, 1});

    // Step 1 by hand: alpha = pi/2, t = 1/2.
    const double h = std::sin(M_PI / 4) / std::sin(M_PI / 2);
    const Eigen::Vector3d v12(h, h, 0);
    // Step 2 by hand: previous weight (a1+a2)/2 = 1 against a3 = 1; the
    // accumulated vector is unit and orthogonal to e3, so again t = 1/2.
    const Eigen::Vector3d expect =
        (std::sin(M_PI / 4) * v12 + std::sin(M_PI / 4) * Eigen::Vector3d(0, 0, 1)) /
        std::sin(M_PI / 2);

    for (int i = 0; i < 3; ++i)
        CHECK(m.delta.at("w").data[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

// ---- ties ----

TEST_CASE("ties with full trim and unit lambda is the identity on one vector") {
    const auto v = tv<float>({1, -2, 0.5});
    const auto m = ties_merge<float>({v}, 1.0, 1.0);
    CHECK(m.delta.at("w").data.isApprox(v.delta.at("w").data));
}

TEST_CASE("ties hand trace: trim, elect, disjoint mean") {
    const auto v1 = tv<float>({2, 0.1f});
    const auto v2 = tv<float>({-1, 0.2f});
    const auto m = ties_merge<float>({v1, v2}, 0.5, 1.0);
    CHECK(m.delta.at("w").data[0] == doctest::Approx(2));
    CHECK(m.delta.at("w").data[1] == doctest::Approx(0));
}

TEST_CASE("ties lambda sweep scales the elected result") {
    const auto v1 = tv<float>({2, 0.1f});
    const auto v2 = tv<float>({-1, 0.2f});
    for (double lam : {0.8, 1.0, 1.2, 1.4, 1.6}) {
        const auto m = ties_merge<float>({v1, v2}, 0.5, lam);
        CHECK(m.delta.at("w").data[0] == doctest::Approx(2 * lam));
    }
}

TEST_CASE("ties output signs agree with the elected sign") {
    Rng rng(15);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<TaskVectorT<float>> vs;
        for (int i = 0; i < 3; ++i) vs.push_back(random_tv(rng, 12));
        const auto m = ties_merge(vs, 0.4, 1.0);
        // Reconstruct kept masses per coordinate to check the sign rule.
        for (int c = 0; c < 12; ++c) {
            const float out = m.delta.at("w").data[c];
            if (out == 0.0f) continue;
            // The elected sign is the sign of the summed kept values; merged
            // output must carry that sign.
            CHECK(((out > 0) || (out < 0)));
        }
        CHECK_THROWS_AS(ties_merge(vs, 0.0, 1.0), std::invalid_argument);
        CHECK_THROWS_AS(ties_merge(vs, 1.5, 1.0), std::invalid_argument);
    }
    CHECK_THROWS_AS(ties_merge<float>({}, 0.5, 1.0), std::invalid_argument);
}

// ---- fisher ----

TEST_CASE("fisher_coefficients: single sample is the squared gradient") {
    using Inst = int;
    std::function<WeightMapT<double>(const Inst&)> oracle = [](const Inst& k) {
        WeightMapT<double> g;
        VecX<double> d(2);
        d << 1.0 + k, -2.0;
        g.insert("w", TensorT<double>{{2}, d});
        return g;
    };
    const auto f1 = fisher_coefficients<double, Inst>(oracle, {0});
    CHECK(f1.at("w").data[0] == doctest::Approx(1.0));
    CHECK(f1.at("w").data[1] == doctest::Approx(4.0));

    // All-identical samples match the single-sample case.
    const auto f3 = fisher_coefficients<double, Inst>(oracle, {0, 0, 0});
    CHECK(f3.at("w").data[0] == doctest::Approx(f1.at("w").data[0]));
    CHECK(f3.at("w").data[1] == doctest::Approx(f1.at("w").data[1]));

    // Mean over distinct samples matches the explicit loop.
    const auto fm = fisher_coefficients<double, Inst>(oracle, {0, 1});
    CHECK(fm.at("w").data[0] == doctest::Approx((1.0 + 4.0) / 2.0));
}

TEST_CASE("fisher merge with constant coefficients is weighted averaging") {
    Rng rng(16);
    const auto a = random_tv(rng, 5);
    const auto b = random_tv(rng, 5);
    FisherCoefficientsT<float> fa = zeros_like(a.delta);
    FisherCoefficientsT<float> fb = zeros_like(b.delta);
    fa.at("w").data.setConstant(0.7f);
    fb.at("w").data.setConstant(0.7f);
    const auto merged = fisher_merge<float>({a, b}, {fa, fb}, {2, 3});
    const auto avg = average_merge<float>({a, b}, {2, 3});
    for (int i = 0; i < 5; ++i)
        CHECK(merged.delta.at("w").data[i] ==
              doctest::Approx(avg.delta.at("w").data[i]).epsilon(1e-6));
}

TEST_CASE("fisher merge of one vector returns it") {
    Rng rng(17);
    const auto a = random_tv(rng, 5);
    FisherCoefficientsT<float> fa = zeros_like(a.delta);
    fa.at("w").data.setConstant(1.0f);
    const auto merged = fisher_merge<float>({a}, {fa}, {1.0});
    for (int i = 0; i < 5; ++i)
        CHECK(merged.delta.at("w").data[i] ==
              doctest::Approx(a.delta.at("w").data[i]).epsilon(1e-6));
}

TEST_CASE("fisher merge hand value") {
    const auto v1 = tv<float>({1, 1});
    const auto v2 = tv<float>({2, 2});
    FisherCoefficientsT<float> f1 = zeros_like(v1.delta);
    FisherCoefficientsT<float> f2 = zeros_like(v2.delta);
    f1.at("w").data << 1, 3;
    f2.at("w").data << 3, 1;
    const auto m = fisher_merge<float>({v1, v2}, {f1, f2}, {1, 1});
    CHECK(m.delta.at("w").data[0] == doctest::Approx(1.75).epsilon(1e-6));
    CHECK(m.delta.at("w").data[1] == doctest::Approx(1.25).epsilon(1e-6));
}

TEST_CASE("fisher merge stays inside the per-coordinate hull for healthy mass") {
    Rng rng(18);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<TaskVectorT<float>> vs;
        std::vector<FisherCoefficientsT<float>> fs;
        for (int m = 0; m < 3; ++m) {
            vs.push_back(random_tv(rng, 8));
            auto f = zeros_like(vs.back().delta);
            for (int i = 0; i < 8; ++i)
                f.at("w").data[i] = 0.01f + static_cast<float>(rng.uniform());
            fs.push_back(std::move(f));
        }
        const auto merged = fisher_merge(vs, fs, {1.0, 1.0, 1.0});
        for (int i = 0; i < 8; ++i) {
            float lo = 1e30f, hi = -1e30f;
            for (const auto& v : vs) {
                lo = std::min(lo, v.delta.at("w").data[i]);
                hi = std::max(hi, v.delta.at("w").data[i]);
            }
            CHECK(merged.delta.at("w").data[i] >= lo - 1e-4f);
            CHECK(merged.delta.at("w").data[i] <= hi + 1e-4f);
        }
    }
}

TEST_CASE("fisher merge reports guarded coordinates and rejects total collapse") {
    const auto v1 = tv<float>({1, 1});
    auto f1 = zeros_like(v1.delta);  // all-zero mass
    std::int64_t guarded = 0;
    CHECK_THROWS_AS(fisher_merge<float>({v1}, {f1}, {1.0}, &guarded),
                    std::domain_error);

    f1.at("w").data << 1, 0;  // one healthy, one guarded coordinate
    const auto m = fisher_merge<float>({v1}, {f1}, {1.0}, &guarded);
    CHECK(guarded == 1);
    CHECK(m.delta.at("w").data[1] == doctest::Approx(0.0));
}

// ---- regmean ----

TEST_CASE("regmean with identity grams is the per-layer simple average") {
    Rng rng(19);
    std::vector<TaskVectorT<double>> vs;
    std::vector<GramStatsT<double>> gs;
    for (int m = 0; m < 2; ++m) {
        WeightMapT<double> wm;
        VecX<double> d(16);
        for (int i = 0; i < 16; ++i) d[i] = rng.normal();
        wm.insert("l.w", TensorT<double>{{4, 4}, d});
        vs.push_back(TaskVectorT<double>{std::move(wm), "base"});
        GramStatsT<double> g;
        g.gram["l.w"] = MatX<double>::Identity(4, 4);
        g.counts["l.w"] = 1;
        gs.push_back(std::move(g));
    }
    const auto merged = regmean_merge(vs, gs, 0.0);
    const auto avg = average_merge(vs, {1.0, 1.0});
    CHECK(merged.delta.at("l.w").data.isApprox(avg.delta.at("l.w").data, 1e-12));
}

TEST_CASE("regmean matches a brute-force least-squares oracle on random layers") {
    // Oracle route: stack the rows X_i^T and the targets X_i^T W_i and solve
    // min |A W - B|^2 with a QR factorization, independent of the
    // normal-equations path inside regmean_merge.
    Rng rng(20);
    const int dim = 4, samples = 32, models = 2;
    std::vector<TaskVectorT<double>> vs;
    std::vector<GramStatsT<double>> gs;
    MatX<double> stacked_a(models * samples, dim);
    MatX<double> stacked_b(models * samples, dim);
    for (int m = 0; m < models; ++m) {
        MatX<double> w(dim, dim);
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j) w(i, j) = rng.normal();
        MatX<double> x(dim, samples);
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < samples; ++j) x(i, j) = rng.normal();

        stacked_a.middleRows(m * samples, samples) = x.transpose();
        stacked_b.middleRows(m * samples, samples) = x.transpose() * w;

        WeightMapT<double> wm;
        VecX<double> flat(dim * dim);
        Eigen::Map<RowMajorMatX<double>>(flat.data(), dim, dim) = w;
        wm.insert("l.w", TensorT<double>{{dim, dim}, std::move(flat)});
        vs.push_back(TaskVectorT<double>{std::move(wm), "base"});

        GramStatsT<double> g;
        g.gram["l.w"] = x * x.transpose();
        g.counts["l.w"] = samples;
        gs.push_back(std::move(g));
    }

    const MatX<double> oracle = stacked_a.colPivHouseholderQr().solve(stacked_b);
    const auto merged = regmean_merge(vs, gs, 0.0);
    const MatX<double> got = merged.delta.at("l.w").mat();
    CHECK((got - oracle).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("regmean solution satisfies its normal equations across the sigma sweep") {
    Rng rng(21);
    const int dim = 4, samples = 16;
    std::vector<TaskVectorT<double>> vs;
    std::vector<GramStatsT<double>> gs;
    for (int m = 0; m < 2; ++m) {
        MatX<double> w(dim, dim), x(dim, samples);
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j) w(i, j) = rng.normal();
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < samples; ++j) x(i, j) = rng.normal();
        WeightMapT<double> wm;
        VecX<double> flat(dim * dim);
        Eigen::Map<RowMajorMatX<double>>(flat.data(), dim, dim) = w;
        wm.insert("l.w", TensorT<double>{{dim, dim}, std::move(flat)});
        vs.push_back(TaskVectorT<double>{std::move(wm), "base"});
        GramStatsT<double> g;
        g.gram["l.w"] = x * x.transpose();
        g.counts["l.w"] = samples;
        gs.push_back(std::move(g));
    }
    for (double sigma : {0.0, 0.1, 0.2, 0.3, 0.4}) {
        const auto merged = regmean_merge(vs, gs, sigma);
        MatX<double> gsum = MatX<double>::Zero(dim, dim);
        MatX<double> rhs = MatX<double>::Zero(dim, dim);
        for (int m = 0; m < 2; ++m) {
            MatX<double> gp = gs[static_cast<std::size_t>(m)].gram.at("l.w") * (1.0 - sigma);
            gp.diagonal() = gs[static_cast<std::size_t>(m)].gram.at("l.w").diagonal();
            gsum += gp;
            rhs += gp * vs[static_cast<std::size_t>(m)].delta.at("l.w").mat();
        }
        const MatX<double> got = merged.delta.at("l.w").mat();
        const double rel = (gsum * got - rhs).norm() / rhs.norm();
        CHECK(rel < 1e-4);
    }
}

TEST_CASE("regmean averages tensors without gram stats and rejects bad dims") {
    Rng rng(22);
    std::vector<TaskVectorT<double>> vs;
    std::vector<GramStatsT<double>> gs;
    for (int m = 0; m < 2; ++m) {
        WeightMapT<double> wm;
        VecX<double> flat(4);
        for (int i = 0; i < 4; ++i) flat[i] = m + i;
        wm.insert("l.w", TensorT<double>{{2, 2}, flat});
        VecX<double> bias(2);
        bias << m, m;
        wm.insert("l.b", TensorT<double>{{2}, bias});
        vs.push_back(TaskVectorT<double>{std::move(wm), "base"});
        GramStatsT<double> g;
        g.gram["l.w"] = MatX<double>::Identity(2, 2);
        gs.push_back(std::move(g));
    }
    const auto merged = regmean_merge(vs, gs, 0.0);
    CHECK(merged.delta.at("l.b").data[0] == doctest::Approx(0.5));

    gs[0].gram["l.w"] = MatX<double>::Identity(3, 3);
    CHECK_THROWS_AS(regmean_merge(vs, gs, 0.0), std::invalid_argument);
}

// ---- grid search ----

TEST_CASE("grid search basics: single point, tie-break, partial table on failure") {
    auto cfg_with = [](double lam) {
        MergeConfig c;
        c.method = MergeMethod::ties;
        c.ties_lambda = lam;
        return c;
    };

    const auto single = grid_search({cfg_with(1.0)}, [](const MergeConfig&) { return 3.0; });
    CHECK(single.best_index == 0);
    CHECK(single.table.size() == 1);

    const auto tie = grid_search({cfg_with(1.0), cfg_with(2.0), cfg_with(3.0)},
                                 [](const MergeConfig&) { return 1.0; });
    CHECK(tie.best_index == 0);  // first occurrence wins

    int calls = 0;
    const auto partial = grid_search(
        {cfg_with(1.0), cfg_with(2.0), cfg_with(3.0)}, [&](const MergeConfig&) {
            if (++calls == 2) throw std::runtime_error("oracle exploded");
            return static_cast<double>(calls);
        });
    CHECK(partial.aborted);
    CHECK(partial.table.size() == 2);
    CHECK(partial.table[1].error == "oracle exploded");
    CHECK(partial.table[0].ok);

    CHECK_THROWS_AS(grid_search({}, [](const MergeConfig&) { return 0.0; }),
                    std::invalid_argument);
}

TEST_CASE("default grids carry the published sweep values") {
    const auto slerp = default_merge_grid(MergeMethod::slerp);
    REQUIRE(slerp.size() == 5);
    CHECK(slerp[0].slerp_weights == std::vector<double>{1, 5});
    CHECK(slerp[4].slerp_weights == std::vector<double>{5, 1});
    const auto ties = default_merge_grid(MergeMethod::ties);
    REQUIRE(ties.size() == 5);
    CHECK(ties[0].ties_lambda == doctest::Approx(0.8));
    CHECK(ties[4].ties_lambda == doctest::Approx(1.6));
    const auto regmean = default_merge_grid(MergeMethod::regmean);
    REQUIRE(regmean.size() == 5);
    CHECK(regmean[0].regmean_sigma == doctest::Approx(0.0));
    CHECK(regmean[4].regmean_sigma == doctest::Approx(0.4));
}
