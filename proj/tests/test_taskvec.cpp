#include <doctest.h>

#include <cmath>

#include "embmerge/task_vector.hpp"
#include "embmerge/tensorio.hpp"
#include "test_support.hpp"

using namespace embmerge;
using test_support::random_weight_map;

namespace {

WeightMap map1d(const std::vector<float>& v, const std::string& name = "w") {
    WeightMap m;
    VecX<float> d(static_cast<std::int64_t>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) d[static_cast<std::int64_t>(i)] = v[i];
    m.insert(name, TensorT<float>{{static_cast<std::int64_t>(v.size())}, d});
    return m;
}

TaskVector tv1d(const std::vector<float>& v, const std::string& fp = "base") {
    return TaskVector{map1d(v), fp};
}

}  // namespace

TEST_CASE("extract of a model against itself is the zero delta") {
    Rng rng(1);
    const auto base = random_weight_map(rng);
    const auto v = extract(base, base);
    CHECK(norm(v) == 0.0);
    CHECK(v.base_fingerprint == fingerprint(base));
}

TEST_CASE("extract computes elementwise differences") {
    const auto base = map1d({1, 2});
    const auto model = map1d({3, 5});
    const auto v = extract(model, base);
    CHECK(v.delta.at("w").data[0] == doctest::Approx(2));
    CHECK(v.delta.at("w").data[1] == doctest::Approx(3));
}

TEST_CASE("extract/apply round-trips bit-exactly on random maps") {
    Rng rng(2);
    for (int t = 0; t < 25; ++t) {
        const auto base = random_weight_map(rng);
        auto model = base;
        for (auto& [_, tensor] : model.entries)
            for (std::int64_t i = 0; i < tensor.size(); ++i)
                tensor.data[i] += static_cast<float>(rng.normal());
        const auto v = extract(model, base);
        CHECK(bit_equal(apply(base, v), model));
    }
}

TEST_CASE("apply of the zero vector is the identity") {
    Rng rng(3);
    const auto base = random_weight_map(rng);
    const TaskVector zero{zeros_like(base), fingerprint(base)};
    CHECK(bit_equal(apply(base, zero), base));
}

TEST_CASE("apply to the wrong base fails unless forced") {
    Rng rng(4);
    const auto base = random_weight_map(rng);
    auto other = base;
    other.entries.begin()->second.data[0] += 1.0f;
    const TaskVector v{zeros_like(base), fingerprint(base)};
    CHECK_THROWS_AS(apply(other, v), std::invalid_argument);
    CHECK(bit_equal(apply(other, v, /*force=*/true), other));
}

TEST_CASE("scaled apply produces the lambda sweep models") {
    Rng rng(5);
    const auto base = random_weight_map(rng);
    auto model = base;
    model.entries.begin()->second.data[0] += 2.0f;
    const auto v = extract(model, base);
    for (double lam : {0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3}) {
        const auto swept = apply(base, scaled(v, static_cast<float>(lam)));
        CHECK(swept.entries.begin()->second.data[0] ==
              doctest::Approx(base.entries.begin()->second.data[0] + 2.0 * lam));
    }
}

TEST_CASE("norm: zero, Pythagorean, and global flattening convention") {
    CHECK(norm(tv1d({0, 0, 0})) == 0.0);
    CHECK(norm(tv1d({3, 4})) == doctest::Approx(5.0));

    // Two tensors [3] and [4] flatten globally: norm 5, not 3 + 4.
    WeightMap m;
    VecX<float> a(1), b(1);
    a << 3;
    b << 4;
    m.insert("a", TensorT<float>{{1}, a});
    m.insert("b", TensorT<float>{{1}, b});
    CHECK(norm(TaskVector{m, "base"}) == doctest::Approx(5.0));
}

TEST_CASE("norm scales homogeneously") {
    Rng rng(6);
    const auto base = random_weight_map(rng);
    auto model = base;
    for (auto& [_, t] : model.entries)
        for (std::int64_t i = 0; i < t.size(); ++i)
            t.data[i] += static_cast<float>(rng.normal());
    const auto v = extract(model, base);
    for (float lam : {-2.5f, -1.0f, 0.5f, 3.0f}) {
        CHECK(norm(scaled(v, lam)) ==
              doctest::Approx(std::abs(lam) * norm(v)).epsilon(1e-6));
    }
}

TEST_CASE("angle: self, opposite, orthogonal") {
    const auto v = tv1d({1, 2, 3});
    CHECK(angle(v, v) == doctest::Approx(0.0));
    CHECK(angle(v, scaled(v, -1.0f)) == doctest::Approx(M_PI));
    CHECK(angle(tv1d({1, 0}), tv1d({0, 1})) == doctest::Approx(M_PI / 2));
    CHECK_THROWS_AS(angle(v, tv1d({0, 0, 0})), std::invalid_argument);
}

TEST_CASE("angle is symmetric and clamps near-parallel cosines") {
    Rng rng(7);
    for (int t = 0; t < 20; ++t) {
        std::vector<float> xs(5), ys(5);
        for (auto& x : xs) x = static_cast<float>(rng.normal());
        for (auto& y : ys) y = static_cast<float>(rng.normal());
        const auto a = tv1d(xs);
        const auto b = tv1d(ys);
        CHECK(angle(a, b) == doctest::Approx(angle(b, a)).epsilon(1e-9));
    }
    // Nearly parallel copies must not produce NaN.
    const auto v = tv1d({1, 1, 1});
    auto w = v;
    w.delta.at("w").data[0] = std::nextafter(1.0f, 2.0f);
    const double a = angle(v, w);
    CHECK(std::isfinite(a));
    CHECK(a >= 0.0);
}

TEST_CASE("direction metric endpoints and complement identity") {
    const auto e1 = tv1d({1, 0, 0});
    const auto e2 = tv1d({0, 1, 0});

    // combined == first
    const auto r0 = direction_metric(e1, e1, e2);
    CHECK(r0.metric == doctest::Approx(0.0));

    // equal angles to equal-norm inputs -> 0.5
    const auto mid = tv1d({1, 1, 0});
    const auto rm = direction_metric(mid, e1, e2);
    CHECK(rm.metric == doctest::Approx(0.5));

    Rng rng(8);
    for (int t = 0; t < 10; ++t) {
        std::vector<float> c(4), x(4), y(4);
        for (auto& v : c) v = static_cast<float>(rng.normal());
        for (auto& v : x) v = static_cast<float>(rng.normal());
        for (auto& v : y) v = static_cast<float>(rng.normal());
        const auto rc = direction_metric(tv1d(c), tv1d(x), tv1d(y));
        const auto rc_swapped = direction_metric(tv1d(c), tv1d(y), tv1d(x));
        CHECK(rc.metric + rc_swapped.metric == doctest::Approx(1.0).epsilon(1e-9));
    }

    // first parallel to second and to combined: degenerate
    CHECK_THROWS_AS(direction_metric(e1, e1, e1), std::domain_error);
}

TEST_CASE("lincomb basics and hand value") {
    const auto v = tv1d({1, 2});
    const auto id = lincomb<float>({{1.0f, &v}});
    CHECK(bit_equal(id.delta, v.delta));

    const auto halves = lincomb<float>({{0.5f, &v}, {0.5f, &v}});
    CHECK(halves.delta.at("w").data[0] == doctest::Approx(1));
    CHECK(halves.delta.at("w").data[1] == doctest::Approx(2));

    const auto a = tv1d({1, 0});
    const auto b = tv1d({0, 1});
    const auto combo = lincomb<float>({{2.0f, &a}, {3.0f, &b}});
    CHECK(combo.delta.at("w").data[0] == doctest::Approx(2));
    CHECK(combo.delta.at("w").data[1] == doctest::Approx(3));

    CHECK_THROWS_AS(lincomb<float>({}), std::invalid_argument);
}
