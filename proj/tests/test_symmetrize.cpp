#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "invlab/dataset.hpp"
#include "invlab/model.hpp"
#include "invlab/stats.hpp"
#include "invlab/symmetrize.hpp"

using namespace invlab;

namespace {

LabeledDataset make_dataset(const std::vector<Vec>& xs, const std::vector<double>& ys) {
    LabeledDataset ds;
    for (std::size_t i = 0; i < xs.size(); ++i) ds.add(xs[i], ys[i]);
    return ds;
}

} // namespace

TEST_CASE("symmetrize_exact: invariant functions are fixed points") {
    auto s3 = symmetric_group(3);
    auto f = [](const Vec& x) { return Vec{x[0] + x[1] + x[2]}; };  // S3-invariant
    SplitRng rng(1);
    for (int t = 0; t < 10; ++t) {
        Vec x{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
        CHECK(symmetrize_exact(f, x, *s3)[0] == Catch::Approx(f(x)[0]).margin(1e-12));
    }
}

TEST_CASE("symmetrize_exact: coordinate projection under S2") {
    auto s2 = symmetric_group(2);
    auto f = [](const Vec& x) { return Vec{x[0]}; };
    CHECK(symmetrize_exact(f, Vec{1.0, 0.0}, *s2)[0] == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("symmetrize_exact of a linear model equals the constant-vector model") {
    auto s3 = symmetric_group(3);
    SplitRng rng(2);
    for (int t = 0; t < 20; ++t) {
        Vec w{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
        const double wbar = (w[0] + w[1] + w[2]) / 3.0;  // independent closed form
        auto f = [&](const Vec& x) { return Vec{dot(w, x)}; };
        Vec x{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
        const double via_avg = symmetrize_exact(f, x, *s3)[0];
        const double via_wbar = wbar * (x[0] + x[1] + x[2]);
        CHECK(via_avg == Catch::Approx(via_wbar).margin(1e-12));
    }
}

TEST_CASE("symmetrize invariance: value constant on orbits") {
    SplitRng rng(3);
    ModelSpec mlp;
    mlp.input_dim = 4;
    mlp.output_dim = 2;
    mlp.layers = {Layer::dense(5), Layer::activation(Activation::tanh_fn), Layer::dense(2)};
    auto params = init_params(mlp, rng);
    auto f = [&](const Vec& x) { return forward(mlp, params, x); };

    auto c4 = grid_rotation_group(2);
    for (int t = 0; t < 25; ++t) {
        Vec x(4);
        for (double& v : x) v = rng.uniform(-1, 1);
        Vec base = symmetrize_exact(f, x, *c4);
        for (ElementId g = 0; g < c4->size(); ++g)
            CHECK(symmetrize_exact(f, c4->act(g, x), *c4) == base);  // bit-exact for permutations
    }

    // dense action: tolerance 1e-12
    auto c6 = planar_rotation_group(6);
    auto f2 = [](const Vec& x) { return Vec{x[0] * x[0] - 0.3 * x[1]}; };
    for (int t = 0; t < 10; ++t) {
        Vec x{rng.uniform(-1, 1), rng.uniform(-1, 1)};
        Vec base = symmetrize_exact(f2, x, *c6);
        for (ElementId g = 0; g < c6->size(); ++g)
            CHECK(max_abs_diff(symmetrize_exact(f2, c6->act(g, x), *c6), base) < 1e-12);
    }
}

TEST_CASE("symmetrization is a projection: S(Sf) = Sf pointwise") {
    auto s3 = symmetric_group(3);
    SplitRng rng(4);
    ModelSpec mlp;
    mlp.input_dim = 3;
    mlp.output_dim = 1;
    mlp.layers = {Layer::dense(4), Layer::activation(Activation::relu), Layer::dense(1)};
    auto params = init_params(mlp, rng);
    auto f = [&](const Vec& x) { return forward(mlp, params, x); };
    auto sf = [&](const Vec& x) { return symmetrize_exact(f, x, *s3); };
    for (int t = 0; t < 25; ++t) {
        Vec x{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
        CHECK(max_abs_diff(symmetrize_exact(sf, x, *s3), sf(x)) < 1e-12);
    }
}

TEST_CASE("symmetrize_mc: exhaustive fixed set equals exact, invariant f unchanged") {
    auto c4 = grid_rotation_group(2);
    SplitRng rng(5);
    auto f = [](const Vec& x) { return Vec{x[0] * 2.0 - x[3]}; };
    Vec x{0.5, -1.0, 2.0, 0.25};

    Vec exact = symmetrize_exact(f, x, *c4);
    Vec via_set = symmetrize_over_set(f, x, *c4, c4->all_elements());
    CHECK(max_abs_diff(exact, via_set) < 1e-15);

    auto inv = [](const Vec& x2) { return Vec{x2[0] + x2[1] + x2[2] + x2[3]}; };
    for (int k : {1, 2, 7}) {
        Vec got = symmetrize_mc(inv, x, *c4, k, rng);
        CHECK(got[0] == Catch::Approx(inv(x)[0]).margin(1e-12));
    }
}

TEST_CASE("symmetrize_mc is unbiased for the exact average") {
    auto c4 = grid_rotation_group(2);
    auto f = [](const Vec& x) { return Vec{x[0] * x[0] + 0.5 * x[1]}; };
    Vec x{1.0, -0.5, 0.25, 2.0};
    const double exact = symmetrize_exact(f, x, *c4)[0];
    SplitRng rng(6);
    std::vector<double> draws;
    draws.reserve(10000);
    for (int t = 0; t < 10000; ++t) draws.push_back(symmetrize_mc(f, x, *c4, 1, rng)[0]);
    const double m = stats::mean(draws);
    const double se = stats::stderr_of_mean(draws);
    CHECK(std::abs(m - exact) <= 3.0 * se);
}

TEST_CASE("pool_invariant: extrema over the orbit") {
    auto c2 = sign_flip_group(1);
    auto f = [](const Vec& x) { return Vec{x[0]}; };
    CHECK(pool_invariant(f, Vec{2.0}, *c2, SymmetrizationMode::Kind::max_pool)[0] == 2.0);
    CHECK(pool_invariant(f, Vec{2.0}, *c2, SymmetrizationMode::Kind::min_pool)[0] == -2.0);

    auto inv = [](const Vec& x) { return Vec{std::abs(x[0])}; };
    CHECK(pool_invariant(inv, Vec{-3.0}, *c2, SymmetrizationMode::Kind::max_pool)[0] == 3.0);

    // pool value identical on every point of an orbit
    auto c4 = grid_rotation_group(2);
    auto f2 = [](const Vec& x) { return Vec{x[0] - 2.0 * x[2]}; };
    Vec x{0.2, 1.4, -0.7, 0.9};
    for (auto kind : {SymmetrizationMode::Kind::max_pool, SymmetrizationMode::Kind::min_pool}) {
        Vec base = pool_invariant(f2, x, *c4, kind);
        for (ElementId g = 0; g < c4->size(); ++g)
            CHECK(pool_invariant(f2, c4->act(g, x), *c4, kind) == base);
    }
}

TEST_CASE("empirical_risk: closed forms and counting oracle") {
    auto perfect = [](const Vec& x) { return Vec{x[0]}; };
    auto ds = make_dataset({{1.0}, {2.0}, {-0.5}}, {1.0, 2.0, -0.5});
    CHECK(empirical_risk(perfect, ds, squared_loss()).value == 0.0);

    auto constant_half = [](const Vec&) { return Vec{0.5}; };
    auto ones = make_dataset({{0.1}, {0.2}, {0.3}, {0.4}}, {1.0, 1.0, 1.0, 1.0});
    CHECK(empirical_risk(constant_half, ones, squared_loss()).value ==
          Catch::Approx(0.25).margin(1e-15));

    // 0-1 equals misclassification fraction, against explicit counting
    SplitRng rng(7);
    std::vector<Vec> xs;
    std::vector<double> ys;
    for (int i = 0; i < 10; ++i) {
        xs.push_back({rng.uniform(0, 1)});
        ys.push_back(static_cast<double>(rng.below(2)));
    }
    auto ds01 = make_dataset(xs, ys);
    auto clf = [](const Vec& x) { return Vec{x[0]}; };
    int wrong = 0;
    for (int i = 0; i < 10; ++i) {
        int pred = xs[static_cast<std::size_t>(i)][0] >= 0.5 ? 1 : 0;
        if (pred != static_cast<int>(ys[static_cast<std::size_t>(i)])) ++wrong;
    }
    CHECK(empirical_risk(clf, ds01, zero_one_loss()).value ==
          Catch::Approx(wrong / 10.0).margin(1e-15));

    LabeledDataset empty;
    CHECK_THROWS_AS(empirical_risk(clf, empty, zero_one_loss()), std::domain_error);
}

TEST_CASE("augmented_risk: equality for invariant f, worked examples") {
    auto s2 = symmetric_group(2);
    auto inv = [](const Vec& x) { return Vec{x[0] + x[1]}; };
    auto ds = make_dataset({{1.0, 2.0}, {0.5, -0.25}}, {3.0, 0.25});
    CHECK(augmented_risk(inv, ds, squared_loss(), *s2).value ==
          Catch::Approx(empirical_risk(inv, ds, squared_loss()).value).margin(1e-15));

    // single point (1,0), y = 0.5, squared loss, C2 coordinate swap
    auto f = [](const Vec& x) { return Vec{x[0]}; };
    auto one = make_dataset({{1.0, 0.0}}, {0.5});
    CHECK(augmented_risk(f, one, squared_loss(), *s2).value ==
          Catch::Approx(0.25).margin(1e-15));
    // while the feature-averaged model scores 0
    auto fa = [&](const Vec& x) { return symmetrize_exact(f, x, *s2); };
    CHECK(empirical_risk(fa, one, squared_loss()).value == Catch::Approx(0.0).margin(1e-15));

    // sign-flip group: per-point orbit average is (0 + 4)/2 = 2 regardless of sample
    auto c2 = sign_flip_group(1);
    auto ident = [](const Vec& x) { return Vec{x[0]}; };
    SplitRng rng(8);
    for (int t = 0; t < 5; ++t) {
        std::vector<Vec> xs;
        std::vector<double> ys;
        for (int i = 0; i < 7; ++i) {
            xs.push_back({rng.below(2) == 0 ? 1.0 : -1.0});
            ys.push_back(1.0);
        }
        CHECK(augmented_risk(ident, make_dataset(xs, ys), squared_loss(), *c2).value ==
              Catch::Approx(2.0).margin(1e-15));
    }
}

TEST_CASE("augmented_risk_mc: exhaustive set equality, invariance, consistency") {
    auto c4 = grid_rotation_group(2);
    SplitRng rng(9);
    std::vector<Vec> xs;
    std::vector<double> ys;
    for (int i = 0; i < 6; ++i) {
        Vec x(4);
        for (double& v : x) v = rng.uniform(-1, 1);
        xs.push_back(x);
        ys.push_back(rng.uniform(-1, 1));
    }
    auto ds = make_dataset(xs, ys);
    auto f = [](const Vec& x) { return Vec{x[0] - x[2]}; };

    auto all = c4->all_elements();
    double exact = augmented_risk(f, ds, squared_loss(), *c4).value;
    double via_fixed =
        augmented_risk_mc(f, ds, squared_loss(), *c4, 4, rng, &all).value;
    CHECK(via_fixed == Catch::Approx(exact).margin(1e-13));

    auto inv = [](const Vec& x) { return Vec{x[0] + x[1] + x[2] + x[3]}; };
    double plain_inv = empirical_risk(inv, ds, squared_loss()).value;
    for (int m : {1, 3}) {
        SplitRng r2(m);
        CHECK(augmented_risk_mc(inv, ds, squared_loss(), *c4, m, r2).value ==
              Catch::Approx(plain_inv).margin(1e-12));
    }

    // unbiasedness: mean over many seeds approaches the exact augmented risk
    std::vector<double> vals;
    for (int seed = 0; seed < 10000; ++seed) {
        SplitRng r3(static_cast<std::uint64_t>(seed));
        vals.push_back(augmented_risk_mc(f, ds, squared_loss(), *c4, 1, r3).value);
    }
    CHECK(std::abs(stats::mean(vals) - exact) <= 3.0 * stats::stderr_of_mean(vals));
}

TEST_CASE("orbit_prediction_variance: zeros, two-point case, orbit constancy") {
    auto s2 = symmetric_group(2);
    auto inv = [](const Vec& x) { return Vec{x[0] * x[1]}; };
    CHECK(orbit_prediction_variance(inv, Vec{1.0, 2.0}, *s2) == 0.0);

    auto f = [](const Vec& x) { return Vec{x[0]}; };
    CHECK(orbit_prediction_variance(f, Vec{0.0, 1.0}, *s2) == Catch::Approx(0.25).margin(1e-15));

    auto c4 = grid_rotation_group(2);
    auto f2 = [](const Vec& x) { return Vec{x[0] + 0.5 * x[1]}; };
    Vec x{0.3, -0.8, 1.2, 0.1};
    double base = orbit_prediction_variance(f2, x, *c4);
    for (ElementId g = 0; g < c4->size(); ++g)
        CHECK(orbit_prediction_variance(f2, c4->act(g, x), *c4) == base);
}

TEST_CASE("pointwise Jensen for convex losses") {
    auto s3 = symmetric_group(3);
    SplitRng rng(10);
    ModelSpec mlp;
    mlp.input_dim = 3;
    mlp.output_dim = 1;
    mlp.layers = {Layer::dense(5), Layer::activation(Activation::tanh_fn), Layer::dense(1)};
    for (int t = 0; t < 500; ++t) {
        auto params = init_params(mlp, rng);
        Vec x{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
        {
            auto f = [&](const Vec& v) { return forward(mlp, params, v); };
            double y = rng.uniform(-1, 1);
            LossFn loss = squared_loss();
            double lhs = loss(symmetrize_exact(f, x, *s3), y);
            double rhs = 0.0;
            for (ElementId g = 0; g < s3->size(); ++g) rhs += loss(f(s3->act(g, x)), y);
            rhs /= 6.0;
            REQUIRE(lhs <= rhs + 1e-12);
        }
        {
            auto f = [&](const Vec& v) {
                return Vec{0.5 + 0.49 * std::tanh(forward(mlp, params, v)[0])};
            };
            double y = static_cast<double>(rng.below(2));
            LossFn loss = logistic_loss();
            double lhs = loss(symmetrize_exact(f, x, *s3), y);
            double rhs = 0.0;
            for (ElementId g = 0; g < s3->size(); ++g) rhs += loss(f(s3->act(g, x)), y);
            rhs /= 6.0;
            REQUIRE(lhs <= rhs + 1e-12);
        }
    }
}

TEST_CASE("variance reduction across replicate datasets (paired test)") {
    const std::size_t replicates = 500, n = 50;
    auto task = c2_sign_task(n, 0, 99);
    ModelSpec spec;
    spec.input_dim = 1;
    spec.output_dim = 1;
    spec.layers = {Layer::dense(1, false)};
    ParamVector w;
    w.values = {1.0};
    auto c2 = task.group;

    std::vector<double> plain, augmented;
    for (std::size_t r = 0; r < replicates; ++r) {
        SplitRng rng = SplitRng(99).fork(r);
        auto ds = detail_ds::generate_split(task, n, rng, false, "rep");
        auto f = [&](const Vec& x) { return forward(spec, w, x); };
        plain.push_back(empirical_risk(f, ds, squared_loss()).value);
        augmented.push_back(augmented_risk(f, ds, squared_loss(), *c2).value);
    }
    double vp = stats::sample_variance(plain);
    double va = stats::sample_variance(augmented);
    CHECK(va <= vp);
    CHECK(va == 0.0);  // within-orbit average is exactly 2 on this task

    double mp = stats::mean(plain), ma = stats::mean(augmented);
    std::vector<double> devp(replicates), deva(replicates), diff(replicates);
    for (std::size_t r = 0; r < replicates; ++r) {
        devp[r] = (plain[r] - mp) * (plain[r] - mp);
        deva[r] = (augmented[r] - ma) * (augmented[r] - ma);
        diff[r] = plain[r] - augmented[r];
    }
    CHECK(stats::paired_one_sided_p(devp, deva) < 0.01);
    CHECK(std::abs(mp - ma) <= 3.0 * stats::stderr_of_mean(diff));
}

TEST_CASE("iterated expectations: direct vs disintegrated sampling") {
    auto c4 = grid_rotation_group(2);
    auto task = grid_rotation_task(2, 2, 100, 50, 0, 31);

    // constant h: both estimates equal the constant exactly
    auto h_const = [](const Vec&, double) { return 2.5; };
    SplitRng rng(32);
    auto r = iterated_expectation_check(h_const, task.sampler(), *c4, 500, rng);
    CHECK(r.direct == 2.5);
    CHECK(r.disintegrated == 2.5);

    // h = loss of a fixed model: agreement within 3 pooled standard errors
    SplitRng mrng(33);
    ModelSpec mlp;
    mlp.input_dim = 4;
    mlp.output_dim = 2;
    mlp.layers = {Layer::dense(6), Layer::activation(Activation::relu), Layer::dense(2)};
    auto params = init_params(mlp, mrng);
    LossFn loss = cross_entropy_loss();
    auto h = [&](const Vec& x, double y) { return loss(forward(mlp, params, x), y); };
    SplitRng rng2(34);
    auto r2 = iterated_expectation_check(h, task.sampler(), *c4, 100000, rng2);
    double pooled = std::sqrt(r2.direct_stderr * r2.direct_stderr +
                              r2.disintegrated_stderr * r2.disintegrated_stderr);
    CHECK(std::abs(r2.direct - r2.disintegrated) <= 3.0 * pooled);

    // invariant h: the disintegrated inner average is exactly h(Phi) per draw
    auto h_inv = [&](const Vec& x, double) {
        Vec canon = c4->canonical_representative(x);
        return canon[0] + canon[1];
    };
    SplitRng rng3(35);
    for (int t = 0; t < 50; ++t) {
        auto [phi, y] = task.sampler().draw_representative(rng3);
        double inner = 0.0;
        for (ElementId g = 0; g < c4->size(); ++g) inner += h_inv(c4->act(g, phi), y);
        inner /= static_cast<double>(c4->size());
        REQUIRE(inner == h_inv(phi, y));
    }
    auto r3 = iterated_expectation_check(h_inv, task.sampler(), *c4, 2000, rng3);
    CHECK(std::abs(r3.direct - r3.disintegrated) <=
          3.0 * std::sqrt(r3.direct_stderr * r3.direct_stderr +
                          r3.disintegrated_stderr * r3.disintegrated_stderr));
}
