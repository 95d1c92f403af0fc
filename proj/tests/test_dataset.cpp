#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <map>
#include <set>

#include "invlab/dataset.hpp"
#include "invlab/experiments.hpp"
#include "invlab/stats.hpp"
#include "invlab/train.hpp"

using namespace invlab;

TEST_CASE("generate: trivial group reduces to plain iid sampling") {
    InvariantTaskSpec t;
    t.name = "plain";
    t.group = trivial_group(2);
    t.representative_sampler = [](SplitRng& rng) {
        return Vec{rng.uniform(0, 1), rng.uniform(0, 1)};
    };
    t.label_rule = [](const Vec& phi) { return phi[0] > 0.5 ? 1.0 : 0.0; };
    t.n_train = 100;
    t.n_test = 10;
    t.n_ood = 0;
    SplitRng rng(1);
    auto splits = generate(t, rng);
    CHECK(splits.train.size() == 100);
    for (std::size_t i = 0; i < splits.train.size(); ++i)
        CHECK(splits.train.label(i) == t.label_rule(splits.train.input(i)));
}

TEST_CASE("generated datasets carry exactly one label per orbit") {
    auto task = grid_rotation_task(3, 3, 300, 50, 50, 7);
    SplitRng rng(7);
    auto splits = generate(task, rng);
    std::map<Vec, double> orbit_label;
    for (std::size_t i = 0; i < splits.train.size(); ++i) {
        Vec canon = task.group->canonical_representative(splits.train.input(i));
        auto [it, fresh] = orbit_label.emplace(canon, splits.train.label(i));
        if (!fresh) REQUIRE(it->second == splits.train.label(i));
    }
}

TEST_CASE("invariance audit passes on every shipped task") {
    SplitRng audit_rng(9);
    {
        auto task = grid_rotation_task(3, 2, 200, 50, 50, 11);
        SplitRng rng(11);
        auto splits = generate(task, rng);
        CHECK(audit_invariance(task, splits.train, audit_rng));
        CHECK(audit_invariance(task, splits.ood, audit_rng));
    }
    {
        auto task = permutation_pointset_task(4, 2, 200, 50, 50, 12);
        SplitRng rng(12);
        auto splits = generate(task, rng);
        CHECK(audit_invariance(task, splits.train, audit_rng));
    }
    {
        auto task = permutation_regression_task(3, 200, 50, 13);
        SplitRng rng(13);
        auto splits = generate(task, rng);
        CHECK(audit_invariance(task, splits.train, audit_rng));
    }
    {
        auto task = c2_sign_task(100, 20, 14);
        SplitRng rng(14);
        auto splits = generate(task, rng);
        CHECK(audit_invariance(task, splits.train, audit_rng));
    }
}

TEST_CASE("iterated-expectations identity holds on shipped tasks") {
    for (int which = 0; which < 2; ++which) {
        InvariantTaskSpec task = which == 0 ? grid_rotation_task(2, 2, 100, 10, 0, 21)
                                            : permutation_pointset_task(3, 2, 100, 10, 0, 22);
        auto h = [](const Vec& x, double y) { return x[0] * x[0] + y; };
        SplitRng rng(23);
        auto r = iterated_expectation_check(h, task.sampler(), *task.group, 20000, rng);
        double pooled = std::sqrt(r.direct_stderr * r.direct_stderr +
                                  r.disintegrated_stderr * r.disintegrated_stderr);
        INFO("task " << task.name);
        CHECK(std::abs(r.direct - r.disintegrated) <= 3.0 * pooled);
    }
}

TEST_CASE("grid task: orbit sizes, learnability smoke test") {
    auto task = grid_rotation_task(2, 2, 400, 100, 0, 31);
    SplitRng rng(31);
    auto splits = generate(task, rng);
    // generic representatives have full orbits
    std::size_t full = 0;
    for (std::size_t i = 0; i < 50; ++i)
        if (task.group->orbit(splits.train.input(i)).size() == 4) ++full;
    CHECK(full == 50);

    // a linear softmax probe beats chance comfortably
    ModelSpec probe = mlp_model(4, 8, 2);
    TrainConfig tc;
    tc.mode = TrainMode::baseline;
    tc.loss = cross_entropy_loss();
    tc.epochs = 30;
    tc.batch_size = 16;
    tc.lr = LrSchedule::constant(0.1);
    tc.seed = 3;
    auto fit = train(probe, tc, nullptr, splits.train, splits.test);
    auto f = [&](const Vec& x) { return forward(probe, fit.params, x); };
    double err = empirical_risk(f, splits.test, zero_one_loss()).value;
    CHECK(err < 0.35);  // chance is 0.5
}

TEST_CASE("pointset task: label invariance and orbit bound") {
    auto task = permutation_pointset_task(4, 2, 100, 20, 0, 41);
    SplitRng rng(41);
    auto splits = generate(task, rng);
    SplitRng grng(42);
    for (int t = 0; t < 100; ++t) {
        std::size_t i = grng.below(splits.train.size());
        ElementId g = task.group->sample_uniform(grng);
        Vec moved = task.group->act(g, splits.train.input(i));
        CHECK(task.label_rule(task.group->canonical_representative(moved)) ==
              splits.train.label(i));
    }
    CHECK(task.group->orbit(splits.train.input(0)).size() <= 24);

    // partial-invariance variant sits strictly between trivial and S_k
    auto partial = permutation_pointset_task(4, 2, 10, 5, 0, 43, {2, 2});
    CHECK(partial.group->size() == 4);
    CHECK(partial.group->size() < symmetric_group(4)->size());
    CHECK(partial.group->size() > 1);
}

TEST_CASE("ood templates are orbit-separated from in-distribution templates") {
    auto task = grid_rotation_task(4, 3, 10, 5, 5, 51);
    CHECK(template_separation(task) > 1.0);
}

TEST_CASE("nonuniform augmentation counterexample") {
    // epsilon = 1/2 restores invariance: risks agree within MC error
    {
        auto [ds, rep] = nonuniform_augmentation_counterexample(0.5, 4000, 61);
        CHECK(std::abs(rep.gap) <= 3.0 * rep.gap_stderr);
    }
    // epsilon = 0.05: augmented risk biased away from the plain risk
    {
        auto [ds, rep] = nonuniform_augmentation_counterexample(0.05, 4000, 62);
        CHECK(std::abs(rep.gap) > 3.0 * rep.gap_stderr);
        CHECK(rep.augmented.value > rep.plain.value);
    }
    // replicate-dataset simulation: augmented estimator has higher variance here
    {
        std::vector<double> plain_risks, aug_risks;
        for (int r = 0; r < 400; ++r) {
            auto [ds, rep] =
                nonuniform_augmentation_counterexample(0.05, 200, 1000 + static_cast<std::uint64_t>(r));
            plain_risks.push_back(rep.plain.value);
            aug_risks.push_back(rep.augmented.value);
        }
        CHECK(stats::sample_variance(aug_risks) > stats::sample_variance(plain_risks));
    }
    CHECK_THROWS_AS(nonuniform_augmentation_counterexample(0.0, 10, 1), std::invalid_argument);
    CHECK_THROWS_AS(nonuniform_augmentation_counterexample(0.7, 10, 1), std::invalid_argument);
}

TEST_CASE("zero-one counterexample: exact arithmetic of both label branches") {
    auto rep = zero_one_counterexample(0.1, 10, 71);
    // y = 1: averaged output 0.8*0.6 + 0.2*0 = 0.48 < 0.5, so FA risk 1
    CHECK(rep.fa_output_y1 == Catch::Approx(0.48).margin(1e-12));
    CHECK(rep.fa_risk_y1 == 1.0);
    CHECK(rep.pointwise_risk_y1 == Catch::Approx(0.2).margin(1e-12));  // 2 eps
    CHECK(rep.fa_risk_y1 > rep.pointwise_risk_y1);
    // y = 0: averaged output 1/2 + eps > 1/2, so FA is wrong for y = 0 too
    CHECK(rep.fa_output_y0 == Catch::Approx(0.6).margin(1e-12));
    CHECK(rep.fa_risk_y0 == 1.0);

    // degenerate fraction: 2 eps class_size < 1
    CHECK_THROWS_AS(zero_one_counterexample(0.04, 10, 1), std::invalid_argument);
    // non-integral flipped count
    CHECK_THROWS_AS(zero_one_counterexample(0.07, 10, 1), std::invalid_argument);
    // epsilon outside (0, 1/4)
    CHECK_THROWS_AS(zero_one_counterexample(0.3, 10, 1), std::invalid_argument);
}

TEST_CASE("dataset csv + sidecar round-trip") {
    auto task = permutation_regression_task(3, 30, 10, 81);
    SplitRng rng(81);
    auto splits = generate(task, rng);
    auto dir = std::filesystem::temp_directory_path() / "invlab_ds_test";
    std::filesystem::create_directories(dir);
    auto path = (dir / "train.csv").string();
    save_dataset_csv(splits.train, *task.group, path);

    auto loaded = load_dataset_csv(path);
    REQUIRE(loaded.data.size() == splits.train.size());
    for (std::size_t i = 0; i < loaded.data.size(); ++i) {
        CHECK(loaded.data.input(i) == splits.train.input(i));  // 17-digit round-trip is exact
        CHECK(loaded.data.label(i) == splits.train.label(i));
    }
    CHECK(loaded.group->size() == task.group->size());
    CHECK(loaded.data.meta().task == "permutation_regression");
    CHECK(loaded.data.meta().seed == 81);

    // header is the documented schema
    std::ifstream f(path);
    std::string header;
    std::getline(f, header);
    CHECK(header == "id,label,x0,x1,x2");
    std::filesystem::remove_all(dir);
}

TEST_CASE("c2 sign task has the analytic { 0, 4 } within-orbit losses") {
    auto task = c2_sign_task(50, 10, 91);
    SplitRng rng(91);
    auto splits = generate(task, rng);
    ModelSpec lin = linear_model(1);
    ParamVector w;
    w.values = {1.0};
    auto f = [&](const Vec& x) { return forward(lin, w, x); };
    LossFn loss = squared_loss();
    std::set<double> losses;
    for (std::size_t i = 0; i < splits.train.size(); ++i)
        losses.insert(loss(f(splits.train.input(i)), splits.train.label(i)));
    CHECK(losses == std::set<double>{0.0, 4.0});
}
