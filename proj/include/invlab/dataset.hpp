#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "invlab/group.hpp"
#include "invlab/io.hpp"
#include "invlab/loss.hpp"
#include "invlab/model.hpp"
#include "invlab/rng.hpp"
#include "invlab/symmetrize.hpp"

namespace invlab {

struct DatasetMeta {
    std::string task;
    std::string group_name;
    std::uint64_t seed = 0;
    std::string split;
    nlohmann::json task_params;
};

class LabeledDataset {
public:
    LabeledDataset() = default;
    explicit LabeledDataset(DatasetMeta meta) : meta_(std::move(meta)) {}

    std::size_t size() const { return inputs_.size(); }
    std::size_t dim() const { return inputs_.empty() ? 0 : inputs_[0].size(); }
    const Vec& input(std::size_t i) const { return inputs_[i]; }
    double label(std::size_t i) const { return labels_[i]; }
    const DatasetMeta& meta() const { return meta_; }
    DatasetMeta& meta() { return meta_; }

    void add(Vec x, double y) {
        if (!inputs_.empty() && x.size() != inputs_[0].size())
            throw std::invalid_argument("dataset: inconsistent input dimension");
        inputs_.push_back(std::move(x));
        labels_.push_back(y);
    }

private:
    std::vector<Vec> inputs_;
    std::vector<double> labels_;
    DatasetMeta meta_;
};

// A synthetic exactly-invariant task, built by disintegration: sample an
// orbit representative, label it by a function of the representative alone,
// then realize the input through a Haar-random group element. Labels are
// exactly constant on orbits by construction.
struct InvariantTaskSpec {
    std::string name;
    GroupPtr group;
    std::function<Vec(SplitRng&)> representative_sampler;
    std::function<double(const Vec&)> label_rule;   // must be orbit-constant
    std::function<Vec(SplitRng&)> ood_representative_sampler;  // disjoint support, same group
    std::size_t n_train = 2000;
    std::size_t n_test = 500;
    std::size_t n_ood = 500;
    std::uint64_t seed = 0;
    nlohmann::json params;
    std::vector<Vec> templates;      // class prototypes, for support audits
    std::vector<Vec> ood_templates;

    // Adapter for iterated_expectation_check.
    struct Sampler {
        const InvariantTaskSpec& task;
        bool ood = false;
        std::pair<Vec, double> draw_representative(SplitRng& rng) const {
            Vec phi = ood ? task.ood_representative_sampler(rng) : task.representative_sampler(rng);
            phi = task.group->canonical_representative(phi);
            return {phi, task.label_rule(phi)};
        }
    };
    Sampler sampler() const { return {*this, false}; }
    Sampler ood_sampler() const { return {*this, true}; }
};

struct GeneratedSplits {
    LabeledDataset train;
    LabeledDataset test;
    LabeledDataset ood;
};

namespace detail_ds {
inline LabeledDataset generate_split(const InvariantTaskSpec& task, std::size_t n, SplitRng rng,
                                     bool ood, const std::string& split_name) {
    DatasetMeta meta{task.name, task.group->name(), task.seed, split_name, task.params};
    LabeledDataset ds(meta);
    for (std::size_t i = 0; i < n; ++i) {
        Vec phi = ood ? task.ood_representative_sampler(rng) : task.representative_sampler(rng);
        phi = task.group->canonical_representative(phi);
        double y = task.label_rule(phi);
        ElementId g = task.group->sample_uniform(rng);
        ds.add(task.group->act(g, phi), y);
    }
    return ds;
}
} // namespace detail_ds

inline GeneratedSplits generate(const InvariantTaskSpec& task, SplitRng& rng) {
    GeneratedSplits out;
    out.train = detail_ds::generate_split(task, task.n_train, rng.fork(1), false, "train");
    out.test = detail_ds::generate_split(task, task.n_test, rng.fork(2), false, "test");
    if (task.n_ood > 0 && task.ood_representative_sampler)
        out.ood = detail_ds::generate_split(task, task.n_ood, rng.fork(3), true, "ood");
    return out;
}

// For 100 random (example, element) pairs, the label re-derived from the
// canonical representative of the transformed input must match the stored
// label.
inline bool audit_invariance(const InvariantTaskSpec& task, const LabeledDataset& ds,
                             SplitRng& rng, std::size_t n_checks = 100) {
    if (ds.size() == 0) return true;
    for (std::size_t t = 0; t < n_checks; ++t) {
        std::size_t i = rng.below(ds.size());
        ElementId g = task.group->sample_uniform(rng);
        Vec moved = task.group->act(g, ds.input(i));
        double y = task.label_rule(task.group->canonical_representative(moved));
        if (y != ds.label(i)) return false;
    }
    return true;
}

// Smallest orbit-to-orbit distance between in-distribution and OOD class
// templates; OOD construction should keep this comfortably positive.
inline double template_separation(const InvariantTaskSpec& task) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& t_in : task.templates)
        for (const auto& t_ood : task.ood_templates)
            for (ElementId g = 0; g < task.group->size(); ++g)
                best = std::min(best, norm2(t_in - task.group->act(g, t_ood)));
    return best;
}

// --- Shipped tasks -------------------------------------------------------------

// Scalar sign task: X uniform on {+1,-1} under the C2 sign-flip group, label
// identically 1. With f(x) = x and squared loss the two orbit losses are
// exactly {0, 4}.
inline InvariantTaskSpec c2_sign_task(std::size_t n_train, std::size_t n_test,
                                      std::uint64_t seed) {
    InvariantTaskSpec t;
    t.name = "c2_sign";
    t.group = sign_flip_group(1);
    t.representative_sampler = [](SplitRng&) { return Vec{-1.0}; };
    t.label_rule = [](const Vec&) { return 1.0; };
    t.n_train = n_train;
    t.n_test = n_test;
    t.n_ood = 0;
    t.seed = seed;
    t.params = {{"n_train", n_train}, {"n_test", n_test}};
    return t;
}

namespace detail_ds {

inline Vec grid_blob_template(std::size_t p, double cr, double cc, double amplitude,
                              double sigma) {
    Vec t(p * p, 0.0);
    for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < p; ++c) {
            double dr = (static_cast<double>(r) + 0.5) / static_cast<double>(p) - cr;
            double dc = (static_cast<double>(c) + 0.5) / static_cast<double>(p) - cc;
            t[r * p + c] = amplitude * std::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma));
        }
    return t;
}

inline Vec grid_stripe_template(std::size_t p, double freq, double phase, double amplitude) {
    Vec t(p * p, 0.0);
    for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < p; ++c) {
            double u = (static_cast<double>(r) + 0.5) / static_cast<double>(p);
            t[r * p + c] = amplitude * std::sin(2.0 * 3.14159265358979323846 * freq * u + phase);
        }
    return t;
}

} // namespace detail_ds

// C4 grid-rotation classification: class templates are Gaussian blobs at
// class-specific positions plus pixel noise; labels are
// nearest-template-over-orbit, an exactly rotation-invariant rule. The OOD
// sampler uses stripe templates of matched scale with disjoint support.
inline InvariantTaskSpec grid_rotation_task(std::size_t p, std::size_t n_classes,
                                            std::size_t n_train, std::size_t n_test,
                                            std::size_t n_ood, std::uint64_t seed,
                                            double noise = 0.15) {
    if (p < 2) throw std::invalid_argument("grid_rotation_task: p >= 2 required");
    if (n_classes < 2 || n_classes > 5)
        throw std::invalid_argument("grid_rotation_task supports 2..5 classes");
    InvariantTaskSpec t;
    t.name = "grid_rotation";
    t.group = grid_rotation_group(p);

    const double amp = 2.0;
    const double sigma = 0.18;
    const double centers[5][2] = {{0.3, 0.3}, {0.3, 0.7}, {0.7, 0.5}, {0.55, 0.25}, {0.5, 0.6}};
    auto templates = std::make_shared<std::vector<Vec>>();
    for (std::size_t c = 0; c < n_classes; ++c)
        templates->push_back(detail_ds::grid_blob_template(p, centers[c][0], centers[c][1], amp, sigma));

    auto ood_templates = std::make_shared<std::vector<Vec>>();
    for (std::size_t c = 0; c < n_classes; ++c)
        ood_templates->push_back(
            detail_ds::grid_stripe_template(p, 1.0 + static_cast<double>(c), 0.4, amp * 0.6));

    GroupPtr group = t.group;
    t.representative_sampler = [templates, group, noise, n_classes](SplitRng& rng) {
        std::size_t c = rng.below(n_classes);
        Vec x = (*templates)[c];
        for (double& v : x) v += noise * rng.normal();
        return group->canonical_representative(x);
    };
    t.ood_representative_sampler = [ood_templates, group, noise, n_classes](SplitRng& rng) {
        std::size_t c = rng.below(n_classes);
        Vec x = (*ood_templates)[c];
        for (double& v : x) v += noise * rng.normal();
        return group->canonical_representative(x);
    };
    t.label_rule = [templates, group, n_classes](const Vec& phi) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_c = 0;
        for (std::size_t c = 0; c < n_classes; ++c) {
            for (ElementId g = 0; g < group->size(); ++g) {
                double d = norm2(phi - group->act(g, (*templates)[c]));
                if (d < best) {
                    best = d;
                    best_c = c;
                }
            }
        }
        return static_cast<double>(best_c);
    };
    t.templates = *templates;
    t.ood_templates = *ood_templates;
    t.n_train = n_train;
    t.n_test = n_test;
    t.n_ood = n_ood;
    t.seed = seed;
    t.params = {{"p", p}, {"n_classes", n_classes}, {"noise", noise}};
    return t;
}

// Permutation-invariant point-set classification: k points in R^dims whose
// slot order is scrambled by S_k (or a block subgroup); the binary label
// thresholds the spread statistic mean_i ||p_i - mean(p)||^2, a symmetric
// function of the set.
inline InvariantTaskSpec permutation_pointset_task(std::size_t k_points, std::size_t dims,
                                                   std::size_t n_train, std::size_t n_test,
                                                   std::size_t n_ood, std::uint64_t seed,
                                                   const std::vector<std::size_t>& blocks = {}) {
    if (k_points < 2) throw std::invalid_argument("permutation_pointset_task: k >= 2 required");
    InvariantTaskSpec t;
    t.name = "permutation_pointset";
    t.group = blocks.empty() ? symmetric_group(k_points, dims)
                             : block_symmetric_group(blocks, dims);

    const double r0 = 0.5, r1 = 1.5;
    const std::size_t d = dims, k = k_points;
    // threshold between the expected spreads of the two radius classes
    const double e0 = r0 * r0 * static_cast<double>(d) * (1.0 - 1.0 / static_cast<double>(k));
    const double e1 = r1 * r1 * static_cast<double>(d) * (1.0 - 1.0 / static_cast<double>(k));
    const double theta = std::sqrt(e0 * e1);

    GroupPtr group = t.group;
    t.representative_sampler = [k, d, r0, r1, group](SplitRng& rng) {
        double r = rng.below(2) == 0 ? r0 : r1;
        Vec x(k * d);
        for (double& v : x) v = r * rng.normal();
        return group->canonical_representative(x);
    };
    t.ood_representative_sampler = [k, d, group](SplitRng& rng) {
        // points near a shell of radius 3: same group, disjoint support scale
        Vec x(k * d);
        for (std::size_t i = 0; i < k; ++i) {
            Vec dir(d);
            double nrm = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                dir[j] = rng.normal();
                nrm += dir[j] * dir[j];
            }
            nrm = std::sqrt(std::max(nrm, 1e-12));
            double rad = 3.0 + 0.1 * rng.normal();
            for (std::size_t j = 0; j < d; ++j) x[i * d + j] = rad * dir[j] / nrm;
        }
        return group->canonical_representative(x);
    };
    t.label_rule = [k, d, theta](const Vec& phi) {
        Vec centroid(d, 0.0);
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < d; ++j) centroid[j] += phi[i * d + j];
        for (double& v : centroid) v /= static_cast<double>(k);
        double spread = 0.0;
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double dv = phi[i * d + j] - centroid[j];
                spread += dv * dv;
            }
        spread /= static_cast<double>(k);
        return spread >= theta ? 1.0 : 0.0;
    };
    t.n_train = n_train;
    t.n_test = n_test;
    t.n_ood = n_ood;
    t.seed = seed;
    t.params = {{"k_points", k_points}, {"dims", dims}, {"blocks", blocks}};
    return t;
}

// Permutation-invariant linear regression target: y is a fixed linear
// functional of the *sorted* representative, so the best linear predictor of
// the scrambled input is the invariant least-squares solution.
inline InvariantTaskSpec permutation_regression_task(std::size_t k, std::size_t n_train,
                                                     std::size_t n_test, std::uint64_t seed) {
    if (k < 2 || k > 6) throw std::invalid_argument("permutation_regression_task: 2 <= k <= 6");
    InvariantTaskSpec t;
    t.name = "permutation_regression";
    t.group = symmetric_group(k);
    static const double coef[6] = {1.0, -0.5, 2.0, 0.25, -1.5, 0.75};
    GroupPtr group = t.group;
    t.representative_sampler = [k, group](SplitRng& rng) {
        Vec x(k);
        for (double& v : x) v = rng.uniform(-1.0, 1.0);
        return group->canonical_representative(x);
    };
    t.label_rule = [k](const Vec& phi) {
        double y = 0.0;
        for (std::size_t j = 0; j < k; ++j) y += coef[j] * phi[j];
        return y;
    };
    t.n_train = n_train;
    t.n_test = n_test;
    t.n_ood = 0;
    t.seed = seed;
    t.params = {{"k", k}};
    return t;
}

// --- Counterexample constructions ----------------------------------------------

// Sign-asymmetric scalar distribution (P(X > 0) = 1 - eps) with an even
// target g and the one-sided predictor f(x) = 1[x > 0] g(x). Under the C2
// sign group the augmented risk is a biased estimate of the empirical risk.
struct NonuniformCounterexampleReport {
    RiskEstimate plain;
    RiskEstimate augmented;
    double gap = 0.0;
    double gap_stderr = 0.0;  // pooled standard error of the two estimates
    double epsilon = 0.0;
};

inline std::pair<LabeledDataset, NonuniformCounterexampleReport>
nonuniform_augmentation_counterexample(double epsilon, std::size_t n, std::uint64_t seed) {
    if (!(epsilon > 0.0 && epsilon <= 0.5))
        throw std::invalid_argument("epsilon must be in (0, 1/2]");
    DatasetMeta meta{"nonuniform_counterexample", "c2_sign1", seed, "train",
                     {{"epsilon", epsilon}, {"n", n}}};
    LabeledDataset ds(meta);
    SplitRng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        double s = rng.uniform01() < epsilon ? -1.0 : 1.0;
        double m = rng.uniform(0.0, 2.0);
        double x = s * m;
        ds.add(Vec{x}, m * m * m);  // label = g(x) = |x|^3, an even function
    }
    auto f = [](const Vec& x) { return Vec{x[0] > 0.0 ? x[0] * x[0] * x[0] : 0.0}; };
    auto group = sign_flip_group(1);
    LossFn loss = squared_loss();

    NonuniformCounterexampleReport rep;
    rep.epsilon = epsilon;
    rep.plain = empirical_risk(f, ds, loss);
    rep.augmented = augmented_risk(f, ds, loss, *group);
    rep.gap = rep.augmented.value - rep.plain.value;

    // per-point losses for the standard errors
    std::vector<double> lp, la;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        lp.push_back(loss(f(ds.input(i)), ds.label(i)));
        double s = 0.0;
        for (ElementId g = 0; g < group->size(); ++g)
            s += loss(f(group->act(g, ds.input(i))), ds.label(i));
        la.push_back(s / static_cast<double>(group->size()));
    }
    double sep = stats::stderr_of_mean(lp);
    double sea = stats::stderr_of_mean(la);
    rep.gap_stderr = std::sqrt(sep * sep + sea * sea);
    return {std::move(ds), rep};
}

// Appendix-style 0-1 counterexample realized with real machinery: the orbit
// of a one-hot vector under the cyclic shift group and a linear predictor
// whose outputs are 1/2 + y*eps on a (1-2eps) fraction of the orbit and 1-y
// on the rest. Feature averaging flips the decision for both label branches;
// the strict risk comparison is reported on the y = 1 branch.
struct ZeroOneCounterexampleReport {
    double epsilon = 0.0;
    std::size_t class_size = 0;
    double pointwise_risk_y1 = 0.0;
    double fa_risk_y1 = 0.0;
    double fa_output_y1 = 0.0;
    double pointwise_risk_y0 = 0.0;
    double fa_risk_y0 = 0.0;
    double fa_output_y0 = 0.0;
};

inline ZeroOneCounterexampleReport zero_one_counterexample(double epsilon,
                                                           std::size_t class_size,
                                                           std::uint64_t seed) {
    if (!(epsilon > 0.0 && epsilon < 0.25))
        throw std::invalid_argument("epsilon must be in (0, 1/4)");
    double flipped_real = 2.0 * epsilon * static_cast<double>(class_size);
    auto flipped = static_cast<std::size_t>(std::llround(flipped_real));
    if (flipped < 1 || std::abs(flipped_real - static_cast<double>(flipped)) > 1e-9 ||
        flipped > class_size)
        throw std::invalid_argument(
            "infeasible fractions: class_size * 2 * epsilon must be a positive integer");

    auto group = cyclic_shift_group(class_size);
    ModelSpec spec;
    spec.input_dim = class_size;
    spec.output_dim = 1;
    spec.layers = {Layer::dense(1, false)};
    LossFn loss = zero_one_loss();

    SplitRng rng(seed);
    std::vector<std::size_t> slots(class_size);
    for (std::size_t i = 0; i < class_size; ++i) slots[i] = i;
    rng.shuffle(slots);  // which orbit positions carry the flipped output

    ZeroOneCounterexampleReport rep;
    rep.epsilon = epsilon;
    rep.class_size = class_size;

    Vec x0(class_size, 0.0);
    x0[0] = 1.0;

    for (int y = 0; y <= 1; ++y) {
        ParamVector v;
        v.values.assign(class_size, 0.5 + y * epsilon);
        for (std::size_t i = 0; i < flipped; ++i) v.values[slots[i]] = 1.0 - y;

        auto f = [&](const Vec& x) { return forward(spec, v, x); };
        DatasetMeta meta{"zero_one_counterexample", group->name(), seed, "orbit",
                         {{"epsilon", epsilon}, {"class_size", class_size}, {"y", y}}};
        LabeledDataset orbit_point(meta);
        orbit_point.add(x0, static_cast<double>(y));

        double pointwise = augmented_risk(f, orbit_point, loss, *group).value;
        Vec fa_out = symmetrize_exact(f, x0, *group);
        double fa_risk = loss(fa_out, static_cast<double>(y));
        if (y == 1) {
            rep.pointwise_risk_y1 = pointwise;
            rep.fa_risk_y1 = fa_risk;
            rep.fa_output_y1 = fa_out[0];
        } else {
            rep.pointwise_risk_y0 = pointwise;
            rep.fa_risk_y0 = fa_risk;
            rep.fa_output_y0 = fa_out[0];
        }
    }
    return rep;
}

// --- Dataset files ---------------------------------------------------------------
// CSV with header "id,label,x0..x{d-1}" plus a JSON sidecar
// <path>.meta.json = {group, task, seed, split} for reproducibility.

inline void save_dataset_csv(const LabeledDataset& ds, const GroupAction& group,
                             const std::string& path) {
    std::ostringstream out;
    out << "id,label";
    for (std::size_t j = 0; j < ds.dim(); ++j) out << ",x" << j;
    out << "\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out << i << ',' << format_double(ds.label(i));
        for (std::size_t j = 0; j < ds.dim(); ++j) out << ',' << format_double(ds.input(i)[j]);
        out << "\n";
    }
    write_file(path, out.str());

    nlohmann::json side;
    side["group"] = group.to_json();
    side["task"] = {{"name", ds.meta().task}, {"params", ds.meta().task_params}};
    side["seed"] = ds.meta().seed;
    side["split"] = ds.meta().split;
    write_file(path + ".meta.json", side.dump(2) + "\n");
}

struct LoadedDataset {
    LabeledDataset data;
    GroupPtr group;
};

inline LoadedDataset load_dataset_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open dataset: " + path);
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("dataset empty: " + path);
    auto header = split_csv_line(line);
    if (header.size() < 3 || header[0] != "id" || header[1] != "label")
        throw std::runtime_error("dataset header malformed: " + path);
    const std::size_t d = header.size() - 2;

    LoadedDataset out;
    nlohmann::json side = nlohmann::json::parse(read_file(path + ".meta.json"));
    out.group = GroupAction::from_json(side.at("group"));
    DatasetMeta meta;
    meta.task = side.at("task").at("name").get<std::string>();
    meta.task_params = side.at("task").at("params");
    meta.group_name = out.group->name();
    meta.seed = side.at("seed").get<std::uint64_t>();
    meta.split = side.at("split").get<std::string>();
    out.data = LabeledDataset(meta);

    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != d + 2) throw std::runtime_error("dataset row malformed: " + path);
        Vec x(d);
        for (std::size_t j = 0; j < d; ++j) x[j] = parse_double(cells[j + 2]);
        out.data.add(std::move(x), parse_double(cells[1]));
    }
    return out;
}

} // namespace invlab
