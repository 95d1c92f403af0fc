#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "invlab/group.hpp"
#include "invlab/loss.hpp"
#include "invlab/rng.hpp"
#include "invlab/stats.hpp"
#include "invlab/vecmath.hpp"

namespace invlab {

// How a function is made (approximately) invariant: exact group averaging,
// k-sample Monte Carlo averaging, or non-injective max/min pooling over the
// orbit. Monte Carlo draws are either fresh per call or a fixed element set
// reused across calls (e.g. for one training epoch) -- the trade-off between
// the two is deliberately exposed.
struct SymmetrizationMode {
    enum class Kind { exact, monte_carlo, max_pool, min_pool };
    enum class Resample { fresh_per_call, fixed };

    Kind kind = Kind::exact;
    int k = 1;
    Resample resample = Resample::fresh_per_call;
    std::vector<ElementId> fixed_set;

    static SymmetrizationMode exact() { return {}; }
    static SymmetrizationMode monte_carlo(int k) {
        if (k < 1) throw std::invalid_argument("monte_carlo k must be >= 1");
        SymmetrizationMode m;
        m.kind = Kind::monte_carlo;
        m.k = k;
        return m;
    }
    static SymmetrizationMode monte_carlo_fixed(std::vector<ElementId> g_set) {
        if (g_set.empty()) throw std::invalid_argument("fixed g_set must be nonempty");
        SymmetrizationMode m;
        m.kind = Kind::monte_carlo;
        m.k = static_cast<int>(g_set.size());
        m.resample = Resample::fixed;
        m.fixed_set = std::move(g_set);
        return m;
    }
    // Fixed-resample policy without a pinned set: the training loop draws one
    // k-element set per epoch and supplies it through the evaluation context.
    static SymmetrizationMode monte_carlo_epoch_fixed(int k) {
        if (k < 1) throw std::invalid_argument("monte_carlo k must be >= 1");
        SymmetrizationMode m;
        m.kind = Kind::monte_carlo;
        m.k = k;
        m.resample = Resample::fixed;
        return m;
    }
    static SymmetrizationMode max_pool() { return {Kind::max_pool, 1, Resample::fresh_per_call, {}}; }
    static SymmetrizationMode min_pool() { return {Kind::min_pool, 1, Resample::fresh_per_call, {}}; }

    std::string str() const {
        switch (kind) {
            case Kind::exact: return "exact";
            case Kind::monte_carlo:
                return "mc(" + std::to_string(k) +
                       (resample == Resample::fixed ? ",fixed)" : ")");
            case Kind::max_pool: return "max_pool";
            case Kind::min_pool: return "min_pool";
        }
        return "?";
    }
};

using VecFn = std::function<Vec(const Vec&)>;

// S_G f(x) = |G|^{-1} sum_g f(gx). Invariant in x by construction; the
// transformed inputs are evaluated in sorted order so the result is
// bit-identical across an orbit under permutation actions.
template <class F>
Vec symmetrize_exact(F&& f, const Vec& x, const GroupAction& group) {
    std::vector<Vec> ins;
    ins.reserve(group.size());
    for (ElementId g = 0; g < group.size(); ++g) ins.push_back(group.act(g, x));
    std::sort(ins.begin(), ins.end());
    Vec acc;
    for (const Vec& gx : ins) {
        Vec v = f(gx);
        if (acc.empty()) acc = std::move(v);
        else axpy(1.0, v, acc);
    }
    return (1.0 / static_cast<double>(group.size())) * std::move(acc);
}

// k^{-1} sum_{j<=k} f(g_j x) over an explicit element multiset.
template <class F>
Vec symmetrize_over_set(F&& f, const Vec& x, const GroupAction& group,
                        const std::vector<ElementId>& g_set) {
    if (g_set.empty()) throw std::invalid_argument("symmetrize_over_set: empty element set");
    Vec acc;
    for (ElementId g : g_set) {
        Vec v = f(group.act(g, x));
        if (acc.empty()) acc = std::move(v);
        else axpy(1.0, v, acc);
    }
    return (1.0 / static_cast<double>(g_set.size())) * std::move(acc);
}

// Monte Carlo symmetrization with k i.i.d. Haar draws; unbiased for the exact
// average of f's outputs.
template <class F>
Vec symmetrize_mc(F&& f, const Vec& x, const GroupAction& group, int k, SplitRng& rng) {
    if (k < 1) throw std::invalid_argument("symmetrize_mc: k must be >= 1");
    std::vector<ElementId> g_set(static_cast<std::size_t>(k));
    for (auto& g : g_set) g = group.sample_uniform(rng);
    return symmetrize_over_set(f, x, group, g_set);
}

// Coordinatewise max/min of f over the whole orbit; a non-injective
// G-invariant pooling.
template <class F>
Vec pool_invariant(F&& f, const Vec& x, const GroupAction& group, SymmetrizationMode::Kind kind) {
    if (kind != SymmetrizationMode::Kind::max_pool && kind != SymmetrizationMode::Kind::min_pool)
        throw std::invalid_argument("pool_invariant: kind must be max_pool or min_pool");
    Vec acc;
    const bool take_max = kind == SymmetrizationMode::Kind::max_pool;
    for (ElementId g = 0; g < group.size(); ++g) {
        Vec v = f(group.act(g, x));
        if (acc.empty()) {
            acc = std::move(v);
        } else {
            for (std::size_t i = 0; i < acc.size(); ++i)
                acc[i] = take_max ? std::max(acc[i], v[i]) : std::min(acc[i], v[i]);
        }
    }
    return acc;
}

// --- Empirical risk estimators ------------------------------------------------

enum class RiskEstimator { plain, augmented_exact, augmented_mc };

struct RiskEstimate {
    double value = 0.0;
    RiskEstimator estimator = RiskEstimator::plain;
    int m = 0;  // Monte Carlo transforms per example, when applicable
    std::size_t n = 0;
    std::string loss_name;
};

// Minimal dataset view used by the estimators; the full LabeledDataset type
// in dataset.hpp provides these members.
template <class F, class DS>
RiskEstimate empirical_risk(F&& f, const DS& data, const LossFn& loss) {
    if (data.size() == 0) throw std::domain_error("empirical_risk: empty dataset");
    double s = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) s += loss(f(data.input(i)), data.label(i));
    return {s / static_cast<double>(data.size()), RiskEstimator::plain, 0, data.size(), loss.name()};
}

// n^{-1} sum_i |G|^{-1} sum_g loss(f(g x_i), y_i). Equals empirical_risk
// whenever f is G-invariant.
template <class F, class DS>
RiskEstimate augmented_risk(F&& f, const DS& data, const LossFn& loss, const GroupAction& group) {
    if (data.size() == 0) throw std::domain_error("augmented_risk: empty dataset");
    double s = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        double orbit_sum = 0.0;
        for (ElementId g = 0; g < group.size(); ++g)
            orbit_sum += loss(f(group.act(g, data.input(i))), data.label(i));
        s += orbit_sum / static_cast<double>(group.size());
    }
    return {s / static_cast<double>(data.size()), RiskEstimator::augmented_exact, 0, data.size(),
            loss.name()};
}

// (nm)^{-1} sum_i sum_{j<=m} loss(f(G_ij x_i), y_i) with G_ij i.i.d. Haar, or
// a caller-fixed element set reused for every example. Unbiased for
// augmented_risk.
template <class F, class DS>
RiskEstimate augmented_risk_mc(F&& f, const DS& data, const LossFn& loss, const GroupAction& group,
                               int m, SplitRng& rng,
                               const std::vector<ElementId>* fixed_set = nullptr) {
    if (data.size() == 0) throw std::domain_error("augmented_risk_mc: empty dataset");
    if (fixed_set == nullptr && m < 1) throw std::invalid_argument("augmented_risk_mc: m must be >= 1");
    double s = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (fixed_set) {
            for (ElementId g : *fixed_set) {
                s += loss(f(group.act(g, data.input(i))), data.label(i));
                ++count;
            }
        } else {
            for (int j = 0; j < m; ++j) {
                ElementId g = group.sample_uniform(rng);
                s += loss(f(group.act(g, data.input(i))), data.label(i));
                ++count;
            }
        }
    }
    int m_eff = fixed_set ? static_cast<int>(fixed_set->size()) : m;
    return {s / static_cast<double>(count), RiskEstimator::augmented_mc, m_eff, data.size(),
            loss.name()};
}

// Population variance of {f(gx)}_{g in G}, averaged over output coordinates.
// Two-pass computation over the sorted transformed inputs, so the value is
// identical from every point of the orbit under permutation actions and
// exactly zero for a bit-invariant f.
template <class F>
double orbit_prediction_variance(F&& f, const Vec& x, const GroupAction& group) {
    std::vector<Vec> ins;
    ins.reserve(group.size());
    for (ElementId g = 0; g < group.size(); ++g) ins.push_back(group.act(g, x));
    std::sort(ins.begin(), ins.end());
    std::vector<Vec> vals;
    vals.reserve(ins.size());
    for (const Vec& gx : ins) vals.push_back(f(gx));
    const std::size_t odim = vals[0].size();
    const double n = static_cast<double>(vals.size());
    double total = 0.0;
    for (std::size_t j = 0; j < odim; ++j) {
        double m = 0.0;
        for (const auto& v : vals) m += v[j];
        m /= n;
        double s = 0.0;
        for (const auto& v : vals) s += (v[j] - m) * (v[j] - m);
        total += s / n;
    }
    return total / static_cast<double>(odim);
}

// Two Monte Carlo routes to E[h(X, Y)] under an invariant distribution:
// direct sampling of (X, Y) versus sampling the orbit representative and
// averaging the group exactly. Agreement within statistical tolerance is the
// iterated-expectations identity.
struct IteratedExpectationResult {
    double direct = 0.0;
    double direct_stderr = 0.0;
    double disintegrated = 0.0;
    double disintegrated_stderr = 0.0;
};

// Sampler contract: draw_representative(rng) -> (Vec phi, double label).
template <class H, class Sampler>
IteratedExpectationResult iterated_expectation_check(H&& h, const Sampler& dist,
                                                     const GroupAction& group,
                                                     std::size_t n_samples, SplitRng& rng) {
    if (n_samples == 0) throw std::invalid_argument("iterated_expectation_check: n_samples == 0");
    std::vector<double> direct_vals, disint_vals;
    direct_vals.reserve(n_samples);
    disint_vals.reserve(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
        auto [phi, y] = dist.draw_representative(rng);
        ElementId g = group.sample_uniform(rng);
        direct_vals.push_back(h(group.act(g, phi), y));
    }
    for (std::size_t i = 0; i < n_samples; ++i) {
        auto [phi, y] = dist.draw_representative(rng);
        double inner = 0.0;
        for (ElementId g = 0; g < group.size(); ++g) inner += h(group.act(g, phi), y);
        disint_vals.push_back(inner / static_cast<double>(group.size()));
    }
    IteratedExpectationResult r;
    r.direct = stats::mean(direct_vals);
    r.disintegrated = stats::mean(disint_vals);
    r.direct_stderr = stats::stderr_of_mean(direct_vals);
    r.disintegrated_stderr = stats::stderr_of_mean(disint_vals);
    return r;
}

} // namespace invlab
