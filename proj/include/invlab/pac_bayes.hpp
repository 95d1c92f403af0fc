#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "invlab/dataset.hpp"
#include "invlab/grad.hpp"
#include "invlab/group.hpp"
#include "invlab/loss.hpp"
#include "invlab/model.hpp"
#include "invlab/rng.hpp"
#include "invlab/stats.hpp"
#include "invlab/symmetrize.hpp"
#include "invlab/vecmath.hpp"

namespace invlab {

// Diagonal Gaussian over a flat parameter vector; PAC-Bayes priors P and
// posteriors Q.
struct GaussianWeightDistribution {
    ParamVector mean;
    Vec std;  // per-coordinate, strictly positive

    void validate() const {
        if (mean.size() != std.size())
            throw std::invalid_argument("gaussian: mean/std dimension mismatch");
        for (double s : std)
            if (!(s > 0.0)) throw std::invalid_argument("gaussian: std must be positive");
    }

    static GaussianWeightDistribution isotropic(ParamVector mean, double s) {
        GaussianWeightDistribution g;
        g.std.assign(mean.size(), s);
        g.mean = std::move(mean);
        g.validate();
        return g;
    }

    ParamVector sample(SplitRng& rng) const {
        ParamVector w = mean;
        for (std::size_t i = 0; i < w.size(); ++i) w.values[i] += std[i] * rng.normal();
        return w;
    }
};

struct BoundInputs {
    std::size_t n = 0;
    double delta = 0.05;
    std::optional<double> beta;  // nullopt: minimize over the fixed grid 2^-6 .. 2^6
    int mc_samples_for_Q_risk = 150;

    void validate() const {
        if (n == 0) throw std::invalid_argument("bound inputs: n must be positive");
        if (!(delta > 0.0 && delta <= 1.0))
            throw std::invalid_argument("bound inputs: delta must be in (0, 1]");
        if (beta && !(*beta > 0.0)) throw std::invalid_argument("bound inputs: beta must be > 0");
        if (mc_samples_for_Q_risk < 1)
            throw std::invalid_argument("bound inputs: mc_samples_for_Q_risk must be >= 1");
    }
};

// --- Catoni bound ---------------------------------------------------------------

inline std::vector<double> catoni_beta_grid() {
    std::vector<double> g;
    for (int j = -6; j <= 6; ++j) g.push_back(std::ldexp(1.0, j));  // 2^j
    return g;
}

struct CatoniResult {
    double bound = 0.0;
    double beta_used = 0.0;
};

// (1 - exp(-beta * r - (kl + log(1/delta)) / n)) / (1 - exp(-beta)).
// Monotone increasing in r and kl, decreasing in n and delta. The theorem
// holds simultaneously for all beta > 0, so minimizing over the fixed beta
// grid needs no union-bound correction.
inline CatoniResult catoni_bound(double empirical_risk_q, double kl, const BoundInputs& inputs) {
    inputs.validate();
    if (!(empirical_risk_q >= 0.0 && empirical_risk_q <= 1.0))
        throw std::invalid_argument("catoni_bound: empirical risk must be in [0, 1]");
    if (!(kl >= 0.0)) throw std::invalid_argument("catoni_bound: kl must be nonnegative");

    auto eval = [&](double beta) {
        double expo = beta * empirical_risk_q +
                      (kl + std::log(1.0 / inputs.delta)) / static_cast<double>(inputs.n);
        return (1.0 - std::exp(-expo)) / (1.0 - std::exp(-beta));
    };
    if (inputs.beta) return {eval(*inputs.beta), *inputs.beta};
    CatoniResult best{std::numeric_limits<double>::infinity(), 0.0};
    for (double b : catoni_beta_grid()) {
        double v = eval(b);
        if (v < best.bound) best = {v, b};
    }
    return best;
}

// --- KL divergences --------------------------------------------------------------

struct KlDecomposition {
    double value = 0.0;
    double variance_term = 0.0;
    double mean_term = 0.0;
};

// KL(Q || P) for diagonal Gaussians, in nats, split into the covariance and
// mean-shift contributions:
//   sum_i 1/2 (s_i^2/sigma_i^2 - 1 + ln(sigma_i^2/s_i^2))  +  ||mu_P - mu_Q||^2_Sigma / 2.
inline KlDecomposition kl_diag_gaussian(const GaussianWeightDistribution& q,
                                        const GaussianWeightDistribution& p) {
    q.validate();
    p.validate();
    if (q.mean.size() != p.mean.size())
        throw std::invalid_argument("kl_diag_gaussian: dimension mismatch");
    KlDecomposition out;
    for (std::size_t i = 0; i < q.mean.size(); ++i) {
        const double r = (q.std[i] * q.std[i]) / (p.std[i] * p.std[i]);
        out.variance_term += 0.5 * (r - 1.0 - std::log(r));
        const double d = p.mean[i] - q.mean[i];
        out.mean_term += d * d / (2.0 * p.std[i] * p.std[i]);
    }
    out.value = out.variance_term + out.mean_term;
    return out;
}

// KL between the pushforwards of Q and P through the linear map A (rows x
// cols row-major, cols = weight dimension): KL(N(A mu_Q, A S A^T) || N(A mu_P,
// A Sigma A^T)), computed on the common column space via eigendecomposition.
// Eigenvalues below 1e-10 of the largest are treated as collapsed directions.
// By the data-processing inequality the result never exceeds
// kl_diag_gaussian(Q, P), with equality for invertible A.
inline double kl_pushforward_gaussian(const GaussianWeightDistribution& q,
                                      const GaussianWeightDistribution& p,
                                      const std::vector<double>& a_rowmajor, std::size_t rows) {
    q.validate();
    p.validate();
    const std::size_t k = q.mean.size();
    if (p.mean.size() != k) throw std::invalid_argument("kl_pushforward_gaussian: dim mismatch");
    if (rows == 0 || a_rowmajor.size() != rows * k)
        throw std::invalid_argument("kl_pushforward_gaussian: bad map shape");

    using Mat = Eigen::MatrixXd;
    using EVec = Eigen::VectorXd;
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> A(
        a_rowmajor.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k));

    EVec s2(k), sig2(k), dmu(k);
    for (std::size_t i = 0; i < k; ++i) {
        s2[static_cast<Eigen::Index>(i)] = q.std[i] * q.std[i];
        sig2[static_cast<Eigen::Index>(i)] = p.std[i] * p.std[i];
        dmu[static_cast<Eigen::Index>(i)] = q.mean[i] - p.mean[i];
    }
    Mat cp = A * sig2.asDiagonal() * A.transpose();
    Mat cq = A * s2.asDiagonal() * A.transpose();
    EVec dm = A * dmu;

    Eigen::SelfAdjointEigenSolver<Mat> es(cp);
    if (es.info() != Eigen::Success)
        throw std::runtime_error("kl_pushforward_gaussian: eigendecomposition failed");
    const EVec& lam = es.eigenvalues();
    const Mat& U = es.eigenvectors();
    const double lmax = lam.maxCoeff();
    if (lmax <= 0.0) {
        // A == 0: both pushforwards are the point mass at the origin.
        if (dm.norm() > 1e-12) throw std::domain_error("kl_pushforward_gaussian: supports differ");
        return 0.0;
    }
    const double cutoff = 1e-10 * lmax;

    std::vector<Eigen::Index> kept;
    const double support_tol = 1e-8 * std::max({lmax, cq.diagonal().maxCoeff(), dm.squaredNorm()});
    for (Eigen::Index i = 0; i < lam.size(); ++i) {
        if (lam[i] > cutoff) {
            kept.push_back(i);
        } else {
            // collapsed direction of P's pushforward: Q must collapse there too
            EVec u = U.col(i);
            if (u.dot(cq * u) > support_tol || (u.dot(dm)) * (u.dot(dm)) > support_tol)
                throw std::domain_error("kl_pushforward_gaussian: supports differ");
        }
    }
    const std::size_t m = kept.size();
    if (m == 0) return 0.0;

    Mat Up(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(m));
    EVec lp(static_cast<Eigen::Index>(m));
    for (std::size_t i = 0; i < m; ++i) {
        Up.col(static_cast<Eigen::Index>(i)) = U.col(kept[i]);
        lp[static_cast<Eigen::Index>(i)] = lam[kept[i]];
    }
    Mat cq_p = Up.transpose() * cq * Up;
    EVec dm_p = Up.transpose() * dm;

    Eigen::SelfAdjointEigenSolver<Mat> esq(cq_p);
    if (esq.info() != Eigen::Success)
        throw std::runtime_error("kl_pushforward_gaussian: eigendecomposition failed");
    if (esq.eigenvalues().minCoeff() <= 0.0)
        throw std::domain_error("kl_pushforward_gaussian: supports differ");

    // KL = 1/2 [ tr(Cp^-1 Cq) - m + dm^T Cp^-1 dm + ln det Cp - ln det Cq ]
    double trace_term = 0.0, quad_term = 0.0, logdet_p = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        trace_term += cq_p(ii, ii) / lp[ii];
        quad_term += dm_p[ii] * dm_p[ii] / lp[ii];
        logdet_p += std::log(lp[ii]);
    }
    double logdet_q = 0.0;
    for (Eigen::Index i = 0; i < esq.eigenvalues().size(); ++i)
        logdet_q += std::log(esq.eigenvalues()[i]);

    return 0.5 * (trace_term - static_cast<double>(m) + quad_term + logdet_p - logdet_q);
}

// Symmetrization gap for a linear model under a finite group:
// KL(Q||P) - KL(Q o S^-1 || P o S^-1) with S the average dual action map.
// Nonnegative by the data-processing inequality.
inline double symmetrization_gap_linear(const GaussianWeightDistribution& q,
                                        const GaussianWeightDistribution& p,
                                        const GroupAction& group) {
    const std::size_t k = q.mean.size();
    if (group.input_dim() != k)
        throw std::invalid_argument("symmetrization_gap_linear: group acts on wrong dimension");
    auto a = group.average_dual_matrix(group.all_elements());
    double full = kl_diag_gaussian(q, p).value;
    double pushed = kl_pushforward_gaussian(q, p, a, k);
    return full - pushed;
}

// --- Discrete pushforward KL ------------------------------------------------------

struct DiscretePushforwardResult {
    double kl_before = 0.0;
    double kl_after = 0.0;
    double gap = 0.0;  // sum_x mu(x) log( m(x) / m_psi(psi(x)) )
};

// Exact KLs by finite summation (nats). psi maps atom index -> image atom id.
// Requires mu absolutely continuous w.r.t. nu.
inline DiscretePushforwardResult kl_pushforward_discrete(const std::vector<double>& mu,
                                                         const std::vector<double>& nu,
                                                         const std::vector<std::size_t>& psi) {
    if (mu.size() != nu.size() || mu.size() != psi.size() || mu.empty())
        throw std::invalid_argument("kl_pushforward_discrete: size mismatch");
    double smu = 0.0, snu = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        if (mu[i] < 0.0 || nu[i] < 0.0)
            throw std::invalid_argument("kl_pushforward_discrete: negative mass");
        if (mu[i] > 0.0 && nu[i] == 0.0)
            throw std::domain_error("kl_pushforward_discrete: mu not absolutely continuous wrt nu");
        smu += mu[i];
        snu += nu[i];
    }
    if (std::abs(smu - 1.0) > 1e-9 || std::abs(snu - 1.0) > 1e-9)
        throw std::invalid_argument("kl_pushforward_discrete: inputs must be distributions");

    std::map<std::size_t, double> mu_push, nu_push;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        mu_push[psi[i]] += mu[i];
        nu_push[psi[i]] += nu[i];
    }

    DiscretePushforwardResult r;
    for (std::size_t i = 0; i < mu.size(); ++i)
        if (mu[i] > 0.0) r.kl_before += mu[i] * std::log(mu[i] / nu[i]);
    for (const auto& [y, m] : mu_push)
        if (m > 0.0) r.kl_after += m * std::log(m / nu_push[y]);
    for (std::size_t i = 0; i < mu.size(); ++i) {
        if (mu[i] > 0.0) {
            double density = mu[i] / nu[i];
            double density_push = mu_push[psi[i]] / nu_push[psi[i]];
            r.gap += mu[i] * std::log(density / density_push);
        }
    }
    return r;
}

// --- Boolean-function KL ------------------------------------------------------------

struct BooleanKlResult {
    double kl_bits = 0.0;      // |D|: number of distinct input vectors
    double kl_inv_bits = 0.0;  // |D|_inv: number of distinct 1-counts
    double gap_bits = 0.0;
};

struct InconsistentDatasetError : std::domain_error {
    bool invariant_class;
    explicit InconsistentDatasetError(bool invariant)
        : std::domain_error(invariant
                                ? "dataset inconsistent for the invariant function class"
                                : "dataset inconsistent for the raw function class"),
          invariant_class(invariant) {}
};

// KL (in bits) between the uniform posterior over consistent k-ary Boolean
// functions and the uniform prior, for the raw class and the
// permutation-invariant class (functions of the 1-count).
inline BooleanKlResult boolean_kl(const std::vector<std::pair<std::vector<int>, int>>& data,
                                  std::size_t k) {
    std::map<std::vector<int>, int> seen;
    std::map<int, int> seen_counts;
    bool invariant_consistent = true;
    for (const auto& [x, y] : data) {
        if (x.size() != k) throw std::invalid_argument("boolean_kl: input arity mismatch");
        for (int b : x)
            if (b != 0 && b != 1) throw std::invalid_argument("boolean_kl: inputs must be binary");
        if (y != 0 && y != 1) throw std::invalid_argument("boolean_kl: labels must be binary");
        auto [it, inserted] = seen.emplace(x, y);
        if (!inserted && it->second != y) throw InconsistentDatasetError(false);
        int ones = 0;
        for (int b : x) ones += b;
        auto [ci, cinserted] = seen_counts.emplace(ones, y);
        if (!cinserted && ci->second != y) invariant_consistent = false;
    }
    if (!invariant_consistent) throw InconsistentDatasetError(true);
    BooleanKlResult r;
    r.kl_bits = static_cast<double>(seen.size());
    r.kl_inv_bits = static_cast<double>(seen_counts.size());
    r.gap_bits = r.kl_bits - r.kl_inv_bits;
    return r;
}

// --- Bound reports -------------------------------------------------------------------

struct BoundReport {
    std::string mode;  // baseline | da | da_mc | fa
    std::size_t n = 0;
    double delta = 0.0;
    double beta_used = 0.0;
    double empirical_risk_q = 0.0;
    double risk_stderr = 0.0;
    int risk_draws = 0;
    double kl_value = 0.0;  // nats
    double kl_variance_term = 0.0;
    double kl_mean_term = 0.0;
    double union_bound_penalty = 0.0;  // nats, added to the KL slot in the bound
    double bound_value = 0.0;

    nlohmann::json to_json() const {
        return {
            {"mode", mode},
            {"n", n},
            {"delta", delta},
            {"beta", beta_used},
            {"risk", {{"value", empirical_risk_q}, {"stderr", risk_stderr}, {"draws", risk_draws}}},
            {"kl",
             {{"value", kl_value},
              {"unit", "nats"},
              {"variance_term", kl_variance_term},
              {"mean_term", kl_mean_term},
              {"union_bound_penalty", union_bound_penalty}}},
            {"bound", bound_value},
        };
    }
};

enum class RiskRoute { plain, augmented_exact, augmented_mc, fa_linear };

// E_{f ~ Q}[0-1 risk] via weight draws. The fa_linear route projects every
// draw onto the invariant weight subspace, which realizes sampling from the
// symmetrized posterior Q° for linear models.
struct QRiskEstimate {
    double value = 0.0;
    double stderr_value = 0.0;
    int draws = 0;
};

inline QRiskEstimate q_zero_one_risk(const ModelSpec& spec, const GaussianWeightDistribution& q,
                                     const LabeledDataset& data, RiskRoute route,
                                     const GroupAction* group, int aug_m, int draws,
                                     SplitRng& rng,
                                     const std::vector<ElementId>* fixed_set = nullptr) {
    if (data.size() == 0) throw std::domain_error("q_zero_one_risk: empty dataset");
    if (draws < 1) throw std::invalid_argument("q_zero_one_risk: draws >= 1");
    LossFn loss = zero_one_loss();
    std::vector<double> per_draw;
    per_draw.reserve(static_cast<std::size_t>(draws));
    for (int t = 0; t < draws; ++t) {
        ParamVector w = q.sample(rng);
        if (route == RiskRoute::fa_linear) {
            if (!group) throw std::invalid_argument("fa_linear risk route requires a group");
            w = symmetrize_linear_weights(spec, w, *group);
        }
        auto f = [&](const Vec& x) { return forward(spec, w, x); };
        switch (route) {
            case RiskRoute::plain:
            case RiskRoute::fa_linear:
                per_draw.push_back(empirical_risk(f, data, loss).value);
                break;
            case RiskRoute::augmented_exact:
                if (!group) throw std::invalid_argument("augmented risk route requires a group");
                per_draw.push_back(augmented_risk(f, data, loss, *group).value);
                break;
            case RiskRoute::augmented_mc: {
                if (!group) throw std::invalid_argument("augmented risk route requires a group");
                per_draw.push_back(
                    augmented_risk_mc(f, data, loss, *group, aug_m, rng, fixed_set).value);
                break;
            }
        }
    }
    QRiskEstimate est;
    est.value = stats::mean(per_draw);
    est.stderr_value = per_draw.size() > 1 ? stats::stderr_of_mean(per_draw) : 0.0;
    est.draws = draws;
    return est;
}

struct DaEstimator {
    bool exact = true;
    int m = 1;  // transforms per example for the Monte Carlo variant
    std::vector<ElementId> fixed_set;  // optional pinned transform set

    static DaEstimator exact_average() { return {true, 0, {}}; }
    static DaEstimator monte_carlo(int m) { return {false, m, {}}; }
    static DaEstimator monte_carlo_fixed(std::vector<ElementId> set) {
        return {false, static_cast<int>(set.size()), std::move(set)};
    }
};

// PAC-Bayes bound with the augmented (or Monte Carlo augmented) empirical
// risk substituted for the plain risk. The KL term is unchanged from the
// baseline bound: data augmentation does not symmetrize the posterior.
inline BoundReport bound_da(const ModelSpec& spec, const GaussianWeightDistribution& q,
                            const GaussianWeightDistribution& p, const LabeledDataset& data,
                            const GroupAction& group, const BoundInputs& inputs,
                            const DaEstimator& estimator, SplitRng& rng) {
    inputs.validate();
    QRiskEstimate risk =
        q_zero_one_risk(spec, q, data, estimator.exact ? RiskRoute::augmented_exact
                                                       : RiskRoute::augmented_mc,
                        &group, estimator.m, inputs.mc_samples_for_Q_risk, rng,
                        estimator.fixed_set.empty() ? nullptr : &estimator.fixed_set);
    KlDecomposition kl = kl_diag_gaussian(q, p);
    CatoniResult c = catoni_bound(risk.value, kl.value, inputs);
    BoundReport rep;
    rep.mode = estimator.exact ? "da" : "da_mc";
    rep.n = inputs.n;
    rep.delta = inputs.delta;
    rep.beta_used = c.beta_used;
    rep.empirical_risk_q = risk.value;
    rep.risk_stderr = risk.stderr_value;
    rep.risk_draws = risk.draws;
    rep.kl_value = kl.value;
    rep.kl_variance_term = kl.variance_term;
    rep.kl_mean_term = kl.mean_term;
    rep.bound_value = c.bound;
    return rep;
}

inline BoundReport bound_baseline(const ModelSpec& spec, const GaussianWeightDistribution& q,
                                  const GaussianWeightDistribution& p, const LabeledDataset& data,
                                  const BoundInputs& inputs, SplitRng& rng) {
    inputs.validate();
    QRiskEstimate risk = q_zero_one_risk(spec, q, data, RiskRoute::plain, nullptr, 0,
                                         inputs.mc_samples_for_Q_risk, rng);
    KlDecomposition kl = kl_diag_gaussian(q, p);
    CatoniResult c = catoni_bound(risk.value, kl.value, inputs);
    BoundReport rep;
    rep.mode = "baseline";
    rep.n = inputs.n;
    rep.delta = inputs.delta;
    rep.beta_used = c.beta_used;
    rep.empirical_risk_q = risk.value;
    rep.risk_stderr = risk.stderr_value;
    rep.risk_draws = risk.draws;
    rep.kl_value = kl.value;
    rep.kl_variance_term = kl.variance_term;
    rep.kl_mean_term = kl.mean_term;
    rep.bound_value = c.bound;
    return rep;
}

// Feature-averaging bound for linear models: risk of the symmetrized
// posterior Q°, KL of the pushforwards through the averaging map.
inline BoundReport bound_fa_linear(const ModelSpec& spec, const GaussianWeightDistribution& q,
                                   const GaussianWeightDistribution& p, const LabeledDataset& data,
                                   const GroupAction& group, const BoundInputs& inputs,
                                   SplitRng& rng) {
    inputs.validate();
    if (!spec.is_linear()) throw std::domain_error("bound_fa_linear: model is not linear");
    QRiskEstimate risk = q_zero_one_risk(spec, q, data, RiskRoute::fa_linear, &group, 0,
                                         inputs.mc_samples_for_Q_risk, rng);
    auto a = group.average_dual_matrix(group.all_elements());
    double kl_push = kl_pushforward_gaussian(q, p, a, group.input_dim());
    KlDecomposition kl_full = kl_diag_gaussian(q, p);
    CatoniResult c = catoni_bound(risk.value, kl_push, inputs);
    BoundReport rep;
    rep.mode = "fa";
    rep.n = inputs.n;
    rep.delta = inputs.delta;
    rep.beta_used = c.beta_used;
    rep.empirical_risk_q = risk.value;
    rep.risk_stderr = risk.stderr_value;
    rep.risk_draws = risk.draws;
    rep.kl_value = kl_push;
    rep.kl_variance_term = kl_full.variance_term;  // decomposition of the full KL, for reference
    rep.kl_mean_term = kl_full.mean_term;
    rep.bound_value = c.bound;
    return rep;
}

// --- Surrogate bound optimization ---------------------------------------------------

struct StochasticBoundOptions {
    int steps = 2000;
    double lr = 0.01;
    std::size_t batch_size = 32;
    double beta_surrogate = 1.0;
    int sigma_select_every = 50;
    std::string mode_tag = "baseline";
};

// The prior-std grid sigma_j = 0.1 * 2^{-j/2}, j = 0..17. Selecting the prior
// from this fixed grid costs a union-bound penalty of log(grid size) added to
// the KL slot of the bound.
inline std::vector<double> prior_sigma_grid() {
    std::vector<double> g;
    for (int j = 0; j < 18; ++j) g.push_back(0.1 * std::pow(2.0, -0.5 * j));
    return g;
}

// Direct optimization of a differentiable surrogate of the Catoni bound
// (cross-entropy in place of 0-1 loss, one reparameterized weight draw per
// step). Q starts at the trained weights with std 0.05|w| + 1e-3; the prior
// is the supplied center with std selected from the fixed geometric grid.
// The returned report evaluates the true 0-1 Catoni bound.
inline BoundReport optimize_stochastic_bound(const ModelSpec& spec,
                                             const ParamVector& trained_params,
                                             const LabeledDataset& data,
                                             const BoundInputs& inputs,
                                             const ParamVector& prior_center, SplitRng& rng,
                                             const StochasticBoundOptions& opts = {}) {
    inputs.validate();
    spec.validate();
    auto lay = ParamLayout::of(spec);
    if (trained_params.size() != lay.total || prior_center.size() != lay.total)
        throw std::invalid_argument("optimize_stochastic_bound: parameter size mismatch");
    if (data.size() == 0) throw std::domain_error("optimize_stochastic_bound: empty dataset");

    const std::size_t k = lay.total;
    const double n = static_cast<double>(inputs.n);
    if (spec.output_dim < 2)
        throw std::invalid_argument(
            "optimize_stochastic_bound requires a multi-class logits head for the "
            "cross-entropy surrogate");
    LossFn surrogate = cross_entropy_loss();

    Vec mu = trained_params.values;
    Vec omega(k);  // log posterior std
    for (std::size_t i = 0; i < k; ++i) omega[i] = std::log(0.05 * std::abs(mu[i]) + 1e-3);

    const auto sigmas = prior_sigma_grid();
    const double union_penalty = std::log(static_cast<double>(sigmas.size()));

    auto kl_for_sigma = [&](double sigma) {
        double kl = 0.0;
        const double sig2 = sigma * sigma;
        for (std::size_t i = 0; i < k; ++i) {
            double s2 = std::exp(2.0 * omega[i]);
            double d = mu[i] - prior_center.values[i];
            kl += 0.5 * (s2 / sig2 - 1.0 + std::log(sig2 / s2)) + d * d / (2.0 * sig2);
        }
        return kl;
    };
    auto select_sigma = [&]() {
        double best_sigma = sigmas[0];
        double best_kl = kl_for_sigma(sigmas[0]);
        for (double s : sigmas) {
            double v = kl_for_sigma(s);
            if (v < best_kl) {
                best_kl = v;
                best_sigma = s;
            }
        }
        return best_sigma;
    };

    double sigma = select_sigma();
    const double beta = opts.beta_surrogate;
    FaContext fa_ctx;
    SplitRng fa_rng = rng.fork(0xFA);
    fa_ctx.rng = &fa_rng;
    const bool needs_ctx =
        spec.averaging_index().has_value() &&
        spec.layers[*spec.averaging_index()].mode.kind == SymmetrizationMode::Kind::monte_carlo;

    ParamVector w;
    w.values.assign(k, 0.0);
    Vec eps(k);
    for (int step = 0; step < opts.steps; ++step) {
        if (opts.sigma_select_every > 0 && step % opts.sigma_select_every == 0)
            sigma = select_sigma();

        std::vector<BatchItem> batch;
        const std::size_t bs = std::min(opts.batch_size, data.size());
        for (std::size_t b = 0; b < bs; ++b) {
            std::size_t idx = rng.below(data.size());
            batch.push_back({&data.input(idx), data.label(idx)});
        }
        for (std::size_t i = 0; i < k; ++i) {
            eps[i] = rng.normal();
            w.values[i] = mu[i] + std::exp(omega[i]) * eps[i];
        }
        ParamVector gw = gradient(spec, w, surrogate, batch, needs_ctx ? &fa_ctx : nullptr);

        const double sig2 = sigma * sigma;
        bool finite = true;
        for (std::size_t i = 0; i < k; ++i) {
            double s = std::exp(omega[i]);
            double gmu = beta * gw.values[i] + (mu[i] - prior_center.values[i]) / (sig2 * n);
            double gom = beta * gw.values[i] * eps[i] * s + (s * s / sig2 - 1.0) / n;
            mu[i] -= opts.lr * gmu;
            omega[i] -= opts.lr * gom;
            finite = finite && std::isfinite(mu[i]) && std::isfinite(omega[i]);
        }
        if (!finite)
            throw std::runtime_error("optimize_stochastic_bound: diverged at step " +
                                     std::to_string(step));
    }
    sigma = select_sigma();

    GaussianWeightDistribution q;
    q.mean.values = mu;
    q.std.resize(k);
    for (std::size_t i = 0; i < k; ++i) q.std[i] = std::exp(omega[i]);
    GaussianWeightDistribution p = GaussianWeightDistribution::isotropic(prior_center, sigma);

    KlDecomposition kl = kl_diag_gaussian(q, p);
    SplitRng risk_rng = rng.fork(0x815c);
    QRiskEstimate risk = q_zero_one_risk(spec, q, data, RiskRoute::plain, nullptr, 0,
                                         inputs.mc_samples_for_Q_risk, risk_rng);
    CatoniResult c = catoni_bound(risk.value, kl.value + union_penalty, inputs);

    BoundReport rep;
    rep.mode = opts.mode_tag;
    rep.n = inputs.n;
    rep.delta = inputs.delta;
    rep.beta_used = c.beta_used;
    rep.empirical_risk_q = risk.value;
    rep.risk_stderr = risk.stderr_value;
    rep.risk_draws = risk.draws;
    rep.kl_value = kl.value;
    rep.kl_variance_term = kl.variance_term;
    rep.kl_mean_term = kl.mean_term;
    rep.union_bound_penalty = union_penalty;
    rep.bound_value = c.bound;
    return rep;
}

// --- Exploratory Laplace-transform estimator ------------------------------------------

struct LaplaceEstimate {
    double value = 0.0;
    double stderr_value = 0.0;
    int draws = 0;
};

// Monte Carlo estimate of E_{f~P}[ (E_Phi[e^{-C lbar_f(Phi)}] /
// E_{Bern(R(f))}[e^{-C Z}])^n ] using orbit-averaged 0-1 losses on held-out
// data, with R(f) the empirical mean of the orbit-averaged losses. This is
// the quantity suggesting a tighter DA bound; the estimate is data-dependent
// and is reported as exploratory, not as a certified bound.
inline LaplaceEstimate laplace_transform_estimate(const ModelSpec& spec,
                                                  const GaussianWeightDistribution& p,
                                                  const LabeledDataset& data,
                                                  const GroupAction& group, double c_param,
                                                  int n_weight_samples, SplitRng& rng) {
    if (!(c_param >= 0.0)) throw std::invalid_argument("laplace estimate: C must be >= 0");
    if (data.size() == 0) throw std::domain_error("laplace estimate: empty dataset");
    if (n_weight_samples < 1) throw std::invalid_argument("laplace estimate: need >= 1 draw");
    LossFn loss = zero_one_loss();
    const double n = static_cast<double>(data.size());

    std::vector<double> ratios;
    ratios.reserve(static_cast<std::size_t>(n_weight_samples));
    for (int t = 0; t < n_weight_samples; ++t) {
        ParamVector w = p.sample(rng);
        auto f = [&](const Vec& x) { return forward(spec, w, x); };
        double num = 0.0, rbar = 0.0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            double lbar = 0.0;
            for (ElementId g = 0; g < group.size(); ++g)
                lbar += loss(f(group.act(g, data.input(i))), data.label(i));
            lbar /= static_cast<double>(group.size());
            num += std::exp(-c_param * lbar);
            rbar += lbar;
        }
        num /= n;
        rbar /= n;
        double denom = 1.0 - rbar + rbar * std::exp(-c_param);
        ratios.push_back(std::exp(n * (std::log(num) - std::log(denom))));
    }
    LaplaceEstimate est;
    est.value = stats::mean(ratios);
    est.stderr_value = ratios.size() > 1 ? stats::stderr_of_mean(ratios) : 0.0;
    est.draws = n_weight_samples;
    return est;
}

} // namespace invlab
