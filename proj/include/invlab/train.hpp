#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "invlab/dataset.hpp"
#include "invlab/grad.hpp"
#include "invlab/group.hpp"
#include "invlab/loss.hpp"
#include "invlab/model.hpp"
#include "invlab/rng.hpp"
#include "invlab/stats.hpp"
#include "invlab/symmetrize.hpp"

namespace invlab {

enum class TrainMode { baseline, da, fa };

inline std::string train_mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::baseline: return "baseline";
        case TrainMode::da: return "da";
        case TrainMode::fa: return "fa";
    }
    return "?";
}

struct LrSchedule {
    enum class Kind { constant, robbins_monro };
    Kind kind = Kind::constant;
    double eta0 = 0.05;

    static LrSchedule constant(double eta) { return {Kind::constant, eta}; }
    static LrSchedule robbins_monro(double eta0) { return {Kind::robbins_monro, eta0}; }

    // eta_t = eta0 / (1 + t / T0) with T0 = one epoch's step count, which
    // satisfies the Robbins-Monro conditions.
    double at(std::size_t global_step, std::size_t steps_per_epoch) const {
        if (kind == Kind::constant) return eta0;
        double t0 = std::max<std::size_t>(1, steps_per_epoch);
        return eta0 / (1.0 + static_cast<double>(global_step) / static_cast<double>(t0));
    }
};

struct TrainConfig {
    TrainMode mode = TrainMode::baseline;
    int da_m = 1;              // transforms per example in da mode
    bool da_exhaustive = false;  // expand each example by the whole group instead of sampling
    SymmetrizationMode fa_mode = SymmetrizationMode::exact();  // averaging mode in fa mode
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    LrSchedule lr = LrSchedule::constant(0.05);
    LossFn loss = squared_loss();
    std::uint64_t seed = 0;

    // telemetry flags
    bool log_gradient_variance = false;
    bool log_orbit_variance = false;
    bool log_fa_eval = false;
    bool record_epoch_params = false;  // keep a parameter snapshot per epoch (tests)

    std::size_t probe_batches = 16;      // minibatches per gradient-variance probe
    std::size_t orbit_probe_points = 50; // inputs per orbit-variance measurement

    void validate() const {
        if (epochs > 100000) throw std::invalid_argument("epochs implausibly large");
        if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
        if (lr.eta0 <= 0.0) throw std::invalid_argument("learning rate must be positive");
        if (mode == TrainMode::da && da_m < 1) throw std::invalid_argument("da.m must be >= 1");
    }
};

// Per-epoch record. Semantics per mode:
//   baseline  train/test_loss = plain risk; *_fa_eval = risk of the exactly
//             output-symmetrized predictor (test-time feature averaging).
//   da        train_loss = the Monte Carlo augmented risk actually optimized,
//             recomputable from eval_seed; test_loss = plain risk;
//             *_fa_eval as for baseline.
//   fa        train/test_loss = risk of the model as configured (Monte Carlo
//             averaging re-drawn from eval_seed); *_fa_eval = the
//             single-sample evaluation with the averaging layer bypassed, so
//             fa_eval minus train_loss tracks dependence on averaging.
// Orbit-variance fields use the deterministic deployed predictor (plain
// forward for baseline/da, exact averaging for fa). Unused fields are NaN.
struct EpochRecord {
    double train_loss = std::numeric_limits<double>::quiet_NaN();
    double test_loss = std::numeric_limits<double>::quiet_NaN();
    double train_loss_fa_eval = std::numeric_limits<double>::quiet_NaN();
    double test_loss_fa_eval = std::numeric_limits<double>::quiet_NaN();
    double gradient_variance = std::numeric_limits<double>::quiet_NaN();
    double mean_orbit_variance_in_dist = std::numeric_limits<double>::quiet_NaN();
    double mean_orbit_variance_ood = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t eval_seed = 0;
};

struct TrainTelemetry {
    std::vector<EpochRecord> epochs;
};

struct TrainResult {
    ParamVector params;
    TrainTelemetry telemetry;
    std::vector<ParamVector> epoch_params;  // filled when record_epoch_params
};

namespace detail_train {

inline void check_compat(const ModelSpec& spec, const TrainConfig& cfg, const GroupPtr& group) {
    spec.validate();
    cfg.validate();
    const bool has_avg = spec.averaging_index().has_value();
    if (cfg.mode == TrainMode::fa && !has_avg)
        throw std::invalid_argument("fa mode requires a model with an averaging layer");
    if (cfg.mode != TrainMode::fa && has_avg)
        throw std::invalid_argument("baseline/da modes require a model without averaging layer");
    if (cfg.mode != TrainMode::baseline && !group)
        throw std::invalid_argument("da/fa modes require a group");
    if (!cfg.loss.differentiable())
        throw std::invalid_argument("training requires a differentiable loss");
}

// Spec actually trained: in fa mode the configured averaging mode overrides
// whatever mode the averaging layer was declared with.
inline ModelSpec effective_spec(const ModelSpec& spec, const TrainConfig& cfg) {
    ModelSpec s = spec;
    if (cfg.mode == TrainMode::fa) s.layers[*s.averaging_index()].mode = cfg.fa_mode;
    return s;
}

inline double plain_risk(const ModelSpec& spec, const ParamVector& p, const LossFn& loss,
                         const LabeledDataset& ds) {
    auto f = [&](const Vec& x) { return forward_plain(spec, p, x); };
    return empirical_risk(f, ds, loss).value;
}

inline double symmetrized_output_risk(const ModelSpec& spec, const ParamVector& p,
                                      const LossFn& loss, const LabeledDataset& ds,
                                      const GroupAction& group) {
    auto base = [&](const Vec& x) { return forward_plain(spec, p, x); };
    auto f = [&](const Vec& x) { return symmetrize_exact(base, x, group); };
    return empirical_risk(f, ds, loss).value;
}

inline ModelSpec with_exact_averaging(const ModelSpec& spec) {
    ModelSpec s = spec;
    s.layers[*s.averaging_index()].mode = SymmetrizationMode::exact();
    return s;
}

} // namespace detail_train

inline double gradient_variance_probe(const ModelSpec& spec_in, const ParamVector& params,
                                      const TrainConfig& cfg, const GroupPtr& group,
                                      const LabeledDataset& data, std::size_t n_batches,
                                      SplitRng& rng);

// SGD in three modes. Deterministic given (config, seed): all randomness is
// forked from the config seed, and batches reduce in fixed index order.
// In da mode every minibatch example is replaced by da_m sampled transforms
// that stay inside the same minibatch, so each step is an unbiased estimate
// of the augmented risk. In fa mode the forward/backward pass runs through
// the averaging layer; with a fixed-resample Monte Carlo mode the element set
// is redrawn once per epoch.
inline TrainResult train(const ModelSpec& spec_in, const TrainConfig& cfg, const GroupPtr& group,
                         const LabeledDataset& train_set, const LabeledDataset& test_set,
                         const LabeledDataset* ood_set = nullptr) {
    detail_train::check_compat(spec_in, cfg, group);
    if (train_set.size() == 0) throw std::domain_error("train: empty training set");
    ModelSpec spec = detail_train::effective_spec(spec_in, cfg);

    SplitRng root(cfg.seed);
    SplitRng init_rng = root.fork(0);
    SplitRng order_rng = root.fork(1);
    SplitRng aug_rng = root.fork(2);
    SplitRng fa_rng = root.fork(3);

    TrainResult result;
    result.params = init_params(spec, init_rng);

    const std::size_t n = train_set.size();
    const std::size_t bs = std::min(cfg.batch_size, n);
    const std::size_t steps_per_epoch = (n + bs - 1) / bs;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order);

        // one fixed Monte Carlo element draw per epoch, when configured
        std::vector<ElementId> epoch_set;
        FaContext fa_ctx;
        if (cfg.mode == TrainMode::fa &&
            spec.layers[*spec.averaging_index()].mode.kind == SymmetrizationMode::Kind::monte_carlo) {
            const auto& m = spec.layers[*spec.averaging_index()].mode;
            if (m.resample == SymmetrizationMode::Resample::fixed && m.fixed_set.empty()) {
                epoch_set.resize(static_cast<std::size_t>(m.k));
                for (auto& g : epoch_set) g = group->sample_uniform(fa_rng);
                fa_ctx.fixed_set = &epoch_set;
            }
        }
        fa_ctx.rng = &fa_rng;

        for (std::size_t start = 0; start < n; start += bs, ++global_step) {
            const std::size_t stop = std::min(n, start + bs);
            std::vector<BatchItem> batch;
            std::vector<Vec> scratch;  // owns transformed inputs in da mode
            if (cfg.mode == TrainMode::da) {
                const std::size_t copies =
                    cfg.da_exhaustive ? group->size() : static_cast<std::size_t>(cfg.da_m);
                scratch.reserve((stop - start) * copies);
                for (std::size_t idx = start; idx < stop; ++idx) {
                    const Vec& x = train_set.input(order[idx]);
                    if (cfg.da_exhaustive) {
                        for (ElementId g = 0; g < group->size(); ++g) {
                            scratch.push_back(group->act(g, x));
                            batch.push_back({&scratch.back(), train_set.label(order[idx])});
                        }
                    } else {
                        for (int j = 0; j < cfg.da_m; ++j) {
                            ElementId g = group->sample_uniform(aug_rng);
                            scratch.push_back(group->act(g, x));
                            batch.push_back({&scratch.back(), train_set.label(order[idx])});
                        }
                    }
                }
            } else {
                for (std::size_t idx = start; idx < stop; ++idx)
                    batch.push_back({&train_set.input(order[idx]), train_set.label(order[idx])});
            }
            ParamVector g = gradient(spec, result.params, cfg.loss, batch,
                                     cfg.mode == TrainMode::fa ? &fa_ctx : nullptr);
            const double eta = cfg.lr.at(global_step, steps_per_epoch);
            for (std::size_t i = 0; i < result.params.size(); ++i)
                result.params.values[i] -= eta * g.values[i];
            if (!std::isfinite(result.params.values[0]))
                throw std::runtime_error("training diverged (non-finite parameters)");
        }

        // --- end-of-epoch telemetry ---
        EpochRecord rec;
        rec.eval_seed = SplitRng(cfg.seed).fork(100 + epoch).seed();
        SplitRng eval_rng(rec.eval_seed);
        const ParamVector& p = result.params;

        switch (cfg.mode) {
            case TrainMode::baseline: {
                rec.train_loss = detail_train::plain_risk(spec, p, cfg.loss, train_set);
                if (test_set.size() > 0)
                    rec.test_loss = detail_train::plain_risk(spec, p, cfg.loss, test_set);
                break;
            }
            case TrainMode::da: {
                auto f = [&](const Vec& x) { return forward_plain(spec, p, x); };
                rec.train_loss =
                    cfg.da_exhaustive
                        ? augmented_risk(f, train_set, cfg.loss, *group).value
                        : augmented_risk_mc(f, train_set, cfg.loss, *group, cfg.da_m, eval_rng)
                              .value;
                if (test_set.size() > 0)
                    rec.test_loss = detail_train::plain_risk(spec, p, cfg.loss, test_set);
                break;
            }
            case TrainMode::fa: {
                FaContext eval_ctx;
                eval_ctx.rng = &eval_rng;
                auto f = [&](const Vec& x) { return forward(spec, p, x, &eval_ctx); };
                rec.train_loss = empirical_risk(f, train_set, cfg.loss).value;
                if (test_set.size() > 0) rec.test_loss = empirical_risk(f, test_set, cfg.loss).value;
                break;
            }
        }

        if (cfg.log_fa_eval && group) {
            if (cfg.mode == TrainMode::fa) {
                rec.train_loss_fa_eval = detail_train::plain_risk(spec, p, cfg.loss, train_set);
                if (test_set.size() > 0)
                    rec.test_loss_fa_eval = detail_train::plain_risk(spec, p, cfg.loss, test_set);
            } else {
                rec.train_loss_fa_eval =
                    detail_train::symmetrized_output_risk(spec, p, cfg.loss, train_set, *group);
                if (test_set.size() > 0)
                    rec.test_loss_fa_eval =
                        detail_train::symmetrized_output_risk(spec, p, cfg.loss, test_set, *group);
            }
        }

        if (cfg.log_orbit_variance && group) {
            ModelSpec dspec = cfg.mode == TrainMode::fa ? detail_train::with_exact_averaging(spec)
                                                        : spec;
            auto deployed = [&](const Vec& x) {
                return cfg.mode == TrainMode::fa ? forward(dspec, p, x) : forward_plain(dspec, p, x);
            };
            auto probe_mean = [&](const LabeledDataset& ds) {
                std::size_t m = std::min(cfg.orbit_probe_points, ds.size());
                if (m == 0) return std::numeric_limits<double>::quiet_NaN();
                double s = 0.0;
                for (std::size_t i = 0; i < m; ++i)
                    s += orbit_prediction_variance(deployed, ds.input(i), *group);
                return s / static_cast<double>(m);
            };
            rec.mean_orbit_variance_in_dist =
                probe_mean(test_set.size() > 0 ? test_set : train_set);
            if (ood_set && ood_set->size() > 0) rec.mean_orbit_variance_ood = probe_mean(*ood_set);
        }

        if (cfg.log_gradient_variance) {
            SplitRng probe_rng = SplitRng(cfg.seed).fork(5000 + epoch);
            rec.gradient_variance = gradient_variance_probe(spec_in, p, cfg, group, train_set,
                                                            cfg.probe_batches, probe_rng);
        }

        result.telemetry.epochs.push_back(rec);
        if (cfg.record_epoch_params) result.epoch_params.push_back(result.params);
    }
    return result;
}

// Mean over parameter coordinates of the across-minibatch variance of the
// stochastic gradient at fixed params. Each probe batch is a fresh
// without-replacement draw (shuffle, take batch_size, canonical index order),
// so batch_size == n with no augmentation sampling gives exactly zero.
inline double gradient_variance_probe(const ModelSpec& spec_in, const ParamVector& params,
                                      const TrainConfig& cfg, const GroupPtr& group,
                                      const LabeledDataset& data, std::size_t n_batches,
                                      SplitRng& rng) {
    detail_train::check_compat(spec_in, cfg, group);
    if (n_batches < 2) throw std::invalid_argument("gradient_variance_probe: n_batches >= 2");
    if (data.size() < cfg.batch_size)
        throw std::domain_error("gradient_variance_probe: dataset smaller than one batch");
    ModelSpec spec = detail_train::effective_spec(spec_in, cfg);

    const std::size_t bs = cfg.batch_size;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::vector<Vec> grads;
    grads.reserve(n_batches);
    for (std::size_t t = 0; t < n_batches; ++t) {
        rng.shuffle(order);
        std::vector<std::size_t> pick(order.begin(), order.begin() + static_cast<long>(bs));
        std::sort(pick.begin(), pick.end());

        std::vector<BatchItem> batch;
        std::vector<Vec> scratch;
        FaContext fa_ctx;
        fa_ctx.rng = &rng;
        if (cfg.mode == TrainMode::da) {
            const std::size_t copies =
                cfg.da_exhaustive ? group->size() : static_cast<std::size_t>(cfg.da_m);
            scratch.reserve(bs * copies);
            for (std::size_t idx : pick) {
                if (cfg.da_exhaustive) {
                    for (ElementId g = 0; g < group->size(); ++g) {
                        scratch.push_back(group->act(g, data.input(idx)));
                        batch.push_back({&scratch.back(), data.label(idx)});
                    }
                } else {
                    for (int j = 0; j < cfg.da_m; ++j) {
                        ElementId g = group->sample_uniform(rng);
                        scratch.push_back(group->act(g, data.input(idx)));
                        batch.push_back({&scratch.back(), data.label(idx)});
                    }
                }
            }
        } else {
            for (std::size_t idx : pick) batch.push_back({&data.input(idx), data.label(idx)});
        }
        grads.push_back(gradient(spec, params, cfg.loss, batch,
                                 cfg.mode == TrainMode::fa ? &fa_ctx : nullptr)
                            .values);
    }

    // shifted two-pass variance: identical gradients give exactly zero
    const std::size_t dim = grads[0].size();
    double total = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
        const double ref = grads[0][j];
        double shift_sum = 0.0;
        for (const auto& g : grads) shift_sum += g[j] - ref;
        const double m = ref + shift_sum / static_cast<double>(n_batches);
        double s = 0.0;
        for (const auto& g : grads) s += (g[j] - m) * (g[j] - m);
        total += s / static_cast<double>(n_batches - 1);
    }
    return total / static_cast<double>(dim);
}

// DA training on one domain with per-epoch orbit-variance telemetry on
// held-out in-distribution data and on a second, out-of-distribution domain
// sharing the same group.
inline TrainResult invariance_failure_study(const ModelSpec& spec, const TrainConfig& cfg_in,
                                            const GroupPtr& group,
                                            const LabeledDataset& train_domain,
                                            const LabeledDataset& heldout_in_dist,
                                            const LabeledDataset& ood_domain) {
    if (train_domain.dim() != ood_domain.dim())
        throw std::invalid_argument("invariance_failure_study: domains disagree on input_dim");
    if (train_domain.meta().group_name != ood_domain.meta().group_name)
        throw std::invalid_argument("invariance_failure_study: group mismatch between domains");
    TrainConfig cfg = cfg_in;
    cfg.log_orbit_variance = true;
    return train(spec, cfg, group, train_domain, heldout_in_dist, &ood_domain);
}

} // namespace invlab
