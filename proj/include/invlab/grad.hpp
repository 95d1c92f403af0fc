#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "invlab/loss.hpp"
#include "invlab/model.hpp"
#include "invlab/vecmath.hpp"

namespace invlab {

struct BatchItem {
    const Vec* x = nullptr;
    double y = 0.0;
};

namespace detail_grad {

struct SegmentCache {
    std::vector<Vec> inputs;  // input to each layer of the segment, in order
    Vec output;
};

inline SegmentCache run_cached(const ModelSpec& spec, const ParamLayout& lay,
                               const ParamVector& p, Vec v, std::size_t from, std::size_t to) {
    SegmentCache c;
    std::size_t dense_idx = 0;
    while (dense_idx < lay.dense.size() && lay.dense[dense_idx].layer_index < from) ++dense_idx;
    for (std::size_t i = from; i < to; ++i) {
        const auto& l = spec.layers[i];
        c.inputs.push_back(v);
        if (l.kind == Layer::Kind::dense) {
            Vec out;
            detail_model::apply_dense(lay.dense[dense_idx], p.values, v, out);
            v = std::move(out);
            ++dense_idx;
        } else if (l.kind == Layer::Kind::activation) {
            detail_model::apply_activation(l.act, v);
        }  // average inside a segment never happens: segments split at it
    }
    c.output = std::move(v);
    return c;
}

// Backpropagates delta through layers [from, to) using the cache; accumulates
// parameter gradients into grad and returns the delta w.r.t. the segment input.
inline Vec backward(const ModelSpec& spec, const ParamLayout& lay, const ParamVector& p,
                    const SegmentCache& cache, std::size_t from, std::size_t to, Vec delta,
                    Vec& grad) {
    std::size_t dense_idx = lay.dense.size();
    while (dense_idx > 0 && lay.dense[dense_idx - 1].layer_index >= to) --dense_idx;
    for (std::size_t i = to; i-- > from;) {
        const auto& l = spec.layers[i];
        const Vec& in = cache.inputs[i - from];
        if (l.kind == Layer::Kind::dense) {
            const auto& s = lay.dense[--dense_idx];
            Vec din(s.cols, 0.0);
            for (std::size_t r = 0; r < s.rows; ++r) {
                const double dr = delta[r];
                double* gw = grad.data() + s.offset + r * s.cols;
                const double* w = p.values.data() + s.offset + r * s.cols;
                for (std::size_t c = 0; c < s.cols; ++c) {
                    gw[c] += dr * in[c];
                    din[c] += dr * w[c];
                }
                if (s.bias_offset != ParamLayout::DenseSlot::npos) grad[s.bias_offset + r] += dr;
            }
            delta = std::move(din);
        } else if (l.kind == Layer::Kind::activation) {
            switch (l.act) {
                case Activation::relu:
                    for (std::size_t j = 0; j < delta.size(); ++j)
                        if (in[j] <= 0.0) delta[j] = 0.0;
                    break;
                case Activation::tanh_fn:
                    for (std::size_t j = 0; j < delta.size(); ++j) {
                        double t = std::tanh(in[j]);
                        delta[j] *= 1.0 - t * t;
                    }
                    break;
                case Activation::identity:
                    break;
            }
        }
    }
    return delta;
}

} // namespace detail_grad

// Exact reverse-mode gradient of the mean batch loss with respect to the flat
// parameter vector. Handles the averaging layer by backpropagating through
// every branch (mean combine) or through the coordinatewise extremal branch
// (max/min pooling, first branch wins ties to match the forward pass).
inline ParamVector gradient(const ModelSpec& spec, const ParamVector& params, const LossFn& loss,
                            const std::vector<BatchItem>& batch, const FaContext* ctx = nullptr) {
    if (!loss.differentiable()) throw std::domain_error("unsupported loss for gradient: " + loss.name());
    if (batch.empty()) throw std::domain_error("gradient: empty batch");
    auto lay = ParamLayout::of(spec);
    if (params.size() != lay.total) throw std::invalid_argument("gradient: param size mismatch");

    Vec grad(lay.total, 0.0);
    auto d = spec.averaging_index();

    for (const auto& item : batch) {
        const Vec& x = *item.x;
        if (x.size() != spec.input_dim) throw std::invalid_argument("gradient: input dim mismatch");

        if (!d) {
            auto cache = detail_grad::run_cached(spec, lay, params, x, 0, spec.layers.size());
            Vec delta = loss.gradient(cache.output, item.y);
            detail_grad::backward(spec, lay, params, cache, 0, spec.layers.size(),
                                  std::move(delta), grad);
            continue;
        }

        const auto& mode = spec.layers[*d].mode;
        const bool pool_max = mode.kind == SymmetrizationMode::Kind::max_pool;
        const bool pool_min = mode.kind == SymmetrizationMode::Kind::min_pool;

        auto ins = detail_model::branch_inputs(spec, x, ctx);
        std::vector<detail_grad::SegmentCache> branches;
        branches.reserve(ins.size());
        for (const Vec& bx : ins)
            branches.push_back(detail_grad::run_cached(spec, lay, params, bx, 0, *d));

        Vec combined = branches[0].output;
        for (std::size_t b = 1; b < branches.size(); ++b) {
            const Vec& u = branches[b].output;
            for (std::size_t i = 0; i < combined.size(); ++i) {
                if (pool_max) combined[i] = std::max(combined[i], u[i]);
                else if (pool_min) combined[i] = std::min(combined[i], u[i]);
                else combined[i] += u[i];
            }
        }
        if (!pool_max && !pool_min)
            combined = (1.0 / static_cast<double>(branches.size())) * std::move(combined);

        auto suffix = detail_grad::run_cached(spec, lay, params, combined, *d + 1,
                                              spec.layers.size());
        Vec delta = loss.gradient(suffix.output, item.y);
        Vec dcomb = detail_grad::backward(spec, lay, params, suffix, *d + 1, spec.layers.size(),
                                          std::move(delta), grad);

        if (pool_max || pool_min) {
            // route each coordinate to the first branch attaining the extremum
            std::vector<Vec> branch_deltas(branches.size());
            for (std::size_t i = 0; i < dcomb.size(); ++i) {
                for (std::size_t b = 0; b < branches.size(); ++b) {
                    if (branches[b].output[i] == combined[i]) {
                        if (branch_deltas[b].empty()) branch_deltas[b].assign(dcomb.size(), 0.0);
                        branch_deltas[b][i] = dcomb[i];
                        break;
                    }
                }
            }
            for (std::size_t b = 0; b < branches.size(); ++b)
                if (!branch_deltas[b].empty())
                    detail_grad::backward(spec, lay, params, branches[b], 0, *d,
                                          std::move(branch_deltas[b]), grad);
        } else {
            const double scale = 1.0 / static_cast<double>(branches.size());
            for (auto& br : branches) {
                Vec db = scale * dcomb;
                detail_grad::backward(spec, lay, params, br, 0, *d, std::move(db), grad);
            }
        }
    }

    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (double& g : grad) g *= inv_n;
    return ParamVector{std::move(grad)};
}

inline double batch_loss(const ModelSpec& spec, const ParamVector& params, const LossFn& loss,
                         const std::vector<BatchItem>& batch, const FaContext* ctx = nullptr) {
    if (batch.empty()) throw std::domain_error("batch_loss: empty batch");
    double s = 0.0;
    for (const auto& item : batch) s += loss(forward(spec, params, *item.x, ctx), item.y);
    return s / static_cast<double>(batch.size());
}

} // namespace invlab
