#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "invlab/vecmath.hpp"

namespace invlab {

// Class decision from a model output vector: argmax with lowest-index
// tie-break; scalar outputs threshold at 0.5 with the boundary mapped to
// class 1.
inline int predict_class(const Vec& out) {
    if (out.empty()) throw std::invalid_argument("predict_class: empty output");
    if (out.size() == 1) return out[0] >= 0.5 ? 1 : 0;
    std::size_t best = 0;
    for (std::size_t i = 1; i < out.size(); ++i)
        if (out[i] > out[best]) best = i;
    return static_cast<int>(best);
}

enum class LossKind { squared, logistic, cross_entropy, zero_one };

// Loss over (model output vector, scalar label). Labels hold regression
// targets or class indices depending on the loss.
struct LossFn {
    LossKind kind = LossKind::squared;

    std::string name() const {
        switch (kind) {
            case LossKind::squared: return "squared";
            case LossKind::logistic: return "logistic";
            case LossKind::cross_entropy: return "cross_entropy";
            case LossKind::zero_one: return "zero_one";
        }
        return "?";
    }

    bool convex_in_first_arg() const { return kind != LossKind::zero_one; }
    bool differentiable() const { return kind != LossKind::zero_one; }

    double operator()(const Vec& out, double label) const {
        switch (kind) {
            case LossKind::squared: {
                if (out.size() == 1) {
                    double d = out[0] - label;
                    return d * d;
                }
                // multi-output regression against a one-hot target
                double s = 0.0;
                for (std::size_t j = 0; j < out.size(); ++j) {
                    double t = (static_cast<double>(j) == label) ? 1.0 : 0.0;
                    double d = out[j] - t;
                    s += d * d;
                }
                return s;
            }
            case LossKind::logistic: {
                if (out.size() != 1) throw std::invalid_argument("logistic loss expects scalar output");
                double p = std::clamp(out[0], 1e-12, 1.0 - 1e-12);
                return -(label * std::log(p) + (1.0 - label) * std::log(1.0 - p));
            }
            case LossKind::cross_entropy: {
                // logits in, max-subtraction for stability
                int y = static_cast<int>(label);
                if (y < 0 || y >= static_cast<int>(out.size()))
                    throw std::invalid_argument("cross_entropy: label out of range");
                double mx = *std::max_element(out.begin(), out.end());
                double lse = 0.0;
                for (double z : out) lse += std::exp(z - mx);
                return std::log(lse) + mx - out[y];
            }
            case LossKind::zero_one:
                return predict_class(out) == static_cast<int>(label) ? 0.0 : 1.0;
        }
        return 0.0;
    }

    // dLoss/dOutput. zero_one is flagged non-differentiable and rejected.
    Vec gradient(const Vec& out, double label) const {
        switch (kind) {
            case LossKind::squared: {
                Vec g(out.size());
                if (out.size() == 1) {
                    g[0] = 2.0 * (out[0] - label);
                } else {
                    for (std::size_t j = 0; j < out.size(); ++j) {
                        double t = (static_cast<double>(j) == label) ? 1.0 : 0.0;
                        g[j] = 2.0 * (out[j] - t);
                    }
                }
                return g;
            }
            case LossKind::logistic: {
                double p = out[0];
                Vec g(1, 0.0);
                if (p <= 1e-12 || p >= 1.0 - 1e-12) return g;  // clamped region
                g[0] = -label / p + (1.0 - label) / (1.0 - p);
                return g;
            }
            case LossKind::cross_entropy: {
                int y = static_cast<int>(label);
                double mx = *std::max_element(out.begin(), out.end());
                double lse = 0.0;
                for (double z : out) lse += std::exp(z - mx);
                Vec g(out.size());
                for (std::size_t j = 0; j < out.size(); ++j) g[j] = std::exp(out[j] - mx) / lse;
                g[y] -= 1.0;
                return g;
            }
            case LossKind::zero_one:
                throw std::domain_error("zero_one loss is not differentiable");
        }
        return {};
    }
};

inline LossFn squared_loss() { return {LossKind::squared}; }
inline LossFn logistic_loss() { return {LossKind::logistic}; }
inline LossFn cross_entropy_loss() { return {LossKind::cross_entropy}; }
inline LossFn zero_one_loss() { return {LossKind::zero_one}; }

} // namespace invlab
