#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "invlab/rng.hpp"

namespace invlab::stats {

inline double mean(const std::vector<double>& v) {
    if (v.empty()) throw std::domain_error("mean of empty sample");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// Unbiased (n-1) sample variance.
inline double sample_variance(const std::vector<double>& v) {
    if (v.size() < 2) throw std::domain_error("sample_variance needs n >= 2");
    double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

inline double population_variance(const std::vector<double>& v) {
    if (v.empty()) throw std::domain_error("population_variance of empty sample");
    double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size());
}

inline double stderr_of_mean(const std::vector<double>& v) {
    return std::sqrt(sample_variance(v) / static_cast<double>(v.size()));
}

// Standard normal survival function P(Z > z).
inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

// One-sided paired test of H1: mean(a - b) > 0, normal approximation to the
// paired t statistic (intended for n in the hundreds or more).
inline double paired_one_sided_p(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw std::invalid_argument("paired test: mismatched or tiny samples");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    double m = mean(d);
    double v = sample_variance(d);
    if (v <= 0.0) return m > 0.0 ? 0.0 : 1.0;  // degenerate: all differences equal
    double t = m / std::sqrt(v / static_cast<double>(d.size()));
    return normal_sf(t);
}

// Exact binomial tail P(X >= k) for X ~ Bin(n, p).
inline double binomial_sf(int k, int n, double p) {
    if (k <= 0) return 1.0;
    if (k > n) return 0.0;
    double total = 0.0;
    for (int i = k; i <= n; ++i) {
        double logc = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0);
        total += std::exp(logc + i * std::log(p) + (n - i) * std::log1p(-p));
    }
    return std::min(1.0, total);
}

// Chi-square survival function via the Wilson-Hilferty cube-root normal
// approximation; adequate for the goodness-of-fit gates used here.
inline double chi_square_sf(double x, double df) {
    if (x <= 0.0) return 1.0;
    double t = std::cbrt(x / df);
    double mu = 1.0 - 2.0 / (9.0 * df);
    double sd = std::sqrt(2.0 / (9.0 * df));
    return normal_sf((t - mu) / sd);
}

// Two-sample permutation test (two-sided, difference of means).
inline double permutation_test_p(const std::vector<double>& a, const std::vector<double>& b,
                                 int n_perms, SplitRng& rng) {
    if (a.empty() || b.empty()) throw std::invalid_argument("permutation test: empty sample");
    std::vector<double> pool(a);
    pool.insert(pool.end(), b.begin(), b.end());
    double obs = std::abs(mean(a) - mean(b));
    int hits = 0;
    std::vector<double> shuffled(pool);
    for (int t = 0; t < n_perms; ++t) {
        rng.shuffle(shuffled);
        double ma = 0.0, mb = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) ma += shuffled[i];
        for (std::size_t i = a.size(); i < shuffled.size(); ++i) mb += shuffled[i];
        ma /= static_cast<double>(a.size());
        mb /= static_cast<double>(b.size());
        if (std::abs(ma - mb) >= obs) ++hits;
    }
    return (hits + 1.0) / (n_perms + 1.0);
}

} // namespace invlab::stats
