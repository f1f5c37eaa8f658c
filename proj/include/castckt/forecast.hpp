#pragma once

// Short/medium/long horizon heads with per-head aleatoric variance, fusion by
// chaos-dependent softmax weights, Gaussian NLL and interval coverage.

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "castckt/errors.hpp"
#include "castckt/nlts.hpp"
#include "castckt/tensor.hpp"

namespace castckt::forecast {

inline constexpr std::size_t kHeads = 3;
inline constexpr std::array<const char*, kHeads> kHeadTags = {"s", "m", "l"};
inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

struct HeadConfig {
    std::size_t in_features = 32;  // d_z
    std::size_t hidden = 16;
    std::size_t horizon = 12;
};

template <class Rng>
void init(ParamRegistry& P, const std::string& prefix, const HeadConfig& cfg, Rng& rng) {
    const std::size_t in = cfg.in_features + nlts::kProfileDim;
    for (const char* tag : kHeadTags) {
        for (const char* part : {"mean", "logvar"}) {
            const std::string p = prefix + "." + tag + "." + part;
            P.add_glorot(p + ".w1", {in, cfg.hidden}, rng);
            P.add_constant(p + ".b1", {cfg.hidden}, 0.0);
            P.add_glorot(p + ".w2", {cfg.hidden, cfg.horizon}, rng);
            P.add_constant(p + ".b2", {cfg.horizon}, 0.0);
        }
    }
    P.add_constant(prefix + ".w_omega", {nlts::kProfileDim, kHeads}, 0.0);
    P.add_constant(prefix + ".b_omega", {kHeads}, 0.0);
}

/// Steps [begin, end) of the horizon that head `h` specialises on: the first
/// ceil(H/3) steps, then half of the remainder (rounded up), then the rest.
inline std::pair<std::size_t, std::size_t> head_segment(std::size_t h, std::size_t H) {
    const std::size_t a = (H + 2) / 3;
    const std::size_t b = a + (H - a + 1) / 2;
    if (h == 0) return {0, a};
    if (h == 1) return {a, b};
    return {b, H};
}

/// omega = softmax(C W_omega + b_omega). C [B,20] -> [B,3].
inline Tensor fusion_weights(const Tensor& C, const ParamRegistry& P, const std::string& prefix) {
    return softmax(matmul(C, P.at(prefix + ".w_omega")) + P.at(prefix + ".b_omega"), -1);
}

struct ForecastWithUncertainty {
    Tensor mean;      // [B,N,H]
    Tensor variance;  // [B,N,H]
    Tensor omega;     // [B,3]
    std::array<Tensor, kHeads> head_mean;
    std::array<Tensor, kHeads> head_variance;
};

/// Fuses per-head means/variances with weights omega [B,3].
inline ForecastWithUncertainty fuse(const std::array<Tensor, kHeads>& means, const std::array<Tensor, kHeads>& variances,
                                    const Tensor& omega) {
    const std::size_t B = omega.dim(0);
    ForecastWithUncertainty out;
    out.omega = omega;
    out.head_mean = means;
    out.head_variance = variances;
    for (std::size_t h = 0; h < kHeads; ++h) {
        Tensor w = reshape(slice(omega, 1, h, 1), {B, 1, 1});
        out.mean = h == 0 ? w * means[h] : out.mean + w * means[h];
        out.variance = h == 0 ? w * variances[h] : out.variance + w * variances[h];
    }
    return out;
}

inline Tensor mlp(const Tensor& x, const ParamRegistry& P, const std::string& p) {
    return matmul(relu(matmul(x, P.at(p + ".w1")) + P.at(p + ".b1")), P.at(p + ".w2")) + P.at(p + ".b2");
}

/// Z [B,N,d_z], C [B,20]. Every head sees [Z | C] and predicts all H steps;
/// log-variances are clamped to [-10, 10].
inline ForecastWithUncertainty predict(const Tensor& Z, const Tensor& C, const ParamRegistry& P, const std::string& prefix) {
    if (Z.rank() != 3 || C.rank() != 2 || C.dim(0) != Z.dim(0)) {
        throw ShapeMismatch("predict: Z " + shape_str(Z.shape()) + ", C " + shape_str(C.shape()));
    }
    const std::size_t B = Z.dim(0), N = Z.dim(1);
    const std::size_t expected = P.at(prefix + ".s.mean.w1").dim(0);
    if (Z.dim(2) + nlts::kProfileDim != expected) {
        throw ShapeMismatch("predict: Z " + shape_str(Z.shape()) + " does not match head input width " + std::to_string(expected));
    }
    Tensor ctx = broadcast_to(reshape(C, {B, 1, nlts::kProfileDim}), {B, N, nlts::kProfileDim});
    Tensor x = concat({Z, ctx}, -1);
    std::array<Tensor, kHeads> means, vars;
    for (std::size_t h = 0; h < kHeads; ++h) {
        const std::string p = prefix + "." + kHeadTags[h];
        means[h] = mlp(x, P, p + ".mean");
        vars[h] = exp(clamp(mlp(x, P, p + ".logvar"), kLogVarMin, kLogVarMax));
    }
    return fuse(means, vars, fusion_weights(C, P, prefix));
}

inline void require_positive(const Tensor& var) {
    for (double v : var.data()) {
        if (!(v > 0.0)) throw NonPositiveVariance("variance must be strictly positive, got " + std::to_string(v));
    }
}

/// Per-element 0.5 log(2 pi var) + (y - mu)^2 / (2 var).
inline Tensor gaussian_nll_terms(const Tensor& y, const Tensor& mu, const Tensor& var) {
    require_positive(var);
    return log(var * (2.0 * std::numbers::pi)) * 0.5 + square(y - mu) / (var * 2.0);
}

/// Mean Gaussian negative log-likelihood over all elements.
inline Tensor gaussian_nll(const Tensor& y, const Tensor& mu, const Tensor& var) { return mean(gaussian_nll_terms(y, mu, var)); }

/// NLL of head `h` with its own horizon segment weighted 2x (weighted mean over steps).
inline Tensor head_weighted_nll(const Tensor& y, const Tensor& mu, const Tensor& var, std::size_t h) {
    const std::size_t H = y.dim(-1);
    const auto [lo, hi] = head_segment(h, H);
    std::vector<double> w(H, 1.0);
    for (std::size_t t = lo; t < hi; ++t) w[t] = 2.0;
    double total = 0.0;
    for (double v : w) total += v;
    Tensor terms = gaussian_nll_terms(y, mu, var) * Tensor::from({H}, std::move(w));
    return mean(terms) * (static_cast<double>(H) / total);
}

// -- intervals ---------------------------------------------------------------

/// Standard normal quantile: Acklam's rational approximation followed by one
/// Halley correction step, which brings it to ~1e-15.
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw InvalidArgument("normal_quantile: p must be in (0,1)");
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double lo = 0.02425, hi = 1.0 - lo;
    double x;
    if (p < lo) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= hi) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(x * x / 2.0);
    return x - u / (1.0 + x * u / 2.0);
}

/// Two-sided multiplier z with P(|N(0,1)| <= z) = 1 - alpha.
inline double interval_z(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("alpha must be in (0,1)");
    return normal_quantile(1.0 - alpha / 2.0);
}

/// Fraction of targets inside mean +- width * z_{alpha/2} * sqrt(var).
inline double coverage(std::span<const double> y, std::span<const double> mean, std::span<const double> var, double alpha,
                       double width = 1.0) {
    if (y.size() != mean.size() || y.size() != var.size()) throw ShapeMismatch("coverage: length mismatch");
    if (y.empty()) return 0.0;
    const double z = interval_z(alpha) * width;
    std::size_t inside = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (std::abs(y[i] - mean[i]) <= z * std::sqrt(var[i])) ++inside;
    }
    return static_cast<double>(inside) / static_cast<double>(y.size());
}

inline double coverage(const Tensor& y, const ForecastWithUncertainty& f, double alpha, double width = 1.0) {
    return coverage(y.data(), f.mean.data(), f.variance.data(), alpha, width);
}

}  // namespace castckt::forecast
