#pragma once

// Nonlinear time-series analysis: delay embedding, largest Lyapunov exponent,
// Hurst exponent, sample entropy, fractal dimensions, recurrence statistics
// and the fixed 20-slot chaos profile built from them.

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "castckt/errors.hpp"

namespace castckt::nlts {

inline constexpr std::size_t kProfileDim = 20;

enum class Slot : std::size_t {
    Lyapunov = 0,
    Hurst,
    SampleEntropy,
    CorrDimension,
    BoxDimension,
    RecurrenceRate,
    Determinism,
    SpectralEnergy,
    Mean,
    Variance,
    CoeffVariation,
    AutocorrLag1,
    Skewness,
    Kurtosis,
    TrendStrength,
    SeasonalStrength,
    Reserved0,
    Reserved1,
    Reserved2,
    Reserved3,
};

inline constexpr std::array<std::string_view, kProfileDim> kSlotNames = {
    "lyapunov",       "hurst",          "sample_entropy",  "corr_dimension",
    "box_dimension",  "recurrence_rate", "determinism",    "spectral_energy",
    "mean",           "variance",       "coeff_variation", "autocorr_lag1",
    "skewness",       "kurtosis",       "trend_strength",  "seasonal_strength",
    "reserved_0",     "reserved_1",     "reserved_2",      "reserved_3",
};

/// Number of named (non-reserved) slots.
inline constexpr std::size_t kNamedSlots = 16;

struct ChaosProfile {
    std::array<double, kProfileDim> slots{};
    /// Set when one or more estimators fell back to a default value.
    bool degraded = false;

    double& operator[](Slot s) { return slots[static_cast<std::size_t>(s)]; }
    double operator[](Slot s) const { return slots[static_cast<std::size_t>(s)]; }

    friend bool operator==(const ChaosProfile&, const ChaosProfile&) = default;
};

enum class RegimeLabel { Regular, WeakChaotic, Chaotic };

inline RegimeLabel classify_regime(double lyapunov) {
    if (lyapunov < 0.3) return RegimeLabel::Regular;
    if (lyapunov <= 0.8) return RegimeLabel::WeakChaotic;
    return RegimeLabel::Chaotic;
}

inline std::string_view to_string(RegimeLabel r) {
    switch (r) {
        case RegimeLabel::Regular:
            return "Regular";
        case RegimeLabel::WeakChaotic:
            return "WeakChaotic";
        case RegimeLabel::Chaotic:
            return "Chaotic";
    }
    return "Regular";
}

inline RegimeLabel regime_of(const ChaosProfile& p) { return classify_regime(p[Slot::Lyapunov]); }

/// A scalar series sampled at a fixed interval (minutes).
struct Series {
    std::vector<double> values;
    double dt = 1.0;
};

/// Points of a delay reconstruction, stored row-major (size() x dim()).
class DelayEmbedding {
   public:
    DelayEmbedding(std::size_t dim, std::size_t delay, std::vector<double> coords)
        : dim_(dim), delay_(delay), coords_(std::move(coords)) {
        if (dim_ == 0 || coords_.size() % dim_ != 0) {
            throw ShapeMismatch("embedding coordinates not a multiple of dimension " +
                                std::to_string(dim_));
        }
    }

    /// Wraps an arbitrary point cloud (delay recorded as 0).
    static DelayEmbedding from_points(std::size_t dim, std::vector<double> coords) {
        return DelayEmbedding(dim, 0, std::move(coords));
    }

    std::size_t dim() const { return dim_; }
    std::size_t delay() const { return delay_; }
    std::size_t size() const { return coords_.size() / dim_; }
    std::span<const double> coords() const { return coords_; }
    std::span<const double> point(std::size_t i) const {
        return std::span<const double>(coords_).subspan(i * dim_, dim_);
    }

   private:
    std::size_t dim_;
    std::size_t delay_;
    std::vector<double> coords_;
};

namespace detail {

inline void require_finite(std::span<const double> x) {
    for (double v : x) {
        if (!std::isfinite(v)) throw NonFiniteInput("series contains a non-finite value");
    }
}

inline double mean(std::span<const double> x) {
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

inline double variance(std::span<const double> x) {
    const double mu = mean(x);
    double s = 0.0;
    for (double v : x) s += (v - mu) * (v - mu);
    return s / static_cast<double>(x.size());
}

inline bool is_constant(std::span<const double> x) {
    return std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); });
}

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// Least-squares slope of y against x.
inline double ls_slope(std::span<const double> x, std::span<const double> y) {
    const double mx = mean(x);
    const double my = mean(y);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    return sxx > 0.0 ? sxy / sxx : 0.0;
}

// The FFTW planner is not re-entrant.
inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

/// |X_k|^2 for k = 0..floor(n/2) of the real DFT.
inline std::vector<double> power_spectrum(std::span<const double> x) {
    const int n = static_cast<int>(x.size());
    std::vector<double> in(x.begin(), x.end());
    std::vector<std::complex<double>> out(static_cast<std::size_t>(n / 2 + 1));
    fftw_plan plan;
    {
        std::lock_guard lock(fftw_planner_mutex());
        plan = fftw_plan_dft_r2c_1d(n, in.data(), reinterpret_cast<fftw_complex*>(out.data()),
                                    FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard lock(fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
    std::vector<double> p(out.size());
    for (std::size_t k = 0; k < out.size(); ++k) p[k] = std::norm(out[k]);
    return p;
}

struct EmbeddingBox {
    std::vector<double> lo;
    double span = 0.0;
};

inline EmbeddingBox bounding_box(const DelayEmbedding& emb) {
    const std::size_t m = emb.dim();
    EmbeddingBox box;
    box.lo.assign(m, std::numeric_limits<double>::infinity());
    std::vector<double> hi(m, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < emb.size(); ++i) {
        auto p = emb.point(i);
        for (std::size_t d = 0; d < m; ++d) {
            box.lo[d] = std::min(box.lo[d], p[d]);
            hi[d] = std::max(hi[d], p[d]);
        }
    }
    for (std::size_t d = 0; d < m; ++d) box.span = std::max(box.span, hi[d] - box.lo[d]);
    return box;
}

}  // namespace detail

/// Points (x_{i+(m-1)tau}, ..., x_i), most recent first.
inline DelayEmbedding delay_embed(std::span<const double> x, std::size_t m, std::size_t tau) {
    if (m == 0 || tau == 0) throw SeriesTooShort("embedding dimension and delay must be positive");
    const std::size_t need = (m - 1) * tau + 2;
    if (x.size() < need) {
        throw SeriesTooShort("series of length " + std::to_string(x.size()) + " cannot be embedded with m=" +
                             std::to_string(m) + ", tau=" + std::to_string(tau) + " (need " +
                             std::to_string(need) + ")");
    }
    const std::size_t count = x.size() - (m - 1) * tau;
    std::vector<double> coords(count * m);
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t d = 0; d < m; ++d) coords[i * m + d] = x[i + (m - 1 - d) * tau];
    }
    return DelayEmbedding(m, tau, std::move(coords));
}

/// First lag whose autocorrelation drops below 1/e, capped at 10. Constant series give 1.
inline std::size_t default_delay(std::span<const double> x, std::size_t cap = 10) {
    if (x.size() < 3 || detail::is_constant(x)) return 1;
    const double mu = detail::mean(x);
    double c0 = 0.0;
    for (double v : x) c0 += (v - mu) * (v - mu);
    const std::size_t max_lag = std::min(cap, x.size() - 2);
    for (std::size_t k = 1; k <= max_lag; ++k) {
        double ck = 0.0;
        for (std::size_t t = 0; t + k < x.size(); ++t) ck += (x[t] - mu) * (x[t + k] - mu);
        if (ck / c0 < std::exp(-1.0)) return k;
    }
    return std::max<std::size_t>(1, max_lag);
}

/// Rosenstein-style largest Lyapunov exponent, in 1/step.
///
/// Each embedded point is paired with its nearest neighbour outside a Theiler
/// window of m*tau samples. The mean log distance of the paired trajectories is
/// tracked for up to 10 steps; the slope is fitted from step 0 to the first step
/// where the curve has covered half of its total rise (delay vectors share
/// coordinates for the first m*tau steps, so saturation starts early on noise).
inline double largest_lyapunov(std::span<const double> x, std::size_t m = 5, std::size_t tau = 1) {
    detail::require_finite(x);
    if (x.size() >= 2 && detail::variance(x) < 1e-12) {
        throw DegenerateSeries("largest_lyapunov: series variance below 1e-12");
    }
    const DelayEmbedding emb = delay_embed(x, m, tau);
    constexpr std::size_t kHorizon = 10;
    const std::size_t n = emb.size();
    const std::size_t theiler = m * tau;
    if (n <= kHorizon + 2 * theiler + 2) {
        throw SeriesTooShort("largest_lyapunov: too few embedded points for the Theiler window");
    }
    const std::size_t usable = n - kHorizon;
    const double floor = 1e-9 * std::max(detail::bounding_box(emb).span, 1e-300);

    std::vector<std::size_t> nn(usable);
    for (std::size_t i = 0; i < usable; ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = i;
        auto pi = emb.point(i);
        for (std::size_t j = 0; j < usable; ++j) {
            if ((i > j ? i - j : j - i) <= theiler) continue;
            const double d = detail::sq_dist(pi, emb.point(j));
            if (d < best) {
                best = d;
                arg = j;
            }
        }
        nn[i] = arg;
    }

    std::vector<double> curve(kHorizon + 1, 0.0);
    for (std::size_t k = 0; k <= kHorizon; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < usable; ++i) {
            const double d = std::sqrt(detail::sq_dist(emb.point(i + k), emb.point(nn[i] + k)));
            s += std::log(std::max(d, floor));
        }
        curve[k] = s / static_cast<double>(usable);
    }

    const double rise = *std::max_element(curve.begin(), curve.end()) - curve[0];
    std::size_t end = kHorizon;
    if (rise > 0.0) {
        for (std::size_t k = 1; k <= kHorizon; ++k) {
            if (curve[k] >= curve[0] + 0.5 * rise) {
                end = k;
                break;
            }
        }
    }
    std::vector<double> ks(end + 1);
    std::iota(ks.begin(), ks.end(), 0.0);
    return detail::ls_slope(ks, std::span<const double>(curve).first(end + 1));
}

/// Rescaled-range Hurst exponent over dyadic windows 16..n/2, clamped to [0, 1.5].
inline double hurst_exponent(std::span<const double> x) {
    detail::require_finite(x);
    if (x.size() < 64) throw SeriesTooShort("hurst_exponent needs at least 64 samples");
    if (detail::variance(x) < 1e-12) throw DegenerateSeries("hurst_exponent: constant series");
    std::vector<double> log_w, log_rs;
    for (std::size_t w = 16; w <= x.size() / 2; w *= 2) {
        double acc = 0.0;
        std::size_t count = 0;
        for (std::size_t s = 0; s + w <= x.size(); s += w) {
            auto seg = x.subspan(s, w);
            const double mu = detail::mean(seg);
            double cum = 0.0, lo = 0.0, hi = 0.0, ss = 0.0;
            for (double v : seg) {
                cum += v - mu;
                lo = std::min(lo, cum);
                hi = std::max(hi, cum);
                ss += (v - mu) * (v - mu);
            }
            const double sd = std::sqrt(ss / static_cast<double>(w));
            if (sd > 0.0) {
                acc += (hi - lo) / sd;
                ++count;
            }
        }
        if (count > 0 && acc > 0.0) {
            log_w.push_back(std::log(static_cast<double>(w)));
            log_rs.push_back(std::log(acc / static_cast<double>(count)));
        }
    }
    if (log_w.size() < 2) throw DegenerateSeries("hurst_exponent: fewer than two usable window sizes");
    return std::clamp(detail::ls_slope(log_w, log_rs), 0.0, 1.5);
}

/// Sample entropy with absolute tolerance `r` (Chebyshev distance, self-matches excluded).
///
/// Both template lengths use the first n-m start positions. When no (m+1)-match
/// exists the value is capped at ln(B+1) so profiles stay finite.
inline double sample_entropy(std::span<const double> x, std::size_t m, double r) {
    detail::require_finite(x);
    if (m == 0) throw SeriesTooShort("sample_entropy: m must be positive");
    if (x.size() < 2 * m + 2) {
        throw SeriesTooShort("sample_entropy needs at least 2m+2 = " + std::to_string(2 * m + 2) + " samples");
    }
    if (r < 0.0) throw DegenerateSeries("sample_entropy: negative tolerance");
    const std::size_t templates = x.size() - m;
    std::size_t a = 0, b = 0;
    for (std::size_t i = 0; i < templates; ++i) {
        for (std::size_t j = i + 1; j < templates; ++j) {
            bool match = true;
            for (std::size_t l = 0; l < m; ++l) {
                if (std::abs(x[i + l] - x[j + l]) > r) {
                    match = false;
                    break;
                }
            }
            if (!match) continue;
            ++b;
            if (std::abs(x[i + m] - x[j + m]) <= r) ++a;
        }
    }
    if (a == 0) return std::log(static_cast<double>(b) + 1.0);
    return -std::log(static_cast<double>(a) / static_cast<double>(b));
}

/// Sample entropy with m = 2 and r = r_factor * sigma; a zero-variance series gives 0.
inline double sample_entropy(std::span<const double> x, std::size_t m = 2, std::optional<double> r_factor = {}) {
    detail::require_finite(x);
    const double sigma = std::sqrt(detail::variance(x));
    if (sigma == 0.0) return 0.0;
    return sample_entropy(x, m, r_factor.value_or(0.2) * sigma);
}

inline constexpr std::size_t kMaxPairPoints = 4000;

/// Grassberger-Procaccia correlation dimension.
///
/// The fit uses 20 log-spaced radii covering the middle 50% of the log range
/// between the smallest and largest nonzero pairwise distance. Clouds larger than
/// 4000 points are strided down first.
inline double correlation_dimension(const DelayEmbedding& emb) {
    if (emb.size() < 500) {
        throw InsufficientPoints("correlation_dimension needs at least 500 points, got " + std::to_string(emb.size()));
    }
    const std::size_t stride = (emb.size() + kMaxPairPoints - 1) / kMaxPairPoints;
    std::vector<std::span<const double>> pts;
    for (std::size_t i = 0; i < emb.size(); i += stride) pts.push_back(emb.point(i));
    const std::size_t n = pts.size();

    double dmin = std::numeric_limits<double>::infinity(), dmax = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = detail::sq_dist(pts[i], pts[j]);
            if (d > 0.0) dmin = std::min(dmin, d);
            dmax = std::max(dmax, d);
        }
    }
    if (!(dmax > 0.0) || !(dmax > dmin)) return 0.0;
    const double a = 0.5 * std::log(dmin), b = 0.5 * std::log(dmax);
    constexpr std::size_t kGrid = 20;
    std::vector<double> log_eps(kGrid), eps_sq(kGrid);
    for (std::size_t g = 0; g < kGrid; ++g) {
        log_eps[g] = a + (0.25 + 0.5 * static_cast<double>(g) / (kGrid - 1)) * (b - a);
        eps_sq[g] = std::exp(2.0 * log_eps[g]);
    }
    std::vector<std::size_t> hist(kGrid + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = detail::sq_dist(pts[i], pts[j]);
            const auto g = static_cast<std::size_t>(std::lower_bound(eps_sq.begin(), eps_sq.end(), d) - eps_sq.begin());
            ++hist[g];
        }
    }
    const double total = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
    std::vector<double> xs, ys;
    std::size_t cum = 0;
    for (std::size_t g = 0; g < kGrid; ++g) {
        cum += hist[g];
        if (cum == 0) continue;
        xs.push_back(log_eps[g]);
        ys.push_back(std::log(static_cast<double>(cum) / total));
    }
    if (xs.size() < 2) return 0.0;
    return detail::ls_slope(xs, ys);
}

/// Box-counting dimension from dyadic refinements of the bounding box.
///
/// Levels stop once the occupied box count exceeds n/10 (under-sampled grid);
/// the slope is fitted over the middle half of the remaining levels.
inline double box_counting_dimension(const DelayEmbedding& emb) {
    if (emb.size() < 10) {
        throw InsufficientPoints("box_counting_dimension needs at least 10 points, got " + std::to_string(emb.size()));
    }
    const auto box = detail::bounding_box(emb);
    if (!(box.span > 0.0)) return 0.0;
    const std::size_t n = emb.size(), m = emb.dim();
    std::vector<double> levels, log_counts;
    for (int k = 0; k <= 20; ++k) {
        const double cells = std::ldexp(1.0, k);
        std::set<std::vector<std::uint32_t>> occupied;
        std::vector<std::uint32_t> key(m);
        for (std::size_t i = 0; i < n; ++i) {
            auto p = emb.point(i);
            for (std::size_t d = 0; d < m; ++d) {
                const double u = (p[d] - box.lo[d]) / box.span;
                key[d] = static_cast<std::uint32_t>(std::min(std::floor(u * cells), cells - 1.0));
            }
            occupied.insert(key);
        }
        const double count = static_cast<double>(occupied.size());
        if (k > 0 && count > static_cast<double>(n) / 10.0) break;
        levels.push_back(static_cast<double>(k) * std::log(2.0));
        log_counts.push_back(std::log(count));
    }
    if (levels.size() < 2) return 0.0;
    std::size_t lo = levels.size() / 4, hi = levels.size() - levels.size() / 4;
    if (hi - lo < 2) {
        lo = 0;
        hi = levels.size();
    }
    return detail::ls_slope(std::span<const double>(levels).subspan(lo, hi - lo),
                            std::span<const double>(log_counts).subspan(lo, hi - lo));
}

struct RecurrenceMetrics {
    double recurrence_rate = 0.0;
    double determinism = 0.0;
};

/// Largest pairwise Euclidean distance of the cloud.
inline double embedding_diameter(const DelayEmbedding& emb) {
    double best = 0.0;
    for (std::size_t i = 0; i < emb.size(); ++i) {
        for (std::size_t j = i + 1; j < emb.size(); ++j) best = std::max(best, detail::sq_dist(emb.point(i), emb.point(j)));
    }
    return std::sqrt(best);
}

namespace detail {

inline RecurrenceMetrics recurrence_unchecked(const DelayEmbedding& emb, double eps) {
    const std::size_t n = emb.size();
    if (n < 2) return {};
    const double eps_sq = eps * eps;
    std::size_t recurrent = 0, line_capable = 0, on_lines = 0;
    // Upper triangle, walked diagonal by diagonal; the matrix is symmetric so the
    // ratios equal those of the full off-diagonal matrix. The corner diagonal has
    // a single cell and cannot hold a line, so it is left out of determinism.
    for (std::size_t k = 1; k < n; ++k) {
        std::size_t run = 0;
        for (std::size_t i = 0; i + k < n; ++i) {
            if (sq_dist(emb.point(i), emb.point(i + k)) <= eps_sq) {
                ++recurrent;
                if (k + 1 < n) ++line_capable;
                ++run;
            } else {
                if (run >= 2) on_lines += run;
                run = 0;
            }
        }
        if (run >= 2) on_lines += run;
    }
    const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
    RecurrenceMetrics out;
    out.recurrence_rate = static_cast<double>(recurrent) / pairs;
    out.determinism = line_capable ? static_cast<double>(on_lines) / static_cast<double>(line_capable) : 0.0;
    return out;
}

}  // namespace detail

/// Recurrence rate and determinism (diagonal lines of length >= 2) at radius eps.
inline RecurrenceMetrics recurrence_metrics(const DelayEmbedding& emb, double eps) {
    if (emb.size() < 50) {
        throw InsufficientPoints("recurrence_metrics needs at least 50 points, got " + std::to_string(emb.size()));
    }
    if (!(eps >= 0.0)) throw DegenerateSeries("recurrence_metrics: eps must be non-negative");
    return detail::recurrence_unchecked(emb, eps);
}

/// Uses 10% of the embedding diameter as radius.
inline RecurrenceMetrics recurrence_metrics(const DelayEmbedding& emb) {
    return recurrence_metrics(emb, 0.1 * embedding_diameter(emb));
}

struct StatisticalDescriptors {
    double mean = 0.0;
    double variance = 0.0;
    double coeff_variation = 0.0;
    double autocorr_lag1 = 0.0;
    double skewness = 0.0;
    double kurtosis = 0.0;  // excess
    double spectral_energy = 0.0;
    double trend_strength = 0.0;
    double seasonal_strength = 0.0;
};

namespace detail {

inline std::vector<double> linear_detrend(std::span<const double> x) {
    const std::size_t n = x.size();
    std::vector<double> t(n);
    std::iota(t.begin(), t.end(), 0.0);
    const double slope = ls_slope(t, x);
    const double intercept = mean(x) - slope * mean(t);
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = x[i] - (intercept + slope * t[i]);
    return r;
}

inline StatisticalDescriptors descriptors_unchecked(std::span<const double> x) {
    StatisticalDescriptors s;
    const std::size_t n = x.size();
    if (is_constant(x)) {
        s.mean = x.front();
        return s;
    }
    s.mean = mean(x);
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (double v : x) {
        const double d = v - s.mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    const double nn = static_cast<double>(n);
    m2 /= nn;
    m3 /= nn;
    m4 /= nn;
    s.variance = m2;
    s.coeff_variation = s.mean != 0.0 ? std::sqrt(m2) / std::abs(s.mean) : 0.0;
    if (m2 > 0.0) {
        double c1 = 0.0;
        for (std::size_t t = 0; t + 1 < n; ++t) c1 += (x[t] - s.mean) * (x[t + 1] - s.mean);
        s.autocorr_lag1 = c1 / (m2 * nn);
        s.skewness = m3 / std::pow(m2, 1.5);
        s.kurtosis = m4 / (m2 * m2) - 3.0;
    }

    const auto power = power_spectrum(x);
    double energy = 0.0;
    for (std::size_t k = 1; k < power.size(); ++k) {
        const bool nyquist = (n % 2 == 0) && k == n / 2;
        energy += nyquist ? power[k] : 2.0 * power[k];
    }
    s.spectral_energy = energy / nn;

    if (n >= 3 && m2 > 0.0) {
        const auto detrended = linear_detrend(x);
        const double vd = variance(detrended);
        s.trend_strength = std::max(0.0, 1.0 - vd / m2);

        std::size_t peak = 0;
        double best = -1.0;
        for (std::size_t k = 1; k < power.size(); ++k) {
            if (power[k] > best) {
                best = power[k];
                peak = k;
            }
        }
        if (peak > 0 && vd > 0.0) {
            const auto period = static_cast<std::size_t>(std::lround(nn / static_cast<double>(peak)));
            if (period >= 2 && period <= n / 2) {
                std::vector<double> phase_sum(period, 0.0);
                std::vector<std::size_t> phase_count(period, 0);
                for (std::size_t t = 0; t < n; ++t) {
                    phase_sum[t % period] += detrended[t];
                    ++phase_count[t % period];
                }
                std::vector<double> resid(n);
                for (std::size_t t = 0; t < n; ++t) {
                    resid[t] = detrended[t] - phase_sum[t % period] / static_cast<double>(phase_count[t % period]);
                }
                s.seasonal_strength = std::max(0.0, 1.0 - variance(resid) / vd);
            }
        }
    }
    return s;
}

}  // namespace detail

/// Moments, lag-1 autocorrelation, spectral energy and trend/seasonal strength.
///
/// spectral_energy is the sum of squared DFT magnitudes without the zero bin,
/// divided by the length. seasonal_strength folds the detrended series at the
/// period of the dominant DFT peak.
inline StatisticalDescriptors statistical_descriptors(std::span<const double> x) {
    detail::require_finite(x);
    if (x.size() < 8) throw SeriesTooShort("statistical_descriptors needs at least 8 samples");
    return detail::descriptors_unchecked(x);
}

struct ProfileOptions {
    std::size_t embed_dim = 5;
    /// 0 selects default_delay().
    std::size_t delay = 0;
    std::size_t entropy_m = 2;
    double entropy_r_factor = 0.2;
    double recurrence_eps_fraction = 0.1;
};

inline constexpr std::size_t kFullProfileLength = 128;

/// Assembles the 20-slot profile.
///
/// Series shorter than 128 samples take the degraded path (Lyapunov exponent and
/// both fractal dimensions set to 0; Hurst 0.5 below 64 samples). An estimator
/// that rejects the input (e.g. constant series) also falls back to its default
/// and marks the profile degraded. Only non-finite input raises.
inline ChaosProfile chaos_profile(std::span<const double> x, const ProfileOptions& opts = {}) {
    detail::require_finite(x);
    if (x.size() < 2) throw SeriesTooShort("chaos_profile needs at least 2 samples");
    ChaosProfile p;
    const std::size_t n = x.size();
    p.degraded = n < kFullProfileLength;

    const auto stats = detail::descriptors_unchecked(x);
    p[Slot::Mean] = stats.mean;
    p[Slot::Variance] = stats.variance;
    p[Slot::CoeffVariation] = stats.coeff_variation;
    p[Slot::AutocorrLag1] = stats.autocorr_lag1;
    p[Slot::Skewness] = stats.skewness;
    p[Slot::Kurtosis] = stats.kurtosis;
    p[Slot::SpectralEnergy] = stats.spectral_energy;
    p[Slot::TrendStrength] = stats.trend_strength;
    p[Slot::SeasonalStrength] = stats.seasonal_strength;

    const std::size_t m = opts.embed_dim;
    std::size_t tau = opts.delay ? opts.delay : default_delay(x);
    if (m > 1) tau = std::min(tau, (n - 2) / (m - 1));
    std::optional<DelayEmbedding> emb;
    if (tau >= 1 && n >= (m - 1) * tau + 2) emb = delay_embed(x, m, tau);

    if (!p.degraded && emb) {
        try {
            p[Slot::Lyapunov] = largest_lyapunov(x, m, tau);
        } catch (const Error&) {
            p[Slot::Lyapunov] = 0.0;
            p.degraded = true;
        }
        try {
            p[Slot::CorrDimension] = correlation_dimension(*emb);
        } catch (const Error&) {
            p[Slot::CorrDimension] = 0.0;
            p.degraded = true;
        }
        try {
            p[Slot::BoxDimension] = box_counting_dimension(*emb);
        } catch (const Error&) {
            p[Slot::BoxDimension] = 0.0;
            p.degraded = true;
        }
    } else if (!emb) {
        p.degraded = true;
    }
    if (detail::is_constant(x)) p.degraded = true;

    p[Slot::Hurst] = 0.5;
    if (n >= 64) {
        try {
            p[Slot::Hurst] = hurst_exponent(x);
        } catch (const Error&) {
            p.degraded = true;
        }
    }

    if (n >= 2 * opts.entropy_m + 2) p[Slot::SampleEntropy] = sample_entropy(x, opts.entropy_m, opts.entropy_r_factor);

    if (emb) {
        const double eps = opts.recurrence_eps_fraction * embedding_diameter(*emb);
        const auto rec = detail::recurrence_unchecked(*emb, eps);
        p[Slot::RecurrenceRate] = rec.recurrence_rate;
        p[Slot::Determinism] = rec.determinism;
    }
    return p;
}

/// Per-slot standardisation statistics for profile_distance.
struct ProfileScaling {
    std::array<double, kProfileDim> mean{};
    std::array<double, kProfileDim> scale{};

    static ProfileScaling identity() {
        ProfileScaling s;
        s.scale.fill(1.0);
        return s;
    }
};

/// Weighted Euclidean distance between z-scored profiles (a pseudometric for w >= 0).
inline double profile_distance(const ChaosProfile& a, const ChaosProfile& b, std::span<const double> weights,
                               const ProfileScaling& scaling = ProfileScaling::identity()) {
    if (weights.size() != kProfileDim) {
        throw ShapeMismatch("profile_distance: expected 20 weights, got " + std::to_string(weights.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < kProfileDim; ++i) {
        if (weights[i] < 0.0) throw DegenerateSeries("profile_distance: negative weight");
        const double sc = scaling.scale[i] > 0.0 ? scaling.scale[i] : 1.0;
        const double d = (a.slots[i] - b.slots[i]) / sc;
        s += weights[i] * d * d;
    }
    return std::sqrt(s);
}

inline double profile_distance(const ChaosProfile& a, const ChaosProfile& b) {
    std::array<double, kProfileDim> w;
    w.fill(1.0);
    return profile_distance(a, b, w);
}

// -- JSON -------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const ChaosProfile& p) {
    nlohmann::ordered_json j;
    for (std::size_t i = 0; i < kProfileDim; ++i) j[std::string(kSlotNames[i])] = p.slots[i];
    j["regime"] = std::string(to_string(regime_of(p)));
    j["degraded"] = p.degraded;
    return j;
}

inline ChaosProfile profile_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw FormatError("profile JSON must be an object");
    ChaosProfile p;
    for (std::size_t i = 0; i < kProfileDim; ++i) {
        const std::string key(kSlotNames[i]);
        auto it = j.find(key);
        if (it == j.end()) throw FormatError("profile JSON is missing slot '" + key + "'");
        if (!it->is_number()) throw FormatError("profile slot '" + key + "' is not a number");
        p.slots[i] = it->get<double>();
    }
    if (auto it = j.find("degraded"); it != j.end() && it->is_boolean()) p.degraded = it->get<bool>();
    return p;
}

}  // namespace castckt::nlts
