#pragma once

// Sensor tables, CSV ingestion, preprocessing (interpolation, robust scaling,
// Gaussian-kernel adjacency, spectral normalisation, physics features, sliding
// windows) and synthetic dynamical-system generators.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "castckt/errors.hpp"

namespace castckt::data {

using Coords = std::vector<std::array<double, 2>>;

/// Readings stored row-major: readings[t * N + i].
struct SensorTable {
    std::vector<std::string> ids;
    std::vector<std::string> timestamps;
    std::vector<double> readings;
    std::size_t steps = 0;
    double interval_minutes = 5.0;
    std::optional<Coords> coords;
    /// Pairwise distances N x N row-major, +inf for unknown pairs.
    std::optional<std::vector<double>> distances;

    std::size_t nodes() const { return ids.size(); }
    double at(std::size_t t, std::size_t i) const { return readings[t * nodes() + i]; }
    std::vector<double> column(std::size_t i) const {
        std::vector<double> c(steps);
        for (std::size_t t = 0; t < steps; ++t) c[t] = at(t, i);
        return c;
    }
};

// -- number formatting / parsing ---------------------------------------------

/// Shortest representation that round-trips exactly.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    if (s.empty()) return std::nullopt;
    if (s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

inline bool is_missing_token(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.back() == ' ')) s = s.front() == ' ' ? s.substr(1) : s.substr(0, s.size() - 1);
    return s.empty() || s == "nan" || s == "NaN" || s == "NA" || s == "null";
}

// -- preprocessing -----------------------------------------------------------

/// Fills NaNs per sensor: linear interpolation between known neighbours,
/// nearest known value at the edges. A sensor with no values becomes all zero.
inline void interpolate_missing(std::vector<double>& readings, std::size_t steps, std::size_t nodes) {
    for (std::size_t i = 0; i < nodes; ++i) {
        std::vector<std::size_t> known;
        for (std::size_t t = 0; t < steps; ++t) {
            if (std::isfinite(readings[t * nodes + i])) known.push_back(t);
        }
        if (known.empty()) {
            for (std::size_t t = 0; t < steps; ++t) readings[t * nodes + i] = 0.0;
            continue;
        }
        for (std::size_t t = 0; t < known.front(); ++t) readings[t * nodes + i] = readings[known.front() * nodes + i];
        for (std::size_t t = known.back() + 1; t < steps; ++t) readings[t * nodes + i] = readings[known.back() * nodes + i];
        for (std::size_t k = 0; k + 1 < known.size(); ++k) {
            const std::size_t a = known[k], b = known[k + 1];
            const double va = readings[a * nodes + i], vb = readings[b * nodes + i];
            for (std::size_t t = a + 1; t < b; ++t) {
                readings[t * nodes + i] = va + (vb - va) * static_cast<double>(t - a) / static_cast<double>(b - a);
            }
        }
    }
}

/// Linear-interpolated (type 7) quantile of unsorted data.
inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw InvalidArgument("quantile of empty data");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline constexpr double kIqrFloor = 1e-6;

/// Per-sensor (x - median) / IQR.
struct RobustScaler {
    std::vector<double> median;
    std::vector<double> iqr;

    static RobustScaler fit(const std::vector<double>& readings, std::size_t steps, std::size_t nodes) {
        RobustScaler s;
        for (std::size_t i = 0; i < nodes; ++i) {
            std::vector<double> c(steps);
            for (std::size_t t = 0; t < steps; ++t) c[t] = readings[t * nodes + i];
            s.median.push_back(quantile(c, 0.5));
            s.iqr.push_back(std::max(quantile(c, 0.75) - quantile(c, 0.25), kIqrFloor));
        }
        return s;
    }

    double scale(double v, std::size_t i) const { return (v - median[i]) / iqr[i]; }
    double unscale(double v, std::size_t i) const { return v * iqr[i] + median[i]; }

    std::vector<double> transform(const std::vector<double>& readings) const {
        const std::size_t n = median.size();
        std::vector<double> out(readings.size());
        for (std::size_t k = 0; k < readings.size(); ++k) out[k] = scale(readings[k], k % n);
        return out;
    }
    std::vector<double> inverse(const std::vector<double>& scaled) const {
        const std::size_t n = median.size();
        std::vector<double> out(scaled.size());
        for (std::size_t k = 0; k < scaled.size(); ++k) out[k] = unscale(scaled[k], k % n);
        return out;
    }
};

/// Gaussian-kernel weights exp(-d^2 / sigma^2) for d <= kappa, else 0. Distances
/// are N x N row-major (+inf for unknown). Defaults: sigma = standard deviation
/// and kappa = 75th percentile of the finite off-diagonal distances.
inline std::vector<double> gaussian_adjacency(const std::vector<double>& dist, std::size_t N,
                                              std::optional<double> sigma = {}, std::optional<double> kappa = {}) {
    if (dist.size() != N * N) throw ShapeMismatch("distance table is not N x N");
    std::vector<double> finite;
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < N; ++j) {
            if (i != j && std::isfinite(dist[i * N + j])) finite.push_back(dist[i * N + j]);
        }
    }
    double s = sigma.value_or(0.0), k = kappa.value_or(0.0);
    if (!sigma || !kappa) {
        if (finite.empty()) {
            s = sigma.value_or(1.0);
            k = kappa.value_or(0.0);
        } else {
            double mu = 0.0;
            for (double d : finite) mu += d;
            mu /= static_cast<double>(finite.size());
            double var = 0.0;
            for (double d : finite) var += (d - mu) * (d - mu);
            if (!sigma) s = std::sqrt(var / static_cast<double>(finite.size()));
            if (!kappa) k = quantile(finite, 0.75);
        }
    }
    if (!(s > 0.0)) s = 1.0;
    std::vector<double> A(N * N, 0.0);
    for (std::size_t i = 0; i < N * N; ++i) {
        const double d = dist[i];
        if (d <= k || d == 0.0) A[i] = std::exp(-d * d / (s * s));
    }
    return A;
}

/// D^-1/2 A D^-1/2; rows with zero degree stay zero.
inline std::vector<double> spectral_normalize(const std::vector<double>& A, std::size_t N) {
    std::vector<double> dinv(N, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < N; ++j) s += A[i * N + j];
        dinv[i] = s > 0.0 ? 1.0 / std::sqrt(s) : 0.0;
    }
    std::vector<double> out(N * N);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < N; ++j) out[i * N + j] = dinv[i] * A[i * N + j] * dinv[j];
    }
    return out;
}

inline std::vector<double> coords_to_distances(const Coords& c) {
    const std::size_t N = c.size();
    std::vector<double> d(N * N);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < N; ++j) d[i * N + j] = std::hypot(c[i][0] - c[j][0], c[i][1] - c[j][1]);
    }
    return d;
}

inline constexpr std::size_t kPhysicsFeatures = 4;
inline constexpr std::size_t kVarianceWindow = 12;

/// P[t][i] = (degree, rolling variance, neighbour influence, temporal gradient),
/// returned as T x N x 4 row-major.
///
/// degree = row sum of A; variance = population variance of the last 12
/// samples (fewer at the start); influence = (A x_t)_i; gradient = x_t - x_{t-1}
/// with 0 at t = 0.
inline std::vector<double> physics_features(const std::vector<double>& x, std::size_t T, std::size_t N,
                                            const std::vector<double>& A) {
    if (x.size() != T * N || A.size() != N * N) throw ShapeMismatch("physics_features: inconsistent sizes");
    std::vector<double> P(T * N * kPhysicsFeatures, 0.0);
    std::vector<double> degree(N, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < N; ++j) degree[i] += A[i * N + j];
    }
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t lo = t + 1 >= kVarianceWindow ? t + 1 - kVarianceWindow : 0;
        for (std::size_t i = 0; i < N; ++i) {
            double* p = &P[(t * N + i) * kPhysicsFeatures];
            p[0] = degree[i];
            double mu = 0.0;
            for (std::size_t s = lo; s <= t; ++s) mu += x[s * N + i];
            mu /= static_cast<double>(t - lo + 1);
            double var = 0.0;
            for (std::size_t s = lo; s <= t; ++s) var += (x[s * N + i] - mu) * (x[s * N + i] - mu);
            p[1] = var / static_cast<double>(t - lo + 1);
            double infl = 0.0;
            for (std::size_t j = 0; j < N; ++j) infl += A[i * N + j] * x[t * N + j];
            p[2] = infl;
            p[3] = t == 0 ? 0.0 : x[t * N + i] - x[(t - 1) * N + i];
        }
    }
    return P;
}

/// One sliding-window sample. x: L x N x F row-major, y: H x N row-major.
struct SeriesWindow {
    std::size_t start = 0;
    std::vector<double> x;
    std::vector<double> y;
};

inline std::size_t window_count(std::size_t T, std::size_t L, std::size_t H, std::size_t stride) {
    if (stride == 0) throw InvalidArgument("window stride must be positive");
    if (T < L + H) return 0;
    return (T - L - H) / stride + 1;
}

/// features: T x N x F row-major; targets: T x N row-major.
inline std::vector<SeriesWindow> windows(const std::vector<double>& features, const std::vector<double>& targets,
                                         std::size_t T, std::size_t N, std::size_t F, std::size_t L, std::size_t H,
                                         std::size_t stride = 1) {
    if (features.size() != T * N * F || targets.size() != T * N) throw ShapeMismatch("windows: inconsistent sizes");
    const std::size_t count = window_count(T, L, H, stride);
    std::vector<SeriesWindow> out(count);
    for (std::size_t w = 0; w < count; ++w) {
        const std::size_t s = w * stride;
        out[w].start = s;
        out[w].x.assign(features.begin() + static_cast<std::ptrdiff_t>(s * N * F),
                        features.begin() + static_cast<std::ptrdiff_t>((s + L) * N * F));
        out[w].y.assign(targets.begin() + static_cast<std::ptrdiff_t>((s + L) * N),
                        targets.begin() + static_cast<std::ptrdiff_t>((s + L + H) * N));
    }
    return out;
}

// -- prepared cities ---------------------------------------------------------

inline constexpr std::size_t kInputFeatures = 1 + kPhysicsFeatures;

/// A scaled, windowed city ready for the model.
struct CityData {
    std::string name;
    std::size_t nodes = 0;
    std::size_t seq_len = 12;
    std::size_t horizon = 12;
    std::size_t steps = 0;
    RobustScaler scaler;
    std::vector<double> scaled;  // T x N
    std::optional<Coords> coords;
    std::vector<SeriesWindow> windows;
};

/// Interpolates, scales, builds the static graph (distances, else coordinates,
/// else no edges) and windows the city. Channel 0 of every window is the scaled
/// reading; channels 1..4 are the physics features.
inline CityData prepare_city(const SensorTable& table, std::size_t L, std::size_t H, std::size_t stride = 1,
                             const RobustScaler* scaler = nullptr) {
    const std::size_t N = table.nodes(), T = table.steps;
    if (T < L + H) {
        throw InvalidArgument("sensor table has " + std::to_string(T) + " steps, need at least L + H = " +
                              std::to_string(L + H));
    }
    std::vector<double> raw = table.readings;
    interpolate_missing(raw, T, N);
    CityData c;
    c.nodes = N;
    c.seq_len = L;
    c.horizon = H;
    c.steps = T;
    c.coords = table.coords;
    c.scaler = scaler ? *scaler : RobustScaler::fit(raw, T, N);
    c.scaled = c.scaler.transform(raw);

    std::vector<double> A(N * N, 0.0);
    if (table.distances) {
        A = spectral_normalize(gaussian_adjacency(*table.distances, N), N);
    } else if (table.coords) {
        A = spectral_normalize(gaussian_adjacency(coords_to_distances(*table.coords), N), N);
    }
    const auto P = physics_features(c.scaled, T, N, A);
    std::vector<double> feats(T * N * kInputFeatures);
    for (std::size_t k = 0; k < T * N; ++k) {
        feats[k * kInputFeatures] = c.scaled[k];
        for (std::size_t f = 0; f < kPhysicsFeatures; ++f) feats[k * kInputFeatures + 1 + f] = P[k * kPhysicsFeatures + f];
    }
    c.windows = windows(feats, c.scaled, T, N, kInputFeatures, L, H, stride);
    return c;
}

// -- CSV I/O -------------------------------------------------------------------

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open '" + path + "'");
    return in;
}

/// Header `timestamp,<sensor_id>...`; one row per step. Empty/nan cells are
/// missing and get interpolated by prepare_city.
inline SensorTable read_readings_csv(const std::string& path) {
    auto in = open_input(path);
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path + ": empty file");
    auto header = split_csv_line(line);
    if (header.size() < 2 || header[0] != "timestamp") throw FormatError(path + ": header must start with 'timestamp,'");
    SensorTable t;
    t.ids.assign(header.begin() + 1, header.end());
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        auto cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw FormatError(path + ":" + std::to_string(row) + ": expected " + std::to_string(header.size()) + " fields");
        }
        t.timestamps.push_back(cells[0]);
        for (std::size_t i = 1; i < cells.size(); ++i) {
            if (is_missing_token(cells[i])) {
                t.readings.push_back(std::numeric_limits<double>::quiet_NaN());
                continue;
            }
            auto v = parse_double(cells[i]);
            if (!v) throw FormatError(path + ":" + std::to_string(row) + ": bad number '" + cells[i] + "'");
            t.readings.push_back(*v);
        }
        ++t.steps;
    }
    return t;
}

inline void write_readings_csv(std::ostream& out, const SensorTable& t) {
    out << "timestamp";
    for (const auto& id : t.ids) out << ',' << id;
    out << '\n';
    for (std::size_t s = 0; s < t.steps; ++s) {
        out << (s < t.timestamps.size() ? t.timestamps[s] : std::to_string(s));
        for (std::size_t i = 0; i < t.nodes(); ++i) out << ',' << format_double(t.at(s, i));
        out << '\n';
    }
}

inline std::unordered_map<std::string, std::size_t> id_index(const std::vector<std::string>& ids) {
    std::unordered_map<std::string, std::size_t> m;
    for (std::size_t i = 0; i < ids.size(); ++i) m[ids[i]] = i;
    return m;
}

/// `from,to,distance_meters`; unknown pairs are +inf, the diagonal 0.
inline std::vector<double> read_distances_csv(const std::string& path, const std::vector<std::string>& ids) {
    auto in = open_input(path);
    const std::size_t N = ids.size();
    std::vector<double> d(N * N, std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < N; ++i) d[i * N + i] = 0.0;
    const auto idx = id_index(ids);
    std::string line;
    std::getline(in, line);
    if (split_csv_line(line) != std::vector<std::string>{"from", "to", "distance_meters"}) {
        throw FormatError(path + ": header must be 'from,to,distance_meters'");
    }
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        auto c = split_csv_line(line);
        auto v = c.size() == 3 ? parse_double(c[2]) : std::nullopt;
        if (!v || *v < 0.0) throw FormatError(path + ":" + std::to_string(row) + ": malformed distance row");
        auto a = idx.find(c[0]), b = idx.find(c[1]);
        if (a == idx.end() || b == idx.end()) continue;
        d[a->second * N + b->second] = *v;
    }
    return d;
}

/// `sensor_id,x,y`, reordered to match `ids`.
inline Coords read_coords_csv(const std::string& path, const std::vector<std::string>& ids) {
    auto in = open_input(path);
    const auto idx = id_index(ids);
    Coords c(ids.size(), {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()});
    std::string line;
    std::getline(in, line);
    if (split_csv_line(line) != std::vector<std::string>{"sensor_id", "x", "y"}) {
        throw FormatError(path + ": header must be 'sensor_id,x,y'");
    }
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        auto cells = split_csv_line(line);
        auto x = cells.size() == 3 ? parse_double(cells[1]) : std::nullopt;
        auto y = cells.size() == 3 ? parse_double(cells[2]) : std::nullopt;
        if (!x || !y) throw FormatError(path + ":" + std::to_string(row) + ": malformed coordinate row");
        if (auto it = idx.find(cells[0]); it != idx.end()) c[it->second] = {*x, *y};
    }
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (!std::isfinite(c[i][0])) throw FormatError(path + ": no coordinates for sensor '" + ids[i] + "'");
    }
    return c;
}

inline void write_coords_csv(std::ostream& out, const SensorTable& t) {
    out << "sensor_id,x,y\n";
    if (!t.coords) return;
    for (std::size_t i = 0; i < t.nodes(); ++i) {
        out << t.ids[i] << ',' << format_double((*t.coords)[i][0]) << ',' << format_double((*t.coords)[i][1]) << '\n';
    }
}

// -- generators --------------------------------------------------------------

/// x <- r x (1 - x), n iterates after x0 (x0 itself is not emitted).
inline std::vector<double> logistic(double r, double x0, std::size_t n) {
    std::vector<double> out(n);
    double x = x0;
    for (std::size_t i = 0; i < n; ++i) {
        x = r * x * (1.0 - x);
        out[i] = x;
    }
    return out;
}

struct LorenzParams {
    double sigma = 10.0;
    double rho = 28.0;
    double beta = 8.0 / 3.0;
    double dt = 0.01;
    std::size_t burn_in = 1000;
    std::array<double, 3> start = {1.0, 1.0, 1.0};
};

inline std::array<double, 3> lorenz_rhs(const std::array<double, 3>& s, const LorenzParams& p) {
    return {p.sigma * (s[1] - s[0]), s[0] * (p.rho - s[2]) - s[1], s[0] * s[1] - p.beta * s[2]};
}

inline std::array<double, 3> rk4_step(const std::array<double, 3>& s, const LorenzParams& p) {
    auto add = [](const std::array<double, 3>& a, const std::array<double, 3>& b, double h) {
        return std::array<double, 3>{a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]};
    };
    const auto k1 = lorenz_rhs(s, p);
    const auto k2 = lorenz_rhs(add(s, k1, p.dt / 2), p);
    const auto k3 = lorenz_rhs(add(s, k2, p.dt / 2), p);
    const auto k4 = lorenz_rhs(add(s, k3, p.dt), p);
    std::array<double, 3> out;
    for (int i = 0; i < 3; ++i) out[i] = s[i] + p.dt / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
    return out;
}

/// Full states after the burn-in, fixed-step RK4.
inline std::vector<std::array<double, 3>> lorenz_states(std::size_t n, const LorenzParams& p = {}) {
    auto s = p.start;
    for (std::size_t i = 0; i < p.burn_in; ++i) s = rk4_step(s, p);
    std::vector<std::array<double, 3>> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        s = rk4_step(s, p);
        out[i] = s;
    }
    return out;
}

/// x-component of the Lorenz trajectory.
inline std::vector<double> lorenz(std::size_t n, const LorenzParams& p = {}) {
    std::vector<double> out(n);
    const auto states = lorenz_states(n, p);
    for (std::size_t i = 0; i < n; ++i) out[i] = states[i][0];
    return out;
}

/// x_t = phi x_{t-1} + N(0, sigma^2), x_{-1} = 0.
inline std::vector<double> ar1(double phi, double sigma, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> eps(0.0, sigma);
    std::vector<double> out(n);
    double x = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        x = phi * x + eps(rng);
        out[i] = x;
    }
    return out;
}

/// sin(2 pi t / period) + N(0, noise^2).
inline std::vector<double> sine(double period, double noise, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> eps(0.0, 1.0);
    std::vector<double> out(n);
    for (std::size_t t = 0; t < n; ++t) {
        out[t] = std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / period);
        if (noise > 0.0) out[t] += noise * eps(rng);
    }
    return out;
}

// -- synthetic cities ----------------------------------------------------------

enum class CityRegime { Regular, WeakChaotic, Chaotic };

inline std::string_view to_string(CityRegime r) {
    switch (r) {
        case CityRegime::Regular:
            return "regular";
        case CityRegime::WeakChaotic:
            return "weak";
        case CityRegime::Chaotic:
            return "chaotic";
    }
    return "regular";
}

inline std::optional<CityRegime> parse_city_regime(std::string_view s) {
    if (s == "regular") return CityRegime::Regular;
    if (s == "weak") return CityRegime::WeakChaotic;
    if (s == "chaotic") return CityRegime::Chaotic;
    return std::nullopt;
}

struct CityOptions {
    std::size_t nodes = 4;
    std::size_t steps = 600;
    double period = 24.0;
    /// Scales the phase offsets between sensors; distinguishes cities of one regime.
    double phase_spread = 1.0;
};

/// Amplitude of the chaotic component for each regime.
inline double chaos_amplitude(CityRegime r) {
    switch (r) {
        case CityRegime::Regular:
            return 0.0;
        case CityRegime::WeakChaotic:
            return 0.5;
        case CityRegime::Chaotic:
            return 1.2;
    }
    return 0.0;
}

/// Sensors on a ring; each reads a daily-like sinusoid (sensor-specific phase
/// and level) plus a logistic-map (r = 4) component whose amplitude sets the
/// regime, plus small observation noise. Neighbouring sensors share part of the
/// chaotic drive.
inline SensorTable synthetic_city(CityRegime regime, const CityOptions& opt, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.02);
    const std::size_t N = opt.nodes, T = opt.steps;
    SensorTable t;
    t.steps = T;
    t.coords = Coords(N);
    std::vector<double> phase(N), level(N), state(N);
    for (std::size_t i = 0; i < N; ++i) {
        t.ids.push_back("s" + std::to_string(i));
        const double ang = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(N);
        (*t.coords)[i] = {100.0 * std::cos(ang), 100.0 * std::sin(ang)};
        phase[i] = opt.phase_spread * 2.0 * std::numbers::pi * u01(rng) * 0.25;
        level[i] = 1.0 + 0.2 * u01(rng);
        state[i] = 0.1 + 0.8 * u01(rng);
    }
    const double amp = chaos_amplitude(regime);
    t.readings.resize(T * N);
    std::vector<double> drive(N);
    for (std::size_t s = 0; s < T; ++s) {
        t.timestamps.push_back(std::to_string(s));
        for (std::size_t i = 0; i < N; ++i) state[i] = 4.0 * state[i] * (1.0 - state[i]);
        for (std::size_t i = 0; i < N; ++i) {
            const double nb = state[(i + 1) % N];
            drive[i] = 0.8 * (state[i] - 0.5) + 0.2 * (nb - 0.5);
        }
        for (std::size_t i = 0; i < N; ++i) {
            const double base = level[i] + 0.5 * std::sin(2.0 * std::numbers::pi * static_cast<double>(s) / opt.period + phase[i]);
            t.readings[s * N + i] = base + amp * drive[i] + noise(rng);
        }
    }
    return t;
}

}  // namespace castckt::data
