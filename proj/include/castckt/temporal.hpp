#pragma once

// Multi-scale temporal encoder: mean-pooled views of the input at factors
// 1/2/4/8, one LSTM per view, spline upsampling back to full length,
// projection of the concatenated branches, then a stack of chaos-aware
// attention blocks.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "castckt/attention.hpp"
#include "castckt/errors.hpp"
#include "castckt/tensor.hpp"

namespace castckt::temporal {

inline constexpr std::array<std::size_t, 4> kFactors = {1, 2, 4, 8};

// -- resampling --------------------------------------------------------------

inline std::size_t pooled_length(std::size_t T, std::size_t k) { return (T + k - 1) / k; }

/// [ceil(T/k), T] averaging matrix; the ragged last window averages what it has.
inline Tensor pooling_matrix(std::size_t T, std::size_t k) {
    if (k == 0) throw ShapeMismatch("downsample factor must be positive");
    const std::size_t L = pooled_length(T, k);
    std::vector<double> m(L * T, 0.0);
    for (std::size_t i = 0; i < L; ++i) {
        const std::size_t lo = i * k, hi = std::min(T, lo + k);
        for (std::size_t t = lo; t < hi; ++t) m[i * T + t] = 1.0 / static_cast<double>(hi - lo);
    }
    return Tensor::from({L, T}, std::move(m));
}

/// Non-overlapping mean pooling along the time axis of x [..., T, d].
inline Tensor downsample(const Tensor& x, std::size_t k) {
    if (x.rank() < 2) throw ShapeMismatch("downsample needs [..., T, d], got " + shape_str(x.shape()));
    if (k == 1) return x;
    return matmul(pooling_matrix(x.dim(-2), k), x);
}

/// Centres of the pooling windows, in input sample coordinates.
inline std::vector<double> pooled_centres(std::size_t T, std::size_t k) {
    std::vector<double> c;
    for (std::size_t lo = 0; lo < T; lo += k) {
        const std::size_t hi = std::min(T, lo + k);
        c.push_back(0.5 * static_cast<double>(lo + hi - 1));
    }
    return c;
}

/// Interpolation matrix W [targets, knots] of the not-a-knot cubic spline, so
/// that W y evaluates the spline through (knots, y) at `targets`. Outside the
/// knot range the end pieces are continued. 1 knot gives a constant, 2 a line,
/// 3 the interpolating parabola. Not-a-knot ends reproduce cubics exactly.
inline std::vector<double> spline_weights(const std::vector<double>& knots, const std::vector<double>& targets) {
    const auto L = static_cast<Eigen::Index>(knots.size());
    const std::size_t T = targets.size();
    std::vector<double> W(T * knots.size(), 0.0);
    if (L == 0) throw ShapeMismatch("spline needs at least one knot");
    if (L == 1) {
        for (std::size_t j = 0; j < T; ++j) W[j] = 1.0;
        return W;
    }
    // Second derivatives M = S y, solved for all unit vectors y at once.
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(L, L);
    if (L >= 3) {
        Eigen::MatrixXd A = Eigen::MatrixXd::Zero(L, L);
        Eigen::MatrixXd R = Eigen::MatrixXd::Zero(L, L);
        std::vector<double> h(static_cast<std::size_t>(L - 1));
        for (Eigen::Index i = 0; i + 1 < L; ++i) h[i] = knots[i + 1] - knots[i];
        for (Eigen::Index i = 1; i + 1 < L; ++i) {
            A(i, i - 1) = h[i - 1];
            A(i, i) = 2.0 * (h[i - 1] + h[i]);
            A(i, i + 1) = h[i];
            R(i, i + 1) += 6.0 / h[i];
            R(i, i) -= 6.0 / h[i] + 6.0 / h[i - 1];
            R(i, i - 1) += 6.0 / h[i - 1];
        }
        if (L == 3) {
            // Single parabola: constant second derivative.
            A(0, 0) = 1.0;
            A(0, 1) = -1.0;
            A(2, 2) = 1.0;
            A(2, 1) = -1.0;
        } else {
            // Continuous third derivative at the second and second-to-last knots.
            A(0, 0) = -1.0 / h[0];
            A(0, 1) = 1.0 / h[0] + 1.0 / h[1];
            A(0, 2) = -1.0 / h[1];
            const Eigen::Index n = L - 1;
            A(n, n - 2) = -1.0 / h[n - 2];
            A(n, n - 1) = 1.0 / h[n - 2] + 1.0 / h[n - 1];
            A(n, n) = -1.0 / h[n - 1];
        }
        S = A.fullPivLu().solve(R);
    }
    for (std::size_t j = 0; j < T; ++j) {
        const double t = targets[j];
        Eigen::Index i = 0;
        while (i + 2 < L && t > knots[i + 1]) ++i;
        const double x0 = knots[i], x1 = knots[i + 1], hh = x1 - x0;
        const double a = x1 - t, b = t - x0;
        for (Eigen::Index c = 0; c < L; ++c) {
            const double y0 = c == i ? 1.0 : 0.0, y1 = c == i + 1 ? 1.0 : 0.0;
            const double m0 = S(i, c), m1 = S(i + 1, c);
            W[j * knots.size() + c] = m0 * a * a * a / (6.0 * hh) + m1 * b * b * b / (6.0 * hh) +
                                      (y0 / hh - m0 * hh / 6.0) * a + (y1 / hh - m1 * hh / 6.0) * b;
        }
    }
    return W;
}

/// Spline through L uniformly spaced samples evaluated at T uniformly spaced
/// positions spanning the same interval (endpoints coincide). y: [..., L, d].
inline Tensor spline_upsample(const Tensor& y, std::size_t T) {
    const std::size_t L = y.dim(-2);
    std::vector<double> knots(L), targets(T);
    for (std::size_t i = 0; i < L; ++i) knots[i] = static_cast<double>(i);
    for (std::size_t j = 0; j < T; ++j) {
        targets[j] = T == 1 ? 0.0 : static_cast<double>(j) * static_cast<double>(L - 1) / static_cast<double>(T - 1);
    }
    return matmul(Tensor::from({T, L}, spline_weights(knots, targets)), y);
}

/// Upsamples the output of downsample(., k) back to T steps: knots sit at the
/// pooling-window centres, so constants and linear trends survive the round trip.
inline Tensor upsample_pooled(const Tensor& y, std::size_t T, std::size_t k) {
    if (k == 1) return y;
    std::vector<double> targets(T);
    for (std::size_t j = 0; j < T; ++j) targets[j] = static_cast<double>(j);
    const auto centres = pooled_centres(T, k);
    if (centres.size() != y.dim(-2)) {
        throw ShapeMismatch("upsample_pooled: " + shape_str(y.shape()) + " is not a factor-" + std::to_string(k) +
                            " pooling of length " + std::to_string(T));
    }
    return matmul(Tensor::from({T, centres.size()}, spline_weights(centres, targets)), y);
}

// -- LSTM --------------------------------------------------------------------

/// w_x [F,4H], w_h [H,4H], b [4H]; gate order i, f, g, o; forget bias starts at 1.
template <class Rng>
void init_lstm(ParamRegistry& P, const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng) {
    P.add_glorot(prefix + ".w_x", {in, 4 * hidden}, rng);
    P.add_glorot(prefix + ".w_h", {hidden, 4 * hidden}, rng);
    Tensor& b = P.add_constant(prefix + ".b", {4 * hidden}, 0.0);
    for (std::size_t j = hidden; j < 2 * hidden; ++j) b.mutable_data()[j] = 1.0;
}

struct RecurrentCellState {
    Tensor h;  // [B,H]
    Tensor c;  // [B,H]
};

/// One step given the precomputed input projection x_t W_x [B,4H].
inline RecurrentCellState lstm_step(const Tensor& x_proj, const RecurrentCellState& s, const ParamRegistry& P,
                                    const std::string& prefix) {
    const std::size_t H = s.h.dim(1);
    Tensor z = x_proj + matmul(s.h, P.at(prefix + ".w_h")) + P.at(prefix + ".b");
    Tensor i = sigmoid(slice(z, 1, 0, H));
    Tensor f = sigmoid(slice(z, 1, H, H));
    Tensor g = tanh(slice(z, 1, 2 * H, H));
    Tensor o = sigmoid(slice(z, 1, 3 * H, H));
    Tensor c = f * s.c + i * g;
    return {o * tanh(c), c};
}

/// x [B,T,F] -> hidden states [B,T,H], starting from zero state.
inline Tensor lstm_encode(const Tensor& x, const ParamRegistry& P, const std::string& prefix) {
    const Tensor& w_x = P.at(prefix + ".w_x");
    if (x.rank() != 3 || x.dim(2) != w_x.dim(0)) {
        throw ShapeMismatch("lstm_encode: input " + shape_str(x.shape()) + " vs w_x " + shape_str(w_x.shape()));
    }
    const std::size_t B = x.dim(0), T = x.dim(1), H = P.at(prefix + ".w_h").dim(0);
    Tensor proj = matmul(x, w_x);
    RecurrentCellState s{Tensor::zeros({B, H}), Tensor::zeros({B, H})};
    std::vector<Tensor> hs;
    hs.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        s = lstm_step(reshape(slice(proj, 1, t, 1), {B, 4 * H}), s, P, prefix);
        hs.push_back(reshape(s.h, {B, 1, H}));
    }
    return concat(hs, 1);
}

// -- fusion and encoder ------------------------------------------------------

/// H_concat = [H_s | H_m | H_l | H_v] W_p + b_p.
inline Tensor fuse_scales(const std::array<Tensor, 4>& branches, const ParamRegistry& P, const std::string& prefix) {
    for (const auto& b : branches) {
        if (b.shape() != branches[0].shape()) {
            throw ShapeMismatch("fuse_scales: " + shape_str(branches[0].shape()) + " vs " + shape_str(b.shape()));
        }
    }
    Tensor cat = concat({branches[0], branches[1], branches[2], branches[3]}, -1);
    const Tensor& w = P.at(prefix + ".w_p");
    if (cat.dim(-1) != w.dim(0)) throw ShapeMismatch("fuse_scales: " + shape_str(cat.shape()) + " x " + shape_str(w.shape()));
    return matmul(cat, w) + P.at(prefix + ".b_p");
}

struct EncoderConfig {
    std::size_t in_features = 5;
    std::size_t hidden = 16;
    std::size_t seq_len = 12;
    std::size_t depth = 2;
    std::size_t heads = attention::kDefaultHeads;
};

template <class Rng>
void init_encoder(ParamRegistry& P, const std::string& prefix, const EncoderConfig& cfg, Rng& rng) {
    const std::size_t d = cfg.hidden;
    for (std::size_t k : kFactors) init_lstm(P, prefix + ".lstm" + std::to_string(k), cfg.in_features, d, rng);
    P.add_glorot(prefix + ".fuse.w_p", {4 * d, d}, rng);
    P.add_constant(prefix + ".fuse.b_p", {d}, 0.0);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const std::string b = prefix + ".block" + std::to_string(l);
        attention::init(P, b + ".attn", d, cfg.seq_len, rng);
        P.add_glorot(b + ".ffn.w1", {d, 4 * d}, rng);
        P.add_constant(b + ".ffn.b1", {4 * d}, 0.0);
        P.add_glorot(b + ".ffn.w2", {4 * d, d}, rng);
        P.add_constant(b + ".ffn.b2", {d}, 0.0);
    }
}

struct EncoderOutput {
    Tensor h_t;                     // [B,T,d]
    Tensor h_concat;                // [B,T,d]
    std::array<Tensor, 4> branches;  // upsampled LSTM outputs per factor, pre-fusion
};

/// x [B,T,F] (one row per sensor node), C [B,20].
///
/// Each block: H <- LN(chaos_attention(H)); H <- LN(H + FFN(H)), FFN width 4d.
/// `rng`/`dropout` enable inverted dropout on the sublayer outputs (training only).
inline EncoderOutput encode(const Tensor& x, const Tensor& C, const ParamRegistry& P, const std::string& prefix,
                            const EncoderConfig& cfg, std::mt19937_64* rng = nullptr, double drop = 0.0) {
    if (x.rank() != 3 || x.dim(1) != cfg.seq_len || x.dim(2) != cfg.in_features) {
        throw ShapeMismatch("encode: input " + shape_str(x.shape()) + " vs expected [B," + std::to_string(cfg.seq_len) +
                            "," + std::to_string(cfg.in_features) + "]");
    }
    const std::size_t T = cfg.seq_len;
    EncoderOutput out;
    for (std::size_t s = 0; s < kFactors.size(); ++s) {
        const std::size_t k = kFactors[s];
        Tensor h = lstm_encode(downsample(x, k), P, prefix + ".lstm" + std::to_string(k));
        out.branches[s] = upsample_pooled(h, T, k);
    }
    out.h_concat = fuse_scales(out.branches, P, prefix + ".fuse");
    Tensor H = out.h_concat;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const std::string b = prefix + ".block" + std::to_string(l);
        Tensor att = attention::chaos_attention(H, C, P, b + ".attn", cfg.heads).output;
        if (rng && drop > 0.0) att = H + dropout(att - H, drop, *rng);  // keep the residual path intact
        Tensor h1 = layer_norm(att);
        Tensor ff = matmul(relu(matmul(h1, P.at(b + ".ffn.w1")) + P.at(b + ".ffn.b1")), P.at(b + ".ffn.w2")) +
                    P.at(b + ".ffn.b2");
        if (rng && drop > 0.0) ff = dropout(ff, drop, *rng);
        H = layer_norm(h1 + ff);
    }
    out.h_t = H;
    return out;
}

}  // namespace castckt::temporal
