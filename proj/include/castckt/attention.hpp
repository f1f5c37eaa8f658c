#pragma once

// Chaos-aware attention: QKV projections modulated by the chaos profile, a
// multiplicative gate G(C) and an additive bias B(C) on the logits, and a
// residual output. Also the constructive realisation of a target pattern.

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <string>

#include "castckt/errors.hpp"
#include "castckt/nlts.hpp"
#include "castckt/tensor.hpp"

namespace castckt::attention {

inline constexpr std::size_t kProfileDim = nlts::kProfileDim;
inline constexpr std::size_t kDefaultHeads = 8;

/// Parameters under `prefix`: w_base [d,3d], w_cond [20,3d], w_g [20,T],
/// w_b [20,T], w_o [d,d].
template <class Rng>
void init(ParamRegistry& P, const std::string& prefix, std::size_t d, std::size_t T, Rng& rng) {
    P.add_glorot(prefix + ".w_base", {d, 3 * d}, rng);
    P.add_glorot(prefix + ".w_cond", {kProfileDim, 3 * d}, rng);
    P.add_glorot(prefix + ".w_g", {kProfileDim, T}, rng);
    P.add_glorot(prefix + ".w_b", {kProfileDim, T}, rng);
    P.add_glorot(prefix + ".w_o", {d, d}, rng);
    // Start close to plain attention: small modulation of the projections.
    for (double& v : P.at(prefix + ".w_cond").mutable_data()) v *= 0.1;
}

struct QKV {
    Tensor q, k, v;
};

/// H [B,T,d], C [B,20]. Q|K|V = (H W_base) * (1 + C W_cond), i.e. a per-column
/// (FiLM) rescaling of the base projection.
inline QKV project_qkv(const Tensor& H, const Tensor& C, const ParamRegistry& P, const std::string& prefix) {
    const Tensor& w_base = P.at(prefix + ".w_base");
    if (H.rank() != 3 || C.rank() != 2 || C.dim(0) != H.dim(0) || H.dim(2) != w_base.dim(0)) {
        throw ShapeMismatch("project_qkv: H " + shape_str(H.shape()) + ", C " + shape_str(C.shape()) + ", w_base " +
                            shape_str(w_base.shape()));
    }
    const std::size_t B = H.dim(0), d = H.dim(2);
    Tensor base = matmul(H, w_base);
    Tensor scale = reshape(matmul(C, P.at(prefix + ".w_cond")) + 1.0, {B, 1, 3 * d});
    Tensor qkv = base * scale;
    return {slice(qkv, -1, 0, d), slice(qkv, -1, d, d), slice(qkv, -1, 2 * d, d)};
}

struct GateBias {
    Tensor gate;  // [B,T,T], entries in (0,1)
    Tensor bias;  // [B,T,T], symmetric
};

/// G = sigmoid(g g^T) with g = C W_g; B = u 1^T + 1 u^T with u = C W_b.
inline GateBias gate_and_bias(const Tensor& C, const ParamRegistry& P, const std::string& prefix) {
    const std::size_t B = C.dim(0);
    Tensor g = matmul(C, P.at(prefix + ".w_g"));
    Tensor u = matmul(C, P.at(prefix + ".w_b"));
    const std::size_t T = g.dim(1);
    Tensor gate = sigmoid(matmul(reshape(g, {B, T, 1}), reshape(g, {B, 1, T})));
    Tensor bias = reshape(u, {B, T, 1}) + reshape(u, {B, 1, T});
    return {gate, bias};
}

/// [B,T,d] -> [B,h,T,d/h]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
    const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    if (d % heads != 0) {
        throw ShapeMismatch("model width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    }
    return permute(reshape(x, {B, T, heads, d / heads}), {0, 2, 1, 3});
}

/// [B,h,T,dk] -> [B,T,h*dk]
inline Tensor merge_heads(const Tensor& x) {
    const std::size_t B = x.dim(0), h = x.dim(1), T = x.dim(2), dk = x.dim(3);
    return reshape(permute(x, {0, 2, 1, 3}), {B, T, h * dk});
}

/// softmax((Q K^T / sqrt(d_k)) * G + B) per head. Q, K: [B,T,d]; G, B: [B,T,T].
inline Tensor attention_weights(const Tensor& Q, const Tensor& K, const Tensor& G, const Tensor& Bias, std::size_t heads) {
    const std::size_t B = Q.dim(0), T = Q.dim(1);
    Tensor qh = split_heads(Q, heads);
    Tensor kh = split_heads(K, heads);
    const double dk = static_cast<double>(qh.dim(3));
    Tensor scores = matmul(qh, transpose(kh)) / std::sqrt(dk);
    Tensor logits = scores * reshape(G, {B, 1, T, T}) + reshape(Bias, {B, 1, T, T});
    return softmax(logits, -1);
}

struct AttentionOutput {
    Tensor output;   // [B,T,d]
    Tensor weights;  // [B,h,T,T]
};

/// H_att = concat_h(A_h V_h) W_o + H.
inline AttentionOutput chaos_attention(const Tensor& H, const Tensor& C, const ParamRegistry& P, const std::string& prefix,
                                       std::size_t heads = kDefaultHeads) {
    auto [q, k, v] = project_qkv(H, C, P, prefix);
    auto [gate, bias] = gate_and_bias(C, P, prefix);
    if (gate.dim(1) != H.dim(1)) {
        throw ShapeMismatch("chaos_attention: gate built for T=" + std::to_string(gate.dim(1)) + ", input has T=" +
                            std::to_string(H.dim(1)));
    }
    Tensor A = attention_weights(q, k, gate, bias, heads);
    Tensor attended = merge_heads(matmul(A, split_heads(v, heads)));
    return {matmul(attended, P.at(prefix + ".w_o")) + H, A};
}

// -- constructive realisation of a target pattern ----------------------------

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct RealizedPattern {
    Matrix w_q;  // [d, d_k]
    Matrix w_k;  // [d, d_k]
    Vector gate_logit;  // g, with G = sigmoid(g g^T)
    Vector bias;        // u, with B = u 1^T + 1 u^T
    Matrix attention;   // pattern produced by the parameters above
    /// ||A - A*||_F of the produced pattern.
    double error = 0.0;
    /// Error when Q K^T carries only the symmetric part of the target logits
    /// and the skew part is left to the bias alone.
    double symmetric_only_error = 0.0;
};

namespace detail {

inline Matrix row_softmax(const Matrix& L) {
    Matrix A(L.rows(), L.cols());
    for (Eigen::Index i = 0; i < L.rows(); ++i) {
        const double mx = L.row(i).maxCoeff();
        A.row(i) = (L.row(i).array() - mx).exp().matrix();
        A.row(i) /= A.row(i).sum();
    }
    return A;
}

inline Matrix pattern_from(const Matrix& H, const Matrix& w_q, const Matrix& w_k, const Vector& g, const Vector& u) {
    const double dk = static_cast<double>(w_q.cols());
    const Matrix Q = H * w_q, K = H * w_k;
    const Eigen::Index T = H.rows();
    Matrix G = (g * g.transpose()).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    Matrix Bm = u * Vector::Ones(T).transpose() + Vector::Ones(T) * u.transpose();
    return row_softmax((Q * K.transpose() / std::sqrt(dk)).cwiseProduct(G) + Bm);
}

/// Factors S (T x T) as Q K^T / sqrt(d_k) with Q, K of width d_k >= T, via SVD.
inline std::pair<Matrix, Matrix> factor_logits(const Matrix& S, std::size_t dk) {
    const Eigen::Index T = S.rows();
    Eigen::JacobiSVD<Matrix> svd(S, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vector root = svd.singularValues().cwiseSqrt() * std::pow(static_cast<double>(dk), 0.25);
    Matrix Q = Matrix::Zero(T, static_cast<Eigen::Index>(dk));
    Matrix K = Matrix::Zero(T, static_cast<Eigen::Index>(dk));
    Q.leftCols(T) = svd.matrixU() * root.asDiagonal();
    K.leftCols(T) = svd.matrixV() * root.asDiagonal();
    return {Q, K};
}

}  // namespace detail

/// Builds single-head parameters whose attention reproduces `target`.
///
/// Log-target logits are split into symmetric and skew parts. The skew part
/// is fitted in least squares by w_i - w_j (w = row means of the skew part); the
/// bias u 1^T + 1 u^T contributes u_j per column after dropping the row
/// constant u_i, so u = -w. Q K^T / sqrt(d_k) carries the symmetric part plus
/// any skew residual the bias cannot express (d_k >= T makes any T x T logit
/// matrix reachable). The gate is saturated so G is all ones.
inline RealizedPattern realize_target_pattern(const Matrix& target, const Matrix& H, std::size_t dk = 8) {
    const Eigen::Index T = target.rows();
    if (target.cols() != T || H.rows() != T) {
        throw ShapeMismatch("realize_target_pattern: target " + std::to_string(target.rows()) + "x" +
                            std::to_string(target.cols()) + ", H " + std::to_string(H.rows()) + "x" + std::to_string(H.cols()));
    }
    if (dk < static_cast<std::size_t>(T)) throw ShapeMismatch("realize_target_pattern needs d_k >= T");
    if ((target.array() <= 0.0).any()) throw DegenerateSeries("realize_target_pattern: target entries must be positive");
    for (Eigen::Index i = 0; i < T; ++i) {
        if (std::abs(target.row(i).sum() - 1.0) > 1e-9) throw DegenerateSeries("realize_target_pattern: target rows must sum to 1");
    }
    Eigen::JacobiSVD<Matrix> hsvd(H, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector sv = hsvd.singularValues();
    if (H.cols() < T || sv.minCoeff() <= 1e-10 * std::max(sv.maxCoeff(), 1e-300)) {
        throw RankDeficient("realize_target_pattern: H rows are linearly dependent");
    }

    Matrix L = target.array().log().matrix();
    L.colwise() -= L.rowwise().mean();
    const Matrix sym = 0.5 * (L + L.transpose());
    const Matrix skew = 0.5 * (L - L.transpose());
    const Vector w = skew.rowwise().mean();
    const Vector ones = Vector::Ones(T);
    const Matrix skew_fit = w * ones.transpose() - ones * w.transpose();

    RealizedPattern out;
    out.bias = -w;
    out.gate_logit = Vector::Constant(T, 10.0);  // sigmoid(100) == 1 in double precision
    const Matrix Hpinv = H.completeOrthogonalDecomposition().pseudoInverse();

    {
        auto [Qs, Ks] = detail::factor_logits(sym, dk);
        const Matrix A = detail::pattern_from(H, Hpinv * Qs, Hpinv * Ks, out.gate_logit, out.bias);
        out.symmetric_only_error = (A - target).norm();
    }

    auto [Q, K] = detail::factor_logits(sym + (skew - skew_fit), dk);
    out.w_q = Hpinv * Q;
    out.w_k = Hpinv * K;
    out.attention = detail::pattern_from(H, out.w_q, out.w_k, out.gate_logit, out.bias);
    out.error = (out.attention - target).norm();
    return out;
}

}  // namespace castckt::attention
