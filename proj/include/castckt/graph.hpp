#pragma once

// Adaptive graph learning: node and chaos embeddings, local/global node
// attention, a chaos-aware pairwise scorer producing a sparse symmetric
// adjacency, and one normalised graph convolution.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "castckt/errors.hpp"
#include "castckt/nlts.hpp"
#include "castckt/tensor.hpp"

namespace castckt::graph {

inline constexpr std::size_t kDefaultMaxNeighbours = 8;
inline constexpr double kMaskedLogit = -1e9;

struct GraphConfig {
    std::size_t in_features = 16;  // d_s
    std::size_t embed = 16;        // d_e (also the scorer's hidden width)
    std::size_t out_features = 16;  // d_z
};

template <class Rng>
void init(ParamRegistry& P, const std::string& prefix, const GraphConfig& cfg, Rng& rng) {
    const std::size_t de = cfg.embed;
    P.add_glorot(prefix + ".w_n", {cfg.in_features, de}, rng);
    P.add_constant(prefix + ".b_n", {de}, 0.0);
    P.add_glorot(prefix + ".w_c", {nlts::kProfileDim, de}, rng);
    P.add_constant(prefix + ".b_c", {de}, 0.0);
    P.add_glorot(prefix + ".attn.wq", {de, de}, rng);
    P.add_glorot(prefix + ".attn.wk", {de, de}, rng);
    P.add_glorot(prefix + ".attn.wv", {de, de}, rng);
    P.add_glorot(prefix + ".adj.u1", {de, de}, rng);
    P.add_glorot(prefix + ".adj.u2", {de, de}, rng);
    P.add_glorot(prefix + ".adj.u3", {nlts::kProfileDim, de}, rng);
    P.add_constant(prefix + ".adj.b", {de}, 0.0);
    P.add_glorot(prefix + ".adj.m", {de, 1}, rng);
    P.add_glorot(prefix + ".gcn.w_z", {de, cfg.out_features}, rng);
}

struct NodeEmbeddings {
    Tensor e_n;  // [B,N,d_e]
    Tensor e_c;  // [B,N,d_e], identical rows
};

/// E_n = ReLU(X_s W_n + b_n); E_c = tanh(C W_c + b_c) tiled over the N nodes.
inline NodeEmbeddings encode_nodes(const Tensor& X_s, const Tensor& C, const ParamRegistry& P, const std::string& prefix) {
    const Tensor& w_n = P.at(prefix + ".w_n");
    if (X_s.rank() != 3 || C.rank() != 2 || C.dim(0) != X_s.dim(0) || X_s.dim(2) != w_n.dim(0)) {
        throw ShapeMismatch("encode_nodes: X_s " + shape_str(X_s.shape()) + ", C " + shape_str(C.shape()) + ", w_n " +
                            shape_str(w_n.shape()));
    }
    const std::size_t B = X_s.dim(0), N = X_s.dim(1), de = w_n.dim(1);
    Tensor e_n = relu(matmul(X_s, w_n) + P.at(prefix + ".b_n"));
    Tensor ctx = tanh(matmul(C, P.at(prefix + ".w_c")) + P.at(prefix + ".b_c"));
    return {e_n, broadcast_to(reshape(ctx, {B, 1, de}), {B, N, de})};
}

/// 30th percentile of the pairwise coordinate distances (infinite with < 2 nodes).
inline double default_radius(const std::vector<std::array<double, 2>>& coords) {
    std::vector<double> d;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        for (std::size_t j = i + 1; j < coords.size(); ++j) {
            d.push_back(std::hypot(coords[i][0] - coords[j][0], coords[i][1] - coords[j][1]));
        }
    }
    if (d.empty()) return std::numeric_limits<double>::infinity();
    std::sort(d.begin(), d.end());
    const double pos = 0.3 * static_cast<double>(d.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, d.size() - 1);
    return d[lo] + (pos - static_cast<double>(lo)) * (d[hi] - d[lo]);
}

/// Additive [N,N] logit mask: 0 where the nodes are within `radius`, a large
/// negative value elsewhere. A node always sees itself, so a node without
/// neighbours degrades to self-attention.
inline Tensor local_mask(const std::vector<std::array<double, 2>>& coords, double radius) {
    if (!(radius > 0.0)) throw InvalidArgument("local attention radius must be positive");
    const std::size_t N = coords.size();
    std::vector<double> m(N * N, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < N; ++j) {
            const double d = std::hypot(coords[i][0] - coords[j][0], coords[i][1] - coords[j][1]);
            if (i != j && d > radius) m[i * N + j] = kMaskedLogit;
        }
    }
    return Tensor::from({N, N}, std::move(m));
}

/// Single-head attention across nodes; `mask` is an optional additive [N,N] term.
inline Tensor node_attention(const Tensor& E, const Tensor* mask, const ParamRegistry& P, const std::string& prefix) {
    Tensor q = matmul(E, P.at(prefix + ".attn.wq"));
    Tensor k = matmul(E, P.at(prefix + ".attn.wk"));
    Tensor v = matmul(E, P.at(prefix + ".attn.wv"));
    Tensor logits = matmul(q, transpose(k)) / std::sqrt(static_cast<double>(E.dim(-1)));
    if (mask) logits = logits + *mask;
    return matmul(softmax(logits, -1), v);
}

struct Refined {
    Tensor e_l, e_g, e_r;
};

/// E_r = LayerNorm(E_l + E_g + E_c). The same attention weights serve both
/// branches; only the local branch is masked. `mask` null means no locality
/// information (infinite radius).
inline Refined refine(const NodeEmbeddings& emb, const Tensor* mask, const ParamRegistry& P, const std::string& prefix) {
    Refined r;
    r.e_g = node_attention(emb.e_n, nullptr, P, prefix);
    r.e_l = mask ? node_attention(emb.e_n, mask, P, prefix) : node_attention(emb.e_n, nullptr, P, prefix);
    r.e_r = layer_norm(r.e_l + r.e_g + emb.e_c, -1);
    return r;
}

struct LearnedAdjacency {
    Tensor scores;   // [B,N,N] sigmoid scores before masking (diagonal included)
    Tensor weights;  // [B,N,N] final symmetric sparse adjacency, zero diagonal
    Tensor mask;     // [B,N,N] 0/1 constant
    std::size_t k = 0;
};

inline std::size_t default_k(std::size_t N) { return N == 0 ? 0 : std::min(kDefaultMaxNeighbours, N - 1); }

/// A_ij = sigmoid(e_i . e_j + m^T ReLU(U1^T e_i + U2^T e_j + U3^T C + b)).
///
/// The diagonal is dropped (self-loops are added by the convolution), the
/// matrix is symmetrised by elementwise max, each row keeps its k largest
/// entries, and an edge survives only if both endpoints kept it. The result is
/// exactly symmetric with at most k nonzeros per row.
inline LearnedAdjacency build_adjacency(const Tensor& E_r, const Tensor& C, std::size_t k, const ParamRegistry& P,
                                        const std::string& prefix) {
    if (k == 0 && E_r.dim(1) > 1) throw InvalidArgument("build_adjacency: k must be at least 1");
    const std::size_t B = E_r.dim(0), N = E_r.dim(1);
    const std::size_t h = P.at(prefix + ".adj.u1").dim(1);
    Tensor pi = reshape(matmul(E_r, P.at(prefix + ".adj.u1")), {B, N, 1, h});
    Tensor pj = reshape(matmul(E_r, P.at(prefix + ".adj.u2")), {B, 1, N, h});
    Tensor pc = reshape(matmul(C, P.at(prefix + ".adj.u3")) + P.at(prefix + ".adj.b"), {B, 1, 1, h});
    Tensor f = reshape(matmul(relu(pi + pj + pc), P.at(prefix + ".adj.m")), {B, N, N});
    Tensor scores = sigmoid(matmul(E_r, transpose(E_r)) + f);

    std::vector<double> off(N * N, 1.0);
    for (std::size_t i = 0; i < N; ++i) off[i * N + i] = 0.0;
    Tensor offdiag = scores * Tensor::from({N, N}, std::move(off));
    Tensor sym = maximum(offdiag, transpose(offdiag));

    const Tensor row_mask = top_k_mask(sym, k, -1);
    std::vector<double> mutual(row_mask.numel());
    auto rm = row_mask.data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < N; ++i) {
            for (std::size_t j = 0; j < N; ++j) {
                mutual[(b * N + i) * N + j] = rm[(b * N + i) * N + j] * rm[(b * N + j) * N + i];
            }
        }
    }
    Tensor mask = Tensor::from({B, N, N}, std::move(mutual));
    return {scores, sym * mask, mask, k};
}

/// D^-1/2 (A + I) D^-1/2 with D the row sums of A + I. A: [B,N,N].
inline Tensor normalized_adjacency(const Tensor& A) {
    const std::size_t N = A.dim(-1);
    std::vector<double> eye(N * N, 0.0);
    for (std::size_t i = 0; i < N; ++i) eye[i * N + i] = 1.0;
    Tensor at = A + Tensor::from({N, N}, std::move(eye));
    Tensor dinv = pow(sum(at, -1, true), -0.5);  // [B,N,1]
    return at * dinv * transpose(dinv);
}

/// Z = ReLU(D^-1/2 (A + I) D^-1/2 E_r W_z).
inline Tensor gcn_layer(const Tensor& A, const Tensor& E_r, const ParamRegistry& P, const std::string& prefix) {
    if (A.rank() != 3 || E_r.rank() != 3 || A.dim(0) != E_r.dim(0) || A.dim(1) != E_r.dim(1) || A.dim(2) != E_r.dim(1)) {
        throw ShapeMismatch("gcn_layer: A " + shape_str(A.shape()) + ", E_r " + shape_str(E_r.shape()));
    }
    return relu(matmul(normalized_adjacency(A), matmul(E_r, P.at(prefix + ".gcn.w_z"))));
}

}  // namespace castckt::graph
