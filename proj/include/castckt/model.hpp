#pragma once

// Full forecaster: per-node multi-scale temporal encoder, adaptive graph over
// the nodes' last-step states, and the multi-horizon uncertainty heads.

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "castckt/data.hpp"
#include "castckt/forecast.hpp"
#include "castckt/graph.hpp"
#include "castckt/nlts.hpp"
#include "castckt/temporal.hpp"
#include "castckt/tensor.hpp"

namespace castckt {

struct ModelConfig {
    std::size_t seq_len = 12;
    std::size_t horizon = 12;
    std::size_t in_features = data::kInputFeatures;
    std::size_t hidden = 16;
    std::size_t heads = 8;
    std::size_t depth = 2;
    std::size_t embed = 16;
    std::size_t out_features = 16;
    std::size_t head_hidden = 16;
    /// 0 selects min(8, N - 1) at run time.
    std::size_t neighbours = 0;

    temporal::EncoderConfig encoder() const { return {in_features, hidden, seq_len, depth, heads}; }
    graph::GraphConfig graph() const { return {hidden, embed, out_features}; }
    /// Heads read the graph output next to the node's own last temporal state.
    forecast::HeadConfig head() const { return {out_features + hidden, head_hidden, horizon}; }
};

template <class Rng>
ParamRegistry init_model(const ModelConfig& cfg, Rng& rng) {
    ParamRegistry P;
    temporal::init_encoder(P, "enc", cfg.encoder(), rng);
    graph::init(P, "graph", cfg.graph(), rng);
    forecast::init(P, "head", cfg.head(), rng);
    return P;
}

/// Per-slot z-scoring of chaos profiles, fitted on the training stream.
struct ProfileNormalizer {
    std::array<double, nlts::kProfileDim> mean{};
    std::array<double, nlts::kProfileDim> scale{};

    static ProfileNormalizer identity() {
        ProfileNormalizer n;
        n.scale.fill(1.0);
        return n;
    }

    /// Slots with spread below 1e-6 keep unit scale so they map to 0.
    static ProfileNormalizer fit(const std::vector<nlts::ChaosProfile>& profiles) {
        ProfileNormalizer n = identity();
        if (profiles.empty()) return n;
        const double count = static_cast<double>(profiles.size());
        for (std::size_t s = 0; s < nlts::kProfileDim; ++s) {
            double mu = 0.0;
            for (const auto& p : profiles) mu += p.slots[s];
            mu /= count;
            double var = 0.0;
            for (const auto& p : profiles) var += (p.slots[s] - mu) * (p.slots[s] - mu);
            const double sd = std::sqrt(var / count);
            n.mean[s] = mu;
            n.scale[s] = sd > 1e-6 ? sd : 1.0;
        }
        return n;
    }

    std::array<double, nlts::kProfileDim> apply(const std::array<double, nlts::kProfileDim>& raw) const {
        std::array<double, nlts::kProfileDim> out{};
        for (std::size_t s = 0; s < nlts::kProfileDim; ++s) out[s] = (raw[s] - mean[s]) / scale[s];
        return out;
    }
};

struct ModelOutput {
    forecast::ForecastWithUncertainty forecast;  // [B,N,H]
    graph::LearnedAdjacency adjacency;
    std::array<Tensor, 4> branches;  // [B*N,T,d]
};

struct ForwardOptions {
    /// Additive [N,N] locality mask for the local node attention; null = unrestricted.
    const Tensor* local_mask = nullptr;
    std::mt19937_64* rng = nullptr;
    double dropout = 0.0;
};

/// X [B,N,T,F], C [B,20] (already normalised).
inline ModelOutput forward(const Tensor& X, const Tensor& C, const ParamRegistry& P, const ModelConfig& cfg,
                           const ForwardOptions& opt = {}) {
    if (X.rank() != 4 || C.rank() != 2 || C.dim(0) != X.dim(0) || C.dim(1) != nlts::kProfileDim) {
        throw ShapeMismatch("forward: X " + shape_str(X.shape()) + ", C " + shape_str(C.shape()));
    }
    const std::size_t B = X.dim(0), N = X.dim(1), T = X.dim(2), F = X.dim(3);
    const std::size_t d = cfg.hidden;
    Tensor x = reshape(X, {B * N, T, F});
    Tensor c_nodes = reshape(broadcast_to(reshape(C, {B, 1, nlts::kProfileDim}), {B, N, nlts::kProfileDim}),
                             {B * N, nlts::kProfileDim});
    auto enc = temporal::encode(x, c_nodes, P, "enc", cfg.encoder(), opt.rng, opt.dropout);
    Tensor x_s = reshape(slice(enc.h_t, 1, T - 1, 1), {B, N, d});

    auto emb = graph::encode_nodes(x_s, C, P, "graph");
    auto ref = graph::refine(emb, opt.local_mask, P, "graph");
    const std::size_t k = cfg.neighbours ? std::min(cfg.neighbours, N > 1 ? N - 1 : 1) : graph::default_k(N);
    auto adj = graph::build_adjacency(ref.e_r, C, std::max<std::size_t>(k, 1), P, "graph");
    Tensor z = graph::gcn_layer(adj.weights, ref.e_r, P, "graph");
    if (opt.rng && opt.dropout > 0.0) z = dropout(z, opt.dropout, *opt.rng);

    ModelOutput out;
    out.forecast = forecast::predict(concat({z, x_s}, -1), C, P, "head");
    out.adjacency = std::move(adj);
    out.branches = enc.branches;
    return out;
}

/// Locality mask for a city, or nothing when coordinates are unknown.
inline std::optional<Tensor> city_mask(const std::optional<data::Coords>& coords) {
    if (!coords || coords->size() < 2) return std::nullopt;
    const double r = graph::default_radius(*coords);
    if (!(r > 0.0) || !std::isfinite(r)) return std::nullopt;
    return graph::local_mask(*coords, r);
}

}  // namespace castckt
