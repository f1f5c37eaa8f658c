// Acceptance checks. One PASS/FAIL line per criterion; exit status is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "castckt/model.hpp"
#include "castckt/train.hpp"
#include "cities.hpp"
#include "graph_fit.hpp"
#include "support.hpp"

using namespace castckt;
using castckt::testing::grad_check;
using castckt::testing::GradCheck;
using castckt::testing::random_projection;
using castckt::testing::random_tensor;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) pass = false;
        if (!detail.empty()) detail += "; ";
        detail += (ok ? "" : "FAILED ") + what;
    }
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// -- 1 ----------------------------------------------------------------------------

// Template counting over all ordered pairs, written independently of the library.
double brute_sample_entropy(const std::vector<double>& x, std::size_t m, double r) {
    const std::size_t n = x.size() - m;
    double A = 0, B = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            double d = 0.0;
            for (std::size_t l = 0; l < m; ++l) d = std::max(d, std::abs(x[i + l] - x[j + l]));
            if (d <= r) B += 0.5;
            if (std::max(d, std::abs(x[i + m] - x[j + m])) <= r) A += 0.5;
        }
    }
    return A == 0 ? std::log(B + 1.0) : -std::log(A / B);
}

Outcome dynamics_oracles() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    const double lam = nlts::largest_lyapunov(data::logistic(4.0, 0.3, 10000));
    o.require(lam >= 0.593 && lam <= 0.793, fmt("lyapunov(logistic) %.4f", lam));

    std::mt19937_64 rng(3);
    std::normal_distribution<double> z(0.0, 1.0);
    std::vector<double> noise(8192);
    for (double& v : noise) v = z(rng);
    const double H = nlts::hurst_exponent(noise);
    o.require(H >= 0.4 && H <= 0.6, fmt("hurst(iid) %.4f", H));

    const double D2 = nlts::correlation_dimension(nlts::delay_embed(data::lorenz(50000), 3, 10));
    o.require(D2 >= 1.76 && D2 <= 2.36, fmt("corr_dim(lorenz) %.4f", D2));

    std::mt19937_64 srng(11);
    std::uniform_int_distribution<int> len(6, 32), level(0, 4);
    std::uniform_real_distribution<double> cont(0.0, 1.0);
    int exact = 0;
    for (int c = 0; c < 200; ++c) {
        std::vector<double> x(static_cast<std::size_t>(len(srng)));
        // Half the cases use coarse levels (many exact ties), half continuous values.
        for (double& v : x) v = c % 2 ? level(srng) : cont(srng);
        const double r = c % 2 ? 0.5 + (c % 3) : 0.1 + 0.05 * (c % 5);
        exact += nlts::sample_entropy(x, 2, r) == brute_sample_entropy(x, 2, r);
    }
    o.require(exact == 200, fmt("sample_entropy exact %.0f/200", exact));
    const double secs = seconds_since(t0);
    o.require(secs < 120.0, fmt("%.1fs", secs));
    return o;
}

// -- 2 ----------------------------------------------------------------------------

struct GradTally {
    std::size_t suites = 0, failed_suites = 0, coords = 0, failed_coords = 0;
    std::string worst;

    void add(const std::string& name, const GradCheck& g) {
        ++suites;
        coords += g.checked;
        failed_coords += g.failed;
        if (!g.ok()) {
            ++failed_suites;
            worst += " " + name + "(" + g.worst_at + ")";
        }
    }
};

std::vector<Tensor> params_with_prefix(ParamRegistry& P, const std::string& prefix) {
    std::vector<Tensor> out;
    for (auto& [name, t] : P)
        if (name.rfind(prefix, 0) == 0) out.push_back(t);
    return out;
}

Outcome gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    GradTally tally;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        std::mt19937_64 rng(1000 + seed);
        auto a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng), r = random_tensor({3}, rng);
        auto pos = random_tensor({2, 3}, rng, 0.5, 2.0);
        auto c3 = random_tensor({2, 3, 4}, rng), m = random_tensor({4, 2}, rng), bm = random_tensor({2, 4, 3}, rng);
        auto p = [seed](const Tensor& t) { return random_projection(t, seed); };
        tally.add("add", grad_check({a, b}, [&] { return p(a + b); }));
        tally.add("sub", grad_check({a, r}, [&] { return p(a - r); }));
        tally.add("mul", grad_check({a, b}, [&] { return p(a * b); }));
        tally.add("div", grad_check({a, pos}, [&] { return p(a / pos); }));
        tally.add("maximum", grad_check({a, b}, [&] { return p(maximum(a, b)); }));
        tally.add("relu", grad_check({a}, [&] { return p(relu(a)); }));
        tally.add("tanh", grad_check({a}, [&] { return p(tanh(a)); }));
        tally.add("sigmoid", grad_check({a}, [&] { return p(sigmoid(a)); }));
        tally.add("exp", grad_check({a}, [&] { return p(exp(a)); }));
        tally.add("log", grad_check({pos}, [&] { return p(log(pos)); }));
        tally.add("pow", grad_check({pos}, [&] { return p(pow(pos, -0.5)); }));
        tally.add("sqrt", grad_check({pos}, [&] { return p(sqrt(pos)); }));
        tally.add("square", grad_check({a}, [&] { return p(square(a)); }));
        tally.add("abs", grad_check({a}, [&] { return p(abs(a)); }));
        tally.add("clamp", grad_check({a}, [&] { return p(clamp(a, -0.5, 0.5)); }));
        tally.add("reshape", grad_check({a}, [&] { return p(reshape(a, {3, 2})); }));
        tally.add("broadcast", grad_check({r}, [&] { return p(broadcast_to(r, {4, 3})); }));
        tally.add("transpose", grad_check({a}, [&] { return p(transpose(a)); }));
        tally.add("permute", grad_check({c3}, [&] { return p(permute(c3, {2, 0, 1})); }));
        tally.add("concat", grad_check({a, b}, [&] { return p(concat({a, b}, 0)); }));
        tally.add("slice", grad_check({a}, [&] { return p(slice(a, 1, 1, 2)); }));
        tally.add("sum", grad_check({c3}, [&] { return p(sum(c3, 1)); }));
        tally.add("mean", grad_check({c3}, [&] { return p(mean(c3, 2, true)); }));
        tally.add("softmax", grad_check({c3}, [&] { return p(softmax(c3, -1)); }));
        tally.add("layer_norm", grad_check({c3}, [&] { return p(layer_norm(c3, -1)); }));
        tally.add("matmul", grad_check({c3, m}, [&] { return p(matmul(c3, m)); }));
        tally.add("bmm", grad_check({c3, bm}, [&] { return p(matmul(c3, bm)); }));

        // Model components on one small instance: N = 4, T = 8, d_h = 8.
        const std::size_t B = 1, N = 4, T = 8, d = 8;
        ModelConfig cfg{T, 4, data::kInputFeatures, d, 2, 1, 8, 8, 8, 2};
        ParamRegistry P = init_model(cfg, rng);
        for (double& w : P.at("head.w_omega").mutable_data()) w = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
        auto X = random_tensor({B, N, T, data::kInputFeatures}, rng);
        auto C = random_tensor({B, nlts::kProfileDim}, rng);
        auto x = reshape(X, {B * N, T, data::kInputFeatures});
        auto cn = random_tensor({B * N, nlts::kProfileDim}, rng);
        auto h = random_tensor({B * N, T, d}, rng);
        auto with = [&](std::vector<Tensor> extra, const std::string& prefix) {
            auto ps = params_with_prefix(P, prefix);
            extra.insert(extra.end(), ps.begin(), ps.end());
            return extra;
        };
        // ReLU kinks: a 1e-4 stencil can straddle them, so model-level checks use 1e-6.
        const double hs = 1e-6;
        tally.add("downsample", grad_check({x}, [&] { return p(temporal::downsample(x, 2)); }));
        tally.add("spline_upsample",
                  grad_check({x}, [&] { return p(temporal::upsample_pooled(temporal::downsample(x, 4), T, 4)); }));
        tally.add("lstm", grad_check(with({x}, "enc.lstm2."), [&] { return p(temporal::lstm_encode(x, P, "enc.lstm2")); }));
        std::array<Tensor, 4> br{h, h * 0.5, tanh(h), h * h};
        tally.add("fuse_scales", grad_check(with({}, "enc.fuse."), [&] { return p(temporal::fuse_scales(br, P, "enc.fuse")); }));
        tally.add("chaos_attention",
                  grad_check(with({h, cn}, "enc.block0.attn."),
                             [&] { return p(attention::chaos_attention(h, cn, P, "enc.block0.attn", 2).output); }));
        tally.add("encode", grad_check(with({x, cn}, "enc."),
                                       [&] { return p(temporal::encode(x, cn, P, "enc", cfg.encoder()).h_t); }, hs));
        auto xs = random_tensor({B, N, d}, rng);
        tally.add("graph", grad_check(with({xs, C}, "graph."),
                                      [&] {
                                          auto emb = graph::encode_nodes(xs, C, P, "graph");
                                          auto ref = graph::refine(emb, nullptr, P, "graph");
                                          auto adj = graph::build_adjacency(ref.e_r, C, 2, P, "graph");
                                          return p(graph::gcn_layer(adj.weights, ref.e_r, P, "graph")) +
                                                 random_projection(adj.weights, seed + 1);
                                      },
                                      hs));
        auto z = random_tensor({B, N, cfg.head().in_features}, rng);
        auto Y = random_tensor({B, N, cfg.horizon}, rng);
        tally.add("forecast", grad_check(with({z, C}, "head."),
                                         [&] {
                                             auto f = forecast::predict(z, C, P, "head");
                                             return forecast::gaussian_nll(Y, f.mean, f.variance) + p(f.mean);
                                         },
                                         hs));
        const std::vector<train::Profile> profiles{train::Profile{}};
        tally.add("composite", grad_check(with({X, C}, ""),
                                          [&] {
                                              auto out = forward(X, C, P, cfg);
                                              return train::composite_loss(Y, out.forecast, &out.adjacency.weights,
                                                                           profiles, {1e-4, 1e-4, 1.0, 1e-2})
                                                  .total;
                                          },
                                          hs));
    }
    Outcome o;
    o.require(tally.failed_suites == 0,
              fmt("%.0f suites, %.0f/%.0f coordinates within 1e-3", double(tally.suites),
                  double(tally.coords - tally.failed_coords), double(tally.coords)) +
                  tally.worst);
    const double secs = seconds_since(t0);
    o.require(secs < 300.0, fmt("%.1fs", secs));
    return o;
}

// -- 3 ----------------------------------------------------------------------------

Outcome structural_invariants() {
    Outcome o;
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<std::size_t> small(1, 6);
    constexpr int kCases = 1000;

    double att = 0.0;
    for (int c = 0; c < kCases; ++c) {
        const std::size_t T = small(rng) + 1, heads = c % 2 ? 2 : 1, d = 2 * heads;
        ParamRegistry P;
        attention::init(P, "a", d, T, rng);
        const double s = 0.2 + c % 7;
        auto out = attention::chaos_attention(random_tensor({1, T, d}, rng, -s, s),
                                              random_tensor({1, nlts::kProfileDim}, rng, -s, s), P, "a", heads);
        const auto w = out.weights.data();
        for (std::size_t r = 0; r < w.size() / T; ++r)
            att = std::max(att, std::abs(std::accumulate(w.begin() + r * T, w.begin() + (r + 1) * T, 0.0) - 1.0));
    }
    o.require(att <= 1e-6, fmt("attention rows max |sum-1| %.2e", att));

    double fus = 0.0;
    for (int c = 0; c < kCases; ++c) {
        ParamRegistry P;
        forecast::init(P, "f", {2, 2, 2}, rng);
        const double s = 0.1 + c % 13;
        P.at("f.w_omega") = random_tensor({nlts::kProfileDim, forecast::kHeads}, rng, -s, s);
        P.at("f.b_omega") = random_tensor({forecast::kHeads}, rng, -s, s);
        auto w = forecast::fusion_weights(random_tensor({2, nlts::kProfileDim}, rng, -s, s), P, "f");
        for (std::size_t b = 0; b < 2; ++b)
            fus = std::max(fus, std::abs(w.at({b, 0}) + w.at({b, 1}) + w.at({b, 2}) - 1.0));
    }
    o.require(fus <= 1e-6, fmt("fusion max |sum-1| %.2e", fus));

    int adj_bad = 0;
    for (int c = 0; c < kCases; ++c) {
        const std::size_t N = small(rng) + 2, k = 1 + c % (N - 1);
        ParamRegistry P;
        graph::init(P, "g", {4, 4, 4}, rng);
        auto A = graph::build_adjacency(random_tensor({1, N, 4}, rng, -2, 2), random_tensor({1, nlts::kProfileDim}, rng),
                                        k, P, "g")
                     .weights;
        for (std::size_t i = 0; i < N; ++i) {
            std::size_t nz = 0;
            for (std::size_t j = 0; j < N; ++j) {
                if (A.at({0, i, j}) != A.at({0, j, i})) ++adj_bad;
                nz += A.at({0, i, j}) != 0.0;
            }
            if (nz > k) ++adj_bad;
        }
    }
    o.require(adj_bad == 0, fmt("adjacency violations %.0f", adj_bad));

    double ln = 0.0;
    for (int c = 0; c < kCases; ++c) {
        const std::size_t rows = small(rng), cols = small(rng) + 1;
        const double s = 0.1 + c % 11;
        auto x = random_tensor({rows, cols}, rng, -s, s);
        auto y = layer_norm(x, -1);
        auto stats = [&](const Tensor& t, std::size_t r) {
            double mu = 0.0, var = 0.0;
            for (std::size_t j = 0; j < cols; ++j) mu += t.at({r, j}) / double(cols);
            for (std::size_t j = 0; j < cols; ++j) var += (t.at({r, j}) - mu) * (t.at({r, j}) - mu) / double(cols);
            return std::pair{mu, var};
        };
        for (std::size_t r = 0; r < rows; ++r) {
            // Rows below the variance floor are scaled by 1/sqrt(eps), not by their own spread.
            const double in_var = stats(x, r).second;
            const double want = in_var >= kLayerNormEps ? 1.0 : in_var / kLayerNormEps;
            auto [mu, var] = stats(y, r);
            ln = std::max({ln, std::abs(mu), std::abs(var - want)});
        }
    }
    o.require(ln <= 1e-6, fmt("layer_norm max stat error %.2e", ln));

    double eq = 0.0;
    for (int c = 0; c < kCases; ++c) {
        const std::size_t N = small(rng) + 1, de = 3;
        ParamRegistry P;
        graph::init(P, "g", {de, de, 4}, rng);
        std::vector<double> a(N * N, 0.0);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = i + 1; j < N; ++j) a[i * N + j] = a[j * N + i] = u(rng) < 0.5 ? 0.0 : u(rng);
        auto E = random_tensor({1, N, de}, rng);
        std::vector<std::size_t> perm(N);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<double> ap(N * N), ep(N * de);
        for (std::size_t i = 0; i < N; ++i) {
            for (std::size_t j = 0; j < N; ++j) ap[i * N + j] = a[perm[i] * N + perm[j]];
            for (std::size_t f = 0; f < de; ++f) ep[i * de + f] = E.at({0, perm[i], f});
        }
        auto Z = graph::gcn_layer(Tensor::from({1, N, N}, a), E, P, "g");
        auto Zp = graph::gcn_layer(Tensor::from({1, N, N}, ap), Tensor::from({1, N, de}, ep), P, "g");
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t f = 0; f < 4; ++f) eq = std::max(eq, std::abs(Zp.at({0, i, f}) - Z.at({0, perm[i], f})));
    }
    o.require(eq <= 1e-9, fmt("gcn permutation max error %.2e", eq));
    return o;
}

// -- 4 ----------------------------------------------------------------------------

Outcome constructive_attention() {
    using attention::Matrix;
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 1.0);
    auto rand_m = [&](Eigen::Index r, Eigen::Index c) { return Matrix(Matrix::NullaryExpr(r, c, [&] { return n(rng); })); };
    const Eigen::Index T = 6;
    double sym = 0.0, skew = 0.0, rnd = 0.0;
    for (int c = 0; c < 50; ++c) {
        Matrix S = rand_m(T, T);
        sym = std::max(sym, attention::realize_target_pattern(attention::detail::row_softmax(S + S.transpose()),
                                                              rand_m(T, 8), 8)
                                .error);
        skew = std::max(skew, attention::realize_target_pattern(attention::detail::row_softmax(S - S.transpose()),
                                                                rand_m(T, 8), 8)
                                  .error);
        // Random row-stochastic target: positive entries normalised per row.
        Matrix target = Matrix::NullaryExpr(T, T, [&] { return std::exp(n(rng)); });
        for (Eigen::Index i = 0; i < T; ++i) target.row(i) /= target.row(i).sum();
        rnd = std::max(rnd, attention::realize_target_pattern(target, rand_m(T, 8), 8).error);
    }
    Outcome o;
    o.require(sym <= 1e-6, fmt("symmetric max %.2e", sym));
    o.require(skew <= 1e-6, fmt("skew max %.2e", skew));
    o.require(rnd <= 0.05 * T, fmt("random row-stochastic max %.2e (bound %.2f)", rnd, 0.05 * T));
    return o;
}

// -- 5 ----------------------------------------------------------------------------

Outcome adjacency_fit() {
    int ok = 0;
    double worst = 0.0, steps = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        std::mt19937_64 rng(seed);
        auto target = castckt::testing::random_symmetric_target(8, rng);
        auto fit = castckt::testing::fit_adjacency(target, 8, seed);
        ok += fit.mae <= 0.05 && fit.steps <= 2000;
        worst = std::max(worst, fit.mae);
        steps = std::max(steps, double(fit.steps));
    }
    Outcome o;
    o.require(ok == 10, fmt("%.0f/10 seeds, worst MAE %.4f, most steps %.0f", ok, worst, steps));
    return o;
}

// -- 6 ----------------------------------------------------------------------------

Outcome calibration() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> ux(-1.0, 1.0);
    std::normal_distribution<double> z(0.0, 1.0);
    auto sample = [&](std::size_t m, std::vector<double>& x, std::vector<double>& y) {
        x.resize(m);
        y.resize(m);
        for (std::size_t i = 0; i < m; ++i) {
            x[i] = ux(rng);
            y[i] = std::sin(std::numbers::pi * x[i]) + (0.1 + 0.2 * std::abs(x[i])) * z(rng);
        }
    };
    std::vector<double> xt, yt, xv, yv;
    sample(20000, xt, yt);
    sample(10000, xv, yv);
    ParamRegistry P;
    forecast::init(P, "h", {1, 32, 1}, rng);
    train::AdamW opt(0.0);
    const std::size_t batch = 256;
    std::vector<std::size_t> idx(xt.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (int epoch = 0; epoch < 100; ++epoch) {
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t s = 0; s < idx.size(); s += batch) {
            const std::size_t m = std::min(batch, idx.size() - s);
            std::vector<double> bx(m), by(m);
            for (std::size_t i = 0; i < m; ++i) bx[i] = xt[idx[s + i]], by[i] = yt[idx[s + i]];
            P.zero_grad();
            auto f = forecast::predict(Tensor::from({m, 1, 1}, bx), Tensor::zeros({m, nlts::kProfileDim}), P, "h");
            backward(forecast::gaussian_nll(Tensor::from({m, 1, 1}, by), f.mean, f.variance));
            opt.step(P, 1e-3);
        }
    }
    auto f = forecast::predict(Tensor::from({xv.size(), 1, 1}, xv), Tensor::zeros({xv.size(), nlts::kProfileDim}), P, "h");
    const auto Y = Tensor::from({yv.size(), 1, 1}, yv);
    const double c95 = forecast::coverage(Y, f, 0.05), c68 = forecast::coverage(Y, f, 0.32);
    Outcome o;
    o.require(c95 >= 0.92 && c95 <= 0.97, fmt("95%% coverage %.4f", c95));
    o.require(c68 >= 0.63 && c68 <= 0.73, fmt("68%% coverage %.4f", c68));
    const double secs = seconds_since(t0);
    o.require(secs < 600.0, fmt("%.1fs", secs));
    return o;
}

// -- 7 ----------------------------------------------------------------------------

Outcome training_mechanics() {
    Outcome o;
    train::ChaosCache cache(0.5, 8);
    cache.insert({0.25, -1.0, 2.0}, nlts::ChaosProfile{});
    const bool at = cache.lookup(std::vector<double>{0.75, -1.0, 2.0}).has_value();
    const bool past = cache.lookup(std::vector<double>{std::nextafter(0.75, 1.0), -1.0, 2.0}).has_value();
    o.require(at && !past, "cache hit at exactly theta, miss one ulp beyond");

    const double eta = train::chaos_adaptive_lr(1e-3, 2.0, std::numbers::ln2 / 2.0);
    o.require(std::abs(eta - 5e-4) <= 1e-18, fmt("eta at alpha||C|| = ln2: %.17g", eta));

    std::mt19937_64 rng(7);
    double excess = -1e300;
    for (int c = 0; c < 1000; ++c) {
        ParamRegistry P;
        P.add("a", random_tensor({3, 4}, rng));
        P.add("b", random_tensor({5}, rng));
        const double s = std::pow(10.0, c % 7 - 3);
        for (auto& [_, t] : P) {
            t.zero_grad();
            auto g = t.mutable_grad();
            for (double& v : g) v = s * std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
        }
        const double tau = std::uniform_real_distribution<double>(0.01, 2.0)(rng);
        train::clip_gradients(P, tau);
        excess = std::max(excess, P.grad_norm() - tau);
    }
    o.require(excess <= 1e-9, fmt("post-clip norm - tau max %.2e", excess));

    train::Profile c{}, s{};
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = 0.1 + 0.1 * double(k);
    const double sigma = 0.3;
    std::vector<train::RunningStd> acc(1);
    for (int i = 0; i < 10000; ++i) acc[0].push(train::inject_noise(c, sigma, s, rng));
    const auto sd = acc[0].stddev();
    double worst = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k) {
        const double expect = sigma * sigma * s[k] * s[k];
        worst = std::max(worst, std::abs(sd[k] * sd[k] - expect) / expect);
    }
    o.require(worst <= 0.05, fmt("noise variance max relative error %.4f", worst));
    return o;
}

// -- 8 ----------------------------------------------------------------------------

Outcome overfit_and_transfer() {
    Outcome o;
    {
        auto city = castckt::testing::small_city(data::CityRegime::Regular, 1);
        auto tc = castckt::testing::overfit_config(500);
        tc.lr_source = 2e-3;
        ModelConfig mc;
        train::Trainer tr(mc, tc, 7);
        auto cs = train::split_city(city, 0.0);
        tr.prepare({cs});
        train::AdamW opt(tc.weight_decay);
        train::PlateauScheduler sched(tc.plateau_factor, tc.plateau_patience);
        double mae = 1e300;
        std::size_t epoch = 0;
        while (epoch < tc.epochs && mae > 0.05) {
            tr.train_epoch(cs, opt, tc.lr_source, sched.scale(), epoch);
            ++epoch;
            if (epoch % 10 == 0) mae = tr.evaluate_mae(tr.params(), cs, cs.train);
        }
        o.require(mae <= 0.05, fmt("overfit MAE %.4f after %.0f epochs", mae, double(epoch)));
    }

    int wins = 0;
    double meta_sum = 0.0, rand_sum = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        data::CityOptions opt;
        opt.steps = 200;
        auto make = [&](double spread, std::uint64_t s) {
            opt.phase_spread = spread;
            return data::prepare_city(data::synthetic_city(data::CityRegime::WeakChaotic, opt, s), 12, 12);
        };
        auto a = make(1.0, 100 + seed), b = make(2.0, 200 + seed), t = make(1.5, 300 + seed);
        ModelConfig mc;
        train::TrainConfig tc;
        tc.dropout = 0.0;
        auto sa = train::split_city(a, 0.0), sb = train::split_city(b, 0.0), st = train::split_city(t, 0.0);
        train::Trainer meta(mc, tc, seed), fresh(mc, tc, seed);
        meta.prepare({sa, sb, st});
        fresh.prepare({sa, sb, st});
        meta.meta_train({sa, sb}, 100);
        std::mt19937_64 er(seed * 77);
        auto ep = train::sample_episode(st.train, 8, 12, er);
        meta.adapt(st, ep.support, 10, 1e-3);
        fresh.adapt(st, ep.support, 10, 1e-3);
        const double m = meta.evaluate_mae(meta.params(), st, ep.query);
        const double r = fresh.evaluate_mae(fresh.params(), st, ep.query);
        wins += m < r;
        meta_sum += m;
        rand_sum += r;
    }
    o.require(wins >= 8, fmt("meta init wins %.0f/10 (mean query MAE %.4f vs %.4f)", wins, meta_sum / 10, rand_sum / 10));
    return o;
}

// -- 9 ----------------------------------------------------------------------------

Outcome regime_ordering() {
    std::array<double, 3> mae{}, var{};
    const std::array<data::CityRegime, 3> regimes{data::CityRegime::Regular, data::CityRegime::WeakChaotic,
                                                  data::CityRegime::Chaotic};
    for (std::size_t r = 0; r < 3; ++r) {
        data::CityOptions opt;
        opt.steps = 300;
        auto city = data::prepare_city(data::synthetic_city(regimes[r], opt, 1), 12, 12);
        ModelConfig mc;
        train::TrainConfig tc;
        tc.epochs = 20;
        auto fitted = train::fit({}, &city, mc, tc, 1);
        train::Trainer ev(mc, tc, 1);
        ev.params().assign_values(fitted.params);
        ev.set_normalizer(fitted.normalizer);
        auto cs = train::split_city(city, tc.val_fraction);
        mae[r] = ev.evaluate_mae(ev.params(), cs, cs.val);
        var[r] = ev.evaluate_variance(cs, cs.val);
    }
    Outcome o;
    o.require(mae[0] < mae[1] && mae[1] < mae[2], fmt("MAE regular %.4f < weak %.4f < chaotic %.4f", mae[0], mae[1], mae[2]));
    o.require(var[2] > var[0], fmt("fused variance chaotic %.4f > regular %.4f", var[2], var[0]));
    return o;
}

// -- 10 ---------------------------------------------------------------------------

Outcome determinism() {
    auto run = [] {
        auto city = castckt::testing::small_city(data::CityRegime::WeakChaotic, 5, 40);
        ModelConfig mc;
        train::TrainConfig tc;
        tc.epochs = 4;
        std::ostringstream os;
        train::write_history_csv(os, train::fit({}, &city, mc, tc, 42).history);
        return os.str();
    };
    const std::string a = run(), b = run();
    Outcome o;
    o.require(a == b && !a.empty(), fmt("history CSV %.0f bytes, identical across runs", double(a.size())));
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    // Optional arguments select criteria by number.
    std::vector<std::size_t> only;
    for (int a = 1; a < argc; ++a) only.push_back(std::stoul(argv[a]));
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"dynamics oracles", dynamics_oracles},
        {"gradient suite", gradient_suite},
        {"structural invariants", structural_invariants},
        {"constructive attention patterns", constructive_attention},
        {"adjacency fit", adjacency_fit},
        {"interval calibration", calibration},
        {"training mechanics", training_mechanics},
        {"overfit and transfer", overfit_and_transfer},
        {"regime ordering", regime_ordering},
        {"training determinism", determinism},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!only.empty() && std::find(only.begin(), only.end(), i + 1) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        failed += !o.pass;
        std::printf("%s criterion %zu (%s): %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                    o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
    }
    return failed;
}
