#pragma once

// Training: chaos cache, regime-adaptive noise, composite loss, clipping,
// chaos-adaptive learning rate, AdamW, plateau scheduling, early stopping,
// first-order meta-learning episodes and the two-stage fit.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <deque>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <shared_mutex>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "castckt/data.hpp"
#include "castckt/errors.hpp"
#include "castckt/forecast.hpp"
#include "castckt/model.hpp"
#include "castckt/nlts.hpp"
#include "castckt/tensor.hpp"

namespace castckt::train {

using Profile = std::array<double, nlts::kProfileDim>;

struct TrainConfig {
    double lr_source = 5e-4;
    double lr_target = 2e-4;
    double inner_lr = 1e-3;
    double outer_lr = 2e-4;
    double clip = 1.0;
    double weight_decay = 1e-4;
    double noise_sigma = 0.005;
    double lambda1 = 1e-4;
    double lambda2 = 1e-4;
    double gamma = 1.0;
    double lambda_sparse = 1e-3;
    double alpha = 0.1;
    double plateau_factor = 0.7;
    std::size_t plateau_patience = 8;
    std::size_t early_stop_patience = 15;
    double min_delta = 1e-5;
    std::size_t epochs = 200;
    std::size_t target_epochs = 300;
    std::size_t batch_size = 8;
    double dropout = 0.1;
    double val_fraction = 0.2;
    std::size_t n_inner = 3;
    std::size_t support_size = 8;
    std::size_t query_size = 12;
    /// Meta-learning rounds after source pre-training (one episode per source city each).
    std::size_t meta_rounds = 0;
    std::size_t cache_capacity = 512;
    /// Negative: 0.5 x mean window norm of the training stream.
    double cache_theta = -1.0;
};

// -- chaos cache ---------------------------------------------------------------

/// Nearest-snapshot memo of extracted profiles. Readers share, writers are
/// exclusive; eviction is FIFO.
class ChaosCache {
   public:
    explicit ChaosCache(double theta = 0.0, std::size_t capacity = 512) : theta_(theta), capacity_(capacity) {
        if (theta < 0.0) throw InvalidArgument("cache threshold must be non-negative");
        if (capacity == 0) throw InvalidArgument("cache capacity must be positive");
    }

    double theta() const { return theta_; }
    std::size_t capacity() const { return capacity_; }

    /// Drops all entries and counters and sets a new threshold.
    void reset(double theta) {
        if (theta < 0.0) throw InvalidArgument("cache threshold must be non-negative");
        std::unique_lock lock(mu_);
        entries_.clear();
        theta_ = theta;
        hits_ = 0;
        misses_ = 0;
    }

    /// The closest stored snapshot within theta, if any (first inserted wins ties).
    std::optional<nlts::ChaosProfile> lookup(std::span<const double> x) const {
        std::shared_lock lock(mu_);
        const Entry* best = nullptr;
        double best_d = 0.0;
        for (const auto& e : entries_) {
            if (e.x.size() != x.size()) continue;
            double s = 0.0;
            for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - e.x[i]) * (x[i] - e.x[i]);
            const double d = std::sqrt(s);
            if (d <= theta_ && (!best || d < best_d)) {
                best = &e;
                best_d = d;
            }
        }
        if (!best) return std::nullopt;
        return best->profile;
    }

    void insert(std::vector<double> x, const nlts::ChaosProfile& p) {
        std::unique_lock lock(mu_);
        if (entries_.size() == capacity_) entries_.pop_front();
        entries_.push_back({std::move(x), p});
    }

    template <class Extract>
    nlts::ChaosProfile lookup_or_extract(std::span<const double> x, Extract&& extract) {
        if (auto hit = lookup(x)) {
            ++hits_;
            return *hit;
        }
        ++misses_;
        nlts::ChaosProfile p = extract();
        insert(std::vector<double>(x.begin(), x.end()), p);
        return p;
    }

    std::size_t size() const {
        std::shared_lock lock(mu_);
        return entries_.size();
    }
    std::size_t hits() const { return hits_; }
    std::size_t misses() const { return misses_; }
    double hit_rate() const {
        const std::size_t n = hits_ + misses_;
        return n ? static_cast<double>(hits_) / static_cast<double>(n) : 0.0;
    }
    void reset_counters() {
        hits_ = 0;
        misses_ = 0;
    }

   private:
    struct Entry {
        std::vector<double> x;
        nlts::ChaosProfile profile;
    };
    double theta_;
    std::size_t capacity_;
    std::deque<Entry> entries_;
    mutable std::shared_mutex mu_;
    std::atomic<std::size_t> hits_{0}, misses_{0};
};

/// Scaled flow block (channel 0) of a window, L x N row-major. This is the
/// cache key and the input of the profile extraction.
inline std::vector<double> flow_block(const data::SeriesWindow& w, std::size_t N, std::size_t F) {
    const std::size_t L = w.x.size() / (N * F);
    std::vector<double> out(L * N);
    for (std::size_t t = 0; t < L; ++t) {
        for (std::size_t i = 0; i < N; ++i) out[t * N + i] = w.x[(t * N + i) * F];
    }
    return out;
}

/// Mean over nodes of the per-node profiles of a flow block (L x N).
inline nlts::ChaosProfile pooled_profile(std::span<const double> block, std::size_t N) {
    const std::size_t L = block.size() / N;
    nlts::ChaosProfile out;
    out.degraded = false;
    std::vector<double> series(L);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t t = 0; t < L; ++t) series[t] = block[t * N + i];
        const auto p = nlts::chaos_profile(series);
        for (std::size_t s = 0; s < nlts::kProfileDim; ++s) out.slots[s] += p.slots[s] / static_cast<double>(N);
        out.degraded = out.degraded || p.degraded;
    }
    return out;
}

inline nlts::ChaosProfile cache_lookup_or_extract(ChaosCache& cache, std::span<const double> block, std::size_t N) {
    return cache.lookup_or_extract(block, [&] { return pooled_profile(block, N); });
}

// -- noise ---------------------------------------------------------------------

/// Per-slot Welford running mean/variance over the profile stream.
struct RunningStd {
    std::size_t count = 0;
    Profile mean{};
    Profile m2{};

    void push(const Profile& x) {
        ++count;
        for (std::size_t s = 0; s < x.size(); ++s) {
            const double d = x[s] - mean[s];
            mean[s] += d / static_cast<double>(count);
            m2[s] += d * (x[s] - mean[s]);
        }
    }
    Profile stddev() const {
        Profile out{};
        if (count < 2) return out;
        for (std::size_t s = 0; s < out.size(); ++s) out[s] = std::sqrt(m2[s] / static_cast<double>(count));
        return out;
    }
};

/// C + eps, eps_s ~ N(0, (sigma s_s)^2).
template <class Rng>
Profile inject_noise(const Profile& c, double sigma, const Profile& s, Rng& rng) {
    if (sigma < 0.0) throw InvalidArgument("noise sigma must be non-negative");
    std::normal_distribution<double> z(0.0, 1.0);
    Profile out = c;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double draw = z(rng);  // drawn unconditionally so the stream does not depend on s
        out[i] += sigma * s[i] * draw;
    }
    return out;
}

// -- loss ------------------------------------------------------------------------

struct LossWeights {
    double lambda1 = 1e-4;
    double lambda2 = 1e-4;
    double gamma = 1.0;
    double lambda_sparse = 1e-3;
};

struct LossParts {
    Tensor total;
    double pred = 0.0;
    double unc = 0.0;
    double reg = 0.0;
};

/// lambda1 ||C||_F^2 + lambda2 ||C C^T - I||_F^2 for a stacked profile matrix (rows = samples).
inline double chaos_regularizer(const std::vector<Profile>& C, double lambda1, double lambda2) {
    double norm2 = 0.0, gram = 0.0;
    for (std::size_t i = 0; i < C.size(); ++i) {
        for (double v : C[i]) norm2 += v * v;
        for (std::size_t j = 0; j < C.size(); ++j) {
            double dot = 0.0;
            for (std::size_t s = 0; s < nlts::kProfileDim; ++s) dot += C[i][s] * C[j][s];
            const double e = dot - (i == j ? 1.0 : 0.0);
            gram += e * e;
        }
    }
    return lambda1 * norm2 + lambda2 * gram;
}

/// Prediction term: mean squared error of the fused mean.
/// Uncertainty term: NLL of the fused forecast plus the mean over heads of each
/// head's horizon-weighted NLL.
/// Regulariser: chaos terms on the profile matrix plus lambda_sparse mean(A).
inline LossParts composite_loss(const Tensor& Y, const forecast::ForecastWithUncertainty& f, const Tensor* adjacency,
                                const std::vector<Profile>& C, const LossWeights& w) {
    LossParts out;
    Tensor pred = mean(square(Y - f.mean));
    Tensor unc = forecast::gaussian_nll(Y, f.mean, f.variance);
    if (f.head_mean[0].defined()) {
        Tensor heads = forecast::head_weighted_nll(Y, f.head_mean[0], f.head_variance[0], 0);
        for (std::size_t h = 1; h < forecast::kHeads; ++h) {
            heads = heads + forecast::head_weighted_nll(Y, f.head_mean[h], f.head_variance[h], h);
        }
        unc = unc + heads / static_cast<double>(forecast::kHeads);
    }
    const double creg = chaos_regularizer(C, w.lambda1, w.lambda2);
    Tensor total = pred + unc * w.gamma + creg;
    double topo = 0.0;
    if (adjacency && w.lambda_sparse != 0.0) {
        Tensor t = mean(*adjacency) * w.lambda_sparse;
        topo = t.item();
        total = total + t;
    }
    out.pred = pred.item();
    out.unc = unc.item();
    out.reg = creg + topo;
    out.total = total;
    return out;
}

// -- optimisation ----------------------------------------------------------------

/// eta0 exp(-alpha ||C||) scheduler_scale.
inline double chaos_adaptive_lr(double eta0, double alpha, double c_norm, double scheduler_scale = 1.0) {
    if (!(eta0 > 0.0)) throw InvalidArgument("base learning rate must be positive");
    return eta0 * std::exp(-alpha * c_norm) * scheduler_scale;
}

/// Multiplies the scale by `factor` once the monitored value has not improved
/// for `patience` consecutive epochs.
class PlateauScheduler {
   public:
    PlateauScheduler(double factor = 0.7, std::size_t patience = 8) : factor_(factor), patience_(patience) {
        if (!(factor > 0.0 && factor < 1.0)) throw InvalidArgument("plateau factor must be in (0,1)");
    }
    /// Returns true when the scale was reduced.
    bool step(double value) {
        if (value < best_) {
            best_ = value;
            stall_ = 0;
            return false;
        }
        if (++stall_ >= patience_) {
            scale_ *= factor_;
            stall_ = 0;
            return true;
        }
        return false;
    }
    double scale() const { return scale_; }

   private:
    double factor_;
    std::size_t patience_;
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t stall_ = 0;
    double scale_ = 1.0;
};

/// Stops once `patience` consecutive epochs fail to improve on the best value by more than min_delta.
class EarlyStopping {
   public:
    EarlyStopping(std::size_t patience = 15, double min_delta = 1e-5) : patience_(patience), min_delta_(min_delta) {}
    /// Returns true when training should stop.
    bool update(double value) {
        if (value < best_ - min_delta_) {
            best_ = value;
            stall_ = 0;
            improved_ = true;
            return false;
        }
        improved_ = false;
        return ++stall_ >= patience_;
    }
    bool improved() const { return improved_; }
    std::size_t stall() const { return stall_; }
    double best() const { return best_; }

   private:
    std::size_t patience_;
    double min_delta_;
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t stall_ = 0;
    bool improved_ = false;
};

/// Global-norm clipping; returns the norm before clipping.
inline double clip_gradients(ParamRegistry& P, double tau) {
    const double norm = P.grad_norm();
    if (norm > tau && norm > 0.0) {
        const double s = tau / norm;
        for (auto& [_, t] : P) {
            if (!t.has_grad()) continue;
            for (double& g : t.mutable_grad()) g *= s;
        }
    }
    return norm;
}

/// Adam with decoupled weight decay.
class AdamW {
   public:
    AdamW(double weight_decay = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(ParamRegistry& P, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (auto& [name, p] : P) {
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) {
                m.assign(p.numel(), 0.0);
                v.assign(p.numel(), 0.0);
            }
            auto x = p.mutable_data();
            auto g = p.grad();
            const bool has = p.has_grad();
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double gi = has ? g[i] : 0.0;
                m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
                v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
                x[i] -= lr * wd_ * x[i];
                x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
            }
        }
    }
    std::size_t steps() const { return t_; }

   private:
    double wd_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

/// p <- p - lr g for every parameter with a gradient.
inline void sgd_step(ParamRegistry& P, double lr) {
    for (auto& [_, p] : P) {
        if (!p.has_grad()) continue;
        auto x = p.mutable_data();
        auto g = p.grad();
        for (std::size_t i = 0; i < x.size(); ++i) x[i] -= lr * g[i];
    }
}

// -- batches -------------------------------------------------------------------

struct Batch {
    Tensor X;  // [B,N,L,F]
    Tensor Y;  // [B,N,H]
    Tensor C;  // [B,20] normalised (and possibly noisy)
    std::vector<Profile> profiles;  // rows of C
};

inline double profile_norm(const std::vector<Profile>& rows) {
    if (rows.empty()) return 0.0;
    Profile m{};
    for (const auto& r : rows) {
        for (std::size_t s = 0; s < m.size(); ++s) m[s] += r[s] / static_cast<double>(rows.size());
    }
    double n = 0.0;
    for (double v : m) n += v * v;
    return std::sqrt(n);
}

struct EpisodeSplit {
    std::vector<std::size_t> support;
    std::vector<std::size_t> query;
};

/// Disjoint support/query draws from `pool`.
template <class Rng>
EpisodeSplit sample_episode(const std::vector<std::size_t>& pool, std::size_t K, std::size_t Q, Rng& rng) {
    if (pool.size() < K + Q) {
        throw InvalidArgument("episode needs " + std::to_string(K + Q) + " windows, pool has " + std::to_string(pool.size()));
    }
    std::vector<std::size_t> idx = pool;
    std::shuffle(idx.begin(), idx.end(), rng);
    EpisodeSplit e;
    e.support.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(K));
    e.query.assign(idx.begin() + static_cast<std::ptrdiff_t>(K), idx.begin() + static_cast<std::ptrdiff_t>(K + Q));
    return e;
}

struct HistoryRow {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
    double cache_hit_rate = 0.0;
};

inline void write_history_csv(std::ostream& out, const std::vector<HistoryRow>& rows) {
    out << "epoch,train_loss,val_loss,lr,cache_hit_rate\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss, r.lr,
                      r.cache_hit_rate);
        out << buf;
    }
}

/// A city with its chronological train/validation split and locality mask.
struct CitySplit {
    const data::CityData* city = nullptr;
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::optional<Tensor> mask;
};

/// The last `val_fraction` of the windows validate; with no room for both, train and val coincide.
inline CitySplit split_city(const data::CityData& c, double val_fraction) {
    CitySplit s;
    s.city = &c;
    s.mask = city_mask(c.coords);
    const std::size_t n = c.windows.size();
    const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n)));
    if (n_val == 0 || n_val >= n) {
        s.train.resize(n);
        std::iota(s.train.begin(), s.train.end(), 0);
        s.val = s.train;
        return s;
    }
    for (std::size_t i = 0; i < n; ++i) (i < n - n_val ? s.train : s.val).push_back(i);
    return s;
}

/// Owns the parameters and all stateful Algorithm-1 machinery for one run.
class Trainer {
   public:
    Trainer(ModelConfig mc, TrainConfig tc, std::uint64_t seed)
        : mc_(mc), tc_(tc), rng_(seed), params_(init_model(mc_, rng_)), cache_(0.0, tc.cache_capacity),
          normalizer_(ProfileNormalizer::identity()) {}

    ParamRegistry& params() { return params_; }
    const ParamRegistry& params() const { return params_; }
    const ModelConfig& model_config() const { return mc_; }
    const TrainConfig& config() const { return tc_; }
    const ProfileNormalizer& normalizer() const { return normalizer_; }
    void set_normalizer(const ProfileNormalizer& n) { normalizer_ = n; }
    ChaosCache& cache() { return cache_; }
    std::mt19937_64& rng() { return rng_; }
    LossWeights weights() const { return {tc_.lambda1, tc_.lambda2, tc_.gamma, tc_.lambda_sparse}; }

    /// Fits the profile normaliser and the cache threshold on the training windows.
    void prepare(const std::vector<CitySplit>& cities) {
        std::vector<nlts::ChaosProfile> profiles;
        double norm_sum = 0.0;
        std::size_t count = 0;
        for (const auto& cs : cities) {
            for (std::size_t w : cs.train) {
                const auto block = flow_block(cs.city->windows[w], cs.city->nodes, mc_.in_features);
                profiles.push_back(pooled_profile(block, cs.city->nodes));
                double s = 0.0;
                for (double v : block) s += v * v;
                norm_sum += std::sqrt(s);
                ++count;
            }
        }
        normalizer_ = ProfileNormalizer::fit(profiles);
        const double theta = tc_.cache_theta >= 0.0 ? tc_.cache_theta : (count ? 0.5 * norm_sum / static_cast<double>(count) : 0.0);
        cache_.reset(theta);
    }

    /// Raw profile of one window through the cache.
    nlts::ChaosProfile window_profile(const data::CityData& c, std::size_t w) {
        const auto block = flow_block(c.windows[w], c.nodes, mc_.in_features);
        return cache_lookup_or_extract(cache_, block, c.nodes);
    }

    Batch make_batch(const data::CityData& c, std::span<const std::size_t> idx, bool noisy) {
        const std::size_t B = idx.size(), N = c.nodes, L = c.seq_len, H = c.horizon, F = mc_.in_features;
        std::vector<double> x(B * N * L * F), y(B * N * H), cv(B * nlts::kProfileDim);
        Batch b;
        for (std::size_t bi = 0; bi < B; ++bi) {
            const auto& w = c.windows[idx[bi]];
            for (std::size_t t = 0; t < L; ++t) {
                for (std::size_t i = 0; i < N; ++i) {
                    for (std::size_t f = 0; f < F; ++f) x[((bi * N + i) * L + t) * F + f] = w.x[(t * N + i) * F + f];
                }
            }
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t i = 0; i < N; ++i) y[(bi * N + i) * H + h] = w.y[h * N + i];
            }
            Profile raw = window_profile(c, idx[bi]).slots;
            if (noisy) {
                running_.push(raw);
                raw = inject_noise(raw, tc_.noise_sigma, running_.stddev(), rng_);
            }
            const Profile z = normalizer_.apply(raw);
            std::copy(z.begin(), z.end(), cv.begin() + static_cast<std::ptrdiff_t>(bi * nlts::kProfileDim));
            b.profiles.push_back(z);
        }
        b.X = Tensor::from({B, N, L, F}, std::move(x));
        b.Y = Tensor::from({B, N, H}, std::move(y));
        b.C = Tensor::from({B, nlts::kProfileDim}, std::move(cv));
        return b;
    }

    LossParts batch_loss(const Batch& b, const ParamRegistry& P, const CitySplit& cs, bool training) {
        ForwardOptions opt;
        opt.local_mask = cs.mask ? &*cs.mask : nullptr;
        if (training) {
            opt.rng = &rng_;
            opt.dropout = tc_.dropout;
        }
        auto out = forward(b.X, b.C, P, mc_, opt);
        return composite_loss(b.Y, out.forecast, &out.adjacency.weights, b.profiles, weights());
    }

    /// One Algorithm-1 epoch over a city's training windows. Returns the mean
    /// batch loss and the last learning rate used.
    std::pair<double, double> train_epoch(const CitySplit& cs, AdamW& opt, double eta0, double sched_scale,
                                          std::size_t epoch) {
        std::vector<std::size_t> order = cs.train;
        std::shuffle(order.begin(), order.end(), rng_);
        double total = 0.0, lr = eta0 * sched_scale;
        std::size_t batches = 0;
        for (std::size_t s = 0; s < order.size(); s += tc_.batch_size) {
            const std::size_t e = std::min(order.size(), s + tc_.batch_size);
            Batch b = make_batch(*cs.city, std::span(order).subspan(s, e - s), true);
            params_.zero_grad();
            LossParts loss = batch_loss(b, params_, cs, true);
            const double value = loss.total.item();
            if (!std::isfinite(value)) throw NonFiniteLoss(diagnostic(epoch, batches, value, lr, loss));
            backward(loss.total);
            const double gnorm = clip_gradients(params_, tc_.clip);
            if (!std::isfinite(gnorm)) throw NonFiniteLoss(diagnostic(epoch, batches, value, lr, loss));
            lr = chaos_adaptive_lr(eta0, tc_.alpha, profile_norm(b.profiles), sched_scale);
            opt.step(params_, lr);
            total += value;
            ++batches;
        }
        return {batches ? total / static_cast<double>(batches) : 0.0, lr};
    }

    /// Mean composite loss over validation windows (no noise, no dropout).
    double evaluate_loss(const CitySplit& cs, const std::vector<std::size_t>& idx) {
        double total = 0.0;
        std::size_t n = 0;
        for (std::size_t s = 0; s < idx.size(); s += tc_.batch_size) {
            const std::size_t e = std::min(idx.size(), s + tc_.batch_size);
            Batch b = make_batch(*cs.city, std::span(idx).subspan(s, e - s), false);
            total += batch_loss(b, params_, cs, false).total.item() * static_cast<double>(e - s);
            n += e - s;
        }
        return n ? total / static_cast<double>(n) : 0.0;
    }

    /// Mean absolute error of the fused mean (scaled units) on the given windows.
    double evaluate_mae(const ParamRegistry& P, const CitySplit& cs, const std::vector<std::size_t>& idx) {
        double total = 0.0;
        std::size_t n = 0;
        for (std::size_t s = 0; s < idx.size(); s += tc_.batch_size) {
            const std::size_t e = std::min(idx.size(), s + tc_.batch_size);
            Batch b = make_batch(*cs.city, std::span(idx).subspan(s, e - s), false);
            ForwardOptions opt;
            opt.local_mask = cs.mask ? &*cs.mask : nullptr;
            auto out = forward(b.X, b.C, P, mc_, opt);
            auto mu = out.forecast.mean.data();
            auto y = b.Y.data();
            for (std::size_t i = 0; i < y.size(); ++i) total += std::abs(y[i] - mu[i]);
            n += y.size();
        }
        return n ? total / static_cast<double>(n) : 0.0;
    }

    /// Mean fused variance (scaled units) on the given windows.
    double evaluate_variance(const CitySplit& cs, const std::vector<std::size_t>& idx) {
        double total = 0.0;
        std::size_t n = 0;
        for (std::size_t s = 0; s < idx.size(); s += tc_.batch_size) {
            const std::size_t e = std::min(idx.size(), s + tc_.batch_size);
            Batch b = make_batch(*cs.city, std::span(idx).subspan(s, e - s), false);
            ForwardOptions opt;
            opt.local_mask = cs.mask ? &*cs.mask : nullptr;
            auto out = forward(b.X, b.C, params_, mc_, opt);
            for (double v : out.forecast.variance.data()) total += v;
            n += out.forecast.variance.numel();
        }
        return n ? total / static_cast<double>(n) : 0.0;
    }

    /// Plain-gradient loss on `idx` evaluated at P; leaves gradients in P.
    double loss_and_grad(ParamRegistry& P, const CitySplit& cs, std::span<const std::size_t> idx) {
        Batch b = make_batch(*cs.city, idx, true);
        P.zero_grad();
        LossParts loss = batch_loss(b, P, cs, true);
        const double value = loss.total.item();
        if (!std::isfinite(value)) throw NonFiniteLoss("meta-learning loss is not finite: " + std::to_string(value));
        backward(loss.total);
        return value;
    }

    /// First-order MAML: n_inner SGD steps on the support set from a copy of
    /// the parameters, then the query gradient at the adapted copy is applied
    /// to the original parameters with `outer`. Returns the query loss.
    double meta_step(const CitySplit& cs, const EpisodeSplit& ep, AdamW& outer) {
        ParamRegistry adapted = params_.clone();
        for (std::size_t s = 0; s < tc_.n_inner; ++s) {
            loss_and_grad(adapted, cs, ep.support);
            clip_gradients(adapted, tc_.clip);
            sgd_step(adapted, tc_.inner_lr);
        }
        const double q = loss_and_grad(adapted, cs, ep.query);
        clip_gradients(adapted, tc_.clip);
        params_.zero_grad();
        for (auto& [name, p] : params_) {
            const Tensor& a = adapted.at(name);
            if (!a.has_grad()) continue;
            auto g = p.mutable_grad();
            std::copy(a.grad().begin(), a.grad().end(), g.begin());
        }
        outer.step(params_, tc_.outer_lr);
        return q;
    }

    /// `rounds` passes of one episode per city, drawn from the training windows.
    void meta_train(const std::vector<CitySplit>& cities, std::size_t rounds) {
        AdamW outer(tc_.weight_decay);
        for (std::size_t r = 0; r < rounds; ++r) {
            for (const auto& cs : cities) meta_step(cs, sample_episode(cs.train, tc_.support_size, tc_.query_size, rng_), outer);
        }
    }

    /// Runs `steps` Adam updates on the support windows (few-shot adaptation).
    void adapt(const CitySplit& cs, const std::vector<std::size_t>& support, std::size_t steps, double lr) {
        AdamW opt(tc_.weight_decay);
        for (std::size_t s = 0; s < steps; ++s) {
            loss_and_grad(params_, cs, support);
            clip_gradients(params_, tc_.clip);
            opt.step(params_, lr);
        }
    }

    /// One stage of Algorithm 1 over the given cities; appends to `history`.
    /// The parameters with the best validation loss are kept.
    void run_stage(const std::vector<CitySplit>& cities, double eta0, std::size_t epochs, std::vector<HistoryRow>& history) {
        AdamW opt(tc_.weight_decay);
        PlateauScheduler sched(tc_.plateau_factor, tc_.plateau_patience);
        EarlyStopping stop(tc_.early_stop_patience, tc_.min_delta);
        ParamRegistry best = params_.clone();
        for (std::size_t e = 0; e < epochs; ++e) {
            cache_.reset_counters();
            double train_loss = 0.0, lr = eta0;
            std::size_t n_train = 0;
            for (const auto& cs : cities) {
                auto [l, r] = train_epoch(cs, opt, eta0, sched.scale(), history.size() + 1);
                train_loss += l * static_cast<double>(cs.train.size());
                n_train += cs.train.size();
                lr = r;
            }
            train_loss /= static_cast<double>(std::max<std::size_t>(n_train, 1));
            double val = 0.0;
            std::size_t n_val = 0;
            for (const auto& cs : cities) {
                val += evaluate_loss(cs, cs.val) * static_cast<double>(cs.val.size());
                n_val += cs.val.size();
            }
            val /= static_cast<double>(std::max<std::size_t>(n_val, 1));
            if (!std::isfinite(val)) throw NonFiniteLoss("validation loss is not finite at epoch " + std::to_string(history.size() + 1));
            history.push_back({history.size() + 1, train_loss, val, lr, cache_.hit_rate()});
            const bool halt = stop.update(val);
            if (stop.improved()) best = params_.clone();
            sched.step(val);
            if (halt) break;
        }
        params_.assign_values(best);
    }

   private:
    std::string diagnostic(std::size_t epoch, std::size_t batch, double value, double lr, const LossParts& loss) const {
        std::ostringstream os;
        os << "non-finite loss " << value << " at epoch " << epoch << ", batch " << batch << " (pred=" << loss.pred
           << ", unc=" << loss.unc << ", reg=" << loss.reg << ", lr=" << lr << ")";
        for (const auto& [name, p] : params_) {
            for (double v : p.data()) {
                if (!std::isfinite(v)) {
                    os << "; first non-finite parameter: " << name;
                    return os.str();
                }
            }
        }
        os << "; all parameters finite";
        return os.str();
    }

    ModelConfig mc_;
    TrainConfig tc_;
    std::mt19937_64 rng_;
    ParamRegistry params_;
    ChaosCache cache_;
    ProfileNormalizer normalizer_;
    RunningStd running_;
};

struct FitResult {
    ParamRegistry params;
    ProfileNormalizer normalizer;
    std::vector<HistoryRow> history;
};

/// Two-stage fit: source pre-training at lr_source for `epochs`, then (if a
/// target is given) fine-tuning on the target at lr_target for
/// `target_epochs`. Deterministic for a fixed seed.
inline FitResult fit(const std::vector<const data::CityData*>& sources, const data::CityData* target,
                     const ModelConfig& mc, const TrainConfig& tc, std::uint64_t seed) {
    if (sources.empty() && !target) throw InvalidArgument("fit needs at least one city");
    Trainer tr(mc, tc, seed);
    std::vector<CitySplit> src;
    for (const auto* c : sources) src.push_back(split_city(*c, tc.val_fraction));
    std::vector<CitySplit> all = src;
    std::optional<CitySplit> tgt;
    if (target) {
        tgt = split_city(*target, tc.val_fraction);
        all.push_back(*tgt);
    }
    tr.prepare(all);
    FitResult r;
    if (!src.empty()) tr.run_stage(src, tc.lr_source, tc.epochs, r.history);
    if (!src.empty() && tc.meta_rounds > 0) tr.meta_train(src, tc.meta_rounds);
    if (tgt) tr.run_stage({*tgt}, tc.lr_target, src.empty() ? tc.epochs : tc.target_epochs, r.history);
    r.params = tr.params().clone();
    r.normalizer = tr.normalizer();
    return r;
}

}  // namespace castckt::train
