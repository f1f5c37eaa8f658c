#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>
#include <vector>

#include "castckt/train.hpp"
#include "cities.hpp"
#include "support.hpp"

using namespace castckt;
using namespace castckt::train;
using castckt::testing::grad_check;
using castckt::testing::random_tensor;
using castckt::testing::small_city;

namespace {

nlts::ChaosProfile tagged(double v) {
    nlts::ChaosProfile p;
    p.slots[0] = v;
    return p;
}

double dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
    std::ostringstream os;
    write_history_csv(os, rows);
    return os.str();
}

}  // namespace

// -- cache -----------------------------------------------------------------------

TEST(ChaosCache, SecondLookupHitsWithoutRecompute) {
    ChaosCache cache(0.5, 8);
    int calls = 0;
    std::vector<double> x{0.25, -1.0, 2.0};
    auto a = cache.lookup_or_extract(x, [&] { return ++calls, tagged(7.0); });
    auto b = cache.lookup_or_extract(x, [&] { return ++calls, tagged(9.0); });
    EXPECT_EQ(calls, 1);
    EXPECT_EQ(a.slots, b.slots);
    EXPECT_EQ(cache.hits(), 1u);
    EXPECT_EQ(cache.misses(), 1u);
    EXPECT_DOUBLE_EQ(cache.hit_rate(), 0.5);
}

TEST(ChaosCache, ThresholdBoundary) {
    ChaosCache cache(0.5, 8);
    std::vector<double> x{0.25, -1.0, 2.0};
    cache.insert(x, tagged(1.0));
    EXPECT_TRUE(cache.lookup(std::vector<double>{0.75, -1.0, 2.0}));                    // exactly theta
    EXPECT_FALSE(cache.lookup(std::vector<double>{std::nextafter(0.75, 1.0), -1.0, 2.0}));  // just past
    EXPECT_FALSE(cache.lookup(std::vector<double>{1.75, -1.0, 2.0}));                    // theta + 1
}

TEST(ChaosCache, ZeroThresholdNeedsBitIdentical) {
    ChaosCache cache(0.0, 8);
    std::vector<double> x{0.1, 0.2};
    cache.insert(x, tagged(1.0));
    EXPECT_TRUE(cache.lookup(x));
    EXPECT_FALSE(cache.lookup(std::vector<double>{std::nextafter(0.1, 1.0), 0.2}));
}

TEST(ChaosCache, FifoEviction) {
    ChaosCache cache(0.1, 3);
    for (int i = 0; i < 5; ++i) cache.insert({static_cast<double>(i)}, tagged(i));
    EXPECT_EQ(cache.size(), 3u);
    EXPECT_FALSE(cache.lookup(std::vector<double>{0.0}));
    EXPECT_FALSE(cache.lookup(std::vector<double>{1.0}));
    EXPECT_EQ(cache.lookup(std::vector<double>{4.0})->slots[0], 4.0);
    EXPECT_THROW(ChaosCache(-1.0), InvalidArgument);
    EXPECT_THROW(ChaosCache(1.0, 0), InvalidArgument);
}

TEST(ChaosCache, ExhaustiveHitIffWithinThreshold) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> g(-3, 3);
    for (int c = 0; c < 200; ++c) {
        const double theta = 0.5 * (c % 5);
        ChaosCache cache(theta, 6);
        std::vector<std::vector<double>> stored;
        for (int e = 0; e < 6; ++e) {
            std::vector<double> x{static_cast<double>(g(rng)), static_cast<double>(g(rng))};
            cache.insert(x, tagged(static_cast<double>(e)));
            stored.push_back(x);
        }
        for (int a = -3; a <= 3; ++a)
            for (int b = -3; b <= 3; ++b) {
                std::vector<double> q{static_cast<double>(a), static_cast<double>(b)};
                double best = 1e300;
                int best_e = -1;
                for (int e = 0; e < 6; ++e) {
                    const double d = dist(q, stored[static_cast<std::size_t>(e)]);
                    if (d <= theta && d < best) best = d, best_e = e;
                }
                auto hit = cache.lookup(q);
                ASSERT_EQ(hit.has_value(), best_e >= 0);
                if (hit) {
                    ASSERT_EQ(hit->slots[0], best_e);
                }
            }
    }
}

TEST(ChaosCache, ConcurrentReadersAndWriter) {
    ChaosCache cache(0.0, 64);
    std::vector<std::thread> pool;
    for (int t = 0; t < 4; ++t) {
        pool.emplace_back([&, t] {
            for (int i = 0; i < 200; ++i) {
                std::vector<double> x{static_cast<double>(i % 16)};
                auto p = cache.lookup_or_extract(x, [&] { return tagged(static_cast<double>(i % 16)); });
                if (p.slots[0] != static_cast<double>(i % 16)) std::abort();
            }
            (void)t;
        });
    }
    for (auto& th : pool) th.join();
    EXPECT_EQ(cache.hits() + cache.misses(), 800u);
    EXPECT_GE(cache.size(), 16u);
}

TEST(CacheLookup, MissExtractsPooledProfile) {
    auto city = small_city(data::CityRegime::Chaotic, 3, 4);
    auto block = flow_block(city.windows[0], city.nodes, data::kInputFeatures);
    ASSERT_EQ(block.size(), 12u * 4u);
    for (std::size_t t = 0; t < 12; ++t)
        for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(block[t * 4 + i], city.scaled[t * 4 + i]);
    ChaosCache cache(0.0, 8);
    auto a = cache_lookup_or_extract(cache, block, city.nodes);
    nlts::ChaosProfile mean;
    for (std::size_t i = 0; i < 4; ++i) {
        std::vector<double> s(12);
        for (std::size_t t = 0; t < 12; ++t) s[t] = block[t * 4 + i];
        auto p = nlts::chaos_profile(s);
        for (std::size_t k = 0; k < nlts::kProfileDim; ++k) mean.slots[k] += p.slots[k] / 4.0;
    }
    for (std::size_t k = 0; k < nlts::kProfileDim; ++k) EXPECT_NEAR(a.slots[k], mean.slots[k], 1e-12);
    EXPECT_TRUE(a.degraded);
    auto b = cache_lookup_or_extract(cache, block, city.nodes);
    EXPECT_EQ(a.slots, b.slots);
    EXPECT_EQ(cache.hits(), 1u);
}

// -- noise -----------------------------------------------------------------------

TEST(InjectNoise, IdentityCases) {
    std::mt19937_64 rng(2);
    Profile c{};
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.1 * static_cast<double>(i);
    Profile s{};
    s.fill(1.0);
    EXPECT_EQ(inject_noise(c, 0.0, s, rng), c);
    EXPECT_EQ(inject_noise(c, 0.3, Profile{}, rng), c);
    EXPECT_THROW(inject_noise(c, -0.1, s, rng), InvalidArgument);
}

TEST(InjectNoise, MonteCarloVariance) {
    std::mt19937_64 rng(3);
    Profile c{}, s{};
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = 0.5 + 0.1 * static_cast<double>(i);
    const double sigma = 0.005;
    std::array<double, nlts::kProfileDim> sum{}, sq{};
    const int draws = 10000;
    for (int d = 0; d < draws; ++d) {
        auto x = inject_noise(c, sigma, s, rng);
        for (std::size_t i = 0; i < x.size(); ++i) sum[i] += x[i], sq[i] += x[i] * x[i];
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double m = sum[i] / draws, var = sq[i] / draws - m * m;
        const double expect = sigma * sigma * s[i] * s[i];
        EXPECT_NEAR(var / expect, 1.0, 0.05) << "slot " << i;
    }
}

TEST(RunningStd, MatchesTwoPassOracle) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(3.0, 2.0);
    RunningStd rs;
    std::vector<Profile> xs(50);
    for (auto& x : xs) {
        for (double& v : x) v = n(rng);
        rs.push(x);
    }
    auto sd = rs.stddev();
    for (std::size_t s = 0; s < nlts::kProfileDim; ++s) {
        double m = 0.0, v = 0.0;
        for (const auto& x : xs) m += x[s] / 50.0;
        for (const auto& x : xs) v += (x[s] - m) * (x[s] - m) / 50.0;
        EXPECT_NEAR(sd[s], std::sqrt(v), 1e-12);
    }
    RunningStd one;
    one.push(xs[0]);
    for (double v : one.stddev()) EXPECT_EQ(v, 0.0);
}

// -- loss ------------------------------------------------------------------------

namespace {

forecast::ForecastWithUncertainty fused_only(const Tensor& mean, const Tensor& var) {
    forecast::ForecastWithUncertainty f;
    f.mean = mean;
    f.variance = var;
    return f;
}

}  // namespace

TEST(CompositeLoss, PerfectPredictionNoWeights) {
    std::mt19937_64 rng(5);
    auto Y = random_tensor({2, 3, 4}, rng);
    auto f = fused_only(Y, Tensor::full({2, 3, 4}, 0.7));
    auto parts = composite_loss(Y, f, nullptr, {Profile{}, Profile{}}, {0.0, 0.0, 0.0, 0.0});
    EXPECT_EQ(parts.total.item(), 0.0);
}

TEST(CompositeLoss, OrthonormalProfilesHaveZeroGramPenalty) {
    Profile a{}, b{};
    a[0] = 1.0;
    b[3] = 1.0;
    EXPECT_EQ(chaos_regularizer({a, b}, 0.0, 1.0), 0.0);
    EXPECT_EQ(chaos_regularizer({a, b}, 1.0, 0.0), 2.0);
}

TEST(CompositeLoss, TwoSampleHandOracle) {
    // B = 2, N = 1, H = 2.
    auto Y = Tensor::from({2, 1, 2}, {1.0, 2.0, 0.0, -1.0});
    auto mu = Tensor::from({2, 1, 2}, {0.5, 2.0, 1.0, -1.0});
    auto var = Tensor::from({2, 1, 2}, {1.0, 0.5, 2.0, 1.0});
    auto A = Tensor::from({2, 2, 2}, {0.0, 0.4, 0.4, 0.0, 0.0, 1.0, 1.0, 0.0});
    Profile c1{}, c2{};
    c1[0] = 1.0, c1[1] = 2.0;
    c2[0] = -1.0, c2[2] = 0.5;
    const LossWeights w{0.1, 0.01, 2.0, 0.5};
    auto parts = composite_loss(Y, fused_only(mu, var), &A, {c1, c2}, w);

    const double pred = (0.25 + 0.0 + 1.0 + 0.0) / 4.0;
    auto nll = [](double y, double m, double v) { return 0.5 * std::log(2 * std::numbers::pi * v) + (y - m) * (y - m) / (2 * v); };
    const double unc = (nll(1, 0.5, 1) + nll(2, 2, 0.5) + nll(0, 1, 2) + nll(-1, -1, 1)) / 4.0;
    const double norm2 = 1 + 4 + 1 + 0.25;
    const double g11 = 5 - 1, g22 = 1.25 - 1, g12 = -1;
    const double gram = g11 * g11 + g22 * g22 + 2 * g12 * g12;
    const double topo = 0.5 * (0.8 + 2.0) / 8.0;
    EXPECT_NEAR(parts.pred, pred, 1e-15);
    EXPECT_NEAR(parts.unc, unc, 1e-15);
    EXPECT_NEAR(parts.reg, 0.1 * norm2 + 0.01 * gram + topo, 1e-15);
    EXPECT_NEAR(parts.total.item(), pred + 2.0 * unc + 0.1 * norm2 + 0.01 * gram + topo, 1e-14);
}

TEST(CompositeLoss, HeadTermsJoinUncertainty) {
    std::mt19937_64 rng(6);
    auto Y = random_tensor({1, 2, 3}, rng);
    forecast::ForecastWithUncertainty f;
    for (std::size_t h = 0; h < 3; ++h) {
        f.head_mean[h] = random_tensor({1, 2, 3}, rng);
        f.head_variance[h] = random_tensor({1, 2, 3}, rng, 0.3, 1.2);
    }
    f = forecast::fuse(f.head_mean, f.head_variance, Tensor::from({1, 3}, {0.2, 0.3, 0.5}));
    auto parts = composite_loss(Y, f, nullptr, {}, {0, 0, 1, 0});
    double heads = 0.0;
    for (std::size_t h = 0; h < 3; ++h) heads += forecast::head_weighted_nll(Y, f.head_mean[h], f.head_variance[h], h).item();
    EXPECT_NEAR(parts.unc, forecast::gaussian_nll(Y, f.mean, f.variance).item() + heads / 3.0, 1e-14);
}

TEST(CompositeLoss, GradientCheck) {
    std::mt19937_64 rng(7);
    auto Y = random_tensor({2, 2, 3}, rng);
    std::array<Tensor, 3> m, v;
    for (std::size_t h = 0; h < 3; ++h) m[h] = random_tensor({2, 2, 3}, rng), v[h] = random_tensor({2, 2, 3}, rng, 0.3, 1.5);
    auto logits = random_tensor({2, 3}, rng);
    auto A = random_tensor({2, 2, 2}, rng, 0.0, 1.0);
    std::vector<Tensor> leaves{logits, A, m[0], m[1], m[2], v[0], v[1], v[2]};
    auto g = grad_check(leaves, [&] {
        auto f = forecast::fuse(m, v, softmax(logits, -1));
        return composite_loss(Y, f, &A, {Profile{}}, {1e-3, 1e-3, 1.0, 0.1}).total;
    });
    EXPECT_TRUE(g.ok()) << g.worst_at;
}

// -- optimisation ----------------------------------------------------------------

TEST(ChaosAdaptiveLr, Examples) {
    EXPECT_EQ(chaos_adaptive_lr(1e-3, 0.1, 0.0, 0.5), 5e-4);
    EXPECT_EQ(chaos_adaptive_lr(1e-3, 0.0, 123.0), 1e-3);
    EXPECT_NEAR(chaos_adaptive_lr(1e-3, std::numbers::ln2, 1.0), 5e-4, 1e-18);
    EXPECT_THROW(chaos_adaptive_lr(0.0, 0.1, 1.0), InvalidArgument);
}

TEST(PlateauScheduler, DecaysAfterPatience) {
    PlateauScheduler s(0.7, 8);
    s.step(1.0);
    for (int i = 0; i < 7; ++i) EXPECT_FALSE(s.step(1.0));
    EXPECT_TRUE(s.step(1.0));
    EXPECT_DOUBLE_EQ(s.scale(), 0.7);
    double prev = s.scale();
    for (int i = 0; i < 80; ++i) s.step(2.0);
    EXPECT_LT(s.scale(), prev);
    EXPECT_GT(chaos_adaptive_lr(5e-4, 0.1, 3.0, s.scale()), 0.0);
    EXPECT_THROW(PlateauScheduler(1.0, 1), InvalidArgument);
}

TEST(PlateauScheduler, MonotoneUnderRepeatedPlateaus) {
    PlateauScheduler s(0.7, 2);
    double prev = s.scale();
    for (int i = 0; i < 100; ++i) {
        s.step(5.0);
        ASSERT_LE(s.scale(), prev);
        ASSERT_GT(s.scale(), 0.0);
        prev = s.scale();
    }
}

TEST(EarlyStopping, FiresAfterExactlyPatienceStalls) {
    EarlyStopping stop(15, 1e-5);
    EXPECT_FALSE(stop.update(1.0));
    for (int i = 1; i < 15; ++i) EXPECT_FALSE(stop.update(1.0 - 5e-7 * i)) << i;  // below min_delta
    EXPECT_TRUE(stop.update(1.0));
    EarlyStopping again(15, 1e-5);
    again.update(1.0);
    for (int i = 0; i < 10; ++i) again.update(1.0);
    again.update(0.5);
    EXPECT_TRUE(again.improved());
    EXPECT_EQ(again.stall(), 0u);
}

TEST(ClipGradients, Examples) {
    ParamRegistry P;
    P.add("a", Tensor::from({2}, {0.0, 0.0}));
    P.add("b", Tensor::from({1}, {0.0}));
    auto set = [&](double x, double y, double z) {
        P.zero_grad();
        backward(sum(P.at("a") * Tensor::from({2}, {x, y})) + sum(P.at("b") * Tensor::from({1}, {z})));
    };
    set(0.3, 0.4, 0.0);
    EXPECT_NEAR(clip_gradients(P, 1.0), 0.5, 1e-15);
    EXPECT_EQ(P.at("a").grad()[0], 0.3);
    set(1.2, 1.6, 0.0);  // norm 2 = 2 tau
    EXPECT_NEAR(clip_gradients(P, 1.0), 2.0, 1e-15);
    EXPECT_NEAR(P.at("a").grad()[0], 0.6, 1e-15);
    EXPECT_NEAR(P.at("a").grad()[1], 0.8, 1e-15);
    EXPECT_LE(P.grad_norm(), 1.0 + 1e-9);
    set(0.0, 0.0, 0.0);
    EXPECT_EQ(clip_gradients(P, 1.0), 0.0);
    EXPECT_EQ(P.grad_norm(), 0.0);
}

TEST(ClipGradients, PostNormBoundProperty) {
    std::mt19937_64 rng(8);
    for (int c = 0; c < 1000; ++c) {
        ParamRegistry P;
        P.add("a", Tensor::zeros({3, 2}));
        P.add("b", Tensor::zeros({4}));
        const double s = std::pow(10.0, (c % 9) - 4);
        backward(sum(P.at("a") * random_tensor({3, 2}, rng, -s, s)) + sum(P.at("b") * random_tensor({4}, rng, -s, s)));
        const double tau = 0.1 + (c % 5);
        clip_gradients(P, tau);
        ASSERT_LE(P.grad_norm(), tau + 1e-9);
    }
}

TEST(AdamW, ZeroGradientsApplyOnlyWeightDecay) {
    ParamRegistry P;
    P.add("w", Tensor::from({3}, {1.0, -2.0, 0.5}));
    backward(sum(P.at("w") * 0.0));
    AdamW opt(1e-2);
    opt.step(P, 0.1);
    const double f = 1.0 - 0.1 * 1e-2;
    EXPECT_DOUBLE_EQ(P.at("w").data()[0], 1.0 * f);
    EXPECT_DOUBLE_EQ(P.at("w").data()[1], -2.0 * f);
    EXPECT_DOUBLE_EQ(P.at("w").data()[2], 0.5 * f);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
    ParamRegistry P;
    P.add("w", Tensor::from({2}, {1.0, 1.0}));
    backward(sum(P.at("w") * Tensor::from({2}, {3.0, -0.01})));
    AdamW opt(0.0);
    opt.step(P, 0.01);
    EXPECT_NEAR(P.at("w").data()[0], 0.99, 1e-9);
    EXPECT_NEAR(P.at("w").data()[1], 1.01, 1e-6);
}

// -- episodes and stages ---------------------------------------------------------

TEST(SampleEpisode, DisjointSizes) {
    std::mt19937_64 rng(9);
    std::vector<std::size_t> pool(30);
    std::iota(pool.begin(), pool.end(), 100);
    for (int c = 0; c < 50; ++c) {
        auto e = sample_episode(pool, 8, 12, rng);
        ASSERT_EQ(e.support.size(), 8u);
        ASSERT_EQ(e.query.size(), 12u);
        for (auto s : e.support) ASSERT_EQ(std::count(e.query.begin(), e.query.end(), s), 0);
    }
    EXPECT_THROW(sample_episode(std::vector<std::size_t>(19), 8, 12, rng), InvalidArgument);
}

TEST(SplitCity, ChronologicalTail) {
    auto c = small_city(data::CityRegime::Regular, 1, 20);
    auto s = split_city(c, 0.2);
    EXPECT_EQ(s.train.size(), 16u);
    EXPECT_EQ(s.val.front(), 16u);
    EXPECT_EQ(s.val.back(), 19u);
    EXPECT_TRUE(s.mask.has_value());
    auto none = split_city(c, 0.0);
    EXPECT_EQ(none.train, none.val);
}

TEST(HistoryCsv, Format) {
    auto s = history_csv({{1, 0.5, 0.25, 1e-3, 0.0}});
    EXPECT_EQ(s, "epoch,train_loss,val_loss,lr,cache_hit_rate\n1,0.5,0.25,0.001,0\n");
}

namespace {

struct MetaFixture {
    data::CityData city = small_city(data::CityRegime::WeakChaotic, 11, 24);
    ModelConfig mc{12, 12, data::kInputFeatures, 8, 2, 1, 8, 8, 8, 0};
    TrainConfig tc;

    MetaFixture() {
        tc.noise_sigma = 0.0;
        tc.dropout = 0.0;
    }
};

}  // namespace

TEST(MetaStep, ZeroInnerRateIsPlainQueryStep) {
    for (int variant = 0; variant < 2; ++variant) {
        MetaFixture f;
        if (variant == 0) f.tc.inner_lr = 0.0;
        else f.tc.n_inner = 0;
        auto cs = split_city(f.city, 0.0);
        Trainer meta(f.mc, f.tc, 5), plain(f.mc, f.tc, 5);
        meta.prepare({cs});
        plain.prepare({cs});
        std::mt19937_64 rng(1);
        auto ep = sample_episode(cs.train, 8, 12, rng);
        AdamW o1(f.tc.weight_decay), o2(f.tc.weight_decay);
        const double q = meta.meta_step(cs, ep, o1);
        const double q2 = plain.loss_and_grad(plain.params(), cs, ep.query);
        clip_gradients(plain.params(), f.tc.clip);
        o2.step(plain.params(), f.tc.outer_lr);
        EXPECT_EQ(q, q2);
        for (auto& [name, p] : meta.params()) {
            const auto& other = plain.params().at(name);
            for (std::size_t i = 0; i < p.numel(); ++i) ASSERT_EQ(p.data()[i], other.data()[i]) << name;
        }
    }
}

TEST(MetaStep, ChangesParametersAndKeepsQueryFinite) {
    MetaFixture f;
    auto cs = split_city(f.city, 0.0);
    Trainer tr(f.mc, f.tc, 6);
    tr.prepare({cs});
    auto before = tr.params().clone();
    std::mt19937_64 rng(2);
    AdamW outer(f.tc.weight_decay);
    const double q = tr.meta_step(cs, sample_episode(cs.train, 8, 12, rng), outer);
    EXPECT_TRUE(std::isfinite(q));
    double moved = 0.0;
    for (auto& [name, p] : tr.params())
        for (std::size_t i = 0; i < p.numel(); ++i) moved += std::abs(p.data()[i] - before.at(name).data()[i]);
    EXPECT_GT(moved, 0.0);
}

TEST(Fit, IdenticalSeedsGiveIdenticalHistory) {
    auto c = small_city(data::CityRegime::Chaotic, 2, 24);
    ModelConfig mc{12, 12, data::kInputFeatures, 8, 2, 1, 8, 8, 8, 0};
    TrainConfig tc;
    tc.epochs = 3;
    auto a = fit({}, &c, mc, tc, 42);
    auto b = fit({}, &c, mc, tc, 42);
    EXPECT_EQ(history_csv(a.history), history_csv(b.history));
    EXPECT_EQ(a.history.size(), 3u);
    auto d = fit({}, &c, mc, tc, 43);
    EXPECT_NE(history_csv(a.history), history_csv(d.history));
}

TEST(Fit, NonFiniteLossCarriesDiagnostic) {
    auto c = small_city(data::CityRegime::Regular, 3, 16);
    ModelConfig mc{12, 12, data::kInputFeatures, 8, 2, 1, 8, 8, 8, 0};
    Trainer tr(mc, TrainConfig{}, 1);
    auto cs = split_city(c, 0.0);
    tr.prepare({cs});
    tr.params().at("head.s.mean.b2").mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
    AdamW opt;
    try {
        tr.train_epoch(cs, opt, 1e-3, 1.0, 1);
        FAIL() << "expected NonFiniteLoss";
    } catch (const NonFiniteLoss& e) {
        EXPECT_NE(std::string(e.what()).find("head.s.mean.b2"), std::string::npos) << e.what();
    }
}

TEST(Fit, TwoStageAndMetaRounds) {
    auto src = small_city(data::CityRegime::WeakChaotic, 4, 40);
    auto tgt = small_city(data::CityRegime::WeakChaotic, 5, 24, 2.0);
    ModelConfig mc{12, 12, data::kInputFeatures, 8, 2, 1, 8, 8, 8, 0};
    TrainConfig tc;
    tc.epochs = 2;
    tc.target_epochs = 3;
    tc.meta_rounds = 2;
    auto r = fit({&src}, &tgt, mc, tc, 9);
    EXPECT_EQ(r.history.size(), 5u);
    for (std::size_t i = 0; i < r.history.size(); ++i) EXPECT_EQ(r.history[i].epoch, i + 1);
    EXPECT_THROW(fit({}, nullptr, mc, tc, 1), InvalidArgument);
}

TEST(Fit, EpochEndLossDecreasesOnOverfitSet) {
    // Full pass over the training windows after every epoch (no noise, no dropout).
    auto c = small_city(data::CityRegime::WeakChaotic, 1);
    int monotone = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto r = fit({}, &c, ModelConfig{}, castckt::testing::overfit_config(20), seed);
        bool ok = r.history.size() == 20;
        for (std::size_t i = 1; i < r.history.size(); ++i) ok = ok && r.history[i].val_loss < r.history[i - 1].val_loss;
        monotone += ok;
    }
    EXPECT_GE(monotone, 9);
}
