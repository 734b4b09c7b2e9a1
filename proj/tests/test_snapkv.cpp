#include <gtest/gtest.h>

#include <algorithm>
#include <vector>

#include "oracles.hpp"
#include "snapcache/oracle.hpp"
#include "snapcache/snapkv.hpp"
#include "snapcache/verify.hpp"

using namespace snapcache;

namespace {

VoteScores<double> scores(std::vector<double> v) {
    const std::size_t n = v.size();
    return {Tensor<double>({1, n}, std::move(v))};
}

std::vector<std::size_t> iota(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

KvCache<double> random_cache(Rng& rng, std::size_t heads, std::size_t seq) {
    return verify::random_cache(rng, heads, seq, 4);
}

CompressionConfig capacity(std::size_t window, std::size_t cap, std::size_t kernel = 5,
                           PoolMode pooling = PoolMode::max) {
    return {window, cap, kernel, pooling, std::nullopt};
}

CompressionConfig rate(std::size_t window, double p, std::size_t kernel = 5) {
    return {window, std::nullopt, kernel, PoolMode::max, p};
}

} // namespace

TEST(Vote, UniformRowsGiveEqualScores) {
    // 1 head, 2 observation rows uniform over 4 positions, 2 prefix columns.
    const Tensor<double> w({1, 2, 4}, std::vector<double>(8, 0.25));
    const auto v = vote(w, 2);
    EXPECT_EQ(v.scores, Tensor<double>({1, 2}, {0.5, 0.5}));
}

TEST(Vote, DeltaRowsConcentrateOnOnePosition) {
    const std::size_t obs = 4, prompt = 10;
    Tensor<double> w({1, obs, prompt});
    for (std::size_t i = 0; i < obs; ++i) w.at({0, i, 3}) = 1.0;
    const auto v = vote(w, obs);
    for (std::size_t j = 0; j < prompt - obs; ++j) EXPECT_EQ(v.scores[j], j == 3 ? double(obs) : 0.0);
}

TEST(Vote, MatchesColumnSumOracle) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const auto heads = static_cast<std::size_t>(rng.uniform_int(1, 4));
        const auto window = static_cast<std::size_t>(rng.uniform_int(1, 8));
        const auto prompt = window + static_cast<std::size_t>(rng.uniform_int(1, 50));
        const auto w = verify::random_obs_weights(rng, heads, window, prompt, false);
        const auto v = vote(w, window);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t j = 0; j < prompt - window; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < window; ++i) s += w.at({h, i, j});
                ASSERT_NEAR(v.scores.at({h, j}), s, 1e-12);
            }
        }
    }
}

TEST(Vote, UsesOnlyTheLastWindowRows) {
    Tensor<double> w({1, 3, 5});
    w.at({0, 0, 0}) = 100.0;  // outside a window of 2
    w.at({0, 1, 1}) = 1.0;
    w.at({0, 2, 2}) = 1.0;
    EXPECT_EQ(vote(w, 2).scores, Tensor<double>({1, 3}, {0, 1, 1}));
}

TEST(Vote, Errors) {
    EXPECT_THROW(vote(Tensor<double>({1, 2, 2}), 2), ShapeError);  // no prefix
    EXPECT_THROW(vote(Tensor<double>({1, 2, 8}), 3), ShapeError);  // too few rows
    EXPECT_THROW(vote(Tensor<double>({2, 8}), 1), ShapeError);
}

TEST(CapacityK, RateFloorsPrefix) { EXPECT_EQ(capacity_k(rate(4, 0.5), 7), 3u); }

TEST(CapacityK, CapacityMinusWindow) {
    EXPECT_EQ(capacity_k(capacity(16, 1024), 1008), 1008u);
    EXPECT_EQ(capacity_k(capacity(16, 1024), 389120 - 16), 1008u);
}

TEST(CapacityK, ClampsToPrefix) {
    EXPECT_EQ(capacity_k(rate(4, 1.0), 5), 5u);
    EXPECT_EQ(capacity_k(capacity(2, 100), 5), 5u);
    EXPECT_EQ(capacity_k(rate(4, 0.01), 5), 1u);
}

TEST(CompressionConfig, Validation) {
    EXPECT_NO_THROW(CompressionConfig{}.validate());
    EXPECT_THROW(capacity(16, 16).validate(), ConfigError);
    EXPECT_THROW(capacity(16, 64, 4).validate(), ConfigError);
    EXPECT_THROW(capacity(0, 64).validate(), ConfigError);
    EXPECT_THROW(rate(4, 0.0).validate(), ConfigError);
    EXPECT_THROW(rate(4, 1.5).validate(), ConfigError);
    CompressionConfig both = capacity(4, 64);
    both.compression_rate = 0.5;
    EXPECT_THROW(both.validate(), ConfigError);
    CompressionConfig neither = capacity(4, 64);
    neither.max_capacity_prompt.reset();
    EXPECT_THROW(neither.validate(), ConfigError);
}

TEST(SelectTopk, PoolingClustersAroundSpike) {
    const auto s = select_topk(scores({0, 0, 9, 0, 0}), 3, 3, PoolMode::max);
    EXPECT_EQ(s.indices[0], (std::vector<std::size_t>{1, 2, 3}));
}

TEST(SelectTopk, PlainTopkWithoutPooling) {
    const auto s = select_topk(scores({5, 1, 4, 2}), 2, 1, PoolMode::max);
    EXPECT_EQ(s.indices[0], (std::vector<std::size_t>{0, 2}));
}

TEST(SelectTopk, TiesGoToLowestIndex) {
    EXPECT_EQ(select_topk(scores({3, 3, 3, 3}), 2, 1, PoolMode::max).indices[0], (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(select_topk(scores({1, 3, 0, 3, 3}), 2, 1, PoolMode::avg).indices[0], (std::vector<std::size_t>{1, 3}));
}

TEST(SelectTopk, RejectsBadK) {
    EXPECT_THROW(select_topk(scores({1, 2}), 0, 1, PoolMode::max), ShapeError);
    EXPECT_THROW(select_topk(scores({1, 2}), 3, 1, PoolMode::max), ShapeError);
}

TEST(SelectTopk, NestedUnderGrowingK) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(seed);
        const auto n = static_cast<std::size_t>(rng.uniform_int(2, 60));
        std::vector<double> v(n);
        for (auto& x : v) x = static_cast<double>(rng.uniform_int(0, 4));  // many ties
        const std::size_t kernel = 2 * static_cast<std::size_t>(rng.uniform_int(0, 3)) + 1;
        const PoolMode mode = seed % 2 == 0 ? PoolMode::max : PoolMode::avg;
        const auto sc = scores(v);
        for (std::size_t k = 1; k < n; ++k) {
            const auto a = select_topk(sc, k, kernel, mode).indices[0];
            const auto b = select_topk(sc, k + 1, kernel, mode).indices[0];
            ASSERT_TRUE(std::includes(b.begin(), b.end(), a.begin(), a.end())) << "seed " << seed << " k " << k;
        }
    }
}

// A run of w <= kernel equal maximal scores in zeros stays whole under max
// pooling once k covers the pooled plateau.
TEST(SelectTopk, ClusterOfEqualScoresIsKeptWhole) {
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        Rng rng(seed);
        const std::size_t kernel = 2 * static_cast<std::size_t>(rng.uniform_int(0, 3)) + 1;
        const auto w = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(kernel)));
        const auto n = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(w), 80));
        const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - w)));
        std::vector<double> v(n, 0.0);
        for (std::size_t i = start; i < start + w; ++i) v[i] = 1.0;
        const std::size_t k = std::min(n, w + kernel - 1 + static_cast<std::size_t>(rng.uniform_int(0, 3)));
        const auto sel = select_topk(scores(v), k, kernel, PoolMode::max).indices[0];
        for (std::size_t i = start; i < start + w; ++i) {
            ASSERT_TRUE(std::binary_search(sel.begin(), sel.end(), i)) << "seed " << seed;
        }
    }
}

TEST(PlanCompression, BypassAndRatio) {
    EXPECT_TRUE(plan_compression(100, capacity(16, 128)).bypass);
    const auto p = plan_compression(389120, capacity(16, 1024));
    EXPECT_FALSE(p.bypass);
    EXPECT_EQ(p.kept_len, 1024u);
    EXPECT_EQ(p.ratio_numerator() % p.ratio_denominator(), 0u);
    EXPECT_EQ(p.ratio_numerator() / p.ratio_denominator(), 380u);
    EXPECT_EQ(p.ratio(), 380.0);
    EXPECT_FALSE(plan_compression(128, capacity(16, 128)).bypass);
    EXPECT_EQ(plan_compression(128, capacity(16, 128)).kept_len, 128u);
    EXPECT_TRUE(plan_compression(4, rate(4, 0.5)).bypass);
    EXPECT_EQ(plan_compression(20, rate(4, 0.5)).kept_len, 12u);
}

TEST(Snap, ShortPromptPassesThrough) {
    Rng rng(1);
    const auto cache = random_cache(rng, 2, 100);
    const auto w = verify::random_obs_weights(rng, 2, 16, 100, false);
    const auto r = snap(cache, w, capacity(16, 128));
    EXPECT_FALSE(r.compressed);
    EXPECT_EQ(r.cache, cache);
    EXPECT_TRUE(r.selected.indices[0].empty());
}

TEST(Snap, SizeAndOrderingContract) {
    Rng rng(2);
    const auto cache = random_cache(rng, 3, 10);
    const auto w = verify::random_obs_weights(rng, 3, 2, 10, false);
    const auto r = snap(cache, w, capacity(2, 6, 3));
    ASSERT_EQ(r.cache.seq_len(), 6u);
    for (std::size_t h = 0; h < 3; ++h) {
        const auto& pos = r.cache.positions(h);
        EXPECT_EQ(pos[4], 8u);
        EXPECT_EQ(pos[5], 9u);
        EXPECT_TRUE(std::is_sorted(pos.begin(), pos.begin() + 4));
        EXPECT_LT(pos[3], 8u);
    }
}

TEST(Snap, OneHotObservationsKeepExactlyThosePositions) {
    Rng rng(3);
    const std::size_t prompt = 12, window = 3;
    const auto cache = random_cache(rng, 1, prompt);
    Tensor<double> w({1, window, prompt});
    const std::size_t targets[] = {1, 4, 7};
    for (std::size_t i = 0; i < window; ++i) w.at({0, i, targets[i]}) = 1.0;
    const auto r = snap(cache, w, capacity(window, window + 3, 1));
    EXPECT_EQ(r.selected.indices[0], (std::vector<std::size_t>{1, 4, 7}));
    EXPECT_EQ(r.cache.positions(0), (std::vector<std::size_t>{1, 4, 7, 9, 10, 11}));
}

TEST(Snap, GroupedQueryVotesTargetKvHeads) {
    // Query heads 0 and 1 share kv head 0; their summed rows decide the vote.
    Rng rng(4);
    const AttentionConfig cfg{4, 2, 8};
    const std::size_t seq = 40;
    const auto q = oracle_test::random_tensor(rng, {4, seq, 8}, 2.0);
    const auto k = oracle_test::random_tensor(rng, {2, seq, 8}, 2.0);
    const auto v = oracle_test::random_tensor(rng, {2, seq, 8});
    const auto pr = prefill(q, k, v, cfg, {8});
    const auto naive = oracle_test::naive_attention(q, k, v, 2, cfg.rope_base);
    const auto r = snap(pr.cache, pr.obs_weights, capacity(8, 20, 3));
    Tensor<double> summed({2, 8, seq});
    for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t j = 0; j < seq; ++j) summed.at({h / 2, i, j}) += naive.weights.at({h, seq - 8 + i, j});
    EXPECT_EQ(r.selected.indices, oracle::kept_prefix_positions(summed, 8, 12, 3, PoolMode::max));
}

TEST(Snap, RejectsMismatchedObservationWeights) {
    Rng rng(5);
    const auto cache = random_cache(rng, 2, 20);
    EXPECT_THROW(snap(cache, Tensor<double>({1, 4, 20}), capacity(4, 8)), ShapeError);
    EXPECT_THROW(snap(cache, Tensor<double>({2, 4, 19}), capacity(4, 8)), ShapeError);
}

TEST(Snap, MatchesOracleOnRandomCases) {
    std::ostringstream log;
    const auto r = verify::oracle_equivalence(99, 300, log);
    EXPECT_TRUE(r.passed()) << "replay seed " << r.first_failing_seed.value_or(0);
    EXPECT_EQ(r.cases, 300u);
}

TEST(Snap, RateDriverKeepsFloorOfPrefix) {
    Rng rng(6);
    const auto cache = random_cache(rng, 2, 50);
    const auto w = verify::random_obs_weights(rng, 2, 5, 50, false);
    const auto r = snap(cache, w, rate(5, 0.3));
    EXPECT_EQ(r.cache.seq_len(), 13u + 5u);  // floor(0.3 * 45) = 13
}

TEST(Snap, GatherIsACopyForBothPrecisions) {
    Rng rng(7);
    const auto cache = random_cache(rng, 2, 30);
    const auto w = verify::random_obs_weights(rng, 2, 4, 30, false);
    const KvCache<float> cf(cache.keys().cast<float>(), cache.values().cast<float>(), iota(30));
    const auto r = snap(cf, w.cast<float>(), capacity(4, 12));
    for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t t = 0; t < r.cache.seq_len(); ++t) {
            const auto a = r.cache.value(h, t), b = cf.value(h, r.cache.positions(h)[t]);
            ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
        }
    }
}
