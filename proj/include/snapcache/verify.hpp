#pragma once

// Self-check suites behind `snapcache verify`. Every case is seeded from
// (run seed, case index) and logs one timing-free line, so two runs with the
// same seed produce identical logs.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "snapcache/attention.hpp"
#include "snapcache/config.hpp"
#include "snapcache/metrics.hpp"
#include "snapcache/oracle.hpp"
#include "snapcache/rng.hpp"
#include "snapcache/snapkv.hpp"
#include "snapcache/synth.hpp"
#include "snapcache/toymodel.hpp"

namespace snapcache::verify {

struct SuiteResult {
    std::string name;
    std::size_t cases{0};
    std::size_t failures{0};
    std::optional<std::uint64_t> first_failing_seed;
    std::string detail;

    bool passed() const { return failures == 0; }

    void fail(std::uint64_t seed) {
        ++failures;
        if (!first_failing_seed) first_failing_seed = seed;
    }
};

// Random causal observation weights: `window` softmax rows (the last window
// queries) over a prompt of `prompt` keys. Coarse logits make exact ties in
// vote scores common so the tie-break is exercised.
inline Tensor<double> random_obs_weights(Rng& rng, std::size_t heads, std::size_t window, std::size_t prompt,
                                         bool coarse) {
    Tensor<double> w({heads, window, prompt});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < window; ++i) {
            auto row = w.row(h * window + i);
            const std::size_t visible = prompt - window + i + 1;
            for (std::size_t j = 0; j < prompt; ++j) {
                row[j] = j < visible ? (coarse ? static_cast<double>(rng.uniform_int(0, 2)) : rng.normal() * 2.0)
                                     : kMaskValue;
            }
            softmax_inplace(row);
        }
    }
    return w;
}

inline KvCache<double> random_cache(Rng& rng, std::size_t heads, std::size_t seq, std::size_t head_dim) {
    Tensor<double> k({heads, seq, head_dim});
    Tensor<double> v({heads, seq, head_dim});
    for (auto& x : k.data()) x = rng.normal();
    for (auto& x : v.data()) x = rng.normal();
    std::vector<std::size_t> pos(seq);
    for (std::size_t t = 0; t < seq; ++t) pos[t] = t;
    return KvCache<double>(k, v, pos);
}

// snap's kept prefix set equals the brute-force oracle; the window is kept,
// sizes match, and gathered rows are bit-identical copies.
inline SuiteResult oracle_equivalence(std::uint64_t seed, std::size_t cases, std::ostream& log) {
    SuiteResult r;
    r.name = "oracle-equivalence";
    for (std::size_t i = 0; i < cases; ++i) {
        const std::uint64_t s = mix_seed(seed, i);
        Rng rng(s);
        const auto heads = static_cast<std::size_t>(rng.uniform_int(1, 4));
        const auto prompt = static_cast<std::size_t>(rng.uniform_int(8, 256));
        const auto window = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(std::min<std::size_t>(16, prompt / 2))));
        const auto capacity = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(window + 1), static_cast<std::int64_t>(prompt)));
        const std::size_t kernels[] = {1, 3, 5, 7};
        const std::size_t kernel = kernels[rng.uniform_int(0, 3)];
        const PoolMode pooling = rng.uniform_int(0, 1) == 0 ? PoolMode::max : PoolMode::avg;
        const bool coarse = rng.uniform_int(0, 3) == 0;

        const Tensor<double> obs = random_obs_weights(rng, heads, window, prompt, coarse);
        const KvCache<double> cache = random_cache(rng, heads, prompt, 4);
        const CompressionConfig config{window, capacity, kernel, pooling, std::nullopt};
        const SnapResult<double> out = snap(cache, obs, config);
        const std::size_t k = capacity - window;
        const auto expected = oracle::kept_prefix_positions(obs, window, k, kernel, pooling);

        bool ok = out.compressed && out.cache.seq_len() == std::min(prompt, capacity);
        for (std::size_t h = 0; ok && h < heads; ++h) {
            const auto& pos = out.cache.positions(h);
            ok = std::vector<std::size_t>(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k)) == expected[h];
            for (std::size_t t = 0; ok && t < window; ++t) ok = pos[k + t] == prompt - window + t;
            for (std::size_t t = 0; ok && t < pos.size(); ++t) {
                const auto a = out.cache.key(h, t), b = cache.key(h, pos[t]);
                const auto c = out.cache.value(h, t), d = cache.value(h, pos[t]);
                ok = std::equal(a.begin(), a.end(), b.begin()) && std::equal(c.begin(), c.end(), d.begin());
            }
        }
        if (!ok) r.fail(s);
        ++r.cases;
        log << fmt::format("oracle case {} seed={} heads={} prompt={} window={} capacity={} kernel={} pooling={}: {}\n",
                           i, s, heads, prompt, window, capacity, kernel, to_string(pooling), ok ? "ok" : "MISMATCH");
    }
    return r;
}

inline ModelConfig random_small_model(Rng& rng, std::uint64_t seed) {
    ModelConfig m;
    const std::size_t heads_options[] = {1, 2, 4};
    m.num_heads = heads_options[rng.uniform_int(0, 2)];
    std::vector<std::size_t> kv;
    for (std::size_t d = 1; d <= m.num_heads; ++d) {
        if (m.num_heads % d == 0) kv.push_back(d);
    }
    m.num_kv_heads = kv[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(kv.size()) - 1))];
    m.head_dim = rng.uniform_int(0, 1) == 0 ? 4 : 8;
    m.d_model = m.num_heads * m.head_dim;
    m.layers = static_cast<std::size_t>(rng.uniform_int(1, 3));
    m.vocab = static_cast<std::size_t>(rng.uniform_int(16, 64));
    m.mlp_hidden = static_cast<std::size_t>(rng.uniform_int(8, 32));
    m.seed = seed;
    m.precision = Precision::f64;
    return m;
}

inline std::vector<std::int32_t> random_prompt(Rng& rng, std::size_t len, std::size_t vocab) {
    std::vector<std::int32_t> p(len);
    for (auto& t : p) t = static_cast<std::int32_t>(rng.uniform_int(0, static_cast<std::int64_t>(vocab) - 1));
    return p;
}

// Capacity >= prompt length: compressed generation is token-identical.
inline SuiteResult lossless_equivalence(std::uint64_t seed, std::size_t cases, std::ostream& log) {
    SuiteResult r;
    r.name = "lossless-equivalence";
    for (std::size_t i = 0; i < cases; ++i) {
        const std::uint64_t s = mix_seed(seed ^ 0x10551e55ULL, i);
        Rng rng(s);
        const Model<double> model(random_small_model(rng, s));
        const auto len = static_cast<std::size_t>(rng.uniform_int(8, 40));
        const auto prompt = random_prompt(rng, len, model.config().vocab);
        const auto capacity = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(len), static_cast<std::int64_t>(len + 8)));
        const auto window = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(std::min<std::size_t>(8, capacity - 1))));
        const CompressionConfig config{window, capacity, 5, PoolMode::max, std::nullopt};
        const std::size_t gen_len = 6;

        const GenerationResult plain = generate(model, prompt, gen_len);
        const GenerationResult packed = generate(model, prompt, gen_len, config);
        bool ok = plain.tokens == packed.tokens;
        for (std::size_t e : packed.cache_entries_per_layer) ok = ok && e == std::min(len, capacity) + gen_len - 1;
        if (!ok) r.fail(s);
        ++r.cases;
        log << fmt::format("lossless case {} seed={} prompt={} capacity={} window={} tokens={}: {}\n", i, s, len,
                           capacity, window, fmt::join(packed.tokens, " "), ok ? "ok" : "MISMATCH");
    }
    return r;
}

// Every layer's cache holds min(L_prompt, capacity) entries after prefill,
// the observation window survives, and decode positions continue from L.
inline SuiteResult cache_size_bound(std::uint64_t seed, std::size_t cases, std::ostream& log) {
    SuiteResult r;
    r.name = "cache-size-bound";
    for (std::size_t i = 0; i < cases; ++i) {
        const std::uint64_t s = mix_seed(seed ^ 0x517eb0dULL, i);
        Rng rng(s);
        const Model<double> model(random_small_model(rng, s));
        const auto window = static_cast<std::size_t>(rng.uniform_int(1, 8));
        const auto capacity = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(window + 1), 32));
        const auto len = static_cast<std::size_t>(rng.uniform_int(8, 96));
        const auto prompt = random_prompt(rng, len, model.config().vocab);
        PrefillRequest request;
        request.compression = CompressionConfig{window, capacity, 3, PoolMode::max, std::nullopt};
        Session<double> session = model.prefill(prompt, request);
        const std::size_t expected = std::min(len, capacity);
        bool ok = true;
        for (const auto& cache : session.caches) {
            ok = ok && cache.seq_len() == expected;
            for (std::size_t h = 0; ok && h < cache.num_kv_heads(); ++h) {
                const auto& pos = cache.positions(h);
                for (std::size_t t = 0; ok && t < std::min(window, expected); ++t) {
                    ok = pos[expected - 1 - t] == len - 1 - t;
                }
            }
        }
        model.step(session);
        for (const auto& cache : session.caches) {
            ok = ok && cache.seq_len() == expected + 1 && cache.positions(0).back() == len;
        }
        if (!ok) r.fail(s);
        ++r.cases;
        log << fmt::format("size case {} seed={} prompt={} capacity={} window={} kept={}: {}\n", i, s, len, capacity,
                           window, session.caches.front().seq_len() - 1, ok ? "ok" : "MISMATCH");
    }
    return r;
}

struct ClusterCase {
    std::uint64_t seed{0};
    std::size_t width{1};
    std::size_t kernel{3};
    std::size_t k{0};
    std::size_t pooled_hits{0};     // planted positions kept, uniform cluster, max pooling
    std::size_t unpooled_hits{0};   // planted positions kept, leading-mass cluster, kernel 1
    std::size_t planted{0};         // planted positions per run, summed over heads
};

// One planted contiguous cluster per head. The pooled run uses a cluster of
// equal maximal mass; the unpooled run puts the cluster's mass on its first
// position, which is where a plain top-k loses the rest of the cluster.
inline ClusterCase cluster_case(std::uint64_t s) {
    Rng rng(s);
    ClusterCase c;
    c.seed = s;
    const std::size_t kernels[] = {3, 5, 7};
    c.kernel = kernels[rng.uniform_int(0, 2)];
    c.width = static_cast<std::size_t>(rng.uniform_int(2, static_cast<std::int64_t>(c.kernel)));
    c.k = c.width + c.kernel - 1 + static_cast<std::size_t>(rng.uniform_int(0, 2));
    const auto heads = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const auto prefix = static_cast<std::size_t>(rng.uniform_int(64, 256));
    const auto obs = static_cast<std::size_t>(rng.uniform_int(4, 16));

    PlantedSpec spec;
    spec.prefix_len = prefix;
    spec.obs_len = obs;
    spec.heads = heads;
    spec.planted_mass = 0.6;
    spec.cluster_width = c.width;
    spec.seed = rng.next_u64();
    for (std::size_t h = 0; h < heads; ++h) {
        spec.planted.push_back(random_cluster_starts(prefix, 1, c.width, c.kernel, rng));
    }

    spec.profile = ClusterProfile::uniform;
    const PlantedAttention uniform = planted_attention(spec);
    const auto pooled = select_topk(vote(uniform.weights, obs), c.k, c.kernel, PoolMode::max);

    spec.profile = ClusterProfile::leading;
    const PlantedAttention leading = planted_attention(spec);
    const auto unpooled = select_topk(vote(leading.weights, obs), c.k, 1, PoolMode::max);

    for (std::size_t h = 0; h < heads; ++h) {
        c.planted += uniform.planted[h].size();
        for (std::size_t p : uniform.planted[h]) {
            if (std::binary_search(pooled.indices[h].begin(), pooled.indices[h].end(), p)) ++c.pooled_hits;
            if (std::binary_search(unpooled.indices[h].begin(), unpooled.indices[h].end(), p)) ++c.unpooled_hits;
        }
    }
    return c;
}

// Pooled selection keeps every planted position; the unpooled ablation keeps
// strictly fewer in at least 95% of cases.
inline SuiteResult cluster_preservation(std::uint64_t seed, std::size_t cases, std::ostream& log) {
    SuiteResult r;
    r.name = "cluster-preservation";
    std::size_t fewer = 0;
    for (std::size_t i = 0; i < cases; ++i) {
        const ClusterCase c = cluster_case(mix_seed(seed ^ 0xc105e5ULL, i));
        const bool ok = c.pooled_hits == c.planted;
        if (c.unpooled_hits < c.planted) ++fewer;
        if (!ok) r.fail(c.seed);
        ++r.cases;
        log << fmt::format("cluster case {} seed={} width={} kernel={} k={} pooled={}/{} unpooled={}/{}: {}\n", i,
                           c.seed, c.width, c.kernel, c.k, c.pooled_hits, c.planted, c.unpooled_hits, c.planted,
                           ok ? "ok" : "MISSED");
    }
    const bool ablation_ok = cases == 0 || static_cast<double>(fewer) >= 0.95 * static_cast<double>(cases);
    if (!ablation_ok) ++r.failures;
    r.detail = fmt::format("unpooled kept fewer in {}/{}", fewer, cases);
    log << "cluster ablation: " << r.detail << (ablation_ok ? ": ok\n" : ": BELOW 95%\n");
    return r;
}

// Popcount over 64-bit words, written independently of hit_rate's loop.
struct PackedMask {
    std::vector<std::uint64_t> words;
};

inline PackedMask pack(const FeatureMask& m) {
    PackedMask p;
    const std::size_t n = m.heads() * m.prefix_len();
    p.words.assign((n + 63) / 64, 0);
    for (std::size_t i = 0; i < n; ++i) {
        if (m.get(i / m.prefix_len(), i % m.prefix_len())) p.words[i / 64] |= std::uint64_t{1} << (i % 64);
    }
    return p;
}

inline double popcount_hit_rate(const FeatureMask& important, const FeatureMask& selected) {
    const PackedMask a = pack(important), b = pack(selected);
    std::size_t both = 0, total = 0;
    for (std::size_t i = 0; i < a.words.size(); ++i) {
        both += static_cast<std::size_t>(std::popcount(a.words[i] & b.words[i]));
        total += static_cast<std::size_t>(std::popcount(a.words[i]));
    }
    return total == 0 ? 1.0 : static_cast<double>(both) / static_cast<double>(total);
}

// hit_rate equals the popcount oracle exactly, and scaling (A_cur, theta) by
// c in {0.5, 2, 10} leaves the threshold mask and the hit rate unchanged.
inline SuiteResult hitrate_formula(std::uint64_t seed, std::size_t cases, std::ostream& log) {
    SuiteResult r;
    r.name = "hit-rate-formula";
    for (std::size_t i = 0; i < cases; ++i) {
        const std::uint64_t s = mix_seed(seed ^ 0x417a7eULL, i);
        Rng rng(s);
        const auto heads = static_cast<std::size_t>(rng.uniform_int(1, 4));
        const auto prefix = static_cast<std::size_t>(rng.uniform_int(1, 200));
        const double density_a = rng.uniform();
        const double density_b = rng.uniform();
        FeatureMask a(heads, prefix), b(heads, prefix);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t j = 0; j < prefix; ++j) {
                a.set(h, j, rng.uniform() < density_a);
                b.set(h, j, rng.uniform() < density_b);
            }
        }
        bool ok = hit_rate(a, b).value == popcount_hit_rate(a, b);

        Tensor<double> a_cur({heads, prefix});
        for (auto& x : a_cur.data()) x = rng.normal();
        for (std::size_t h = 0; h < heads; ++h) softmax_inplace(a_cur.row(h));
        const double theta = rng.uniform(0.0, 2.0 / static_cast<double>(prefix));
        const FeatureMask base = threshold_mask(a_cur, theta);
        const double base_rate = hit_rate(base, b).value;
        for (double c : {0.5, 2.0, 10.0}) {
            Tensor<double> scaled = a_cur;
            for (auto& x : scaled.data()) x *= c;
            const FeatureMask m = threshold_mask(scaled, theta * c);
            ok = ok && m == base && hit_rate(m, b).value == base_rate;
        }
        if (!ok) r.fail(s);
        ++r.cases;
        log << fmt::format("hitrate case {} seed={} heads={} prefix={}: {}\n", i, s, heads, prefix, ok ? "ok" : "MISMATCH");
    }
    return r;
}

inline std::vector<SuiteResult> run_all(std::uint64_t seed, const VerifyConfig& counts, std::ostream& log) {
    return {
        oracle_equivalence(seed, counts.oracle_cases, log),
        lossless_equivalence(seed, counts.lossless_cases, log),
        cache_size_bound(seed, counts.size_cases, log),
        cluster_preservation(seed, counts.cluster_cases, log),
        hitrate_formula(seed, counts.hitrate_cases, log),
    };
}

inline void print_table(std::ostream& out, const std::vector<SuiteResult>& results) {
    out << fmt::format("{:<24} {:>6} {:>9}  {}\n", "suite", "cases", "failures", "result");
    for (const auto& r : results) {
        out << fmt::format("{:<24} {:>6} {:>9}  {}", r.name, r.cases, r.failures, r.passed() ? "PASS" : "FAIL");
        if (r.first_failing_seed) out << fmt::format("  (replay seed {})", *r.first_failing_seed);
        if (!r.detail.empty()) out << "  " << r.detail;
        out << "\n";
    }
}

} // namespace snapcache::verify
