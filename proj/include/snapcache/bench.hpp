#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "snapcache/error.hpp"
#include "snapcache/rng.hpp"
#include "snapcache/snapkv.hpp"
#include "snapcache/toymodel.hpp"

namespace snapcache {

enum class BenchMode { baseline, snapkv };

inline std::string_view to_string(BenchMode m) { return m == BenchMode::baseline ? "baseline" : "snapkv"; }

struct SweepConfig {
    std::vector<std::size_t> prompt_lengths{1024, 2048, 4096, 8192, 16384};
    std::vector<std::size_t> batch_sizes{1};
    std::size_t gen_len{128};  // timed decode steps per run
    std::size_t repeats{5};
    std::size_t warmup{1};
    std::vector<BenchMode> modes{BenchMode::baseline, BenchMode::snapkv};
    CompressionConfig compression{};
    ModelConfig model{512, 256, 4, 4, 4, 64, 512, 0, Precision::f32, 10000.0};
    bool include_prefill{false};
    // Grid points whose projected cache exceeds this are recorded as OOM.
    std::optional<std::size_t> memory_limit_bytes{};
    std::uint64_t prompt_seed{0};

    void validate() const {
        if (repeats < 3) throw ConfigError("bench.repeats: must be at least 3");
        if (warmup < 1) throw ConfigError("bench.warmup: must be at least 1");
        if (gen_len < 1) throw ConfigError("bench.gen_len: must be at least 1");
        if (prompt_lengths.empty()) throw ConfigError("bench.prompt_lengths: empty");
        for (std::size_t i = 0; i < prompt_lengths.size(); ++i) {
            if (prompt_lengths[i] == 0) throw ConfigError("bench.prompt_lengths: lengths must be positive");
            if (i > 0 && prompt_lengths[i] <= prompt_lengths[i - 1]) {
                throw ConfigError("bench.prompt_lengths: must be strictly increasing");
            }
        }
        if (batch_sizes.empty()) throw ConfigError("bench.batch_sizes: empty");
        for (std::size_t b : batch_sizes) {
            if (b == 0) throw ConfigError("bench.batch_sizes: sizes must be positive");
        }
        if (modes.empty()) throw ConfigError("bench.modes: empty");
        compression.validate();
        model.validate();
    }
};

struct BenchRecord {
    BenchMode mode{BenchMode::baseline};
    std::size_t prompt_len{0};
    std::size_t batch{1};
    double median_ms_per_token{0.0};
    double p90_ms_per_token{0.0};
    std::size_t cache_bytes{0};
    std::size_t peak_rss_estimate{0};
    bool oom{false};
    double prefill_ms{0.0};  // prefill (+ compression) of one sequence
};

// Exact bytes of the prompt caches of `batch` sequences: entries summed over
// layers, times K and V, kv heads, head_dim and element size.
inline std::size_t cache_bytes(std::span<const std::size_t> entries_per_layer, std::size_t kv_heads,
                               std::size_t head_dim, std::size_t element_size, std::size_t batch = 1) {
    std::size_t entries = 0;
    for (std::size_t e : entries_per_layer) entries += e;
    return batch * entries * 2 * kv_heads * head_dim * element_size;
}

// Peak resident set (VmHWM) in bytes; 0 where /proc is unavailable.
inline std::size_t peak_rss_bytes() {
    std::ifstream in("/proc/self/status");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("VmHWM:", 0) == 0) return std::stoull(line.substr(6)) * 1024;
    }
    return 0;
}

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Nearest-rank percentile, q in (0, 1].
inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
    return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

struct LineFit {
    double slope{0.0};
    double intercept{0.0};
    double r2{0.0};
};

// Ordinary least squares y = slope * x + intercept.
inline LineFit fit_line(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw Error("fit_line: need at least two paired points");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0) throw Error("fit_line: x values are all equal");
    LineFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double ss_res = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = y[i] - (fit.slope * x[i] + fit.intercept);
        ss_res += r * r;
    }
    fit.r2 = syy == 0.0 ? 1.0 : 1.0 - ss_res / syy;
    return fit;
}

inline std::vector<std::int32_t> bench_prompt(std::size_t len, std::size_t vocab, std::uint64_t seed) {
    Rng rng(mix_seed(seed, len));
    std::vector<std::int32_t> tokens(len);
    for (auto& t : tokens) t = static_cast<std::int32_t>(rng.uniform_int(0, static_cast<std::int64_t>(vocab) - 1));
    return tokens;
}

using BenchProgress = std::function<void(const BenchRecord&)>;

// Per-token decode latency over the grid. Each prompt length is prefilled
// once; every run starts from fresh copies of that prefilled state, so both
// modes decode the same seeded stream. A batch of B advances B independent
// sessions round-robin on one thread; one timed step is one token for every
// sequence in the batch. Prefill is never inside the timed region.
//
// All grid points are prefilled up front and their timed repeats are
// interleaved (repeat r of every point before repeat r+1 of any), so slow
// drift of the host spreads over the whole grid instead of one point.
template <typename T>
std::vector<BenchRecord> run_sweep(const SweepConfig& config, const BenchProgress& progress = {}) {
    config.validate();
    using clock = std::chrono::steady_clock;
    ModelConfig mc = config.model;
    mc.precision = precision_of<T>();
    const Model<T> model(mc);

    struct Point {
        BenchRecord rec;
        std::shared_ptr<const Session<T>> base;
        std::vector<double> step_ms;
    };
    std::vector<Point> points;

    for (std::size_t len : config.prompt_lengths) {
        const auto prompt = bench_prompt(len, mc.vocab, config.prompt_seed);
        // One full prefill per length; the snapkv state compresses its caches
        // layer by layer from the same observation weights, which gives the
        // same caches as compressing during the prefill.
        std::optional<Session<T>> full;
        double full_ms = 0.0;
        try {
            PrefillRequest request;
            request.obs_window = config.compression.window_size;
            request.keep_obs_weights = true;
            const auto t0 = clock::now();
            full = model.prefill(prompt, request);
            full_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        } catch (const std::bad_alloc&) {
            full.reset();
        }

        for (BenchMode mode : config.modes) {
            std::shared_ptr<Session<T>> base;
            double prefill_ms = full_ms;
            if (full) {
                try {
                    base = std::make_shared<Session<T>>(*full);
                    if (mode == BenchMode::snapkv) {
                        const auto t0 = clock::now();
                        for (std::size_t l = 0; l < base->caches.size(); ++l) {
                            base->caches[l] = snap(base->caches[l], base->obs_weights[l], config.compression).cache;
                        }
                        prefill_ms += std::chrono::duration<double, std::milli>(clock::now() - t0).count();
                    }
                    base->obs_weights.clear();
                } catch (const std::bad_alloc&) {
                    base.reset();
                }
            }

            for (std::size_t batch : config.batch_sizes) {
                Point pt;
                pt.rec.mode = mode;
                pt.rec.prompt_len = len;
                pt.rec.batch = batch;
                pt.rec.prefill_ms = prefill_ms;
                if (!base) {
                    pt.rec.oom = true;
                    points.push_back(std::move(pt));
                    continue;
                }
                std::vector<std::size_t> entries;
                for (const auto& c : base->caches) entries.push_back(c.seq_len());
                pt.rec.cache_bytes = cache_bytes(entries, mc.num_kv_heads, mc.head_dim, sizeof(T), batch);

                std::vector<std::size_t> final_entries = entries;
                for (auto& e : final_entries) e += config.gen_len;
                const std::size_t projected =
                    cache_bytes(final_entries, mc.num_kv_heads, mc.head_dim, sizeof(T), batch);
                if (config.memory_limit_bytes && projected > *config.memory_limit_bytes) {
                    pt.rec.oom = true;
                } else {
                    pt.base = base;
                }
                points.push_back(std::move(pt));
            }
        }
    }

    const auto run_once = [&](Point& pt, bool record) {
        if (pt.rec.oom) return;
        try {
            std::vector<Session<T>> sessions(pt.rec.batch, *pt.base);
            for (std::size_t s = 0; s < config.gen_len; ++s) {
                const auto t0 = clock::now();
                for (auto& session : sessions) model.step(session);
                const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
                if (record) pt.step_ms.push_back(ms);
            }
        } catch (const std::bad_alloc&) {
            pt.rec.oom = true;
            pt.base.reset();
        }
    };
    for (std::size_t w = 0; w < config.warmup; ++w) {
        for (auto& pt : points) run_once(pt, false);
    }
    for (std::size_t r = 0; r < config.repeats; ++r) {
        for (auto& pt : points) run_once(pt, true);
    }

    std::vector<BenchRecord> records;
    for (auto& pt : points) {
        if (!pt.rec.oom) {
            pt.rec.median_ms_per_token = median(pt.step_ms);
            pt.rec.p90_ms_per_token = percentile(pt.step_ms, 0.9);
        }
        pt.rec.peak_rss_estimate = peak_rss_bytes();
        records.push_back(pt.rec);
        if (progress) progress(pt.rec);
    }
    return records;
}

inline void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records) {
    out << "mode,prompt_len,batch,median_ms_per_token,p90_ms_per_token,cache_bytes,oom\n";
    for (const auto& r : records) {
        out << fmt::format("{},{},{},{:.4f},{:.4f},{},{}\n", to_string(r.mode), r.prompt_len, r.batch,
                           r.median_ms_per_token, r.p90_ms_per_token, r.cache_bytes, r.oom ? 1 : 0);
    }
}

// Written only with --include-prefill; prefill is kept out of the main table.
inline void write_prefill_csv(std::ostream& out, const std::vector<BenchRecord>& records) {
    out << "mode,prompt_len,prefill_ms\n";
    for (const auto& r : records) {
        if (r.batch != records.front().batch) continue;
        out << fmt::format("{},{},{:.3f}\n", to_string(r.mode), r.prompt_len, r.prefill_ms);
    }
}

} // namespace snapcache
