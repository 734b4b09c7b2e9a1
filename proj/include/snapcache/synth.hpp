#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "snapcache/error.hpp"
#include "snapcache/metrics.hpp"
#include "snapcache/rng.hpp"
#include "snapcache/snapkv.hpp"
#include "snapcache/tensor.hpp"

namespace snapcache {

// How planted mass is spread over a widened cluster.
enum class ClusterProfile {
    uniform,  // every cluster position receives an equal share
    leading,  // all of a cluster's share lands on its first position
};

struct PlantedSpec {
    std::size_t prefix_len{64};
    std::size_t obs_len{8};
    std::size_t heads{1};
    std::vector<std::vector<std::size_t>> planted;  // per head, cluster start positions
    double planted_mass{0.6};
    std::size_t cluster_width{1};
    ClusterProfile profile{ClusterProfile::uniform};
    std::uint64_t seed{0};
};

struct PlantedAttention {
    Tensor<double> weights;                          // [heads, obs_len, prefix_len + obs_len]
    std::vector<std::vector<std::size_t>> planted;   // per head, widened and sorted ground truth
};

namespace detail {

// Fills row[0, support) with `mass` split evenly over `targets` and the rest
// as a symmetric Dirichlet(1) draw over the remaining support. Noise is drawn
// before scaling so the same seed gives the same noise shape for every mass.
// Non-strict rows with no noise positions put all mass on the targets.
inline void planted_row(std::span<double> row, std::size_t support, const std::vector<std::size_t>& targets,
                        double mass, Rng& rng, bool strict = true) {
    std::vector<char> is_target(support, 0);
    std::size_t visible = 0;
    for (std::size_t t : targets) {
        if (t < support && !is_target[t]) {
            is_target[t] = 1;
            ++visible;
        }
    }
    std::vector<double> noise(support, 0.0);
    double noise_total = 0.0;
    for (std::size_t j = 0; j < support; ++j) {
        if (!is_target[j]) {
            noise[j] = rng.exponential();
            noise_total += noise[j];
        }
    }
    double planted_share = visible == 0 ? 0.0 : mass;
    if (!strict && visible != 0 && noise_total == 0.0) planted_share = 1.0;
    const double noise_share = 1.0 - planted_share;
    if (noise_share > 0.0 && noise_total == 0.0) {
        throw ConfigError("planted attention: remaining mass " + std::to_string(noise_share) +
                          " has no noise positions to land on");
    }
    for (std::size_t j = 0; j < support; ++j) {
        row[j] = is_target[j] ? planted_share / static_cast<double>(visible)
                              : (noise_total == 0.0 ? 0.0 : noise_share * noise[j] / noise_total);
    }
}

inline std::vector<std::size_t> widen(const std::vector<std::size_t>& starts, std::size_t width, std::size_t limit) {
    std::set<std::size_t> out;
    for (std::size_t s : starts) {
        for (std::size_t j = s; j < std::min(limit, s + width); ++j) out.insert(j);
    }
    return {out.begin(), out.end()};
}

} // namespace detail

// Observation-window attention with known important prefix positions. Row i
// belongs to the query at prefix_len + i and is a distribution over its
// causal support [0, prefix_len + i].
inline PlantedAttention planted_attention(const PlantedSpec& spec) {
    if (spec.heads == 0 || spec.obs_len == 0 || spec.prefix_len == 0) {
        throw ConfigError("planted attention: heads, obs_len and prefix_len must be positive");
    }
    if (!(spec.planted_mass > 0.0 && spec.planted_mass <= 1.0)) {
        throw ConfigError("planted attention: planted_mass must be in (0, 1]");
    }
    if (spec.cluster_width == 0) throw ConfigError("planted attention: cluster_width must be at least 1");
    if (spec.planted.size() != spec.heads) {
        throw ConfigError("planted attention: need one planted list per head");
    }
    const std::size_t cols = spec.prefix_len + spec.obs_len;
    PlantedAttention out{Tensor<double>({spec.heads, spec.obs_len, cols}), {}};
    Rng rng(spec.seed);
    for (std::size_t h = 0; h < spec.heads; ++h) {
        if (spec.planted[h].empty()) throw ConfigError("planted attention: head " + std::to_string(h) + " has no plant");
        for (std::size_t p : spec.planted[h]) {
            if (p >= spec.prefix_len) {
                throw ConfigError("planted attention: position " + std::to_string(p) + " outside prefix of " +
                                  std::to_string(spec.prefix_len));
            }
        }
        out.planted.push_back(detail::widen(spec.planted[h], spec.cluster_width, spec.prefix_len));
        const auto& targets = spec.profile == ClusterProfile::uniform ? out.planted.back() : spec.planted[h];
        for (std::size_t i = 0; i < spec.obs_len; ++i) {
            detail::planted_row(out.weights.row(h * spec.obs_len + i), spec.prefix_len + i + 1, targets,
                                spec.planted_mass, rng);
        }
    }
    return out;
}

// `count` cluster starts in [0, prefix_len) whose widened clusters are
// separated by at least `gap` untouched positions.
inline std::vector<std::size_t> random_cluster_starts(std::size_t prefix_len, std::size_t count, std::size_t width,
                                                      std::size_t gap, Rng& rng) {
    const std::size_t stride = width + gap;
    if (count == 0 || count * stride > prefix_len) {
        throw ConfigError("random_cluster_starts: " + std::to_string(count) + " clusters of width " +
                          std::to_string(width) + " do not fit a prefix of " + std::to_string(prefix_len));
    }
    // Partial Fisher-Yates over the available slots.
    const std::size_t slots = prefix_len / stride;
    std::vector<std::size_t> chosen;
    std::vector<std::size_t> all(slots);
    for (std::size_t i = 0; i < slots; ++i) all[i] = i;
    for (std::size_t i = 0; i < count; ++i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                                static_cast<std::int64_t>(slots - 1)));
        std::swap(all[i], all[j]);
        chosen.push_back(all[i]);
    }
    std::sort(chosen.begin(), chosen.end());
    std::vector<std::size_t> starts;
    for (std::size_t slot : chosen) starts.push_back(slot * stride + gap / 2);
    return starts;
}

// Fraction of ground-truth positions present in the selection, pooled over heads.
inline double recovery(const std::vector<std::vector<std::size_t>>& truth,
                       const std::vector<std::vector<std::size_t>>& selected) {
    std::size_t hit = 0;
    std::size_t total = 0;
    for (std::size_t h = 0; h < truth.size(); ++h) {
        for (std::size_t p : truth[h]) {
            ++total;
            if (std::binary_search(selected[h].begin(), selected[h].end(), p)) ++hit;
        }
    }
    return total == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(total);
}

struct RecoverySpec {
    std::size_t prefix_len{240};
    std::size_t obs_len{16};
    std::size_t heads{4};
    std::size_t clusters{4};
    std::size_t cluster_width{1};
    double planted_mass{0.6};
};

// Mean recovery over `seeds` planted tensors when selecting exactly
// clusters * cluster_width positions per head from the unpooled vote.
// Seed i draws its plants and noise from mix_seed(seed, i) only, so the same
// plants and noise shape are reused across planted_mass values.
inline double mean_planted_recovery(const RecoverySpec& spec, std::size_t seeds, std::uint64_t seed) {
    if (seeds == 0) throw ConfigError("mean_planted_recovery: need at least one seed");
    double total = 0.0;
    for (std::size_t i = 0; i < seeds; ++i) {
        Rng rng(mix_seed(seed, i));
        PlantedSpec p;
        p.prefix_len = spec.prefix_len;
        p.obs_len = spec.obs_len;
        p.heads = spec.heads;
        p.planted_mass = spec.planted_mass;
        p.cluster_width = spec.cluster_width;
        for (std::size_t h = 0; h < spec.heads; ++h) {
            p.planted.push_back(random_cluster_starts(spec.prefix_len, spec.clusters, spec.cluster_width, 2, rng));
        }
        p.seed = rng.next_u64();
        const PlantedAttention a = planted_attention(p);
        const auto selected = select_topk(vote(a.weights, spec.obs_len), spec.clusters * spec.cluster_width, 1,
                                          PoolMode::max);
        total += recovery(a.planted, selected.indices);
    }
    return total / static_cast<double>(seeds);
}

// Key-value line prompts: a fixed header followed by one fixed-length record
// per line, "line <adj> <noun> : REGISTER CONTENT is < d d d d d > \n".
struct KvLine {
    std::size_t key_begin{0};    // token offset of the two key tokens
    std::size_t value_begin{0};  // token offset of the first value digit
    std::size_t value_len{0};
};

struct KvLinesPrompt {
    std::vector<std::int32_t> tokens;
    std::vector<KvLine> lines;
};

namespace kv_lines {
inline constexpr std::size_t header_length = 4;
inline constexpr std::size_t record_length = 15;
inline constexpr std::size_t value_digits = 5;
// Token ids: 0..9 structural, 10..19 digits, 32..(32+2*words) key words.
inline constexpr std::int32_t kBos = 1, kRecall = 2, kLine = 3, kColon = 4, kRegister = 5, kContent = 6, kIs = 7,
                              kOpen = 8, kClose = 9, kNewline = 0, kDigit0 = 10, kWordBase = 32;
inline constexpr std::int32_t kWords = 96;
inline constexpr std::int32_t vocab_size = kWordBase + 2 * kWords;
} // namespace kv_lines

inline KvLinesPrompt kv_lines_prompt(std::size_t n_lines, std::uint64_t seed) {
    using namespace kv_lines;
    if (n_lines == 0) throw ConfigError("kv_lines_prompt: need at least one line");
    Rng rng(seed);
    KvLinesPrompt out;
    out.tokens = {kBos, kRecall, kRecall, kNewline};
    for (std::size_t i = 0; i < n_lines; ++i) {
        KvLine line;
        out.tokens.push_back(kLine);
        line.key_begin = out.tokens.size();
        out.tokens.push_back(kWordBase + static_cast<std::int32_t>(rng.uniform_int(0, kWords - 1)));
        out.tokens.push_back(kWordBase + kWords + static_cast<std::int32_t>(rng.uniform_int(0, kWords - 1)));
        for (std::int32_t t : {kColon, kRegister, kContent, kIs, kOpen}) out.tokens.push_back(t);
        line.value_begin = out.tokens.size();
        line.value_len = value_digits;
        for (std::size_t d = 0; d < value_digits; ++d) {
            out.tokens.push_back(kDigit0 + static_cast<std::int32_t>(rng.uniform_int(0, 9)));
        }
        out.tokens.push_back(kClose);
        out.tokens.push_back(kNewline);
        out.lines.push_back(line);
    }
    return out;
}

// Trace source whose attention has the same planted pattern for every query
// of every layer: a stand-in for a model whose important prompt features do
// not drift during generation.
struct StationaryPlantedModel {
    std::size_t layers{2};
    std::size_t heads{2};
    std::size_t clusters_per_head{4};
    std::size_t cluster_width{1};
    double planted_mass{0.6};
    std::uint64_t seed{0};

    // Cluster starts drawn in the first half of the prompt.
    std::vector<std::vector<std::size_t>> plants(std::size_t layer, std::size_t prompt_len) const {
        Rng rng(mix_seed(seed, layer));
        std::vector<std::vector<std::size_t>> out;
        for (std::size_t h = 0; h < heads; ++h) {
            out.push_back(random_cluster_starts(prompt_len / 2, clusters_per_head, cluster_width, 2, rng));
        }
        return out;
    }

    AttentionTrace<double> trace(const std::vector<std::int32_t>& prompt, std::size_t gen_len) const {
        const std::size_t p = prompt.size();
        AttentionTrace<double> trace{p, gen_len, {}};
        for (std::size_t l = 0; l < layers; ++l) {
            const auto starts = plants(l, p);
            Tensor<double> w({heads, p + gen_len, p});
            Rng rng(mix_seed(seed ^ 0x5eedULL, l));
            for (std::size_t h = 0; h < heads; ++h) {
                const auto targets = detail::widen(starts[h], cluster_width, p);
                for (std::size_t i = 0; i < p + gen_len; ++i) {
                    const std::size_t support = std::min(p, i + 1);
                    detail::planted_row(w.row(h * (p + gen_len) + i), support, targets, planted_mass, rng, false);
                }
            }
            trace.layers.push_back(std::move(w));
        }
        return trace;
    }
};

} // namespace snapcache
