#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "snapcache/attention.hpp"
#include "snapcache/error.hpp"
#include "snapcache/numerics.hpp"
#include "snapcache/tensor.hpp"

namespace snapcache {

// Prompt-compression hyperparameters. Exactly one of max_capacity_prompt and
// compression_rate decides how many prefix entries survive.
struct CompressionConfig {
    std::size_t window_size{16};
    std::optional<std::size_t> max_capacity_prompt{1024};
    std::size_t kernel_size{5};
    PoolMode pooling{PoolMode::max};
    std::optional<double> compression_rate{};

    void validate() const {
        if (window_size == 0) throw ConfigError("compression.window_size: must be positive");
        if (max_capacity_prompt.has_value() == compression_rate.has_value()) {
            throw ConfigError(
                "compression: exactly one of max_capacity_prompt and compression_rate must be set");
        }
        if (max_capacity_prompt && *max_capacity_prompt <= window_size) {
            throw ConfigError("compression.max_capacity_prompt: must exceed window_size (" +
                              std::to_string(*max_capacity_prompt) + " <= " + std::to_string(window_size) + ")");
        }
        if (compression_rate && !(*compression_rate > 0.0 && *compression_rate <= 1.0)) {
            throw ConfigError("compression.compression_rate: must be in (0, 1]");
        }
        if (kernel_size == 0 || kernel_size % 2 == 0) {
            throw ConfigError("compression.kernel_size: must be odd and positive, got " + std::to_string(kernel_size));
        }
    }
};

template <typename T>
struct VoteScores {
    Tensor<T> scores;  // [heads, prefix_len]

    std::size_t heads() const { return scores.dim(0); }
    std::size_t prefix_len() const { return scores.dim(1); }
};

// Per-head ascending prefix indices, k per head.
struct SelectedIndices {
    std::vector<std::vector<std::size_t>> indices;

    std::size_t heads() const { return indices.size(); }
    std::size_t k() const { return indices.empty() ? 0 : indices.front().size(); }

    friend bool operator==(const SelectedIndices&, const SelectedIndices&) = default;
};

// Sums the last `window_size` observation rows over the prefix columns
// [0, L_prompt - window_size). Observation-window columns are excluded and
// rows are not renormalized.
template <typename T>
VoteScores<T> vote(const Tensor<T>& obs_weights, std::size_t window_size) {
    if (obs_weights.rank() != 3) {
        throw ShapeError("vote: obs_weights must be [heads, obs, prompt], got " + shape_string(obs_weights.shape()));
    }
    const std::size_t heads = obs_weights.dim(0);
    const std::size_t rows = obs_weights.dim(1);
    const std::size_t prompt = obs_weights.dim(2);
    if (window_size == 0 || window_size > rows) {
        throw ShapeError("vote: window " + std::to_string(window_size) + " needs that many observation rows, have " +
                         std::to_string(rows));
    }
    if (prompt <= window_size) {
        throw ShapeError("vote: prompt length " + std::to_string(prompt) + " leaves no prefix before a window of " +
                         std::to_string(window_size));
    }
    const std::size_t prefix = prompt - window_size;
    VoteScores<T> out{Tensor<T>({heads, prefix})};
    for (std::size_t h = 0; h < heads; ++h) {
        std::span<T> acc = out.scores.row(h);
        for (std::size_t i = rows - window_size; i < rows; ++i) {
            const T* w = obs_weights.data().data() + (h * rows + i) * prompt;
            for (std::size_t j = 0; j < prefix; ++j) acc[j] += w[j];
        }
    }
    return out;
}

// Number of prefix entries to keep: floor(p * prefix_len) under a
// compression rate, else max_capacity_prompt - window_size; clamped to
// [1, prefix_len].
inline std::size_t capacity_k(const CompressionConfig& config, std::size_t prefix_len) {
    config.validate();
    if (prefix_len == 0) throw ConfigError("capacity_k: prefix length must be positive");
    std::size_t k = 0;
    if (config.compression_rate) {
        k = static_cast<std::size_t>(std::floor(*config.compression_rate * static_cast<double>(prefix_len)));
    } else {
        k = *config.max_capacity_prompt - config.window_size;
    }
    return std::clamp<std::size_t>(k, 1, prefix_len);
}

// Pools each head's scores, keeps the k largest pooled values (lower index
// wins ties) and returns them in ascending index order.
template <typename T>
SelectedIndices select_topk(const VoteScores<T>& votes, std::size_t k, std::size_t kernel, PoolMode pooling) {
    const std::size_t prefix = votes.prefix_len();
    if (k == 0 || k > prefix) {
        throw ShapeError("select_topk: k = " + std::to_string(k) + " outside [1, " + std::to_string(prefix) + "]");
    }
    const Tensor<T> pooled = pool1d(votes.scores, kernel, pooling);
    SelectedIndices out;
    out.indices.resize(votes.heads());
    std::vector<std::size_t> order(prefix);
    for (std::size_t h = 0; h < votes.heads(); ++h) {
        const auto row = pooled.row(h);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                          [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
        out.indices[h].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
        std::sort(out.indices[h].begin(), out.indices[h].end());
    }
    return out;
}

// Size arithmetic of one compression, independent of any tensor data.
struct CompressionPlan {
    std::size_t prompt_len{0};
    std::size_t prefix_len{0};
    std::size_t k{0};         // kept prefix entries per head
    std::size_t kept_len{0};  // entries per head after compression
    bool bypass{true};

    // prompt_len / kept_len as an exact fraction.
    std::size_t ratio_numerator() const { return prompt_len; }
    std::size_t ratio_denominator() const { return kept_len; }
    double ratio() const { return static_cast<double>(prompt_len) / static_cast<double>(kept_len); }
};

// With a capacity, prompts shorter than max_capacity_prompt pass through
// untouched. With a compression rate, only prompts that fit inside the
// observation window pass through.
inline CompressionPlan plan_compression(std::size_t prompt_len, const CompressionConfig& config) {
    config.validate();
    if (prompt_len == 0) throw ConfigError("plan_compression: empty prompt");
    CompressionPlan plan;
    plan.prompt_len = prompt_len;
    const bool fits = config.max_capacity_prompt ? prompt_len < *config.max_capacity_prompt
                                                 : prompt_len <= config.window_size;
    if (fits) {
        plan.kept_len = prompt_len;
        return plan;
    }
    plan.bypass = false;
    plan.prefix_len = prompt_len - config.window_size;
    plan.k = capacity_k(config, plan.prefix_len);
    plan.kept_len = plan.k + config.window_size;
    return plan;
}

template <typename T>
struct SnapResult {
    KvCache<T> cache;
    SelectedIndices selected;  // empty lists when bypassed
    bool compressed{false};
};

// Compresses a freshly prefilled cache: vote over the observation rows, pool,
// select k prefix entries per head, gather them in order and append the last
// window_size entries unchanged.
template <typename T>
SnapResult<T> snap(const KvCache<T>& cache, const Tensor<T>& obs_weights, const CompressionConfig& config) {
    config.validate();
    if (obs_weights.rank() != 3 || obs_weights.dim(0) != cache.num_kv_heads() ||
        obs_weights.dim(2) != cache.seq_len()) {
        throw ShapeError("snap: obs_weights " + shape_string(obs_weights.shape()) + " do not match a cache of " +
                         std::to_string(cache.num_kv_heads()) + " heads x " + std::to_string(cache.seq_len()) +
                         " entries");
    }
    const CompressionPlan plan = plan_compression(cache.seq_len(), config);
    SnapResult<T> result;
    result.selected.indices.resize(cache.num_kv_heads());
    if (plan.bypass) {
        result.cache = cache;
        return result;
    }
    const VoteScores<T> votes = vote(obs_weights, config.window_size);
    result.selected = select_topk(votes, plan.k, config.kernel_size, config.pooling);

    std::vector<std::vector<std::size_t>> rows = result.selected.indices;
    for (auto& r : rows) {
        for (std::size_t t = plan.prefix_len; t < plan.prompt_len; ++t) r.push_back(t);
    }
    result.cache = cache.gather(rows);
    result.compressed = true;
    return result;
}

} // namespace snapcache
