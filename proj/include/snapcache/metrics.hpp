#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fmt/format.h>
#include <ostream>
#include <string>
#include <vector>

#include "snapcache/error.hpp"
#include "snapcache/snapkv.hpp"
#include "snapcache/tensor.hpp"

namespace snapcache {

// Boolean grid over [heads, prefix_len] attention features.
class FeatureMask {
public:
    FeatureMask() = default;
    FeatureMask(std::size_t heads, std::size_t prefix_len)
        : heads_(heads), prefix_len_(prefix_len), bits_(heads * prefix_len, 0) {}

    std::size_t heads() const { return heads_; }
    std::size_t prefix_len() const { return prefix_len_; }

    bool get(std::size_t h, std::size_t j) const { return bits_[h * prefix_len_ + j] != 0; }
    void set(std::size_t h, std::size_t j, bool on = true) { bits_[h * prefix_len_ + j] = on ? 1 : 0; }

    std::size_t count() const {
        std::size_t n = 0;
        for (auto b : bits_) n += b;
        return n;
    }
    std::size_t count(std::size_t h) const {
        std::size_t n = 0;
        for (std::size_t j = 0; j < prefix_len_; ++j) n += bits_[h * prefix_len_ + j];
        return n;
    }

    FeatureMask operator~() const {
        FeatureMask out = *this;
        for (auto& b : out.bits_) b = b ? 0 : 1;
        return out;
    }

    bool same_shape(const FeatureMask& o) const { return heads_ == o.heads_ && prefix_len_ == o.prefix_len_; }

    friend bool operator==(const FeatureMask&, const FeatureMask&) = default;

private:
    std::size_t heads_{0};
    std::size_t prefix_len_{0};
    std::vector<std::uint8_t> bits_;
};

// True exactly at the selected (head, position) pairs.
inline FeatureMask vote_mask(const SelectedIndices& selected, std::size_t prefix_len, std::size_t heads) {
    if (!selected.indices.empty() && selected.heads() != heads) {
        throw ShapeError("vote_mask: selection covers " + std::to_string(selected.heads()) + " heads, expected " +
                         std::to_string(heads));
    }
    FeatureMask mask(heads, prefix_len);
    for (std::size_t h = 0; h < selected.indices.size(); ++h) {
        for (std::size_t j : selected.indices[h]) {
            if (j >= prefix_len) {
                throw ShapeError("vote_mask: index " + std::to_string(j) + " outside prefix of " +
                                 std::to_string(prefix_len));
            }
            mask.set(h, j);
        }
    }
    return mask;
}

// Strict a_cur > theta. a_cur: [heads, prefix_len].
template <typename T>
FeatureMask threshold_mask(const Tensor<T>& a_cur, double theta) {
    if (a_cur.rank() != 2) throw ShapeError("threshold_mask: expected [heads, prefix], got " + shape_string(a_cur.shape()));
    if (theta < 0.0) throw ConfigError("threshold_mask: theta must be non-negative");
    FeatureMask mask(a_cur.dim(0), a_cur.dim(1));
    for (std::size_t h = 0; h < a_cur.dim(0); ++h) {
        for (std::size_t j = 0; j < a_cur.dim(1); ++j) {
            if (static_cast<double>(a_cur[h * a_cur.dim(1) + j]) > theta) mask.set(h, j);
        }
    }
    return mask;
}

struct HitRate {
    double value{1.0};
    // No important features: the ratio is vacuous and reported as 1.0.
    bool vacuous{false};
    std::size_t hits{0};
    std::size_t important{0};
};

// |important & selected| / |important|.
inline HitRate hit_rate(const FeatureMask& important, const FeatureMask& selected) {
    if (!important.same_shape(selected)) throw ShapeError("hit_rate: masks differ in shape");
    HitRate r;
    for (std::size_t h = 0; h < important.heads(); ++h) {
        for (std::size_t j = 0; j < important.prefix_len(); ++j) {
            if (important.get(h, j)) {
                ++r.important;
                if (selected.get(h, j)) ++r.hits;
            }
        }
    }
    if (r.important == 0) {
        r.vacuous = true;
        r.value = 1.0;
    } else {
        r.value = static_cast<double>(r.hits) / static_cast<double>(r.important);
    }
    return r;
}

// Attention of every query (prompt then generated) against the prompt keys,
// per layer: layers[l] is [kv_heads, prompt_len + gen_len, prompt_len] with
// grouped query heads summed. Prompt rows are causal.
template <typename T>
struct AttentionTrace {
    std::size_t prompt_len{0};
    std::size_t gen_len{0};
    std::vector<Tensor<T>> layers;
};

template <typename T>
concept TraceSource = requires(const T& source, const std::vector<std::int32_t>& prompt, std::size_t n) {
    { source.trace(prompt, n) };
};

struct OverlapRow {
    std::size_t layer{0};
    std::size_t head{0};
    std::size_t window_index{0};
    double overlap{0.0};
};

struct OverlapProfile {
    std::size_t layers{0};
    std::size_t heads{0};
    std::size_t prompt_windows{0};
    std::size_t generation_windows{0};
    // Each prompt window's selection against the selection of all generated
    // queries; window_index prompt_windows-1 is the last prompt window.
    std::vector<OverlapRow> prompt_rows;
    // The last prompt window's selection against each generation window.
    std::vector<OverlapRow> generation_rows;

    // Mean over heads of the last prompt window's overlap at `layer`.
    double last_window_overlap(std::size_t layer) const {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& r : prompt_rows) {
            if (r.layer == layer && r.window_index + 1 == prompt_windows) {
                sum += r.overlap;
                ++n;
            }
        }
        return n == 0 ? 0.0 : sum / static_cast<double>(n);
    }
};

namespace detail {

// Top-k (no pooling) of column sums of rows [begin, end) over the first
// `prefix` columns of one head's trace slice.
template <typename T>
FeatureMask window_selection(const Tensor<T>& layer, std::size_t prefix, std::size_t begin, std::size_t end,
                             std::size_t k) {
    const std::size_t heads = layer.dim(0);
    const std::size_t rows = layer.dim(1);
    const std::size_t cols = layer.dim(2);
    VoteScores<T> votes{Tensor<T>({heads, prefix})};
    for (std::size_t h = 0; h < heads; ++h) {
        auto acc = votes.scores.row(h);
        for (std::size_t i = begin; i < end; ++i) {
            const T* w = layer.data().data() + (h * rows + i) * cols;
            for (std::size_t j = 0; j < prefix; ++j) acc[j] += w[j];
        }
    }
    return vote_mask(select_topk(votes, k, 1, PoolMode::max), prefix, heads);
}

inline FeatureMask head_slice(const FeatureMask& m, std::size_t h) {
    FeatureMask out(1, m.prefix_len());
    for (std::size_t j = 0; j < m.prefix_len(); ++j) out.set(0, j, m.get(h, j));
    return out;
}

} // namespace detail

// Layer-wise overlap between the prompt features selected by windows of
// `window` queries and those selected by the generated queries. Both sides
// use top-k voting masks over the prefix (all prompt positions before the
// last window).
template <typename T>
OverlapProfile window_overlap_profile(const AttentionTrace<T>& trace, std::size_t window, std::size_t k) {
    if (window == 0 || window >= trace.prompt_len) {
        throw ConfigError("window_overlap_profile: window " + std::to_string(window) +
                          " must be positive and shorter than the prompt (" + std::to_string(trace.prompt_len) + ")");
    }
    if (trace.gen_len == 0) throw ConfigError("window_overlap_profile: no generated queries in trace");
    const std::size_t prefix = trace.prompt_len - window;
    if (k == 0 || k > prefix) {
        throw ConfigError("window_overlap_profile: k = " + std::to_string(k) + " outside [1, " +
                          std::to_string(prefix) + "]");
    }

    OverlapProfile profile;
    profile.layers = trace.layers.size();
    profile.prompt_windows = trace.prompt_len / window;
    profile.generation_windows = std::max<std::size_t>(1, trace.gen_len / window);
    const std::size_t gen_window = trace.gen_len < window ? trace.gen_len : window;
    const std::size_t p = trace.prompt_len;

    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
        const Tensor<T>& layer = trace.layers[l];
        if (layer.rank() != 3 || layer.dim(1) != p + trace.gen_len || layer.dim(2) != p) {
            throw ShapeError("window_overlap_profile: layer " + std::to_string(l) + " trace has shape " +
                             shape_string(layer.shape()));
        }
        profile.heads = layer.dim(0);
        const FeatureMask generated = detail::window_selection(layer, prefix, p, p + trace.gen_len, k);
        FeatureMask last;
        for (std::size_t w = 0; w < profile.prompt_windows; ++w) {
            const std::size_t begin = p - (profile.prompt_windows - w) * window;
            const FeatureMask sel = detail::window_selection(layer, prefix, begin, begin + window, k);
            for (std::size_t h = 0; h < profile.heads; ++h) {
                const double o = hit_rate(detail::head_slice(generated, h), detail::head_slice(sel, h)).value;
                profile.prompt_rows.push_back({l, h, w, o});
            }
            if (w + 1 == profile.prompt_windows) last = sel;
        }
        for (std::size_t g = 0; g < profile.generation_windows; ++g) {
            const std::size_t begin = p + g * gen_window;
            const FeatureMask sel = detail::window_selection(layer, prefix, begin, begin + gen_window, k);
            for (std::size_t h = 0; h < profile.heads; ++h) {
                const double o = hit_rate(detail::head_slice(sel, h), detail::head_slice(last, h)).value;
                profile.generation_rows.push_back({l, h, g, o});
            }
        }
    }
    return profile;
}

template <typename Source>
    requires TraceSource<Source>
OverlapProfile window_overlap_profile(const Source& source, const std::vector<std::int32_t>& prompt,
                                      std::size_t gen_len, std::size_t window, std::size_t k) {
    if (window == 0 || window >= prompt.size()) {
        throw ConfigError("window_overlap_profile: window " + std::to_string(window) +
                          " must be positive and shorter than the prompt (" + std::to_string(prompt.size()) + ")");
    }
    return window_overlap_profile(source.trace(prompt, gen_len), window, k);
}

struct HitRateReport {
    double theta{0.02};
    std::vector<std::vector<double>> per_layer;  // [layer][head]
    double aggregate{0.0};
    std::size_t vacuous{0};  // (layer, head) cells with nothing above theta
};

// Hit rate of the compression's prompt selection against the features each
// generated query attends to above theta, pooled over all generation steps
// per (layer, head).
template <typename T>
HitRateReport hit_rate_report(const AttentionTrace<T>& trace, const CompressionConfig& config, double theta) {
    config.validate();
    if (trace.prompt_len <= config.window_size) {
        throw ConfigError("hit_rate_report: prompt must be longer than the observation window");
    }
    HitRateReport report;
    report.theta = theta;
    const std::size_t p = trace.prompt_len;
    const std::size_t prefix = p - config.window_size;
    const std::size_t k = capacity_k(config, prefix);
    double total = 0.0;
    std::size_t cells = 0;
    for (const auto& layer : trace.layers) {
        const std::size_t heads = layer.dim(0);
        const std::size_t rows = layer.dim(1);
        Tensor<T> obs({heads, config.window_size, p});
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < config.window_size; ++i) {
                const auto src = layer.row(h * rows + (p - config.window_size + i));
                std::copy(src.begin(), src.end(), obs.row(h * config.window_size + i).begin());
            }
        }
        const auto votes = vote(obs, config.window_size);
        const FeatureMask selected =
            vote_mask(select_topk(votes, k, config.kernel_size, config.pooling), prefix, heads);

        std::vector<double> per_head(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            std::size_t hits = 0;
            std::size_t important = 0;
            for (std::size_t g = 0; g < trace.gen_len; ++g) {
                Tensor<T> a_cur({1, prefix});
                const auto src = layer.row(h * rows + p + g);
                std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(prefix), a_cur.data().begin());
                const HitRate r = hit_rate(threshold_mask(a_cur, theta), detail::head_slice(selected, h));
                hits += r.hits;
                important += r.important;
            }
            if (important == 0) {
                per_head[h] = 1.0;
                ++report.vacuous;
            } else {
                per_head[h] = static_cast<double>(hits) / static_cast<double>(important);
            }
            total += per_head[h];
            ++cells;
        }
        report.per_layer.push_back(std::move(per_head));
    }
    report.aggregate = cells == 0 ? 0.0 : total / static_cast<double>(cells);
    return report;
}

inline void write_overlap_csv(std::ostream& out, const std::vector<OverlapRow>& rows) {
    out << "layer,head,window_index,overlap\n";
    for (const auto& r : rows) out << fmt::format("{},{},{},{:.6f}\n", r.layer, r.head, r.window_index, r.overlap);
}

} // namespace snapcache
