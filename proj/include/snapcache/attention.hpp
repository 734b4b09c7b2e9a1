#pragma once

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "snapcache/error.hpp"
#include "snapcache/numerics.hpp"
#include "snapcache/parallel.hpp"
#include "snapcache/tensor.hpp"

namespace snapcache {

struct AttentionConfig {
    std::size_t num_heads{1};
    std::size_t num_kv_heads{1};
    std::size_t head_dim{2};
    double rope_base{10000.0};

    std::size_t group_size() const { return num_heads / num_kv_heads; }

    void validate() const {
        if (num_heads == 0 || num_kv_heads == 0 || head_dim == 0) {
            throw ConfigError("attention: num_heads, num_kv_heads and head_dim must be positive");
        }
        if (num_heads % num_kv_heads != 0) {
            throw ConfigError("attention: num_heads (" + std::to_string(num_heads) +
                              ") must be a multiple of num_kv_heads (" + std::to_string(num_kv_heads) + ")");
        }
        if (head_dim % 2 != 0) {
            throw ConfigError("attention: head_dim must be even for rotary pairs, got " + std::to_string(head_dim));
        }
        if (!(rope_base > 0.0)) throw ConfigError("attention: rope_base must be positive");
    }
};

// Rotates consecutive (2i, 2i+1) pairs of one head vector by
// position * base^(-2i/head_dim). Angles are computed in double for both
// precisions.
template <typename T>
void rope_inplace(std::span<T> x, std::size_t position, double base) {
    const std::size_t d = x.size();
    for (std::size_t i = 0; i < d / 2; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
        const double angle = static_cast<double>(position) * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double a = x[2 * i];
        const double b = x[2 * i + 1];
        x[2 * i] = static_cast<T>(a * c - b * s);
        x[2 * i + 1] = static_cast<T>(a * s + b * c);
    }
}

// x: [heads, seq, head_dim]; positions.size() == seq.
template <typename T>
Tensor<T> apply_rope(const Tensor<T>& x, std::span<const std::size_t> positions, double base = 10000.0) {
    if (x.rank() != 3) throw ShapeError("apply_rope: expected [heads, seq, head_dim], got " + shape_string(x.shape()));
    if (x.dim(2) % 2 != 0) throw ShapeError("apply_rope: head_dim must be even");
    if (positions.size() != x.dim(1)) {
        throw ShapeError("apply_rope: " + std::to_string(positions.size()) + " positions for sequence length " +
                         std::to_string(x.dim(1)));
    }
    Tensor<T> out = x;
    for (std::size_t h = 0; h < x.dim(0); ++h) {
        for (std::size_t t = 0; t < x.dim(1); ++t) rope_inplace(out.row(h * x.dim(1) + t), positions[t], base);
    }
    return out;
}

// Per-layer key/value store. Keys are kept post-rotation. Each kv head owns
// its own position list because compression selects positions per head;
// within a head positions are strictly increasing.
template <typename T>
class KvCache {
public:
    KvCache() = default;

    KvCache(std::size_t num_kv_heads, std::size_t head_dim)
        : head_dim_(head_dim), keys_(num_kv_heads), values_(num_kv_heads), positions_(num_kv_heads) {
        if (num_kv_heads == 0 || head_dim == 0) throw ShapeError("kv cache: heads and head_dim must be positive");
    }

    // keys/values: [num_kv_heads, seq, head_dim]; the same positions for all heads.
    KvCache(const Tensor<T>& keys, const Tensor<T>& values, std::vector<std::size_t> positions)
        : KvCache(keys.rank() == 3 ? keys.dim(0) : 0, keys.rank() == 3 ? keys.dim(2) : 0) {
        if (keys.shape() != values.shape()) {
            throw ShapeError("kv cache: keys " + shape_string(keys.shape()) + " and values " +
                             shape_string(values.shape()) + " differ");
        }
        if (positions.size() != keys.dim(1)) {
            throw ShapeError("kv cache: " + std::to_string(positions.size()) + " positions for " +
                             std::to_string(keys.dim(1)) + " entries");
        }
        check_increasing(positions);
        const std::size_t n = keys.dim(1) * head_dim_;
        for (std::size_t h = 0; h < num_kv_heads(); ++h) {
            keys_[h].assign(keys.data().begin() + h * n, keys.data().begin() + (h + 1) * n);
            values_[h].assign(values.data().begin() + h * n, values.data().begin() + (h + 1) * n);
            positions_[h] = positions;
        }
    }

    std::size_t num_kv_heads() const { return keys_.size(); }
    std::size_t head_dim() const { return head_dim_; }
    std::size_t seq_len() const { return positions_.empty() ? 0 : positions_.front().size(); }
    bool empty() const { return seq_len() == 0; }

    std::span<const T> key(std::size_t head, std::size_t t) const {
        return std::span<const T>(keys_[head]).subspan(t * head_dim_, head_dim_);
    }
    std::span<const T> value(std::size_t head, std::size_t t) const {
        return std::span<const T>(values_[head]).subspan(t * head_dim_, head_dim_);
    }
    std::span<const T> head_keys(std::size_t head) const { return keys_[head]; }
    std::span<const T> head_values(std::size_t head) const { return values_[head]; }
    const std::vector<std::size_t>& positions(std::size_t head) const { return positions_[head]; }

    std::size_t last_position() const {
        if (empty()) throw Error("kv cache: empty cache has no last position");
        std::size_t last = 0;
        for (const auto& p : positions_) last = std::max(last, p.back());
        return last;
    }

    // k, v: [num_kv_heads * head_dim], already rotated.
    void append(std::span<const T> k, std::span<const T> v, std::size_t position) {
        if (k.size() != num_kv_heads() * head_dim_ || v.size() != k.size()) {
            throw ShapeError("kv cache: append expects " + std::to_string(num_kv_heads() * head_dim_) + " values");
        }
        if (!empty() && position <= last_position()) {
            throw Error("kv cache: position " + std::to_string(position) + " does not follow " +
                        std::to_string(last_position()));
        }
        for (std::size_t h = 0; h < num_kv_heads(); ++h) {
            keys_[h].insert(keys_[h].end(), k.begin() + h * head_dim_, k.begin() + (h + 1) * head_dim_);
            values_[h].insert(values_[h].end(), v.begin() + h * head_dim_, v.begin() + (h + 1) * head_dim_);
            positions_[h].push_back(position);
        }
    }

    // Copies the entries at `rows[h]` (ascending, same count for every head).
    KvCache gather(const std::vector<std::vector<std::size_t>>& rows) const {
        if (rows.size() != num_kv_heads()) throw ShapeError("kv cache: gather needs one index list per head");
        KvCache out(num_kv_heads(), head_dim_);
        for (std::size_t h = 0; h < num_kv_heads(); ++h) {
            if (rows[h].size() != rows.front().size()) throw ShapeError("kv cache: ragged gather");
            out.keys_[h].reserve(rows[h].size() * head_dim_);
            out.values_[h].reserve(rows[h].size() * head_dim_);
            for (std::size_t t : rows[h]) {
                if (t >= seq_len()) throw ShapeError("kv cache: gather index " + std::to_string(t) + " out of range");
                const auto k = key(h, t);
                const auto v = value(h, t);
                out.keys_[h].insert(out.keys_[h].end(), k.begin(), k.end());
                out.values_[h].insert(out.values_[h].end(), v.begin(), v.end());
                out.positions_[h].push_back(positions_[h][t]);
            }
            check_increasing(out.positions_[h]);
        }
        return out;
    }

    Tensor<T> keys() const { return stack(keys_); }
    Tensor<T> values() const { return stack(values_); }

    // Element count of keys plus values.
    std::size_t elements() const { return 2 * num_kv_heads() * seq_len() * head_dim_; }
    std::size_t bytes() const { return elements() * sizeof(T); }

    friend bool operator==(const KvCache&, const KvCache&) = default;

private:
    static void check_increasing(const std::vector<std::size_t>& p) {
        for (std::size_t i = 1; i < p.size(); ++i) {
            if (p[i] <= p[i - 1]) throw ShapeError("kv cache: positions must be strictly increasing");
        }
    }

    Tensor<T> stack(const std::vector<std::vector<T>>& per_head) const {
        Tensor<T> out({num_kv_heads(), seq_len(), head_dim_});
        auto dst = out.data().begin();
        for (const auto& h : per_head) dst = std::copy(h.begin(), h.end(), dst);
        return out;
    }

    std::size_t head_dim_{0};
    std::vector<std::vector<T>> keys_;
    std::vector<std::vector<T>> values_;
    std::vector<std::vector<std::size_t>> positions_;
};

template <typename T>
struct PrefillResult {
    Tensor<T> output;       // [num_heads, L, head_dim]
    KvCache<T> cache;
    Tensor<T> obs_weights;  // [num_kv_heads, obs_window, L]
    // [num_kv_heads, L, L]; filled only when requested.
    std::optional<Tensor<T>> all_weights;
};

struct PrefillOptions {
    std::size_t obs_window{1};
    bool record_all_weights{false};
    std::size_t threads{1};
};

namespace detail {

template <typename T>
Tensor<T> rotate_sequence(const Tensor<T>& x, std::size_t start, double base) {
    Tensor<T> out = x;
    for (std::size_t h = 0; h < x.dim(0); ++h) {
        for (std::size_t t = 0; t < x.dim(1); ++t) rope_inplace(out.row(h * x.dim(1) + t), start + t, base);
    }
    return out;
}

template <typename T>
void check_heads(const Tensor<T>& x, std::size_t heads, std::size_t seq, std::size_t head_dim, const char* what) {
    if (x.rank() != 3 || x.dim(0) != heads || x.dim(1) != seq || x.dim(2) != head_dim) {
        throw ShapeError(std::string(what) + ": expected " + shape_string({heads, seq, head_dim}) + ", got " +
                         shape_string(x.shape()));
    }
}

} // namespace detail

// Causal attention over the whole prompt. q: [num_heads, L, head_dim];
// k, v: [num_kv_heads, L, head_dim]; all unrotated. Keys are rotated at
// positions 0..L-1 before caching. obs_weights holds the softmax rows of the
// last obs_window queries, with the rows of every query head in a group
// summed into their kv head.
template <typename T>
PrefillResult<T> prefill(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionConfig& config,
                         const PrefillOptions& options) {
    config.validate();
    if (q.rank() != 3) throw ShapeError("prefill: q must be [heads, seq, head_dim], got " + shape_string(q.shape()));
    const std::size_t seq = q.dim(1);
    const std::size_t d = config.head_dim;
    detail::check_heads(q, config.num_heads, seq, d, "prefill q");
    detail::check_heads(k, config.num_kv_heads, seq, d, "prefill k");
    detail::check_heads(v, config.num_kv_heads, seq, d, "prefill v");
    if (seq == 0) throw ShapeError("prefill: empty prompt");
    if (options.obs_window == 0 || options.obs_window > seq) {
        throw ConfigError("prefill: observation window " + std::to_string(options.obs_window) +
                          " must be in [1, " + std::to_string(seq) + "]");
    }

    const Tensor<T> qr = detail::rotate_sequence(q, 0, config.rope_base);
    const Tensor<T> kr = detail::rotate_sequence(k, 0, config.rope_base);

    PrefillResult<T> result;
    result.output = Tensor<T>({config.num_heads, seq, d});
    result.obs_weights = Tensor<T>({config.num_kv_heads, options.obs_window, seq});
    if (options.record_all_weights) result.all_weights = Tensor<T>({config.num_kv_heads, seq, seq});

    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    const std::size_t obs_start = seq - options.obs_window;
    const std::size_t group = config.group_size();

    // One task per kv head so grouped query heads accumulate into rows that
    // only this task writes.
    parallel_for(config.num_kv_heads, options.threads, [&](std::size_t kvh) {
        const T* keys = kr.data().data() + kvh * seq * d;
        const T* vals = v.data().data() + kvh * seq * d;
        std::vector<T> probs(seq);
        for (std::size_t h = kvh * group; h < (kvh + 1) * group; ++h) {
            for (std::size_t t = 0; t < seq; ++t) {
                const T* qt = qr.data().data() + (h * seq + t) * d;
                std::span<T> row(probs.data(), t + 1);
                for (std::size_t j = 0; j <= t; ++j) row[j] = dot(qt, keys + j * d, d) * scale;
                softmax_inplace(row);
                T* out = result.output.data().data() + (h * seq + t) * d;
                for (std::size_t j = 0; j <= t; ++j) {
                    const T p = row[j];
                    const T* vj = vals + j * d;
                    for (std::size_t c = 0; c < d; ++c) out[c] += p * vj[c];
                }
                if (t >= obs_start) {
                    T* w = result.obs_weights.data().data() + (kvh * options.obs_window + (t - obs_start)) * seq;
                    for (std::size_t j = 0; j <= t; ++j) w[j] += row[j];
                }
                if (result.all_weights) {
                    T* w = result.all_weights->data().data() + (kvh * seq + t) * seq;
                    for (std::size_t j = 0; j <= t; ++j) w[j] += row[j];
                }
            }
        }
    });

    std::vector<std::size_t> positions(seq);
    for (std::size_t t = 0; t < seq; ++t) positions[t] = t;
    result.cache = KvCache<T>(kr, v, std::move(positions));
    check_finite(result.output, "prefill");
    return result;
}

template <typename T>
struct DecodeResult {
    Tensor<T> output;   // [num_heads, 1, head_dim]
    KvCache<T> cache;   // input cache plus the new entry
    Tensor<T> weights;  // [num_kv_heads, seq_len after append], group-summed
};

// One autoregressive step. The new key/value (unrotated, [num_kv_heads, 1,
// head_dim]) is rotated at `position`, appended, and then attended to along
// with every cached entry. Pass the cache by rvalue to append in place.
template <typename T>
DecodeResult<T> decode_step(const Tensor<T>& q, const Tensor<T>& k_new, const Tensor<T>& v_new, KvCache<T> cache,
                            std::size_t position, const AttentionConfig& config) {
    config.validate();
    const std::size_t d = config.head_dim;
    detail::check_heads(q, config.num_heads, 1, d, "decode q");
    detail::check_heads(k_new, config.num_kv_heads, 1, d, "decode k");
    detail::check_heads(v_new, config.num_kv_heads, 1, d, "decode v");
    if (cache.num_kv_heads() == 0) cache = KvCache<T>(config.num_kv_heads, d);
    if (cache.num_kv_heads() != config.num_kv_heads || cache.head_dim() != d) {
        throw ShapeError("decode: cache geometry does not match attention config");
    }
    if (!cache.empty() && position <= cache.last_position()) {
        throw Error("decode: position " + std::to_string(position) + " is not after cached position " +
                    std::to_string(cache.last_position()));
    }

    const Tensor<T> qr = detail::rotate_sequence(q, position, config.rope_base);
    const Tensor<T> kr = detail::rotate_sequence(k_new, position, config.rope_base);
    cache.append(kr.data(), v_new.data(), position);

    const std::size_t n = cache.seq_len();
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    DecodeResult<T> result{Tensor<T>({config.num_heads, 1, d}), {}, Tensor<T>({config.num_kv_heads, n})};
    std::vector<T> probs(n);
    for (std::size_t h = 0; h < config.num_heads; ++h) {
        const std::size_t kvh = h / config.group_size();
        const T* qh = qr.data().data() + h * d;
        const T* keys = cache.head_keys(kvh).data();
        const T* vals = cache.head_values(kvh).data();
        for (std::size_t j = 0; j < n; ++j) probs[j] = dot(qh, keys + j * d, d) * scale;
        softmax_inplace(std::span<T>(probs));
        T* out = result.output.data().data() + h * d;
        for (std::size_t j = 0; j < n; ++j) {
            const T p = probs[j];
            const T* vj = vals + j * d;
            for (std::size_t c = 0; c < d; ++c) out[c] += p * vj[c];
        }
        T* w = result.weights.data().data() + kvh * n;
        for (std::size_t j = 0; j < n; ++j) w[j] += probs[j];
    }
    check_finite(result.output, "decode_step");
    result.cache = std::move(cache);
    return result;
}

// Multiply-adds spent on attention by one decode step over a cache of
// `cache_len` entries (after append): QK dot products plus the weighted sum of
// values, for every query head.
inline std::size_t decode_attention_flops(std::size_t cache_len, const AttentionConfig& config) {
    return 2 * 2 * config.num_heads * cache_len * config.head_dim;
}

} // namespace snapcache
