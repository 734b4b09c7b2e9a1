#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "snapcache/attention.hpp"
#include "snapcache/error.hpp"
#include "snapcache/metrics.hpp"
#include "snapcache/numerics.hpp"
#include "snapcache/rng.hpp"
#include "snapcache/snapkv.hpp"
#include "snapcache/tensor.hpp"

namespace snapcache {

enum class Precision { f32, f64 };

inline std::string_view to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

template <typename T>
constexpr Precision precision_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? Precision::f32 : Precision::f64;
}

// Pre-norm decoder: RMSNorm -> rotary attention -> residual, RMSNorm ->
// SiLU-gated MLP -> residual, final RMSNorm, untied output head.
struct ModelConfig {
    std::size_t vocab{256};
    std::size_t d_model{64};
    std::size_t layers{2};
    std::size_t num_heads{4};
    std::size_t num_kv_heads{4};
    std::size_t head_dim{16};
    std::size_t mlp_hidden{128};
    std::uint64_t seed{0};
    Precision precision{Precision::f64};
    double rope_base{10000.0};

    AttentionConfig attention() const { return {num_heads, num_kv_heads, head_dim, rope_base}; }

    void validate() const {
        if (vocab == 0) throw ConfigError("model.vocab: must be positive");
        if (layers == 0) throw ConfigError("model.layers: must be positive");
        if (mlp_hidden == 0) throw ConfigError("model.mlp_hidden: must be positive");
        attention().validate();
        if (d_model != num_heads * head_dim) {
            throw ConfigError("model.d_model: must equal num_heads * head_dim (" + std::to_string(d_model) +
                              " != " + std::to_string(num_heads) + " * " + std::to_string(head_dim) + ")");
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerWeights {
    Tensor<T> attn_norm;  // [d_model]
    Tensor<T> wq;         // [d_model, num_heads * head_dim]
    Tensor<T> wk;         // [d_model, num_kv_heads * head_dim]
    Tensor<T> wv;         // [d_model, num_kv_heads * head_dim]
    Tensor<T> wo;         // [num_heads * head_dim, d_model]
    Tensor<T> mlp_norm;   // [d_model]
    Tensor<T> w_gate;     // [d_model, mlp_hidden]
    Tensor<T> w_up;       // [d_model, mlp_hidden]
    Tensor<T> w_down;     // [mlp_hidden, d_model]
};

// Per-sequence decoding state. Owns its caches; the model stays immutable.
template <typename T>
struct Session {
    std::vector<KvCache<T>> caches;  // one per layer
    std::vector<T> logits;           // logits of the most recent position
    std::size_t prompt_len{0};
    std::size_t next_position{0};
    std::int32_t next_input{0};      // greedy token to feed at next_position
    std::vector<Tensor<T>> obs_weights;         // per layer, when kept
    std::vector<SelectedIndices> selected;      // per layer, when compressed
    std::vector<Tensor<T>> prompt_weights;      // per layer [kv, L, L], when recorded
};

struct PrefillRequest {
    std::optional<CompressionConfig> compression;
    // Observation rows to expose when not compressing; 0 means 1.
    std::size_t obs_window{0};
    bool keep_obs_weights{false};
    bool record_all_weights{false};
    std::size_t threads{1};
};

struct GenerationResult {
    std::vector<std::int32_t> tokens;
    // Wall time to produce each token; entry 0 includes the prefill.
    std::vector<std::chrono::nanoseconds> per_step_latency;
    std::chrono::nanoseconds prefill_latency{0};
    std::vector<std::size_t> cache_entries_per_layer;  // after the last step
    std::vector<std::size_t> cache_len_history;        // layer 0: after prefill, then after each step
};

namespace detail {

template <typename T>
void rms_norm(std::span<const T> x, std::span<const T> gain, std::span<T> out) {
    double ss = 0.0;
    for (T v : x) ss += static_cast<double>(v) * static_cast<double>(v);
    const T inv = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6));
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

template <typename T>
Tensor<T> rms_norm_rows(const Tensor<T>& x, const Tensor<T>& gain) {
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) rms_norm<T>(x.row(r), gain.data(), out.row(r));
    return out;
}

// x: [d_in], w: [d_in, d_out].
template <typename T>
std::vector<T> matvec(std::span<const T> x, const Tensor<T>& w) {
    const std::size_t n = w.dim(1);
    std::vector<T> out(n, T{0});
    for (std::size_t p = 0; p < x.size(); ++p) {
        const T a = x[p];
        const T* row = w.data().data() + p * n;
        for (std::size_t j = 0; j < n; ++j) out[j] += a * row[j];
    }
    return out;
}

template <typename T>
T silu(T x) {
    return x / (T{1} + std::exp(-x));
}

// [L, heads * d] -> [heads, L, d]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads, std::size_t d) {
    const std::size_t seq = x.dim(0);
    Tensor<T> out({heads, seq, d});
    for (std::size_t t = 0; t < seq; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
            const T* src = x.data().data() + t * heads * d + h * d;
            std::copy(src, src + d, out.data().data() + (h * seq + t) * d);
        }
    }
    return out;
}

// [heads, L, d] -> [L, heads * d]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
    const std::size_t heads = x.dim(0), seq = x.dim(1), d = x.dim(2);
    Tensor<T> out({seq, heads * d});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < seq; ++t) {
            const T* src = x.data().data() + (h * seq + t) * d;
            std::copy(src, src + d, out.data().data() + t * heads * d + h * d);
        }
    }
    return out;
}

template <typename T>
std::int32_t argmax(std::span<const T> logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return static_cast<std::int32_t>(best);
}

} // namespace detail

template <typename T>
class Model {
public:
    // Weights ~ N(0, (0.02 / sqrt(layers))^2) from one seeded stream in
    // declaration order; norm gains start at 1.
    explicit Model(ModelConfig config) : config_(std::move(config)) {
        config_.precision = precision_of<T>();
        config_.validate();
        Rng rng(config_.seed);
        const double stddev = 0.02 / std::sqrt(static_cast<double>(config_.layers));
        auto normal = [&](Shape shape) {
            Tensor<T> t(std::move(shape));
            for (auto& v : t.data()) v = static_cast<T>(rng.normal() * stddev);
            return t;
        };
        auto ones = [&](std::size_t n) {
            Tensor<T> t({n});
            for (auto& v : t.data()) v = T{1};
            return t;
        };
        const std::size_t d = config_.d_model;
        const std::size_t q = config_.num_heads * config_.head_dim;
        const std::size_t kv = config_.num_kv_heads * config_.head_dim;
        embedding_ = normal({config_.vocab, d});
        for (std::size_t l = 0; l < config_.layers; ++l) {
            LayerWeights<T> w;
            w.attn_norm = ones(d);
            w.wq = normal({d, q});
            w.wk = normal({d, kv});
            w.wv = normal({d, kv});
            w.wo = normal({q, d});
            w.mlp_norm = ones(d);
            w.w_gate = normal({d, config_.mlp_hidden});
            w.w_up = normal({d, config_.mlp_hidden});
            w.w_down = normal({config_.mlp_hidden, d});
            layers_.push_back(std::move(w));
        }
        final_norm_ = ones(d);
        lm_head_ = normal({d, config_.vocab});
    }

    const ModelConfig& config() const { return config_; }
    const std::vector<LayerWeights<T>>& layers() const { return layers_; }

    // Every weight tensor in declaration order.
    std::vector<const Tensor<T>*> parameters() const {
        std::vector<const Tensor<T>*> out{&embedding_};
        for (const auto& w : layers_) {
            for (const Tensor<T>* t : {&w.attn_norm, &w.wq, &w.wk, &w.wv, &w.wo, &w.mlp_norm, &w.w_gate, &w.w_up,
                                       &w.w_down}) {
                out.push_back(t);
            }
        }
        out.push_back(&final_norm_);
        out.push_back(&lm_head_);
        return out;
    }

    std::vector<Tensor<T>*> mutable_parameters() {
        std::vector<Tensor<T>*> out;
        for (const Tensor<T>* t : parameters()) out.push_back(const_cast<Tensor<T>*>(t));
        return out;
    }

    // FNV-1a over the raw bytes of every weight.
    std::uint64_t checksum() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const Tensor<T>* t : parameters()) {
            const auto* bytes = reinterpret_cast<const unsigned char*>(t->data().data());
            for (std::size_t i = 0; i < t->size() * sizeof(T); ++i) {
                h ^= bytes[i];
                h *= 1099511628211ULL;
            }
        }
        return h;
    }

    std::vector<T> logits_for_hidden(std::span<const T> x) const {
        std::vector<T> normed(x.size());
        detail::rms_norm<T>(x, final_norm_.data(), normed);
        return detail::matvec<T>(normed, lm_head_);
    }

    // Runs the whole prompt. With compression, each layer's cache is
    // compressed right after that layer's attention.
    Session<T> prefill(const std::vector<std::int32_t>& prompt, const PrefillRequest& request = {}) const {
        if (prompt.empty()) throw ConfigError("prefill: empty prompt");
        if (request.compression) request.compression->validate();
        const std::size_t seq = prompt.size();
        const std::size_t d = config_.d_model;
        const AttentionConfig attn = config_.attention();

        Tensor<T> x({seq, d});
        for (std::size_t t = 0; t < seq; ++t) {
            const auto row = embedding_.row(token_row(prompt[t]));
            std::copy(row.begin(), row.end(), x.row(t).begin());
        }

        std::size_t obs = request.obs_window == 0 ? 1 : request.obs_window;
        if (request.compression) obs = request.compression->window_size;
        obs = std::min(obs, seq);

        Session<T> session;
        session.prompt_len = seq;
        for (const auto& w : layers_) {
            const Tensor<T> h = detail::rms_norm_rows(x, w.attn_norm);
            const Tensor<T> q = detail::split_heads(matmul(h, w.wq), attn.num_heads, attn.head_dim);
            const Tensor<T> k = detail::split_heads(matmul(h, w.wk), attn.num_kv_heads, attn.head_dim);
            const Tensor<T> v = detail::split_heads(matmul(h, w.wv), attn.num_kv_heads, attn.head_dim);
            PrefillResult<T> pr = snapcache::prefill(q, k, v, attn, {obs, request.record_all_weights, request.threads});

            if (request.compression) {
                SnapResult<T> s = snap(pr.cache, pr.obs_weights, *request.compression);
                session.caches.push_back(std::move(s.cache));
                session.selected.push_back(std::move(s.selected));
            } else {
                session.caches.push_back(std::move(pr.cache));
            }
            if (request.keep_obs_weights) session.obs_weights.push_back(std::move(pr.obs_weights));
            if (pr.all_weights) session.prompt_weights.push_back(std::move(*pr.all_weights));

            add_inplace(x, matmul(detail::merge_heads(pr.output), w.wo));
            add_inplace(x, mlp(x, w));
        }
        session.logits = logits_for_hidden(x.row(seq - 1));
        session.next_input = detail::argmax<T>(session.logits);
        session.next_position = seq;
        return session;
    }

    // Feeds session.next_input at session.next_position and returns the next
    // greedy token. `weights_out`, when given, receives each layer's
    // group-summed attention row over the cache.
    std::int32_t step(Session<T>& session, std::vector<Tensor<T>>* weights_out = nullptr) const {
        const AttentionConfig attn = config_.attention();
        const auto emb = embedding_.row(token_row(session.next_input));
        std::vector<T> x(emb.begin(), emb.end());
        std::vector<T> h(x.size());
        if (weights_out) weights_out->clear();
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& w = layers_[l];
            detail::rms_norm<T>(x, w.attn_norm.data(), h);
            Tensor<T> q({attn.num_heads, 1, attn.head_dim}, detail::matvec<T>(h, w.wq));
            Tensor<T> k({attn.num_kv_heads, 1, attn.head_dim}, detail::matvec<T>(h, w.wk));
            Tensor<T> v({attn.num_kv_heads, 1, attn.head_dim}, detail::matvec<T>(h, w.wv));
            DecodeResult<T> dr =
                decode_step(q, k, v, std::move(session.caches[l]), session.next_position, attn);
            session.caches[l] = std::move(dr.cache);
            if (weights_out) weights_out->push_back(std::move(dr.weights));
            const std::vector<T> o = detail::matvec<T>(dr.output.data(), w.wo);
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += o[i];

            detail::rms_norm<T>(x, w.mlp_norm.data(), h);
            const std::vector<T> gate = detail::matvec<T>(h, w.w_gate);
            std::vector<T> up = detail::matvec<T>(h, w.w_up);
            for (std::size_t i = 0; i < up.size(); ++i) up[i] *= detail::silu(gate[i]);
            const std::vector<T> down = detail::matvec<T>(up, w.w_down);
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += down[i];
        }
        session.logits = logits_for_hidden(x);
        session.next_input = detail::argmax<T>(session.logits);
        ++session.next_position;
        return session.next_input;
    }

    // Multiply-adds of the next decode step. Depends only on the current
    // per-layer cache lengths.
    std::size_t decode_flops(const Session<T>& session) const {
        const std::size_t d = config_.d_model;
        const std::size_t q = config_.num_heads * config_.head_dim;
        const std::size_t kv = config_.num_kv_heads * config_.head_dim;
        std::size_t flops = 2 * d * config_.vocab;
        for (const auto& cache : session.caches) {
            flops += 2 * d * (q + 2 * kv) + 2 * q * d + 3 * 2 * d * config_.mlp_hidden;
            flops += decode_attention_flops(cache.seq_len() + 1, config_.attention());
        }
        return flops;
    }

    // Uncompressed greedy run recording attention of every prompt and
    // generated query against the prompt keys.
    AttentionTrace<T> trace(const std::vector<std::int32_t>& prompt, std::size_t gen_len) const {
        PrefillRequest request;
        request.record_all_weights = true;
        Session<T> session = prefill(prompt, request);
        const std::size_t p = prompt.size();
        const std::size_t kvh = config_.num_kv_heads;
        AttentionTrace<T> trace{p, gen_len, {}};
        for (const auto& w : session.prompt_weights) {
            Tensor<T> layer({kvh, p + gen_len, p});
            for (std::size_t h = 0; h < kvh; ++h) {
                for (std::size_t t = 0; t < p; ++t) {
                    const auto src = w.row(h * p + t);
                    std::copy(src.begin(), src.end(), layer.row(h * (p + gen_len) + t).begin());
                }
            }
            trace.layers.push_back(std::move(layer));
        }
        std::vector<Tensor<T>> weights;
        for (std::size_t g = 0; g < gen_len; ++g) {
            step(session, &weights);
            for (std::size_t l = 0; l < weights.size(); ++l) {
                const std::size_t n = weights[l].dim(1);
                for (std::size_t h = 0; h < kvh; ++h) {
                    const T* src = weights[l].data().data() + h * n;
                    std::copy(src, src + p, trace.layers[l].row(h * (p + gen_len) + p + g).begin());
                }
            }
        }
        return trace;
    }

private:
    std::size_t token_row(std::int32_t token) const {
        if (token < 0 || static_cast<std::size_t>(token) >= config_.vocab) {
            throw ConfigError("token " + std::to_string(token) + " outside vocabulary of " +
                              std::to_string(config_.vocab));
        }
        return static_cast<std::size_t>(token);
    }

    static void add_inplace(Tensor<T>& x, const Tensor<T>& y) {
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
    }

    Tensor<T> mlp(const Tensor<T>& x, const LayerWeights<T>& w) const {
        const Tensor<T> h = detail::rms_norm_rows(x, w.mlp_norm);
        const Tensor<T> gate = matmul(h, w.w_gate);
        Tensor<T> up = matmul(h, w.w_up);
        for (std::size_t i = 0; i < up.size(); ++i) up[i] *= detail::silu(gate[i]);
        return matmul(up, w.w_down);
    }

    ModelConfig config_;
    Tensor<T> embedding_;
    std::vector<LayerWeights<T>> layers_;
    Tensor<T> final_norm_;
    Tensor<T> lm_head_;
};

template <typename T>
Model<T> init_model(const ModelConfig& config) {
    return Model<T>(config);
}

// Greedy generation of gen_len tokens. Token 0 comes from the prefill logits;
// every later token costs one decode step. With compression the prompt cache
// is compressed once per layer during prefill and decode positions continue
// from the original prompt length.
template <typename T>
GenerationResult generate(const Model<T>& model, const std::vector<std::int32_t>& prompt, std::size_t gen_len,
                          const std::optional<CompressionConfig>& compression = std::nullopt,
                          std::size_t threads = 1) {
    if (gen_len == 0) throw ConfigError("generate: gen_len must be at least 1");
    if (prompt.empty()) throw ConfigError("generate: empty prompt");
    using clock = std::chrono::steady_clock;
    GenerationResult result;
    PrefillRequest request;
    request.compression = compression;
    request.threads = threads;

    auto t0 = clock::now();
    Session<T> session = model.prefill(prompt, request);
    auto t1 = clock::now();
    result.prefill_latency = std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0);
    result.tokens.push_back(session.next_input);
    result.per_step_latency.push_back(result.prefill_latency);
    result.cache_len_history.push_back(session.caches.front().seq_len());
    for (std::size_t i = 1; i < gen_len; ++i) {
        t0 = clock::now();
        result.tokens.push_back(model.step(session));
        t1 = clock::now();
        result.per_step_latency.push_back(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0));
        result.cache_len_history.push_back(session.caches.front().seq_len());
    }
    for (const auto& c : session.caches) result.cache_entries_per_layer.push_back(c.seq_len());
    return result;
}

} // namespace snapcache
