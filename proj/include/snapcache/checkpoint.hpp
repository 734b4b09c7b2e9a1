#pragma once

// Flat little-endian model checkpoints and token files.
//
// Checkpoint layout:
//   "SNAPTOY1"                                   8 bytes
//   vocab, d_model, layers, num_heads,
//   num_kv_heads, head_dim, mlp_hidden, seed     u64 each
//   precision                                    u64, 32 or 64 (bits per weight)
//   rope_base                                    f64
//   weights in declaration order                 f32 or f64 each
//
// Token file layout:
//   "SNAPTOK1", count (u64), then count x i32.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "snapcache/error.hpp"
#include "snapcache/toymodel.hpp"

namespace snapcache {

inline constexpr std::array<char, 8> kCheckpointMagic{'S', 'N', 'A', 'P', 'T', 'O', 'Y', '1'};
inline constexpr std::array<char, 8> kTokenMagic{'S', 'N', 'A', 'P', 'T', 'O', 'K', '1'};

namespace detail {

template <typename U>
void put_le(std::ostream& out, U value) {
    static_assert(std::is_unsigned_v<U>);
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(value >> (8 * i));
    out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& in, const std::string& what) {
    unsigned char buf[sizeof(U)];
    if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) throw Error("checkpoint: truncated while reading " + what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(buf[i]) << (8 * i);
    return value;
}

template <typename F>
void put_float(std::ostream& out, F value) {
    if constexpr (sizeof(F) == 4) {
        put_le(out, std::bit_cast<std::uint32_t>(value));
    } else {
        put_le(out, std::bit_cast<std::uint64_t>(value));
    }
}

template <typename F>
F get_float(std::istream& in, const std::string& what) {
    if constexpr (sizeof(F) == 4) {
        return std::bit_cast<F>(get_le<std::uint32_t>(in, what));
    } else {
        return std::bit_cast<F>(get_le<std::uint64_t>(in, what));
    }
}

inline void expect_magic(std::istream& in, const std::array<char, 8>& magic, const std::string& what) {
    std::array<char, 8> got{};
    if (!in.read(got.data(), got.size()) || got != magic) throw Error(what + ": bad magic");
}

} // namespace detail

inline ModelConfig read_checkpoint_header(std::istream& in) {
    detail::expect_magic(in, kCheckpointMagic, "checkpoint");
    ModelConfig c;
    c.vocab = detail::get_le<std::uint64_t>(in, "vocab");
    c.d_model = detail::get_le<std::uint64_t>(in, "d_model");
    c.layers = detail::get_le<std::uint64_t>(in, "layers");
    c.num_heads = detail::get_le<std::uint64_t>(in, "num_heads");
    c.num_kv_heads = detail::get_le<std::uint64_t>(in, "num_kv_heads");
    c.head_dim = detail::get_le<std::uint64_t>(in, "head_dim");
    c.mlp_hidden = detail::get_le<std::uint64_t>(in, "mlp_hidden");
    c.seed = detail::get_le<std::uint64_t>(in, "seed");
    const auto bits = detail::get_le<std::uint64_t>(in, "precision");
    if (bits != 32 && bits != 64) throw Error("checkpoint: unsupported precision " + std::to_string(bits));
    c.precision = bits == 32 ? Precision::f32 : Precision::f64;
    c.rope_base = detail::get_float<double>(in, "rope_base");
    c.validate();
    return c;
}

inline ModelConfig read_checkpoint_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("checkpoint: cannot open " + path.string());
    return read_checkpoint_header(in);
}

template <typename T>
void save_model(const Model<T>& model, std::ostream& out) {
    const ModelConfig& c = model.config();
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    for (std::uint64_t v : {c.vocab, c.d_model, c.layers, c.num_heads, c.num_kv_heads, c.head_dim, c.mlp_hidden}) {
        detail::put_le<std::uint64_t>(out, v);
    }
    detail::put_le<std::uint64_t>(out, c.seed);
    detail::put_le<std::uint64_t>(out, sizeof(T) * 8);
    detail::put_float<double>(out, c.rope_base);
    for (const Tensor<T>* t : model.parameters()) {
        for (T v : t->data()) detail::put_float<T>(out, v);
    }
}

template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("checkpoint: cannot write " + path.string());
    save_model(model, out);
    if (!out) throw Error("checkpoint: write failed for " + path.string());
}

template <typename T>
Model<T> load_model(std::istream& in) {
    const ModelConfig config = read_checkpoint_header(in);
    if (config.precision != precision_of<T>()) {
        throw Error("checkpoint: stored precision " + std::string(to_string(config.precision)) +
                    " does not match requested " + std::string(to_string(precision_of<T>())));
    }
    // Shapes come from the config; the seeded init is overwritten.
    Model<T> model(config);
    for (Tensor<T>* t : model.mutable_parameters()) {
        for (T& v : t->data()) v = detail::get_float<T>(in, "weights");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw Error("checkpoint: trailing bytes after weights");
    return model;
}

template <typename T>
Model<T> load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("checkpoint: cannot open " + path.string());
    return load_model<T>(in);
}

inline void save_tokens(const std::vector<std::int32_t>& tokens, std::ostream& out) {
    out.write(kTokenMagic.data(), kTokenMagic.size());
    detail::put_le<std::uint64_t>(out, tokens.size());
    for (std::int32_t t : tokens) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t));
}

inline std::vector<std::int32_t> load_tokens(std::istream& in) {
    detail::expect_magic(in, kTokenMagic, "token file");
    const auto n = detail::get_le<std::uint64_t>(in, "token count");
    std::vector<std::int32_t> tokens;
    tokens.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) tokens.push_back(static_cast<std::int32_t>(detail::get_le<std::uint32_t>(in, "tokens")));
    return tokens;
}

} // namespace snapcache
