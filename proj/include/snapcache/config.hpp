#pragma once

// Run configuration: flat "key = value" text grouped under [section]
// headers, '#' comments, overrides addressed as section.key.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "snapcache/bench.hpp"
#include "snapcache/error.hpp"
#include "snapcache/snapkv.hpp"
#include "snapcache/toymodel.hpp"

namespace snapcache {

using ConfigMap = std::map<std::string, std::string>;

struct MetricsConfig {
    double theta{0.02};
    double planted_mass{0.6};
    std::size_t cluster_width{1};
    std::size_t clusters{4};
    std::size_t prefix_len{240};
    std::size_t obs_len{16};
    std::size_t heads{4};
    std::size_t recovery_seeds{100};
    // Overlap profile on the toy model.
    std::size_t prompt_len{256};
    std::size_t gen_len{32};
    std::size_t window{16};
    std::size_t top_k{16};
};

struct VerifyConfig {
    std::size_t oracle_cases{1000};
    std::size_t lossless_cases{100};
    std::size_t size_cases{20};
    std::size_t cluster_cases{200};
    std::size_t hitrate_cases{1000};
};

struct DemoConfig {
    std::size_t lines{12};        // kv-lines records in the demo prompt
    std::size_t gen_len{8};
    std::size_t metadata_prompt_len{0};  // > 0: also report a data-free compression plan
    std::size_t map_width{96};    // characters per kept/dropped map row
};

struct RunConfig {
    std::uint64_t seed{0};
    ModelConfig model{};
    CompressionConfig compression{16, std::size_t{64}, 5, PoolMode::max, std::nullopt};
    SweepConfig bench{};
    MetricsConfig metrics{};
    VerifyConfig verify{};
    DemoConfig demo{};

    void validate() const {
        model.validate();
        compression.validate();
        try {
            bench.validate();
        } catch (const ConfigError& e) {
            const std::string what = e.what();
            // bench.model shares ModelConfig's messages.
            throw ConfigError(what.rfind("model.", 0) == 0 ? "bench_" + what : what);
        }
        if (metrics.theta < 0.0) throw ConfigError("metrics.theta: must be non-negative");
        if (!(metrics.planted_mass > 0.0 && metrics.planted_mass <= 1.0)) {
            throw ConfigError("metrics.planted_mass: must be in (0, 1]");
        }
        if (metrics.cluster_width == 0) throw ConfigError("metrics.cluster_width: must be positive");
        if (metrics.clusters == 0) throw ConfigError("metrics.clusters: must be positive");
        if (metrics.clusters * (metrics.cluster_width + 2) > metrics.prefix_len) {
            throw ConfigError("metrics.prefix_len: too short for the planted clusters");
        }
        if (metrics.heads == 0 || metrics.obs_len == 0) throw ConfigError("metrics.heads/obs_len: must be positive");
        if (metrics.window == 0 || metrics.window >= metrics.prompt_len) {
            throw ConfigError("metrics.window: must be positive and shorter than metrics.prompt_len");
        }
        if (metrics.top_k == 0 || metrics.top_k > metrics.prompt_len - metrics.window) {
            throw ConfigError("metrics.top_k: must be in [1, prompt_len - window]");
        }
        if (metrics.gen_len == 0) throw ConfigError("metrics.gen_len: must be positive");
        if (demo.lines == 0) throw ConfigError("demo.lines: must be positive");
        if (demo.gen_len == 0) throw ConfigError("demo.gen_len: must be positive");
        if (demo.map_width == 0) throw ConfigError("demo.map_width: must be positive");
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    return static_cast<std::size_t>(out);
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline bool is_none(const std::string& v) { return v == "none" || v.empty(); }

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline PoolMode parse_pool(const std::string& key, const std::string& v) {
    if (v == "max") return PoolMode::max;
    if (v == "avg") return PoolMode::avg;
    throw ConfigError(key + ": expected max or avg, got '" + v + "'");
}

inline Precision parse_precision(const std::string& key, const std::string& v) {
    if (v == "f32") return Precision::f32;
    if (v == "f64") return Precision::f64;
    throw ConfigError(key + ": expected f32 or f64, got '" + v + "'");
}

inline bool apply_model_key(ModelConfig& m, const std::string& name, const std::string& key, const std::string& v) {
    if (name == "vocab") m.vocab = parse_size(key, v);
    else if (name == "d_model") m.d_model = parse_size(key, v);
    else if (name == "layers") m.layers = parse_size(key, v);
    else if (name == "num_heads") m.num_heads = parse_size(key, v);
    else if (name == "num_kv_heads") m.num_kv_heads = parse_size(key, v);
    else if (name == "head_dim") m.head_dim = parse_size(key, v);
    else if (name == "mlp_hidden") m.mlp_hidden = parse_size(key, v);
    else if (name == "seed") m.seed = parse_size(key, v);
    else if (name == "precision") m.precision = parse_precision(key, v);
    else if (name == "rope_base") m.rope_base = parse_double(key, v);
    else return false;
    return true;
}

} // namespace detail

// Parses config text into section.key -> value. Keys before any section
// header live in the "run" section.
inline ConfigMap parse_config_text(std::string_view text) {
    ConfigMap out;
    std::string section = "run";
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section");
            section = detail::trim(line.substr(1, line.size() - 2));
            if (section.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = detail::trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        out[section + "." + key] = detail::trim(line.substr(eq + 1));
    }
    return out;
}

inline ConfigMap read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

// Applies every entry on top of the defaults; unknown keys are errors.
inline RunConfig build_run_config(const ConfigMap& entries) {
    using namespace detail;
    RunConfig rc;
    for (const auto& [key, v] : entries) {
        const auto dot = key.find('.');
        const std::string section = key.substr(0, dot);
        const std::string name = key.substr(dot + 1);
        bool known = true;
        if (section == "run") {
            if (name == "seed") rc.seed = parse_size(key, v);
            else known = false;
        } else if (section == "model") {
            known = apply_model_key(rc.model, name, key, v);
        } else if (section == "bench_model") {
            known = apply_model_key(rc.bench.model, name, key, v);
        } else if (section == "compression") {
            if (name == "window_size") rc.compression.window_size = parse_size(key, v);
            else if (name == "max_capacity_prompt")
                rc.compression.max_capacity_prompt = is_none(v) ? std::nullopt : std::optional(parse_size(key, v));
            else if (name == "kernel_size") rc.compression.kernel_size = parse_size(key, v);
            else if (name == "pooling") rc.compression.pooling = parse_pool(key, v);
            else if (name == "compression_rate")
                rc.compression.compression_rate = is_none(v) ? std::nullopt : std::optional(parse_double(key, v));
            else known = false;
        } else if (section == "bench") {
            auto& b = rc.bench;
            if (name == "prompt_lengths" || name == "batch_sizes") {
                std::vector<std::size_t> list;
                for (const auto& item : split_list(v)) list.push_back(parse_size(key, item));
                (name == "prompt_lengths" ? b.prompt_lengths : b.batch_sizes) = list;
            } else if (name == "modes") {
                b.modes.clear();
                for (const auto& item : split_list(v)) {
                    if (item == "baseline") b.modes.push_back(BenchMode::baseline);
                    else if (item == "snapkv") b.modes.push_back(BenchMode::snapkv);
                    else throw ConfigError(key + ": unknown mode '" + item + "'");
                }
            } else if (name == "gen_len") b.gen_len = parse_size(key, v);
            else if (name == "repeats") b.repeats = parse_size(key, v);
            else if (name == "warmup") b.warmup = parse_size(key, v);
            else if (name == "include_prefill") b.include_prefill = parse_bool(key, v);
            else if (name == "memory_limit_bytes")
                b.memory_limit_bytes = is_none(v) ? std::nullopt : std::optional(parse_size(key, v));
            else if (name == "window_size") b.compression.window_size = parse_size(key, v);
            else if (name == "max_capacity_prompt") b.compression.max_capacity_prompt = parse_size(key, v);
            else if (name == "kernel_size") b.compression.kernel_size = parse_size(key, v);
            else if (name == "pooling") b.compression.pooling = parse_pool(key, v);
            else known = false;
        } else if (section == "metrics") {
            auto& m = rc.metrics;
            if (name == "theta") m.theta = parse_double(key, v);
            else if (name == "planted_mass") m.planted_mass = parse_double(key, v);
            else if (name == "cluster_width") m.cluster_width = parse_size(key, v);
            else if (name == "clusters") m.clusters = parse_size(key, v);
            else if (name == "prefix_len") m.prefix_len = parse_size(key, v);
            else if (name == "obs_len") m.obs_len = parse_size(key, v);
            else if (name == "heads") m.heads = parse_size(key, v);
            else if (name == "recovery_seeds") m.recovery_seeds = parse_size(key, v);
            else if (name == "prompt_len") m.prompt_len = parse_size(key, v);
            else if (name == "gen_len") m.gen_len = parse_size(key, v);
            else if (name == "window") m.window = parse_size(key, v);
            else if (name == "top_k") m.top_k = parse_size(key, v);
            else known = false;
        } else if (section == "verify") {
            auto& c = rc.verify;
            if (name == "cases" || name == "oracle_cases") c.oracle_cases = parse_size(key, v);
            else if (name == "lossless_cases") c.lossless_cases = parse_size(key, v);
            else if (name == "size_cases") c.size_cases = parse_size(key, v);
            else if (name == "cluster_cases") c.cluster_cases = parse_size(key, v);
            else if (name == "hitrate_cases") c.hitrate_cases = parse_size(key, v);
            else known = false;
        } else if (section == "demo") {
            if (name == "lines") rc.demo.lines = parse_size(key, v);
            else if (name == "gen_len") rc.demo.gen_len = parse_size(key, v);
            else if (name == "metadata_prompt_len") rc.demo.metadata_prompt_len = parse_size(key, v);
            else if (name == "map_width") rc.demo.map_width = parse_size(key, v);
            else known = false;
        } else {
            known = false;
        }
        if (!known) throw ConfigError(key + ": unknown configuration key");
    }
    return rc;
}

} // namespace snapcache
