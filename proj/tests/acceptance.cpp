// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include <fmt/core.h>

#include "snapcache/snapcache.hpp"

namespace fs = std::filesystem;
using namespace snapcache;
using clock_type = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass{false};
    std::string detail;
};

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Runs the CLI and returns (exit code, combined output).
std::pair<int, std::string> cli(const std::string& args, const fs::path& out) {
    const fs::path log = out.parent_path() / (out.filename().string() + ".stdout");
    const std::string cmd = "SNAPCACHE_THREADS=1 '" + std::string(SNAPCACHE_CLI) + "' " + args + " --out '" +
                            out.string() + "' > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

Outcome oracle_equivalence() {
    std::ostringstream log;
    const auto t0 = clock_type::now();
    const auto r = verify::oracle_equivalence(1, 1000, log);
    const double s = seconds_since(t0);
    return {r.passed() && s < 60.0, fmt::format("{} cases, {} mismatches, {:.1f}s", r.cases, r.failures, s)};
}

Outcome lossless_bypass() {
    std::ostringstream log;
    const auto t0 = clock_type::now();
    const auto r = verify::lossless_equivalence(2, 100, log);
    const double s = seconds_since(t0);
    return {r.passed() && s < 120.0, fmt::format("{} cases, {} differing, {:.1f}s", r.cases, r.failures, s)};
}

Outcome size_bound(const fs::path& work) {
    std::ostringstream log;
    const auto r = verify::cache_size_bound(3, 50, log);
    const auto [code, out] =
        cli("demo --demo.metadata_prompt_len 389120 --compression.max_capacity_prompt 1024", work / "demo");
    const bool ratio = code == 0 && out.find("metadata prompt 389120: kept 1024 compression_ratio 380.0") != std::string::npos;
    const CompressionPlan plan = plan_compression(389120, CompressionConfig{});
    const bool exact = plan.ratio_numerator() == 389120 && plan.ratio_denominator() == 1024 &&
                       plan.ratio_numerator() == 380 * plan.ratio_denominator();
    return {r.passed() && ratio && exact,
            fmt::format("{} size cases ({} bad), demo ratio line {}, 389120/1024 {}", r.cases, r.failures,
                        ratio ? "found" : "missing", exact ? "exact" : "inexact")};
}

struct BenchOutcomes {
    Outcome latency;
    Outcome memory;
};

BenchOutcomes bench_shape() {
    SweepConfig cfg;  // default grid: 1k..16k, batch 1, d_model 256, 4 layers, f32
    const auto t0 = clock_type::now();
    const auto records = run_sweep<float>(cfg);
    const double s = seconds_since(t0);

    std::vector<double> xs, base, snapped;
    std::map<BenchMode, std::vector<std::size_t>> bytes;
    std::size_t closed_form_misses = 0;
    const ModelConfig& m = cfg.model;
    for (const auto& r : records) {
        const std::size_t entries =
            r.mode == BenchMode::baseline ? r.prompt_len : plan_compression(r.prompt_len, cfg.compression).kept_len;
        if (r.cache_bytes != cache_bytes(std::vector<std::size_t>(m.layers, entries), m.num_kv_heads, m.head_dim,
                                         sizeof(float), r.batch)) {
            ++closed_form_misses;
        }
        bytes[r.mode].push_back(r.cache_bytes);
        if (r.mode == BenchMode::baseline) {
            xs.push_back(static_cast<double>(r.prompt_len));
            base.push_back(r.median_ms_per_token);
        } else {
            snapped.push_back(r.median_ms_per_token);
        }
    }

    BenchOutcomes out;
    const LineFit fit = fit_line(xs, base);
    const double lo = *std::min_element(snapped.begin(), snapped.end());
    const double hi = *std::max_element(snapped.begin(), snapped.end());
    const double last_ratio = snapped.back() / base.back();
    out.latency.pass = fit.slope > 0.0 && fit.r2 >= 0.9 && hi / lo <= 1.25 && last_ratio <= 0.6 && s < 600.0;
    out.latency.detail = fmt::format("baseline slope {:.3e} ms/token R2 {:.4f}; snapkv max/min {:.3f}; "
                                     "snapkv/baseline at {} {:.3f}; {:.0f}s",
                                     fit.slope, fit.r2, hi / lo, cfg.prompt_lengths.back(), last_ratio, s);

    bool increasing = true;
    const auto& b = bytes[BenchMode::baseline];
    for (std::size_t i = 1; i < b.size(); ++i) increasing = increasing && b[i] > b[i - 1];
    bool constant = true;
    const auto& k = bytes[BenchMode::snapkv];
    for (std::size_t i = 0; i < k.size(); ++i) {
        if (cfg.prompt_lengths[i] >= *cfg.compression.max_capacity_prompt) constant = constant && k[i] == k.back();
    }
    out.memory.pass = increasing && constant && closed_form_misses == 0;
    out.memory.detail = fmt::format("baseline increasing {}, snapkv constant {}, closed-form mismatches {}",
                                    increasing ? "yes" : "no", constant ? "yes" : "no", closed_form_misses);
    return out;
}

Outcome hitrate_formula() {
    std::ostringstream log;
    const auto r = verify::hitrate_formula(6, 1000, log);
    return {r.passed(), fmt::format("{} mask pairs, {} disagreements", r.cases, r.failures)};
}

Outcome cluster_preservation() {
    std::ostringstream log;
    const auto r = verify::cluster_preservation(7, 200, log);
    return {r.passed(), fmt::format("{} cases; {}", r.cases, r.detail)};
}

Outcome planted_recovery() {
    const RecoverySpec spec{240, 16, 4, 4, 1, 0.6};
    const double rec = mean_planted_recovery(spec, 100, 8);
    const ModelConfig mc{};
    const StationaryPlantedModel model{mc.layers, mc.num_kv_heads, 4, 1, 0.6, 8};
    const auto profile = window_overlap_profile(model, std::vector<std::int32_t>(256, 0), 32, 16, 4);
    double worst = 1.0;
    for (std::size_t l = 0; l < profile.layers; ++l) worst = std::min(worst, profile.last_window_overlap(l));
    return {rec >= 0.99 && worst >= 0.99,
            fmt::format("mean recovery {:.4f} over 100 seeds; min last-window overlap {:.4f}", rec, worst)};
}

Outcome determinism(const fs::path& work) {
    const auto a = cli("verify --seed 9", work / "verify_a");
    const auto b = cli("verify --seed 9", work / "verify_b");
    const std::string la = slurp(work / "verify_a" / "verify.log");
    const bool logs = a.first == 0 && b.first == 0 && !la.empty() && la == slurp(work / "verify_b" / "verify.log");

    bool round_trip = true;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const Model<double> md(ModelConfig{256, 64, 2, 4, 2, 16, 64, seed, Precision::f64, 10000.0});
        std::stringstream bd;
        save_model(md, bd);
        const std::string first = bd.str();
        const auto back = load_model<double>(bd);
        std::stringstream again;
        save_model(back, again);
        round_trip = round_trip && again.str() == first && back.checksum() == md.checksum();

        const Model<float> mf(ModelConfig{256, 64, 2, 4, 2, 16, 64, seed, Precision::f32, 10000.0});
        std::stringstream bf;
        save_model(mf, bf);
        round_trip = round_trip && load_model<float>(bf).checksum() == mf.checksum();
    }
    return {logs && round_trip, fmt::format("verify logs {}, checkpoint round trip {}",
                                            logs ? "identical" : "differ", round_trip ? "bit-exact" : "broken")};
}

} // namespace

int main() {
    const fs::path work = fs::temp_directory_path() / ("snapcache_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(work);

    std::vector<std::pair<std::string, Outcome>> rows;
    const auto record = [&](std::string name, Outcome o) {
        std::cout << fmt::format("{} {}: {}\n", o.pass ? "PASS" : "FAIL", name, o.detail) << std::flush;
        rows.emplace_back(std::move(name), std::move(o));
    };

    record("1 oracle equivalence", oracle_equivalence());
    record("2 lossless bypass", lossless_bypass());
    record("3 cache size bound", size_bound(work));
    auto bench = bench_shape();
    record("4 latency shape", bench.latency);
    record("5 memory accounting", bench.memory);
    record("6 hit-rate formula", hitrate_formula());
    record("7 cluster preservation", cluster_preservation());
    record("8 planted recovery", planted_recovery());
    record("9 determinism", determinism(work));

    fs::remove_all(work);
    for (const auto& [name, o] : rows) {
        if (!o.pass) return 1;
    }
    return 0;
}
