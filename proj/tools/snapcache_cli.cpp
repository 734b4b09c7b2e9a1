// snapcache: verify | bench | hitrate | demo
//
// Exit codes: 0 success, 1 suite or check failure, 2 usage/config error or
// unwritable output.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "snapcache/snapcache.hpp"

namespace fs = std::filesystem;
using namespace snapcache;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct Options {
    std::string config_path;
    std::string out_dir{"."};
    std::optional<std::uint64_t> seed;
    std::string precision;
    bool include_prefill{false};
    std::optional<std::size_t> cases;
    std::vector<std::string> overrides;  // raw "--section.key value" tokens
};

class UsageError : public Error {
public:
    using Error::Error;
};

// Turns leftover "--section.key value" / "--section.key=value" tokens into
// config entries.
ConfigMap parse_overrides(const std::vector<std::string>& args) {
    ConfigMap out;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (a.rfind("--", 0) != 0 || a.size() == 2) throw UsageError("unexpected argument '" + a + "'");
        std::string key = a.substr(2);
        std::string value;
        if (const auto eq = key.find('='); eq != std::string::npos) {
            value = key.substr(eq + 1);
            key = key.substr(0, eq);
        } else {
            if (i + 1 >= args.size()) throw UsageError("option --" + key + " needs a value");
            value = args[++i];
        }
        if (key.find('.') == std::string::npos) key = "run." + key;
        out[key] = value;
    }
    return out;
}

RunConfig load_config(const Options& opt) {
    ConfigMap entries;
    if (!opt.config_path.empty()) entries = read_config_file(opt.config_path);
    for (const auto& [k, v] : parse_overrides(opt.overrides)) entries[k] = v;
    RunConfig rc = build_run_config(entries);
    if (opt.seed) rc.seed = *opt.seed;
    if (!opt.precision.empty()) {
        rc.model.precision = detail::parse_precision("--precision", opt.precision);
        rc.bench.model.precision = rc.model.precision;
    }
    if (opt.include_prefill) rc.bench.include_prefill = true;
    if (opt.cases) rc.verify.oracle_cases = *opt.cases;
    rc.validate();
    return rc;
}

// Creates the output directory and proves it is writable.
fs::path prepare_out(const std::string& dir) {
    const fs::path out(dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    const fs::path probe = out / ".snapcache-write-test";
    {
        std::ofstream f(probe);
        if (!f) throw UsageError("output directory '" + dir + "' is not writable");
    }
    fs::remove(probe, ec);
    return out;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream f(path);
    if (!f) throw UsageError("cannot write " + path.string());
    return f;
}

int cmd_verify(const RunConfig& rc, const fs::path& out) {
    std::ostringstream log;
    const auto results = verify::run_all(rc.seed, rc.verify, log);
    open_out(out / "verify.log") << log.str();
    std::cout << log.str();
    verify::print_table(std::cout, results);
    bool ok = true;
    for (const auto& r : results) {
        if (!r.passed()) {
            ok = false;
            std::cerr << fmt::format("{} failed; replay seed {}\n", r.name,
                                     r.first_failing_seed ? std::to_string(*r.first_failing_seed) : "n/a");
        }
    }
    return ok ? kOk : kFailed;
}

int cmd_bench(const RunConfig& rc, const fs::path& out) {
    if (threads_from_env() != 1) throw UsageError("SNAPCACHE_THREADS must be 1 for bench");
    const auto progress = [](const BenchRecord& r) {
        std::cerr << fmt::format("{} L={} batch={}: {}\n", to_string(r.mode), r.prompt_len, r.batch,
                                 r.oom ? "OOM" : fmt::format("{:.3f} ms/token", r.median_ms_per_token));
    };
    const auto records = rc.bench.model.precision == Precision::f32 ? run_sweep<float>(rc.bench, progress)
                                                                    : run_sweep<double>(rc.bench, progress);
    {
        auto f = open_out(out / "bench.csv");
        write_bench_csv(f, records);
    }
    if (rc.bench.include_prefill) {
        auto f = open_out(out / "prefill.csv");
        write_prefill_csv(f, records);
    }
    write_bench_csv(std::cout, records);
    return kOk;
}

std::vector<std::int32_t> random_tokens(std::size_t len, std::size_t vocab, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::int32_t> t(len);
    for (auto& x : t) x = static_cast<std::int32_t>(rng.uniform_int(0, static_cast<std::int64_t>(vocab) - 1));
    return t;
}

template <typename T>
int hitrate_impl(const RunConfig& rc, const fs::path& out) {
    const MetricsConfig& m = rc.metrics;
    if (m.prompt_len <= rc.compression.window_size) {
        throw ConfigError("compression.window_size: must be shorter than metrics.prompt_len");
    }
    const Model<T> model(rc.model);
    const auto prompt = random_tokens(m.prompt_len, rc.model.vocab, mix_seed(rc.seed, 1));
    const AttentionTrace<T> toy_trace = model.trace(prompt, m.gen_len);

    const StationaryPlantedModel planted{rc.model.layers, rc.model.num_kv_heads, m.clusters,
                                         m.cluster_width,  m.planted_mass,       mix_seed(rc.seed, 2)};
    const auto write_profile = [&](const std::string& name, const OverlapProfile& p) {
        auto f = open_out(out / fmt::format("overlap_prompt_{}.csv", name));
        write_overlap_csv(f, p.prompt_rows);
        auto g = open_out(out / fmt::format("overlap_generation_{}.csv", name));
        write_overlap_csv(g, p.generation_rows);
        for (std::size_t l = 0; l < p.layers; ++l) {
            std::cout << fmt::format("{} layer {} last-window overlap {:.4f}\n", name, l, p.last_window_overlap(l));
        }
    };
    write_profile("toy", window_overlap_profile(toy_trace, m.window, m.top_k));
    // The planted side selects exactly the planted positions.
    write_profile("planted",
                  window_overlap_profile(planted, prompt, m.gen_len, m.window, m.clusters * m.cluster_width));

    RecoverySpec spec{m.prefix_len, m.obs_len, m.heads, m.clusters, m.cluster_width, m.planted_mass};
    {
        auto f = open_out(out / "recovery.csv");
        f << "planted_mass,mean_recovery\n";
        std::vector<double> masses{0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
        if (std::find(masses.begin(), masses.end(), m.planted_mass) == masses.end()) masses.push_back(m.planted_mass);
        std::sort(masses.begin(), masses.end());
        for (double mass : masses) {
            spec.planted_mass = mass;
            const double r = mean_planted_recovery(spec, m.recovery_seeds, mix_seed(rc.seed, 3));
            f << fmt::format("{:.2f},{:.6f}\n", mass, r);
            if (mass == m.planted_mass) {
                std::cout << fmt::format("planted recovery (mass {:.2f}, {} seeds): {:.4f}\n", mass, m.recovery_seeds, r);
            }
        }
    }

    const HitRateReport report = hit_rate_report(toy_trace, rc.compression, m.theta);
    {
        auto f = open_out(out / "hitrate.csv");
        f << "layer,head,hit_rate\n";
        for (std::size_t l = 0; l < report.per_layer.size(); ++l) {
            for (std::size_t h = 0; h < report.per_layer[l].size(); ++h) {
                f << fmt::format("{},{},{:.6f}\n", l, h, report.per_layer[l][h]);
            }
        }
    }
    std::cout << fmt::format("toy hit rate (theta {}): {:.4f} ({} vacuous cells)\n", m.theta, report.aggregate,
                             report.vacuous);
    return kOk;
}

int cmd_hitrate(const RunConfig& rc, const fs::path& out) {
    return rc.model.precision == Precision::f32 ? hitrate_impl<float>(rc, out) : hitrate_impl<double>(rc, out);
}

template <typename T>
int demo_impl(const RunConfig& rc, const fs::path& out) {
    if (rc.model.vocab < static_cast<std::size_t>(kv_lines::vocab_size)) {
        throw ConfigError(fmt::format("model.vocab: demo prompts need at least {} tokens", kv_lines::vocab_size));
    }
    const KvLinesPrompt prompt = kv_lines_prompt(rc.demo.lines, rc.seed);
    const std::size_t len = prompt.tokens.size();
    const Model<T> model(rc.model);
    const CompressionConfig& cc = rc.compression;
    const CompressionPlan plan = plan_compression(len, cc);

    PrefillRequest request;
    request.compression = cc;
    request.threads = threads_from_env();
    const GenerationResult gen = generate(model, prompt.tokens, rc.demo.gen_len, cc, request.threads);

    std::cout << fmt::format("prompt {} tokens ({} lines), window {}, kernel {}, pooling {}\n", len, rc.demo.lines,
                             cc.window_size, cc.kernel_size, to_string(cc.pooling));
    std::cout << fmt::format("generated: {}\n", fmt::join(gen.tokens, " "));

    auto csv = open_out(out / "demo_kept.csv");
    csv << "layer,head,position,kept\n";
    if (plan.bypass || plan.kept_len == len) {
        std::cout << fmt::format("lossless: prompt of {} fits the capacity, 0 dropped positions\n", len);
        for (std::size_t l = 0; l < rc.model.layers; ++l) {
            for (std::size_t h = 0; h < rc.model.num_kv_heads; ++h) {
                for (std::size_t p = 0; p < len; ++p) csv << fmt::format("{},{},{},1\n", l, h, p);
            }
        }
    } else {
        const Session<T> session = model.prefill(prompt.tokens, request);
        std::cout << fmt::format("kept {} of {} prefix positions per head ('#' kept, '.' dropped)\n", plan.k,
                                 plan.prefix_len);
        for (std::size_t l = 0; l < session.selected.size(); ++l) {
            const auto& sel = session.selected[l];
            for (std::size_t h = 0; h < sel.heads(); ++h) {
                std::string row(plan.prefix_len, '.');
                for (std::size_t p : sel.indices[h]) row[p] = '#';
                std::cout << fmt::format("layer {} head {}  kept {} dropped {}\n", l, h, sel.indices[h].size(),
                                         plan.prefix_len - sel.indices[h].size());
                for (std::size_t b = 0; b < row.size(); b += rc.demo.map_width) {
                    std::cout << "  " << row.substr(b, rc.demo.map_width) << "\n";
                }
                for (std::size_t p = 0; p < len; ++p) {
                    const bool kept = p >= plan.prefix_len || row[p] == '#';
                    csv << fmt::format("{},{},{},{}\n", l, h, p, kept ? 1 : 0);
                }
            }
        }
    }
    std::cout << fmt::format("compression_ratio {:.1f} ({} / {})\n", plan.ratio(), plan.ratio_numerator(),
                             plan.ratio_denominator());

    if (rc.demo.metadata_prompt_len > 0) {
        // Arithmetic only: no cache of this length is ever built.
        const CompressionPlan meta = plan_compression(rc.demo.metadata_prompt_len, cc);
        std::cout << fmt::format("metadata prompt {}: kept {} compression_ratio {:.1f}\n", meta.prompt_len,
                                 meta.kept_len, meta.ratio());
    }
    return kOk;
}

int cmd_demo(const RunConfig& rc, const fs::path& out) {
    return rc.model.precision == Precision::f32 ? demo_impl<float>(rc, out) : demo_impl<double>(rc, out);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"SnapKV cache compression toolkit"};
    app.require_subcommand(1);
    Options opt;
    std::vector<CLI::App*> subs;
    const std::pair<const char*, const char*> commands[] = {
        {"verify", "run the equivalence and invariant suites"},
        {"bench", "decode latency and cache memory sweep (bench.csv)"},
        {"hitrate", "overlap, planted recovery and hit-rate CSVs"},
        {"demo", "compress a kv-lines prompt and print kept-position maps"},
    };
    for (const auto& [name, about] : commands) {
        CLI::App* sub = app.add_subcommand(name, about);
        sub->allow_extras();
        sub->add_option("--config", opt.config_path, "config file (key = value, [section] headers)");
        sub->add_option("--out", opt.out_dir, "output directory");
        sub->add_option("--seed", opt.seed, "run seed");
        sub->add_option("--precision", opt.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
        sub->add_flag("--include-prefill", opt.include_prefill, "bench: also write prefill.csv");
        sub->add_option("--cases", opt.cases, "verify: oracle-equivalence case count");
        subs.push_back(sub);
    }
    app.footer("Any config key can be overridden with --section.key value.");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    CLI::App* sub = nullptr;
    for (CLI::App* s : subs) {
        if (s->parsed()) sub = s;
    }
    opt.overrides = sub->remaining();

    try {
        const RunConfig rc = load_config(opt);
        const fs::path out = prepare_out(opt.out_dir);
        const std::string name = sub->get_name();
        if (name == "verify") return cmd_verify(rc, out);
        if (name == "bench") return cmd_bench(rc, out);
        if (name == "hitrate") return cmd_hitrate(rc, out);
        return cmd_demo(rc, out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailed;
    }
}
