#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code{-1};
    std::string out;
};

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / ("snapcache_cli_" + std::to_string(::getpid()) + "_" + info->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    CliRun run(const std::string& args, const fs::path& out_dir) const {
        const fs::path log = dir_ / "stdout.txt";
        const std::string cmd = "SNAPCACHE_THREADS=1 '" + std::string(SNAPCACHE_CLI) + "' " + args + " --out '" +
                                out_dir.string() + "' > '" + log.string() + "' 2>&1";
        const int status = std::system(cmd.c_str());
        CliRun r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(log);
        return r;
    }
    CliRun run(const std::string& args) const { return run(args, dir_ / "out"); }

    static std::string slurp(const fs::path& p) {
        std::ifstream in(p);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    static std::size_t count(const std::string& text, const std::string& needle) {
        std::size_t n = 0;
        for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
        return n;
    }

    fs::path dir_;
};

} // namespace

TEST_F(Cli, VerifyDefaultsPass) {
    const auto r = run("verify");
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_TRUE(fs::exists(dir_ / "out" / "verify.log"));
    EXPECT_EQ(count(r.out, "FAIL"), 0u) << r.out;
}

TEST_F(Cli, VerifyCasesAndSeedAreHonoured) {
    const auto r = run("verify --seed 42 --cases 10");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(count(slurp(dir_ / "out" / "verify.log"), "oracle case "), 10u);
}

TEST_F(Cli, VerifyLogIsReproducible) {
    ASSERT_EQ(run("verify --seed 5", dir_ / "a").code, 0);
    ASSERT_EQ(run("verify --seed 5", dir_ / "b").code, 0);
    EXPECT_EQ(slurp(dir_ / "a" / "verify.log"), slurp(dir_ / "b" / "verify.log"));
}

TEST_F(Cli, EvenKernelIsAUsageError) {
    const auto r = run("verify --compression.kernel_size 4");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("compression.kernel_size"), std::string::npos) << r.out;
}

TEST_F(Cli, UnknownKeyIsAUsageError) {
    const auto r = run("demo --compression.windw_size=8");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("compression.windw_size: unknown configuration key"), std::string::npos) << r.out;
}

TEST_F(Cli, ConfigFileAndOverrides) {
    std::ofstream(dir_ / "run.cfg") << "[compression]\nkernel_size = 4\n";
    EXPECT_EQ(run("demo --config '" + (dir_ / "run.cfg").string() + "'").code, 2);
    EXPECT_EQ(run("demo --config '" + (dir_ / "run.cfg").string() + "' --compression.kernel_size 3").code, 0);
}

TEST_F(Cli, UnwritableOutputIsAUsageError) {
    std::ofstream(dir_ / "file") << "x";
    EXPECT_EQ(run("demo", dir_ / "file" / "sub").code, 2);
}

TEST_F(Cli, DemoLosslessWhenPromptFits) {
    const auto r = run("demo --compression.max_capacity_prompt 1000");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("lossless"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("0 dropped positions"), std::string::npos);
}

TEST_F(Cli, DemoPrintsKeptMapAndRatio) {
    const auto r = run("demo");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("layer 0 head 0"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("compression_ratio"), std::string::npos);
    EXPECT_TRUE(fs::exists(dir_ / "out" / "demo_kept.csv"));
}

TEST_F(Cli, DemoMetadataRatio) {
    const auto r = run("demo --demo.metadata_prompt_len 389120 --compression.max_capacity_prompt 1024");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("metadata prompt 389120: kept 1024 compression_ratio 380.0"), std::string::npos) << r.out;
}

TEST_F(Cli, HitrateWritesCsvsAndFullMassRecovers) {
    const auto r = run("hitrate --metrics.planted_mass 1.0 --metrics.recovery_seeds 20");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("planted recovery (mass 1.00, 20 seeds): 1.0000"), std::string::npos) << r.out;
    for (const char* f : {"overlap_prompt_toy.csv", "overlap_generation_toy.csv", "overlap_prompt_planted.csv",
                          "overlap_generation_planted.csv", "recovery.csv", "hitrate.csv"}) {
        EXPECT_TRUE(fs::exists(dir_ / "out" / f)) << f;
    }
}

TEST_F(Cli, HitrateCsvsAreDeterministic) {
    const std::string args = "hitrate --seed 3 --metrics.recovery_seeds 10";
    ASSERT_EQ(run(args, dir_ / "a").code, 0);
    ASSERT_EQ(run(args, dir_ / "b").code, 0);
    for (const char* f : {"overlap_prompt_toy.csv", "recovery.csv", "hitrate.csv"}) {
        EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
    }
}

TEST_F(Cli, SmallBenchWritesOneRowPerGridPoint) {
    const auto r = run("bench --bench.prompt_lengths 64,128 --bench.batch_sizes 1,2 --bench.gen_len 4 "
                       "--bench.max_capacity_prompt 48 --bench_model.layers 1 --include-prefill");
    ASSERT_EQ(r.code, 0) << r.out;
    const std::string csv = slurp(dir_ / "out" / "bench.csv");
    EXPECT_EQ(count(csv, "\n"), 1u + 2u * 2u * 2u) << csv;
    EXPECT_TRUE(fs::exists(dir_ / "out" / "prefill.csv"));
}

TEST_F(Cli, BenchRequiresSingleThread) {
    const std::string cmd = "SNAPCACHE_THREADS=2 '" + std::string(SNAPCACHE_CLI) + "' bench --out '" +
                            (dir_ / "out").string() + "' > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    ASSERT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 2);
}

TEST_F(Cli, MissingSubcommandIsAUsageError) {
    const std::string cmd = "'" + std::string(SNAPCACHE_CLI) + "' > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    ASSERT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 2);
}
