#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "snapcache/numerics.hpp"

using namespace snapcache;
using oracle_test::random_tensor;

TEST(Matmul, IdentityLeavesRightOperand) {
    const Tensor<double> eye({2, 2}, {1, 0, 0, 1});
    const Tensor<double> b({2, 2}, {3, 4, 5, 6});
    EXPECT_EQ(matmul(eye, b), b);
}

TEST(Matmul, RowTimesColumn) {
    const Tensor<double> a({1, 2}, {1, 2});
    const Tensor<double> b({2, 1}, {3, 4});
    const Tensor<double> c = matmul(a, b);
    ASSERT_EQ(c.shape(), (Shape{1, 1}));
    EXPECT_EQ(c[0], 11.0);
}

TEST(Matmul, MatchesTripleLoopOnRandomSeeds) {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Rng rng(seed);
        const auto m = static_cast<std::size_t>(rng.uniform_int(1, 8));
        const auto k = static_cast<std::size_t>(rng.uniform_int(1, 8));
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 8));
        const auto a = random_tensor(rng, {m, k});
        const auto b = random_tensor(rng, {k, n});
        const auto got = matmul(a, b);
        const auto want = oracle_test::triple_loop_matmul(a, b);
        for (std::size_t i = 0; i < got.size(); ++i) {
            const double tol = 1e-12 * std::max(1.0, std::abs(want[i]));
            ASSERT_NEAR(got[i], want[i], tol) << "seed " << seed;
        }
    }
}

TEST(Matmul, FourByEightTimesEightByThree) {
    Rng rng(7);
    const auto a = random_tensor(rng, {4, 8});
    const auto b = random_tensor(rng, {8, 3});
    const auto got = matmul(a, b);
    const auto want = oracle_test::triple_loop_matmul(a, b);
    EXPECT_LE(oracle_test::max_abs_diff(got.data(), want.data()), 1e-12);
}

TEST(Matmul, BroadcastsLeadingAxes) {
    Rng rng(3);
    const auto a = random_tensor(rng, {2, 3, 4, 5});
    const auto b = random_tensor(rng, {5, 2});
    const auto c = matmul(a, b);
    ASSERT_EQ(c.shape(), (Shape{2, 3, 4, 2}));
    for (std::size_t x = 0; x < 2; ++x) {
        for (std::size_t y = 0; y < 3; ++y) {
            Tensor<double> slice({4, 5});
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t j = 0; j < 5; ++j) slice.at({i, j}) = a.at({x, y, i, j});
            const auto want = oracle_test::triple_loop_matmul(slice, b);
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(c.at({x, y, i, j}), want.at({i, j}), 1e-12);
        }
    }
}

TEST(Matmul, RejectsMismatchedInnerDims) {
    EXPECT_THROW(matmul(Tensor<double>({2, 3}), Tensor<double>({4, 2})), ShapeError);
    EXPECT_THROW(matmul(Tensor<double>({2, 2, 3}), Tensor<double>({3, 3, 2})), ShapeError);
    EXPECT_THROW(matmul(Tensor<double>({3}), Tensor<double>({3, 1})), ShapeError);
}

TEST(Matmul, RejectsNonFiniteResult) {
    const Tensor<double> a({1, 1}, {INFINITY});
    EXPECT_THROW(matmul(a, a), NumericError);
}

TEST(Softmax, UniformLogits) {
    const auto s = softmax_rows(Tensor<double>({1, 4}));
    for (double x : s.data()) EXPECT_DOUBLE_EQ(x, 0.25);
}

TEST(Softmax, SingleUnmaskedEntry) {
    const Tensor<double> m({1, 2}, {10.0, 0.0});
    const Tensor<double> mask({1, 2}, {0.0, kMaskValue});
    const auto s = softmax_rows(m, &mask);
    EXPECT_DOUBLE_EQ(s[0], 1.0);
    EXPECT_LT(s[1], 1e-12);
}

TEST(Softmax, RowsSumToOne) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(seed);
        const auto m = random_tensor(rng, {3, 5}, 10.0);
        const auto s = softmax_rows(m);
        for (std::size_t r = 0; r < 3; ++r) {
            double sum = 0.0;
            for (double x : s.row(r)) sum += x;
            EXPECT_NEAR(sum, 1.0, 1e-9);
        }
        const auto f = softmax_rows(m.cast<float>());
        for (std::size_t r = 0; r < 3; ++r) {
            double sum = 0.0;
            for (float x : f.row(r)) sum += x;
            EXPECT_NEAR(sum, 1.0, 1e-5);
        }
    }
}

TEST(Softmax, LargeLogitsStayFinite) {
    const Tensor<double> m({1, 3}, {1e6, 1e6 - 1, -1e6});
    const auto s = softmax_rows(m);
    EXPECT_NEAR(s[0] + s[1] + s[2], 1.0, 1e-12);
}

TEST(Softmax, FullyMaskedRowThrows) {
    const Tensor<double> m({2, 2}, {0, 0, 0, 0});
    const Tensor<double> mask({2, 2}, {0, 0, kMaskValue, kMaskValue});
    EXPECT_THROW(softmax_rows(m, &mask), NumericError);
}

TEST(Softmax, MaskBroadcastsOverLeadingAxes) {
    const Tensor<double> m({2, 2, 2});
    const Tensor<double> mask({2, 2}, {0, kMaskValue, 0, 0});
    const auto s = softmax_rows(m, &mask);
    EXPECT_DOUBLE_EQ(s.at({1, 0, 0}), 1.0);
    EXPECT_DOUBLE_EQ(s.at({1, 1, 1}), 0.5);
    const Tensor<double> bad({3});
    EXPECT_THROW(softmax_rows(m, &bad), ShapeError);
}

TEST(Pool1d, MaxKernelThree) {
    const Tensor<double> v({5}, {1, 0, 5, 0, 1});
    EXPECT_EQ(pool1d(v, 3, PoolMode::max), Tensor<double>({5}, {1, 5, 5, 5, 1}));
}

TEST(Pool1d, KernelOneIsIdentity) {
    Rng rng(1);
    const auto v = random_tensor(rng, {3, 17});
    EXPECT_EQ(pool1d(v, 1, PoolMode::max), v);
    EXPECT_EQ(pool1d(v, 1, PoolMode::avg), v);
}

TEST(Pool1d, AvgPadsWithZeroAndDividesByKernel) {
    const Tensor<double> v({3}, {3, 0, 0});
    EXPECT_EQ(pool1d(v, 3, PoolMode::avg), Tensor<double>({3}, {1, 1, 0}));
}

// Sliding window written out with an explicit padded copy.
TEST(Pool1d, MatchesPaddedWindowOracle) {
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        Rng rng(seed);
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 40));
        const std::size_t kernel = 2 * static_cast<std::size_t>(rng.uniform_int(0, 4)) + 1;
        const auto v = random_tensor(rng, {n});
        for (PoolMode mode : {PoolMode::max, PoolMode::avg}) {
            const std::size_t half = kernel / 2;
            std::vector<double> padded(n + 2 * half, mode == PoolMode::max ? kMaskValue : 0.0);
            for (std::size_t i = 0; i < n; ++i) padded[i + half] = v[i];
            const auto got = pool1d(v, kernel, mode);
            for (std::size_t i = 0; i < n; ++i) {
                double acc = mode == PoolMode::max ? -INFINITY : 0.0;
                for (std::size_t j = i; j < i + kernel; ++j) {
                    acc = mode == PoolMode::max ? std::max(acc, padded[j]) : acc + padded[j];
                }
                if (mode == PoolMode::avg) acc /= static_cast<double>(kernel);
                ASSERT_NEAR(got[i], acc, 1e-12) << "seed " << seed;
            }
        }
    }
}

TEST(Pool1d, MaxDominatesInputAndPreservesLength) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(seed);
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 64));
        const auto v = random_tensor(rng, {2, n});
        for (std::size_t kernel : {1, 3, 5, 7, 9}) {
            const auto p = pool1d(v, kernel, PoolMode::max);
            ASSERT_EQ(p.shape(), v.shape());
            for (std::size_t i = 0; i < v.size(); ++i) ASSERT_GE(p[i], v[i]);
            ASSERT_EQ(pool1d(v, kernel, PoolMode::avg).shape(), v.shape());
        }
    }
}

TEST(Pool1d, RejectsEvenOrZeroKernel) {
    const Tensor<double> v({4});
    EXPECT_THROW(pool1d(v, 0, PoolMode::max), ConfigError);
    EXPECT_THROW(pool1d(v, 4, PoolMode::avg), ConfigError);
}

TEST(Pool1d, KernelWiderThanInput) {
    const Tensor<double> v({2}, {4, 2});
    EXPECT_EQ(pool1d(v, 7, PoolMode::max), Tensor<double>({2}, {4, 4}));
    const auto avg = pool1d(v, 7, PoolMode::avg);
    EXPECT_DOUBLE_EQ(avg[0], 6.0 / 7.0);
}
