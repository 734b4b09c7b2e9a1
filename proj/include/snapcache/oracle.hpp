#pragma once

// Brute-force reference for prompt selection. Written from scratch with
// explicit padding buffers and a full sort so it shares no code path with
// vote/pool1d/select_topk; verification compares the two index sets exactly.

#include <algorithm>
#include <cstddef>
#include <utility>
#include <vector>

#include "snapcache/numerics.hpp"
#include "snapcache/tensor.hpp"

namespace snapcache::oracle {

// Returns, per head, the ascending prefix positions a correct selection keeps.
template <typename T>
std::vector<std::vector<std::size_t>> kept_prefix_positions(const Tensor<T>& obs_weights, std::size_t window,
                                                            std::size_t k, std::size_t kernel, PoolMode mode) {
    const std::size_t heads = obs_weights.dim(0);
    const std::size_t rows = obs_weights.dim(1);
    const std::size_t prompt = obs_weights.dim(2);
    const std::size_t prefix = prompt - window;
    const std::size_t half = kernel / 2;
    const T pad = mode == PoolMode::max ? static_cast<T>(kMaskValue) : T{0};

    std::vector<std::vector<std::size_t>> kept(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        std::vector<T> column_sum(prefix, T{0});
        for (std::size_t i = rows - window; i < rows; ++i) {
            for (std::size_t j = 0; j < prefix; ++j) column_sum[j] += obs_weights.at({h, i, j});
        }

        std::vector<T> padded(prefix + 2 * half, pad);
        std::copy(column_sum.begin(), column_sum.end(), padded.begin() + static_cast<std::ptrdiff_t>(half));

        std::vector<std::pair<T, std::size_t>> ranked;
        for (std::size_t j = 0; j < prefix; ++j) {
            T acc = mode == PoolMode::max ? padded[j] : T{0};
            for (std::size_t w = 0; w < kernel; ++w) {
                if (mode == PoolMode::max) {
                    acc = std::max(acc, padded[j + w]);
                } else {
                    acc += padded[j + w];
                }
            }
            if (mode == PoolMode::avg) acc /= static_cast<T>(kernel);
            ranked.emplace_back(acc, j);
        }
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        for (std::size_t i = 0; i < k; ++i) kept[h].push_back(ranked[i].second);
        std::sort(kept[h].begin(), kept[h].end());
    }
    return kept;
}

} // namespace snapcache::oracle
