#pragma once

// Comparator compression policies behind a common contract: given a prefill
// cache, the attention record and a budget B, return a cache with exactly
// min(B, L) rows per layer, kept rows in original order. These are
// desk-scale reimplementations in the spirit of the published policies, not
// replications of their codebases.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "metasoft/backbone.hpp"
#include "metasoft/numerics.hpp"
#include "metasoft/probe.hpp"

namespace metasoft {

namespace detail {

// Hard selection of the same row set in every layer.
inline KvCache select_rows_all_layers(const KvCache& cache, const std::vector<std::size_t>& keep) {
    KvCache out;
    out.next_position = cache.next_position;
    out.layers.resize(cache.layers.size());
    for (std::size_t l = 0; l < cache.layers.size(); ++l) {
        const auto& src = cache.layers[l];
        auto& dst = out.layers[l];
        for (std::size_t i : keep) dst.positions.push_back(src.positions[i]);
        dst.heads.resize(src.heads.size());
        for (std::size_t h = 0; h < src.heads.size(); ++h) {
            dst.heads[h].k = Matrix(keep.size(), src.heads[h].k.cols);
            dst.heads[h].v = Matrix(keep.size(), src.heads[h].v.cols);
            for (std::size_t i = 0; i < keep.size(); ++i) {
                std::copy_n(src.heads[h].k.row_ptr(keep[i]), src.heads[h].k.cols,
                            dst.heads[h].k.row_ptr(i));
                std::copy_n(src.heads[h].v.row_ptr(keep[i]), src.heads[h].v.cols,
                            dst.heads[h].v.row_ptr(i));
            }
        }
    }
    return out;
}

inline std::size_t prompt_rows(const KvCache& cache) { return cache.layers[0].positions.size(); }

}  // namespace detail

// Cumulative-attention scoring: mass token j receives from all later prompt
// queries, averaged over heads and layers. Heavy hitters stay, the rest is
// hard-evicted.
inline std::vector<double> h2o_scores(const AttentionRecord& attn, std::size_t prompt_len) {
    std::vector<double> scores(prompt_len, 0.0);
    std::size_t terms = 0;
    for (const auto& layer : attn.prefill)
        for (const Matrix& probs : layer) {
            ++terms;
            for (std::size_t i = 1; i < prompt_len; ++i) {
                const double* row = probs.row_ptr(i);
                for (std::size_t j = 0; j < i; ++j) scores[j] += row[j];
            }
        }
    for (double& v : scores) v /= static_cast<double>(terms);
    return scores;
}

inline KvCache h2o_policy(const KvCache& cache, const AttentionRecord& attn, std::size_t budget) {
    const std::size_t L = detail::prompt_rows(cache);
    return detail::select_rows_all_layers(cache, top_k_indices(h2o_scores(attn, L), budget));
}

// First `sink` positions plus the most recent budget - sink positions.
inline KvCache streaming_policy(const KvCache& cache, std::size_t budget, std::size_t sink) {
    const std::size_t L = detail::prompt_rows(cache);
    if (budget >= L) {
        std::vector<std::size_t> all(L);
        std::iota(all.begin(), all.end(), std::size_t{0});
        return detail::select_rows_all_layers(cache, all);
    }
    if (sink >= budget) throw ParamError("streaming_policy: sink must be smaller than budget");
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < sink; ++i) keep.push_back(i);
    for (std::size_t i = L - (budget - sink); i < L; ++i) keep.push_back(i);
    return detail::select_rows_all_layers(cache, keep);
}

// Attention mass from the last `window` prompt rows, max-pooled over a
// 5-wide neighborhood so clusters survive isolated-spike scoring.
inline std::vector<double> snapkv_scores(const AttentionRecord& attn, std::size_t prompt_len,
                                         std::size_t window, std::size_t pool_width = 5) {
    const std::size_t w = std::min(window, prompt_len);
    std::vector<double> raw(prompt_len, 0.0);
    std::size_t terms = 0;
    for (const auto& layer : attn.prefill)
        for (const Matrix& probs : layer) {
            ++terms;
            for (std::size_t i = prompt_len - w; i < prompt_len; ++i) {
                const double* row = probs.row_ptr(i);
                for (std::size_t j = 0; j < prompt_len; ++j) raw[j] += row[j];
            }
        }
    for (double& v : raw) v /= static_cast<double>(terms);
    std::vector<double> pooled(prompt_len, 0.0);
    const std::size_t half = pool_width / 2;
    for (std::size_t j = 0; j < prompt_len; ++j) {
        const std::size_t lo = j >= half ? j - half : 0;
        const std::size_t hi = std::min(prompt_len - 1, j + half);
        for (std::size_t r = lo; r <= hi; ++r) pooled[j] = std::max(pooled[j], raw[r]);
    }
    return pooled;
}

inline KvCache snapkv_policy(const KvCache& cache, const AttentionRecord& attn,
                             std::size_t budget, std::size_t window) {
    const std::size_t L = detail::prompt_rows(cache);
    if (window > L) window = L;
    return detail::select_rows_all_layers(cache,
                                          top_k_indices(snapkv_scores(attn, L, window), budget));
}

// Seeded uniform B-subset; lower-bound comparator.
inline KvCache random_policy(const KvCache& cache, std::size_t budget, Rng& rng) {
    const std::size_t L = detail::prompt_rows(cache);
    std::vector<std::size_t> idx(L);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t take = std::min(budget, L);
    for (std::size_t i = 0; i < take; ++i)
        std::swap(idx[i], idx[i + rng.uniform_index(L - i)]);
    idx.resize(take);
    std::sort(idx.begin(), idx.end());
    return detail::select_rows_all_layers(cache, idx);
}

// TopK keep as in probe partitioning, then each dropped value is assigned to
// its single most similar kept key and plain-averaged in. No load balancing,
// no gate: the naive-merging comparator.
inline KvCache mean_merge_policy(const KvCache& cache, const ImportanceScores& scores,
                                 std::size_t budget) {
    PartitionResult part = partition(cache, scores, budget);
    KvCache out;
    out.next_position = cache.next_position;
    out.layers.resize(part.layers.size());
    for (std::size_t l = 0; l < part.layers.size(); ++l) {
        const auto& src = part.layers[l];
        auto& dst = out.layers[l];
        dst.positions = src.kept_positions;
        dst.heads.resize(src.heads.size());
        for (std::size_t h = 0; h < src.heads.size(); ++h) {
            const auto& hs = src.heads[h];
            dst.heads[h].k = hs.k_keep;
            Matrix v = hs.v_keep;
            if (hs.k_drop.rows > 0) {
                // argmax of key similarity is scale-invariant, so skip 1/sqrt(d_k)
                Matrix s_sim = matmul_nt(hs.k_drop, hs.k_keep);
                std::vector<std::size_t> assigned_count(hs.k_keep.rows, 0);
                Matrix sums = hs.v_keep;
                for (std::size_t i = 0; i < hs.k_drop.rows; ++i) {
                    std::size_t best = 0;
                    double best_score = s_sim.at(i, 0);
                    for (std::size_t j = 1; j < s_sim.cols; ++j)
                        if (s_sim.at(i, j) > best_score) {
                            best_score = s_sim.at(i, j);
                            best = j;
                        }
                    ++assigned_count[best];
                    for (std::size_t c = 0; c < sums.cols; ++c)
                        sums.at(best, c) += hs.v_drop.at(i, c);
                }
                for (std::size_t j = 0; j < v.rows; ++j) {
                    if (assigned_count[j] == 0) continue;
                    const double inv = 1.0 / static_cast<double>(1 + assigned_count[j]);
                    for (std::size_t c = 0; c < v.cols; ++c) v.at(j, c) = sums.at(j, c) * inv;
                }
            }
            dst.heads[h].v = std::move(v);
        }
    }
    return out;
}

}  // namespace metasoft
