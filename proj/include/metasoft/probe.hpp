#pragma once

// Soft-token probing and budgeted cache partitioning. Importance scores are
// read per layer from the soft-token attention rows the backbone already
// produced; the budget keeps the top-B prompt positions per layer with ties
// broken toward the smaller index.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "metasoft/backbone.hpp"
#include "metasoft/numerics.hpp"

namespace metasoft {

struct ImportanceScores {
    // [layer][prompt position]; each layer vector sums to 1.
    std::vector<std::vector<double>> per_layer;
};

// Deterministic top-k: larger score first, equal scores resolve to the
// smaller index. Returned indices are sorted ascending.
inline std::vector<std::size_t> top_k_indices(const std::vector<double>& scores, std::size_t k) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t keep = std::min(k, scores.size());
    std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    order.resize(keep);
    std::sort(order.begin(), order.end());
    return order;
}

// Head-averaged distribution of soft-token attention over prompt positions,
// computed independently at every layer. Each soft row is restricted to the
// prompt columns and renormalized before averaging, which removes the
// soft-to-soft attention mass.
inline ImportanceScores probe_scores(const AttentionRecord& attn, std::size_t prompt_len,
                                     std::size_t k) {
    if (attn.extra_rows < k || k == 0)
        throw ContractError("probe_scores: attention record lacks soft-token rows");
    if (attn.prompt_len != prompt_len)
        throw ContractError("probe_scores: prompt length mismatch");
    ImportanceScores out;
    out.per_layer.resize(attn.prefill.size());
    for (std::size_t l = 0; l < attn.prefill.size(); ++l) {
        std::vector<double>& scores = out.per_layer[l];
        scores.assign(prompt_len, 0.0);
        const std::size_t heads = attn.prefill[l].size();
        for (std::size_t h = 0; h < heads; ++h) {
            const Matrix& probs = attn.prefill[l][h];
            for (std::size_t i = 0; i < k; ++i) {
                const double* row = probs.row_ptr(prompt_len + i);
                double mass = 0.0;
                for (std::size_t j = 0; j < prompt_len; ++j) mass += row[j];
                const double inv = 1.0 / mass;
                for (std::size_t j = 0; j < prompt_len; ++j) scores[j] += row[j] * inv;
            }
        }
        const double inv_kh = 1.0 / static_cast<double>(k * heads);
        for (double& v : scores) v *= inv_kh;
    }
    return out;
}

// Probe-surrogate importance: the last `count` prompt rows stand in for soft
// tokens. Same restrict-renormalize-average reduction as probe_scores, but no
// trained parameters are involved.
inline ImportanceScores surrogate_scores(const AttentionRecord& attn, std::size_t prompt_len,
                                         std::size_t count) {
    if (attn.prompt_len != prompt_len)
        throw ContractError("surrogate_scores: prompt length mismatch");
    const std::size_t n = std::min(count, prompt_len);
    if (n == 0) throw ParamError("surrogate_scores: need at least one surrogate row");
    ImportanceScores out;
    out.per_layer.resize(attn.prefill.size());
    for (std::size_t l = 0; l < attn.prefill.size(); ++l) {
        std::vector<double>& scores = out.per_layer[l];
        scores.assign(prompt_len, 0.0);
        const std::size_t heads = attn.prefill[l].size();
        for (std::size_t h = 0; h < heads; ++h) {
            const Matrix& probs = attn.prefill[l][h];
            for (std::size_t i = prompt_len - n; i < prompt_len; ++i) {
                const double* row = probs.row_ptr(i);
                double mass = 0.0;
                for (std::size_t j = 0; j < prompt_len; ++j) mass += row[j];
                const double inv = 1.0 / mass;
                for (std::size_t j = 0; j < prompt_len; ++j) scores[j] += row[j] * inv;
            }
        }
        const double inv_nh = 1.0 / static_cast<double>(n * heads);
        for (double& v : scores) v *= inv_nh;
    }
    return out;
}

struct PartitionResult {
    struct Layer {
        std::vector<std::size_t> keep;  // row indices into the cache, ascending
        std::vector<std::size_t> drop;  // complement, ascending
        std::vector<std::size_t> kept_positions;
        struct HeadSplit {
            Matrix k_keep, v_keep, k_drop, v_drop;
        };
        std::vector<HeadSplit> heads;
    };
    std::vector<Layer> layers;
    std::size_t d_head = 0;
    std::size_t next_position = 0;
};

// TopK(A_soft, B) per layer. B >= L keeps everything.
inline PartitionResult partition(const KvCache& cache, const ImportanceScores& scores,
                                 std::size_t budget) {
    if (budget < 1) throw ParamError("partition: budget must be >= 1");
    if (scores.per_layer.size() != cache.layers.size())
        throw ContractError("partition: score layers != cache layers");
    PartitionResult out;
    out.next_position = cache.next_position;
    out.layers.resize(cache.layers.size());
    for (std::size_t l = 0; l < cache.layers.size(); ++l) {
        const auto& layer = cache.layers[l];
        const std::size_t rows = layer.positions.size();
        if (scores.per_layer[l].size() != rows)
            throw ContractError("partition: score length != cache rows");
        auto& part = out.layers[l];
        part.keep = top_k_indices(scores.per_layer[l], budget);
        std::vector<char> kept(rows, 0);
        for (std::size_t i : part.keep) kept[i] = 1;
        for (std::size_t i = 0; i < rows; ++i)
            if (!kept[i]) part.drop.push_back(i);
        for (std::size_t i : part.keep) part.kept_positions.push_back(layer.positions[i]);

        part.heads.resize(layer.heads.size());
        for (std::size_t h = 0; h < layer.heads.size(); ++h) {
            const auto& head = layer.heads[h];
            out.d_head = head.k.cols;
            auto gather = [&](const Matrix& src, const std::vector<std::size_t>& idx) {
                Matrix dst(idx.size(), src.cols);
                for (std::size_t i = 0; i < idx.size(); ++i)
                    std::copy_n(src.row_ptr(idx[i]), src.cols, dst.row_ptr(i));
                return dst;
            };
            part.heads[h].k_keep = gather(head.k, part.keep);
            part.heads[h].v_keep = gather(head.v, part.keep);
            part.heads[h].k_drop = gather(head.k, part.drop);
            part.heads[h].v_drop = gather(head.v, part.drop);
        }
    }
    return out;
}

}  // namespace metasoft
