#include "metasoft/consolidate.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace metasoft;

namespace {

Matrix dense_of(const SparseRows& s) {
    Matrix m(s.rows.size(), s.cols);
    for (std::size_t i = 0; i < s.rows.size(); ++i)
        for (const auto& [j, w] : s.rows[i]) m.at(i, j) = w;
    return m;
}

// Dense oracle for the whole flow pipeline: materializes A, loads, the
// reweighting, W_flow, DeltaV and the gate as full matrices with independent
// loops. Used to cross-check the sparse implementation.
Matrix dense_consolidate_values(const Matrix& k_drop, const Matrix& k_keep, const Matrix& v_drop,
                                const Matrix& v_keep, std::size_t d_head, const FlowConfig& cfg) {
    const std::size_t nd = k_drop.rows, nk = k_keep.rows;
    if (nd == 0) return v_keep;
    Matrix s(nd, nk);
    for (std::size_t i = 0; i < nd; ++i)
        for (std::size_t j = 0; j < nk; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d_head; ++c) acc += k_drop.at(i, c) * k_keep.at(j, c);
            s.at(i, j) = acc / std::sqrt(static_cast<double>(d_head));
        }
    const std::size_t m = std::min(cfg.m, nk);
    Matrix a(nd, nk);
    for (std::size_t i = 0; i < nd; ++i) {
        // top-m columns, ties toward the smaller index
        std::vector<std::size_t> idx(nk);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
            if (s.at(i, x) != s.at(i, y)) return s.at(i, x) > s.at(i, y);
            return x < y;
        });
        idx.resize(m);
        double mx = -HUGE_VAL;
        for (std::size_t j : idx) mx = std::max(mx, s.at(i, j));
        double sum = 0.0;
        for (std::size_t j : idx) sum += std::exp((s.at(i, j) - mx) / cfg.tau_r);
        for (std::size_t j : idx) a.at(i, j) = std::exp((s.at(i, j) - mx) / cfg.tau_r) / sum;
    }
    std::vector<double> loads(nk, 0.0);
    for (std::size_t j = 0; j < nk; ++j)
        for (std::size_t i = 0; i < nd; ++i) loads[j] += a.at(i, j);
    Matrix wt(nd, nk);
    for (std::size_t i = 0; i < nd; ++i)
        for (std::size_t j = 0; j < nk; ++j) wt.at(i, j) = a.at(i, j) / (loads[j] + cfg.epsilon);
    Matrix wf(nd, nk);
    for (std::size_t i = 0; i < nd; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < nk; ++j) sum += wt.at(i, j);
        for (std::size_t j = 0; j < nk; ++j) wf.at(i, j) = wt.at(i, j) / sum;
    }
    Matrix delta = matmul(transpose(wf), v_drop);
    const double alpha = static_cast<double>(nd) / static_cast<double>(nk);
    Matrix out = v_keep;
    for (std::size_t j = 0; j < nk; ++j) {
        const double g = std::clamp(alpha / (loads[j] + cfg.epsilon), 0.0, 1.0);
        for (std::size_t c = 0; c < v_keep.cols; ++c)
            out.at(j, c) += cfg.gamma * g * delta.at(j, c);
    }
    return out;
}

PartitionResult random_partition(std::size_t layers, std::size_t heads, std::size_t rows,
                                 std::size_t budget, std::size_t d_head, Rng& rng) {
    KvCache cache;
    cache.next_position = rows;
    cache.layers.resize(layers);
    for (auto& layer : cache.layers) {
        for (std::size_t i = 0; i < rows; ++i) layer.positions.push_back(i);
        layer.heads.resize(heads);
        for (auto& head : layer.heads) {
            head.k = randn(rng, rows, d_head);
            head.v = randn(rng, rows, d_head);
        }
    }
    ImportanceScores s;
    s.per_layer.resize(layers);
    for (auto& layer : s.per_layer)
        for (std::size_t i = 0; i < rows; ++i) layer.push_back(rng.uniform());
    return partition(cache, s, budget);
}

}  // namespace

TEST(Similarity, MatchedRowGivesUnitEntry) {
    // Row with squared norm sqrt(d_head): dot = sqrt(d_head), so the scaled
    // entry is exactly 1.
    const std::size_t d_head = 4;
    Matrix keep(2, d_head), drop(1, d_head);
    const double comp = std::sqrt(std::sqrt(static_cast<double>(d_head)) / d_head);
    for (std::size_t c = 0; c < d_head; ++c) {
        keep.at(0, c) = comp;
        drop.at(0, c) = comp;
    }
    keep.at(1, 0) = -1.0;
    keep.at(1, 1) = 1.0;  // some other direction
    Matrix s = similarity(drop, keep, d_head);
    EXPECT_NEAR(s.at(0, 0), 1.0, 1e-12);
}

TEST(Similarity, OrthogonalRowsGiveZero) {
    Matrix keep{{1, 0, 0, 0}};
    Matrix drop{{0, 1, 0, 0}};
    Matrix s = similarity(drop, keep, 4);
    EXPECT_DOUBLE_EQ(s.at(0, 0), 0.0);
}

TEST(Similarity, MatchesDenseMatmulOracle) {
    Rng rng(3);
    Matrix drop = randn(rng, 6, 8), keep = randn(rng, 4, 8);
    Matrix s = similarity(drop, keep, 8);
    Matrix oracle = scale(matmul(drop, transpose(keep)), 1.0 / std::sqrt(8.0));
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s.data[i], oracle.data[i], 1e-12);
}

TEST(Similarity, EmptyKeepWithDropsThrows) {
    Matrix drop(2, 4), keep(0, 4);
    EXPECT_THROW(similarity(drop, keep, 4), ContractError);
}

TEST(SparseAssign, FullNeighborhoodRecoversRowSoftmax) {
    Rng rng(4);
    Matrix s = randn(rng, 5, 7);
    SparseRows a = sparse_assign(s, 7, 0.6);
    Matrix expected = softmax_rows(s, 0.6);
    Matrix got = dense_of(a);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got.data[i], expected.data[i], 1e-12);
}

TEST(SparseAssign, SingleNeighborSaturates) {
    Rng rng(5);
    Matrix s = randn(rng, 4, 6);
    SparseRows a = sparse_assign(s, 1, 1.0);
    for (const auto& row : a.rows) {
        ASSERT_EQ(row.size(), 1u);
        EXPECT_DOUBLE_EQ(row[0].second, 1.0);
    }
}

TEST(SparseAssign, EqualTopScoresShareEqually) {
    Matrix s{{2.0, 2.0, 2.0, -5.0}};
    SparseRows a = sparse_assign(s, 3, 1.0);
    ASSERT_EQ(a.rows[0].size(), 3u);
    for (const auto& [j, w] : a.rows[0]) {
        EXPECT_LT(j, 3u);  // tie rule picked the three smaller indices
        EXPECT_NEAR(w, 1.0 / 3.0, 1e-12);
    }
}

TEST(Balance, UniformLoadsLeaveAssignmentUnchanged) {
    // Two drops, two keeps, perfectly symmetric assignment.
    SparseRows a;
    a.cols = 2;
    a.rows = {{{0, 0.5}, {1, 0.5}}, {{0, 0.5}, {1, 0.5}}};
    auto [loads, flow] = balance(a, 1e-9);
    EXPECT_NEAR(loads[0], 1.0, 1e-12);
    EXPECT_NEAR(loads[1], 1.0, 1e-12);
    Matrix got = dense_of(flow), want = dense_of(a);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got.data[i], want.data[i], 1e-9);
}

TEST(Balance, HandComputedTwoByTwo) {
    SparseRows a;
    a.cols = 2;
    a.rows = {{{0, 1.0}}, {{0, 0.5}, {1, 0.5}}};
    auto [loads, flow] = balance(a, 1e-9);
    EXPECT_NEAR(loads[0], 1.5, 1e-12);
    EXPECT_NEAR(loads[1], 0.5, 1e-12);
    Matrix got = dense_of(flow);
    EXPECT_NEAR(got.at(0, 0), 1.0, 1e-8);
    EXPECT_NEAR(got.at(0, 1), 0.0, 1e-8);
    EXPECT_NEAR(got.at(1, 0), 0.25, 1e-6);
    EXPECT_NEAR(got.at(1, 1), 0.75, 1e-6);
}

TEST(Balance, FlowRowsSumToOneOnRandomAssignments) {
    Rng rng(6);
    for (int trial = 0; trial < 100; ++trial) {
        Matrix s = randn(rng, 1 + rng.uniform_index(12), 1 + rng.uniform_index(9), 2.0);
        SparseRows a = sparse_assign(s, 1 + rng.uniform_index(5), 0.5 + rng.uniform());
        auto [loads, flow] = balance(a, 1e-6);
        for (std::size_t i = 0; i < flow.rows.size(); ++i) {
            EXPECT_NEAR(a.row_sum(i), 1.0, 1e-9);
            EXPECT_NEAR(flow.row_sum(i), 1.0, 1e-9);
        }
        (void)loads;
    }
}

TEST(Aggregate, MassConservation) {
    Rng rng(7);
    Matrix s = randn(rng, 9, 5);
    SparseRows a = sparse_assign(s, 3, 1.0);
    auto [loads, flow] = balance(a, 1e-6);
    (void)loads;
    Matrix v_drop = randn(rng, 9, 4);
    Matrix delta = aggregate(flow, v_drop);
    for (std::size_t c = 0; c < 4; ++c) {
        double got = 0.0, want = 0.0;
        for (std::size_t j = 0; j < 5; ++j) got += delta.at(j, c);
        for (std::size_t i = 0; i < 9; ++i) want += v_drop.at(i, c);
        EXPECT_NEAR(got, want, 1e-9);
    }
}

TEST(Aggregate, SingleKeptTokenAbsorbsColumnSum) {
    Rng rng(8);
    Matrix s = randn(rng, 4, 1);
    SparseRows a = sparse_assign(s, 2, 1.0);
    auto [loads, flow] = balance(a, 1e-6);
    (void)loads;
    Matrix v_drop = randn(rng, 4, 3);
    Matrix delta = aggregate(flow, v_drop);
    for (std::size_t c = 0; c < 3; ++c) {
        double want = 0.0;
        for (std::size_t i = 0; i < 4; ++i) want += v_drop.at(i, c);
        EXPECT_NEAR(delta.at(0, c), want, 1e-9);
    }
}

TEST(Aggregate, EmptyDropGivesZeroDelta) {
    SparseRows flow;
    flow.cols = 3;
    Matrix delta = aggregate(flow, Matrix(0, 4));
    for (double v : delta.data) EXPECT_EQ(v, 0.0);
}

TEST(GatedUpdate, GammaZeroIsIdentity) {
    Rng rng(9);
    Matrix v = randn(rng, 5, 4), delta = randn(rng, 5, 4);
    std::vector<double> loads = {1.0, 2.0, 0.5, 3.0, 0.1};
    Matrix out = gated_update(v, delta, loads, 1.7, 0.0, 1e-6);
    EXPECT_EQ(out.data, v.data);
}

TEST(GatedUpdate, GateClipsAtTargetLoad) {
    Matrix v(2, 1), delta{{1.0}, {1.0}};
    std::vector<double> gates;
    // l = alpha => gate hits the clip boundary at 1.
    Matrix out = gated_update(v, delta, {2.0, 4.0}, 2.0, 1.0, 1e-12, &gates);
    EXPECT_NEAR(gates[0], 1.0, 1e-9);
    EXPECT_NEAR(gates[1], 0.5, 1e-9);  // l = 2*alpha halves the update
    EXPECT_NEAR(out.at(0, 0), 1.0, 1e-9);
    EXPECT_NEAR(out.at(1, 0), 0.5, 1e-9);
}

TEST(Consolidate, FullBudgetIsBitIdenticalNoOp) {
    Rng rng(10);
    PartitionResult part = random_partition(2, 2, 8, 8, 4, rng);
    FlowConfig cfg;
    KvCache out = consolidate(part, cfg);
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(out.layers[l].positions, part.layers[l].kept_positions);
        for (std::size_t h = 0; h < 2; ++h) {
            EXPECT_EQ(out.layers[l].heads[h].k.data, part.layers[l].heads[h].k_keep.data);
            EXPECT_EQ(out.layers[l].heads[h].v.data, part.layers[l].heads[h].v_keep.data);
        }
    }
}

TEST(Consolidate, GammaZeroEqualsHardEviction) {
    Rng rng(11);
    PartitionResult part = random_partition(2, 2, 10, 4, 4, rng);
    FlowConfig cfg;
    cfg.gamma = 0.0;
    KvCache out = consolidate(part, cfg);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t h = 0; h < 2; ++h) {
            EXPECT_EQ(out.layers[l].heads[h].v.data, part.layers[l].heads[h].v_keep.data);
            EXPECT_EQ(out.layers[l].heads[h].k.data, part.layers[l].heads[h].k_keep.data);
        }
}

TEST(Consolidate, MatchesDenseOracle) {
    Rng rng(12);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t rows = 6, budget = 3, d_head = 4;
        PartitionResult part = random_partition(1, 1, rows, budget, d_head, rng);
        FlowConfig cfg;
        cfg.m = 2;
        KvCache out = consolidate(part, cfg);
        const auto& hs = part.layers[0].heads[0];
        Matrix want =
            dense_consolidate_values(hs.k_drop, hs.k_keep, hs.v_drop, hs.v_keep, d_head, cfg);
        for (std::size_t i = 0; i < want.size(); ++i)
            EXPECT_NEAR(out.layers[0].heads[0].v.data[i], want.data[i], 1e-9);
    }
}

TEST(Consolidate, KeysAndPositionsInvariant) {
    Rng rng(13);
    PartitionResult part = random_partition(3, 2, 12, 5, 4, rng);
    FlowConfig cfg;
    KvCache out = consolidate(part, cfg);
    for (std::size_t l = 0; l < 3; ++l) {
        EXPECT_EQ(out.layers[l].positions, part.layers[l].kept_positions);
        for (std::size_t h = 0; h < 2; ++h)
            EXPECT_EQ(out.layers[l].heads[h].k.data, part.layers[l].heads[h].k_keep.data);
    }
}

TEST(Consolidate, ValueScaleEquivariance) {
    Rng rng(14);
    PartitionResult part = random_partition(1, 1, 9, 4, 4, rng);
    FlowConfig cfg;
    KvCache base = consolidate(part, cfg);

    PartitionResult doubled = part;
    for (auto& layer : doubled.layers)
        for (auto& head : layer.heads) {
            head.v_keep = scale(head.v_keep, 2.0);
            head.v_drop = scale(head.v_drop, 2.0);
        }
    KvCache twice = consolidate(doubled, cfg);
    for (std::size_t i = 0; i < base.layers[0].heads[0].v.size(); ++i)
        EXPECT_DOUBLE_EQ(twice.layers[0].heads[0].v.data[i],
                         2.0 * base.layers[0].heads[0].v.data[i]);
}

TEST(Consolidate, ReweightingNeverRaisesPeakColumnMass) {
    Rng rng(15);
    for (int trial = 0; trial < 200; ++trial) {
        Matrix s = randn(rng, 2 + rng.uniform_index(10), 2 + rng.uniform_index(6), 1.5);
        SparseRows a = sparse_assign(s, 1 + rng.uniform_index(4), 1.0);
        auto [loads, flow] = balance(a, 1e-6);
        std::vector<double> flow_loads(flow.cols, 0.0);
        for (const auto& row : flow.rows)
            for (const auto& [j, w] : row) flow_loads[j] += w;
        const double peak_before = *std::max_element(loads.begin(), loads.end());
        const double peak_after = *std::max_element(flow_loads.begin(), flow_loads.end());
        EXPECT_LE(peak_after, peak_before + 1e-9);
    }
}
