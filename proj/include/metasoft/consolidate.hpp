#pragma once

// Probing-driven contextual consolidation: evicted values are routed into
// retained values through a sparse, load-balanced, row-stochastic assignment
// over key-space similarity, then applied through a load-adaptive gate.
// Keys and positions of kept tokens are never touched.

#include <algorithm>
#include <cstddef>
#include <utility>
#include <vector>

#include "metasoft/backbone.hpp"
#include "metasoft/numerics.hpp"
#include "metasoft/probe.hpp"

namespace metasoft {

struct FlowConfig {
    std::size_t m = 4;       // top-m routing neighborhood per dropped token
    double tau_r = 1.0;      // routing sharpness
    double gamma = 1.0;      // consolidation coefficient
    double epsilon = 1e-6;

    void validate() const {
        if (m < 1) throw ParamError("FlowConfig: m must be >= 1");
        if (!(tau_r > 0.0)) throw ParamError("FlowConfig: tau_r must be positive");
        if (gamma < 0.0 || gamma > 1.0) throw ParamError("FlowConfig: gamma must be in [0,1]");
        if (!(epsilon > 0.0)) throw ParamError("FlowConfig: epsilon must be positive");
    }
};

// Row-sparse matrix with at most m entries per row; cols indexes kept tokens.
struct SparseRows {
    std::size_t cols = 0;
    std::vector<std::vector<std::pair<std::size_t, double>>> rows;

    double row_sum(std::size_t i) const {
        double s = 0.0;
        for (const auto& [j, w] : rows[i]) s += w;
        return s;
    }
};

struct FlowPlan {
    SparseRows assign;          // A
    std::vector<double> loads;  // l_j, column sums of A
    SparseRows flow;            // W_flow, same sparsity as A
    std::vector<double> gates;  // g_j in [0,1]
    double target_load = 0.0;   // alpha = |drop| / |keep|
};

// Scaled key-space similarity, |drop| x |keep|.
inline Matrix similarity(const Matrix& k_drop, const Matrix& k_keep, std::size_t d_head) {
    if (k_drop.cols != d_head || k_keep.cols != d_head)
        throw ShapeError("similarity: head dimension mismatch");
    if (k_keep.rows == 0 && k_drop.rows > 0)
        throw ContractError("similarity: no kept rows to route dropped rows into");
    return scale(matmul_nt(k_drop, k_keep), 1.0 / std::sqrt(static_cast<double>(d_head)));
}

// Per dropped row: softmax at tau_r over its top-m similarity entries (ties
// to the smaller kept index), zero elsewhere.
inline SparseRows sparse_assign(const Matrix& s_sim, std::size_t m, double tau_r) {
    if (m < 1) throw ParamError("sparse_assign: m must be >= 1");
    if (!(tau_r > 0.0)) throw ParamError("sparse_assign: tau_r must be positive");
    SparseRows a;
    a.cols = s_sim.cols;
    a.rows.resize(s_sim.rows);
    const std::size_t mm = std::min(m, s_sim.cols);
    for (std::size_t i = 0; i < s_sim.rows; ++i) {
        std::vector<double> row(s_sim.row_ptr(i), s_sim.row_ptr(i) + s_sim.cols);
        std::vector<std::size_t> picked = top_k_indices(row, mm);
        double mx = -HUGE_VAL;
        for (std::size_t j : picked) mx = std::max(mx, row[j]);
        double sum = 0.0;
        std::vector<double> ex(picked.size());
        for (std::size_t t = 0; t < picked.size(); ++t) {
            ex[t] = std::exp((row[picked[t]] - mx) / tau_r);
            sum += ex[t];
        }
        for (std::size_t t = 0; t < picked.size(); ++t)
            a.rows[i].push_back({picked[t], ex[t] / sum});
    }
    return a;
}

// Loads, column reweighting by 1/(l_j + eps), then row renormalization. The
// sparsity pattern of A is preserved.
inline std::pair<std::vector<double>, SparseRows> balance(const SparseRows& a, double epsilon) {
    if (!(epsilon > 0.0)) throw ParamError("balance: epsilon must be positive");
    std::vector<double> loads(a.cols, 0.0);
    for (const auto& row : a.rows)
        for (const auto& [j, w] : row) loads[j] += w;
    SparseRows flow;
    flow.cols = a.cols;
    flow.rows.resize(a.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        double sum = 0.0;
        for (const auto& [j, w] : a.rows[i]) sum += w / (loads[j] + epsilon);
        for (const auto& [j, w] : a.rows[i])
            flow.rows[i].push_back({j, (w / (loads[j] + epsilon)) / sum});
    }
    return {std::move(loads), std::move(flow)};
}

// Delta V = W_flow^T V_drop, |keep| x d_head.
inline Matrix aggregate(const SparseRows& w_flow, const Matrix& v_drop) {
    if (w_flow.rows.size() != v_drop.rows) throw ShapeError("aggregate: row count mismatch");
    Matrix delta(w_flow.cols, v_drop.cols);
    for (std::size_t i = 0; i < w_flow.rows.size(); ++i) {
        const double* src = v_drop.row_ptr(i);
        for (const auto& [j, w] : w_flow.rows[i]) {
            double* dst = delta.row_ptr(j);
            for (std::size_t c = 0; c < v_drop.cols; ++c) dst[c] += w * src[c];
        }
    }
    return delta;
}

// V_hat_j = V_j + gamma * g_j * DeltaV_j with g_j = clip(alpha/(l_j+eps), 0, 1).
inline Matrix gated_update(const Matrix& v_keep, const Matrix& delta_v,
                           const std::vector<double>& loads, double alpha, double gamma,
                           double epsilon, std::vector<double>* gates_out = nullptr) {
    if (!v_keep.same_shape(delta_v)) throw ShapeError("gated_update: shape mismatch");
    if (gamma < 0.0 || gamma > 1.0) throw ParamError("gated_update: gamma must be in [0,1]");
    Matrix out = v_keep;
    if (gates_out) gates_out->assign(loads.size(), 0.0);
    for (std::size_t j = 0; j < v_keep.rows; ++j) {
        const double g = std::clamp(alpha / (loads[j] + epsilon), 0.0, 1.0);
        if (gates_out) (*gates_out)[j] = g;
        for (std::size_t c = 0; c < v_keep.cols; ++c)
            out.at(j, c) += gamma * g * delta_v.at(j, c);
    }
    return out;
}

inline FlowPlan build_flow_plan(const Matrix& k_drop, const Matrix& k_keep, std::size_t d_head,
                                const FlowConfig& cfg) {
    FlowPlan plan;
    plan.target_load = k_keep.rows == 0
                           ? 0.0
                           : static_cast<double>(k_drop.rows) / static_cast<double>(k_keep.rows);
    Matrix s_sim = similarity(k_drop, k_keep, d_head);
    plan.assign = sparse_assign(s_sim, cfg.m, cfg.tau_r);  // m clamps to |keep| inside
    auto [loads, flow] = balance(plan.assign, cfg.epsilon);
    plan.loads = std::move(loads);
    plan.flow = std::move(flow);
    plan.gates.assign(plan.loads.size(), 0.0);
    for (std::size_t j = 0; j < plan.loads.size(); ++j)
        plan.gates[j] = std::clamp(plan.target_load / (plan.loads[j] + cfg.epsilon), 0.0, 1.0);
    return plan;
}

// Full consolidation of a partitioned cache: an independent flow plan per
// (layer, head); kept keys and positions pass through untouched. With an
// empty drop set the kept rows are returned bit-identical; gamma = 0 reduces
// to hard TopK eviction.
inline KvCache consolidate(const PartitionResult& part, const FlowConfig& cfg,
                           std::vector<std::vector<FlowPlan>>* plans_out = nullptr) {
    cfg.validate();
    KvCache cache;
    cache.next_position = part.next_position;
    cache.layers.resize(part.layers.size());
    if (plans_out) plans_out->assign(part.layers.size(), {});
    for (std::size_t l = 0; l < part.layers.size(); ++l) {
        const auto& src = part.layers[l];
        auto& dst = cache.layers[l];
        dst.positions = src.kept_positions;
        dst.heads.resize(src.heads.size());
        for (std::size_t h = 0; h < src.heads.size(); ++h) {
            const auto& hs = src.heads[h];
            dst.heads[h].k = hs.k_keep;
            if (hs.k_drop.rows == 0) {
                dst.heads[h].v = hs.v_keep;
                if (plans_out) {
                    FlowPlan empty;
                    empty.assign.cols = hs.k_keep.rows;
                    empty.flow.cols = hs.k_keep.rows;
                    empty.loads.assign(hs.k_keep.rows, 0.0);
                    empty.gates.assign(hs.k_keep.rows, 0.0);
                    (*plans_out)[l].push_back(std::move(empty));
                }
                continue;
            }
            FlowPlan plan = build_flow_plan(hs.k_drop, hs.k_keep, part.d_head, cfg);
            Matrix delta = aggregate(plan.flow, hs.v_drop);
            dst.heads[h].v = gated_update(hs.v_keep, delta, plan.loads, plan.target_load,
                                          cfg.gamma, cfg.epsilon);
            if (plans_out) (*plans_out)[l].push_back(std::move(plan));
        }
    }
    return cache;
}

}  // namespace metasoft
