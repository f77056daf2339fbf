#pragma once

// Training of the soft-token machinery against ground-truth attention:
// extraction of the response->prompt attention target, the MSE + diversity
// loss with gradients through the Gumbel-Softmax composition and the frozen
// backbone, and the two-stage schedule (joint optimization, then
// selector-only fine-tuning). The backbone itself is never a parameter here.

#include <cstddef>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "metasoft/autodiff.hpp"
#include "metasoft/backbone.hpp"
#include "metasoft/metalib.hpp"
#include "metasoft/probe.hpp"

namespace metasoft {

struct TrainingSample {
    std::vector<int> prompt;
    std::vector<int> response;
};

struct GoldDistribution {
    std::vector<double> a_gold;  // length = prompt length; nonnegative
};

struct GoldLayerSet {
    enum class Mode { kAll, kLast, kList };
    Mode mode = Mode::kAll;
    std::vector<std::size_t> list;

    std::vector<std::size_t> resolve(std::size_t n_layers) const {
        switch (mode) {
            case Mode::kAll: {
                std::vector<std::size_t> ids(n_layers);
                std::iota(ids.begin(), ids.end(), std::size_t{0});
                return ids;
            }
            case Mode::kLast:
                return {n_layers - 1};
            case Mode::kList:
                for (std::size_t l : list)
                    if (l >= n_layers) throw ConfigError("gold_layers: layer index out of range");
                return list;
        }
        throw ConfigError("gold_layers: bad mode");
    }
};

struct TrainConfig {
    double lr = 1e-4;
    double lambda_div = 0.01;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t stage1_epochs = 5;
    std::size_t stage2_epochs = 3;
    std::size_t batch = 1;
    double tau_start = 1.0;
    double tau_end = 0.1;
    GoldLayerSet gold_layers;
    bool renormalize_gold = false;
};

// Mean response->prompt attention mass per prompt position (averaged over
// heads, response rows and the configured gold layer set). Left
// unnormalized by default: response rows also attend to response tokens, so
// the prompt block does not sum to 1 on its own.
inline GoldDistribution extract_gold(const BackboneWeights& w, const TrainingSample& sample,
                                     const GoldLayerSet& gold_layers = {},
                                     bool renormalize = false) {
    if (sample.prompt.empty() || sample.response.empty())
        throw ParamError("extract_gold: prompt and response must be nonempty");
    std::vector<int> all(sample.prompt);
    all.insert(all.end(), sample.response.begin(), sample.response.end());
    PrefillResult pr = prefill(w, all);
    const std::size_t lp = sample.prompt.size();
    const std::size_t lr = sample.response.size();
    const auto layers = gold_layers.resolve(w.config.n_layers);

    GoldDistribution out;
    out.a_gold.assign(lp, 0.0);
    for (std::size_t l : layers) {
        for (std::size_t h = 0; h < w.config.n_heads; ++h) {
            const Matrix& probs = pr.attn.prefill[l][h];
            for (std::size_t i = 0; i < lr; ++i) {
                const double* row = probs.row_ptr(lp + i);
                for (std::size_t j = 0; j < lp; ++j) out.a_gold[j] += row[j];
            }
        }
    }
    const double inv =
        1.0 / (static_cast<double>(w.config.n_heads) * static_cast<double>(lr) *
               static_cast<double>(layers.size()));
    for (double& v : out.a_gold) v *= inv;
    if (renormalize) {
        double sum = 0.0;
        for (double v : out.a_gold) sum += v;
        if (sum > 0.0)
            for (double& v : out.a_gold) v /= sum;
    }
    return out;
}

// Layer-set reduction of probe scores to a single importance vector, the
// same reduction the loss uses.
inline std::vector<double> reduce_scores(const ImportanceScores& scores,
                                         const std::vector<std::size_t>& layer_ids) {
    std::vector<double> out(scores.per_layer[layer_ids[0]].size(), 0.0);
    for (std::size_t l : layer_ids)
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += scores.per_layer[l][j];
    for (double& v : out) v /= static_cast<double>(layer_ids.size());
    return out;
}

struct TrainState {
    MetaLibrary library;
    SelectorParams selector;
    TrainConfig config;
    std::size_t step = 0;
    std::size_t stage1_total_steps = 0;
    double tau_g = 1.0;
    bool stage1_done = false;
    std::map<std::string, Matrix> moment1, moment2;
    std::map<std::string, std::size_t> update_count;

    template <class F>
    void for_each_param(F&& f) {
        f("library.basis", library.basis);
        selector.for_each_tensor(f);
    }
};

inline TrainState make_train_state(const MetaLibrary& lib, const SelectorParams& sel,
                                   const TrainConfig& cfg) {
    TrainState st;
    st.library = lib;
    st.selector = sel;
    st.config = cfg;
    st.tau_g = cfg.tau_start;
    return st;
}

struct LossResult {
    double total = 0.0;
    double mse = 0.0;
    double penalty = 0.0;
    Matrix d_basis, d_w1, d_b1, d_w2, d_b2;
};

// Forward + backward of the total objective for one sample, with the Gumbel
// noise supplied explicitly so finite-difference checks can freeze it.
inline LossResult loss_with_noise(const TrainState& state, const BackboneWeights& backbone,
                                  const TrainingSample& sample, const GoldDistribution& gold,
                                  const Matrix& noise, double tau_g, bool want_grads = true) {
    const BackboneConfig& cfg = backbone.config;
    const std::size_t lp = sample.prompt.size();
    const std::size_t k = state.selector.k;
    if (noise.rows != k || noise.cols != state.library.library_size())
        throw ShapeError("loss_with_noise: noise shape must be k x M");

    // Pooled prompt features are constant w.r.t. the trained parameters.
    Matrix prompt_emb(lp, cfg.d_model);
    for (std::size_t i = 0; i < lp; ++i)
        std::copy_n(backbone.tok_emb.row_ptr(sample.prompt[i]), cfg.d_model,
                    prompt_emb.row_ptr(i));
    Matrix features = prompt_features(prompt_emb);

    // Prompt states cannot depend on the appended soft tokens (causality),
    // so the prompt pass runs eagerly once and its per-layer K/V enter the
    // tape as constants. Only the k-row soft tower is differentiated.
    PrefillResult prompt_pass = prefill(backbone, sample.prompt);

    Tape t;
    auto basis = t.leaf(state.library.basis);
    auto w1 = t.leaf(state.selector.w1);
    auto b1 = t.leaf(state.selector.b1);
    auto w2 = t.leaf(state.selector.w2);
    auto b2 = t.leaf(state.selector.b2);
    auto feat = t.leaf(features);

    auto hidden = t.gelu(t.add(t.matmul(feat, w1), b1));
    auto logits = t.reshape(t.add(t.matmul(hidden, w2), b2), k, state.library.library_size());
    auto weights = t.softmax_rows(t.add_const(logits, noise), tau_g);
    auto e_soft = t.matmul(weights, basis);

    Matrix pos_rows(k, cfg.d_model);
    for (std::size_t i = 0; i < k; ++i)
        std::copy_n(backbone.pos_emb.row_ptr(lp + i), cfg.d_model, pos_rows.row_ptr(i));
    auto h_soft = t.add_const(e_soft, pos_rows);

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
    const auto layer_ids = state.config.gold_layers.resolve(cfg.n_layers);
    std::vector<char> is_gold(cfg.n_layers, 0);
    for (std::size_t l : layer_ids) is_gold[l] = 1;

    Matrix row_mean(1, k);
    for (double& v : row_mean.data) v = 1.0 / static_cast<double>(k);
    auto row_mean_leaf = t.leaf(row_mean);
    Tape::handle a_soft = -1;

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = backbone.layers[l];
        auto s_in = t.rmsnorm_rows(h_soft);
        auto q = t.matmul_constb(s_in, lw.wq);
        auto ks = t.matmul_constb(s_in, lw.wk);
        auto vs = t.matmul_constb(s_in, lw.wv);
        std::vector<Tape::handle> ctx_heads;
        Tape::handle layer_score = -1;
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            const std::size_t c0 = head * cfg.d_head;
            auto qh = t.slice_cols(q, c0, cfg.d_head);
            auto ksh = t.slice_cols(ks, c0, cfg.d_head);
            auto vsh = t.slice_cols(vs, c0, cfg.d_head);
            const auto& prompt_head = prompt_pass.cache.layers[l].heads[head];
            auto scores_prompt = t.matmul_nt_constb(qh, prompt_head.k);  // k x L
            auto scores_soft = t.matmul_nt(qh, ksh);                     // k x k
            auto probs = t.offset_causal_softmax(
                t.scale(t.concat_cols({scores_prompt, scores_soft}), inv_sqrt_dh), lp);
            auto probs_prompt = t.slice_cols(probs, 0, lp);
            auto probs_soft = t.slice_cols(probs, lp, k);
            ctx_heads.push_back(t.add(t.matmul_constb(probs_prompt, prompt_head.v),
                                      t.matmul(probs_soft, vsh)));
            if (is_gold[l]) {
                auto head_score = t.matmul(row_mean_leaf, t.normalize_rows(probs_prompt));
                layer_score = (layer_score < 0) ? head_score : t.add(layer_score, head_score);
            }
        }
        h_soft = t.add(h_soft, t.matmul_constb(t.concat_cols(ctx_heads), lw.wo));
        auto f_in = t.rmsnorm_rows(h_soft);
        h_soft = t.add(h_soft,
                       t.matmul_constb(t.gelu(t.matmul_constb(f_in, lw.w_ff1)), lw.w_ff2));
        if (is_gold[l]) {
            layer_score = t.scale(layer_score, 1.0 / static_cast<double>(cfg.n_heads));
            a_soft = (a_soft < 0) ? layer_score : t.add(a_soft, layer_score);
        }
    }
    a_soft = t.scale(a_soft, 1.0 / static_cast<double>(layer_ids.size()));

    Matrix gold_row(1, lp, gold.a_gold);
    auto mse = t.mse_against(a_soft, gold_row);
    auto penalty = t.gram_identity_penalty(basis);
    auto total = t.add(mse, t.scale(penalty, state.config.lambda_div));

    LossResult res;
    res.mse = t.val(mse).at(0, 0);
    res.penalty = t.val(penalty).at(0, 0);
    res.total = t.val(total).at(0, 0);
    if (want_grads) {
        t.backward(total);
        res.d_basis = t.grad(basis);
        res.d_w1 = t.grad(w1);
        res.d_b1 = t.grad(b1);
        res.d_w2 = t.grad(w2);
        res.d_b2 = t.grad(b2);
    }
    return res;
}

// Stochastic-mode objective: draws fresh Gumbel noise from the caller's rng.
inline LossResult loss_total(const TrainState& state, const BackboneWeights& backbone,
                             const TrainingSample& sample, const GoldDistribution& gold,
                             Rng& rng) {
    Matrix noise(state.selector.k, state.library.library_size());
    auto draws = gumbel_noise(rng, noise.size());
    noise.data = std::move(draws);
    return loss_with_noise(state, backbone, sample, gold, noise, state.tau_g);
}

namespace detail {

inline void adamw_update(TrainState& state, const std::string& name, Matrix& param,
                         const Matrix& grad) {
    const TrainConfig& c = state.config;
    Matrix& m1 = state.moment1[name];
    Matrix& m2 = state.moment2[name];
    if (m1.size() == 0) {
        m1 = Matrix(param.rows, param.cols);
        m2 = Matrix(param.rows, param.cols);
    }
    const std::size_t t = ++state.update_count[name];
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        m1.data[i] = c.beta1 * m1.data[i] + (1.0 - c.beta1) * grad.data[i];
        m2.data[i] = c.beta2 * m2.data[i] + (1.0 - c.beta2) * grad.data[i] * grad.data[i];
        const double mhat = m1.data[i] / bc1;
        const double vhat = m2.data[i] / bc2;
        param.data[i] -=
            c.lr * (mhat / (std::sqrt(vhat) + c.adam_eps) + c.weight_decay * param.data[i]);
    }
}

struct GradAccum {
    Matrix basis, w1, b1, w2, b2;
    std::size_t count = 0;

    void add(const LossResult& r) {
        auto acc = [](Matrix& dst, const Matrix& src) {
            if (dst.size() == 0)
                dst = src;
            else
                for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
        };
        acc(basis, r.d_basis);
        acc(w1, r.d_w1);
        acc(b1, r.d_b1);
        acc(w2, r.d_w2);
        acc(b2, r.d_b2);
        ++count;
    }

    void mean() {
        const double inv = 1.0 / static_cast<double>(count);
        for (Matrix* m : {&basis, &w1, &b1, &w2, &b2})
            for (double& v : m->data) v *= inv;
    }
};

}  // namespace detail

struct EpochStats {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double mean_mse = 0.0;
    double penalty = 0.0;
    double tau_g = 0.0;
};

// Gold targets are a pure function of the frozen backbone, so they are
// computed once per dataset.
inline std::vector<GoldDistribution> extract_gold_dataset(const BackboneWeights& backbone,
                                                          const std::vector<TrainingSample>& data,
                                                          const GoldLayerSet& layers,
                                                          bool renormalize) {
    std::vector<GoldDistribution> gold(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
        gold[i] = extract_gold(backbone, data[i], layers, renormalize);
    return gold;
}

namespace detail {

inline std::vector<EpochStats> run_stage(TrainState& state, const BackboneWeights& backbone,
                                         const std::vector<TrainingSample>& data,
                                         std::size_t epochs, Rng& rng, bool update_library,
                                         bool anneal) {
    if (data.empty()) throw ParamError("train: empty dataset");
    if (epochs == 0) return {};
    const std::vector<GoldDistribution> gold = extract_gold_dataset(
        backbone, data, state.config.gold_layers, state.config.renormalize_gold);

    std::vector<EpochStats> log;
    const std::size_t total_steps = epochs * data.size();
    if (anneal) state.stage1_total_steps = total_steps;
    std::size_t step_in_stage = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        // Seeded order shuffle, independent of everything else.
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng = rng.fork(0x5eed0000 + epoch);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

        double loss_sum = 0.0, mse_sum = 0.0;
        detail::GradAccum accum;
        for (std::size_t n = 0; n < order.size(); ++n) {
            if (anneal)
                state.tau_g = GumbelConfig::annealed(state.config.tau_start, state.config.tau_end,
                                                     step_in_stage, total_steps);
            const std::size_t idx = order[n];
            LossResult r = loss_total(state, backbone, data[idx], gold[idx], rng);
            loss_sum += r.total;
            mse_sum += r.mse;
            accum.add(r);
            ++step_in_stage;
            ++state.step;
            if (accum.count == state.config.batch || n + 1 == order.size()) {
                accum.mean();
                if (update_library)
                    detail::adamw_update(state, "library.basis", state.library.basis, accum.basis);
                detail::adamw_update(state, "selector.w1", state.selector.w1, accum.w1);
                detail::adamw_update(state, "selector.b1", state.selector.b1, accum.b1);
                detail::adamw_update(state, "selector.w2", state.selector.w2, accum.w2);
                detail::adamw_update(state, "selector.b2", state.selector.b2, accum.b2);
                accum = detail::GradAccum{};
            }
        }
        EpochStats s;
        s.epoch = epoch + 1;
        s.mean_loss = loss_sum / static_cast<double>(data.size());
        s.mean_mse = mse_sum / static_cast<double>(data.size());
        s.penalty = orthogonality_penalty(state.library);
        s.tau_g = state.tau_g;
        log.push_back(s);
    }
    return log;
}

}  // namespace detail

// Stage I: joint optimization of library and selector, Gumbel temperature
// annealed linearly across the stage.
inline std::vector<EpochStats> train_stage1(TrainState& state, const BackboneWeights& backbone,
                                            const std::vector<TrainingSample>& data,
                                            std::size_t epochs, Rng& rng) {
    auto log = detail::run_stage(state, backbone, data, epochs, rng, /*update_library=*/true,
                                 /*anneal=*/true);
    state.tau_g = state.config.tau_end;
    state.stage1_done = true;
    return log;
}

// Stage II: library frozen bit-exactly, selector fine-tuned at the final
// temperature.
inline std::vector<EpochStats> train_stage2(TrainState& state, const BackboneWeights& backbone,
                                            const std::vector<TrainingSample>& data,
                                            std::size_t epochs, Rng& rng) {
    if (!state.stage1_done) throw StateError("train_stage2: stage 1 has not completed");
    state.tau_g = state.config.tau_end;
    return detail::run_stage(state, backbone, data, epochs, rng, /*update_library=*/false,
                             /*anneal=*/false);
}

}  // namespace metasoft
