#pragma once

// A tiny frozen decoder-only transformer with learned absolute positions,
// parameter-free RMS norms and a GELU feed-forward. It exposes per-head
// attention maps and the KV cache at prefill and at every decode step, which
// is what the probing and eviction machinery consumes.
//
// The block forward is written once, templated over an engine: EagerEngine
// evaluates plain matrices, Tape records the same computation for gradients.

#include <cstddef>
#include <optional>
#include <vector>

#include "metasoft/autodiff.hpp"
#include "metasoft/numerics.hpp"

namespace metasoft {

struct BackboneConfig {
    std::size_t vocab_size = 256;
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_head = 16;
    std::size_t max_positions = 1024;

    void validate() const {
        if (vocab_size < 2 || d_model == 0 || n_layers == 0 || n_heads == 0)
            throw ParamError("BackboneConfig: fields must be positive");
        if (d_model != n_heads * d_head)
            throw ShapeError("BackboneConfig: d_model != n_heads * d_head");
    }

    static BackboneConfig with_derived_head(BackboneConfig c) {
        if (c.n_heads == 0 || c.d_model % c.n_heads != 0)
            throw ShapeError("BackboneConfig: d_model not divisible by n_heads");
        c.d_head = c.d_model / c.n_heads;
        c.validate();
        return c;
    }
};

struct BackboneWeights {
    BackboneConfig config;
    Matrix tok_emb;  // vocab_size x d_model
    Matrix pos_emb;  // max_positions x d_model
    struct Layer {
        Matrix wq, wk, wv, wo;  // d_model x d_model
        Matrix w_ff1;           // d_model x 4*d_model
        Matrix w_ff2;           // 4*d_model x d_model
    };
    std::vector<Layer> layers;
    Matrix w_out;  // d_model x vocab_size

    // Stable tensor order shared by checkpoints and the optimizer.
    template <class F>
    void for_each_tensor(F&& f) {
        f("tok_emb", tok_emb);
        f("pos_emb", pos_emb);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            f(p + "wq", layers[l].wq);
            f(p + "wk", layers[l].wk);
            f(p + "wv", layers[l].wv);
            f(p + "wo", layers[l].wo);
            f(p + "w_ff1", layers[l].w_ff1);
            f(p + "w_ff2", layers[l].w_ff2);
        }
        f("w_out", w_out);
    }
    template <class F>
    void for_each_tensor(F&& f) const {
        const_cast<BackboneWeights*>(this)->for_each_tensor(
            [&](const std::string& n, Matrix& m) { f(n, const_cast<const Matrix&>(m)); });
    }
};

inline BackboneWeights init_backbone(const BackboneConfig& config, Rng& rng) {
    config.validate();
    BackboneWeights w;
    w.config = config;
    const double gain = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    w.tok_emb = randn(rng, config.vocab_size, config.d_model, gain);
    w.pos_emb = randn(rng, config.max_positions, config.d_model, gain);
    w.layers.resize(config.n_layers);
    for (auto& layer : w.layers) {
        layer.wq = randn(rng, config.d_model, config.d_model, gain);
        layer.wk = randn(rng, config.d_model, config.d_model, gain);
        layer.wv = randn(rng, config.d_model, config.d_model, gain);
        layer.wo = randn(rng, config.d_model, config.d_model, gain);
        layer.w_ff1 = randn(rng, config.d_model, 4 * config.d_model, gain);
        layer.w_ff2 = randn(rng, 4 * config.d_model, config.d_model, gain);
    }
    w.w_out = randn(rng, config.d_model, config.vocab_size, gain);
    return w;
}

// ---------------------------------------------------------------------------
// Eager evaluation engine (same op surface as Tape, no recording).

inline Matrix rmsnorm_rows_eager(const Matrix& x) {
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) ms += x.at(i, j) * x.at(i, j);
        const double r = 1.0 / std::sqrt(ms / static_cast<double>(x.cols) + 1e-8);
        for (std::size_t j = 0; j < x.cols; ++j) out.at(i, j) = x.at(i, j) * r;
    }
    return out;
}

inline Matrix gelu_eager(Matrix x) {
    for (double& v : x.data) v = gelu_scalar(v);
    return x;
}

inline Matrix causal_softmax_eager(const Matrix& x) {
    if (x.rows != x.cols) throw ShapeError("causal_softmax: square scores expected");
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double mx = -HUGE_VAL;
        for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, x.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            out.at(i, j) = std::exp(x.at(i, j) - mx);
            sum += out.at(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) out.at(i, j) /= sum;
    }
    return out;
}

struct EagerEngine {
    using handle = Matrix;
    handle leaf(Matrix v) { return v; }
    const Matrix& val(const handle& h) const { return h; }
    handle add(const handle& a, const handle& b) { return metasoft::add(a, b); }
    handle scale(const handle& a, double s) { return metasoft::scale(a, s); }
    handle matmul(const handle& a, const handle& b) { return metasoft::matmul(a, b); }
    handle matmul_nt(const handle& a, const handle& b) { return metasoft::matmul_nt(a, b); }
    handle gather_rows(const handle& a, const std::vector<std::size_t>& idx) {
        Matrix out(idx.size(), a.cols);
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(a.row_ptr(idx[i]), a.cols, out.row_ptr(i));
        return out;
    }
    handle slice_cols(const handle& a, std::size_t c0, std::size_t n) {
        Matrix out(a.rows, n);
        for (std::size_t i = 0; i < a.rows; ++i) std::copy_n(a.row_ptr(i) + c0, n, out.row_ptr(i));
        return out;
    }
    handle concat_rows(const std::vector<handle>& parts) {
        std::size_t rows = 0;
        for (const auto& p : parts) rows += p.rows;
        Matrix out(rows, parts[0].cols);
        std::size_t r0 = 0;
        for (const auto& p : parts) {
            std::copy_n(p.data.data(), p.size(), out.row_ptr(r0));
            r0 += p.rows;
        }
        return out;
    }
    handle concat_cols(const std::vector<handle>& parts) {
        std::size_t cols = 0;
        for (const auto& p : parts) cols += p.cols;
        Matrix out(parts[0].rows, cols);
        std::size_t c0 = 0;
        for (const auto& p : parts) {
            for (std::size_t i = 0; i < p.rows; ++i)
                std::copy_n(p.row_ptr(i), p.cols, out.row_ptr(i) + c0);
            c0 += p.cols;
        }
        return out;
    }
    handle rmsnorm_rows(const handle& a) { return rmsnorm_rows_eager(a); }
    handle gelu(const handle& a) { return gelu_eager(a); }
    handle causal_softmax(const handle& a) { return causal_softmax_eager(a); }
};

// ---------------------------------------------------------------------------
// Generic block forward.

template <class Engine>
struct WeightHandles {
    using H = typename Engine::handle;
    H tok_emb, pos_emb, w_out;
    struct Layer {
        H wq, wk, wv, wo, w_ff1, w_ff2;
    };
    std::vector<Layer> layers;
};

template <class Engine>
WeightHandles<Engine> lift_weights(Engine& eng, const BackboneWeights& w) {
    WeightHandles<Engine> h;
    h.tok_emb = eng.leaf(w.tok_emb);
    h.pos_emb = eng.leaf(w.pos_emb);
    h.w_out = eng.leaf(w.w_out);
    for (const auto& layer : w.layers)
        h.layers.push_back({eng.leaf(layer.wq), eng.leaf(layer.wk), eng.leaf(layer.wv),
                            eng.leaf(layer.wo), eng.leaf(layer.w_ff1), eng.leaf(layer.w_ff2)});
    return h;
}

template <class Engine>
struct ForwardResult {
    using H = typename Engine::handle;
    std::vector<std::vector<H>> attn;     // [layer][head], T x T row-stochastic
    std::vector<std::vector<H>> k_heads;  // [layer][head], T x d_head
    std::vector<std::vector<H>> v_heads;  // [layer][head], T x d_head
    H hidden;                             // T x d_model, post final norm
};

// Causal forward over [token embeddings; optional extra embedding rows].
// Extra rows sit at positions len(tokens)..len(tokens)+k-1 and attend to the
// whole prompt plus earlier extras.
template <class Engine>
ForwardResult<Engine> transformer_forward(Engine& eng, const WeightHandles<Engine>& w,
                                          const BackboneConfig& cfg,
                                          const std::vector<int>& tokens,
                                          const std::optional<typename Engine::handle>& extras) {
    using H = typename Engine::handle;
    const std::size_t l_prompt = tokens.size();
    const std::size_t n_extra = extras ? eng.val(*extras).rows : 0;
    const std::size_t t_total = l_prompt + n_extra;
    if (t_total == 0) throw ParamError("transformer_forward: empty input");
    if (t_total > cfg.max_positions)
        throw CapacityError("transformer_forward: sequence length " + std::to_string(t_total) +
                            " exceeds max_positions " + std::to_string(cfg.max_positions));

    std::vector<std::size_t> ids(tokens.begin(), tokens.end());
    for (int tok : tokens)
        if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab_size)
            throw ParamError("transformer_forward: token id out of vocabulary");
    H x = eng.gather_rows(w.tok_emb, ids);
    if (extras) x = eng.concat_rows({x, *extras});

    std::vector<std::size_t> pos_ids(t_total);
    for (std::size_t i = 0; i < t_total; ++i) pos_ids[i] = i;
    H h = eng.add(x, eng.gather_rows(w.pos_emb, pos_ids));

    ForwardResult<Engine> res;
    res.attn.resize(cfg.n_layers);
    res.k_heads.resize(cfg.n_layers);
    res.v_heads.resize(cfg.n_layers);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = w.layers[l];
        H a_in = eng.rmsnorm_rows(h);
        H q = eng.matmul(a_in, lw.wq);
        H k = eng.matmul(a_in, lw.wk);
        H v = eng.matmul(a_in, lw.wv);
        std::vector<H> ctx_heads;
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            const std::size_t c0 = head * cfg.d_head;
            H qh = eng.slice_cols(q, c0, cfg.d_head);
            H kh = eng.slice_cols(k, c0, cfg.d_head);
            H vh = eng.slice_cols(v, c0, cfg.d_head);
            H probs = eng.causal_softmax(eng.scale(eng.matmul_nt(qh, kh), inv_sqrt_dh));
            ctx_heads.push_back(eng.matmul(probs, vh));
            res.attn[l].push_back(probs);
            res.k_heads[l].push_back(kh);
            res.v_heads[l].push_back(vh);
        }
        h = eng.add(h, eng.matmul(eng.concat_cols(ctx_heads), lw.wo));
        H f_in = eng.rmsnorm_rows(h);
        h = eng.add(h, eng.matmul(eng.gelu(eng.matmul(f_in, lw.w_ff1)), lw.w_ff2));
    }
    res.hidden = eng.rmsnorm_rows(h);
    return res;
}

// ---------------------------------------------------------------------------
// KV cache and attention record (eager side).

struct KvCache {
    struct Head {
        Matrix k, v;  // rows x d_head
    };
    struct LayerCache {
        std::vector<Head> heads;
        std::vector<std::size_t> positions;  // original token index per row
    };
    std::vector<LayerCache> layers;
    std::size_t next_position = 0;  // position index the next appended token takes

    std::size_t rows(std::size_t layer) const { return layers[layer].positions.size(); }
};

inline KvCache make_empty_cache(const BackboneConfig& cfg) {
    KvCache cache;
    cache.layers.resize(cfg.n_layers);
    for (auto& layer : cache.layers) {
        layer.heads.resize(cfg.n_heads);
        for (auto& head : layer.heads) {
            head.k = Matrix(0, cfg.d_head);
            head.v = Matrix(0, cfg.d_head);
        }
    }
    return cache;
}

struct AttentionRecord {
    // [layer][head], (prompt_len + extra_rows)^2 causal row-stochastic maps.
    std::vector<std::vector<Matrix>> prefill;
    std::size_t prompt_len = 0;
    std::size_t extra_rows = 0;
};

struct PrefillResult {
    KvCache cache;          // prompt rows only; extras never enter the cache
    AttentionRecord attn;   // includes extra rows when probing
    Matrix hidden;          // (prompt_len + extra_rows) x d_model, post final norm
};

inline PrefillResult prefill(const BackboneWeights& w, const std::vector<int>& tokens,
                             const std::optional<Matrix>& extra_embeddings = std::nullopt) {
    const BackboneConfig& cfg = w.config;
    if (tokens.empty()) throw ParamError("prefill: empty prompt");
    EagerEngine eng;
    auto wh = lift_weights(eng, w);
    std::optional<Matrix> extras;
    if (extra_embeddings) {
        if (extra_embeddings->cols != cfg.d_model)
            throw ShapeError("prefill: extra embedding width != d_model");
        extras = *extra_embeddings;
    }
    auto fwd = transformer_forward(eng, wh, cfg, tokens, extras);

    const std::size_t l_prompt = tokens.size();
    PrefillResult out;
    out.hidden = std::move(fwd.hidden);
    out.attn.prompt_len = l_prompt;
    out.attn.extra_rows = extras ? extras->rows : 0;
    out.attn.prefill = std::move(fwd.attn);

    out.cache = make_empty_cache(cfg);
    out.cache.next_position = l_prompt;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto& layer = out.cache.layers[l];
        layer.positions.resize(l_prompt);
        for (std::size_t i = 0; i < l_prompt; ++i) layer.positions[i] = i;
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            Matrix k(l_prompt, cfg.d_head), v(l_prompt, cfg.d_head);
            std::copy_n(fwd.k_heads[l][head].data.data(), l_prompt * cfg.d_head, k.data.data());
            std::copy_n(fwd.v_heads[l][head].data.data(), l_prompt * cfg.d_head, v.data.data());
            layer.heads[head].k = std::move(k);
            layer.heads[head].v = std::move(v);
        }
    }
    return out;
}

inline Matrix logits_from_hidden(const BackboneWeights& w, const Matrix& hidden) {
    return matmul(hidden, w.w_out);
}

inline Matrix logits_for_row(const BackboneWeights& w, const Matrix& hidden, std::size_t row) {
    Matrix h(1, hidden.cols);
    std::copy_n(hidden.row_ptr(row), hidden.cols, h.data.data());
    return matmul(h, w.w_out);
}

struct DecodeResult {
    Matrix logits;                              // 1 x vocab
    std::vector<std::vector<Matrix>> attn_row;  // [layer][head], 1 x rows_after_append
};

// One autoregressive step over (a possibly compressed) cache. The new token
// takes position cache.next_position; retained rows keep their original
// positions.
inline DecodeResult decode_step(const BackboneWeights& w, KvCache& cache, int token) {
    const BackboneConfig& cfg = w.config;
    if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size)
        throw ParamError("decode_step: token id out of vocabulary");
    if (cache.next_position >= cfg.max_positions)
        throw CapacityError("decode_step: position index exceeds max_positions");
    const std::size_t pos = cache.next_position;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));

    Matrix h(1, cfg.d_model);
    for (std::size_t j = 0; j < cfg.d_model; ++j)
        h.at(0, j) = w.tok_emb.at(token, j) + w.pos_emb.at(pos, j);

    DecodeResult out;
    out.attn_row.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = w.layers[l];
        auto& layer = cache.layers[l];
        Matrix a_in = rmsnorm_rows_eager(h);
        Matrix q = matmul(a_in, lw.wq);
        Matrix k = matmul(a_in, lw.wk);
        Matrix v = matmul(a_in, lw.wv);
        std::vector<Matrix> ctx_heads(cfg.n_heads);
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            auto& hd = layer.heads[head];
            const std::size_t prev = hd.k.rows;
            // Append this token's projected K/V, then attend over all rows.
            hd.k.data.insert(hd.k.data.end(), k.data.begin() + head * cfg.d_head,
                             k.data.begin() + (head + 1) * cfg.d_head);
            hd.k.rows += 1;
            hd.v.data.insert(hd.v.data.end(), v.data.begin() + head * cfg.d_head,
                             v.data.begin() + (head + 1) * cfg.d_head);
            hd.v.rows += 1;

            Matrix scores(1, prev + 1);
            for (std::size_t r = 0; r <= prev; ++r) {
                double acc = 0.0;
                for (std::size_t jj = 0; jj < cfg.d_head; ++jj)
                    acc += q.at(0, head * cfg.d_head + jj) * hd.k.at(r, jj);
                scores.at(0, r) = acc * inv_sqrt_dh;
            }
            Matrix probs = softmax_rows(scores, 1.0);
            ctx_heads[head] = matmul(probs, hd.v);
            out.attn_row[l].push_back(std::move(probs));
        }
        EagerEngine eng;
        Matrix ctx = eng.concat_cols(ctx_heads);
        h = add(h, matmul(ctx, lw.wo));
        Matrix f_in = rmsnorm_rows_eager(h);
        h = add(h, matmul(gelu_eager(matmul(f_in, lw.w_ff1)), lw.w_ff2));
        layer.positions.push_back(pos);
    }
    out.logits = matmul(rmsnorm_rows_eager(h), w.w_out);
    cache.next_position = pos + 1;
    return out;
}

inline double nll_from_logits_row(const Matrix& logits, std::size_t row, int target) {
    double mx = -HUGE_VAL;
    for (std::size_t j = 0; j < logits.cols; ++j) mx = std::max(mx, logits.at(row, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) sum += std::exp(logits.at(row, j) - mx);
    return -(logits.at(row, target) - mx - std::log(sum));
}

// Teacher-forced mean NLL (nats/token) from one monolithic forward over
// [context; targets].
inline double sequence_nll_prefill(const BackboneWeights& w, const std::vector<int>& context,
                                   const std::vector<int>& targets) {
    if (targets.empty()) throw ParamError("sequence_nll_prefill: empty targets");
    std::vector<int> all(context);
    all.insert(all.end(), targets.begin(), targets.end());
    PrefillResult pr = prefill(w, all);
    Matrix logits = logits_from_hidden(w, pr.hidden);
    double acc = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i)
        acc += nll_from_logits_row(logits, context.size() + i - 1, targets[i]);
    return acc / static_cast<double>(targets.size());
}

// Teacher-forced mean NLL decoding over a cache. entry_logits are the
// next-token logits the cache's producer already holds (prefill's final row);
// the first target is scored from them, later targets from decode steps.
inline double sequence_nll_decode(const BackboneWeights& w, KvCache& cache,
                                  const Matrix& entry_logits, const std::vector<int>& targets) {
    if (targets.empty()) throw ParamError("sequence_nll_decode: empty targets");
    double acc = nll_from_logits_row(entry_logits, 0, targets[0]);
    for (std::size_t i = 0; i + 1 < targets.size(); ++i) {
        DecodeResult step = decode_step(w, cache, targets[i]);
        acc += nll_from_logits_row(step.logits, 0, targets[i + 1]);
    }
    return acc / static_cast<double>(targets.size());
}

}  // namespace metasoft
