#pragma once

// The learnable soft-token factory: an M x d basis library plus a two-layer
// selector that maps pooled prompt features to k rows of composition logits.
// Composition weights come from a Gumbel-Softmax (stochastic while training,
// noise-free at inference), and soft tokens are convex combinations of basis
// rows.

#include <cstddef>
#include <vector>

#include "metasoft/numerics.hpp"

namespace metasoft {

struct MetaLibrary {
    Matrix basis;  // M x d_model

    std::size_t library_size() const { return basis.rows; }
    std::size_t d_model() const { return basis.cols; }
};

struct SelectorParams {
    Matrix w1;  // d_model x d_hidden
    Matrix b1;  // 1 x d_hidden
    Matrix w2;  // d_hidden x (k*M)
    Matrix b2;  // 1 x (k*M)
    std::size_t k = 0;
    std::size_t library_size = 0;

    template <class F>
    void for_each_tensor(F&& f) {
        f("selector.w1", w1);
        f("selector.b1", b1);
        f("selector.w2", w2);
        f("selector.b2", b2);
    }
};

struct SoftTokenSet {
    Matrix embeddings;           // k x d_model
    Matrix composition_weights;  // k x M, rows on the simplex
};

enum class GumbelMode { kStochastic, kDeterministic };

struct GumbelConfig {
    double temperature = 1.0;
    GumbelMode mode = GumbelMode::kDeterministic;
    double anneal_start = 1.0;
    double anneal_end = 0.1;

    void validate() const {
        if (!(temperature > 0.0) || temperature > 10.0)
            throw ParamError("GumbelConfig: temperature must be in (0, 10]");
    }

    // Linear schedule across the whole training run.
    static double annealed(double start, double end, std::size_t step, std::size_t total_steps) {
        if (total_steps <= 1) return end;
        const double f =
            static_cast<double>(step) / static_cast<double>(total_steps - 1);
        return start + (end - start) * std::min(1.0, f);
    }
};

// Penalty carries its init well away from zero so the regularizer has
// something to do; rows are decorrelated by training, not by construction.
inline MetaLibrary init_metalibrary(std::size_t library_size, std::size_t d_model, Rng& rng) {
    MetaLibrary lib;
    lib.basis = randn(rng, library_size, d_model, 1.0 / std::sqrt(static_cast<double>(d_model)));
    return lib;
}

inline SelectorParams init_selector(std::size_t d_model, std::size_t d_hidden, std::size_t k,
                                    std::size_t library_size, Rng& rng) {
    SelectorParams s;
    s.k = k;
    s.library_size = library_size;
    s.w1 = randn(rng, d_model, d_hidden, 1.0 / std::sqrt(static_cast<double>(d_model)));
    s.b1 = Matrix(1, d_hidden);
    s.w2 = randn(rng, d_hidden, k * library_size, 1.0 / std::sqrt(static_cast<double>(d_hidden)));
    s.b2 = Matrix(1, k * library_size);
    return s;
}

// Global prompt descriptor: mean over embedding rows.
inline Matrix prompt_features(const Matrix& prompt_embeddings) {
    if (prompt_embeddings.rows == 0) throw ParamError("prompt_features: empty prompt");
    Matrix mean(1, prompt_embeddings.cols);
    for (std::size_t i = 0; i < prompt_embeddings.rows; ++i)
        for (std::size_t j = 0; j < prompt_embeddings.cols; ++j)
            mean.at(0, j) += prompt_embeddings.at(i, j);
    const double inv = 1.0 / static_cast<double>(prompt_embeddings.rows);
    for (double& v : mean.data) v *= inv;
    return mean;
}

inline Matrix selector_logits(const SelectorParams& s, const Matrix& features) {
    if (features.rows != 1 || features.cols != s.w1.rows)
        throw ShapeError("selector_logits: feature shape mismatch");
    Matrix hidden = matmul(features, s.w1);
    for (std::size_t j = 0; j < hidden.cols; ++j)
        hidden.at(0, j) = gelu_scalar(hidden.at(0, j) + s.b1.at(0, j));
    Matrix flat = matmul(hidden, s.w2);
    for (std::size_t j = 0; j < flat.cols; ++j) flat.at(0, j) += s.b2.at(0, j);
    return Matrix(s.k, s.library_size, std::move(flat.data));
}

// k simplex rows over the library. Stochastic mode perturbs logits with
// Gumbel noise before the temperature softmax; deterministic mode omits the
// noise entirely.
inline Matrix select_weights(const SelectorParams& selector, const Matrix& features,
                             const GumbelConfig& gumbel, Rng& rng) {
    gumbel.validate();
    Matrix logits = selector_logits(selector, features);
    if (gumbel.mode == GumbelMode::kStochastic) {
        auto noise = gumbel_noise(rng, logits.size());
        for (std::size_t i = 0; i < logits.size(); ++i) logits.data[i] += noise[i];
    }
    return softmax_rows(logits, gumbel.temperature);
}

inline SoftTokenSet synthesize(const MetaLibrary& library, const Matrix& weights) {
    if (weights.cols != library.basis.rows)
        throw ShapeError("synthesize: weights columns != library size");
    SoftTokenSet out;
    out.composition_weights = weights;
    out.embeddings = matmul(weights, library.basis);
    return out;
}

// || L L^T - I ||_F^2
inline double orthogonality_penalty(const MetaLibrary& library) {
    Matrix gram = matmul_nt(library.basis, library.basis);
    for (std::size_t i = 0; i < gram.rows; ++i) gram.at(i, i) -= 1.0;
    double acc = 0.0;
    for (double v : gram.data) acc += v * v;
    return acc;
}

// d penalty / d basis = 4 (L L^T - I) L
inline Matrix orthogonality_penalty_grad(const MetaLibrary& library) {
    Matrix gram = matmul_nt(library.basis, library.basis);
    for (std::size_t i = 0; i < gram.rows; ++i) gram.at(i, i) -= 1.0;
    return scale(matmul(gram, library.basis), 4.0);
}

}  // namespace metasoft
