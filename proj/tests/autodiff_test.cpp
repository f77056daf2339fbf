#include "metasoft/autodiff.hpp"

#include <gtest/gtest.h>

#include <functional>
#include <vector>

using namespace metasoft;

namespace {

using GraphFn = std::function<Tape::handle(Tape&, const std::vector<Tape::handle>&)>;

double eval_graph(const GraphFn& fn, const std::vector<Matrix>& inputs) {
    Tape t;
    std::vector<Tape::handle> hs;
    for (const auto& m : inputs) hs.push_back(t.leaf(m));
    return t.val(fn(t, hs)).at(0, 0);
}

// Central finite differences on every entry of every input, compared against
// the tape's analytic gradients.
void check_gradients(const GraphFn& fn, std::vector<Matrix> inputs, double tol = 1e-6) {
    Tape t;
    std::vector<Tape::handle> hs;
    for (const auto& m : inputs) hs.push_back(t.leaf(m));
    Tape::handle root = fn(t, hs);
    t.backward(root);

    const double step = 1e-6;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
        const Matrix analytic = t.grad(hs[p]);
        for (std::size_t i = 0; i < inputs[p].size(); ++i) {
            const double saved = inputs[p].data[i];
            inputs[p].data[i] = saved + step;
            const double fp = eval_graph(fn, inputs);
            inputs[p].data[i] = saved - step;
            const double fm = eval_graph(fn, inputs);
            inputs[p].data[i] = saved;
            const double fd = (fp - fm) / (2.0 * step);
            const double a = analytic.data[i];
            const double rel = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1e-4});
            EXPECT_LT(rel, tol) << "input " << p << " entry " << i << " analytic=" << a
                                << " fd=" << fd;
        }
    }
}

}  // namespace

TEST(Tape, MatmulChainGradient) {
    Rng rng(1);
    Matrix target = randn(rng, 3, 2);
    GraphFn fn = [target](Tape& t, const std::vector<Tape::handle>& h) {
        return t.mse_against(t.matmul(h[0], h[1]), target);
    };
    check_gradients(fn, {randn(rng, 3, 4), randn(rng, 4, 2)});
}

TEST(Tape, MatmulNtGradient) {
    Rng rng(2);
    Matrix target = randn(rng, 3, 5);
    GraphFn fn = [target](Tape& t, const std::vector<Tape::handle>& h) {
        return t.mse_against(t.matmul_nt(h[0], h[1]), target);
    };
    check_gradients(fn, {randn(rng, 3, 4), randn(rng, 5, 4)});
}

TEST(Tape, ElementwiseGradients) {
    Rng rng(3);
    Matrix target = randn(rng, 4, 4);
    Matrix shift = randn(rng, 4, 4);
    GraphFn fn = [target, shift](Tape& t, const std::vector<Tape::handle>& h) {
        auto a = t.add(h[0], h[1]);
        auto b = t.sub(a, h[2]);
        auto c = t.scale(b, 0.7);
        auto d = t.hadamard(c, h[0]);
        auto e = t.add_const(d, shift);
        return t.mse_against(e, target);
    };
    check_gradients(fn, {randn(rng, 4, 4), randn(rng, 4, 4), randn(rng, 4, 4)});
}

TEST(Tape, RmsNormGradient) {
    Rng rng(4);
    Matrix target = randn(rng, 3, 6);
    GraphFn fn = [target](Tape& t, const std::vector<Tape::handle>& h) {
        return t.mse_against(t.rmsnorm_rows(h[0]), target);
    };
    check_gradients(fn, {randn(rng, 3, 6)});
}

TEST(Tape, GeluGradient) {
    Rng rng(5);
    Matrix target = randn(rng, 4, 3);
    GraphFn fn = [target](Tape& t, const std::vector<Tape::handle>& h) {
        return t.mse_against(t.gelu(h[0]), target);
    };
    check_gradients(fn, {randn(rng, 4, 3)});
}

TEST(Tape, CausalSoftmaxGradient) {
    Rng rng(6);
    Matrix target = randn(rng, 5, 5);
    GraphFn fn = [target](Tape& t, const std::vector<Tape::handle>& h) {
        return t.mse_against(t.causal_softmax(h[0]), target);
    };
    check_gradients(fn, {randn(rng, 5, 5)});
}

TEST(Tape, CausalSoftmaxRowsAreCausalDistributions) {
    Rng rng(60);
    Tape t;
    auto probs = t.causal_softmax(t.leaf(randn(rng, 6, 6, 2.0)));
    const Matrix& y = t.val(probs);
    for (std::size_t i = 0; i < 6; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
            if (j > i) EXPECT_EQ(y.at(i, j), 0.0);
            sum += y.at(i, j);
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Tape, SoftmaxTemperatureGradient) {
    Rng rng(7);
    Matrix target = randn(rng, 3, 5);
    GraphFn fn = [target](Tape& t, const std::vector<Tape::handle>& h) {
        return t.mse_against(t.softmax_rows(h[0], 0.37), target);
    };
    check_gradients(fn, {randn(rng, 3, 5)});
}

TEST(Tape, NormalizeRowsGradient) {
    Rng rng(8);
    Matrix target = randn(rng, 3, 4);
    // Keep entries positive so row sums stay well away from zero.
    Matrix in(3, 4);
    for (double& v : in.data) v = 0.5 + rng.uniform();
    GraphFn fn = [target](Tape& t, const std::vector<Tape::handle>& h) {
        return t.mse_against(t.normalize_rows(h[0]), target);
    };
    check_gradients(fn, {in});
}

TEST(Tape, GatherSliceConcatReshapeGradients) {
    Rng rng(9);
    Matrix target = randn(rng, 4, 4);
    GraphFn fn = [target](Tape& t, const std::vector<Tape::handle>& h) {
        auto g = t.gather_rows(h[0], {2, 0, 2, 5});
        auto left = t.slice_cols(g, 0, 2);
        auto right = t.slice_cols(g, 2, 2);
        auto joined = t.concat_cols({right, left});
        auto top = t.slice_rows(joined, 0, 2);
        auto bottom = t.slice_rows(joined, 2, 2);
        auto stacked = t.concat_rows({bottom, top});
        auto flat = t.reshape(stacked, 4, 4);
        return t.mse_against(flat, target);
    };
    check_gradients(fn, {randn(rng, 6, 4)});
}

TEST(Tape, CrossEntropyGradient) {
    Rng rng(10);
    std::vector<int> targets = {2, 0, 4};
    GraphFn fn = [targets](Tape& t, const std::vector<Tape::handle>& h) {
        return t.cross_entropy_rows(h[0], targets, 1);
    };
    check_gradients(fn, {randn(rng, 5, 6)});
}

TEST(Tape, GramPenaltyGradientMatchesClosedForm) {
    Rng rng(11);
    Matrix l = randn(rng, 4, 6);
    Tape t;
    auto h = t.leaf(l);
    t.backward(t.gram_identity_penalty(h));

    // 4 (L L^T - I) L
    Matrix gram = matmul_nt(l, l);
    for (std::size_t i = 0; i < gram.rows; ++i) gram.at(i, i) -= 1.0;
    Matrix expected = scale(matmul(gram, l), 4.0);
    for (std::size_t i = 0; i < expected.size(); ++i)
        EXPECT_NEAR(t.grad(h).data[i], expected.data[i], 1e-12);

    GraphFn fn = [](Tape& tt, const std::vector<Tape::handle>& hs) {
        return tt.gram_identity_penalty(hs[0]);
    };
    check_gradients(fn, {l});
}

TEST(Tape, FanOutAccumulates) {
    Rng rng(12);
    Matrix target = randn(rng, 3, 3);
    GraphFn fn = [target](Tape& t, const std::vector<Tape::handle>& h) {
        auto prod = t.matmul(h[0], h[0]);  // same leaf used twice
        auto mix = t.add(prod, h[0]);
        return t.mse_against(mix, target);
    };
    check_gradients(fn, {randn(rng, 3, 3)});
}
