#pragma once

// One-time next-token pretraining of the tiny backbone on the synthetic
// corpus, so that response attention (and therefore the gold targets) carry
// real retrieval structure. After this the weights are frozen everywhere.

#include <map>
#include <string>
#include <vector>

#include "metasoft/backbone.hpp"
#include "metasoft/train.hpp"

namespace metasoft {

struct PretrainStats {
    std::size_t epoch = 0;
    double mean_response_nll = 0.0;
};

// Cross-entropy over response tokens only; filler prediction is irreducible
// noise on these tasks and would drown the gradient signal.
inline std::vector<PretrainStats> pretrain_backbone(BackboneWeights& weights,
                                                    const std::vector<TrainingSample>& data,
                                                    std::size_t epochs, double lr, Rng& rng) {
    if (data.empty()) throw ParamError("pretrain_backbone: empty dataset");
    std::map<std::string, Matrix> m1, m2;
    std::size_t step = 0;
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    std::vector<PretrainStats> log;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng = rng.fork(0xba5e0000 + epoch);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

        double nll_sum = 0.0;
        for (std::size_t idx : order) {
            const TrainingSample& s = data[idx];
            std::vector<int> all(s.prompt);
            all.insert(all.end(), s.response.begin(), s.response.end());

            Tape t;
            auto wh = lift_weights(t, weights);
            auto fwd = transformer_forward(t, wh, weights.config, all, std::nullopt);
            auto logits = t.matmul(fwd.hidden, wh.w_out);
            auto loss = t.cross_entropy_rows(logits, s.response, s.prompt.size() - 1);
            nll_sum += t.val(loss).at(0, 0);
            t.backward(loss);

            std::map<std::string, const Matrix*> grads;
            grads["tok_emb"] = &t.grad(wh.tok_emb);
            grads["pos_emb"] = &t.grad(wh.pos_emb);
            grads["w_out"] = &t.grad(wh.w_out);
            for (std::size_t l = 0; l < weights.config.n_layers; ++l) {
                const std::string p = "layer" + std::to_string(l) + ".";
                grads[p + "wq"] = &t.grad(wh.layers[l].wq);
                grads[p + "wk"] = &t.grad(wh.layers[l].wk);
                grads[p + "wv"] = &t.grad(wh.layers[l].wv);
                grads[p + "wo"] = &t.grad(wh.layers[l].wo);
                grads[p + "w_ff1"] = &t.grad(wh.layers[l].w_ff1);
                grads[p + "w_ff2"] = &t.grad(wh.layers[l].w_ff2);
            }

            ++step;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            weights.for_each_tensor([&](const std::string& name, Matrix& param) {
                const Matrix& g = *grads.at(name);
                Matrix& mm1 = m1[name];
                Matrix& mm2 = m2[name];
                if (mm1.size() == 0) {
                    mm1 = Matrix(param.rows, param.cols);
                    mm2 = Matrix(param.rows, param.cols);
                }
                for (std::size_t i = 0; i < param.size(); ++i) {
                    mm1.data[i] = beta1 * mm1.data[i] + (1.0 - beta1) * g.data[i];
                    mm2.data[i] = beta2 * mm2.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
                    param.data[i] -= lr * (mm1.data[i] / bc1) /
                                     (std::sqrt(mm2.data[i] / bc2) + eps);
                }
            });
        }
        log.push_back({epoch + 1, nll_sum / static_cast<double>(data.size())});
    }
    return log;
}

}  // namespace metasoft
