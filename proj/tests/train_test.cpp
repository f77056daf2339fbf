#include "metasoft/train.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "metasoft/corpus.hpp"

using namespace metasoft;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_head = 4;
    cfg.max_positions = 64;
    return cfg;
}

TrainingSample tiny_sample(std::uint64_t seed, std::size_t lp = 6, std::size_t lr = 3) {
    Rng rng(seed);
    TrainingSample s;
    for (std::size_t i = 0; i < lp; ++i) s.prompt.push_back(static_cast<int>(rng.uniform_index(32)));
    for (std::size_t i = 0; i < lr; ++i)
        s.response.push_back(static_cast<int>(rng.uniform_index(32)));
    return s;
}

TrainState tiny_state(std::uint64_t seed, std::size_t m = 4, std::size_t k = 2,
                      std::size_t d_model = 8) {
    Rng rng(seed);
    MetaLibrary lib = init_metalibrary(m, d_model, rng);
    SelectorParams sel = init_selector(d_model, 16, k, m, rng);
    TrainConfig cfg;
    cfg.lr = 1e-3;  // faster movement for the tiny mechanical tests
    return make_train_state(lib, sel, cfg);
}

std::vector<TrainingSample> tiny_corpus(std::size_t n) {
    std::vector<TrainingSample> data;
    for (std::size_t i = 0; i < n; ++i) data.push_back(tiny_sample(100 + i, 8, 2));
    return data;
}

}  // namespace

TEST(ExtractGold, UniformAttentionGivesConstantVector) {
    Rng rng(1);
    BackboneWeights w = init_backbone(tiny_config(), rng);
    for (auto& layer : w.layers) layer.wq = Matrix(8, 8);  // zero scores => uniform rows
    TrainingSample s = tiny_sample(7);
    GoldDistribution g = extract_gold(w, s);
    for (std::size_t j = 1; j < g.a_gold.size(); ++j)
        EXPECT_NEAR(g.a_gold[j], g.a_gold[0], 1e-12);
    EXPECT_GT(g.a_gold[0], 0.0);
}

TEST(ExtractGold, SingleResponseRowSingleHead) {
    BackboneConfig cfg = tiny_config();
    cfg.n_heads = 1;
    cfg.d_head = 8;
    Rng rng(2);
    BackboneWeights w = init_backbone(cfg, rng);
    TrainingSample s = tiny_sample(9, 5, 1);
    GoldLayerSet last;
    last.mode = GoldLayerSet::Mode::kLast;
    GoldDistribution g = extract_gold(w, s, last);

    std::vector<int> all(s.prompt);
    all.push_back(s.response[0]);
    PrefillResult pr = prefill(w, all);
    const Matrix& probs = pr.attn.prefill[cfg.n_layers - 1][0];
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(g.a_gold[j], probs.at(5, j), 1e-12);
}

TEST(ExtractGold, MatchesBruteForceTripleLoop) {
    Rng rng(3);
    BackboneWeights w = init_backbone(tiny_config(), rng);
    TrainingSample s = tiny_sample(11, 7, 4);
    GoldDistribution g = extract_gold(w, s);

    std::vector<int> all(s.prompt);
    all.insert(all.end(), s.response.begin(), s.response.end());
    PrefillResult pr = prefill(w, all);
    const std::size_t lp = 7, lr = 4, H = w.config.n_heads, nl = w.config.n_layers;
    for (std::size_t j = 0; j < lp; ++j) {
        double acc = 0.0;
        for (std::size_t l = 0; l < nl; ++l)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t i = 0; i < lr; ++i) acc += pr.attn.prefill[l][h].at(lp + i, j);
        acc /= static_cast<double>(H * lr * nl);
        EXPECT_NEAR(g.a_gold[j], acc, 1e-12);
    }
}

TEST(ExtractGold, RenormalizedModeSumsToOne) {
    Rng rng(4);
    BackboneWeights w = init_backbone(tiny_config(), rng);
    TrainingSample s = tiny_sample(13);
    GoldDistribution g = extract_gold(w, s, {}, /*renormalize=*/true);
    double sum = 0.0;
    for (double v : g.a_gold) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(LossTotal, ZeroWhenGoldEqualsSoftScoresAndNoPenalty) {
    Rng rng(5);
    BackboneWeights w = init_backbone(tiny_config(), rng);
    TrainState st = tiny_state(6);
    st.config.lambda_div = 0.0;
    st.tau_g = 0.7;
    TrainingSample s = tiny_sample(15);

    Matrix noise(2, 4);
    Rng nrng(77);
    auto draws = gumbel_noise(nrng, noise.size());
    noise.data = draws;

    // Eager replica of the forward path defines the gold target.
    Matrix prompt_emb(s.prompt.size(), 8);
    for (std::size_t i = 0; i < s.prompt.size(); ++i)
        std::copy_n(w.tok_emb.row_ptr(s.prompt[i]), 8, prompt_emb.row_ptr(i));
    Matrix logits = selector_logits(st.selector, prompt_features(prompt_emb));
    Matrix noisy = add(logits, noise);
    Matrix weights = softmax_rows(noisy, st.tau_g);
    SoftTokenSet soft = synthesize(st.library, weights);
    PrefillResult pr = prefill(w, s.prompt, soft.embeddings);
    ImportanceScores scores = probe_scores(pr.attn, s.prompt.size(), 2);
    GoldDistribution gold;
    gold.a_gold = reduce_scores(scores, st.config.gold_layers.resolve(w.config.n_layers));

    LossResult r = loss_with_noise(st, w, s, gold, noise, st.tau_g);
    EXPECT_LT(r.mse, 1e-24);
    EXPECT_LT(r.total, 1e-24);
}

TEST(LossTotal, LambdaScalesPenaltyLinearly) {
    Rng rng(7);
    BackboneWeights w = init_backbone(tiny_config(), rng);
    TrainState st = tiny_state(8);
    TrainingSample s = tiny_sample(17);
    GoldDistribution gold = extract_gold(w, s);
    Matrix noise(2, 4);
    Rng nrng(3);
    noise.data = gumbel_noise(nrng, noise.size());

    st.config.lambda_div = 0.01;
    LossResult a = loss_with_noise(st, w, s, gold, noise, st.tau_g);
    st.config.lambda_div = 0.02;
    LossResult b = loss_with_noise(st, w, s, gold, noise, st.tau_g);
    EXPECT_NEAR(b.total - a.total, 0.01 * a.penalty, 1e-12);
    EXPECT_GE(a.total, 0.0);
    EXPECT_GE(a.penalty, 0.0);
}

TEST(LossTotal, GradientsMatchCentralFiniteDifferences) {
    // d_model=8, M=4, k=2, L=6 with frozen Gumbel noise.
    Rng rng(9);
    BackboneWeights w = init_backbone(tiny_config(), rng);
    TrainState st = tiny_state(10);
    TrainingSample s = tiny_sample(19, 6, 3);
    GoldDistribution gold = extract_gold(w, s);
    Matrix noise(2, 4);
    Rng nrng(5);
    noise.data = gumbel_noise(nrng, noise.size());
    const double tau = 0.8;

    LossResult r = loss_with_noise(st, w, s, gold, noise, tau);

    struct ParamRef {
        Matrix* value;
        const Matrix* grad;
    };
    std::vector<ParamRef> params = {{&st.library.basis, &r.d_basis},
                                    {&st.selector.w1, &r.d_w1},
                                    {&st.selector.b1, &r.d_b1},
                                    {&st.selector.w2, &r.d_w2},
                                    {&st.selector.b2, &r.d_b2}};
    const double step = 1e-5;
    double worst = 0.0;
    for (auto& p : params) {
        for (std::size_t i = 0; i < p.value->size(); ++i) {
            const double saved = p.value->data[i];
            p.value->data[i] = saved + step;
            const double fp = loss_with_noise(st, w, s, gold, noise, tau, false).total;
            p.value->data[i] = saved - step;
            const double fm = loss_with_noise(st, w, s, gold, noise, tau, false).total;
            p.value->data[i] = saved;
            const double fd = (fp - fm) / (2.0 * step);
            const double a = p.grad->data[i];
            const double rel = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1e-8});
            worst = std::max(worst, rel);
        }
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Stage1, ZeroEpochsLeaveParametersUnchanged) {
    Rng rng(11);
    BackboneWeights w = init_backbone(tiny_config(), rng);
    TrainState st = tiny_state(12);
    TrainState before = st;
    Rng trng(1);
    auto log = train_stage1(st, w, tiny_corpus(4), 0, trng);
    EXPECT_TRUE(log.empty());
    EXPECT_EQ(st.library.basis.data, before.library.basis.data);
    EXPECT_EQ(st.selector.w1.data, before.selector.w1.data);
}

TEST(Stage1, DeterministicUnderSeed) {
    Rng rng(13);
    BackboneWeights w = init_backbone(tiny_config(), rng);
    auto corpus = tiny_corpus(6);

    TrainState a = tiny_state(14), b = tiny_state(14);
    Rng ra(42), rb(42);
    train_stage1(a, w, corpus, 2, ra);
    train_stage1(b, w, corpus, 2, rb);
    EXPECT_EQ(a.library.basis.data, b.library.basis.data);
    EXPECT_EQ(a.selector.w2.data, b.selector.w2.data);
}

TEST(Stage2, RequiresStageOne) {
    Rng rng(15);
    BackboneWeights w = init_backbone(tiny_config(), rng);
    TrainState st = tiny_state(16);
    Rng trng(2);
    EXPECT_THROW(train_stage2(st, w, tiny_corpus(3), 1, trng), StateError);
}

TEST(Stage2, LibraryFrozenBitExactPenaltyConstantSelectorMoves) {
    Rng rng(17);
    BackboneWeights w = init_backbone(tiny_config(), rng);
    TrainState st = tiny_state(18);
    Rng trng(3);
    auto corpus = tiny_corpus(6);
    train_stage1(st, w, corpus, 1, trng);

    const std::vector<double> basis_before = st.library.basis.data;
    const std::vector<double> sel_before = st.selector.w2.data;
    auto log = train_stage2(st, w, corpus, 2, trng);

    EXPECT_EQ(st.library.basis.data, basis_before);
    ASSERT_EQ(log.size(), 2u);
    EXPECT_DOUBLE_EQ(log[0].penalty, log[1].penalty);
    EXPECT_NE(st.selector.w2.data, sel_before);
}

TEST(Training, BackboneUntouchedByBothStages) {
    Rng rng(19);
    BackboneWeights w = init_backbone(tiny_config(), rng);
    std::vector<double> snapshot = w.tok_emb.data;
    TrainState st = tiny_state(20);
    Rng trng(4);
    auto corpus = tiny_corpus(4);
    train_stage1(st, w, corpus, 1, trng);
    train_stage2(st, w, corpus, 1, trng);
    EXPECT_EQ(w.tok_emb.data, snapshot);
}
