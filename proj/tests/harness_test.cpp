#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "metasoft/metasoft.hpp"

using namespace metasoft;
namespace fs = std::filesystem;

namespace {

ConfigMap tiny_config() {
    ConfigMap cfg;
    cfg.set("backbone.d_model", "16");
    cfg.set("backbone.n_layers", "2");
    cfg.set("backbone.n_heads", "2");
    cfg.set("backbone.max_positions", "128");
    cfg.set("metalib.library_size", "8");
    cfg.set("metalib.k", "2");
    cfg.set("metalib.d_hidden", "16");
    cfg.set("bench.samples", "5");
    cfg.set("bench.prompt_len", "40");
    cfg.set("bench.budgets", "10");
    cfg.set("bench.snapkv_window", "8");
    cfg.set("bench.surrogate_tokens", "8");
    return cfg;
}

std::string tmp_dir(const std::string& name) {
    const std::string dir = "harness_test_tmp/" + name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST(Corpus, DeterministicUnderSeed) {
    auto a = gen_corpus(TaskKind::kNeedle, 20, 64, 7);
    auto b = gen_corpus(TaskKind::kNeedle, 20, 64, 7);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].prompt, b[i].prompt);
        EXPECT_EQ(a[i].response, b[i].response);
    }
}

TEST(Corpus, NeedleAnswerEqualsEmbeddedValue) {
    auto corpus = gen_corpus(TaskKind::kNeedle, 50, 64, 11, 3);
    for (const auto& s : corpus) {
        ASSERT_EQ(s.response.size(), 4u);
        EXPECT_EQ(s.response[0], TokenAlphabet::kAnswerMarker);
        // Locate the marker and check the stored values follow (KM, key).
        auto it = std::find(s.prompt.begin(), s.prompt.end(), TokenAlphabet::kKeyMarker);
        ASSERT_NE(it, s.prompt.end());
        const std::size_t pos = static_cast<std::size_t>(it - s.prompt.begin());
        EXPECT_EQ(s.prompt[pos + 1], s.prompt.back());  // query repeats the key
        for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(s.prompt[pos + 2 + i], s.response[1 + i]);
        EXPECT_EQ(s.prompt[s.prompt.size() - 2], TokenAlphabet::kQueryMarker);
    }
}

TEST(Corpus, NeedlePositionsSpreadAcrossSamples) {
    auto corpus = gen_corpus(TaskKind::kNeedle, 100, 96, 13);
    std::set<std::size_t> positions;
    for (const auto& s : corpus) {
        auto it = std::find(s.prompt.begin(), s.prompt.end(), TokenAlphabet::kKeyMarker);
        positions.insert(static_cast<std::size_t>(it - s.prompt.begin()));
    }
    EXPECT_GT(positions.size(), 20u);
}

TEST(Corpus, KvRecallAnswersMatchQueriedPair) {
    auto corpus = gen_corpus(TaskKind::kKvRecall, 30, 96, 17, 2);
    for (const auto& s : corpus) {
        const int queried_key = s.prompt.back();
        bool found = false;
        for (std::size_t i = 0; i + 3 < s.prompt.size(); ++i) {
            if (s.prompt[i] == TokenAlphabet::kKeyMarker && s.prompt[i + 1] == queried_key) {
                EXPECT_EQ(s.prompt[i + 2], s.response[1]);
                EXPECT_EQ(s.prompt[i + 3], s.response[2]);
                found = true;
            }
        }
        EXPECT_TRUE(found);
    }
}

TEST(Corpus, SaveLoadRoundTrip) {
    const std::string dir = tmp_dir("corpus");
    auto corpus = gen_corpus(TaskKind::kCopy, 12, 48, 3);
    save_corpus(dir + "/c.txt", corpus);
    auto loaded = load_corpus(dir + "/c.txt");
    ASSERT_EQ(loaded.size(), corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        EXPECT_EQ(loaded[i].prompt, corpus[i].prompt);
        EXPECT_EQ(loaded[i].response, corpus[i].response);
    }
}

TEST(Config, DefaultsAndOverrides) {
    ConfigMap cfg;
    EXPECT_EQ(cfg.get_u64("backbone.d_model"), 64u);
    EXPECT_EQ(cfg.get_double("train.lr"), 1e-4);
    cfg.set("train.lr", "5e-4");
    EXPECT_EQ(cfg.get_double("train.lr"), 5e-4);
}

TEST(Config, UnknownKeyRejected) {
    ConfigMap cfg;
    EXPECT_THROW(cfg.set("train.learning_rate", "1"), ConfigError);
    EXPECT_THROW(cfg.get("no.such.key"), ConfigError);
}

TEST(Config, FileParsingWithCommentsAndErrors) {
    const std::string dir = tmp_dir("config");
    {
        std::ofstream f(dir + "/good.cfg");
        f << "# comment\n\n bench.samples = 9 # trailing\n train.gold_layers = last \n";
    }
    ConfigMap cfg = ConfigMap::from_file(dir + "/good.cfg");
    EXPECT_EQ(cfg.get_u64("bench.samples"), 9u);
    EXPECT_EQ(cfg.train().gold_layers.mode, GoldLayerSet::Mode::kLast);

    {
        std::ofstream f(dir + "/bad_key.cfg");
        f << "bench.sample = 9\n";
    }
    EXPECT_THROW(ConfigMap::from_file(dir + "/bad_key.cfg"), ConfigError);
    {
        std::ofstream f(dir + "/bad_line.cfg");
        f << "bench.samples 9\n";
    }
    EXPECT_THROW(ConfigMap::from_file(dir + "/bad_line.cfg"), ConfigError);
    EXPECT_THROW(ConfigMap::from_file(dir + "/missing.cfg"), ConfigError);
}

TEST(Config, HashTracksValues) {
    ConfigMap a, b;
    EXPECT_EQ(a.hash(), b.hash());
    b.set("seed", "2");
    EXPECT_NE(a.hash(), b.hash());
}

TEST(Checkpoint, BackboneRoundTripBitExact) {
    const std::string dir = tmp_dir("ckpt");
    ConfigMap cfg = tiny_config();
    Rng rng(3);
    BackboneWeights w = init_backbone(cfg.backbone(), rng);
    save_backbone(dir + "/b.ckpt", w);
    BackboneWeights loaded = load_backbone(dir + "/b.ckpt");
    bool equal = true;
    w.for_each_tensor([&](const std::string& name, const Matrix& m) {
        loaded.for_each_tensor([&](const std::string& n2, const Matrix& m2) {
            if (n2 == name && m2.data != m.data) equal = false;
        });
    });
    EXPECT_TRUE(equal);
    EXPECT_EQ(loaded.config.d_model, w.config.d_model);
}

TEST(Checkpoint, MetalibRoundTripBitExact) {
    const std::string dir = tmp_dir("ckpt2");
    ConfigMap cfg = tiny_config();
    TrainState st = pipeline_init_state(cfg, 5);
    st.tau_g = 0.1234567;
    st.stage1_done = true;
    save_metalib(dir + "/m.ckpt", st);
    TrainState loaded = load_metalib(dir + "/m.ckpt", cfg.train());
    EXPECT_EQ(loaded.library.basis.data, st.library.basis.data);
    EXPECT_EQ(loaded.selector.w2.data, st.selector.w2.data);
    EXPECT_DOUBLE_EQ(loaded.tau_g, st.tau_g);
    EXPECT_TRUE(loaded.stage1_done);
}

TEST(Checkpoint, BadMagicRejected) {
    const std::string dir = tmp_dir("ckpt3");
    {
        std::ofstream f(dir + "/junk.ckpt", std::ios::binary);
        f << "not a checkpoint\n";
    }
    EXPECT_THROW(load_checkpoint(dir + "/junk.ckpt"), ConfigError);
}

TEST(Bench, FullCacheRowHasZeroNllDelta) {
    ConfigMap cfg = tiny_config();
    BackboneWeights w = pipeline_init_backbone(cfg, 7);
    auto rows = pipeline_bench(w, nullptr, cfg, 7, {"full", "h2o", "streaming", "random"});
    bool saw_full = false;
    for (const auto& r : rows) {
        // The budget column reports actual cache rows: L for the
        // uncompressed policy, min(B, L) otherwise.
        if (r.policy == "full") {
            saw_full = true;
            EXPECT_EQ(r.budget, 40u);
            EXPECT_EQ(r.nll_delta, 0.0);
        } else {
            EXPECT_EQ(r.budget, 10u);
        }
    }
    ASSERT_TRUE(saw_full);
}

TEST(Bench, DeterministicAndJobInvariant) {
    ConfigMap cfg = tiny_config();
    BackboneWeights w = pipeline_init_backbone(cfg, 9);
    auto rows1 = pipeline_bench(w, nullptr, cfg, 9, {"h2o", "random", "streaming"});
    auto rows2 = pipeline_bench(w, nullptr, cfg, 9, {"h2o", "random", "streaming"});
    cfg.set("bench.jobs", "2");
    auto rows3 = pipeline_bench(w, nullptr, cfg, 9, {"h2o", "random", "streaming"});
    EXPECT_EQ(csv_of_rows(rows1), csv_of_rows(rows2));
    EXPECT_EQ(csv_of_rows(rows1), csv_of_rows(rows3));
}

TEST(Bench, MetaSoftWithoutCheckpointThrows) {
    ConfigMap cfg = tiny_config();
    BackboneWeights w = pipeline_init_backbone(cfg, 11);
    EXPECT_THROW(pipeline_bench(w, nullptr, cfg, 11, {"meta-soft"}), StateError);
}

TEST(Bench, FullBudgetMetaSoftMatchesFullCache) {
    ConfigMap cfg = tiny_config();
    cfg.set("bench.budgets", "40");  // equals prompt_len: no eviction
    cfg.set("bench.samples", "3");
    BackboneWeights w = pipeline_init_backbone(cfg, 13);
    TrainState st = pipeline_init_state(cfg, 13);
    auto rows = pipeline_bench(w, &st, cfg, 13, {"full", "meta-soft"});
    double full_acc = -1, meta_acc = -2, meta_delta = -1;
    for (const auto& r : rows) {
        if (r.policy == "full") full_acc = r.accuracy;
        if (r.policy == "meta-soft") {
            meta_acc = r.accuracy;
            meta_delta = r.nll_delta;
        }
    }
    EXPECT_EQ(full_acc, meta_acc);
    EXPECT_EQ(meta_delta, 0.0);
}

TEST(Bench, CsvHasFixedColumnOrder) {
    std::vector<BenchRow> rows(1);
    rows[0].policy = "h2o";
    rows[0].task = "needle";
    rows[0].prompt_len = 64;
    rows[0].budget = 16;
    rows[0].accuracy = 0.5;
    std::string csv = csv_of_rows(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')),
              "policy,task,L,B,accuracy,nll_delta,attn_mse,prefill_ms,decode_ms_per_tok");
    EXPECT_NE(csv.find("h2o,needle,64,16,0.500000"), std::string::npos);
}

TEST(Inspect, DumpContainsScoresAndFlowPlan) {
    ConfigMap cfg = tiny_config();
    BackboneWeights w = pipeline_init_backbone(cfg, 15);
    auto corpus = bench_corpus(cfg, 15, TaskKind::kNeedle, 0);
    BenchSettings settings = pipeline_bench_settings(cfg, 15);
    std::ostringstream out;
    inspect_sample(w, nullptr, corpus[0], "needle", 10, settings, out);
    const std::string dump = out.str();
    EXPECT_NE(dump.find("a_soft layer 0"), std::string::npos);
    EXPECT_NE(dump.find("flow-plan layer 0 head 0"), std::string::npos);
    EXPECT_NE(dump.find("scores surrogate"), std::string::npos);
    EXPECT_NE(dump.find("\nw 0 "), std::string::npos);
}

TEST(Pipeline, SeedStreamsAreIndependent) {
    EXPECT_NE(derive_seed(1, SeedPurpose::kPretrainCorpus), derive_seed(1, SeedPurpose::kStage1Corpus));
    EXPECT_EQ(derive_seed(1, SeedPurpose::kBenchRun), derive_seed(1, SeedPurpose::kBenchRun));
    EXPECT_NE(derive_seed(1, SeedPurpose::kBenchRun), derive_seed(2, SeedPurpose::kBenchRun));
}
