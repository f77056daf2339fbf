#pragma once

// Config-driven wiring of the full pipeline (corpora, backbone pretraining,
// two-stage training, benchmarking). The CLI and the acceptance suite both
// drive these entry points, so runs are reproducible from (config, seed)
// regardless of who invokes them.

#include <cstdio>
#include <string>
#include <vector>

#include "metasoft/bench.hpp"
#include "metasoft/checkpoint.hpp"
#include "metasoft/config.hpp"
#include "metasoft/corpus.hpp"
#include "metasoft/pretrain.hpp"

namespace metasoft {

inline std::vector<TrainingSample> pretrain_corpus(const ConfigMap& cfg, std::uint64_t seed) {
    return gen_mixed_corpus({TaskKind::kNeedle, TaskKind::kCopy, TaskKind::kKvRecall},
                            cfg.get_u64("pretrain.samples"), cfg.get_size_list("pretrain.lengths"),
                            derive_seed(seed, SeedPurpose::kPretrainCorpus),
                            cfg.get_u64("pretrain.payload_tokens"));
}

// Stage I sees the main tasks; stage II is task-shifted (copy only).
inline std::vector<TrainingSample> stage1_corpus(const ConfigMap& cfg, std::uint64_t seed) {
    return gen_mixed_corpus({TaskKind::kNeedle, TaskKind::kKvRecall},
                            cfg.get_u64("train.stage1_samples"), cfg.get_size_list("train.lengths"),
                            derive_seed(seed, SeedPurpose::kStage1Corpus),
                            cfg.get_u64("train.payload_tokens"));
}

inline std::vector<TrainingSample> stage2_corpus(const ConfigMap& cfg, std::uint64_t seed) {
    return gen_mixed_corpus({TaskKind::kCopy}, cfg.get_u64("train.stage2_samples"),
                            cfg.get_size_list("train.lengths"),
                            derive_seed(seed, SeedPurpose::kStage2Corpus),
                            cfg.get_u64("train.payload_tokens"));
}

inline std::vector<TrainingSample> bench_corpus(const ConfigMap& cfg, std::uint64_t seed,
                                                TaskKind kind, std::size_t task_index) {
    return gen_corpus(kind, cfg.get_u64("bench.samples"), cfg.get_u64("bench.prompt_len"),
                      derive_seed(seed, SeedPurpose::kBenchCorpus) + task_index,
                      cfg.get_u64("bench.payload_tokens"));
}

inline BackboneWeights pipeline_init_backbone(const ConfigMap& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, SeedPurpose::kBackboneInit));
    return init_backbone(cfg.backbone(), rng);
}

inline std::vector<PretrainStats> pipeline_pretrain(BackboneWeights& weights,
                                                    const ConfigMap& cfg, std::uint64_t seed) {
    auto corpus = pretrain_corpus(cfg, seed);
    Rng rng(derive_seed(seed, SeedPurpose::kPretrainRun));
    return pretrain_backbone(weights, corpus, cfg.get_u64("pretrain.epochs"),
                             cfg.get_double("pretrain.lr"), rng);
}

struct TrainRunResult {
    TrainState state;
    std::vector<EpochStats> stage1;
    std::vector<EpochStats> stage2;
};

inline TrainState pipeline_init_state(const ConfigMap& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, SeedPurpose::kMetalibInit));
    const std::size_t d_model = cfg.get_u64("backbone.d_model");
    MetaLibrary lib = init_metalibrary(cfg.get_u64("metalib.library_size"), d_model, rng);
    SelectorParams sel = init_selector(d_model, cfg.get_u64("metalib.d_hidden"),
                                       cfg.get_u64("metalib.k"),
                                       cfg.get_u64("metalib.library_size"), rng);
    return make_train_state(lib, sel, cfg.train());
}

inline TrainRunResult pipeline_train(const BackboneWeights& backbone, const ConfigMap& cfg,
                                     std::uint64_t seed) {
    TrainRunResult run;
    run.state = pipeline_init_state(cfg, seed);
    Rng rng(derive_seed(seed, SeedPurpose::kTrainRun));
    auto s1 = stage1_corpus(cfg, seed);
    run.stage1 = train_stage1(run.state, backbone, s1, cfg.get_u64("train.stage1_epochs"), rng);
    auto s2 = stage2_corpus(cfg, seed);
    run.stage2 = train_stage2(run.state, backbone, s2, cfg.get_u64("train.stage2_epochs"), rng);
    return run;
}

inline std::string epoch_line(std::size_t stage, const EpochStats& s) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "stage=%zu epoch=%zu mean_loss=%.9e mean_mse=%.9e penalty=%.9e tau_g=%.6f",
                  stage, s.epoch, s.mean_loss, s.mean_mse, s.penalty, s.tau_g);
    return buf;
}

inline BenchSettings pipeline_bench_settings(const ConfigMap& cfg, std::uint64_t seed) {
    BenchSettings s;
    s.flow = cfg.flow();
    s.gold_layers = cfg.train().gold_layers;
    s.snapkv_window = cfg.get_u64("bench.snapkv_window");
    s.streaming_sink = cfg.get_u64("bench.streaming_sink");
    s.surrogate_tokens = cfg.get_u64("bench.surrogate_tokens");
    s.force_recent = cfg.get_u64("bench.force_recent");
    s.jobs = std::max<std::uint64_t>(1, cfg.get_u64("bench.jobs"));
    s.timings = cfg.get_bool("bench.timings");
    s.run_seed = derive_seed(seed, SeedPurpose::kBenchRun);
    return s;
}

inline std::vector<BenchRow> pipeline_bench(const BackboneWeights& backbone,
                                            const TrainState* trained, const ConfigMap& cfg,
                                            std::uint64_t seed,
                                            const std::vector<std::string>& policies) {
    BenchSettings settings = pipeline_bench_settings(cfg, seed);
    std::vector<std::size_t> budgets = cfg.get_size_list("bench.budgets");
    std::vector<BenchRow> all;
    std::size_t task_index = 0;
    for (const auto& task : cfg.get_list("bench.tasks")) {
        auto corpus = bench_corpus(cfg, seed, task_from_name(task), task_index++);
        auto rows = run_bench(backbone, trained, corpus, task, policies, budgets, settings);
        all.insert(all.end(), rows.begin(), rows.end());
    }
    return all;
}

}  // namespace metasoft
