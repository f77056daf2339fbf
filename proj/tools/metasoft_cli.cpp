// Command-line front end: corpus generation, backbone pretraining, two-stage
// training, benchmarking, the ablation grid and single-sample inspection.
// Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "metasoft/metasoft.hpp"

namespace fs = std::filesystem;
using namespace metasoft;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed_override;
    std::string backbone_path;
    std::string metalib_path;
};

ConfigMap load_config(const CommonArgs& args) {
    ConfigMap cfg = args.config_path.empty() ? ConfigMap() : ConfigMap::from_file(args.config_path);
    return cfg;
}

std::uint64_t run_seed(const CommonArgs& args, const ConfigMap& cfg) {
    return args.seed_override ? *args.seed_override : cfg.get_u64("seed");
}

std::string backbone_file(const CommonArgs& args) {
    return args.backbone_path.empty() ? args.out_dir + "/backbone.ckpt" : args.backbone_path;
}

std::string metalib_file(const CommonArgs& args) {
    return args.metalib_path.empty() ? args.out_dir + "/metalib.ckpt" : args.metalib_path;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool with_models) {
    cmd->add_option("--config", args.config_path, "configuration file (key = value)");
    cmd->add_option("--seed", args.seed_override, "seed override");
    cmd->add_option("--out", args.out_dir, "output directory");
    if (with_models) {
        cmd->add_option("--backbone", args.backbone_path, "backbone checkpoint path");
        cmd->add_option("--metalib", args.metalib_path, "metalib checkpoint path");
    }
}

int cmd_gen(const CommonArgs& args, const std::string& kind, std::size_t count, std::size_t len,
            std::size_t payload) {
    ConfigMap cfg = load_config(args);
    const std::uint64_t seed = run_seed(args, cfg);
    auto corpus = gen_corpus(task_from_name(kind), count, len, seed, payload);
    fs::create_directories(args.out_dir);
    const std::string path = args.out_dir + "/corpus_" + kind + ".txt";
    save_corpus(path, corpus);
    std::cout << "wrote " << corpus.size() << " samples to " << path << "\n";
    return 0;
}

int cmd_pretrain(const CommonArgs& args) {
    ConfigMap cfg = load_config(args);
    const std::uint64_t seed = run_seed(args, cfg);
    fs::create_directories(args.out_dir);
    BackboneWeights weights = pipeline_init_backbone(cfg, seed);
    auto log = pipeline_pretrain(weights, cfg, seed);
    std::ofstream lf(args.out_dir + "/pretrain_log.txt", std::ios::binary);
    for (const auto& e : log) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "epoch=%zu mean_response_nll=%.9e", e.epoch,
                      e.mean_response_nll);
        lf << buf << "\n";
        std::cout << buf << "\n";
    }
    save_backbone(backbone_file(args), weights);
    std::cout << "saved backbone to " << backbone_file(args) << "\n";
    return 0;
}

int cmd_train(const CommonArgs& args) {
    ConfigMap cfg = load_config(args);
    const std::uint64_t seed = run_seed(args, cfg);
    fs::create_directories(args.out_dir);
    BackboneWeights backbone = load_backbone(backbone_file(args));
    TrainRunResult run;
    run.state = pipeline_init_state(cfg, seed);
    Rng rng(derive_seed(seed, SeedPurpose::kTrainRun));

    std::ofstream lf(args.out_dir + "/train_log.txt", std::ios::binary);
    auto s1 = stage1_corpus(cfg, seed);
    run.stage1 = train_stage1(run.state, backbone, s1, cfg.get_u64("train.stage1_epochs"), rng);
    for (const auto& e : run.stage1) {
        lf << epoch_line(1, e) << "\n";
        std::cout << epoch_line(1, e) << "\n";
    }
    save_metalib(args.out_dir + "/metalib_stage1.ckpt", run.state);

    auto s2 = stage2_corpus(cfg, seed);
    run.stage2 = train_stage2(run.state, backbone, s2, cfg.get_u64("train.stage2_epochs"), rng);
    for (const auto& e : run.stage2) {
        lf << epoch_line(2, e) << "\n";
        std::cout << epoch_line(2, e) << "\n";
    }
    save_metalib(metalib_file(args), run.state);
    std::cout << "saved metalib to " << metalib_file(args) << "\n";
    return 0;
}

int cmd_bench(const CommonArgs& args, bool ablation) {
    ConfigMap cfg = load_config(args);
    const std::uint64_t seed = run_seed(args, cfg);
    fs::create_directories(args.out_dir);
    BackboneWeights backbone = load_backbone(backbone_file(args));

    std::vector<std::string> policies =
        ablation ? ablation_arms() : cfg.get_list("bench.policies");
    bool need_probe = false;
    for (const auto& p : policies) need_probe |= policy_needs_probe(p, true);

    std::optional<TrainState> trained;
    if (need_probe && fs::exists(metalib_file(args)))
        trained = load_metalib(metalib_file(args), cfg.train());
    for (const auto& p : policies)
        if (policy_needs_probe(p, trained.has_value()) && !trained)
            throw ConfigError("policy " + p + " requires a metalib checkpoint at " +
                              metalib_file(args));

    auto rows = pipeline_bench(backbone, trained ? &*trained : nullptr, cfg, seed, policies);
    write_reports(args.out_dir, rows, seed, cfg.hash());
    std::cout << csv_of_rows(rows);
    std::cout << "wrote " << args.out_dir << "/report.csv and report.json\n";
    return 0;
}

int cmd_inspect(const CommonArgs& args, const std::string& task, std::size_t sample_index,
                std::size_t budget, const std::string& dump_flow) {
    ConfigMap cfg = load_config(args);
    const std::uint64_t seed = run_seed(args, cfg);
    BackboneWeights backbone = load_backbone(backbone_file(args));
    std::optional<TrainState> trained;
    if (fs::exists(metalib_file(args))) trained = load_metalib(metalib_file(args), cfg.train());

    auto corpus = bench_corpus(cfg, seed, task_from_name(task), 0);
    if (sample_index >= corpus.size())
        throw ConfigError("--sample out of range (corpus has " +
                          std::to_string(corpus.size()) + " samples)");
    BenchSettings settings = pipeline_bench_settings(cfg, seed);

    if (!dump_flow.empty()) {
        std::ofstream out(dump_flow, std::ios::binary);
        if (!out) throw ConfigError("cannot write " + dump_flow);
        inspect_sample(backbone, trained ? &*trained : nullptr, corpus[sample_index], task,
                       budget, settings, out);
        std::cout << "wrote flow dump to " << dump_flow << "\n";
    } else {
        inspect_sample(backbone, trained ? &*trained : nullptr, corpus[sample_index], task,
                       budget, settings, std::cout);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Meta-Soft KV-cache compression workbench"};
    app.require_subcommand(1);
    CommonArgs args;

    std::string gen_kind = "needle";
    std::size_t gen_count = 100, gen_len = 128, gen_payload = 1;
    auto* gen = app.add_subcommand("gen", "generate a synthetic corpus");
    add_common(gen, args, false);
    gen->add_option("--kind", gen_kind, "needle | copy | kv-recall");
    gen->add_option("--count", gen_count, "number of samples");
    gen->add_option("--len", gen_len, "prompt length");
    gen->add_option("--payload", gen_payload, "answer payload tokens");

    auto* pretrain = app.add_subcommand("pretrain-backbone", "pretrain and freeze the backbone");
    add_common(pretrain, args, true);

    auto* train = app.add_subcommand("train", "run stage I + stage II training");
    add_common(train, args, true);

    auto* bench = app.add_subcommand("bench", "run the policy benchmark grid");
    add_common(bench, args, true);

    auto* ablate = app.add_subcommand("ablate", "run the four-arm ablation grid");
    add_common(ablate, args, true);

    std::string inspect_task = "needle", dump_flow;
    std::size_t inspect_sample_idx = 0, inspect_budget = 64;
    auto* inspect = app.add_subcommand("inspect", "dump scores and flow plan for one sample");
    add_common(inspect, args, true);
    inspect->add_option("--task", inspect_task, "task kind");
    inspect->add_option("--sample", inspect_sample_idx, "sample index");
    inspect->add_option("--budget", inspect_budget, "compression budget");
    inspect->add_option("--dump-flow", dump_flow, "write the dump to this path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen(args, gen_kind, gen_count, gen_len, gen_payload);
        if (pretrain->parsed()) return cmd_pretrain(args);
        if (train->parsed()) return cmd_train(args);
        if (bench->parsed()) return cmd_bench(args, false);
        if (ablate->parsed()) return cmd_bench(args, true);
        if (inspect->parsed())
            return cmd_inspect(args, inspect_task, inspect_sample_idx, inspect_budget, dump_flow);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
