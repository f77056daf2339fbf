#pragma once

// Flat key = value configuration with dotted sections. Every key has a
// documented default; unknown keys are rejected so typos cannot silently
// fall back to defaults.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "metasoft/backbone.hpp"
#include "metasoft/consolidate.hpp"
#include "metasoft/numerics.hpp"
#include "metasoft/train.hpp"

namespace metasoft {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

class ConfigMap {
   public:
    // The full key table; also the documentation of defaults.
    static const std::vector<std::pair<std::string, std::string>>& defaults() {
        static const std::vector<std::pair<std::string, std::string>> table = {
            {"seed", "1"},
            {"backbone.vocab_size", "256"},
            {"backbone.d_model", "64"},
            {"backbone.n_layers", "4"},
            {"backbone.n_heads", "4"},
            {"backbone.max_positions", "1024"},
            {"metalib.library_size", "64"},
            {"metalib.k", "8"},
            {"metalib.d_hidden", "128"},
            {"metalib.tau_start", "1.0"},
            {"metalib.tau_end", "0.1"},
            {"flow.m", "4"},
            {"flow.tau_r", "1.0"},
            {"flow.gamma", "1.0"},
            {"flow.epsilon", "1e-6"},
            {"train.lr", "1e-4"},
            {"train.lambda_div", "0.01"},
            {"train.weight_decay", "0.01"},
            {"train.batch", "1"},
            {"train.stage1_epochs", "5"},
            {"train.stage2_epochs", "3"},
            {"train.stage1_samples", "2000"},
            {"train.stage2_samples", "500"},
            {"train.lengths", "96,128,512"},
            {"train.payload_tokens", "1"},
            {"train.gold_layers", "all"},
            {"train.renormalize_gold", "false"},
            {"pretrain.samples", "2000"},
            {"pretrain.epochs", "3"},
            {"pretrain.lr", "1e-3"},
            {"pretrain.lengths", "64,96,128"},
            {"pretrain.payload_tokens", "1"},
            {"bench.tasks", "needle"},
            {"bench.policies", "full,meta-soft,h2o,snapkv,streaming,random,mean-merge"},
            {"bench.budgets", "64"},
            {"bench.samples", "500"},
            {"bench.prompt_len", "512"},
            {"bench.payload_tokens", "1"},
            {"bench.snapkv_window", "32"},
            {"bench.streaming_sink", "4"},
            {"bench.surrogate_tokens", "32"},
            {"bench.force_recent", "0"},
            {"bench.jobs", "1"},
            {"bench.timings", "false"},
        };
        return table;
    }

    ConfigMap() {
        for (const auto& [k, v] : defaults()) values_[k] = v;
    }

    static ConfigMap from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        ConfigMap cfg;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
            cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) throw ConfigError("unknown config key: " + key);
        values_[key] = value;
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key: " + key);
        return it->second;
    }

    std::uint64_t get_u64(const std::string& key) const {
        try {
            return std::stoull(get(key));
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": expected integer, got '" + get(key) + "'");
        }
    }

    double get_double(const std::string& key) const {
        try {
            return std::stod(get(key));
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": expected number, got '" + get(key) + "'");
        }
    }

    bool get_bool(const std::string& key) const {
        const std::string& v = get(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError("config key " + key + ": expected true/false, got '" + v + "'");
    }

    std::vector<std::string> get_list(const std::string& key) const {
        std::vector<std::string> out;
        std::stringstream ss(get(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    std::vector<std::size_t> get_size_list(const std::string& key) const {
        std::vector<std::size_t> out;
        for (const auto& s : get_list(key)) {
            try {
                out.push_back(std::stoull(s));
            } catch (const std::exception&) {
                throw ConfigError("config key " + key + ": expected integer list");
            }
        }
        return out;
    }

    // FNV-1a over the sorted key=value pairs; identifies a configuration in
    // report metadata.
    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        auto mix = [&](const std::string& s) {
            for (unsigned char c : s) {
                h ^= c;
                h *= 1099511628211ULL;
            }
        };
        for (const auto& [k, v] : values_) {
            mix(k);
            mix("=");
            mix(v);
            mix("\n");
        }
        return h;
    }

    const std::map<std::string, std::string>& raw() const { return values_; }

    // --- typed views -------------------------------------------------------

    BackboneConfig backbone() const {
        BackboneConfig b;
        b.vocab_size = get_u64("backbone.vocab_size");
        b.d_model = get_u64("backbone.d_model");
        b.n_layers = get_u64("backbone.n_layers");
        b.n_heads = get_u64("backbone.n_heads");
        b.max_positions = get_u64("backbone.max_positions");
        return BackboneConfig::with_derived_head(b);
    }

    FlowConfig flow() const {
        FlowConfig f;
        f.m = get_u64("flow.m");
        f.tau_r = get_double("flow.tau_r");
        f.gamma = get_double("flow.gamma");
        f.epsilon = get_double("flow.epsilon");
        f.validate();
        return f;
    }

    TrainConfig train() const {
        TrainConfig t;
        t.lr = get_double("train.lr");
        t.lambda_div = get_double("train.lambda_div");
        t.weight_decay = get_double("train.weight_decay");
        t.batch = std::max<std::size_t>(1, get_u64("train.batch"));
        t.stage1_epochs = get_u64("train.stage1_epochs");
        t.stage2_epochs = get_u64("train.stage2_epochs");
        t.tau_start = get_double("metalib.tau_start");
        t.tau_end = get_double("metalib.tau_end");
        t.renormalize_gold = get_bool("train.renormalize_gold");
        const std::string gl = get("train.gold_layers");
        if (gl == "all") {
            t.gold_layers.mode = GoldLayerSet::Mode::kAll;
        } else if (gl == "last") {
            t.gold_layers.mode = GoldLayerSet::Mode::kLast;
        } else {
            t.gold_layers.mode = GoldLayerSet::Mode::kList;
            for (std::size_t v : get_size_list("train.gold_layers")) t.gold_layers.list.push_back(v);
            if (t.gold_layers.list.empty())
                throw ConfigError("train.gold_layers: expected all, last, or an index list");
        }
        return t;
    }

   private:
    std::map<std::string, std::string> values_;
};

// Independent sub-streams of the run seed for each pipeline phase.
enum class SeedPurpose : std::uint64_t {
    kBackboneInit = 1,
    kPretrainCorpus = 2,
    kPretrainRun = 3,
    kMetalibInit = 4,
    kStage1Corpus = 5,
    kStage2Corpus = 6,
    kTrainRun = 7,
    kBenchCorpus = 8,
    kBenchRun = 9,
};

inline std::uint64_t derive_seed(std::uint64_t root, SeedPurpose purpose) {
    Rng rng(root);
    return rng.fork(static_cast<std::uint64_t>(purpose)).next_u64();
}

}  // namespace metasoft
