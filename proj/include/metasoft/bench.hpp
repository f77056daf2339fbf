#pragma once

// End-to-end evaluation harness. Per sample, one monolithic forward over
// [prompt; response] yields the prompt cache, the prompt attention record,
// the entry logits and the gold importance vector; a second forward with
// appended soft tokens yields trained probe scores when a policy needs them.
// Compression happens once per (policy, budget), then decoding runs over the
// compressed cache for accuracy and teacher-forced NLL.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "metasoft/backbone.hpp"
#include "metasoft/baselines.hpp"
#include "metasoft/consolidate.hpp"
#include "metasoft/corpus.hpp"
#include "metasoft/metalib.hpp"
#include "metasoft/probe.hpp"
#include "metasoft/train.hpp"

namespace metasoft {

struct BenchSettings {
    FlowConfig flow;
    GoldLayerSet gold_layers;
    std::size_t snapkv_window = 32;
    std::size_t streaming_sink = 4;
    std::size_t surrogate_tokens = 32;
    std::size_t force_recent = 0;
    std::size_t jobs = 1;
    bool timings = false;
    std::uint64_t run_seed = 0;
};

struct BenchRow {
    std::string policy;
    std::string task;
    std::size_t prompt_len = 0;
    std::size_t budget = 0;  // actual compressed rows
    double accuracy = 0.0;
    double nll_delta = 0.0;
    double attn_mse = 0.0;
    double prefill_ms = 0.0;
    double decode_ms_per_tok = 0.0;
};

namespace detail {

inline int argmax_row(const Matrix& logits) {
    int best = 0;
    for (std::size_t j = 1; j < logits.cols; ++j)
        if (logits.at(0, j) > logits.at(0, best)) best = static_cast<int>(j);
    return best;
}

// Greedy continuation: the first token comes from the entry logits (full
// prefill context), later tokens attend over the supplied cache.
inline std::vector<int> greedy_decode(const BackboneWeights& w, KvCache& cache,
                                      const Matrix& entry_logits, std::size_t n_tokens) {
    std::vector<int> out;
    int tok = argmax_row(entry_logits);
    out.push_back(tok);
    for (std::size_t i = 1; i < n_tokens; ++i) {
        DecodeResult step = decode_step(w, cache, tok);
        tok = argmax_row(step.logits);
        out.push_back(tok);
    }
    return out;
}

inline KvCache slice_cache_rows(const KvCache& cache, std::size_t n) {
    KvCache out;
    out.next_position = n;
    out.layers.resize(cache.layers.size());
    for (std::size_t l = 0; l < cache.layers.size(); ++l) {
        const auto& src = cache.layers[l];
        auto& dst = out.layers[l];
        dst.positions.assign(src.positions.begin(), src.positions.begin() + n);
        dst.heads.resize(src.heads.size());
        for (std::size_t h = 0; h < src.heads.size(); ++h) {
            dst.heads[h].k = Matrix(n, src.heads[h].k.cols);
            dst.heads[h].v = Matrix(n, src.heads[h].v.cols);
            std::copy_n(src.heads[h].k.data.data(), n * src.heads[h].k.cols,
                        dst.heads[h].k.data.data());
            std::copy_n(src.heads[h].v.data.data(), n * src.heads[h].v.cols,
                        dst.heads[h].v.data.data());
        }
    }
    return out;
}

inline AttentionRecord slice_record(const AttentionRecord& rec, std::size_t n) {
    AttentionRecord out;
    out.prompt_len = n;
    out.extra_rows = 0;
    out.prefill.resize(rec.prefill.size());
    for (std::size_t l = 0; l < rec.prefill.size(); ++l)
        for (const Matrix& m : rec.prefill[l]) {
            Matrix sub(n, n);
            for (std::size_t i = 0; i < n; ++i) std::copy_n(m.row_ptr(i), n, sub.row_ptr(i));
            out.prefill[l].push_back(std::move(sub));
        }
    return out;
}

struct SampleContext {
    const TrainingSample* sample = nullptr;
    std::size_t prompt_len = 0;
    KvCache prompt_cache;
    AttentionRecord prompt_attn;
    Matrix entry_logits;
    std::vector<double> a_gold;
    double full_nll = 0.0;
    std::optional<ImportanceScores> probe;
    ImportanceScores surrogate;
    double prefill_ms = 0.0;
};

inline SampleContext build_context(const BackboneWeights& w, const TrainState* trained,
                                   const TrainingSample& sample, const BenchSettings& cfg,
                                   bool need_probe) {
    SampleContext ctx;
    ctx.sample = &sample;
    ctx.prompt_len = sample.prompt.size();
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<int> all(sample.prompt);
    all.insert(all.end(), sample.response.begin(), sample.response.end());
    PrefillResult pr = prefill(w, all);
    const std::size_t L = ctx.prompt_len;

    ctx.prompt_cache = slice_cache_rows(pr.cache, L);
    ctx.prompt_attn = slice_record(pr.attn, L);
    ctx.entry_logits = logits_for_row(w, pr.hidden, L - 1);

    const auto layer_ids = cfg.gold_layers.resolve(w.config.n_layers);
    ctx.a_gold.assign(L, 0.0);
    for (std::size_t l : layer_ids)
        for (std::size_t h = 0; h < w.config.n_heads; ++h) {
            const Matrix& probs = pr.attn.prefill[l][h];
            for (std::size_t i = 0; i < sample.response.size(); ++i)
                for (std::size_t j = 0; j < L; ++j) ctx.a_gold[j] += probs.at(L + i, j);
        }
    const double inv = 1.0 / (static_cast<double>(w.config.n_heads) *
                              static_cast<double>(sample.response.size()) *
                              static_cast<double>(layer_ids.size()));
    for (double& v : ctx.a_gold) v *= inv;

    ctx.surrogate = surrogate_scores(ctx.prompt_attn, L, cfg.surrogate_tokens);

    if (need_probe) {
        if (!trained) throw StateError("bench: probing policy requires a trained checkpoint");
        Matrix prompt_emb(L, w.config.d_model);
        for (std::size_t i = 0; i < L; ++i)
            std::copy_n(w.tok_emb.row_ptr(sample.prompt[i]), w.config.d_model,
                        prompt_emb.row_ptr(i));
        Matrix logits = selector_logits(trained->selector, prompt_features(prompt_emb));
        Matrix weights = softmax_rows(logits, trained->tau_g);  // deterministic at inference
        SoftTokenSet soft = synthesize(trained->library, weights);
        PrefillResult probe_pass = prefill(w, sample.prompt, soft.embeddings);
        ctx.probe = probe_scores(probe_pass.attn, L, trained->selector.k);
    }

    KvCache nll_cache = ctx.prompt_cache;
    ctx.full_nll = sequence_nll_decode(w, nll_cache, ctx.entry_logits, sample.response);

    ctx.prefill_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return ctx;
}

struct PolicyOutcome {
    double accuracy = 0.0;
    double nll_delta = 0.0;
    double attn_mse = 0.0;
    double decode_ms_per_tok = 0.0;
    std::size_t actual_rows = 0;
};

inline std::vector<double> indicator_importance(const std::vector<std::size_t>& kept,
                                                std::size_t L) {
    std::vector<double> imp(L, 0.0);
    for (std::size_t j : kept) imp[j] = 1.0 / static_cast<double>(kept.size());
    return imp;
}

inline ImportanceScores boosted(const ImportanceScores& scores, std::size_t force_recent) {
    if (force_recent == 0) return scores;
    ImportanceScores out = scores;
    for (auto& layer : out.per_layer) {
        const std::size_t L = layer.size();
        for (std::size_t j = L - std::min(force_recent, L); j < L; ++j) layer[j] += 1e9;
    }
    return out;
}

inline PolicyOutcome eval_policy(const BackboneWeights& w, const SampleContext& ctx,
                                 const std::string& policy, std::size_t budget,
                                 const BenchSettings& cfg, std::size_t sample_index) {
    const std::size_t L = ctx.prompt_len;
    const TrainingSample& sample = *ctx.sample;
    PolicyOutcome out;

    KvCache compressed;
    std::vector<double> importance;
    const auto layer_ids = cfg.gold_layers.resolve(w.config.n_layers);

    auto flow_compress = [&](const ImportanceScores& scores, double gamma) {
        FlowConfig flow = cfg.flow;
        flow.gamma = gamma;
        PartitionResult part = partition(ctx.prompt_cache, boosted(scores, cfg.force_recent),
                                         budget);
        return consolidate(part, flow);
    };
    auto normalized = [&](std::vector<double> v) {
        double sum = 0.0;
        for (double x : v) sum += x;
        if (sum > 0.0)
            for (double& x : v) x /= sum;
        return v;
    };

    if (policy == "full") {
        compressed = ctx.prompt_cache;
        importance.assign(L, 1.0 / static_cast<double>(L));
    } else if (policy == "meta-soft" || policy == "dst-afa") {
        compressed = flow_compress(*ctx.probe, cfg.flow.gamma);
        importance = reduce_scores(*ctx.probe, layer_ids);
    } else if (policy == "dst-only") {
        compressed = flow_compress(*ctx.probe, 0.0);
        importance = reduce_scores(*ctx.probe, layer_ids);
    } else if (policy == "afa-only") {
        compressed = flow_compress(ctx.surrogate, cfg.flow.gamma);
        importance = reduce_scores(ctx.surrogate, layer_ids);
    } else if (policy == "neither") {
        compressed = flow_compress(ctx.surrogate, 0.0);
        importance = reduce_scores(ctx.surrogate, layer_ids);
    } else if (policy == "h2o") {
        std::vector<double> scores = h2o_scores(ctx.prompt_attn, L);
        compressed = detail::select_rows_all_layers(ctx.prompt_cache,
                                                    top_k_indices(scores, budget));
        importance = normalized(std::move(scores));
    } else if (policy == "snapkv") {
        std::vector<double> scores = snapkv_scores(ctx.prompt_attn, L, cfg.snapkv_window);
        compressed = detail::select_rows_all_layers(ctx.prompt_cache,
                                                    top_k_indices(scores, budget));
        importance = normalized(std::move(scores));
    } else if (policy == "streaming") {
        const std::size_t sink = budget > cfg.streaming_sink ? cfg.streaming_sink
                                                             : (budget > 0 ? budget - 1 : 0);
        compressed = streaming_policy(ctx.prompt_cache, budget, sink);
        importance = indicator_importance(compressed.layers[0].positions, L);
    } else if (policy == "random") {
        Rng rng = Rng(cfg.run_seed).fork(0xa11d0000 + sample_index);
        compressed = random_policy(ctx.prompt_cache, budget, rng);
        importance = indicator_importance(compressed.layers[0].positions, L);
    } else if (policy == "mean-merge") {
        const ImportanceScores& scores = ctx.probe ? *ctx.probe : ctx.surrogate;
        compressed = mean_merge_policy(ctx.prompt_cache, boosted(scores, cfg.force_recent),
                                       budget);
        importance = reduce_scores(scores, layer_ids);
    } else {
        throw ConfigError("unknown policy: " + policy);
    }
    out.actual_rows = compressed.layers[0].positions.size();

    const auto t0 = std::chrono::steady_clock::now();
    KvCache greedy_cache = compressed;
    std::vector<int> decoded =
        greedy_decode(w, greedy_cache, ctx.entry_logits, sample.response.size());
    const std::size_t start = sample.response.size() > 1 ? 1 : 0;
    std::size_t hits = 0;
    for (std::size_t i = start; i < sample.response.size(); ++i)
        hits += (decoded[i] == sample.response[i]);
    out.accuracy = static_cast<double>(hits) / static_cast<double>(sample.response.size() - start);

    KvCache nll_cache = compressed;
    const double nll = sequence_nll_decode(w, nll_cache, ctx.entry_logits, sample.response);
    out.nll_delta = nll - ctx.full_nll;
    const double decode_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    out.decode_ms_per_tok = decode_ms / (2.0 * static_cast<double>(sample.response.size()));

    double mse = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
        const double d = importance[j] - ctx.a_gold[j];
        mse += d * d;
    }
    out.attn_mse = mse / static_cast<double>(L);
    return out;
}

}  // namespace detail

inline bool policy_needs_probe(const std::string& policy, bool trained_available) {
    if (policy == "meta-soft" || policy == "dst-only" || policy == "dst-afa") return true;
    if (policy == "mean-merge") return trained_available;
    return false;
}

// Runs every (policy, budget) combination over the corpus. Sample-level work
// is parallel under settings.jobs; per-sample results land in preallocated
// slots and are reduced in index order, so the output does not depend on
// scheduling.
inline std::vector<BenchRow> run_bench(const BackboneWeights& w, const TrainState* trained,
                                       const std::vector<TrainingSample>& corpus,
                                       const std::string& task,
                                       const std::vector<std::string>& policies,
                                       const std::vector<std::size_t>& budgets,
                                       const BenchSettings& settings) {
    if (corpus.empty()) throw ParamError("run_bench: empty corpus");
    bool need_probe = false;
    for (const auto& p : policies) need_probe |= policy_needs_probe(p, trained != nullptr);
    if (need_probe && !trained)
        throw StateError("bench: policy set requires a trained checkpoint");

    const std::size_t n = corpus.size();
    const std::size_t combos = policies.size() * budgets.size();
    std::vector<std::vector<detail::PolicyOutcome>> outcomes(n);
    std::vector<double> prefill_ms(n, 0.0);

    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            detail::SampleContext ctx =
                detail::build_context(w, trained, corpus[i], settings, need_probe);
            prefill_ms[i] = ctx.prefill_ms;
            outcomes[i].reserve(combos);
            for (const auto& policy : policies)
                for (std::size_t b : budgets)
                    outcomes[i].push_back(detail::eval_policy(w, ctx, policy, b, settings, i));
        }
    };
    const std::size_t jobs = std::max<std::size_t>(1, settings.jobs);
    if (jobs == 1) {
        work(0, n);
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (n + jobs - 1) / jobs;
        for (std::size_t j = 0; j < jobs && j * chunk < n; ++j)
            pool.emplace_back(work, j * chunk, std::min(n, (j + 1) * chunk));
        for (auto& t : pool) t.join();
    }

    std::vector<BenchRow> rows;
    std::size_t combo = 0;
    for (const auto& policy : policies)
        for (std::size_t b : budgets) {
            BenchRow row;
            row.policy = policy;
            row.task = task;
            row.prompt_len = corpus[0].prompt.size();
            for (std::size_t i = 0; i < n; ++i) {
                const auto& o = outcomes[i][combo];
                row.accuracy += o.accuracy;
                row.nll_delta += o.nll_delta;
                row.attn_mse += o.attn_mse;
                row.decode_ms_per_tok += o.decode_ms_per_tok;
                row.budget = o.actual_rows;
                row.prefill_ms += prefill_ms[i];
            }
            const double inv = 1.0 / static_cast<double>(n);
            row.accuracy *= inv;
            row.nll_delta *= inv;
            row.attn_mse *= inv;
            row.decode_ms_per_tok *= inv;
            row.prefill_ms *= inv;
            if (!settings.timings) {
                row.prefill_ms = 0.0;
                row.decode_ms_per_tok = 0.0;
            }
            rows.push_back(std::move(row));
            ++combo;
        }

    // Internal consistency: compression never beats the full cache on this
    // backbone beyond one sample of noise.
    for (const auto& full_row : rows) {
        if (full_row.policy != "full") continue;
        for (const auto& row : rows) {
            if (row.task != full_row.task) continue;
            if (row.accuracy > full_row.accuracy + 1.0 / static_cast<double>(n) + 1e-12)
                throw ContractError("bench: policy " + row.policy +
                                    " exceeds the full-cache ceiling beyond noise");
        }
    }
    return rows;
}

inline const std::vector<std::string>& ablation_arms() {
    static const std::vector<std::string> arms = {"neither", "dst-only", "afa-only", "dst-afa"};
    return arms;
}

// --- report output -----------------------------------------------------------

inline void sort_rows(std::vector<BenchRow>& rows) {
    std::sort(rows.begin(), rows.end(), [](const BenchRow& a, const BenchRow& b) {
        if (a.task != b.task) return a.task < b.task;
        if (a.prompt_len != b.prompt_len) return a.prompt_len < b.prompt_len;
        if (a.budget != b.budget) return a.budget < b.budget;
        return a.policy < b.policy;
    });
}

inline std::string csv_of_rows(std::vector<BenchRow> rows) {
    sort_rows(rows);
    std::string out = "policy,task,L,B,accuracy,nll_delta,attn_mse,prefill_ms,decode_ms_per_tok\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%zu,%zu,%.6f,%.9f,%.9e,%.3f,%.4f\n",
                      r.policy.c_str(), r.task.c_str(), r.prompt_len, r.budget, r.accuracy,
                      r.nll_delta, r.attn_mse, r.prefill_ms, r.decode_ms_per_tok);
        out += buf;
    }
    return out;
}

inline void write_reports(const std::string& dir, const std::vector<BenchRow>& rows,
                          std::uint64_t seed, std::uint64_t config_hash) {
    {
        std::ofstream csv(dir + "/report.csv", std::ios::binary);
        if (!csv) throw ConfigError("cannot write " + dir + "/report.csv");
        csv << csv_of_rows(rows);
    }
    nlohmann::json j;
    j["format"] = "metasoft-report v1";
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    std::vector<BenchRow> sorted = rows;
    sort_rows(sorted);
    j["rows"] = nlohmann::json::array();
    for (const auto& r : sorted) {
        nlohmann::json row;
        row["policy"] = r.policy;
        row["task"] = r.task;
        row["L"] = r.prompt_len;
        row["B"] = r.budget;
        row["accuracy"] = r.accuracy;
        row["nll_delta"] = r.nll_delta;
        row["attn_mse"] = r.attn_mse;
        row["prefill_ms"] = r.prefill_ms;
        row["decode_ms_per_tok"] = r.decode_ms_per_tok;
        j["rows"].push_back(row);
    }
    std::ofstream js(dir + "/report.json", std::ios::binary);
    if (!js) throw ConfigError("cannot write " + dir + "/report.json");
    js << j.dump(2) << "\n";
}

// --- inspection ---------------------------------------------------------------

// Dumps the per-layer importance vectors and, per (layer, head), the flow
// plan triples (i, j, w), loads and gates for one sample at one budget.
inline void inspect_sample(const BackboneWeights& w, const TrainState* trained,
                           const TrainingSample& sample, const std::string& task,
                           std::size_t budget, const BenchSettings& settings,
                           std::ostream& out) {
    bool use_probe = trained != nullptr;
    detail::SampleContext ctx =
        detail::build_context(w, trained, sample, settings, use_probe);
    const ImportanceScores& scores = ctx.probe ? *ctx.probe : ctx.surrogate;

    out << "task " << task << "\n";
    out << "L " << ctx.prompt_len << "\n";
    out << "B " << budget << "\n";
    out << "scores " << (ctx.probe ? "probe" : "surrogate") << "\n";
    char buf[64];
    for (std::size_t l = 0; l < scores.per_layer.size(); ++l) {
        out << "a_soft layer " << l;
        for (double v : scores.per_layer[l]) {
            std::snprintf(buf, sizeof(buf), " %.9e", v);
            out << buf;
        }
        out << "\n";
    }
    PartitionResult part =
        partition(ctx.prompt_cache, detail::boosted(scores, settings.force_recent), budget);
    std::vector<std::vector<FlowPlan>> plans;
    consolidate(part, settings.flow, &plans);
    for (std::size_t l = 0; l < part.layers.size(); ++l) {
        out << "keep layer " << l;
        for (std::size_t i : part.layers[l].keep) out << " " << i;
        out << "\n";
    }
    for (std::size_t l = 0; l < plans.size(); ++l)
        for (std::size_t h = 0; h < plans[l].size(); ++h) {
            const FlowPlan& plan = plans[l][h];
            std::snprintf(buf, sizeof(buf), "%.9e", plan.target_load);
            out << "flow-plan layer " << l << " head " << h << " alpha " << buf << "\n";
            for (std::size_t j = 0; j < plan.loads.size(); ++j) {
                std::snprintf(buf, sizeof(buf), "%.9e", plan.loads[j]);
                out << "load " << j << " " << buf << "\n";
            }
            for (std::size_t j = 0; j < plan.gates.size(); ++j) {
                std::snprintf(buf, sizeof(buf), "%.9e", plan.gates[j]);
                out << "gate " << j << " " << buf << "\n";
            }
            for (std::size_t i = 0; i < plan.flow.rows.size(); ++i)
                for (const auto& [j, weight] : plan.flow.rows[i]) {
                    std::snprintf(buf, sizeof(buf), "%.9e", weight);
                    out << "w " << i << " " << j << " " << buf << "\n";
                }
        }
}

}  // namespace metasoft
