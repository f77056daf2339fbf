#pragma once

// Synthetic retrieval tasks at desk scale. Token layout over the 256-token
// vocabulary: a handful of structural markers, a payload alphabet the answers
// are drawn from, and a filler alphabet disjoint from both. All three task
// kinds end the prompt with an explicit query and start the response with an
// answer marker, so the first content token of the answer is predicted over
// the (possibly compressed) cache rather than from prefill logits.

#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "metasoft/numerics.hpp"
#include "metasoft/train.hpp"

namespace metasoft {

enum class TaskKind { kNeedle, kCopy, kKvRecall };

inline const char* task_name(TaskKind k) {
    switch (k) {
        case TaskKind::kNeedle:
            return "needle";
        case TaskKind::kCopy:
            return "copy";
        case TaskKind::kKvRecall:
            return "kv-recall";
    }
    return "?";
}

inline TaskKind task_from_name(const std::string& name) {
    if (name == "needle") return TaskKind::kNeedle;
    if (name == "copy") return TaskKind::kCopy;
    if (name == "kv-recall") return TaskKind::kKvRecall;
    throw ConfigError("unknown task kind: " + name);
}

// Keys and answer values come from disjoint alphabets, and both are
// disjoint from filler. Values only ever occur inside marked payload spans,
// so retrieving them is content-addressable but impossible once their cache
// rows are gone.
struct TokenAlphabet {
    static constexpr int kBos = 0;
    static constexpr int kKeyMarker = 1;
    static constexpr int kQueryMarker = 2;
    static constexpr int kCopyMarker = 3;
    static constexpr int kAnswerMarker = 4;
    static constexpr int kKeyFirst = 8;
    static constexpr int kKeyCount = 40;
    static constexpr int kValueFirst = 48;
    static constexpr int kValueCount = 48;
    static constexpr int kFillerFirst = 96;
    static constexpr int kFillerCount = 160;

    static int key(Rng& rng) { return kKeyFirst + static_cast<int>(rng.uniform_index(kKeyCount)); }
    static int value(Rng& rng) {
        return kValueFirst + static_cast<int>(rng.uniform_index(kValueCount));
    }
    static int filler(Rng& rng) {
        return kFillerFirst + static_cast<int>(rng.uniform_index(kFillerCount));
    }
};

struct SyntheticTask {
    TaskKind kind = TaskKind::kNeedle;
    std::size_t prompt_len = 128;
    std::size_t payload_tokens = 1;  // answer length after the answer marker
    std::uint64_t seed = 0;
};

// One sample. The response always begins with the answer marker followed by
// the payload tokens the task defines.
inline TrainingSample gen_sample(const SyntheticTask& task, Rng& rng) {
    const std::size_t L = task.prompt_len;
    const std::size_t p = task.payload_tokens;
    TrainingSample s;
    s.prompt.assign(L, 0);
    s.prompt[0] = TokenAlphabet::kBos;
    for (std::size_t i = 1; i < L; ++i) s.prompt[i] = TokenAlphabet::filler(rng);
    s.response.push_back(TokenAlphabet::kAnswerMarker);

    switch (task.kind) {
        case TaskKind::kNeedle: {
            // [KM key v1..vp] somewhere, query [QM key] at the end.
            if (L < p + 6) throw ParamError("gen_sample: prompt too short for needle payload");
            const int key = TokenAlphabet::key(rng);
            std::vector<int> values(p);
            for (auto& v : values) v = TokenAlphabet::value(rng);
            const std::size_t lo = 1, hi = L - 2 - (p + 2);
            const std::size_t pos = lo + rng.uniform_index(hi - lo + 1);
            s.prompt[pos] = TokenAlphabet::kKeyMarker;
            s.prompt[pos + 1] = key;
            for (std::size_t i = 0; i < p; ++i) s.prompt[pos + 2 + i] = values[i];
            s.prompt[L - 2] = TokenAlphabet::kQueryMarker;
            s.prompt[L - 1] = key;
            for (int v : values) s.response.push_back(v);
            break;
        }
        case TaskKind::kCopy: {
            // Marked span [CM t1..tp CM], response repeats the span.
            if (L < p + 6) throw ParamError("gen_sample: prompt too short for copy span");
            std::vector<int> span(p);
            for (auto& v : span) v = TokenAlphabet::value(rng);
            const std::size_t lo = 1, hi = L - 2 - (p + 2);
            const std::size_t pos = lo + rng.uniform_index(hi - lo + 1);
            s.prompt[pos] = TokenAlphabet::kCopyMarker;
            for (std::size_t i = 0; i < p; ++i) s.prompt[pos + 1 + i] = span[i];
            s.prompt[pos + 1 + p] = TokenAlphabet::kCopyMarker;
            s.prompt[L - 2] = TokenAlphabet::kQueryMarker;
            s.prompt[L - 1] = TokenAlphabet::kCopyMarker;
            for (int v : span) s.response.push_back(v);
            break;
        }
        case TaskKind::kKvRecall: {
            // Several [KM key value...] pairs, query one of them.
            const std::size_t pairs = 3;
            if (L < pairs * (p + 2) + 6)
                throw ParamError("gen_sample: prompt too short for kv pairs");
            std::vector<int> keys(pairs);
            std::vector<std::vector<int>> values(pairs, std::vector<int>(p));
            for (std::size_t q = 0; q < pairs; ++q) {
                // Distinct keys so the query is unambiguous.
                bool fresh = false;
                while (!fresh) {
                    keys[q] = TokenAlphabet::key(rng);
                    fresh = true;
                    for (std::size_t r = 0; r < q; ++r) fresh &= (keys[r] != keys[q]);
                }
                for (auto& v : values[q]) v = TokenAlphabet::value(rng);
            }
            // Pair q lands in the q-th equal slice of the usable region.
            const std::size_t usable = L - 3 - pairs * (p + 2);
            std::size_t cursor = 1;
            for (std::size_t q = 0; q < pairs; ++q) {
                const std::size_t slack = usable / pairs;
                const std::size_t pos = cursor + rng.uniform_index(slack + 1);
                s.prompt[pos] = TokenAlphabet::kKeyMarker;
                s.prompt[pos + 1] = keys[q];
                for (std::size_t i = 0; i < p; ++i) s.prompt[pos + 2 + i] = values[q][i];
                cursor = pos + p + 2;
            }
            const std::size_t which = rng.uniform_index(pairs);
            s.prompt[L - 2] = TokenAlphabet::kQueryMarker;
            s.prompt[L - 1] = keys[which];
            for (int v : values[which]) s.response.push_back(v);
            break;
        }
    }
    return s;
}

// Deterministic corpus: sample i draws from fork(seed_stream + i), so the
// corpus is stable under reordering and count changes.
inline std::vector<TrainingSample> gen_corpus(TaskKind kind, std::size_t count,
                                              std::size_t prompt_len, std::uint64_t seed,
                                              std::size_t payload_tokens = 1) {
    if (count < 1) throw ParamError("gen_corpus: count must be >= 1");
    SyntheticTask task;
    task.kind = kind;
    task.prompt_len = prompt_len;
    task.payload_tokens = payload_tokens;
    Rng root(seed);
    std::vector<TrainingSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = root.fork(i);
        out.push_back(gen_sample(task, rng));
    }
    return out;
}

// Mixture over task kinds and prompt lengths (backbone pretraining, stage
// corpora). Kind and length are drawn per sample from that sample's stream.
inline std::vector<TrainingSample> gen_mixed_corpus(const std::vector<TaskKind>& kinds,
                                                    std::size_t count,
                                                    const std::vector<std::size_t>& lengths,
                                                    std::uint64_t seed,
                                                    std::size_t payload_tokens = 1) {
    if (count < 1) throw ParamError("gen_mixed_corpus: count must be >= 1");
    if (kinds.empty() || lengths.empty())
        throw ParamError("gen_mixed_corpus: kinds and lengths must be nonempty");
    Rng root(seed);
    std::vector<TrainingSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = root.fork(i);
        SyntheticTask task;
        task.kind = kinds[rng.uniform_index(kinds.size())];
        task.prompt_len = lengths[rng.uniform_index(lengths.size())];
        task.payload_tokens = payload_tokens;
        out.push_back(gen_sample(task, rng));
    }
    return out;
}

// Plain-text corpus exchange format: one sample per line,
// "<prompt tokens> | <response tokens>".
inline void save_corpus(const std::string& path, const std::vector<TrainingSample>& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write corpus: " + path);
    for (const auto& s : corpus) {
        for (std::size_t i = 0; i < s.prompt.size(); ++i) out << (i ? " " : "") << s.prompt[i];
        out << " |";
        for (int t : s.response) out << " " << t;
        out << "\n";
    }
}

inline std::vector<TrainingSample> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open corpus: " + path);
    std::vector<TrainingSample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        TrainingSample s;
        std::istringstream ss(line);
        std::string tok;
        bool in_response = false;
        while (ss >> tok) {
            if (tok == "|") {
                in_response = true;
                continue;
            }
            (in_response ? s.response : s.prompt).push_back(std::stoi(tok));
        }
        if (s.prompt.empty() || s.response.empty())
            throw ConfigError("corpus line without prompt | response: " + path);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace metasoft
