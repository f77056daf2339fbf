#pragma once

// Checkpoint container shared by the backbone and the soft-token state.
// Layout (documented byte-exactly in the README):
//   ASCII header, LF line endings:
//     metasoft-checkpoint v1
//     section <name>
//     config <key> <value>        (repeated)
//     tensor <name> <rows> <cols> (repeated, declaration order)
//     end-header
//   followed immediately by the tensor payloads: row-major float64,
//   little-endian, concatenated in declaration order.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "metasoft/backbone.hpp"
#include "metasoft/metalib.hpp"
#include "metasoft/numerics.hpp"
#include "metasoft/train.hpp"

namespace metasoft {

struct CheckpointPayload {
    std::string section;
    std::vector<std::pair<std::string, std::string>> config;  // echo, ordered
    std::vector<std::pair<std::string, Matrix>> tensors;      // declaration order

    const Matrix& tensor(const std::string& name) const {
        for (const auto& [n, m] : tensors)
            if (n == name) return m;
        throw ConfigError("checkpoint: missing tensor " + name);
    }
    const std::string& config_value(const std::string& key) const {
        for (const auto& [k, v] : config)
            if (k == key) return v;
        throw ConfigError("checkpoint: missing config key " + key);
    }
};

namespace detail {

inline void write_f64_le(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline double read_f64_le(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline std::string trim_ws(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointPayload& payload) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write checkpoint: " + path);
    out << "metasoft-checkpoint v1\n";
    out << "section " << payload.section << "\n";
    for (const auto& [k, v] : payload.config) out << "config " << k << " " << v << "\n";
    for (const auto& [name, m] : payload.tensors)
        out << "tensor " << name << " " << m.rows << " " << m.cols << "\n";
    out << "end-header\n";
    for (const auto& [name, m] : payload.tensors)
        for (double v : m.data) detail::write_f64_le(out, v);
    if (!out) throw ConfigError("short write on checkpoint: " + path);
}

inline CheckpointPayload load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint: " + path);
    CheckpointPayload payload;
    std::string line;
    if (!std::getline(in, line) || line != "metasoft-checkpoint v1")
        throw ConfigError("bad checkpoint magic in " + path);
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> shapes;
    while (std::getline(in, line)) {
        if (line == "end-header") break;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "section") {
            ss >> payload.section;
        } else if (tag == "config") {
            std::string k, v;
            ss >> k;
            std::getline(ss, v);
            payload.config.push_back({k, detail::trim_ws(v)});
        } else if (tag == "tensor") {
            std::string name;
            std::size_t r, c;
            ss >> name >> r >> c;
            shapes.push_back({name, {r, c}});
        } else {
            throw ConfigError("bad checkpoint header line: " + line);
        }
    }
    for (const auto& [name, shape] : shapes) {
        Matrix m(shape.first, shape.second);
        for (double& v : m.data) v = detail::read_f64_le(in);
        payload.tensors.push_back({name, std::move(m)});
    }
    if (!in) throw ConfigError("truncated checkpoint payload: " + path);
    return payload;
}

// --- backbone --------------------------------------------------------------

inline void save_backbone(const std::string& path, const BackboneWeights& w) {
    CheckpointPayload p;
    p.section = "backbone";
    const BackboneConfig& c = w.config;
    p.config = {{"vocab_size", std::to_string(c.vocab_size)},
                {"d_model", std::to_string(c.d_model)},
                {"n_layers", std::to_string(c.n_layers)},
                {"n_heads", std::to_string(c.n_heads)},
                {"d_head", std::to_string(c.d_head)},
                {"max_positions", std::to_string(c.max_positions)}};
    w.for_each_tensor([&](const std::string& name, const Matrix& m) {
        p.tensors.push_back({name, m});
    });
    save_checkpoint(path, p);
}

inline BackboneWeights load_backbone(const std::string& path) {
    CheckpointPayload p = load_checkpoint(path);
    if (p.section != "backbone") throw ConfigError(path + ": not a backbone checkpoint");
    BackboneConfig c;
    c.vocab_size = std::stoull(p.config_value("vocab_size"));
    c.d_model = std::stoull(p.config_value("d_model"));
    c.n_layers = std::stoull(p.config_value("n_layers"));
    c.n_heads = std::stoull(p.config_value("n_heads"));
    c.d_head = std::stoull(p.config_value("d_head"));
    c.max_positions = std::stoull(p.config_value("max_positions"));
    c.validate();
    BackboneWeights w;
    w.config = c;
    w.layers.resize(c.n_layers);
    w.for_each_tensor([&](const std::string& name, Matrix& m) { m = p.tensor(name); });
    return w;
}

// --- metalib + selector ------------------------------------------------------

inline void save_metalib(const std::string& path, const TrainState& state) {
    CheckpointPayload p;
    p.section = "metalib";
    char tau[64];
    std::snprintf(tau, sizeof(tau), "%.17g", state.tau_g);
    p.config = {{"library_size", std::to_string(state.library.library_size())},
                {"d_model", std::to_string(state.library.d_model())},
                {"k", std::to_string(state.selector.k)},
                {"d_hidden", std::to_string(state.selector.w1.cols)},
                {"tau_g", tau},
                {"stage1_done", state.stage1_done ? "1" : "0"}};
    p.tensors.push_back({"library.basis", state.library.basis});
    p.tensors.push_back({"selector.w1", state.selector.w1});
    p.tensors.push_back({"selector.b1", state.selector.b1});
    p.tensors.push_back({"selector.w2", state.selector.w2});
    p.tensors.push_back({"selector.b2", state.selector.b2});
    save_checkpoint(path, p);
}

inline TrainState load_metalib(const std::string& path, const TrainConfig& cfg) {
    CheckpointPayload p = load_checkpoint(path);
    if (p.section != "metalib") throw ConfigError(path + ": not a metalib checkpoint");
    MetaLibrary lib;
    lib.basis = p.tensor("library.basis");
    SelectorParams sel;
    sel.k = std::stoull(p.config_value("k"));
    sel.library_size = lib.library_size();
    sel.w1 = p.tensor("selector.w1");
    sel.b1 = p.tensor("selector.b1");
    sel.w2 = p.tensor("selector.w2");
    sel.b2 = p.tensor("selector.b2");
    TrainState st = make_train_state(lib, sel, cfg);
    st.tau_g = std::stod(p.config_value("tau_g"));
    st.stage1_done = p.config_value("stage1_done") == "1";
    return st;
}

}  // namespace metasoft
