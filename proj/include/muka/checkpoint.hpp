#pragma once

// Text checkpoint format:
//
//   #amalgam-checkpoint v1
//   input_dim=32
//   hidden_dims=64,64
//   num_classes=4
//   dropout_rate=0.1
//   activation=relu
//   <extra key=value lines, e.g. the teacher binding>
//   params=4676
//   <one decimal float per line>
//
// Floats use shortest round-trip notation, so load(save(m)) is bit-exact
// and re-saving reproduces identical bytes.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "muka/mlp.hpp"
#include "muka/textio.hpp"

namespace muka {

inline constexpr std::string_view kCheckpointHeader = "#amalgam-checkpoint v1";

inline std::string serialize_model(const ModelSpec& spec, const ParameterSet& params,
                                   const std::vector<std::pair<std::string, std::string>>& extra = {}) {
    spec.validate();
    if (params.size() != spec.param_count())
        throw std::invalid_argument("serialize_model: parameter count mismatch");
    std::string out;
    out.reserve(params.size() * 20 + 256);
    out += kCheckpointHeader;
    out += '\n';
    out += "input_dim=" + std::to_string(spec.input_dim) + "\n";
    std::vector<std::string> hd;
    for (int h : spec.hidden_dims) hd.push_back(std::to_string(h));
    out += "hidden_dims=" + join(hd, ',') + "\n";
    out += "num_classes=" + std::to_string(spec.num_classes) + "\n";
    out += "dropout_rate=" + format_double(spec.dropout_rate) + "\n";
    out += "activation=" + to_string(spec.activation) + "\n";
    for (const auto& [k, v] : extra) out += k + "=" + v + "\n";
    out += "params=" + std::to_string(params.size()) + "\n";
    for (double v : params.values) {
        out += format_double(v);
        out += '\n';
    }
    return out;
}

struct LoadedModel {
    ModelSpec spec;
    ParameterSet params;
    std::map<std::string, std::string> extra;
};

inline LoadedModel parse_model(std::string_view text, const std::string& origin) {
    auto fail = [&](std::size_t line_no, const std::string& msg) -> void {
        throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": " + msg);
    };
    std::vector<std::string> lines = split(text, '\n');
    if (!lines.empty() && lines.back().empty()) lines.pop_back();
    if (lines.empty() || trim(lines[0]) != kCheckpointHeader)
        fail(1, "bad checkpoint header, expected '" + std::string(kCheckpointHeader) + "'");

    LoadedModel m;
    std::map<std::string, std::string> kv;
    std::size_t i = 1;
    long declared = -1;
    for (; i < lines.size(); ++i) {
        std::string_view line = trim(lines[i]);
        auto eq = line.find('=');
        if (eq == std::string_view::npos) fail(i + 1, "expected key=value, got '" + std::string(line) + "'");
        std::string key(trim(line.substr(0, eq)));
        std::string val(trim(line.substr(eq + 1)));
        if (key == "params") {
            declared = parse_long(val, origin + " params");
            ++i;
            break;
        }
        kv[key] = val;
    }
    if (declared < 0) fail(lines.size(), "missing params=<count> line");

    auto take = [&](const char* key) -> std::string {
        auto it = kv.find(key);
        if (it == kv.end()) fail(1, std::string("missing required key '") + key + "'");
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    m.spec.input_dim = static_cast<int>(parse_long(take("input_dim"), origin + " input_dim"));
    m.spec.hidden_dims = parse_int_list<int>(take("hidden_dims"), origin + " hidden_dims");
    m.spec.num_classes = static_cast<int>(parse_long(take("num_classes"), origin + " num_classes"));
    m.spec.dropout_rate = parse_double(take("dropout_rate"), origin + " dropout_rate");
    m.spec.activation = activation_from_string(take("activation"));
    m.spec.validate();
    m.extra = std::move(kv);

    if (static_cast<std::size_t>(declared) != m.spec.param_count())
        fail(i, "declared param count " + std::to_string(declared) + " does not match spec (" +
                    std::to_string(m.spec.param_count()) + ")");
    if (lines.size() - i != static_cast<std::size_t>(declared))
        fail(lines.size(), "expected " + std::to_string(declared) + " parameter lines, found " +
                               std::to_string(lines.size() - i));

    m.params = ParameterSet::zeros(m.spec);
    for (std::size_t j = 0; j < static_cast<std::size_t>(declared); ++j)
        m.params.values[j] = parse_double(trim(lines[i + j]), origin + ":" + std::to_string(i + j + 1));
    return m;
}

inline void save_model(const std::filesystem::path& path, const ModelSpec& spec,
                       const ParameterSet& params,
                       const std::vector<std::pair<std::string, std::string>>& extra = {}) {
    write_text_file(path, serialize_model(spec, params, extra));
}

inline LoadedModel load_model(const std::filesystem::path& path) {
    return parse_model(read_text_file(path), path.string());
}

}  // namespace muka
