#pragma once

#include <cstddef>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "glstm/graph.hpp"
#include "glstm/ops.hpp"

namespace glstm {

/// Configuration error; carries a source position when one is known.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what, std::size_t line = 0, std::size_t column = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ", column " +
                                      std::to_string(column) + ": " + what
                                : what),
        line_(line),
        column_(column) {}
  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t line_, column_;
};

enum class Architecture { kGcn, kGlstm };
enum class InputNorm { kNone, kLayer };
enum class HiddenNorm { kNone, kGroup };
/// kTargetNode: linear map of each graph's target node. kMeanPool: linear map
/// of the mean node state. kAllNodes: per-node linear map.
enum class Readout { kTargetNode, kMeanPool, kAllNodes };
/// kSymbols: node features hold (key symbol, value symbol) indices, -1 when
/// absent, embedded by trainable lookup tables.
enum class InputKind { kFeatures, kSymbols };

struct ModelConfig {
  Architecture arch = Architecture::kGlstm;
  std::size_t layers = 2;
  std::size_t hidden = 32;
  std::size_t memory = 8;
  std::size_t heads = 1;
  bool k_hop = true;
  InputNorm input_norm = InputNorm::kLayer;
  HiddenNorm hidden_norm = HiddenNorm::kGroup;
  Activation activation = Activation::kNone;
  double dropout = 0.0;
  Readout readout = Readout::kTargetNode;
  bool input_gate = true;
  bool forget_gate = true;
  bool output_gate = true;
  bool zero_init_down = false;

  InputKind input_kind = InputKind::kFeatures;
  /// Feature width, or symbol-table size for kSymbols.
  std::size_t input_dim = 1;
  std::size_t embed_dim = 16;
  std::size_t output_dim = 1;

  std::size_t feature_width() const {
    return input_kind == InputKind::kSymbols ? 2 * embed_dim : input_dim;
  }

  void validate() const {
    if (layers < 1) throw ConfigError("model.layers must be >= 1");
    if (heads < 1) throw ConfigError("model.heads must be >= 1");
    if (hidden < 1 || memory < 1) throw ConfigError("model.hidden and model.memory must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");
    if (input_dim < 1 || output_dim < 1 || embed_dim < 1)
      throw ConfigError("model input/output dimensions must be >= 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// key = value text form, shared by experiment configs and checkpoint headers

namespace detail {

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

inline constexpr EnumName<Architecture> kArchNames[] = {{Architecture::kGcn, "gcn"},
                                                        {Architecture::kGlstm, "glstm"}};
inline constexpr EnumName<InputNorm> kInputNormNames[] = {{InputNorm::kNone, "none"},
                                                          {InputNorm::kLayer, "layer"}};
inline constexpr EnumName<HiddenNorm> kHiddenNormNames[] = {{HiddenNorm::kNone, "none"},
                                                            {HiddenNorm::kGroup, "group"}};
inline constexpr EnumName<Activation> kActivationNames[] = {{Activation::kNone, "none"},
                                                            {Activation::kRelu, "relu"},
                                                            {Activation::kGelu, "gelu"},
                                                            {Activation::kTanh, "tanh"}};
inline constexpr EnumName<Readout> kReadoutNames[] = {{Readout::kTargetNode, "target"},
                                                      {Readout::kMeanPool, "mean_pool"},
                                                      {Readout::kAllNodes, "all_nodes"}};
inline constexpr EnumName<InputKind> kInputKindNames[] = {{InputKind::kFeatures, "features"},
                                                          {InputKind::kSymbols, "symbols"}};

template <typename E, std::size_t N>
const char* enum_name(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

template <typename E, std::size_t N>
E parse_enum(const EnumName<E> (&table)[N], const std::string& key, const std::string& s) {
  std::string allowed;
  for (const auto& e : table) {
    if (s == e.name) return e.value;
    allowed += (allowed.empty() ? "" : "|") + std::string(e.name);
  }
  throw ConfigError("invalid value '" + s + "' for " + key + " (expected " + allowed + ")");
}

inline std::size_t parse_count(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("invalid integer '" + s + "' for " + key);
  }
  if (pos != s.size() || v < 0) throw ConfigError("invalid non-negative integer '" + s + "' for " + key);
  return static_cast<std::size_t>(v);
}

inline double parse_real(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("invalid number '" + s + "' for " + key);
  }
  if (pos != s.size()) throw ConfigError("invalid number '" + s + "' for " + key);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "off" || s == "no") return false;
  throw ConfigError("invalid boolean '" + s + "' for " + key);
}

inline std::string real_text(double v) { return format_real(v); }

}  // namespace detail

inline const std::vector<std::string>& model_keys() {
  static const std::vector<std::string> keys = {
      "arch",        "layers",      "hidden",      "memory",      "heads",
      "k_hop",       "input_norm",  "hidden_norm", "activation",  "dropout",
      "readout",     "input_gate",  "forget_gate", "output_gate", "zero_init_down",
      "input_kind",  "input_dim",   "embed_dim",   "output_dim"};
  return keys;
}

/// Applies one key; throws ConfigError on unknown keys or invalid values.
inline void set_model_key(ModelConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "arch") c.arch = parse_enum(kArchNames, key, value);
  else if (key == "layers") c.layers = parse_count(key, value);
  else if (key == "hidden") c.hidden = parse_count(key, value);
  else if (key == "memory") c.memory = parse_count(key, value);
  else if (key == "heads") c.heads = parse_count(key, value);
  else if (key == "k_hop") c.k_hop = parse_bool(key, value);
  else if (key == "input_norm") c.input_norm = parse_enum(kInputNormNames, key, value);
  else if (key == "hidden_norm") c.hidden_norm = parse_enum(kHiddenNormNames, key, value);
  else if (key == "activation") c.activation = parse_enum(kActivationNames, key, value);
  else if (key == "dropout") c.dropout = parse_real(key, value);
  else if (key == "readout") c.readout = parse_enum(kReadoutNames, key, value);
  else if (key == "input_gate") c.input_gate = parse_bool(key, value);
  else if (key == "forget_gate") c.forget_gate = parse_bool(key, value);
  else if (key == "output_gate") c.output_gate = parse_bool(key, value);
  else if (key == "zero_init_down") c.zero_init_down = parse_bool(key, value);
  else if (key == "input_kind") c.input_kind = parse_enum(kInputKindNames, key, value);
  else if (key == "input_dim") c.input_dim = parse_count(key, value);
  else if (key == "embed_dim") c.embed_dim = parse_count(key, value);
  else if (key == "output_dim") c.output_dim = parse_count(key, value);
  else throw ConfigError("unknown model key '" + key + "'");
}

inline std::vector<std::pair<std::string, std::string>> model_config_items(const ModelConfig& c) {
  using namespace detail;
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {{"arch", enum_name(kArchNames, c.arch)},
          {"layers", std::to_string(c.layers)},
          {"hidden", std::to_string(c.hidden)},
          {"memory", std::to_string(c.memory)},
          {"heads", std::to_string(c.heads)},
          {"k_hop", b(c.k_hop)},
          {"input_norm", enum_name(kInputNormNames, c.input_norm)},
          {"hidden_norm", enum_name(kHiddenNormNames, c.hidden_norm)},
          {"activation", enum_name(kActivationNames, c.activation)},
          {"dropout", real_text(c.dropout)},
          {"readout", enum_name(kReadoutNames, c.readout)},
          {"input_gate", b(c.input_gate)},
          {"forget_gate", b(c.forget_gate)},
          {"output_gate", b(c.output_gate)},
          {"zero_init_down", b(c.zero_init_down)},
          {"input_kind", enum_name(kInputKindNames, c.input_kind)},
          {"input_dim", std::to_string(c.input_dim)},
          {"embed_dim", std::to_string(c.embed_dim)},
          {"output_dim", std::to_string(c.output_dim)}};
}

inline std::string model_config_text(const ModelConfig& c) {
  std::ostringstream os;
  for (const auto& [k, v] : model_config_items(c)) os << k << " = " << v << '\n';
  return os.str();
}

inline ModelConfig parse_model_config_text(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value'", line_no, 1);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    try {
      set_model_key(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(e.what(), line_no, 1);
    }
  }
  return c;
}

}  // namespace glstm
