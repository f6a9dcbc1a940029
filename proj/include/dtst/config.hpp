#pragma once

// Flat `key = value` experiment configuration with `#` comments.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dtst/data.hpp"
#include "dtst/error.hpp"
#include "dtst/model.hpp"
#include "dtst/objectives.hpp"
#include "dtst/retrieval.hpp"
#include "dtst/train.hpp"

namespace dtst {

/// Selector insertion point, either symbolic or an explicit block index.
struct PositionSpec {
  enum class Kind { Last, SecondToLast, Index };
  Kind kind = Kind::Last;
  std::size_t index = 0;

  /// `last` reduces the output of the final block (the reduced sequence feeds
  /// only the heads); `second_to_last` reduces the output of block N-1 so the
  /// final block runs on K + 2 tokens.
  std::size_t resolve(std::size_t num_blocks) const {
    switch (kind) {
      case Kind::Last:
        return num_blocks;
      case Kind::SecondToLast:
        if (num_blocks < 2) throw ConfigError("SelectorConfig.position=second_to_last needs at least 2 blocks");
        return num_blocks - 1;
      case Kind::Index:
        return index;
    }
    return index;
  }

  std::string str() const {
    switch (kind) {
      case Kind::Last: return "last";
      case Kind::SecondToLast: return "second_to_last";
      case Kind::Index: return std::to_string(index);
    }
    return {};
  }

  static PositionSpec parse(const std::string& s) {
    if (s == "last") return {Kind::Last, 0};
    if (s == "second_to_last") return {Kind::SecondToLast, 0};
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw ConfigError("SelectorConfig.position must be last, second_to_last or a block index, got '" + s + "'");
    return {Kind::Index, v};
  }

  bool operator==(const PositionSpec&) const = default;
};

struct AblationGrid {
  std::vector<std::size_t> heads = {2, 8};
  std::vector<std::size_t> ks = {2, 3};
  std::vector<PositionSpec> positions = {PositionSpec{}};

  std::size_t cells() const { return heads.size() * ks.size() * positions.size(); }

  void validate() const {
    if (heads.empty() || ks.empty() || positions.empty()) throw ConfigError("AblationGrid axes must be nonempty");
    if (cells() > 64) throw ConfigError("AblationGrid has " + std::to_string(cells()) + " cells, limit is 64");
  }

  bool operator==(const AblationGrid&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";

  // model
  std::size_t num_blocks = 4;
  std::size_t embed_dim = 32;
  std::size_t attn_heads = 2;

  // selector
  bool selector_enabled = true;
  std::size_t selector_k = 2;
  std::size_t selector_heads = 2;
  PositionSpec selector_position;
  double selector_temperature = 1.0;
  bool selector_noise = true;

  // data (grid and id count are shared with the model)
  GenConfig data;

  // training
  TrainConfig train;

  // eval
  std::string eval_checkpoint;
  std::string eval_baseline;
  std::vector<Protocol> eval_protocols = all_protocols();

  AblationGrid ablate;

  // gradcheck
  std::size_t gradcheck_batch = 2;
  std::size_t gradcheck_coords = 4;
  double gradcheck_step = 1e-5;
  double gradcheck_tolerance = 1e-3;

  std::optional<SelectorConfig> selector_config() const {
    if (!selector_enabled) return std::nullopt;
    SelectorConfig s;
    s.k = selector_k;
    s.num_heads = selector_heads;
    s.position = selector_position.resolve(num_blocks);
    s.temperature = selector_temperature;
    s.noise_enabled = selector_noise;
    return s;
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.num_blocks = num_blocks;
    m.embed_dim = embed_dim;
    m.num_attn_heads = attn_heads;
    m.grid_rows = data.grid_rows;
    m.grid_cols = data.grid_cols;
    m.patch_dim = data.patch_dim;
    m.num_identities = data.num_ids;
    m.selector = selector_config();
    return m;
  }

  void validate() const {
    model_config().validate();
    data.validate();
    train.validate();
    ablate.validate();
    if (eval_protocols.empty()) throw ConfigError("eval.protocols must list at least one protocol");
    if (gradcheck_batch < 1 || gradcheck_coords < 1) throw ConfigError("gradcheck batch and coords must be positive");
    if (!(gradcheck_step > 0.0) || !(gradcheck_tolerance > 0.0))
      throw ConfigError("gradcheck step and tolerance must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& s) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <class T>
std::string join(const std::vector<T>& items, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + f(items[i]);
  return out;
}

/// One entry per config key: how to read it into and print it out of an
/// ExperimentConfig.
struct KeyBinding {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class T>
KeyBinding number_key(T ExperimentConfig::*field) {
  return {[field](ExperimentConfig& c, const std::string& v) { c.*field = parse_number<T>(v); },
          [field](const ExperimentConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*field);
            else return std::to_string(c.*field);
          }};
}

template <class T, class Sub>
KeyBinding nested_number_key(Sub ExperimentConfig::*outer, T Sub::*field) {
  return {[outer, field](ExperimentConfig& c, const std::string& v) { (c.*outer).*field = parse_number<T>(v); },
          [outer, field](const ExperimentConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double((c.*outer).*field);
            else return std::to_string((c.*outer).*field);
          }};
}

inline KeyBinding bool_key(bool ExperimentConfig::*field) {
  return {[field](ExperimentConfig& c, const std::string& v) { c.*field = parse_bool(v); },
          [field](const ExperimentConfig& c) { return std::string(c.*field ? "true" : "false"); }};
}

inline KeyBinding string_key(std::string ExperimentConfig::*field) {
  return {[field](ExperimentConfig& c, const std::string& v) { c.*field = v; },
          [field](const ExperimentConfig& c) { return c.*field; }};
}

template <class T>
KeyBinding list_key(std::vector<T> AblationGrid::*field, std::function<T(const std::string&)> parse,
                    std::function<std::string(const T&)> print) {
  return {[=](ExperimentConfig& c, const std::string& v) {
            std::vector<T> out;
            for (const auto& item : split_list(v)) out.push_back(parse(item));
            c.ablate.*field = std::move(out);
          },
          [=](const ExperimentConfig& c) { return join<T>(c.ablate.*field, print); }};
}

/// Key table in echo order.
inline const std::vector<std::pair<std::string, KeyBinding>>& key_table() {
  using C = ExperimentConfig;
  static const std::vector<std::pair<std::string, KeyBinding>> table = [] {
    const auto parse_size = [](const std::string& s) { return parse_number<std::size_t>(s); };
    const auto print_size = [](const std::size_t& v) { return std::to_string(v); };
    std::vector<std::pair<std::string, KeyBinding>> t = {
        {"seed", number_key(&C::seed)},
        {"output_dir", string_key(&C::output_dir)},
        {"model.num_blocks", number_key(&C::num_blocks)},
        {"model.embed_dim", number_key(&C::embed_dim)},
        {"model.attn_heads", number_key(&C::attn_heads)},
        {"selector.enabled", bool_key(&C::selector_enabled)},
        {"selector.k", number_key(&C::selector_k)},
        {"selector.heads", number_key(&C::selector_heads)},
        {"selector.position",
         {[](C& c, const std::string& v) { c.selector_position = PositionSpec::parse(v); },
          [](const C& c) { return c.selector_position.str(); }}},
        {"selector.temperature", number_key(&C::selector_temperature)},
        {"selector.noise", bool_key(&C::selector_noise)},
        {"data.num_ids", nested_number_key(&C::data, &GenConfig::num_ids)},
        {"data.samples_per_id_per_view", nested_number_key(&C::data, &GenConfig::samples_per_id_per_view)},
        {"data.test_samples_per_id_per_view", nested_number_key(&C::data, &GenConfig::test_samples_per_id_per_view)},
        {"data.grid_rows", nested_number_key(&C::data, &GenConfig::grid_rows)},
        {"data.grid_cols", nested_number_key(&C::data, &GenConfig::grid_cols)},
        {"data.patch_dim", nested_number_key(&C::data, &GenConfig::patch_dim)},
        {"data.k_sig", nested_number_key(&C::data, &GenConfig::k_sig)},
        {"data.noise_std", nested_number_key(&C::data, &GenConfig::noise_std)},
        {"data.view_offset_scale", nested_number_key(&C::data, &GenConfig::view_offset_scale)},
        {"train.epochs", nested_number_key(&C::train, &TrainConfig::epochs)},
        {"train.ids_per_batch", nested_number_key(&C::train, &TrainConfig::ids_per_batch)},
        {"train.instances_per_id", nested_number_key(&C::train, &TrainConfig::instances_per_id)},
        {"train.lr_max", nested_number_key(&C::train, &TrainConfig::lr_max)},
        {"train.lr_min", nested_number_key(&C::train, &TrainConfig::lr_min)},
        {"train.momentum", nested_number_key(&C::train, &TrainConfig::momentum)},
        {"loss.lambda_view",
         {[](C& c, const std::string& v) { c.train.weights.view = parse_number<double>(v); },
          [](const C& c) { return format_double(c.train.weights.view); }}},
        {"loss.lambda_orth",
         {[](C& c, const std::string& v) { c.train.weights.orth = parse_number<double>(v); },
          [](const C& c) { return format_double(c.train.weights.orth); }}},
        {"eval.checkpoint", string_key(&C::eval_checkpoint)},
        {"eval.baseline", string_key(&C::eval_baseline)},
        {"eval.protocols",
         {[](C& c, const std::string& v) {
            c.eval_protocols.clear();
            for (const auto& item : split_list(v)) c.eval_protocols.push_back(parse_protocol(item));
          },
          [](const C& c) { return join<Protocol>(c.eval_protocols, protocol_name); }}},
        {"ablate.heads", list_key<std::size_t>(&AblationGrid::heads, parse_size, print_size)},
        {"ablate.k", list_key<std::size_t>(&AblationGrid::ks, parse_size, print_size)},
        {"ablate.positions",
         list_key<PositionSpec>(&AblationGrid::positions, PositionSpec::parse,
                                [](const PositionSpec& p) { return p.str(); })},
        {"gradcheck.batch", number_key(&C::gradcheck_batch)},
        {"gradcheck.coords", number_key(&C::gradcheck_coords)},
        {"gradcheck.step", number_key(&C::gradcheck_step)},
        {"gradcheck.tolerance", number_key(&C::gradcheck_tolerance)},
    };
    return t;
  }();
  return table;
}

inline const KeyBinding* find_key(const std::string& key) {
  for (const auto& [name, binding] : key_table())
    if (name == key) return &binding;
  return nullptr;
}

}  // namespace detail

inline constexpr const char* kRequiredKeys[] = {"seed"};

/// Parses config text. `source` names the input in error messages.
inline ExperimentConfig parse_config(std::istream& in, const std::string& source = "config") {
  ExperimentConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(where + "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const detail::KeyBinding* binding = detail::find_key(key);
    if (!binding) throw ParseError(where + "unknown key '" + key + "'");
    if (auto it = seen.find(key); it != seen.end())
      throw ParseError(where + "duplicate key '" + key + "' (first set on line " + std::to_string(it->second) + ")");
    seen[key] = line_no;
    try {
      binding->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ParseError(where + key + ": " + e.what());
    }
  }
  for (const char* key : kRequiredKeys)
    if (!seen.count(key)) throw ParseError(source + ": missing required key '" + key + "'");
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  return parse_config(in, path);
}

/// Fully defaulted `key = value` listing; parses back to an equal config.
inline std::string echo_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [name, binding] : detail::key_table()) out += name + " = " + binding.get(cfg) + "\n";
  return out;
}

}  // namespace dtst
