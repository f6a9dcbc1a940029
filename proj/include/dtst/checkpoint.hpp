#pragma once

// Parameter checkpoints: a newline-delimited text manifest (embedded config,
// then one `param <name> <shape>` line per tensor, then `end`) followed by the
// parameter values as raw little-endian float64 in manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dtst/config.hpp"
#include "dtst/error.hpp"
#include "dtst/model.hpp"
#include "dtst/optim.hpp"
#include "dtst/rng.hpp"

namespace dtst {

inline constexpr const char* kCheckpointMagic = "dtst-checkpoint 1";

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string config_text;  // echo_config output of the producing run
  std::vector<CheckpointEntry> entries;
};

namespace detail {

inline void put_le_double(std::ostream& os, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  os.write(bytes, 8);
}

inline double get_le_double(std::istream& is) {
  unsigned char bytes[8];
  if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw ParseError("checkpoint: payload truncated");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out.empty() ? "scalar" : out;
}

inline Shape parse_shape_token(const std::string& tok, std::size_t line_no) {
  if (tok == "scalar") return {};
  Shape s;
  std::stringstream ss(tok);
  std::string part;
  while (std::getline(ss, part, 'x')) s.push_back(parse_index(part, line_no));
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::string& config_text, const ParamList& params) {
  os << kCheckpointMagic << '\n';
  std::istringstream cfg(config_text);
  for (std::string line; std::getline(cfg, line);) os << "config " << line << '\n';
  for (const auto& p : params) os << "param " << p.name << ' ' << detail::shape_token(p.tensor.shape()) << '\n';
  os << "end\n";
  for (const auto& p : params)
    for (double v : p.tensor.data()) detail::put_le_double(os, v);
}

inline Checkpoint read_checkpoint(std::istream& is) {
  Checkpoint ck;
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) throw ParseError("checkpoint: bad magic line");
  std::size_t line_no = 1;
  bool ended = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line == "end") {
      ended = true;
      break;
    }
    if (line.rfind("config ", 0) == 0) {
      ck.config_text += line.substr(7) + "\n";
    } else if (line.rfind("param ", 0) == 0) {
      std::istringstream ls(line.substr(6));
      CheckpointEntry e;
      std::string shape;
      if (!(ls >> e.name >> shape)) throw ParseError("checkpoint line " + std::to_string(line_no) + ": malformed param");
      e.shape = detail::parse_shape_token(shape, line_no);
      ck.entries.push_back(std::move(e));
    } else {
      throw ParseError("checkpoint line " + std::to_string(line_no) + ": unexpected '" + line + "'");
    }
  }
  if (!ended) throw ParseError("checkpoint: manifest has no end marker");
  for (auto& e : ck.entries) {
    e.values.resize(shape_numel(e.shape));
    for (auto& v : e.values) v = detail::get_le_double(is);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw ParseError("checkpoint: trailing bytes after payload");
  return ck;
}

inline void save_checkpoint(const std::string& path, const std::string& config_text, const ParamList& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint '" + path + "'");
  write_checkpoint(os, config_text, params);
  if (!os) throw IoError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(is);
}

/// Copies checkpoint values into `params`, matching names and shapes exactly.
inline void restore_params(const Checkpoint& ck, ParamList& params) {
  if (ck.entries.size() != params.size())
    throw ContractError("checkpoint holds " + std::to_string(ck.entries.size()) + " tensors, model expects " +
                        std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = ck.entries[i];
    auto& p = params[i];
    if (e.name != p.name || e.shape != p.tensor.shape())
      throw ContractError("checkpoint tensor " + e.name + " " + shape_str(e.shape) + " does not match " + p.name +
                          " " + shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    std::copy(e.values.begin(), e.values.end(), dst.begin());
  }
}

/// Rebuilds the model described by the checkpoint's embedded config.
inline std::pair<ExperimentConfig, ModelParams> model_from_checkpoint(const Checkpoint& ck) {
  std::istringstream cfg_in(ck.config_text);
  ExperimentConfig cfg = parse_config(cfg_in, "checkpoint config");
  cfg.validate();
  Rng rng(0);
  ModelParams params = init_model(cfg.model_config(), rng);
  ParamList named = params.named();
  restore_params(ck, named);
  return {cfg, params};
}

}  // namespace dtst
