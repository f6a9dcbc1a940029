#pragma once

// Synthetic cross-view re-identification data with identity evidence planted
// in a few grid cells, PK identity-balanced batching and the newline-delimited
// record format shared by dataset and embedding exports.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dtst/backbone.hpp"
#include "dtst/base64.hpp"
#include "dtst/error.hpp"
#include "dtst/model.hpp"
#include "dtst/rng.hpp"

namespace dtst {

struct Sample {
  std::vector<double> x;  // [rows, cols, patch_dim] row-major
  std::size_t id = 0;
  View view = View::Aerial;
  std::vector<std::size_t> signal_slots;  // ascending grid indices
};

struct GenConfig {
  std::size_t num_ids = 32;
  std::size_t samples_per_id_per_view = 8;
  std::size_t test_samples_per_id_per_view = 4;
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  std::size_t patch_dim = 8;
  std::size_t k_sig = 3;
  double noise_std = 0.3;
  double view_offset_scale = 1.0;
  std::uint64_t seed = 0;

  std::size_t num_cells() const { return grid_rows * grid_cols; }

  void validate() const {
    if (num_ids < 1 || samples_per_id_per_view < 1 || test_samples_per_id_per_view < 1 || grid_rows < 1 ||
        grid_cols < 1 || patch_dim < 1 || k_sig < 1)
      throw ConfigError("GenConfig: counts and extents must be positive");
    if (k_sig >= num_cells())
      throw ConfigError("GenConfig.k_sig=" + std::to_string(k_sig) + " must be below M=" + std::to_string(num_cells()));
    if (!(noise_std > 0.0) || !(view_offset_scale > 0.0))
      throw ConfigError("GenConfig: noise_std and view_offset_scale must be positive");
  }
};

struct SyntheticDataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
  std::vector<std::vector<double>> prototypes;    // [num_ids][patch_dim]
  std::vector<std::vector<double>> view_offsets;  // [2][patch_dim]
};

namespace detail {

inline std::vector<std::size_t> choose_distinct(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(n - i)]);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline std::vector<Sample> draw_samples(const GenConfig& cfg, const SyntheticDataset& world, std::size_t per_cell,
                                        Rng& rng) {
  const std::size_t m = cfg.num_cells(), pd = cfg.patch_dim;
  std::vector<Sample> out;
  out.reserve(cfg.num_ids * 2 * per_cell);
  for (std::size_t id = 0; id < cfg.num_ids; ++id)
    for (std::size_t v = 0; v < 2; ++v)
      for (std::size_t s = 0; s < per_cell; ++s) {
        Sample smp;
        smp.id = id;
        smp.view = view_from_index(v);
        smp.signal_slots = choose_distinct(m, cfg.k_sig, rng);
        smp.x.resize(m * pd);
        std::size_t next_signal = 0;
        for (std::size_t cell = 0; cell < m; ++cell) {
          const bool signal = next_signal < smp.signal_slots.size() && smp.signal_slots[next_signal] == cell;
          if (signal) ++next_signal;
          for (std::size_t c = 0; c < pd; ++c)
            smp.x[cell * pd + c] = signal ? world.prototypes[id][c] + world.view_offsets[v][c] + rng.normal(0.0, cfg.noise_std)
                                          : rng.normal();
        }
        out.push_back(std::move(smp));
      }
  return out;
}

}  // namespace detail

/// Training and held-out samples. Both splits share the identity prototypes
/// and view offsets; the held-out split uses its own noise stream.
inline SyntheticDataset generate(const GenConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  SyntheticDataset ds;
  ds.prototypes.assign(cfg.num_ids, std::vector<double>(cfg.patch_dim));
  for (auto& p : ds.prototypes)
    for (auto& v : p) v = rng.normal();
  ds.view_offsets.assign(2, std::vector<double>(cfg.patch_dim));
  for (auto& o : ds.view_offsets)
    for (auto& v : o) v = rng.normal(0.0, cfg.view_offset_scale);
  Rng train_rng = rng.split();
  Rng test_rng = rng.split();
  ds.train = detail::draw_samples(cfg, ds, cfg.samples_per_id_per_view, train_rng);
  ds.test = detail::draw_samples(cfg, ds, cfg.test_samples_per_id_per_view, test_rng);
  return ds;
}

inline std::vector<Sample> generate_dataset(const GenConfig& cfg) { return generate(cfg).train; }

inline Batch make_batch(const std::vector<Sample>& data, const std::vector<std::size_t>& indices, const GenConfig& g) {
  const std::size_t per = g.num_cells() * g.patch_dim;
  std::vector<double> grid;
  grid.reserve(indices.size() * per);
  Batch batch;
  for (auto i : indices) {
    const Sample& s = data.at(i);
    if (s.x.size() != per) throw DimensionError("make_batch: sample feature size does not match the grid");
    grid.insert(grid.end(), s.x.begin(), s.x.end());
    batch.ids.push_back(s.id);
    batch.views.push_back(s.view);
  }
  batch.grids = Tensor::from({indices.size(), g.grid_rows, g.grid_cols, g.patch_dim}, std::move(grid));
  return batch;
}

// ---------------------------------------------------------------------------
// PK sampling
// ---------------------------------------------------------------------------

inline std::map<std::size_t, std::vector<std::size_t>> group_by_identity(const std::vector<Sample>& data) {
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < data.size(); ++i) groups[data[i].id].push_back(i);
  return groups;
}

/// Emits batches of P distinct identities x K instances. Identities are
/// consumed from a shuffled permutation, so every P consecutive batches of an
/// epoch partition the identity set when P divides it.
class PkSampler {
 public:
  PkSampler(const std::vector<Sample>& data, std::size_t p, std::size_t k, Rng rng)
      : p_(p), k_(k), rng_(rng) {
    if (p == 0 || k == 0) throw SamplingError("pk_batch: P and K must be positive");
    for (auto& [id, members] : group_by_identity(data))
      if (members.size() >= k) groups_.push_back(std::move(members));
    if (groups_.size() < p)
      throw SamplingError("pk_batch: need " + std::to_string(p) + " identities with at least " + std::to_string(k) +
                          " samples, found " + std::to_string(groups_.size()));
  }

  std::vector<std::size_t> next() {
    if (queue_.size() - cursor_ < p_) {
      queue_.resize(groups_.size());
      std::iota(queue_.begin(), queue_.end(), std::size_t{0});
      for (std::size_t i = queue_.size(); i > 1; --i) std::swap(queue_[i - 1], queue_[rng_.below(i)]);
      cursor_ = 0;
    }
    std::vector<std::size_t> batch;
    batch.reserve(p_ * k_);
    for (std::size_t j = 0; j < p_; ++j) {
      const auto& members = groups_[queue_[cursor_++]];
      for (auto pick : detail::choose_distinct(members.size(), k_, rng_)) batch.push_back(members[pick]);
    }
    return batch;
  }

 private:
  std::size_t p_, k_;
  Rng rng_;
  std::vector<std::vector<std::size_t>> groups_;
  std::vector<std::size_t> queue_;
  std::size_t cursor_ = 0;
};

/// One PK batch of sample indices.
inline std::vector<std::size_t> pk_batch(const std::vector<Sample>& data, std::size_t p, std::size_t k, Rng& rng) {
  PkSampler sampler(data, p, k, rng.split());
  return sampler.next();
}

// ---------------------------------------------------------------------------
// Record format: one line per item, space separated key=value fields.
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> parse_record(const std::string& line, std::size_t line_no) {
  std::map<std::string, std::string> fields;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ParseError("record line " + std::to_string(line_no) + ": malformed field '" + tok + "'");
    fields[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return fields;
}

inline const std::string& require_field(const std::map<std::string, std::string>& f, const std::string& key,
                                        std::size_t line_no) {
  auto it = f.find(key);
  if (it == f.end()) throw ParseError("record line " + std::to_string(line_no) + ": missing field '" + key + "'");
  return it->second;
}

inline std::size_t parse_index(const std::string& s, std::size_t line_no) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || s[0] == '-')
    throw ParseError("record line " + std::to_string(line_no) + ": expected a nonnegative integer, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

/// `id=<y> view=<aerial|ground> slots=<i,j,...> shape=<r>x<c>x<p> data=<base64 f64 LE>`
inline void write_dataset(std::ostream& os, const std::vector<Sample>& data, const GenConfig& g) {
  for (const auto& s : data) {
    os << "id=" << s.id << " view=" << view_name(s.view) << " slots=";
    for (std::size_t i = 0; i < s.signal_slots.size(); ++i) os << (i ? "," : "") << s.signal_slots[i];
    os << " shape=" << g.grid_rows << 'x' << g.grid_cols << 'x' << g.patch_dim << " data=" << base64::encode_doubles(s.x)
       << '\n';
  }
}

inline std::vector<Sample> read_dataset(std::istream& is) {
  std::vector<Sample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto f = parse_record(line, line_no);
    Sample s;
    s.id = parse_index(require_field(f, "id", line_no), line_no);
    s.view = parse_view(require_field(f, "view", line_no));
    std::istringstream slots(require_field(f, "slots", line_no));
    for (std::string part; std::getline(slots, part, ',');) s.signal_slots.push_back(parse_index(part, line_no));
    std::istringstream shape(require_field(f, "shape", line_no));
    std::size_t expect = 1;
    for (std::string part; std::getline(shape, part, 'x');) expect *= parse_index(part, line_no);
    s.x = base64::decode_doubles(require_field(f, "data", line_no));
    if (s.x.size() != expect)
      throw ParseError("record line " + std::to_string(line_no) + ": payload has " + std::to_string(s.x.size()) +
                       " values, shape implies " + std::to_string(expect));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dtst
