#pragma once

// Experiment runners behind the command-line tool: train, eval, ablate and
// gradcheck, each writing its artifacts under the configured output directory.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtst/checkpoint.hpp"
#include "dtst/config.hpp"
#include "dtst/data.hpp"
#include "dtst/error.hpp"
#include "dtst/model.hpp"
#include "dtst/objectives.hpp"
#include "dtst/retrieval.hpp"
#include "dtst/rng.hpp"
#include "dtst/train.hpp"

namespace dtst {

/// Independent streams derived from the master seed. Every run with the same
/// master seed sees the same data and the same initial weights.
struct RunSeeds {
  std::uint64_t data = 0;
  std::uint64_t init = 0;
  std::uint64_t train = 0;
};

inline RunSeeds derive_seeds(std::uint64_t seed) {
  Rng root(seed);
  RunSeeds s;
  s.data = root.next_u64();
  s.init = root.next_u64();
  s.train = root.next_u64();
  return s;
}

inline GenConfig gen_config(const ExperimentConfig& cfg) {
  GenConfig g = cfg.data;
  g.seed = derive_seeds(cfg.seed).data;
  return g;
}

struct TrainOutcome {
  ModelConfig model;
  ModelParams params;
  TrainLog log;
  std::vector<RetrievalReport> reports;  // test split, one per configured protocol
  std::vector<LabeledEmbedding> test_embeddings;
  double mean_abs_cos = 0.0;  // |cos(meta, view)| over the test split
};

inline std::vector<RetrievalReport> evaluate_all(const std::vector<LabeledEmbedding>& pool,
                                                 const std::vector<Protocol>& protocols) {
  std::vector<RetrievalReport> out;
  for (Protocol p : protocols) out.push_back(evaluate_protocol(pool, p));
  return out;
}

/// Trains on an already generated dataset (lets ablation cells share data).
inline TrainOutcome train_on(const ExperimentConfig& cfg, const SyntheticDataset& data) {
  cfg.validate();
  const RunSeeds seeds = derive_seeds(cfg.seed);
  const GenConfig gen = gen_config(cfg);
  TrainOutcome out;
  out.model = cfg.model_config();
  Rng init_rng(seeds.init);
  out.params = init_model(out.model, init_rng);
  out.log = train_run(out.model, out.params, data.train, gen, cfg.train, seeds.train);
  out.test_embeddings = embed_samples(out.model, out.params, data.test, gen);
  out.reports = evaluate_all(out.test_embeddings, cfg.eval_protocols);
  out.mean_abs_cos = mean_abs_meta_view_cosine(out.model, out.params, data.test, gen);
  return out;
}

inline TrainOutcome train_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  return train_on(cfg, generate(gen_config(cfg)));
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

namespace detail {

inline std::ofstream open_output(const std::filesystem::path& path, bool binary = false) {
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  return os;
}

inline std::filesystem::path prepare_output_dir(const ExperimentConfig& cfg) {
  std::filesystem::path dir(cfg.output_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  auto os = open_output(dir / "config.txt");
  os << echo_config(cfg);
  return dir;
}

inline void write_reports(std::ostream& os, const std::vector<RetrievalReport>& reports, const std::string& model) {
  for (const auto& r : reports) {
    nlohmann::json j = report_to_json(r);
    j["model"] = model;
    os << j.dump() << '\n';
  }
}

}  // namespace detail

/// Reads the JSON-lines report file back, keeping the `model` tag.
inline std::vector<std::pair<std::string, RetrievalReport>> read_reports(std::istream& is) {
  std::vector<std::pair<std::string, RetrievalReport>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("report line " + std::to_string(line_no) + ": " + e.what());
    }
    if (j.value("model", "") == "difference") continue;
    out.emplace_back(j.value("model", ""), report_from_json(j));
  }
  return out;
}

namespace detail {

inline std::vector<std::string> csv_fields(const std::string& line, std::size_t expected, std::size_t line_no,
                                           const char* what) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  for (std::string item; std::getline(ss, item, ',');) f.push_back(item);
  if (f.size() != expected)
    throw ParseError(std::string(what) + " line " + std::to_string(line_no) + ": expected " +
                     std::to_string(expected) + " fields, got " + std::to_string(f.size()));
  return f;
}

}  // namespace detail

inline TrainLog read_train_log(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kTrainLogHeader) throw ParseError("train log: bad header");
  TrainLog log;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::csv_fields(line, 7, line_no, "train log");
    try {
      TrainLogEntry e;
      e.step = detail::parse_number<std::size_t>(f[0]);
      e.epoch = detail::parse_number<std::size_t>(f[1]);
      e.lr = detail::parse_number<double>(f[2]);
      e.loss = {detail::parse_number<double>(f[3]), detail::parse_number<double>(f[4]),
                detail::parse_number<double>(f[5]), detail::parse_number<double>(f[6])};
      log.push_back(e);
    } catch (const ConfigError& e) {
      throw ParseError("train log line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// train: config.txt, checkpoint.bin, train_log.csv, report.jsonl and
/// embeddings.txt (test split).
inline TrainOutcome run_train(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto dir = detail::prepare_output_dir(cfg);
  TrainOutcome out = train_experiment(cfg);
  save_checkpoint((dir / "checkpoint.bin").string(), echo_config(cfg), out.params.named());
  {
    auto os = detail::open_output(dir / "train_log.csv");
    write_train_log(os, out.log);
  }
  {
    auto os = detail::open_output(dir / "report.jsonl");
    detail::write_reports(os, out.reports, "trained");
  }
  {
    auto os = detail::open_output(dir / "embeddings.txt");
    write_embeddings(os, out.test_embeddings);
  }
  log << "trained " << out.log.size() << " steps, final loss " << out.log.back().loss.total << '\n';
  for (const auto& r : out.reports)
    log << "  " << r.protocol << ": rank1=" << r.rank1 << " mAP=" << r.mAP << " mINP=" << r.mINP << '\n';
  return out;
}

/// Difference record candidate - baseline for one protocol.
inline nlohmann::json comparison_record(const RetrievalReport& candidate, const RetrievalReport& baseline) {
  if (candidate.protocol != baseline.protocol) throw ContractError("comparison across different protocols");
  return {{"model", "difference"},
          {"protocol", candidate.protocol},
          {"rank1", candidate.rank1 - baseline.rank1},
          {"mAP", candidate.mAP - baseline.mAP},
          {"mINP", candidate.mINP - baseline.mINP}};
}

struct EvalOutcome {
  std::vector<RetrievalReport> candidate;
  std::vector<RetrievalReport> baseline;  // empty without eval.baseline
};

/// eval: scores eval.checkpoint (and eval.baseline when set) on the test split
/// regenerated from the checkpoint's own configuration.
inline EvalOutcome run_eval(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  if (cfg.eval_checkpoint.empty()) throw ConfigError("eval needs eval.checkpoint");
  const auto dir = detail::prepare_output_dir(cfg);

  auto [cand_cfg, cand_params] = model_from_checkpoint(load_checkpoint(cfg.eval_checkpoint));
  const GenConfig gen = gen_config(cand_cfg);
  const SyntheticDataset data = generate(gen);
  auto score = [&](const ExperimentConfig& mcfg, const ModelParams& params) {
    return evaluate_all(embed_samples(mcfg.model_config(), params, data.test, gen), cfg.eval_protocols);
  };

  EvalOutcome out;
  out.candidate = score(cand_cfg, cand_params);
  auto os = detail::open_output(dir / "report.jsonl");
  detail::write_reports(os, out.candidate, "candidate");
  if (!cfg.eval_baseline.empty()) {
    auto [base_cfg, base_params] = model_from_checkpoint(load_checkpoint(cfg.eval_baseline));
    if (gen_config(base_cfg).seed != gen.seed || base_cfg.data.num_ids != gen.num_ids ||
        base_cfg.data.grid_rows != gen.grid_rows || base_cfg.data.grid_cols != gen.grid_cols ||
        base_cfg.data.patch_dim != gen.patch_dim)
      throw ContractError("eval: baseline checkpoint was trained on different data than the candidate");
    out.baseline = score(base_cfg, base_params);
    detail::write_reports(os, out.baseline, "baseline");
    for (std::size_t i = 0; i < out.candidate.size(); ++i)
      os << comparison_record(out.candidate[i], out.baseline[i]).dump() << '\n';
  }
  for (std::size_t i = 0; i < out.candidate.size(); ++i) {
    const auto& r = out.candidate[i];
    log << r.protocol << ": rank1=" << r.rank1 << " mAP=" << r.mAP << " mINP=" << r.mINP;
    if (!out.baseline.empty()) log << " (baseline rank1=" << out.baseline[i].rank1 << ")";
    log << '\n';
  }
  return out;
}

struct AblationRow {
  std::size_t heads = 0;
  std::size_t k = 0;
  PositionSpec position;
  double rank1 = 0.0, mAP = 0.0, mINP = 0.0;
};

inline constexpr const char* kAblationHeader = "heads,K,position,rank1,mAP,mINP";

inline void write_ablation(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << kAblationHeader << '\n';
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g\n", r.rank1, r.mAP, r.mINP);
    os << r.heads << ',' << r.k << ',' << r.position.str() << buf;
  }
}

inline std::vector<AblationRow> read_ablation(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kAblationHeader) throw ParseError("ablation csv: bad header");
  std::vector<AblationRow> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split_list(line);
    if (f.size() != 6) throw ParseError("ablation csv line " + std::to_string(line_no) + ": expected 6 fields");
    try {
      rows.push_back({detail::parse_number<std::size_t>(f[0]), detail::parse_number<std::size_t>(f[1]),
                      PositionSpec::parse(f[2]), detail::parse_number<double>(f[3]),
                      detail::parse_number<double>(f[4]), detail::parse_number<double>(f[5])});
    } catch (const ConfigError& e) {
      throw ParseError("ablation csv line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

/// Expands the grid in heads-major, then K, then position order.
inline std::vector<ExperimentConfig> ablation_cells(const ExperimentConfig& cfg) {
  cfg.ablate.validate();
  std::vector<ExperimentConfig> cells;
  for (auto h : cfg.ablate.heads)
    for (auto k : cfg.ablate.ks)
      for (const auto& p : cfg.ablate.positions) {
        ExperimentConfig c = cfg;
        c.selector_enabled = true;
        c.selector_heads = h;
        c.selector_k = k;
        c.selector_position = p;
        c.eval_protocols = {Protocol::AerialGround};
        cells.push_back(std::move(c));
      }
  for (const auto& c : cells) c.validate();
  return cells;
}

/// ablate: one A<->G row per grid cell; every cell shares the data and the
/// initial weights of the master seed.
inline std::vector<AblationRow> run_ablate(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto cells = ablation_cells(cfg);
  const auto dir = detail::prepare_output_dir(cfg);
  const SyntheticDataset data = generate(gen_config(cfg));
  std::vector<AblationRow> rows;
  for (const auto& c : cells) {
    const TrainOutcome t = train_on(c, data);
    const auto& r = t.reports.front();
    rows.push_back({c.selector_heads, c.selector_k, c.selector_position, r.rank1, r.mAP, r.mINP});
    log << "heads=" << c.selector_heads << " K=" << c.selector_k << " position=" << c.selector_position.str()
        << ": rank1=" << r.rank1 << '\n';
  }
  auto os = detail::open_output(dir / "ablation.csv");
  write_ablation(os, rows);
  return rows;
}

struct GradcheckRow {
  std::string group;
  std::size_t coords = 0;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  bool pass = false;
};

inline constexpr double kGradcheckFloor = 1e-6;

/// Finite-difference check of d(total loss)/d(parameter) for every parameter
/// group. The selector decisions of a training-mode forward are frozen, so the
/// checked function is the smooth straight-through surrogate.
inline std::vector<GradcheckRow> gradcheck_model(const ExperimentConfig& cfg) {
  cfg.validate();
  const RunSeeds seeds = derive_seeds(cfg.seed);
  const GenConfig gen = gen_config(cfg);
  const SyntheticDataset data = generate(gen);
  if (cfg.gradcheck_batch > data.train.size()) throw ConfigError("gradcheck.batch exceeds the training split");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < cfg.gradcheck_batch; ++i) idx.push_back(i * (data.train.size() / cfg.gradcheck_batch));
  const Batch batch = make_batch(data.train, idx, gen);

  const ModelConfig mc = cfg.model_config();
  Rng init_rng(seeds.init);
  ModelParams params = init_model(mc, init_rng);
  ParamList named = params.named();

  Rng noise_rng(seeds.train);
  std::optional<FrozenSelection> frozen;
  {
    NoGradScope no_grad;
    ForwardOptions opts;
    opts.training = true;
    opts.rng = &noise_rng;
    frozen = freeze_selection(model_forward(mc, params, batch, opts));
  }
  ForwardOptions fixed;
  fixed.training = true;
  fixed.frozen = frozen ? &*frozen : nullptr;
  auto loss_value = [&]() {
    NoGradScope no_grad;
    return compute_objective(model_forward(mc, params, batch, fixed), batch, cfg.train.weights).total.item();
  };

  {
    Tape tape;
    GradientScope scope(tape);
    Objective obj = compute_objective(model_forward(mc, params, batch, fixed), batch, cfg.train.weights);
    zero_grads(named);
    backward(obj.total, tape);
  }

  Rng pick(seeds.train ^ 0x5bd1e995u);
  std::vector<GradcheckRow> rows;
  for (auto& p : named) {
    GradcheckRow row{p.name, 0, 0.0, 0.0, true};
    const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    auto w = p.tensor.mutable_data();
    const std::size_t n = std::min(cfg.gradcheck_coords, w.size());
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t i = n == w.size() ? c : static_cast<std::size_t>(pick.below(w.size()));
      const double orig = w[i];
      w[i] = orig + cfg.gradcheck_step;
      const double up = loss_value();
      w[i] = orig - cfg.gradcheck_step;
      const double down = loss_value();
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * cfg.gradcheck_step);
      const double abs_err = std::abs(numeric - analytic[i]);
      const double rel_err = abs_err / std::max({std::abs(numeric), std::abs(analytic[i]), kGradcheckFloor});
      row.max_abs_err = std::max(row.max_abs_err, abs_err);
      row.max_rel_err = std::max(row.max_rel_err, rel_err);
      ++row.coords;
    }
    row.pass = row.max_rel_err < cfg.gradcheck_tolerance;
    rows.push_back(row);
  }
  return rows;
}

inline constexpr const char* kGradcheckHeader = "group,coords,max_abs_err,max_rel_err,status";

inline void write_gradcheck(std::ostream& os, const std::vector<GradcheckRow>& rows) {
  os << kGradcheckHeader << '\n';
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%zu,%.6e,%.6e,%s\n", r.coords, r.max_abs_err, r.max_rel_err,
                  r.pass ? "pass" : "fail");
    os << r.group << buf;
  }
}

inline std::vector<GradcheckRow> read_gradcheck(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kGradcheckHeader) throw ParseError("gradcheck csv: bad header");
  std::vector<GradcheckRow> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::csv_fields(line, 5, line_no, "gradcheck csv");
    if (f[4] != "pass" && f[4] != "fail")
      throw ParseError("gradcheck csv line " + std::to_string(line_no) + ": status must be pass or fail");
    try {
      rows.push_back({f[0], detail::parse_number<std::size_t>(f[1]), detail::parse_number<double>(f[2]),
                      detail::parse_number<double>(f[3]), f[4] == "pass"});
    } catch (const ConfigError& e) {
      throw ParseError("gradcheck csv line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

/// gradcheck: gradcheck.csv; throws NumericError when any group fails.
inline std::vector<GradcheckRow> run_gradcheck(const ExperimentConfig& cfg, std::ostream& log) {
  const auto dir = detail::prepare_output_dir(cfg);
  const auto rows = gradcheck_model(cfg);
  {
    auto os = detail::open_output(dir / "gradcheck.csv");
    write_gradcheck(os, rows);
  }
  write_gradcheck(log, rows);
  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.pass ? 0 : 1;
  if (failed)
    throw NumericError("gradcheck: " + std::to_string(failed) + " of " + std::to_string(rows.size()) +
                       " parameter groups exceed rel. err " + detail::format_double(cfg.gradcheck_tolerance));
  return rows;
}

}  // namespace dtst
