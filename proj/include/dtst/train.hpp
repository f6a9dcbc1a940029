#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "dtst/data.hpp"
#include "dtst/error.hpp"
#include "dtst/model.hpp"
#include "dtst/objectives.hpp"
#include "dtst/optim.hpp"
#include "dtst/retrieval.hpp"
#include "dtst/rng.hpp"

namespace dtst {

struct ScheduleConfig {
  double lr_max = 8e-3;
  double lr_min = 1.6e-6;
  std::size_t total_steps = 1;

  void validate() const {
    if (!(lr_max > lr_min && lr_min > 0.0)) throw ConfigError("ScheduleConfig: require lr_max > lr_min > 0");
    if (total_steps < 1) throw ConfigError("ScheduleConfig.total_steps must be at least 1");
  }
};

/// lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2, clamped to lr_min past T.
inline double cosine_lr(std::size_t step, const ScheduleConfig& cfg) {
  if (step >= cfg.total_steps) return cfg.lr_min;
  const double phase = M_PI * static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(phase));
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t ids_per_batch = 32;      // P
  std::size_t instances_per_id = 4;    // K
  double lr_max = 8e-3;
  double lr_min = 1.6e-6;
  double momentum = 0.9;
  LossWeights weights;

  std::size_t batch_size() const { return ids_per_batch * instances_per_id; }

  std::size_t steps_per_epoch(std::size_t train_size) const {
    return std::max<std::size_t>(1, (train_size + batch_size() - 1) / batch_size());
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("TrainConfig.epochs must be positive");
    if (ids_per_batch < 1 || instances_per_id < 1) throw ConfigError("TrainConfig: P and K must be positive");
    ScheduleConfig{lr_max, lr_min, 1}.validate();
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("SgdState.momentum must lie in [0, 1)");
    weights.validate();
  }
};

struct TrainLogEntry {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  LossReport loss;
};

using TrainLog = std::vector<TrainLogEntry>;

inline constexpr const char* kTrainLogHeader = "step,epoch,lr,id_loss,view_loss,orth_loss,total";

inline void write_train_log(std::ostream& os, const TrainLog& log) {
  os << kTrainLogHeader << '\n';
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.step, e.epoch, e.lr, e.loss.id_loss,
                  e.loss.view_loss, e.loss.orth_loss, e.loss.total);
    os << buf;
  }
}

/// One SGD update on the given batch; returns the loss report of the forward
/// pass that produced the gradients.
inline LossReport train_step(const ModelConfig& cfg, ModelParams& params, ParamList& named, const Batch& batch,
                             const LossWeights& weights, SgdState& sgd, Rng& rng) {
  Tape tape;
  GradientScope scope(tape);
  ForwardOptions opts;
  opts.training = true;
  opts.rng = &rng;
  ModelOutput out = model_forward(cfg, params, batch, opts);
  Objective obj = compute_objective(out, batch, weights);
  zero_grads(named);
  backward(obj.total, tape);
  sgd_step(named, sgd);
  return obj.report;
}

/// PK-sampled SGD with a per-step cosine schedule. Fully determined by the
/// seed, the configs and the initial parameters.
inline TrainLog train_run(const ModelConfig& cfg, ModelParams& params, const std::vector<Sample>& train,
                          const GenConfig& gen, const TrainConfig& tc, std::uint64_t seed) {
  Rng rng(seed);
  PkSampler sampler(train, tc.ids_per_batch, tc.instances_per_id, rng.split());
  Rng noise_rng = rng.split();
  const std::size_t per_epoch = tc.steps_per_epoch(train.size());
  const ScheduleConfig schedule{tc.lr_max, tc.lr_min, tc.epochs * per_epoch};
  SgdState sgd{tc.lr_max, tc.momentum, {}};
  ParamList named = params.named();

  TrainLog log;
  log.reserve(schedule.total_steps);
  for (std::size_t step = 0; step < schedule.total_steps; ++step) {
    sgd.learning_rate = cosine_lr(step, schedule);
    const Batch batch = make_batch(train, sampler.next(), gen);
    LossReport rep;
    try {
      rep = train_step(cfg, params, named, batch, tc.weights, sgd, noise_rng);
    } catch (const NumericError& e) {
      throw NumericError("training step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(rep.total)) throw NumericError("training step " + std::to_string(step) + ": non-finite loss");
    log.push_back({step, step / per_epoch, sgd.learning_rate, rep});
  }
  return log;
}

/// Inference-mode meta features (noise off, hard top-K) for every sample.
inline std::vector<LabeledEmbedding> embed_samples(const ModelConfig& cfg, const ModelParams& params,
                                                   const std::vector<Sample>& samples, const GenConfig& gen,
                                                   std::size_t chunk = 128) {
  NoGradScope no_grad;
  std::vector<LabeledEmbedding> out;
  out.reserve(samples.size());
  const std::size_t d = cfg.embed_dim;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(samples.size(), start + chunk); ++i) idx.push_back(i);
    const Batch batch = make_batch(samples, idx, gen);
    const ModelOutput fwd = model_forward(cfg, params, batch);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      LabeledEmbedding e;
      e.v.assign(fwd.meta_feature.data().begin() + r * d, fwd.meta_feature.data().begin() + (r + 1) * d);
      e.id = samples[idx[r]].id;
      e.view = samples[idx[r]].view;
      out.push_back(std::move(e));
    }
  }
  return out;
}

/// Mean |cos(meta, view)| of the inference-mode features.
inline double mean_abs_meta_view_cosine(const ModelConfig& cfg, const ModelParams& params,
                                        const std::vector<Sample>& samples, const GenConfig& gen) {
  NoGradScope no_grad;
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const ModelOutput fwd = model_forward(cfg, params, make_batch(samples, idx, gen));
  const Tensor cos = cosine_rows(fwd.meta_feature, fwd.view_feature, kNormFloor);
  double acc = 0.0;
  for (double c : cos.data()) acc += std::abs(c);
  return acc / static_cast<double>(cos.numel());
}

}  // namespace dtst
