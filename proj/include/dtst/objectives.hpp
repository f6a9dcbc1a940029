#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dtst/error.hpp"
#include "dtst/model.hpp"
#include "dtst/tensor.hpp"

namespace dtst {

inline constexpr double kNormFloor = 1e-12;

struct LossWeights {
  double view = 1.0;
  double orth = 1.0;

  void validate() const {
    if (!(std::isfinite(view) && view >= 0.0)) throw ConfigError("LossWeights.view must be finite and nonnegative");
    if (!(std::isfinite(orth) && orth >= 0.0)) throw ConfigError("LossWeights.orth must be finite and nonnegative");
  }
};

struct LossReport {
  double id_loss = 0.0;
  double view_loss = 0.0;
  double orth_loss = 0.0;
  double total = 0.0;
};

/// Mean negative log-likelihood of the labels under softmax(logits).
inline Tensor cross_entropy_loss(const Tensor& logits, const std::vector<std::size_t>& labels) {
  return cross_entropy(logits, labels);
}

/// Mean squared cosine between paired rows of meta and view features.
inline Tensor orthogonal_loss(const Tensor& meta, const Tensor& view) {
  Tensor cos = cosine_rows(meta, view, kNormFloor);
  return mean(mul(cos, cos));
}

inline LossReport total_loss(double id_loss, double view_loss, double orth_loss, const LossWeights& w) {
  const std::pair<const char*, double> parts[] = {{"id_loss", id_loss}, {"view_loss", view_loss}, {"orth_loss", orth_loss}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v)) throw NumericError(std::string("total_loss: non-finite ") + name);
  return {id_loss, view_loss, orth_loss, id_loss + w.view * view_loss + w.orth * orth_loss};
}

/// Differentiable losses of one forward pass plus the scalar report.
struct Objective {
  Tensor id_loss, view_loss, orth_loss, total;
  LossReport report;
};

inline Objective compute_objective(const ModelOutput& out, const Batch& batch, const LossWeights& w) {
  std::vector<std::size_t> view_labels;
  view_labels.reserve(batch.views.size());
  for (View v : batch.views) view_labels.push_back(static_cast<std::size_t>(v));
  Objective obj;
  obj.id_loss = cross_entropy_loss(out.id_logits, batch.ids);
  obj.view_loss = cross_entropy_loss(out.view_logits, view_labels);
  obj.orth_loss = orthogonal_loss(out.meta_feature, out.view_feature);
  obj.report = total_loss(obj.id_loss.item(), obj.view_loss.item(), obj.orth_loss.item(), w);
  obj.total = add(add(obj.id_loss, scale(obj.view_loss, w.view)), scale(obj.orth_loss, w.orth));
  return obj;
}

}  // namespace dtst
