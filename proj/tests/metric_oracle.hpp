#pragma once

#include <algorithm>
#include <optional>
#include <vector>

#include "dtst/retrieval.hpp"

namespace dtst::testing {

inline double cos_sim(const std::vector<double>& a, const std::vector<double>& b) {
  return cosine_similarity(a, b);
}

// Definitional oracle: the rank of gallery item i is one plus the number of
// items that beat it pairwise (higher similarity, or equal similarity and a
// lower index). No sorting is involved.
struct OracleResult {
  bool hit = false;
  std::optional<double> ap, inp;
};

inline OracleResult oracle(const LabeledEmbedding& q, const std::vector<LabeledEmbedding>& gallery) {
  const std::size_t n = gallery.size();
  std::vector<std::size_t> rank(n, 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double si = cos_sim(q.v, gallery[i].v), sj = cos_sim(q.v, gallery[j].v);
      if (sj > si || (sj == si && j < i)) ++rank[i];
    }
  std::vector<std::size_t> match_ranks;
  OracleResult r;
  for (std::size_t i = 0; i < n; ++i) {
    if (gallery[i].id == q.id) match_ranks.push_back(rank[i]);
    if (rank[i] == 1) r.hit = gallery[i].id == q.id;
  }
  if (match_ranks.empty()) return r;
  std::sort(match_ranks.begin(), match_ranks.end());
  double acc = 0.0;
  for (std::size_t k = 0; k < match_ranks.size(); ++k)
    acc += static_cast<double>(k + 1) / static_cast<double>(match_ranks[k]);
  r.ap = acc / static_cast<double>(match_ranks.size());
  r.inp = static_cast<double>(match_ranks.size()) / static_cast<double>(match_ranks.back());
  return r;
}

}  // namespace dtst::testing
