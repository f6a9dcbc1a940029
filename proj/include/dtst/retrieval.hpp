#pragma once

// Cosine-similarity retrieval and the Rank-1 / mAP / mINP metrics under the
// aerial/ground view protocols.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtst/backbone.hpp"
#include "dtst/base64.hpp"
#include "dtst/data.hpp"
#include "dtst/error.hpp"

namespace dtst {

struct LabeledEmbedding {
  std::vector<double> v;
  std::size_t id = 0;
  View view = View::Aerial;
};

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::max(std::sqrt(na), 1e-12) * std::max(std::sqrt(nb), 1e-12));
}

/// Gallery order by descending cosine similarity (ties: lower index first).
inline std::vector<std::size_t> gallery_order(const LabeledEmbedding& query,
                                              const std::vector<const LabeledEmbedding*>& gallery) {
  std::vector<double> sim(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    if (gallery[i]->v.size() != query.v.size())
      throw DimensionError("rank_gallery: query width " + std::to_string(query.v.size()) + " vs gallery width " +
                           std::to_string(gallery[i]->v.size()));
    sim[i] = cosine_similarity(query.v, gallery[i]->v);
  }
  std::vector<std::size_t> order(gallery.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  return order;
}

/// Match flags of the ranked gallery (true where the identity agrees).
inline std::vector<bool> rank_gallery(const LabeledEmbedding& query, const std::vector<const LabeledEmbedding*>& gallery) {
  std::vector<bool> flags;
  for (auto i : gallery_order(query, gallery)) flags.push_back(gallery[i]->id == query.id);
  return flags;
}

inline std::vector<bool> rank_gallery(const LabeledEmbedding& query, const std::vector<LabeledEmbedding>& gallery) {
  std::vector<const LabeledEmbedding*> ptrs;
  for (const auto& g : gallery) ptrs.push_back(&g);
  return rank_gallery(query, ptrs);
}

/// (1/|G|) * sum over match ranks r of precision@r; nullopt without matches.
inline std::optional<double> average_precision(const std::vector<bool>& flags) {
  std::size_t hits = 0;
  double acc = 0.0;
  for (std::size_t r = 0; r < flags.size(); ++r)
    if (flags[r]) acc += static_cast<double>(++hits) / static_cast<double>(r + 1);
  if (hits == 0) return std::nullopt;
  return acc / static_cast<double>(hits);
}

/// |G| / (1-based rank of the last match); nullopt without matches.
inline std::optional<double> inverse_negative_penalty(const std::vector<bool>& flags) {
  std::size_t hits = 0, hardest = 0;
  for (std::size_t r = 0; r < flags.size(); ++r)
    if (flags[r]) {
      ++hits;
      hardest = r + 1;
    }
  if (hits == 0) return std::nullopt;
  return static_cast<double>(hits) / static_cast<double>(hardest);
}

enum class Protocol { All, AerialAerial, GroundGround, AerialGround, AerialToGround, GroundToAerial };

inline const std::vector<Protocol>& all_protocols() {
  static const std::vector<Protocol> v = {Protocol::All, Protocol::GroundGround, Protocol::AerialAerial,
                                          Protocol::AerialGround, Protocol::AerialToGround, Protocol::GroundToAerial};
  return v;
}

inline std::string protocol_name(Protocol p) {
  switch (p) {
    case Protocol::All: return "ALL";
    case Protocol::AerialAerial: return "A<->A";
    case Protocol::GroundGround: return "G<->G";
    case Protocol::AerialGround: return "A<->G";
    case Protocol::AerialToGround: return "A->G";
    case Protocol::GroundToAerial: return "G->A";
  }
  return "?";
}

inline Protocol parse_protocol(const std::string& s) {
  for (auto p : all_protocols())
    if (protocol_name(p) == s) return p;
  throw DomainError("unknown protocol '" + s + "'");
}

struct RetrievalReport {
  std::string protocol;
  double rank1 = 0.0;
  double mAP = 0.0;
  double mINP = 0.0;
  std::vector<double> ap;
  std::vector<double> inp;
  std::vector<double> hit;  // 1 when the top-ranked gallery item matches
  std::size_t excluded_queries = 0;

  std::size_t num_queries() const { return ap.size(); }
};

namespace detail {

struct Direction {
  std::optional<View> query_view;
  std::optional<View> gallery_view;
};

inline std::vector<Direction> directions(Protocol p) {
  switch (p) {
    case Protocol::All: return {{std::nullopt, std::nullopt}};
    case Protocol::AerialAerial: return {{View::Aerial, View::Aerial}};
    case Protocol::GroundGround: return {{View::Ground, View::Ground}};
    case Protocol::AerialGround: return {{View::Aerial, View::Ground}, {View::Ground, View::Aerial}};
    case Protocol::AerialToGround: return {{View::Aerial, View::Ground}};
    case Protocol::GroundToAerial: return {{View::Ground, View::Aerial}};
  }
  return {};
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

/// Scores each query against its gallery and aggregates. Queries without any
/// gallery match are excluded and counted.
inline void score_queries(const std::vector<const LabeledEmbedding*>& queries,
                          const std::vector<std::vector<const LabeledEmbedding*>>& galleries, RetrievalReport& report) {
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto flags = rank_gallery(*queries[q], galleries[q]);
    const auto ap = average_precision(flags);
    if (!ap) {
      ++report.excluded_queries;
      continue;
    }
    report.ap.push_back(*ap);
    report.inp.push_back(*inverse_negative_penalty(flags));
    report.hit.push_back(flags.front() ? 1.0 : 0.0);
  }
}

inline void finalize_report(RetrievalReport& report) {
  if (report.ap.empty())
    throw ProtocolError("protocol " + report.protocol + ": no query has a matching gallery item");
  report.rank1 = detail::mean_of(report.hit);
  report.mAP = detail::mean_of(report.ap);
  report.mINP = detail::mean_of(report.inp);
}

/// Leave-one-out evaluation over a single labelled pool: each query retrieves
/// from the view-filtered pool minus itself. Bidirectional protocols pool the
/// per-query values of both directions.
inline RetrievalReport evaluate_protocol(const std::vector<LabeledEmbedding>& pool, Protocol protocol) {
  RetrievalReport report;
  report.protocol = protocol_name(protocol);
  for (const auto& dir : detail::directions(protocol)) {
    std::vector<const LabeledEmbedding*> queries;
    std::vector<std::vector<const LabeledEmbedding*>> galleries;
    bool any_gallery = false;
    for (std::size_t qi = 0; qi < pool.size(); ++qi) {
      if (dir.query_view && pool[qi].view != *dir.query_view) continue;
      std::vector<const LabeledEmbedding*> gallery;
      for (std::size_t gi = 0; gi < pool.size(); ++gi)
        if (gi != qi && (!dir.gallery_view || pool[gi].view == *dir.gallery_view)) gallery.push_back(&pool[gi]);
      any_gallery |= !gallery.empty();
      queries.push_back(&pool[qi]);
      galleries.push_back(std::move(gallery));
    }
    if (!any_gallery)
      throw ProtocolError("protocol " + report.protocol + ": gallery filter '" +
                          (dir.gallery_view ? view_name(*dir.gallery_view) : "any") + "' leaves an empty gallery");
    score_queries(queries, galleries, report);
  }
  finalize_report(report);
  return report;
}

/// Explicit query / gallery split with the protocol's view filters.
inline RetrievalReport evaluate_protocol(const std::vector<LabeledEmbedding>& queries,
                                         const std::vector<LabeledEmbedding>& gallery, Protocol protocol) {
  RetrievalReport report;
  report.protocol = protocol_name(protocol);
  for (const auto& dir : detail::directions(protocol)) {
    std::vector<const LabeledEmbedding*> filtered;
    for (const auto& g : gallery)
      if (!dir.gallery_view || g.view == *dir.gallery_view) filtered.push_back(&g);
    if (filtered.empty())
      throw ProtocolError("protocol " + report.protocol + ": gallery filter '" +
                          (dir.gallery_view ? view_name(*dir.gallery_view) : "any") + "' leaves an empty gallery");
    std::vector<const LabeledEmbedding*> qs;
    for (const auto& q : queries)
      if (!dir.query_view || q.view == *dir.query_view) qs.push_back(&q);
    score_queries(qs, std::vector<std::vector<const LabeledEmbedding*>>(qs.size(), filtered), report);
  }
  finalize_report(report);
  return report;
}

// ---------------------------------------------------------------------------
// Serialisation
// ---------------------------------------------------------------------------

inline nlohmann::json report_to_json(const RetrievalReport& r) {
  return {{"protocol", r.protocol}, {"rank1", r.rank1},       {"mAP", r.mAP},
          {"mINP", r.mINP},         {"num_queries", r.num_queries()}, {"excluded_queries", r.excluded_queries},
          {"ap", r.ap},             {"inp", r.inp},           {"hit", r.hit}};
}

inline RetrievalReport report_from_json(const nlohmann::json& j) {
  RetrievalReport r;
  try {
    r.protocol = j.at("protocol").get<std::string>();
    r.rank1 = j.at("rank1").get<double>();
    r.mAP = j.at("mAP").get<double>();
    r.mINP = j.at("mINP").get<double>();
    r.excluded_queries = j.at("excluded_queries").get<std::size_t>();
    r.ap = j.at("ap").get<std::vector<double>>();
    r.inp = j.at("inp").get<std::vector<double>>();
    r.hit = j.at("hit").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("report record: ") + e.what());
  }
  return r;
}

/// `id=<y> view=<aerial|ground> dim=<d> data=<base64 f64 LE>`
inline void write_embeddings(std::ostream& os, const std::vector<LabeledEmbedding>& items) {
  for (const auto& e : items)
    os << "id=" << e.id << " view=" << view_name(e.view) << " dim=" << e.v.size()
       << " data=" << base64::encode_doubles(e.v) << '\n';
}

inline std::vector<LabeledEmbedding> read_embeddings(std::istream& is) {
  std::vector<LabeledEmbedding> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto f = parse_record(line, line_no);
    LabeledEmbedding e;
    e.id = parse_index(require_field(f, "id", line_no), line_no);
    e.view = parse_view(require_field(f, "view", line_no));
    const std::size_t dim = parse_index(require_field(f, "dim", line_no), line_no);
    e.v = base64::decode_doubles(require_field(f, "data", line_no));
    if (e.v.size() != dim)
      throw ParseError("embedding line " + std::to_string(line_no) + ": dim=" + std::to_string(dim) + " but payload has " +
                       std::to_string(e.v.size()) + " values");
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace dtst
