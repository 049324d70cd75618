#ifndef EMBRE_EVAL_HPP
#define EMBRE_EVAL_HPP

#include <array>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "embre/corpus.hpp"

namespace embre {

enum class MatchLevel { Pair, PairType, PairNovelty, PairTypeNovelty };

inline constexpr std::array<MatchLevel, 4> kAllLevels{
    MatchLevel::Pair, MatchLevel::PairType, MatchLevel::PairNovelty,
    MatchLevel::PairTypeNovelty};

inline std::string to_string(MatchLevel l) {
  switch (l) {
    case MatchLevel::Pair: return "PAIR";
    case MatchLevel::PairType: return "PAIR_TYPE";
    case MatchLevel::PairNovelty: return "PAIR_NOVELTY";
    case MatchLevel::PairTypeNovelty: return "PAIR_TYPE_NOVELTY";
  }
  return "PAIR";
}

inline MatchLevel parse_match_level(const std::string& s) {
  for (auto l : kAllLevels)
    if (to_string(l) == s) return l;
  throw std::invalid_argument("unknown match level '" + s + "'");
}

/// A relation tagged with the document it belongs to.
struct ScoredRelation {
  std::string pmid;
  RelationAnnotation relation;
};

using MatchKey = std::tuple<std::string, std::string, std::string, std::string, std::string>;

/// (pmid, unordered pair, [type], [novelty]); unused fields stay empty.
inline MatchKey match_key(const ScoredRelation& r, MatchLevel level) {
  auto [a, b] = canonical_pair(r.relation.id_a, r.relation.id_b);
  const bool with_type =
      level == MatchLevel::PairType || level == MatchLevel::PairTypeNovelty;
  const bool with_novelty =
      level == MatchLevel::PairNovelty || level == MatchLevel::PairTypeNovelty;
  return {r.pmid, std::move(a), std::move(b),
          with_type ? r.relation.relation_type : std::string(),
          with_novelty ? std::string(to_string(r.relation.novelty)) : std::string()};
}

struct MatchCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  MatchCounts& operator+=(const MatchCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const MatchCounts&, const MatchCounts&) = default;
};

/// Set matching under the level's key. Duplicate keys within one side are
/// an upstream bug and are rejected.
inline MatchCounts match_counts(const std::vector<ScoredRelation>& gold,
                                const std::vector<ScoredRelation>& pred,
                                MatchLevel level) {
  auto keys = [&](const std::vector<ScoredRelation>& rels, const char* side) {
    std::set<MatchKey> out;
    for (const auto& r : rels)
      if (!out.insert(match_key(r, level)).second)
        throw DataError(std::string("duplicate ") + side + " relation for pmid " +
                        r.pmid + " (" + r.relation.id_a + ", " + r.relation.id_b +
                        ") at level " + to_string(level));
    return out;
  };
  const auto g = keys(gold, "gold");
  const auto p = keys(pred, "predicted");
  MatchCounts c;
  for (const auto& k : p) (g.count(k) ? c.tp : c.fp) += 1;
  c.fn = g.size() - c.tp;
  return c;
}

struct Prf {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

/// Harmonic mean of precision and recall; 0 when both are 0.
inline double f1_score(double precision, double recall) {
  return precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
}

/// Micro P/R/F1. All-zero counts score 1.0 (nothing to find, nothing
/// claimed); zero TP with any FP or FN scores 0.0.
inline Prf prf(std::size_t tp, std::size_t fp, std::size_t fn) {
  if (tp == 0 && fp == 0 && fn == 0) return {1.0, 1.0, 1.0};
  if (tp == 0) return {0.0, 0.0, 0.0};
  const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double r = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return {p, r, f1_score(p, r)};
}

inline Prf prf(const MatchCounts& c) { return prf(c.tp, c.fp, c.fn); }

struct LevelReport {
  MatchCounts counts;
  Prf scores;
};

struct MetricsReport {
  std::map<MatchLevel, LevelReport> levels;
  std::map<std::string, LevelReport> per_relation_type;  // at PAIR_TYPE

  const LevelReport& at(MatchLevel l) const { return levels.at(l); }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "embre-report";
    j["version"] = 1;
    auto entry = [](const LevelReport& r) {
      return nlohmann::json{{"tp", r.counts.tp},         {"fp", r.counts.fp},
                            {"fn", r.counts.fn},         {"precision", r.scores.precision},
                            {"recall", r.scores.recall}, {"f1", r.scores.f1}};
    };
    for (const auto& [level, r] : levels) j["levels"][to_string(level)] = entry(r);
    j["per_relation_type"] = nlohmann::json::object();
    for (const auto& [type, r] : per_relation_type) j["per_relation_type"][type] = entry(r);
    return j;
  }

  std::string to_table() const {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-24s %6s %6s %6s %10s %10s %10s\n", "level", "TP",
                  "FP", "FN", "Precision", "Recall", "F1");
    os << line;
    auto row = [&](const std::string& name, const LevelReport& r) {
      std::snprintf(line, sizeof line, "%-24s %6zu %6zu %6zu %10.4f %10.4f %10.4f\n",
                    name.c_str(), r.counts.tp, r.counts.fp, r.counts.fn,
                    r.scores.precision, r.scores.recall, r.scores.f1);
      os << line;
    };
    for (const auto& [level, r] : levels) row(to_string(level), r);
    if (!per_relation_type.empty()) {
      os << "per relation type (PAIR_TYPE):\n";
      for (const auto& [type, r] : per_relation_type) row("  " + type, r);
    }
    return os.str();
  }
};

inline std::vector<ScoredRelation> scored(const std::string& pmid,
                                          const std::vector<RelationAnnotation>& rels) {
  std::vector<ScoredRelation> out;
  out.reserve(rels.size());
  for (const auto& r : rels) out.push_back({pmid, r});
  return out;
}

/// Pooled (micro) scoring of predictions against the gold corpus at all
/// four levels, plus a per-relation-type breakdown at PAIR_TYPE.
inline MetricsReport evaluate(const Corpus& gold_corpus, const Predictions& predictions) {
  std::map<std::string, const Document*> docs;
  for (const auto& d : gold_corpus) docs[d.pmid] = &d;
  std::vector<ScoredRelation> gold, pred;
  for (const auto& [pmid, rels] : predictions) {
    auto it = docs.find(pmid);
    if (it == docs.end()) throw DataError("prediction for unknown pmid " + pmid);
    for (const auto& r : rels)
      for (const auto* id : {&r.id_a, &r.id_b})
        if (!it->second->mentions_identifier(*id))
          throw DataError("pmid " + pmid + ": predicted identifier '" + *id +
                          "' not in document");
    auto s = scored(pmid, rels);
    pred.insert(pred.end(), s.begin(), s.end());
  }
  for (const auto& d : gold_corpus) {
    auto s = scored(d.pmid, d.relations);
    gold.insert(gold.end(), s.begin(), s.end());
  }

  MetricsReport report;
  for (auto level : kAllLevels) {
    const auto c = match_counts(gold, pred, level);
    report.levels[level] = {c, prf(c)};
  }

  std::set<std::string> types;
  for (const auto& r : gold) types.insert(r.relation.relation_type);
  for (const auto& r : pred) types.insert(r.relation.relation_type);
  for (const auto& type : types) {
    std::vector<ScoredRelation> g, p;
    for (const auto& r : gold)
      if (r.relation.relation_type == type) g.push_back(r);
    for (const auto& r : pred)
      if (r.relation.relation_type == type) p.push_back(r);
    const auto c = match_counts(g, p, MatchLevel::PairType);
    report.per_relation_type[type] = {c, prf(c)};
  }
  return report;
}

/// Gold relations of a corpus in prediction-map form.
inline Predictions gold_predictions(const Corpus& corpus) {
  Predictions out;
  for (const auto& d : corpus) out[d.pmid] = d.relations;
  return out;
}

}  // namespace embre

#endif  // EMBRE_EVAL_HPP
