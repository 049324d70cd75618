#ifndef EMBRE_CORPUS_HPP
#define EMBRE_CORPUS_HPP

#include <algorithm>
#include <charconv>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "embre/common.hpp"

namespace embre {

/// Identifier used by PubTator for mentions that could not be normalised.
inline constexpr std::string_view kUngroundedId = "-";

inline bool is_groundable(std::string_view id) { return id != kUngroundedId; }

/// Offsets count Unicode code points into Document::full_text.
struct Mention {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string surface;
  std::string entity_type;
  std::vector<std::string> identifiers;

  bool has_identifier(std::string_view id) const {
    return std::find(identifiers.begin(), identifiers.end(), id) !=
           identifiers.end();
  }

  friend bool operator==(const Mention&, const Mention&) = default;
};

enum class Novelty { NoneClass, No, Novel };

inline std::string_view to_string(Novelty n) {
  switch (n) {
    case Novelty::NoneClass: return "NoneClass";
    case Novelty::No: return "No";
    case Novelty::Novel: return "Novel";
  }
  return "NoneClass";
}

/// Parses an annotated novelty value; only "Novel" and "No" are valid.
inline std::optional<Novelty> parse_novelty(std::string_view s) {
  if (s == "Novel") return Novelty::Novel;
  if (s == "No") return Novelty::No;
  return std::nullopt;
}

struct RelationAnnotation {
  std::string id_a;
  std::string id_b;
  std::string relation_type;
  Novelty novelty = Novelty::No;

  friend bool operator==(const RelationAnnotation&,
                         const RelationAnnotation&) = default;
};

/// Unordered identifier pair in canonical (lexicographic) order.
inline std::pair<std::string, std::string> canonical_pair(std::string a,
                                                          std::string b) {
  if (b < a) std::swap(a, b);
  return {std::move(a), std::move(b)};
}

struct Document {
  std::string pmid;
  std::string title;
  std::string abstract;
  std::string full_text;
  std::vector<Mention> mentions;
  std::vector<RelationAnnotation> relations;

  /// Distinct groundable identifiers in canonical order.
  std::vector<std::string> identifiers() const {
    std::set<std::string> ids;
    for (const auto& m : mentions)
      for (const auto& id : m.identifiers)
        if (is_groundable(id)) ids.insert(id);
    return {ids.begin(), ids.end()};
  }

  bool mentions_identifier(std::string_view id) const {
    return std::any_of(mentions.begin(), mentions.end(),
                       [&](const Mention& m) { return m.has_identifier(id); });
  }

  /// Entity type of the first mention carrying `id`, or empty.
  std::string type_of(std::string_view id) const {
    for (const auto& m : mentions)
      if (m.has_identifier(id)) return m.entity_type;
    return {};
  }

  friend bool operator==(const Document&, const Document&) = default;
};

using Corpus = std::vector<Document>;

inline constexpr std::string_view kNoRelation = "None";

struct PairCandidate {
  std::string src_id;
  std::string tgt_id;
  std::string src_type;
  std::string tgt_type;
  std::string relation_label{kNoRelation};
  Novelty novelty_label = Novelty::NoneClass;

  bool is_positive() const { return relation_label != kNoRelation; }

  friend bool operator==(const PairCandidate&, const PairCandidate&) = default;
};

/// Optional restriction of candidate pairs to an unordered set of allowed
/// entity-type combinations. Empty means all pairs are generated.
struct CandidateOptions {
  std::set<std::pair<std::string, std::string>> allowed_type_pairs;

  bool allows(const std::string& a, const std::string& b) const {
    if (allowed_type_pairs.empty()) return true;
    return allowed_type_pairs.count({a, b}) || allowed_type_pairs.count({b, a});
  }
};

namespace detail {

inline std::size_t codepoint_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xc0) != 0x80) ++n;
  return n;
}

inline bool parse_offset(std::string_view s, std::size_t& out) {
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

struct Block {
  std::size_t first_line = 0;
  std::vector<std::pair<std::size_t, std::string>> lines;
};

/// Checks document-level invariants once all lines of a block are read.
inline void finish_document(Document& doc, std::size_t title_len,
                            std::size_t first_line) {
  std::stable_sort(doc.mentions.begin(), doc.mentions.end(),
                   [](const Mention& a, const Mention& b) {
                     return a.start < b.start;
                   });
  for (const auto& m : doc.mentions) {
    if (m.start <= title_len && m.end > title_len)
      throw ParseError(doc.pmid, first_line,
                       "mention [" + std::to_string(m.start) + "," +
                           std::to_string(m.end) +
                           ") crosses the title/abstract boundary");
  }
}

}  // namespace detail

/// Parses PubTator text. Parsing is strict: any malformed line rejects the
/// whole input with a ParseError naming the PMID and line number.
inline Corpus parse_pubtator(std::istream& in) {
  std::vector<detail::Block> blocks;
  std::string line;
  std::size_t lineno = 0;
  detail::Block current;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty()) {
      if (!current.lines.empty()) blocks.push_back(std::move(current));
      current = {};
      continue;
    }
    if (current.lines.empty()) current.first_line = lineno;
    current.lines.emplace_back(lineno, line);
  }
  if (!current.lines.empty()) blocks.push_back(std::move(current));

  Corpus corpus;
  std::set<std::string> seen_pmids;
  for (auto& block : blocks) {
    auto header = [&](std::size_t idx, char kind) {
      const auto& [ln, text] = block.lines[idx];
      const auto p1 = text.find('|');
      const auto p2 = p1 == std::string::npos ? p1 : text.find('|', p1 + 1);
      if (p2 == std::string::npos || p2 != p1 + 2 || text[p1 + 1] != kind)
        throw ParseError(p1 == std::string::npos ? "" : text.substr(0, p1), ln,
                         std::string("expected 'PMID|") + kind + "|' line");
      return std::pair{text.substr(0, p1), text.substr(p2 + 1)};
    };
    if (block.lines.size() < 2)
      throw ParseError("", block.first_line,
                       "block needs a title and an abstract line");
    Document doc;
    auto [pmid_t, title] = header(0, 't');
    auto [pmid_a, abstract] = header(1, 'a');
    if (pmid_t.empty() || pmid_t != pmid_a)
      throw ParseError(pmid_t, block.lines[1].first,
                       "title and abstract PMIDs differ");
    if (!seen_pmids.insert(pmid_t).second)
      throw ParseError(pmid_t, block.first_line, "duplicate PMID");
    doc.pmid = pmid_t;
    doc.title = std::move(title);
    doc.abstract = std::move(abstract);
    doc.full_text = doc.title + " " + doc.abstract;
    const std::u32string text = utf8::decode(doc.full_text);
    const std::size_t title_len = detail::codepoint_length(doc.title);

    std::set<std::pair<std::string, std::string>> pairs;
    std::vector<std::size_t> relation_lines;
    for (std::size_t i = 2; i < block.lines.size(); ++i) {
      const auto& [ln, raw] = block.lines[i];
      auto fields = split(raw, '\t');
      if (fields.empty() || fields[0] != doc.pmid)
        throw ParseError(doc.pmid, ln, "annotation PMID does not match block");
      if (fields.size() == 6) {
        Mention m;
        if (!detail::parse_offset(fields[1], m.start) ||
            !detail::parse_offset(fields[2], m.end))
          throw ParseError(doc.pmid, ln, "offsets are not integers");
        if (m.start >= m.end || m.end > text.size())
          throw ParseError(doc.pmid, ln,
                           "offset out of range [" + fields[1] + "," +
                               fields[2] + ")");
        m.surface = fields[3];
        const auto expected =
            utf8::encode(std::u32string_view(text).substr(m.start,
                                                          m.end - m.start));
        if (expected != m.surface)
          throw ParseError(doc.pmid, ln,
                           "surface '" + m.surface +
                               "' does not match text '" + expected + "'");
        m.entity_type = fields[4];
        if (m.entity_type.empty())
          throw ParseError(doc.pmid, ln, "empty entity type");
        m.identifiers = split(fields[5], ',');
        for (const auto& id : m.identifiers)
          if (id.empty())
            throw ParseError(doc.pmid, ln, "empty identifier");
        doc.mentions.push_back(std::move(m));
      } else if (fields.size() == 5) {
        RelationAnnotation r;
        r.relation_type = fields[1];
        r.id_a = fields[2];
        r.id_b = fields[3];
        if (r.relation_type.empty() || r.relation_type == kNoRelation)
          throw ParseError(doc.pmid, ln, "invalid relation type");
        if (r.id_a.empty() || r.id_b.empty())
          throw ParseError(doc.pmid, ln, "empty relation identifier");
        if (r.id_a == r.id_b)
          throw ParseError(doc.pmid, ln, "relation endpoints are identical");
        if (!is_groundable(r.id_a) || !is_groundable(r.id_b))
          throw ParseError(doc.pmid, ln, "relation endpoint is ungrounded '-'");
        auto nov = parse_novelty(fields[4]);
        if (!nov)
          throw ParseError(doc.pmid, ln,
                           "novelty must be Novel or No, got '" + fields[4] +
                               "'");
        r.novelty = *nov;
        if (!pairs.insert(canonical_pair(r.id_a, r.id_b)).second)
          throw ParseError(doc.pmid, ln, "duplicate relation pair");
        doc.relations.push_back(std::move(r));
        relation_lines.push_back(ln);
      } else {
        throw ParseError(doc.pmid, ln,
                         "expected 5 or 6 tab-separated fields, got " +
                             std::to_string(fields.size()));
      }
    }
    for (std::size_t i = 0; i < doc.relations.size(); ++i) {
      const auto& r = doc.relations[i];
      for (const auto* id : {&r.id_a, &r.id_b})
        if (!doc.mentions_identifier(*id))
          throw ParseError(doc.pmid, relation_lines[i],
                           "relation identifier '" + *id +
                               "' has no mention");
    }
    detail::finish_document(doc, title_len, block.first_line);
    corpus.push_back(std::move(doc));
  }
  return corpus;
}

inline Corpus parse_pubtator(const std::string& text) {
  std::istringstream in(text);
  return parse_pubtator(in);
}

namespace detail {

inline void write_block(std::ostream& out, const Document& doc,
                        const std::vector<RelationAnnotation>& relations) {
  out << doc.pmid << "|t|" << doc.title << '\n';
  out << doc.pmid << "|a|" << doc.abstract << '\n';
  for (const auto& m : doc.mentions) {
    out << doc.pmid << '\t' << m.start << '\t' << m.end << '\t' << m.surface
        << '\t' << m.entity_type << '\t' << join(m.identifiers, ",") << '\n';
  }
  for (const auto& r : relations) {
    out << doc.pmid << '\t' << r.relation_type << '\t' << r.id_a << '\t'
        << r.id_b << '\t' << to_string(r.novelty) << '\n';
  }
}

}  // namespace detail

using Predictions = std::map<std::string, std::vector<RelationAnnotation>>;

/// Writes documents with their annotated relations.
inline std::string write_pubtator(const Corpus& docs) {
  std::ostringstream out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i) out << '\n';
    detail::write_block(out, docs[i], docs[i].relations);
  }
  return out.str();
}

/// Writes documents with their gold relations replaced by `predicted`.
/// Documents absent from the map are written without relation lines.
inline std::string write_pubtator(const Corpus& docs,
                                  const Predictions& predicted) {
  std::map<std::string, const Document*> by_pmid;
  for (const auto& d : docs) by_pmid[d.pmid] = &d;
  for (const auto& [pmid, rels] : predicted) {
    auto it = by_pmid.find(pmid);
    if (it == by_pmid.end())
      throw DataError("prediction for unknown pmid " + pmid);
    for (const auto& r : rels)
      for (const auto* id : {&r.id_a, &r.id_b})
        if (!it->second->mentions_identifier(*id))
          throw DataError("pmid " + pmid + ": predicted identifier '" + *id +
                          "' not in document");
  }
  static const std::vector<RelationAnnotation> none;
  std::ostringstream out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i) out << '\n';
    auto it = predicted.find(docs[i].pmid);
    detail::write_block(out, docs[i], it == predicted.end() ? none : it->second);
  }
  return out.str();
}

/// Every unordered pair of distinct groundable identifiers in the document,
/// in canonical order, labelled from the document's relations.
inline std::vector<PairCandidate> candidate_pairs(
    const Document& doc, const CandidateOptions& options = {}) {
  std::map<std::pair<std::string, std::string>, const RelationAnnotation*>
      gold;
  for (const auto& r : doc.relations)
    gold[canonical_pair(r.id_a, r.id_b)] = &r;

  const auto ids = doc.identifiers();
  std::vector<std::string> types;
  types.reserve(ids.size());
  for (const auto& id : ids) types.push_back(doc.type_of(id));

  std::vector<PairCandidate> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      if (!options.allows(types[i], types[j])) continue;
      PairCandidate c{ids[i], ids[j], types[i], types[j]};
      if (auto it = gold.find({ids[i], ids[j]}); it != gold.end()) {
        c.relation_label = it->second->relation_type;
        c.novelty_label = it->second->novelty;
      }
      out.push_back(std::move(c));
    }
  }
  return out;
}

}  // namespace embre

#endif  // EMBRE_CORPUS_HPP
