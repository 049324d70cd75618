#ifndef EMBRE_TOKENIZER_HPP
#define EMBRE_TOKENIZER_HPP

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "embre/common.hpp"
#include "embre/corpus.hpp"

namespace embre {

using TokenId = std::int32_t;

inline constexpr TokenId kClsId = 0;
inline constexpr TokenId kSepId = 1;
inline constexpr TokenId kPadId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr TokenId kMaskId = 4;

inline const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> tokens{"[CLS]", "[SEP]", "[PAD]",
                                               "[UNK]", "[MASK]"};
  return tokens;
}

enum class TagRole { Src, Tgt };

inline std::string tag_token(TagRole role, std::string_view type, bool open) {
  std::string s = open ? "[" : "[/";
  s += role == TagRole::Src ? "SRC=" : "TGT=";
  s += type;
  s += ']';
  return s;
}

/// Half-open token index range.
struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return begin >= end; }
  friend bool operator==(const TokenRange&, const TokenRange&) = default;
};

/// Half-open code-point span into the source text.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  friend bool operator==(const Span&, const Span&) = default;
};

/// Token and label vocabularies. Immutable once built.
class Vocabulary {
 public:
  static constexpr int kFormatVersion = 1;

  Vocabulary() = default;

  Vocabulary(std::vector<std::string> words, std::vector<std::string> types,
             std::vector<std::string> identifier_labels,
             std::vector<std::string> relation_types)
      : type_labels_(std::move(types)),
        identifier_labels_(std::move(identifier_labels)) {
    tokens_ = special_tokens();
    for (const auto& t : type_labels_)
      for (auto role : {TagRole::Src, TagRole::Tgt}) {
        tokens_.push_back(tag_token(role, t, true));
        tokens_.push_back(tag_token(role, t, false));
      }
    for (auto& w : words) tokens_.push_back(std::move(w));
    relation_labels_.emplace_back(kNoRelation);
    for (auto& r : relation_types)
      if (r != kNoRelation) relation_labels_.push_back(std::move(r));
    index();
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::string>& identifier_labels() const {
    return identifier_labels_;
  }
  const std::vector<std::string>& type_labels() const { return type_labels_; }
  const std::vector<std::string>& relation_labels() const {
    return relation_labels_;
  }
  static const std::vector<std::string>& novelty_labels() {
    static const std::vector<std::string> labels{"NoneClass", "No", "Novel"};
    return labels;
  }

  TokenId id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }
  bool contains(const std::string& token) const {
    return token_to_id_.count(token) != 0;
  }
  const std::string& token(TokenId id) const { return tokens_.at(id); }

  std::vector<TokenId> ids(const std::vector<std::string>& tokens) const {
    std::vector<TokenId> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  /// Tag token id; types unknown to this vocabulary map to UNK.
  TokenId tag_id(TagRole role, std::string_view type, bool open) const {
    return id(tag_token(role, type, open));
  }

  std::optional<std::size_t> identifier_index(const std::string& id) const {
    return lookup(identifier_index_, id);
  }
  std::optional<std::size_t> type_index(const std::string& t) const {
    return lookup(type_index_, t);
  }
  std::optional<std::size_t> relation_index(const std::string& r) const {
    return lookup(relation_index_, r);
  }
  static std::size_t novelty_index(Novelty n) {
    return static_cast<std::size_t>(n);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "embre-vocab";
    j["version"] = kFormatVersion;
    nlohmann::json special = nlohmann::json::object();
    for (std::size_t i = 0; i < special_tokens().size(); ++i)
      special[special_tokens()[i]] = i;
    j["special"] = special;
    j["tokens"] = tokens_;
    j["type_labels"] = type_labels_;
    j["identifier_labels"] = identifier_labels_;
    j["relation_labels"] = relation_labels_;
    j["novelty_labels"] = novelty_labels();
    return j;
  }

  std::string serialize() const { return to_json().dump(1) + "\n"; }

  /// Stable content digest, recorded in checkpoints.
  std::string digest() const { return hex64(fnv1a64(serialize())); }

  static Vocabulary from_json(const nlohmann::json& j) {
    try {
      if (j.at("format") != "embre-vocab")
        throw DataError("vocabulary: unexpected format tag");
      if (j.at("version").get<int>() != kFormatVersion)
        throw DataError("vocabulary: unsupported version " +
                        j.at("version").dump());
      Vocabulary v;
      v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
      v.type_labels_ = j.at("type_labels").get<std::vector<std::string>>();
      v.identifier_labels_ =
          j.at("identifier_labels").get<std::vector<std::string>>();
      v.relation_labels_ =
          j.at("relation_labels").get<std::vector<std::string>>();
      const auto& sp = special_tokens();
      if (v.tokens_.size() < sp.size() ||
          !std::equal(sp.begin(), sp.end(), v.tokens_.begin()))
        throw DataError("vocabulary: special tokens missing or reordered");
      if (v.relation_labels_.empty() || v.relation_labels_[0] != kNoRelation)
        throw DataError("vocabulary: relation label 0 must be None");
      if (j.at("novelty_labels").get<std::vector<std::string>>() !=
          novelty_labels())
        throw DataError("vocabulary: unexpected novelty labels");
      v.index();
      if (v.token_to_id_.size() != v.tokens_.size())
        throw DataError("vocabulary: duplicate tokens");
      return v;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("vocabulary: ") + e.what());
    }
  }

  static Vocabulary parse(const std::string& text) {
    try {
      return from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("vocabulary: ") + e.what());
    }
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_ && a.type_labels_ == b.type_labels_ &&
           a.identifier_labels_ == b.identifier_labels_ &&
           a.relation_labels_ == b.relation_labels_;
  }

 private:
  using Index = std::unordered_map<std::string, std::size_t>;

  static std::optional<std::size_t> lookup(const Index& idx,
                                           const std::string& key) {
    auto it = idx.find(key);
    if (it == idx.end()) return std::nullopt;
    return it->second;
  }

  static Index make_index(const std::vector<std::string>& labels) {
    Index idx;
    for (std::size_t i = 0; i < labels.size(); ++i) idx.emplace(labels[i], i);
    return idx;
  }

  void index() {
    token_to_id_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      token_to_id_.emplace(tokens_[i], static_cast<TokenId>(i));
    identifier_index_ = make_index(identifier_labels_);
    type_index_ = make_index(type_labels_);
    relation_index_ = make_index(relation_labels_);
  }

  std::vector<std::string> tokens_;
  std::vector<std::string> type_labels_;
  std::vector<std::string> identifier_labels_;
  std::vector<std::string> relation_labels_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  Index identifier_index_;
  Index type_index_;
  Index relation_index_;
};

struct TokenizedDocument {
  std::vector<std::string> tokens;  // lower-cased surface text
  std::vector<TokenId> token_ids;   // filled when a vocabulary is supplied
  std::vector<Span> spans;
  std::vector<TokenRange> mention_token_ranges;  // indexed like mentions
};

namespace detail {

inline bool is_space(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' ||
         c == U'\v' || c == 0xa0 || c == 0x2009 || c == 0x202f;
}

inline bool is_punct(char32_t c) {
  return c < 0x80 && ((c >= 0x21 && c <= 0x2f) || (c >= 0x3a && c <= 0x40) ||
                      (c >= 0x5b && c <= 0x60) || (c >= 0x7b && c <= 0x7e));
}

inline char32_t lower(char32_t c) {
  return (c >= U'A' && c <= U'Z') ? c + 32 : c;
}

}  // namespace detail

/// Splits on whitespace and ASCII punctuation, lower-cases ASCII letters and
/// forces token boundaries at every mention start and end.
inline TokenizedDocument tokenize(std::string_view full_text,
                                  const std::vector<Mention>& mentions) {
  const std::u32string text = utf8::decode(full_text);
  std::vector<bool> boundary(text.size() + 1, false);
  for (const auto& m : mentions) {
    if (m.start >= m.end || m.end > text.size())
      throw DataError("tokenize: mention [" + std::to_string(m.start) + "," +
                      std::to_string(m.end) + ") outside text");
    boundary[m.start] = true;
    boundary[m.end] = true;
  }

  TokenizedDocument out;
  std::size_t i = 0;
  auto emit = [&](std::size_t b, std::size_t e) {
    std::u32string piece;
    piece.reserve(e - b);
    for (std::size_t k = b; k < e; ++k) piece.push_back(detail::lower(text[k]));
    out.tokens.push_back(utf8::encode(piece));
    out.spans.push_back({b, e});
  };
  while (i < text.size()) {
    const char32_t c = text[i];
    if (detail::is_space(c)) {
      ++i;
      continue;
    }
    if (detail::is_punct(c)) {
      emit(i, i + 1);
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    while (j < text.size() && !detail::is_space(text[j]) &&
           !detail::is_punct(text[j]) && !boundary[j])
      ++j;
    emit(i, j);
    i = j;
  }

  out.mention_token_ranges.reserve(mentions.size());
  for (const auto& m : mentions) {
    auto first = std::lower_bound(
        out.spans.begin(), out.spans.end(), m.start,
        [](const Span& s, std::size_t pos) { return s.end <= pos; });
    auto last = std::lower_bound(
        first, out.spans.end(), m.end,
        [](const Span& s, std::size_t pos) { return s.start < pos; });
    TokenRange r{static_cast<std::size_t>(first - out.spans.begin()),
                 static_cast<std::size_t>(last - out.spans.begin())};
    // a mention made only of whitespace has no tokens to align to
    if (r.empty())
      throw DataError("tokenize: mention [" + std::to_string(m.start) + "," +
                      std::to_string(m.end) + ") covers no token");
    out.mention_token_ranges.push_back(r);
  }
  return out;
}

inline TokenizedDocument tokenize(std::string_view full_text,
                                  const std::vector<Mention>& mentions,
                                  const Vocabulary& vocab) {
  auto tok = tokenize(full_text, mentions);
  tok.token_ids = vocab.ids(tok.tokens);
  return tok;
}

inline TokenizedDocument tokenize(const Document& doc,
                                  const Vocabulary& vocab) {
  return tokenize(doc.full_text, doc.mentions, vocab);
}

/// Builds the token vocabulary (frequency >= min_freq, ordered by descending
/// frequency then lexicographically) and all label vocabularies.
inline Vocabulary build_vocab(const Corpus& corpus, std::size_t min_freq = 1) {
  if (corpus.empty()) throw DataError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> freq;
  std::set<std::string> types, ids, relations;
  for (const auto& doc : corpus) {
    for (auto& t : tokenize(doc.full_text, doc.mentions).tokens) ++freq[t];
    for (const auto& m : doc.mentions) {
      types.insert(m.entity_type);
      for (const auto& id : m.identifiers)
        if (is_groundable(id)) ids.insert(id);
    }
    for (const auto& r : doc.relations) relations.insert(r.relation_type);
  }
  std::vector<std::pair<std::string, std::size_t>> words;
  for (auto& [w, n] : freq)
    if (n >= std::max<std::size_t>(min_freq, 1)) words.emplace_back(w, n);
  std::stable_sort(words.begin(), words.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> ordered;
  ordered.reserve(words.size());
  for (auto& [w, n] : words) {
    (void)n;
    ordered.push_back(w);
  }
  // special and tag tokens own their spelling; drop colliding words
  Vocabulary probe({}, {types.begin(), types.end()}, {}, {});
  std::erase_if(ordered,
                [&](const std::string& w) { return probe.contains(w); });
  return Vocabulary(std::move(ordered), {types.begin(), types.end()},
                    {ids.begin(), ids.end()},
                    {relations.begin(), relations.end()});
}

/// Tagged input for one identifier pair.
struct PairTokens {
  std::vector<TokenId> ids;
  std::vector<std::size_t> src_markers;  // positions of open SRC tags
  std::vector<std::size_t> tgt_markers;  // positions of open TGT tags
  std::size_t wrapped_mentions = 0;
  bool truncated = false;
  bool markers_lost = false;  // every wrapped mention fell past max_len
};

/// CLS + document tokens with every mention of src_id wrapped in SRC tags and
/// every mention of tgt_id in TGT tags + SEP. A mention carrying both
/// identifiers gets SRC tags. Output is cut to max_len with SEP kept last.
inline PairTokens insert_pair_tags(const TokenizedDocument& tok,
                                   const Document& doc,
                                   const std::string& src_id,
                                   const std::string& tgt_id,
                                   const Vocabulary& vocab,
                                   std::size_t max_len = 0) {
  if (!doc.mentions_identifier(src_id))
    throw DataError("pmid " + doc.pmid + ": identifier '" + src_id +
                    "' not in document");
  if (!doc.mentions_identifier(tgt_id))
    throw DataError("pmid " + doc.pmid + ": identifier '" + tgt_id +
                    "' not in document");
  if (tok.mention_token_ranges.size() != doc.mentions.size() ||
      tok.token_ids.size() != tok.tokens.size())
    throw DataError("insert_pair_tags: tokenization does not match document");

  struct Wrap {
    TokenRange range;
    TagRole role;
    const std::string* type;
  };
  std::vector<Wrap> wraps;
  for (std::size_t i = 0; i < doc.mentions.size(); ++i) {
    const auto& m = doc.mentions[i];
    if (m.has_identifier(src_id))
      wraps.push_back({tok.mention_token_ranges[i], TagRole::Src, &m.entity_type});
    else if (m.has_identifier(tgt_id))
      wraps.push_back({tok.mention_token_ranges[i], TagRole::Tgt, &m.entity_type});
  }
  // mentions are start-sorted; ranges of distinct mentions may nest, so
  // openings and closings are emitted per token position
  std::vector<std::vector<const Wrap*>> opens(tok.token_ids.size() + 1);
  std::vector<std::vector<const Wrap*>> closes(tok.token_ids.size() + 1);
  for (const auto& w : wraps) {
    opens[w.range.begin].push_back(&w);
    closes[w.range.end].push_back(&w);
  }

  PairTokens out;
  out.wrapped_mentions = wraps.size();
  out.ids.reserve(tok.token_ids.size() + 2 + 2 * wraps.size());
  out.ids.push_back(kClsId);
  auto open_tags = [&](std::size_t pos) {
    for (const auto* w : opens[pos]) {
      (w->role == TagRole::Src ? out.src_markers : out.tgt_markers)
          .push_back(out.ids.size());
      out.ids.push_back(vocab.tag_id(w->role, *w->type, true));
    }
  };
  auto close_tags = [&](std::size_t pos) {
    for (auto it = closes[pos].rbegin(); it != closes[pos].rend(); ++it)
      out.ids.push_back(vocab.tag_id((*it)->role, *(*it)->type, false));
  };
  for (std::size_t t = 0; t < tok.token_ids.size(); ++t) {
    close_tags(t);
    open_tags(t);
    out.ids.push_back(tok.token_ids[t]);
  }
  close_tags(tok.token_ids.size());
  out.ids.push_back(kSepId);

  if (max_len >= 2 && out.ids.size() > max_len) {
    out.truncated = true;
    out.ids.resize(max_len);
    out.ids.back() = kSepId;
    auto keep = [&](std::vector<std::size_t>& v) {
      std::erase_if(v, [&](std::size_t p) { return p >= max_len - 1; });
    };
    keep(out.src_markers);
    keep(out.tgt_markers);
    out.markers_lost =
        out.wrapped_mentions > 0 && out.src_markers.empty() && out.tgt_markers.empty();
  }
  return out;
}

}  // namespace embre

#endif  // EMBRE_TOKENIZER_HPP
