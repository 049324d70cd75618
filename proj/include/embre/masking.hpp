#ifndef EMBRE_MASKING_HPP
#define EMBRE_MASKING_HPP

#include <algorithm>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "embre/common.hpp"
#include "embre/corpus.hpp"
#include "embre/tokenizer.hpp"

namespace embre {

struct MaskingConfig {
  double threshold = 0.2;
  std::uint64_t seed = 0;
  std::size_t min_unmasked_identifiers = 1;
  std::size_t min_masked_identifiers = 1;
  // Alternative reading of the "not all paired entities" rule: never mask
  // both endpoints of an annotated relation. Off by default.
  bool protect_annotated_pairs = false;

  void validate() const {
    if (!(threshold >= 0.0 && threshold <= 1.0))
      throw std::invalid_argument("masking threshold must lie in [0, 1]");
    if (min_unmasked_identifiers < 1)
      throw std::invalid_argument("min_unmasked_identifiers must be >= 1");
  }
};

struct MaskedTarget {
  TokenRange range;  // positions in MaskedInstance::token_ids
  std::size_t identifier_label = 0;
  std::size_t type_label = 0;
  std::size_t mention_index = 0;
  std::string identifier;

  friend bool operator==(const MaskedTarget&, const MaskedTarget&) = default;
};

struct MaskedInstance {
  std::string pmid;
  std::vector<TokenId> token_ids;  // CLS ... SEP framed
  std::vector<MaskedTarget> masked_targets;
  std::set<std::string> masked_identifiers;

  friend bool operator==(const MaskedInstance&, const MaskedInstance&) = default;
};

/// Independent Bernoulli(threshold) draw per identifier, before any repair.
inline std::vector<bool> draw_identifier_selection(std::size_t count, Rng& rng,
                                                   double threshold) {
  std::vector<bool> picked(count);
  for (std::size_t i = 0; i < count; ++i) picked[i] = rng.bernoulli(threshold);
  return picked;
}

/// Chooses the identifiers whose mentions get masked. After the Bernoulli
/// draw, too-many or too-few selections are repaired by uniformly
/// deselecting or selecting identifiers.
inline std::set<std::string> select_masked_identifiers(
    const Document& doc, Rng& rng, const MaskingConfig& cfg) {
  cfg.validate();
  const auto ids = doc.identifiers();
  if (ids.size() < 2)
    throw DataError("pmid " + doc.pmid +
                    ": masking needs at least 2 distinct identifiers");
  auto picked = draw_identifier_selection(ids.size(), rng, cfg.threshold);

  auto indices_where = [&](bool value) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < picked.size(); ++i)
      if (picked[i] == value) out.push_back(i);
    return out;
  };

  if (cfg.protect_annotated_pairs) {
    for (const auto& r : doc.relations) {
      auto a = std::lower_bound(ids.begin(), ids.end(), r.id_a);
      auto b = std::lower_bound(ids.begin(), ids.end(), r.id_b);
      if (a == ids.end() || *a != r.id_a || b == ids.end() || *b != r.id_b)
        continue;
      const auto ia = static_cast<std::size_t>(a - ids.begin());
      const auto ib = static_cast<std::size_t>(b - ids.begin());
      if (picked[ia] && picked[ib]) picked[rng.bernoulli(0.5) ? ia : ib] = false;
    }
  }

  const std::size_t max_masked =
      ids.size() > cfg.min_unmasked_identifiers
          ? ids.size() - cfg.min_unmasked_identifiers
          : 0;
  const std::size_t min_masked = std::min(cfg.min_masked_identifiers, max_masked);
  for (auto on = indices_where(true); on.size() > max_masked;
       on = indices_where(true))
    picked[on[rng.index(on.size())]] = false;
  for (auto off = indices_where(false); ids.size() - off.size() < min_masked;
       off = indices_where(false))
    picked[off[rng.index(off.size())]] = true;

  std::set<std::string> selected;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (picked[i]) selected.insert(ids[i]);
  return selected;
}

/// Replaces every token of every mention of a selected identifier with MASK
/// and records one target per masked mention. The output is framed with
/// CLS/SEP; max_len (when non-zero) keeps the prefix and clips targets.
inline MaskedInstance apply_entity_mask(const TokenizedDocument& tok,
                                        const Document& doc,
                                        const std::set<std::string>& selected,
                                        const Vocabulary& vocab,
                                        std::size_t max_len = 0) {
  if (tok.mention_token_ranges.size() != doc.mentions.size() ||
      tok.token_ids.size() != tok.tokens.size())
    throw DataError("apply_entity_mask: tokenization does not match document");
  for (const auto& id : selected)
    if (!doc.mentions_identifier(id))
      throw DataError("pmid " + doc.pmid + ": selected identifier '" + id +
                      "' has no mention");

  MaskedInstance out;
  out.pmid = doc.pmid;
  out.masked_identifiers = selected;
  out.token_ids.reserve(tok.token_ids.size() + 2);
  out.token_ids.push_back(kClsId);
  out.token_ids.insert(out.token_ids.end(), tok.token_ids.begin(),
                       tok.token_ids.end());
  out.token_ids.push_back(kSepId);

  for (std::size_t i = 0; i < doc.mentions.size(); ++i) {
    const auto& m = doc.mentions[i];
    // std::set iterates canonically, so the first hit is the smallest id
    const std::string* chosen = nullptr;
    for (const auto& id : selected)
      if (m.has_identifier(id)) {
        chosen = &id;
        break;
      }
    if (!chosen) continue;
    auto id_label = vocab.identifier_index(*chosen);
    auto type_label = vocab.type_index(m.entity_type);
    if (!id_label || !type_label)
      throw DataError("pmid " + doc.pmid + ": identifier '" + *chosen +
                      "' or type '" + m.entity_type + "' not in vocabulary");
    const auto& r = tok.mention_token_ranges[i];
    TokenRange shifted{r.begin + 1, r.end + 1};
    for (std::size_t p = shifted.begin; p < shifted.end; ++p)
      out.token_ids[p] = kMaskId;
    out.masked_targets.push_back({shifted, *id_label, *type_label, i, *chosen});
  }

  if (max_len >= 2 && out.token_ids.size() > max_len) {
    out.token_ids.resize(max_len);
    out.token_ids.back() = kSepId;
    const std::size_t limit = max_len - 1;
    std::erase_if(out.masked_targets,
                  [&](const MaskedTarget& t) { return t.range.begin >= limit; });
    for (auto& t : out.masked_targets) t.range.end = std::min(t.range.end, limit);
  }
  return out;
}

/// Per-document substream: hash of the epoch seed and the PMID.
inline std::uint64_t document_seed(std::uint64_t epoch_seed,
                                   std::string_view pmid) {
  return derive_seed(epoch_seed, pmid);
}

using LogSink = std::function<void(const std::string&)>;

/// One masked instance per eligible document (>= 2 identifiers), determined
/// by the epoch seed and document order.
inline std::vector<MaskedInstance> build_pretraining_instances(
    const Corpus& corpus, const Vocabulary& vocab, const MaskingConfig& cfg,
    std::uint64_t epoch_seed, std::size_t max_len = 0,
    const LogSink& log = {}) {
  cfg.validate();
  std::vector<MaskedInstance> out;
  out.reserve(corpus.size());
  for (const auto& doc : corpus) {
    if (doc.identifiers().size() < 2) {
      if (log) log("event=skip_document pmid=" + doc.pmid + " reason=fewer_than_2_identifiers");
      continue;
    }
    Rng rng(document_seed(epoch_seed, doc.pmid));
    const auto selected = select_masked_identifiers(doc, rng, cfg);
    auto inst = apply_entity_mask(tokenize(doc, vocab), doc, selected, vocab,
                                  max_len);
    if (inst.masked_targets.empty()) {
      if (log) log("event=skip_document pmid=" + doc.pmid + " reason=targets_truncated");
      continue;
    }
    out.push_back(std::move(inst));
  }
  return out;
}

/// Line-oriented preview of one masking decision:
///
///   pmid=<pmid> masked=<id,id,...>
///   text: <tokens, masked runs shown as [MASK ...]>
///   target<TAB><mention surface><TAB><identifier><TAB><type>   (one per target)
inline std::string render_mask_preview(const Document& doc,
                                       const MaskedInstance& inst,
                                       const Vocabulary& vocab) {
  std::ostringstream os;
  os << "pmid=" << doc.pmid << " masked="
     << join({inst.masked_identifiers.begin(), inst.masked_identifiers.end()},
             ",")
     << '\n';
  os << "text:";
  bool in_mask = false;
  for (std::size_t p = 1; p + 1 < inst.token_ids.size(); ++p) {
    const bool masked = inst.token_ids[p] == kMaskId;
    bool starts = masked && !in_mask;
    for (const auto& t : inst.masked_targets)
      if (t.range.begin == p && in_mask) starts = true;
    if (in_mask && (!masked || starts)) os << ']';
    os << ' ';
    if (starts) os << '[';
    os << vocab.token(inst.token_ids[p]);
    in_mask = masked;
  }
  if (in_mask) os << ']';
  os << '\n';
  for (const auto& t : inst.masked_targets) {
    const auto& m = doc.mentions[t.mention_index];
    os << "target\t" << m.surface << '\t' << t.identifier << '\t'
       << m.entity_type << '\n';
  }
  return os.str();
}

}  // namespace embre

#endif  // EMBRE_MASKING_HPP
