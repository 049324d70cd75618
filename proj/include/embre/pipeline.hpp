#ifndef EMBRE_PIPELINE_HPP
#define EMBRE_PIPELINE_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "embre/checkpoint.hpp"
#include "embre/common.hpp"
#include "embre/corpus.hpp"
#include "embre/eval.hpp"
#include "embre/masking.hpp"
#include "embre/model.hpp"
#include "embre/numerics/adam.hpp"
#include "embre/tokenizer.hpp"

namespace embre {

struct TrainConfig {
  std::size_t epochs_pretrain = 15;
  std::size_t epochs_finetune = 15;
  std::size_t batch_size = 128;
  double lr = 1e-5;
  std::uint64_t seed = 0;
  MaskingConfig masking;
  LossWeights loss;
  PretrainWeights pretrain_weights;
  MatchLevel selection_metric = MatchLevel::PairTypeNovelty;
  double negative_downsample_ratio = 0.0;  // 0 keeps every negative
  bool ordered_pairs = false;
  Pooling pooling = Pooling::Cls;
  CandidateOptions candidates;

  void validate() const {
    if (epochs_pretrain < 1 || epochs_finetune < 1)
      throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
    if (negative_downsample_ratio < 0)
      throw std::invalid_argument("negative_downsample_ratio must be >= 0");
    masking.validate();
    loss.validate();
  }
};

template <class T>
constexpr Precision precision_of() {
  return std::is_same_v<T, float> ? Precision::F32 : Precision::F64;
}

// ---------------------------------------------------------------------------
// Pair instances

struct PairInstance {
  std::string pmid;
  std::string src_id;
  std::string tgt_id;
  PairTokens tokens;
  RelationLabels labels;
  bool positive = false;
};

struct PairOptions {
  std::size_t max_len = 0;
  bool ordered_pairs = false;
  CandidateOptions candidates;
};

/// Tagged instances for every candidate pair of every document. In ordered
/// mode each pair also yields the swapped (tgt, src) instance.
inline std::vector<PairInstance> build_pair_instances(const Corpus& corpus,
                                                      const Vocabulary& vocab,
                                                      const PairOptions& opts,
                                                      const LogSink& log = {}) {
  std::vector<PairInstance> out;
  for (const auto& doc : corpus) {
    const auto tok = tokenize(doc, vocab);
    for (const auto& c : candidate_pairs(doc, opts.candidates)) {
      auto rel = vocab.relation_index(c.relation_label);
      if (!rel)
        throw DataError("pmid " + doc.pmid + ": relation type '" + c.relation_label +
                        "' not in vocabulary");
      RelationLabels labels{*rel, Vocabulary::novelty_index(c.novelty_label)};
      auto add = [&](const std::string& src, const std::string& tgt) {
        PairInstance inst{doc.pmid, src, tgt,
                          insert_pair_tags(tok, doc, src, tgt, vocab, opts.max_len),
                          labels, c.is_positive()};
        if (inst.tokens.markers_lost && log)
          log("event=pair_markers_truncated pmid=" + doc.pmid + " src=" + src + " tgt=" + tgt);
        out.push_back(std::move(inst));
      };
      add(c.src_id, c.tgt_id);
      if (opts.ordered_pairs) add(c.tgt_id, c.src_id);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoding and prediction

/// Argmax relation; None omits the pair. Otherwise novelty is the argmax
/// over {No, Novel} only (NoneClass is never emitted). Ties go to the lower
/// index.
inline std::optional<RelationAnnotation> decode_pair(std::span<const double> relation_logits,
                                                     std::span<const double> novelty_logits,
                                                     const Vocabulary& vocab,
                                                     const std::string& src_id,
                                                     const std::string& tgt_id) {
  if (relation_logits.size() != vocab.relation_labels().size() || novelty_logits.size() != 3)
    throw std::invalid_argument("decode_pair: logit widths do not match vocabulary");
  const auto best = static_cast<std::size_t>(
      std::max_element(relation_logits.begin(), relation_logits.end()) -
      relation_logits.begin());
  if (best == 0) return std::nullopt;
  const Novelty nov = novelty_logits[2] > novelty_logits[1] ? Novelty::Novel : Novelty::No;
  return RelationAnnotation{src_id, tgt_id, vocab.relation_labels()[best], nov};
}

template <class T>
std::vector<double> to_doubles(const num::Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

/// Relation predictions for every document (documents with no predicted
/// relation map to an empty list). `workers` > 1 fans out by document; the
/// result does not depend on it.
template <class T>
Predictions predict(const Corpus& docs, const RelationModel<T>& model, const Vocabulary& vocab,
                    const PairOptions& opts, std::size_t workers = 1) {
  std::vector<std::vector<RelationAnnotation>> per_doc(docs.size());
  auto run = [&](std::size_t begin, std::size_t end) {
    num::NoGradGuard no_grad;
    for (std::size_t d = begin; d < end; ++d) {
      const auto& doc = docs[d];
      const auto tok = tokenize(doc, vocab);
      for (const auto& c : candidate_pairs(doc, opts.candidates)) {
        auto logits = model.forward(insert_pair_tags(tok, doc, c.src_id, c.tgt_id, vocab, opts.max_len));
        auto rel = to_doubles(logits.relation);
        auto nov = to_doubles(logits.novelty);
        if (opts.ordered_pairs) {
          auto back = model.forward(insert_pair_tags(tok, doc, c.tgt_id, c.src_id, vocab, opts.max_len));
          for (std::size_t i = 0; i < rel.size(); ++i) rel[i] += back.relation[i];
          for (std::size_t i = 0; i < nov.size(); ++i) nov[i] += back.novelty[i];
        }
        if (auto r = decode_pair(rel, nov, vocab, c.src_id, c.tgt_id)) per_doc[d].push_back(*r);
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, docs.size()));
  if (workers == 1) {
    run(0, docs.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (docs.size() + workers - 1) / workers;
    for (std::size_t b = 0; b < docs.size(); b += chunk)
      pool.emplace_back(run, b, std::min(docs.size(), b + chunk));
    for (auto& t : pool) t.join();
  }
  Predictions out;
  for (std::size_t d = 0; d < docs.size(); ++d) out[docs[d].pmid] = std::move(per_doc[d]);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint <-> model

template <class T>
Checkpoint make_checkpoint(const NamedParameters<T>& params, EncoderConfig enc, Pooling pooling,
                           const Vocabulary& vocab, Provenance provenance) {
  enc.precision = precision_of<T>();
  Checkpoint ck;
  ck.encoder = enc;
  ck.pooling = pooling;
  ck.vocab_digest = vocab.digest();
  ck.provenance = std::move(provenance);
  ck.tensors = snapshot(params);
  return ck;
}

/// Fine-tuned model restored from a finetune checkpoint.
template <class T>
RelationModel<T> load_relation_model(const Checkpoint& ck, const Vocabulary& vocab) {
  ck.require_vocab(vocab.digest());
  if (ck.encoder.precision != precision_of<T>())
    throw CheckpointError("checkpoint precision " + to_string(ck.encoder.precision) +
                          " does not match requested precision");
  Rng unused(0);
  RelationModel<T> model(ck.encoder, LabelSpaces::of(vocab), unused, ck.pooling);
  restore(model.named_parameters(), ck);
  return model;
}

template <class T>
Predictions predict(const Corpus& docs, const Checkpoint& ck, const Vocabulary& vocab,
                    PairOptions opts = {}, std::size_t workers = 1) {
  const auto model = load_relation_model<T>(ck, vocab);
  opts.max_len = ck.encoder.max_len;
  return predict(docs, model, vocab, opts, workers);
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

template <class T>
std::vector<num::Tensor<T>> tensors_of(const NamedParameters<T>& named) {
  std::vector<num::Tensor<T>> out;
  out.reserve(named.size());
  for (const auto& [n, t] : named) out.push_back(t);
  return out;
}

template <class T>
void require_finite(const num::Tensor<T>& loss, const std::string& where) {
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw NumericError("non-finite loss at " + where);
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace detail

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_losses;
};

/// Masked-entity pretraining; returns the final-epoch checkpoint.
template <class T>
PretrainResult pretrain(const Corpus& corpus, const Vocabulary& vocab, const EncoderConfig& enc,
                        const TrainConfig& cfg, const LogSink& log = {}) {
  cfg.validate();
  enc.validate();
  Rng init(derive_seed(cfg.seed, "init.pretrain"));
  PretrainModel<T> model(enc, LabelSpaces::of(vocab), init);
  model.weights = cfg.pretrain_weights;
  const auto named = model.named_parameters();
  auto params = detail::tensors_of(named);
  num::AdamState<T> adam(num::AdamOptions{cfg.lr});

  PretrainResult result;
  for (std::size_t epoch = 1; epoch <= cfg.epochs_pretrain; ++epoch) {
    auto instances = build_pretraining_instances(
        corpus, vocab, cfg.masking, derive_seed(cfg.masking.seed, epoch), enc.max_len,
        epoch == 1 ? log : LogSink{});
    if (instances.empty()) throw DataError("pretrain: no eligible documents");
    Rng shuffle(derive_seed(cfg.seed, "pretrain.shuffle." + std::to_string(epoch)));
    shuffle.shuffle(instances);

    double total = 0.0;
    for (std::size_t b = 0; b < instances.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(instances.size(), b + cfg.batch_size);
      Rng drop(derive_seed(derive_seed(cfg.seed, "pretrain.dropout"), epoch * 1000003 + b));
      const ForwardContext ctx{true, &drop};
      for (std::size_t i = b; i < e; ++i) {
        auto loss = model.loss(instances[i], ctx);
        detail::require_finite(loss, "pretrain epoch " + std::to_string(epoch));
        total += static_cast<double>(loss.item());
        num::scale(loss, T(1) / static_cast<T>(e - b)).backward();
      }
      num::adam_step(std::span<num::Tensor<T>>(params), adam);
    }
    const double mean_loss = total / static_cast<double>(instances.size());
    result.epoch_losses.push_back(mean_loss);
    if (log)
      log("event=pretrain_epoch epoch=" + std::to_string(epoch) +
          " instances=" + std::to_string(instances.size()) +
          " loss=" + detail::fmt_double(mean_loss));
  }
  result.checkpoint = make_checkpoint(named, enc, cfg.pooling, vocab,
                                      {"pretrain", cfg.seed, cfg.epochs_pretrain, std::nullopt, ""});
  return result;
}

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0;
  double dev_metric = 0;
};

struct FinetuneResult {
  Checkpoint checkpoint;  // best-dev epoch
  std::size_t best_epoch = 0;
  double best_dev_metric = 0;
  std::vector<double> train_losses;
  std::vector<double> dev_trace;
};

/// Called after each epoch; returning false ends training early.
using EpochObserver = std::function<bool(const EpochStats&)>;

/// Multi-task fine-tuning from a pretrained checkpoint (encoder weights
/// only) or from random init. Returns the checkpoint of the epoch with the
/// highest dev metric, earliest epoch on ties.
template <class T>
FinetuneResult finetune(const Corpus& train, const Corpus& dev, const Vocabulary& vocab,
                        EncoderConfig enc, const TrainConfig& cfg,
                        const Checkpoint* init = nullptr, const LogSink& log = {},
                        const EpochObserver& observer = {}) {
  cfg.validate();
  if (init) {
    init->require_vocab(vocab.digest());
    enc = init->encoder;
  }
  enc.precision = precision_of<T>();
  enc.validate();
  if (std::none_of(dev.begin(), dev.end(), [](const Document& d) { return !d.relations.empty(); }))
    throw DataError("finetune: dev corpus has no gold relations");

  const PairOptions opts{enc.max_len, cfg.ordered_pairs, cfg.candidates};
  const auto instances = build_pair_instances(train, vocab, opts, log);
  if (instances.empty()) throw DataError("finetune: no training pairs");

  Rng init_rng(derive_seed(cfg.seed, "init.finetune"));
  RelationModel<T> model(enc, LabelSpaces::of(vocab), init_rng, cfg.pooling);
  const auto named = model.named_parameters();
  if (init) restore(named, *init, "encoder.");
  auto params = detail::tensors_of(named);
  num::AdamState<T> adam(num::AdamOptions{cfg.lr});

  std::size_t positives = 0;
  for (const auto& i : instances) positives += i.positive;
  const std::size_t negatives = instances.size() - positives;

  FinetuneResult result;
  result.best_dev_metric = -1.0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs_finetune; ++epoch) {
    std::vector<std::size_t> order;
    order.reserve(instances.size());
    Rng neg(derive_seed(cfg.seed, "finetune.negatives." + std::to_string(epoch)));
    const double keep =
        cfg.negative_downsample_ratio > 0 && negatives > 0
            ? std::min(1.0, cfg.negative_downsample_ratio * static_cast<double>(positives) /
                                static_cast<double>(negatives))
            : 1.0;
    for (std::size_t i = 0; i < instances.size(); ++i)
      if (instances[i].positive || keep >= 1.0 || neg.bernoulli(keep)) order.push_back(i);
    Rng shuffle(derive_seed(cfg.seed, "finetune.shuffle." + std::to_string(epoch)));
    shuffle.shuffle(order);

    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      Rng drop(derive_seed(derive_seed(cfg.seed, "finetune.dropout"), epoch * 1000003 + b));
      const ForwardContext ctx{true, &drop};
      for (std::size_t i = b; i < e; ++i) {
        const auto& inst = instances[order[i]];
        auto logits = model.forward(inst.tokens, ctx);
        auto loss = finetune_loss(logits.relation, logits.novelty, inst.labels, cfg.loss);
        detail::require_finite(loss, "finetune epoch " + std::to_string(epoch));
        total += static_cast<double>(loss.item());
        num::scale(loss, T(1) / static_cast<T>(e - b)).backward();
      }
      if (e > b) num::adam_step(std::span<num::Tensor<T>>(params), adam);
    }
    const double mean_loss = order.empty() ? 0.0 : total / static_cast<double>(order.size());

    const auto report = evaluate(dev, predict(dev, model, vocab, opts));
    const double metric = report.at(cfg.selection_metric).scores.f1;
    result.train_losses.push_back(mean_loss);
    result.dev_trace.push_back(metric);
    if (log)
      log("event=finetune_epoch epoch=" + std::to_string(epoch) +
          " instances=" + std::to_string(order.size()) + " loss=" + detail::fmt_double(mean_loss) +
          " dev_" + to_string(cfg.selection_metric) + "_f1=" + detail::fmt_double(metric));
    if (metric > result.best_dev_metric) {
      result.best_dev_metric = metric;
      result.best_epoch = epoch;
      result.checkpoint = make_checkpoint(
          named, enc, cfg.pooling, vocab,
          {"finetune", cfg.seed, epoch, metric, to_string(cfg.selection_metric)});
    }
    if (observer && !observer({epoch, mean_loss, metric})) break;
  }
  return result;
}

/// Index of the best epoch in a dev trace (1-based), earliest on ties.
inline std::size_t best_epoch(const std::vector<double>& dev_trace) {
  if (dev_trace.empty()) throw std::invalid_argument("best_epoch: empty trace");
  return static_cast<std::size_t>(std::max_element(dev_trace.begin(), dev_trace.end()) -
                                  dev_trace.begin()) +
         1;
}

}  // namespace embre

#endif  // EMBRE_PIPELINE_HPP
