#ifndef EMBRE_MODEL_HPP
#define EMBRE_MODEL_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "embre/common.hpp"
#include "embre/masking.hpp"
#include "embre/numerics/ops.hpp"
#include "embre/numerics/tensor.hpp"
#include "embre/tokenizer.hpp"

namespace embre {

enum class Precision { F32, F64 };

inline std::string to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "f32" || s == "float32") return Precision::F32;
  if (s == "f64" || s == "float64") return Precision::F64;
  throw std::invalid_argument("unknown precision '" + s + "' (expected f32 or f64)");
}

enum class Activation { Gelu, Relu };
enum class Pooling { Cls, EntityMarkers };

struct EncoderConfig {
  std::size_t d_model = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 512;
  std::size_t max_len = 512;
  double dropout = 0.1;
  Precision precision = Precision::F32;
  Activation activation = Activation::Gelu;

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw std::invalid_argument("d_model must be a positive multiple of n_heads");
    if (max_len < 8) throw std::invalid_argument("max_len must be >= 8");
    if (ffn_dim == 0) throw std::invalid_argument("ffn_dim must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw std::invalid_argument("dropout must lie in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"d_model", d_model},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"ffn_dim", ffn_dim},
            {"max_len", max_len},
            {"dropout", dropout},
            {"precision", to_string(precision)},
            {"activation", activation == Activation::Gelu ? "gelu" : "relu"}};
  }

  static EncoderConfig from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.max_len = j.value("max_len", c.max_len);
    c.dropout = j.value("dropout", c.dropout);
    c.precision = parse_precision(j.value("precision", std::string("f32")));
    const auto act = j.value("activation", std::string("gelu"));
    if (act == "gelu") c.activation = Activation::Gelu;
    else if (act == "relu") c.activation = Activation::Relu;
    else throw std::invalid_argument("unknown activation '" + act + "'");
    c.validate();
    return c;
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// Weights of the two fine-tuning cross-entropy terms.
struct LossWeights {
  double lambda_rel = 1.0;
  double lambda_nov = 2.0;

  void validate() const {
    if (lambda_rel < 0 || lambda_nov < 0)
      throw std::invalid_argument("loss weights must be non-negative");
    if (lambda_rel == 0 && lambda_nov == 0)
      throw std::invalid_argument("loss weights must not both be zero");
  }
};

/// Weights of the identifier and type terms of the masked-entity loss.
struct PretrainWeights {
  double identifier = 1.0;
  double type = 1.0;
};

/// Sizes of every output space, taken from a Vocabulary.
struct LabelSpaces {
  std::size_t tokens = 0;
  std::size_t identifiers = 0;
  std::size_t types = 0;
  std::size_t relations = 0;
  std::size_t novelty = 3;

  static LabelSpaces of(const Vocabulary& v) {
    return {v.size(), v.identifier_labels().size(), v.type_labels().size(),
            v.relation_labels().size(), Vocabulary::novelty_labels().size()};
  }
};

template <class T>
using NamedParameters = std::vector<std::pair<std::string, num::Tensor<T>>>;

/// Training-mode switch plus the dropout stream for one forward pass.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
};

namespace detail {

template <class T>
num::Tensor<T> init_normal(num::Shape shape, Rng& rng, double stddev) {
  std::vector<T> data(num::numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.normal() * stddev);
  return num::Tensor<T>(std::move(shape), std::move(data), true);
}

template <class T>
num::Tensor<T> param_full(num::Shape shape, T value) {
  return num::Tensor<T>::full(std::move(shape), value, true);
}

constexpr double kInitStd = 0.02;

template <class T>
num::Tensor<T> maybe_dropout(const num::Tensor<T>& x, double p,
                             const ForwardContext& ctx) {
  if (!ctx.training || p == 0.0) return x;
  if (!ctx.rng) throw std::logic_error("training forward pass needs an rng");
  return num::dropout(x, static_cast<T>(p), *ctx.rng, true);
}

}  // namespace detail

template <class T>
struct Linear {
  num::Tensor<T> weight;  // [in, out]
  num::Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(detail::init_normal<T>({in, out}, rng, detail::kInitStd)),
        bias(detail::param_full<T>({out}, T(0))) {}

  num::Tensor<T> operator()(const num::Tensor<T>& x) const {
    return num::add_row(num::matmul(x, weight), bias);
  }

  void collect(const std::string& prefix, NamedParameters<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
num::Tensor<T> activate(const num::Tensor<T>& x, Activation a) {
  return a == Activation::Gelu ? num::gelu(x) : num::relu(x);
}

/// One hidden layer of width `hidden`, then a projection to `out` logits.
template <class T>
struct Mlp {
  Linear<T> hidden;
  Linear<T> output;
  Activation activation = Activation::Gelu;

  Mlp() = default;
  Mlp(std::size_t in, std::size_t width, std::size_t out, Activation act, Rng& rng)
      : hidden(in, width, rng), output(width, out, rng), activation(act) {}

  num::Tensor<T> operator()(const num::Tensor<T>& x) const {
    return output(activate(hidden(x), activation));
  }

  void collect(const std::string& prefix, NamedParameters<T>& out) const {
    hidden.collect(prefix + ".hidden", out);
    output.collect(prefix + ".output", out);
  }
};

template <class T>
struct Norm {
  num::Tensor<T> gain;
  num::Tensor<T> shift;

  Norm() = default;
  explicit Norm(std::size_t d)
      : gain(detail::param_full<T>({d}, T(1))),
        shift(detail::param_full<T>({d}, T(0))) {}

  num::Tensor<T> operator()(const num::Tensor<T>& x) const {
    return num::add_row(num::mul_row(num::layer_norm(x, 1, T(1e-5)), gain), shift);
  }

  void collect(const std::string& prefix, NamedParameters<T>& out) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".shift", shift);
  }
};

/// Pre-norm transformer encoder with learned positions.
template <class T>
class Encoder {
 public:
  struct Layer {
    Norm<T> attn_norm;
    Linear<T> query, key, value, attn_out;
    Norm<T> ffn_norm;
    Linear<T> ffn_in, ffn_out;
  };

  Encoder() = default;

  Encoder(const EncoderConfig& cfg, std::size_t vocab_size, Rng& rng)
      : cfg_(cfg), vocab_size_(vocab_size) {
    cfg.validate();
    const auto d = cfg.d_model;
    token_embedding_ = detail::init_normal<T>({vocab_size, d}, rng, detail::kInitStd);
    position_embedding_ = detail::init_normal<T>({cfg.max_len, d}, rng, detail::kInitStd);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      Layer l;
      l.attn_norm = Norm<T>(d);
      l.query = Linear<T>(d, d, rng);
      l.key = Linear<T>(d, d, rng);
      l.value = Linear<T>(d, d, rng);
      l.attn_out = Linear<T>(d, d, rng);
      l.ffn_norm = Norm<T>(d);
      l.ffn_in = Linear<T>(d, cfg.ffn_dim, rng);
      l.ffn_out = Linear<T>(cfg.ffn_dim, d, rng);
      layers_.push_back(std::move(l));
    }
    final_norm_ = Norm<T>(d);
  }

  const EncoderConfig& config() const { return cfg_; }
  std::size_t vocab_size() const { return vocab_size_; }

  /// Hidden states [len, d_model]. PAD positions are excluded as attention keys.
  num::Tensor<T> encode(std::span<const TokenId> ids,
                        const ForwardContext& ctx = {}) const {
    if (ids.empty()) throw std::invalid_argument("encode: empty input");
    if (ids.size() > cfg_.max_len)
      throw std::invalid_argument("encode: input length " + std::to_string(ids.size()) +
                                  " exceeds max_len " + std::to_string(cfg_.max_len));
    const std::size_t len = ids.size();
    std::vector<TokenId> positions(len);
    for (std::size_t i = 0; i < len; ++i) positions[i] = static_cast<TokenId>(i);

    auto x = num::add(num::embedding(token_embedding_, ids),
                      num::embedding(position_embedding_,
                                     std::span<const TokenId>(positions)));
    x = detail::maybe_dropout(x, cfg_.dropout, ctx);

    std::optional<num::Tensor<T>> key_mask;
    if (std::find(ids.begin(), ids.end(), kPadId) != ids.end()) {
      std::vector<T> m(len * len, T(0));
      for (std::size_t q = 0; q < len; ++q)
        for (std::size_t k = 0; k < len; ++k)
          if (ids[k] == kPadId) m[q * len + k] = T(-1e9);
      key_mask = num::Tensor<T>({len, len}, std::move(m));
    }

    const std::size_t dh = cfg_.d_model / cfg_.n_heads;
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
    for (const auto& l : layers_) {
      auto h = l.attn_norm(x);
      auto q = l.query(h), k = l.key(h), v = l.value(h);
      std::vector<num::Tensor<T>> heads;
      heads.reserve(cfg_.n_heads);
      for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
        const auto b = hd * dh, e = b + dh;
        auto scores = num::scale(
            num::matmul(num::slice_cols(q, b, e),
                        num::transpose(num::slice_cols(k, b, e))),
            inv_sqrt_dh);
        if (key_mask) scores = num::add(scores, *key_mask);
        auto probs = detail::maybe_dropout(num::softmax(scores, 1), cfg_.dropout, ctx);
        heads.push_back(num::matmul(probs, num::slice_cols(v, b, e)));
      }
      auto attn = heads.size() == 1 ? heads[0] : num::concat(heads, 1);
      x = num::add(x, detail::maybe_dropout(l.attn_out(attn), cfg_.dropout, ctx));
      auto f = l.ffn_out(activate(l.ffn_in(l.ffn_norm(x)), cfg_.activation));
      x = num::add(x, detail::maybe_dropout(f, cfg_.dropout, ctx));
    }
    return final_norm_(x);
  }

  void collect(const std::string& prefix, NamedParameters<T>& out) const {
    out.emplace_back(prefix + ".token_embedding", token_embedding_);
    out.emplace_back(prefix + ".position_embedding", position_embedding_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto p = prefix + ".layer" + std::to_string(i);
      const auto& l = layers_[i];
      l.attn_norm.collect(p + ".attn_norm", out);
      l.query.collect(p + ".query", out);
      l.key.collect(p + ".key", out);
      l.value.collect(p + ".value", out);
      l.attn_out.collect(p + ".attn_out", out);
      l.ffn_norm.collect(p + ".ffn_norm", out);
      l.ffn_in.collect(p + ".ffn_in", out);
      l.ffn_out.collect(p + ".ffn_out", out);
    }
    final_norm_.collect(prefix + ".final_norm", out);
  }

 private:
  EncoderConfig cfg_;
  std::size_t vocab_size_ = 0;
  num::Tensor<T> token_embedding_;
  num::Tensor<T> position_embedding_;
  std::vector<Layer> layers_;
  Norm<T> final_norm_;
};

/// Mean of the hidden rows in `range`, shape [1, d_model].
template <class T>
num::Tensor<T> mention_repr(const num::Tensor<T>& hidden, TokenRange range) {
  if (range.empty()) throw std::invalid_argument("mention_repr: empty token range");
  if (range.end > hidden.rows())
    throw std::invalid_argument("mention_repr: range end " + std::to_string(range.end) +
                                " beyond sequence of " + std::to_string(hidden.rows()));
  return num::mean(num::slice_rows(hidden, range.begin, range.end), 0);
}

/// Encoder plus identifier and type heads over masked mention representations.
template <class T>
struct PretrainModel {
  Encoder<T> encoder;
  Linear<T> identifier_head;
  Linear<T> type_head;
  PretrainWeights weights;

  PretrainModel() = default;
  PretrainModel(const EncoderConfig& cfg, const LabelSpaces& labels, Rng& rng)
      : encoder(cfg, labels.tokens, rng),
        identifier_head(cfg.d_model, labels.identifiers, rng),
        type_head(cfg.d_model, labels.types, rng) {}

  /// Mean over masked mentions of (identifier CE + type CE).
  num::Tensor<T> loss(const MaskedInstance& inst, const ForwardContext& ctx = {}) const {
    if (inst.masked_targets.empty())
      throw std::invalid_argument("pretrain_loss: instance has no masked targets");
    const auto hidden = encoder.encode(inst.token_ids, ctx);
    return loss_from_hidden(hidden, inst.masked_targets);
  }

  num::Tensor<T> loss_from_hidden(const num::Tensor<T>& hidden,
                                  const std::vector<MaskedTarget>& targets) const {
    const std::size_t n_ids = identifier_head.bias.size();
    const std::size_t n_types = type_head.bias.size();
    std::vector<num::Tensor<T>> terms;
    terms.reserve(targets.size());
    for (const auto& t : targets) {
      if (t.identifier_label >= n_ids || t.type_label >= n_types)
        throw std::out_of_range("pretrain_loss: label index outside vocabulary");
      const auto repr = mention_repr(hidden, t.range);
      auto id_ce = num::cross_entropy(identifier_head(repr), t.identifier_label);
      auto ty_ce = num::cross_entropy(type_head(repr), t.type_label);
      terms.push_back(num::add(num::scale(id_ce, static_cast<T>(weights.identifier)),
                               num::scale(ty_ce, static_cast<T>(weights.type))));
    }
    auto total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = num::add(total, terms[i]);
    return num::scale(total, T(1) / static_cast<T>(targets.size()));
  }

  NamedParameters<T> named_parameters() const {
    NamedParameters<T> out;
    encoder.collect("encoder", out);
    identifier_head.collect("identifier_head", out);
    type_head.collect("type_head", out);
    return out;
  }

};

struct RelationLabels {
  std::size_t relation = 0;
  std::size_t novelty = 0;
};

/// w.lambda_rel * CE(relation) + w.lambda_nov * CE(novelty).
template <class T>
num::Tensor<T> finetune_loss(const num::Tensor<T>& relation_logits,
                             const num::Tensor<T>& novelty_logits,
                             RelationLabels labels, const LossWeights& w) {
  auto rel = num::cross_entropy(relation_logits, labels.relation);
  auto nov = num::cross_entropy(novelty_logits, labels.novelty);
  return num::add(num::scale(rel, static_cast<T>(w.lambda_rel)),
                  num::scale(nov, static_cast<T>(w.lambda_nov)));
}

template <class T>
struct PairLogits {
  num::Tensor<T> relation;  // [1, |relation_labels|]
  num::Tensor<T> novelty;   // [1, |novelty_labels|]
};

/// Encoder plus relation and novelty MLPs over a pooled pair representation.
template <class T>
struct RelationModel {
  Encoder<T> encoder;
  Mlp<T> relation_mlp;
  Mlp<T> novelty_mlp;
  Pooling pooling = Pooling::Cls;

  RelationModel() = default;
  RelationModel(const EncoderConfig& cfg, const LabelSpaces& labels, Rng& rng,
                Pooling pool = Pooling::Cls)
      : encoder(cfg, labels.tokens, rng),
        relation_mlp(cfg.d_model, cfg.d_model, labels.relations, cfg.activation, rng),
        novelty_mlp(cfg.d_model, cfg.d_model, labels.novelty, cfg.activation, rng),
        pooling(pool) {}

  PairLogits<T> forward(const PairTokens& pair, const ForwardContext& ctx = {}) const {
    const auto hidden = encoder.encode(pair.ids, ctx);
    const auto repr = pool(hidden, pair);
    return {relation_mlp(repr), novelty_mlp(repr)};
  }

  NamedParameters<T> named_parameters() const {
    NamedParameters<T> out;
    encoder.collect("encoder", out);
    relation_mlp.collect("relation_mlp", out);
    novelty_mlp.collect("novelty_mlp", out);
    return out;
  }

 private:
  num::Tensor<T> pool(const num::Tensor<T>& hidden, const PairTokens& pair) const {
    auto cls = num::slice_rows(hidden, 0, 1);
    if (pooling == Pooling::Cls) return cls;
    // mean of the SRC-marker rows and of the TGT-marker rows, averaged;
    // falls back to CLS for a role whose markers were truncated away
    auto role_mean = [&](const std::vector<std::size_t>& markers) {
      if (markers.empty()) return cls;
      std::vector<num::Tensor<T>> rows;
      for (auto p : markers) rows.push_back(num::slice_rows(hidden, p, p + 1));
      auto stacked = rows.size() == 1 ? rows[0] : num::concat(rows, 0);
      return num::mean(stacked, 0);
    };
    return num::scale(num::add(role_mean(pair.src_markers), role_mean(pair.tgt_markers)),
                      T(0.5));
  }
};

}  // namespace embre

#endif  // EMBRE_MODEL_HPP
