#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "support.hpp"

using namespace embre;
using embre::testkit::gradcheck;
using embre::testkit::random_tensor;
using T = num::Tensor<double>;
using Matrix = std::vector<std::vector<double>>;

namespace {

Document tiny_doc() {
  Document d;
  d.pmid = "5";
  d.title = "aspirin binds tp53 in cells";
  d.abstract = "tp53 loss and cancer risk with aspirin";
  d.full_text = d.title + " " + d.abstract;
  auto m = [](std::size_t s, std::size_t e, std::string surf, std::string type, std::string id) {
    return Mention{s, e, std::move(surf), std::move(type), {std::move(id)}};
  };
  d.mentions = {m(0, 7, "aspirin", "Chem", "C1"),   m(14, 18, "tp53", "Gene", "G1"),
                m(28, 32, "tp53", "Gene", "G1"),    m(42, 48, "cancer", "Dis", "D1"),
                m(59, 66, "aspirin", "Chem", "C1")};
  d.relations = {{"C1", "G1", "Bind", Novelty::Novel}, {"G1", "D1", "Association", Novelty::No}};
  return d;
}

EncoderConfig small_config(std::size_t d_model = 8, std::size_t heads = 2) {
  EncoderConfig c;
  c.d_model = d_model;
  c.n_layers = 1;
  c.n_heads = heads;
  c.ffn_dim = 2 * d_model;
  c.max_len = 64;
  c.dropout = 0.0;
  c.precision = Precision::F64;
  return c;
}

// Perturbs every parameter away from its tidy initial values (unit gains,
// zero biases) so that checks exercise generic weights.
template <class Params>
void jitter(const Params& params, Rng& rng, double scale) {
  for (const auto& [name, t] : params) {
    T h = t;
    for (auto& v : h.data()) v += rng.normal() * scale;
  }
}

std::map<std::string, T> by_name(const NamedParameters<double>& params) {
  std::map<std::string, T> out;
  for (const auto& [n, t] : params) out.emplace(n, t);
  return out;
}

// --- naive reference forward, written with plain loops ---------------------

Matrix affine(const Matrix& x, const T& w, const T& b) {
  const std::size_t in = w.shape()[0], out = w.shape()[1];
  Matrix y(x.size(), std::vector<double>(out));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < in; ++i) s += x[r][i] * w.at(i, o);
      y[r][o] = s;
    }
  return y;
}

Matrix norm(const Matrix& x, const T& gain, const T& shift) {
  Matrix y = x;
  for (auto& row : y) {
    double mean = 0, var = 0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (std::size_t i = 0; i < row.size(); ++i)
      row[i] = (row[i] - mean) / std::sqrt(var + 1e-5) * gain[i] + shift[i];
  }
  return y;
}

Matrix gelu(Matrix x) {
  for (auto& row : x)
    for (auto& v : row) v = 0.5 * v * (1 + std::erf(v / std::sqrt(2.0)));
  return x;
}

Matrix reference_encode(const std::map<std::string, T>& p, const EncoderConfig& cfg,
                        const std::vector<TokenId>& ids) {
  const std::size_t n = ids.size(), d = cfg.d_model, dh = d / cfg.n_heads;
  Matrix x(n, std::vector<double>(d));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d; ++i)
      x[t][i] = p.at("encoder.token_embedding").at(ids[t], i) +
                p.at("encoder.position_embedding").at(t, i);
  const std::string l = "encoder.layer0.";
  auto h = norm(x, p.at(l + "attn_norm.gain"), p.at(l + "attn_norm.shift"));
  auto q = affine(h, p.at(l + "query.weight"), p.at(l + "query.bias"));
  auto k = affine(h, p.at(l + "key.weight"), p.at(l + "key.bias"));
  auto v = affine(h, p.at(l + "value.weight"), p.at(l + "value.bias"));
  Matrix attn(n, std::vector<double>(d, 0.0));
  for (std::size_t head = 0; head < cfg.n_heads; ++head) {
    const std::size_t off = head * dh;
    for (std::size_t a = 0; a < n; ++a) {
      std::vector<double> w(n);
      double mx = -1e300, z = 0;
      for (std::size_t b = 0; b < n; ++b) {
        if (ids[b] == kPadId) continue;
        double s = 0;
        for (std::size_t i = 0; i < dh; ++i) s += q[a][off + i] * k[b][off + i];
        w[b] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, w[b]);
      }
      for (std::size_t b = 0; b < n; ++b) {
        w[b] = ids[b] == kPadId ? 0.0 : std::exp(w[b] - mx);
        z += w[b];
      }
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < dh; ++i) attn[a][off + i] += w[b] / z * v[b][off + i];
    }
  }
  auto o = affine(attn, p.at(l + "attn_out.weight"), p.at(l + "attn_out.bias"));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d; ++i) x[t][i] += o[t][i];
  auto f = affine(gelu(affine(norm(x, p.at(l + "ffn_norm.gain"), p.at(l + "ffn_norm.shift")),
                              p.at(l + "ffn_in.weight"), p.at(l + "ffn_in.bias"))),
                  p.at(l + "ffn_out.weight"), p.at(l + "ffn_out.bias"));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d; ++i) x[t][i] += f[t][i];
  return norm(x, p.at("encoder.final_norm.gain"), p.at("encoder.final_norm.shift"));
}

double naive_ce(const std::vector<double>& logits, std::size_t target) {
  double z = 0;
  for (double v : logits) z += std::exp(v);
  return std::log(z) - logits[target];
}

}  // namespace

TEST(Encoder, OutputShapeAndErrors) {
  const auto d = tiny_doc();
  const auto vocab = build_vocab({d});
  Rng rng(1);
  Encoder<double> enc(small_config(), vocab.size(), rng);
  const auto tok = tokenize(d, vocab);
  const auto h = enc.encode(tok.token_ids);
  EXPECT_EQ(h.shape(), (num::Shape{tok.token_ids.size(), 8}));
  std::vector<TokenId> too_long(65, kClsId);
  EXPECT_THROW(enc.encode(too_long), std::invalid_argument);
  std::vector<TokenId> unknown{kClsId, static_cast<TokenId>(vocab.size())};
  EXPECT_THROW(enc.encode(unknown), num::ShapeError);
  EXPECT_THROW(EncoderConfig{}.from_json({{"d_model", 10}, {"n_heads", 4}}), std::invalid_argument);
}

TEST(Encoder, PadSuffixDoesNotChangeRealRows) {
  const auto d = tiny_doc();
  const auto vocab = build_vocab({d});
  Rng rng(2);
  Encoder<double> enc(small_config(), vocab.size(), rng);
  jitter([&] {
    NamedParameters<double> p;
    enc.collect("e", p);
    return p;
  }(), rng, 0.3);
  auto ids = tokenize(d, vocab).token_ids;
  const auto base = enc.encode(ids);
  for (std::size_t pads : {1u, 3u, 7u}) {
    auto padded = ids;
    padded.insert(padded.end(), pads, kPadId);
    const auto h = enc.encode(padded);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(h.at(r, c), base.at(r, c), 1e-12);
  }
}

TEST(Encoder, MatchesNaiveReferenceForward) {
  const auto d = tiny_doc();
  const auto vocab = build_vocab({d});
  Rng rng(3);
  const auto cfg = small_config();
  RelationModel<double> model(cfg, LabelSpaces::of(vocab), rng);
  jitter(model.named_parameters(), rng, 0.2);
  const auto p = by_name(model.named_parameters());
  auto ids = tokenize(d, vocab).token_ids;
  ids.push_back(kPadId);
  const auto got = model.encoder.encode(ids);
  const auto want = reference_encode(p, cfg, ids);
  for (std::size_t r = 0; r < ids.size() - 1; ++r)
    for (std::size_t c = 0; c < cfg.d_model; ++c) EXPECT_NEAR(got.at(r, c), want[r][c], 1e-12);

  // relation and novelty heads over the CLS row
  const auto pair = insert_pair_tags(tokenize(d, vocab), d, "C1", "G1", vocab);
  const auto logits = model.forward(pair);
  const auto hidden = reference_encode(p, cfg, pair.ids);
  const Matrix cls{hidden[0]};
  const auto rel = affine(gelu(affine(cls, p.at("relation_mlp.hidden.weight"),
                                      p.at("relation_mlp.hidden.bias"))),
                          p.at("relation_mlp.output.weight"), p.at("relation_mlp.output.bias"));
  const auto nov = affine(gelu(affine(cls, p.at("novelty_mlp.hidden.weight"),
                                      p.at("novelty_mlp.hidden.bias"))),
                          p.at("novelty_mlp.output.weight"), p.at("novelty_mlp.output.bias"));
  ASSERT_EQ(logits.relation.size(), vocab.relation_labels().size());
  ASSERT_EQ(logits.novelty.size(), 3u);
  for (std::size_t i = 0; i < rel[0].size(); ++i) EXPECT_NEAR(logits.relation[i], rel[0][i], 1e-12);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(logits.novelty[i], nov[0][i], 1e-12);
}

TEST(Mlp, HandSetWeights) {
  Rng rng(0);
  Mlp<double> mlp(2, 2, 2, Activation::Relu, rng);
  // hidden = relu([1, -2] W1 + b1), W1 = [[1, 2], [3, -1]], b1 = [0.5, 0]
  T(mlp.hidden.weight).values() = {1, 2, 3, -1};
  T(mlp.hidden.bias).values() = {0.5, 0};
  T(mlp.output.weight).values() = {2, 0, 1, -1};
  T(mlp.output.bias).values() = {0, 1};
  // pre-activation [1 - 6 + 0.5, 2 + 2] = [-4.5, 4] -> relu [0, 4]
  // output [0*2 + 4*1, 0*0 + 4*-1 + 1] = [4, -3]
  const auto y = mlp(T({1, 2}, {1, -2}));
  EXPECT_DOUBLE_EQ(y[0], 4.0);
  EXPECT_DOUBLE_EQ(y[1], -3.0);
}

TEST(MentionRepr, MeanOfRows) {
  Rng rng(4);
  auto h = random_tensor(rng, {6, 5}, 1.0, false);
  const auto one = mention_repr(h, {2, 3});
  for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(one[c], h.at(2, c));
  EXPECT_THROW(mention_repr(h, {3, 3}), std::invalid_argument);
  EXPECT_THROW(mention_repr(h, {4, 7}), std::invalid_argument);

  auto same = T({3, 2}, {1.5, -2, 1.5, -2, 1.5, -2});
  const auto r = mention_repr(same, {0, 3});
  EXPECT_DOUBLE_EQ(r[0], 1.5);
  EXPECT_DOUBLE_EQ(r[1], -2.0);

  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(12), d = 1 + rng.index(9);
    auto x = random_tensor(rng, {n, d}, 3.0, false);
    const std::size_t b = rng.index(n), e = b + 1 + rng.index(n - b);
    const auto got = mention_repr(x, {b, e});
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0;
      for (std::size_t r = b; r < e; ++r) s += x.at(r, c);
      EXPECT_NEAR(got[c], s / static_cast<double>(e - b), 1e-12);
    }
  }
}

TEST(PretrainLoss, RiggedHeadsGiveZero) {
  const auto d = tiny_doc();
  const auto vocab = build_vocab({d});
  Rng rng(5);
  PretrainModel<double> model(small_config(), LabelSpaces::of(vocab), rng);
  const auto inst = apply_entity_mask(tokenize(d, vocab), d, {"D1"}, vocab);
  ASSERT_EQ(inst.masked_targets.size(), 1u);
  const auto& t = inst.masked_targets[0];
  for (auto* head : {&model.identifier_head, &model.type_head}) {
    for (auto& v : T(head->weight).values()) v = 0;
    for (auto& v : T(head->bias).values()) v = 0;
  }
  T(model.identifier_head.bias).values()[t.identifier_label] = 60;
  T(model.type_head.bias).values()[t.type_label] = 60;
  const double loss = model.loss(inst).item();
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-20);
}

TEST(PretrainLoss, FreshHeadsNearUniform) {
  Rng rng(derive_seed(6, "model.uniform"));
  const auto corpus = testkit::random_corpus(rng, 30);
  const auto vocab = build_vocab(corpus);
  const auto labels = LabelSpaces::of(vocab);
  PretrainModel<double> model(small_config(16, 2), labels, rng);
  const auto instances = build_pretraining_instances(corpus, vocab, MaskingConfig{}, 9, 64);
  double total = 0;
  for (const auto& inst : instances) total += model.loss(inst).item();
  const double mean = total / static_cast<double>(instances.size());
  const double expected = std::log(static_cast<double>(labels.identifiers)) +
                          std::log(static_cast<double>(labels.types));
  EXPECT_NEAR(mean, expected, 0.1 * expected);
}

TEST(PretrainLoss, EqualsPerMentionAverage) {
  const auto d = tiny_doc();
  const auto vocab = build_vocab({d});
  Rng rng(7);
  PretrainModel<double> model(small_config(), LabelSpaces::of(vocab), rng);
  jitter(model.named_parameters(), rng, 0.3);
  model.weights = {1.0, 1.0};
  const auto inst = apply_entity_mask(tokenize(d, vocab), d, {"G1"}, vocab);
  ASSERT_EQ(inst.masked_targets.size(), 2u);

  const auto hidden = model.encoder.encode(inst.token_ids);
  double sum = 0;
  for (const auto& t : inst.masked_targets) {
    std::vector<double> repr(8, 0.0);
    for (std::size_t r = t.range.begin; r < t.range.end; ++r)
      for (std::size_t c = 0; c < 8; ++c) repr[c] += hidden.at(r, c) / t.range.size();
    const auto id_logits = affine({repr}, model.identifier_head.weight, model.identifier_head.bias);
    const auto ty_logits = affine({repr}, model.type_head.weight, model.type_head.bias);
    sum += naive_ce(id_logits[0], t.identifier_label) + naive_ce(ty_logits[0], t.type_label);
  }
  EXPECT_NEAR(model.loss(inst).item(), sum / 2.0, 1e-12);

  MaskedInstance empty = inst;
  empty.masked_targets.clear();
  EXPECT_THROW(model.loss(empty), std::invalid_argument);
  MaskedInstance bad = inst;
  bad.masked_targets[0].identifier_label = 999;
  EXPECT_THROW(model.loss(bad), std::out_of_range);
}

TEST(FinetuneLoss, PerfectAndEqualCe) {
  const LossWeights w{1.0, 2.0};
  const auto perfect = finetune_loss(T({1, 3}, {80, 0, 0}), T({1, 3}, {0, 80, 0}), {0, 1}, w);
  EXPECT_LT(perfect.item(), 1e-30);
  // equal logits on every class: each CE is ln 3
  const auto c = std::log(3.0);
  const auto l = finetune_loss(T({1, 3}, {0.7, 0.7, 0.7}), T({1, 3}, {-1, -1, -1}), {2, 0}, w);
  EXPECT_NEAR(l.item(), 3 * c, 1e-14);
  EXPECT_THROW(finetune_loss(T({1, 3}, {0, 0, 0}), T({1, 3}, {0, 0, 0}), {3, 0}, w),
               std::out_of_range);
  EXPECT_THROW((LossWeights{0, 0}.validate()), std::invalid_argument);
  EXPECT_THROW((LossWeights{-1, 1}.validate()), std::invalid_argument);
}

TEST(FinetuneLoss, LinearInWeights) {
  Rng rng(derive_seed(8, "model.linearity"));
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + rng.index(8);
    auto rel = random_tensor(rng, {1, k}, 2.0, false);
    auto nov = random_tensor(rng, {1, 3}, 2.0, false);
    const RelationLabels y{rng.index(k), rng.index(3)};
    const double l1 = 5 * rng.uniform(), l2 = 5 * rng.uniform();
    const double full = finetune_loss(rel, nov, y, {l1, l2}).item();
    const double only_rel = finetune_loss(rel, nov, y, {1, 0}).item();
    const double only_nov = finetune_loss(rel, nov, y, {0, 1}).item();
    EXPECT_NEAR(full, l1 * only_rel + l2 * only_nov, 1e-10);
    EXPECT_GE(full, 0.0);
  }
}

TEST(FinetuneLoss, NoveltyGradientScalesWithWeight) {
  const auto d = tiny_doc();
  const auto vocab = build_vocab({d});
  Rng rng(9);
  RelationModel<double> model(small_config(), LabelSpaces::of(vocab), rng);
  const auto params = model.named_parameters();
  const auto pair = insert_pair_tags(tokenize(d, vocab), d, "C1", "G1", vocab);
  const RelationLabels y{*vocab.relation_index("Bind"), Vocabulary::novelty_index(Novelty::Novel)};

  auto grads = [&](LossWeights w) {
    for (const auto& [n, t] : params) T(t).zero_grad();
    auto logits = model.forward(pair);
    finetune_loss(logits.relation, logits.novelty, y, w).backward();
    std::vector<double> g;
    for (const auto& [n, t] : params)
      for (std::size_t i = 0; i < t.size(); ++i) g.push_back(t.has_grad() ? t.grad()[i] : 0.0);
    return g;
  };
  const auto rel_only = grads({1, 0});
  const auto base = grads({1, 2});
  const double t = 3.5;
  const auto scaled = grads({1, 2 * t});
  double worst = 0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    const double nov = base[i] - rel_only[i];
    const double nov_scaled = scaled[i] - rel_only[i];
    worst = std::max(worst, std::abs(nov_scaled - t * nov));
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(RelationModel, OutputWidthsAndPooling) {
  const auto d = tiny_doc();
  const auto vocab = build_vocab({d});
  for (auto pooling : {Pooling::Cls, Pooling::EntityMarkers}) {
    Rng rng(10);
    RelationModel<double> model(small_config(), LabelSpaces::of(vocab), rng, pooling);
    const auto out = model.forward(insert_pair_tags(tokenize(d, vocab), d, "C1", "D1", vocab));
    EXPECT_EQ(out.relation.shape(), (num::Shape{1, vocab.relation_labels().size()}));
    EXPECT_EQ(out.novelty.shape(), (num::Shape{1, 3}));
  }
}

TEST(RelationModel, TruncationHidesTail) {
  auto a = tiny_doc();
  auto b = a;
  b.abstract += " and more words past the cut";
  b.full_text = b.title + " " + b.abstract;
  const auto vocab = build_vocab({a, b});
  Rng rng(11);
  RelationModel<double> model(small_config(), LabelSpaces::of(vocab), rng);
  jitter(model.named_parameters(), rng, 0.2);
  const auto pa = insert_pair_tags(tokenize(a, vocab), a, "C1", "G1", vocab, 12);
  const auto pb = insert_pair_tags(tokenize(b, vocab), b, "C1", "G1", vocab, 12);
  ASSERT_EQ(pa.ids, pb.ids);
  const auto la = model.forward(pa), lb = model.forward(pb);
  EXPECT_EQ(la.relation.values(), lb.relation.values());
  EXPECT_EQ(la.novelty.values(), lb.novelty.values());
}

TEST(RelationModel, ArgmaxInvariantToShift) {
  Rng rng(12);
  Vocabulary vocab = build_vocab({tiny_doc()});
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> rel(vocab.relation_labels().size()), nov(3);
    for (auto& v : rel) v = rng.normal();
    for (auto& v : nov) v = rng.normal();
    const auto a = decode_pair(rel, nov, vocab, "C1", "G1");
    const double shift = 100 * rng.normal();
    for (auto& v : rel) v += shift;
    EXPECT_EQ(decode_pair(rel, nov, vocab, "C1", "G1"), a);
  }
}

// End-to-end finite-difference checks through every parameter of a
// d_model=8, single-layer model.
TEST(GradCheck, PretrainLossEndToEnd) {
  const auto d = tiny_doc();
  const auto vocab = build_vocab({d});
  Rng rng(13);
  PretrainModel<double> model(small_config(), LabelSpaces::of(vocab), rng);
  jitter(model.named_parameters(), rng, 0.3);
  const auto inst = apply_entity_mask(tokenize(d, vocab), d, {"G1", "D1"}, vocab);
  std::vector<T> inputs;
  for (const auto& [n, t] : model.named_parameters()) inputs.push_back(t);
  EXPECT_LT(gradcheck([&] { return model.loss(inst); }, inputs), 1e-4);
}

TEST(GradCheck, FinetuneLossEndToEnd) {
  const auto d = tiny_doc();
  const auto vocab = build_vocab({d});
  for (auto pooling : {Pooling::Cls, Pooling::EntityMarkers}) {
    Rng rng(14);
    RelationModel<double> model(small_config(), LabelSpaces::of(vocab), rng, pooling);
    jitter(model.named_parameters(), rng, 0.3);
    const auto pair = insert_pair_tags(tokenize(d, vocab), d, "G1", "D1", vocab);
    const RelationLabels y{*vocab.relation_index("Association"),
                           Vocabulary::novelty_index(Novelty::No)};
    std::vector<T> inputs;
    for (const auto& [n, t] : model.named_parameters()) inputs.push_back(t);
    const double err = gradcheck(
        [&] {
          auto l = model.forward(pair);
          return finetune_loss(l.relation, l.novelty, y, LossWeights{});
        },
        inputs);
    EXPECT_LT(err, 1e-4);
  }
}
