#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "embre/embre.hpp"

namespace embre::testkit {

struct RandomDocOptions {
  std::size_t min_identifiers = 2;
  std::size_t max_identifiers = 6;
  std::size_t max_mentions_per_identifier = 3;
  bool composite_mentions = true;   // "A/B" mentions carrying two ids
  bool ungrounded_mentions = true;  // mentions with identifier "-"
  bool unicode = true;              // non-ASCII filler and surfaces
  double relation_rate = 0.4;       // chance per unordered pair
};

inline const std::vector<std::string>& entity_types() {
  static const std::vector<std::string> t{"ChemicalEntity", "GeneOrGeneProduct",
                                          "DiseaseOrPhenotypicFeature", "SequenceVariant"};
  return t;
}

inline const std::vector<std::string>& relation_types() {
  static const std::vector<std::string> r{"Association", "Positive_Correlation",
                                          "Negative_Correlation", "Bind"};
  return r;
}

inline std::string random_word(Rng& rng, bool unicode, std::size_t min_len = 2) {
  static const std::string letters = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  static const std::vector<std::string> greek{"α", "β", "γ", "κ", "é"};
  std::string w;
  const std::size_t len = min_len + rng.index(5);
  for (std::size_t i = 0; i < len; ++i) {
    if (unicode && rng.bernoulli(0.08))
      w += greek[rng.index(greek.size())];
    else
      w += letters[rng.index(letters.size())];
  }
  return w;
}

/// A random but strictly valid document: every offset, surface and
/// relation endpoint is consistent, so it survives parse_pubtator.
inline Document random_document(Rng& rng, const std::string& pmid,
                                const RandomDocOptions& opt = {}) {
  const std::size_t n_ids =
      opt.min_identifiers + rng.index(opt.max_identifiers - opt.min_identifiers + 1);
  struct Entity {
    std::string id, type;
    std::vector<std::string> surfaces;
  };
  std::vector<Entity> entities;
  for (std::size_t i = 0; i < n_ids; ++i) {
    Entity e{"ID" + std::to_string(rng.index(1000)) + "_" + std::to_string(i),
             entity_types()[rng.index(entity_types().size())],
             {}};
    const std::size_t variants = 1 + rng.index(2);
    for (std::size_t v = 0; v < variants; ++v) {
      std::string s = random_word(rng, opt.unicode);
      if (rng.bernoulli(0.3)) s += " " + random_word(rng, opt.unicode);
      e.surfaces.push_back(s);
    }
    entities.push_back(std::move(e));
  }

  struct Slot {
    std::string surface, type;
    std::vector<std::string> ids;
  };
  std::vector<Slot> slots;
  for (const auto& e : entities) {
    const std::size_t n = 1 + rng.index(opt.max_mentions_per_identifier);
    for (std::size_t k = 0; k < n; ++k)
      slots.push_back({e.surfaces[rng.index(e.surfaces.size())], e.type, {e.id}});
  }
  if (opt.composite_mentions && entities.size() >= 2 && rng.bernoulli(0.3)) {
    const auto& a = entities[0];
    const auto& b = entities[1];
    slots.push_back({a.surfaces[0] + "/" + b.surfaces[0], a.type, {a.id, b.id}});
  }
  if (opt.ungrounded_mentions && rng.bernoulli(0.3))
    slots.push_back({random_word(rng, opt.unicode, 3), entity_types()[0], {"-"}});
  rng.shuffle(slots);

  static const std::vector<std::string> filler{"the", "of", "in", "with", "was", "and",
                                               "increased", "reduced", ",", ".", "(", ")",
                                               "binds", "cells", "levels", "risk"};
  Document d;
  d.pmid = pmid;
  const std::size_t title_slots = std::min<std::size_t>(slots.size(), 1 + rng.index(2));
  std::size_t cp = 0;  // code points emitted so far into full_text

  auto emit = [&](std::string& part, std::size_t begin_slot, std::size_t end_slot) {
    auto append = [&](const std::string& s) {
      part += s;
      cp += utf8::decode(s).size();
    };
    auto fill = [&] {
      const std::size_t n = rng.index(4);
      for (std::size_t i = 0; i < n; ++i) {
        if (!part.empty()) append(" ");
        const bool wild = opt.unicode && rng.bernoulli(0.1);
        append(wild ? random_word(rng, true) : filler[rng.index(filler.size())]);
      }
    };
    fill();
    for (std::size_t s = begin_slot; s < end_slot; ++s) {
      if (!part.empty()) append(" ");
      const std::size_t start = cp;
      append(slots[s].surface);
      d.mentions.push_back({start, cp, slots[s].surface, slots[s].type, slots[s].ids});
      fill();
    }
    if (part.empty()) append("empty");
  };
  emit(d.title, 0, title_slots);
  cp += 1;  // separator between title and abstract
  emit(d.abstract, title_slots, slots.size());
  d.full_text = d.title + " " + d.abstract;

  for (std::size_t i = 0; i < entities.size(); ++i)
    for (std::size_t j = i + 1; j < entities.size(); ++j)
      if (rng.bernoulli(opt.relation_rate)) {
        auto [a, b] = std::pair(entities[i].id, entities[j].id);
        if (rng.bernoulli(0.5)) std::swap(a, b);
        d.relations.push_back({a, b, relation_types()[rng.index(relation_types().size())],
                               rng.bernoulli(0.5) ? Novelty::Novel : Novelty::No});
      }
  return d;
}

inline Corpus random_corpus(Rng& rng, std::size_t n, const RandomDocOptions& opt = {}) {
  Corpus c;
  for (std::size_t i = 0; i < n; ++i)
    c.push_back(random_document(rng, std::to_string(10000 + i), opt));
  return c;
}

/// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients
/// from turning round-off into huge ratios.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Max relative error between backprop and central differences of a
/// scalar-valued `f` with respect to every entry of every input.
inline double gradcheck(const std::function<num::Tensor<double>()>& f,
                        std::vector<num::Tensor<double>> inputs, double h = 1e-5) {
  for (auto& x : inputs) x.zero_grad();
  auto out = f();
  if (out.size() != 1) throw std::invalid_argument("gradcheck: f must return a scalar");
  out.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& x : inputs)
    analytic.emplace_back(x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                       : std::vector<double>(x.size(), 0.0));
  double worst = 0.0;
  num::NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = f().item();
      data[i] = saved - h;
      const double down = f().item();
      data[i] = saved;
      worst = std::max(worst, relative_error(analytic[k][i], (up - down) / (2 * h)));
    }
  }
  return worst;
}

inline num::Tensor<double> random_tensor(Rng& rng, num::Shape shape, double scale = 1.0,
                                         bool requires_grad = true) {
  std::vector<double> v(num::numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return num::Tensor<double>(std::move(shape), std::move(v), requires_grad);
}


/// Reduces any tensor to a scalar with fixed random weights so that every
/// output entry gets a distinct upstream gradient.
inline num::Tensor<double> weighted_sum(const num::Tensor<double>& x, std::uint64_t seed = 17) {
  Rng rng(seed);
  auto w = random_tensor(rng, x.shape(), 1.0, false);
  return num::sum(num::mul(x, w));
}

struct OpCheck {
  std::string name;
  double max_rel_error;
};

/// Finite-difference check of every differentiable op on random inputs.
inline std::vector<OpCheck> gradcheck_every_op(std::uint64_t seed) {
  using T = num::Tensor<double>;
  Rng rng(seed);
  auto a = random_tensor(rng, {3, 4});
  auto b = random_tensor(rng, {3, 4});
  auto c = random_tensor(rng, {4, 2});
  auto d = random_tensor(rng, {3, 2});
  auto row = random_tensor(rng, {4});
  auto table = random_tensor(rng, {5, 4});
  const std::vector<std::int32_t> ids{3, 0, 3, 1};
  const std::span<const std::int32_t> id_span(ids);

  struct Case {
    const char* name;
    std::function<T()> f;
    std::vector<T> inputs;
  };
  const std::vector<Case> cases{
      {"matmul", [&] { return weighted_sum(num::matmul(a, c)); }, {a, c}},
      {"transpose", [&] { return weighted_sum(num::transpose(a)); }, {a}},
      {"add", [&] { return weighted_sum(num::add(a, b)); }, {a, b}},
      {"mul", [&] { return weighted_sum(num::mul(a, b)); }, {a, b}},
      {"add_row", [&] { return weighted_sum(num::add_row(a, row)); }, {a, row}},
      {"mul_row", [&] { return weighted_sum(num::mul_row(a, row)); }, {a, row}},
      {"scale", [&] { return weighted_sum(num::scale(a, 0.37)); }, {a}},
      {"embedding", [&] { return weighted_sum(num::embedding(table, id_span)); }, {table}},
      {"softmax_rows", [&] { return weighted_sum(num::softmax(a, 1)); }, {a}},
      {"softmax_cols", [&] { return weighted_sum(num::softmax(a, 0)); }, {a}},
      {"layer_norm", [&] { return weighted_sum(num::layer_norm(a, 1)); }, {a}},
      {"relu", [&] { return weighted_sum(num::relu(a)); }, {a}},
      {"gelu", [&] { return weighted_sum(num::gelu(a)); }, {a}},
      {"mean_rows", [&] { return weighted_sum(num::mean(a, 0)); }, {a}},
      {"mean_cols", [&] { return weighted_sum(num::mean(a, 1)); }, {a}},
      {"sum", [&] { return num::scale(num::sum(a), 1.3); }, {a}},
      {"concat_rows", [&] { return weighted_sum(num::concat<double>({a, b}, 0)); }, {a, b}},
      {"concat_cols", [&] { return weighted_sum(num::concat<double>({a, d}, 1)); }, {a, d}},
      {"slice_rows", [&] { return weighted_sum(num::slice_rows(a, 1, 3)); }, {a}},
      {"slice_cols", [&] { return weighted_sum(num::slice_cols(a, 1, 3)); }, {a}},
      {"cross_entropy", [&] { return num::cross_entropy(num::slice_rows(a, 0, 1), 2); }, {a}},
      {"dropout",
       [&] {
         Rng mask(99);  // same stream every evaluation fixes the mask
         return weighted_sum(num::dropout(a, 0.3, mask, true));
       },
       {a}},
  };
  std::vector<OpCheck> out;
  for (const auto& tc : cases) out.push_back({tc.name, gradcheck(tc.f, tc.inputs)});
  return out;
}

}  // namespace embre::testkit
