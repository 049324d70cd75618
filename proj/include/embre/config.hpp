#ifndef EMBRE_CONFIG_HPP
#define EMBRE_CONFIG_HPP

#include <cctype>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "json.hpp"

#include "embre/common.hpp"
#include "embre/pipeline.hpp"

namespace embre {

namespace toml {

/// Reads the TOML subset used by run configs into JSON: [tables] and
/// [dotted.tables], bare or quoted keys, basic and literal strings,
/// integers, floats, booleans and single-line arrays.
class Reader {
 public:
  Reader(std::string source_name) : name_(std::move(source_name)) {}

  nlohmann::json parse(const std::string& text) {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    std::istringstream in(text);
    std::string raw;
    while (std::getline(in, raw)) {
      ++line_;
      if (!raw.empty() && raw.back() == '\r') raw.pop_back();
      s_ = raw;
      pos_ = 0;
      skip_ws();
      if (at_end_or_comment()) continue;
      if (s_[pos_] == '[') {
        ++pos_;
        skip_ws();
        table = &root;
        while (true) {
          const auto key = parse_key();
          auto& next = (*table)[key];
          if (next.is_null()) next = nlohmann::json::object();
          if (!next.is_object()) fail("'" + key + "' is not a table");
          table = &next;
          skip_ws();
          if (peek() == '.') {
            ++pos_;
            skip_ws();
            continue;
          }
          break;
        }
        expect(']');
      } else {
        const auto key = parse_key();
        skip_ws();
        expect('=');
        skip_ws();
        if (table->contains(key)) fail("duplicate key '" + key + "'");
        (*table)[key] = parse_value();
      }
      skip_ws();
      if (!at_end_or_comment()) fail("unexpected trailing characters");
    }
    return root;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw DataError(name_ + ":" + std::to_string(line_) + ": " + what);
  }

  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  bool at_end_or_comment() const { return pos_ >= s_.size() || s_[pos_] == '#'; }
  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  std::string parse_key() {
    if (peek() == '"') return parse_basic_string();
    if (peek() == '\'') return parse_literal_string();
    const auto start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) ||
                                s_[pos_] == '_' || s_[pos_] == '-'))
      ++pos_;
    if (pos_ == start) fail("expected a key");
    return s_.substr(start, pos_ - start);
  }

  std::string parse_basic_string() {
    expect('"');
    std::string out;
    while (true) {
      if (pos_ >= s_.size()) fail("unterminated string");
      const char c = s_[pos_++];
      if (c == '"') return out;
      if (c != '\\') {
        out.push_back(c);
        continue;
      }
      if (pos_ >= s_.size()) fail("unterminated escape");
      const char e = s_[pos_++];
      switch (e) {
        case '"': out.push_back('"'); break;
        case '\\': out.push_back('\\'); break;
        case 'n': out.push_back('\n'); break;
        case 't': out.push_back('\t'); break;
        case 'r': out.push_back('\r'); break;
        case 'u': {
          if (pos_ + 4 > s_.size()) fail("short \\u escape");
          const auto cp = std::stoul(s_.substr(pos_, 4), nullptr, 16);
          pos_ += 4;
          utf8::append(out, static_cast<char32_t>(cp));
          break;
        }
        default: fail(std::string("unknown escape \\") + e);
      }
    }
  }

  std::string parse_literal_string() {
    expect('\'');
    const auto end = s_.find('\'', pos_);
    if (end == std::string::npos) fail("unterminated string");
    auto out = s_.substr(pos_, end - pos_);
    pos_ = end + 1;
    return out;
  }

  nlohmann::json parse_value() {
    const char c = peek();
    if (c == '"') return parse_basic_string();
    if (c == '\'') return parse_literal_string();
    if (c == '[') {
      ++pos_;
      nlohmann::json arr = nlohmann::json::array();
      skip_ws();
      if (peek() == ']') {
        ++pos_;
        return arr;
      }
      while (true) {
        skip_ws();
        arr.push_back(parse_value());
        skip_ws();
        if (peek() == ',') {
          ++pos_;
          skip_ws();
          if (peek() == ']') {
            ++pos_;
            return arr;
          }
          continue;
        }
        expect(']');
        return arr;
      }
    }
    const auto start = pos_;
    while (pos_ < s_.size() && s_[pos_] != ',' && s_[pos_] != ']' && s_[pos_] != '#' &&
           s_[pos_] != ' ' && s_[pos_] != '\t')
      ++pos_;
    std::string tok = s_.substr(start, pos_ - start);
    if (tok == "true") return true;
    if (tok == "false") return false;
    if (tok.empty()) fail("expected a value");
    std::erase(tok, '_');
    const bool is_float = tok.find_first_of(".eE") != std::string::npos ||
                          tok.find("inf") != std::string::npos ||
                          tok.find("nan") != std::string::npos;
    try {
      std::size_t used = 0;
      if (is_float) {
        const double v = std::stod(tok, &used);
        if (used == tok.size()) return v;
      } else {
        const long long v = std::stoll(tok, &used, 10);
        if (used == tok.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("cannot parse value '" + tok + "'");
  }

  std::string name_;
  std::size_t line_ = 0;
  std::string s_;
  std::size_t pos_ = 0;
};

inline nlohmann::json parse(const std::string& text, const std::string& source_name = "<toml>") {
  return Reader(source_name).parse(text);
}

}  // namespace toml

struct RunPaths {
  std::string train;
  std::string dev;
  std::string test;
  std::string vocab;
  std::string pretrained;
  std::string finetuned;
  std::string predictions;
  std::string report;
};

/// Fully resolved run configuration. Defaults are the published
/// hyperparameters (masking threshold 0.2, 15/15 epochs, lr 1e-5,
/// batch 128, loss weights 1 and 2).
struct RunConfig {
  EncoderConfig encoder;
  TrainConfig train;
  std::size_t min_freq = 1;
  RunPaths paths;
  std::uint64_t seed = 0;
  std::string log_level = "info";
  std::size_t workers = 1;

  /// Propagates the run seed into every stochastic component.
  void apply_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
    train.masking.seed = derive_seed(s, "masking");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["log_level"] = log_level;
    j["workers"] = workers;
    j["encoder"] = encoder.to_json();
    j["vocab"] = {{"min_freq", min_freq}};
    j["train"] = {{"epochs_pretrain", train.epochs_pretrain},
                  {"epochs_finetune", train.epochs_finetune},
                  {"batch_size", train.batch_size},
                  {"lr", train.lr},
                  {"selection_metric", to_string(train.selection_metric)},
                  {"negative_downsample_ratio", train.negative_downsample_ratio},
                  {"ordered_pairs", train.ordered_pairs},
                  {"pooling", train.pooling == Pooling::Cls ? "cls" : "entity_markers"}};
    j["masking"] = {{"threshold", train.masking.threshold},
                    {"min_unmasked_identifiers", train.masking.min_unmasked_identifiers},
                    {"min_masked_identifiers", train.masking.min_masked_identifiers},
                    {"protect_annotated_pairs", train.masking.protect_annotated_pairs}};
    j["loss"] = {{"lambda_rel", train.loss.lambda_rel},
                 {"lambda_nov", train.loss.lambda_nov},
                 {"pretrain_identifier_weight", train.pretrain_weights.identifier},
                 {"pretrain_type_weight", train.pretrain_weights.type}};
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& [a, b] : train.candidates.allowed_type_pairs) pairs.push_back(a + ":" + b);
    j["candidates"] = {{"allowed_type_pairs", pairs}};
    j["paths"] = {{"train", paths.train},           {"dev", paths.dev},
                  {"test", paths.test},             {"vocab", paths.vocab},
                  {"pretrained", paths.pretrained}, {"finetuned", paths.finetuned},
                  {"predictions", paths.predictions}, {"report", paths.report}};
    return j;
  }

  /// Builds a config from parsed JSON/TOML. Relative paths resolve against
  /// `base_dir`. Unknown sections or keys are rejected.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    RunConfig c;
    try {
      check_keys(j, "", {"seed", "log_level", "workers", "encoder", "vocab", "train", "masking",
                         "loss", "candidates", "paths"});
      c.apply_seed(j.value("seed", std::uint64_t{0}));
      c.log_level = j.value("log_level", c.log_level);
      c.workers = j.value("workers", c.workers);
      if (j.contains("encoder")) {
        check_keys(j["encoder"], "encoder",
                   {"d_model", "n_layers", "n_heads", "ffn_dim", "max_len", "dropout", "precision",
                    "activation"});
        c.encoder = EncoderConfig::from_json(j["encoder"]);
      }
      if (j.contains("vocab")) {
        check_keys(j["vocab"], "vocab", {"min_freq"});
        c.min_freq = j["vocab"].value("min_freq", c.min_freq);
      }
      auto& t = c.train;
      if (j.contains("train")) {
        const auto& s = j["train"];
        check_keys(s, "train",
                   {"epochs_pretrain", "epochs_finetune", "batch_size", "lr", "selection_metric",
                    "negative_downsample_ratio", "ordered_pairs", "pooling"});
        t.epochs_pretrain = s.value("epochs_pretrain", t.epochs_pretrain);
        t.epochs_finetune = s.value("epochs_finetune", t.epochs_finetune);
        t.batch_size = s.value("batch_size", t.batch_size);
        t.lr = s.value("lr", t.lr);
        t.selection_metric =
            parse_match_level(s.value("selection_metric", to_string(t.selection_metric)));
        t.negative_downsample_ratio =
            s.value("negative_downsample_ratio", t.negative_downsample_ratio);
        t.ordered_pairs = s.value("ordered_pairs", t.ordered_pairs);
        const auto pool = s.value("pooling", std::string("cls"));
        if (pool == "cls") t.pooling = Pooling::Cls;
        else if (pool == "entity_markers") t.pooling = Pooling::EntityMarkers;
        else throw std::invalid_argument("unknown pooling '" + pool + "'");
      }
      if (j.contains("masking")) {
        const auto& s = j["masking"];
        check_keys(s, "masking",
                   {"threshold", "min_unmasked_identifiers", "min_masked_identifiers",
                    "protect_annotated_pairs"});
        t.masking.threshold = s.value("threshold", t.masking.threshold);
        t.masking.min_unmasked_identifiers =
            s.value("min_unmasked_identifiers", t.masking.min_unmasked_identifiers);
        t.masking.min_masked_identifiers =
            s.value("min_masked_identifiers", t.masking.min_masked_identifiers);
        t.masking.protect_annotated_pairs =
            s.value("protect_annotated_pairs", t.masking.protect_annotated_pairs);
      }
      if (j.contains("loss")) {
        const auto& s = j["loss"];
        check_keys(s, "loss",
                   {"lambda_rel", "lambda_nov", "pretrain_identifier_weight",
                    "pretrain_type_weight"});
        t.loss.lambda_rel = s.value("lambda_rel", t.loss.lambda_rel);
        t.loss.lambda_nov = s.value("lambda_nov", t.loss.lambda_nov);
        t.pretrain_weights.identifier =
            s.value("pretrain_identifier_weight", t.pretrain_weights.identifier);
        t.pretrain_weights.type = s.value("pretrain_type_weight", t.pretrain_weights.type);
      }
      if (j.contains("candidates")) {
        check_keys(j["candidates"], "candidates", {"allowed_type_pairs"});
        for (const auto& p : j["candidates"].value("allowed_type_pairs", nlohmann::json::array())) {
          const auto s = p.get<std::string>();
          const auto colon = s.find(':');
          if (colon == std::string::npos)
            throw std::invalid_argument("allowed_type_pairs entry '" + s + "' must be TYPE:TYPE");
          t.candidates.allowed_type_pairs.emplace(s.substr(0, colon), s.substr(colon + 1));
        }
      }
      if (j.contains("paths")) {
        const auto& s = j["paths"];
        check_keys(s, "paths",
                   {"train", "dev", "test", "vocab", "pretrained", "finetuned", "predictions",
                    "report"});
        auto path = [&](const char* key) {
          std::string v = s.value(key, std::string());
          if (v.empty() || base_dir.empty()) return v;
          std::filesystem::path p(v);
          return p.is_absolute() ? v : (base_dir / p).lexically_normal().string();
        };
        c.paths = {path("train"),      path("dev"),       path("test"),
                   path("vocab"),      path("pretrained"), path("finetuned"),
                   path("predictions"), path("report")};
      }
      c.train.validate();
      c.encoder.validate();
      if (c.workers < 1) throw std::invalid_argument("workers must be >= 1");
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("config: ") + e.what());
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("config: ") + e.what());
    }
    return c;
  }

 private:
  static void check_keys(const nlohmann::json& j, const std::string& section,
                         std::initializer_list<const char*> allowed) {
    if (!j.is_object())
      throw DataError("config: " + (section.empty() ? std::string("root") : section) +
                      " must be a table");
    for (const auto& [key, value] : j.items()) {
      (void)value;
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
        throw DataError("config: unknown key '" + (section.empty() ? key : section + "." + key) +
                        "'");
    }
  }
};

/// Reads a TOML or JSON (by .json extension or leading '{') run config.
inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto first = text.find_first_not_of(" \t\r\n");
  const bool json = std::filesystem::path(path).extension() == ".json" ||
                    (first != std::string::npos && text[first] == '{');
  nlohmann::json j;
  if (json) {
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ": " + e.what());
    }
  } else {
    j = toml::parse(text, path);
  }
  return RunConfig::from_json(j, std::filesystem::path(path).parent_path());
}

}  // namespace embre

#endif  // EMBRE_CONFIG_HPP
