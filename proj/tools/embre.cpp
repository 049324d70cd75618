// embre: single entry point for vocab building, masking preview,
// pretraining, fine-tuning, prediction and evaluation.
//
// Exit codes: 0 ok, 1 usage, 2 data/parse/checkpoint error, 3 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "embre/embre.hpp"

namespace {

using namespace embre;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A ParseError re-raised with the file path in front.
struct FileParseError : DataError {
  using DataError::DataError;
};

struct Options {
  std::string config;
  std::string corpus;
  std::string dev;
  std::string vocab;
  std::string ckpt;
  std::string out;
  std::string gold;
  std::string pred;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::size_t epoch = 1;
};

enum class Level { Quiet, Info, Debug };

Level parse_level(const std::string& s) {
  if (s == "quiet") return Level::Quiet;
  if (s == "info") return Level::Info;
  if (s == "debug") return Level::Debug;
  throw DataError("config: log_level must be quiet, info or debug");
}

class Logger {
 public:
  explicit Logger(Level level) : level_(level) {}
  void info(const std::string& line) const {
    if (level_ != Level::Quiet) std::cerr << line << '\n';
  }
  // Per-document events (skips, truncation) only show at debug.
  LogSink sink() const {
    return [this](const std::string& line) {
      if (level_ == Level::Debug || line.rfind("event=pretrain_epoch", 0) == 0 ||
          line.rfind("event=finetune_epoch", 0) == 0)
        std::cerr << line << '\n';
    };
  }

 private:
  Level level_;
};

std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(std::string("cannot open ") + what + " " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << bytes;
  if (!out) throw DataError("failed writing " + path);
}

Corpus read_corpus(const std::string& path) {
  const auto text = read_file(path, "corpus");
  try {
    return parse_pubtator(text);
  } catch (const ParseError& e) {
    throw FileParseError(path + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

Vocabulary read_vocab(const std::string& path) {
  try {
    return Vocabulary::parse(read_file(path, "vocabulary"));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

// Flag value if given, else the config path, else a usage error.
std::string pick(const std::string& flag, const std::string& fallback, const char* name) {
  if (!flag.empty()) return flag;
  if (!fallback.empty()) return fallback;
  throw UsageError(std::string("missing --") + name + " (and no matching path in config)");
}

RunConfig resolve_config(const Options& o, const Logger*& logger_out,
                         std::optional<Logger>& logger_storage) {
  if (o.config.empty()) throw UsageError("--config is required");
  auto cfg = load_config(o.config);
  if (o.seed) cfg.apply_seed(*o.seed);
  if (o.workers) {
    if (*o.workers < 1) throw UsageError("--workers must be >= 1");
    cfg.workers = *o.workers;
  }
  logger_storage.emplace(parse_level(cfg.log_level));
  logger_out = &*logger_storage;
  logger_storage->info("event=config path=" + o.config + " resolved=" + cfg.to_json().dump());
  return cfg;
}

PairOptions pair_options(const RunConfig& cfg) {
  return {cfg.encoder.max_len, cfg.train.ordered_pairs, cfg.train.candidates};
}

template <class T>
int run_pretrain(const RunConfig& cfg, const Options& o, const Logger& log) {
  const auto corpus = read_corpus(pick(o.corpus, cfg.paths.train, "corpus"));
  const auto vocab = read_vocab(pick(o.vocab, cfg.paths.vocab, "vocab"));
  const auto out = pick(o.out, cfg.paths.pretrained, "out");
  log.info("event=pretrain_start documents=" + std::to_string(corpus.size()) +
           " precision=" + to_string(precision_of<T>()));
  auto result = pretrain<T>(corpus, vocab, cfg.encoder, cfg.train, log.sink());
  save_checkpoint(result.checkpoint, out);
  log.info("event=pretrain_done checkpoint=" + out);
  return kOk;
}

template <class T>
int run_finetune(const RunConfig& cfg, const Options& o, const Logger& log) {
  const auto train = read_corpus(pick(o.corpus, cfg.paths.train, "corpus"));
  const auto dev = read_corpus(pick(o.dev, cfg.paths.dev, "dev"));
  const auto vocab = read_vocab(pick(o.vocab, cfg.paths.vocab, "vocab"));
  const auto out = pick(o.out, cfg.paths.finetuned, "out");
  const auto init_path = o.ckpt.empty() ? cfg.paths.pretrained : o.ckpt;
  std::optional<Checkpoint> init;
  if (!init_path.empty()) {
    init = load_checkpoint(init_path);
    if (init->encoder.precision != precision_of<T>())
      throw CheckpointError(init_path + ": checkpoint precision " +
                            to_string(init->encoder.precision) + " differs from config");
  }
  log.info("event=finetune_start documents=" + std::to_string(train.size()) +
           " init=" + (init ? init_path : std::string("random")));
  auto result = finetune<T>(train, dev, vocab, cfg.encoder, cfg.train, init ? &*init : nullptr,
                            log.sink());
  save_checkpoint(result.checkpoint, out);
  log.info("event=finetune_done best_epoch=" + std::to_string(result.best_epoch) +
           " best_dev_metric=" + detail::fmt_double(result.best_dev_metric) +
           " checkpoint=" + out);
  return kOk;
}

template <class T>
int run_predict(const RunConfig& cfg, const Options& o, const Logger& log, const Checkpoint& ck) {
  const auto docs = read_corpus(pick(o.corpus, cfg.paths.test, "corpus"));
  const auto vocab = read_vocab(pick(o.vocab, cfg.paths.vocab, "vocab"));
  const auto out = pick(o.out, cfg.paths.predictions, "out");
  auto opts = pair_options(cfg);
  const auto preds = predict<T>(docs, ck, vocab, opts, cfg.workers);
  std::size_t n = 0;
  for (const auto& [pmid, rels] : preds) n += rels.size();
  write_file(out, write_pubtator(docs, preds));
  log.info("event=predict_done documents=" + std::to_string(docs.size()) +
           " relations=" + std::to_string(n) + " out=" + out);
  return kOk;
}

int cmd_vocab_build(const Options& o) {
  const Logger* log = nullptr;
  std::optional<Logger> storage;
  const auto cfg = resolve_config(o, log, storage);
  const auto corpus = read_corpus(pick(o.corpus, cfg.paths.train, "corpus"));
  const auto out = pick(o.out, cfg.paths.vocab, "out");
  const auto vocab = build_vocab(corpus, cfg.min_freq);
  write_file(out, vocab.serialize());
  log->info("event=vocab_built tokens=" + std::to_string(vocab.size()) +
            " identifiers=" + std::to_string(vocab.identifier_labels().size()) +
            " digest=" + vocab.digest() + " out=" + out);
  return kOk;
}

int cmd_mask_preview(const Options& o) {
  const Logger* log = nullptr;
  std::optional<Logger> storage;
  const auto cfg = resolve_config(o, log, storage);
  const auto corpus = read_corpus(pick(o.corpus, cfg.paths.train, "corpus"));
  const auto vocab = read_vocab(pick(o.vocab, cfg.paths.vocab, "vocab"));
  if (o.epoch < 1) throw UsageError("--epoch must be >= 1");
  const auto instances =
      build_pretraining_instances(corpus, vocab, cfg.train.masking,
                                  derive_seed(cfg.train.masking.seed, o.epoch),
                                  cfg.encoder.max_len, log->sink());
  std::string text;
  for (const auto& inst : instances) {
    const auto it = std::find_if(corpus.begin(), corpus.end(),
                                 [&](const Document& d) { return d.pmid == inst.pmid; });
    if (!text.empty()) text += '\n';
    text += render_mask_preview(*it, inst, vocab);
  }
  if (o.out.empty())
    std::cout << text;
  else
    write_file(o.out, text);
  return kOk;
}

int cmd_train(const Options& o, bool is_pretrain) {
  const Logger* log = nullptr;
  std::optional<Logger> storage;
  const auto cfg = resolve_config(o, log, storage);
  if (cfg.encoder.precision == Precision::F32)
    return is_pretrain ? run_pretrain<float>(cfg, o, *log) : run_finetune<float>(cfg, o, *log);
  return is_pretrain ? run_pretrain<double>(cfg, o, *log) : run_finetune<double>(cfg, o, *log);
}

int cmd_predict(const Options& o) {
  const Logger* log = nullptr;
  std::optional<Logger> storage;
  const auto cfg = resolve_config(o, log, storage);
  const auto ck = load_checkpoint(pick(o.ckpt, cfg.paths.finetuned, "ckpt"));
  if (ck.provenance.phase != "finetune")
    throw CheckpointError("predict needs a finetune checkpoint, got phase '" +
                          ck.provenance.phase + "'");
  // The checkpoint decides the precision of the restored model.
  if (ck.encoder.precision == Precision::F32) return run_predict<float>(cfg, o, *log, ck);
  return run_predict<double>(cfg, o, *log, ck);
}

int cmd_evaluate(const Options& o) {
  if (o.gold.empty() || o.pred.empty()) throw UsageError("evaluate needs --gold and --pred");
  const auto gold = read_corpus(o.gold);
  const auto pred_docs = read_corpus(o.pred);
  Predictions preds;
  for (const auto& d : pred_docs) preds[d.pmid] = d.relations;
  MetricsReport report;
  try {
    report = evaluate(gold, preds);
  } catch (const DataError& e) {
    throw DataError(o.pred + ": " + e.what());
  }
  std::cout << report.to_table();
  if (!o.out.empty()) write_file(o.out, report.to_json().dump(2) + "\n");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Entity-masked pretraining and relation extraction"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* cmd, bool config) {
    if (config) cmd->add_option("--config", o.config, "run config (TOML or JSON)");
    cmd->add_option("--seed", o.seed, "override the config seed");
    cmd->add_option("--workers", o.workers, "prediction worker threads");
  };

  auto* vocab = app.add_subcommand("vocab", "vocabulary tools");
  vocab->require_subcommand(1);
  auto* vocab_build = vocab->add_subcommand("build", "build a vocabulary from a corpus");
  common(vocab_build, true);
  vocab_build->add_option("--corpus", o.corpus, "training corpus (PubTator)");
  vocab_build->add_option("--out", o.out, "vocabulary output path");

  auto* mask = app.add_subcommand("mask", "masking tools");
  mask->require_subcommand(1);
  auto* mask_preview = mask->add_subcommand("preview", "show masking decisions");
  common(mask_preview, true);
  mask_preview->add_option("--corpus", o.corpus, "corpus (PubTator)");
  mask_preview->add_option("--vocab", o.vocab, "vocabulary");
  mask_preview->add_option("--epoch", o.epoch, "epoch whose masks to show (1-based)");
  mask_preview->add_option("--out", o.out, "write preview here instead of stdout");

  auto* pre = app.add_subcommand("pretrain", "entity-masked pretraining");
  common(pre, true);
  pre->add_option("--corpus", o.corpus, "training corpus");
  pre->add_option("--vocab", o.vocab, "vocabulary");
  pre->add_option("--out", o.out, "checkpoint output path");

  auto* fine = app.add_subcommand("finetune", "relation and novelty fine-tuning");
  common(fine, true);
  fine->add_option("--corpus", o.corpus, "training corpus");
  fine->add_option("--dev", o.dev, "dev corpus for checkpoint selection");
  fine->add_option("--vocab", o.vocab, "vocabulary");
  fine->add_option("--ckpt", o.ckpt, "pretrained checkpoint (omit for random init)");
  fine->add_option("--out", o.out, "best-dev checkpoint output path");

  auto* pred = app.add_subcommand("predict", "predict relations");
  common(pred, true);
  pred->add_option("--corpus", o.corpus, "documents to annotate");
  pred->add_option("--vocab", o.vocab, "vocabulary");
  pred->add_option("--ckpt", o.ckpt, "finetuned checkpoint");
  pred->add_option("--out", o.out, "predictions output (PubTator)");

  auto* eval = app.add_subcommand("evaluate", "score predictions against gold");
  eval->add_option("--gold", o.gold, "gold corpus (PubTator)");
  eval->add_option("--pred", o.pred, "predictions (PubTator)");
  eval->add_option("--out", o.out, "JSON report output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (vocab_build->parsed()) return cmd_vocab_build(o);
    if (mask_preview->parsed()) return cmd_mask_preview(o);
    if (pre->parsed()) return cmd_train(o, true);
    if (fine->parsed()) return cmd_train(o, false);
    if (pred->parsed()) return cmd_predict(o);
    if (eval->parsed()) return cmd_evaluate(o);
    std::cerr << app.help();
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error=usage message=\"" << e.what() << "\"\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "error=numeric message=\"" << e.what() << "\"\n";
    return kNumeric;
  } catch (const FileParseError& e) {
    std::cerr << "error=parse message=\"" << e.what() << "\"\n";
    return kData;
  } catch (const CheckpointError& e) {
    std::cerr << "error=checkpoint message=\"" << e.what() << "\"\n";
    return kData;
  } catch (const DataError& e) {
    std::cerr << "error=data message=\"" << e.what() << "\"\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error=data message=\"" << e.what() << "\"\n";
    return kData;
  }
}
