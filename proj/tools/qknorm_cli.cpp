// Command-line front end. Everything goes through the C API.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>

#include "CLI11.hpp"
#include "qknorm/qknorm.h"

namespace {

struct CliError {
  int code;
  std::string message;
};

void check(qk_status st) {
  if (st != QK_OK) throw CliError{static_cast<int>(st), qk_last_error()};
}

struct StringDeleter {
  void operator()(char* s) const { qk_string_free(s); }
};
using OwnedString = std::unique_ptr<char, StringDeleter>;

struct ConfigDeleter {
  void operator()(qk_config* c) const { qk_config_free(c); }
};
struct CorpusDeleter {
  void operator()(qk_corpus* c) const { qk_corpus_free(c); }
};
struct ModelDeleter {
  void operator()(qk_model* m) const { qk_model_free(m); }
};
using Config = std::unique_ptr<qk_config, ConfigDeleter>;
using Corpus = std::unique_ptr<qk_corpus, CorpusDeleter>;
using Model = std::unique_ptr<qk_model, ModelDeleter>;

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CliError{QK_ERR_IO, "cannot write " + path};
  out << text;
  if (!out) throw CliError{QK_ERR_IO, "write failed for " + path};
}

// One --<key> option per config key of the selected groups. Values land in
// `values`; only options the user actually passed are applied.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app, std::initializer_list<const char*> groups) {
    app->add_option("--config", config_file, "key=value file; flags override it")
        ->check(CLI::ExistingFile);
    for (size_t i = 0; i < qk_config_key_count(); ++i) {
      const std::string group = qk_config_key_group(i);
      bool wanted = false;
      for (const char* g : groups) wanted = wanted || group == g;
      if (!wanted) continue;
      const std::string name = qk_config_key_name(i);
      options[name] = app->add_option("--" + name, values[name], qk_config_key_help(i))
                          ->group(group == "model" ? "Model" : group == "train" ? "Training" : "Data");
    }
  }

  Config build() const {
    qk_config* raw = nullptr;
    check(qk_config_new(&raw));
    Config cfg(raw);
    if (!config_file.empty()) check(qk_config_load_file(cfg.get(), config_file.c_str()));
    for (const auto& [name, opt] : options) {
      if (opt->count()) check(qk_config_set(cfg.get(), name.c_str(), values.at(name).c_str()));
    }
    return cfg;
  }
};

Corpus load_corpus(const qk_config* cfg) {
  qk_corpus* raw = nullptr;
  check(qk_corpus_load(cfg, &raw));
  return Corpus(raw);
}

Model load_model(const std::string& path) {
  qk_model* raw = nullptr;
  check(qk_model_load(path.c_str(), &raw));
  return Model(raw);
}

void print_epoch(void* user, size_t epoch, double loss, double dev_bleu, double dev_acc, double lr,
                 int improved) {
  if (*static_cast<bool*>(user)) return;
  std::fprintf(stderr, "epoch\t%zu\tloss\t%.6f\tdev_bleu\t%.4f\tdev_acc\t%.4f\tlr\t%.3g%s\n", epoch,
               loss, dev_bleu, dev_acc, lr, improved ? "\tbest" : "");
}

void print_row(void*, const char* row) {
  std::fputs(row, stderr);
  std::fflush(stderr);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"QKNorm transformer toolkit"};
  app.set_version_flag("--version", std::string(qk_version()));
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a model and score it on the test split");
  ConfigFlags train_flags;
  train_flags.attach(train, {"model", "train", "data"});
  std::string train_log, train_report, train_save;
  bool train_quiet = false;
  train->add_option("--log", train_log, "write the per-step trace (TSV)");
  train->add_option("--report", train_report, "also write the final report here");
  train->add_option("--save", train_save, "write the best model here after training");
  train->add_flag("--quiet", train_quiet, "no per-epoch progress on stderr");

  // evaluate
  auto* evaluate = app.add_subcommand(
      "evaluate", "score a checkpoint on a bitext, or score hypothesis files directly");
  std::string ev_ckpt, ev_src, ev_ref, ev_hyp, ev_hyp_b, ev_hyp_out, ev_tok = "whitespace";
  std::size_t ev_resamples = 1000;
  std::uint64_t ev_seed = 1;
  evaluate->add_option("--checkpoint", ev_ckpt, "model checkpoint")->check(CLI::ExistingFile);
  evaluate->add_option("--src", ev_src, "source sentences to translate")->check(CLI::ExistingFile);
  evaluate->add_option("--ref", ev_ref, "reference translations")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--hyp", ev_hyp, "system output to score instead of decoding")
      ->check(CLI::ExistingFile);
  evaluate->add_option("--hyp-b", ev_hyp_b, "second system for paired bootstrap")
      ->check(CLI::ExistingFile);
  evaluate->add_option("--hyp-out", ev_hyp_out, "write decoded hypotheses here");
  evaluate->add_option("--tokenizer", ev_tok, "whitespace or char (file scoring)");
  evaluate->add_option("--resamples", ev_resamples, "bootstrap resamples");
  evaluate->add_option("--seed", ev_seed, "bootstrap seed");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "train one model per variant and tabulate the scores");
  std::string sweep_kind, sweep_out;
  sweep->add_option("kind", sweep_kind, "heads, percentile or ablation")
      ->required()
      ->check(CLI::IsMember({"heads", "percentile", "ablation"}));
  ConfigFlags sweep_flags;
  sweep_flags.attach(sweep, {"model", "train", "data"});
  sweep->add_option("--out", sweep_out, "also write the table here");

  // export-attn
  auto* exp = app.add_subcommand("export-attn", "write encoder self-attention heatmaps");
  std::string ex_ckpt, ex_sentence, ex_dir;
  exp->add_option("--checkpoint", ex_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  exp->add_option("--sentence", ex_sentence, "source sentence")->required();
  exp->add_option("--out-dir", ex_dir, "output directory")->required();

  // toy-data
  auto* toy = app.add_subcommand("toy-data", "generate a synthetic bitext");
  ConfigFlags toy_flags;
  toy_flags.attach(toy, {"data"});
  std::string toy_dir;
  toy->add_option("--out-dir", toy_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train) {
      Config cfg = train_flags.build();
      Corpus corpus = load_corpus(cfg.get());
      char *report = nullptr, *log = nullptr;
      qk_model* model = nullptr;
      check(qk_train(cfg.get(), corpus.get(), print_epoch, &train_quiet,
                     train_save.empty() ? nullptr : &model, &report, &log));
      OwnedString report_s(report), log_s(log);
      Model model_h(model);
      if (!train_log.empty()) write_file(train_log, log);
      if (!train_report.empty()) write_file(train_report, report);
      if (model_h) check(qk_model_save(model_h.get(), train_save.c_str()));
      std::fputs(report, stdout);
    } else if (*evaluate) {
      char* report = nullptr;
      if (!ev_hyp.empty()) {
        if (!ev_hyp_b.empty()) {
          check(qk_bootstrap_files(ev_hyp.c_str(), ev_hyp_b.c_str(), ev_ref.c_str(), ev_tok.c_str(),
                                   ev_resamples, ev_seed, &report));
        } else {
          check(qk_bleu_files(ev_hyp.c_str(), ev_ref.c_str(), ev_tok.c_str(), &report));
        }
      } else {
        if (ev_ckpt.empty() || ev_src.empty()) {
          throw CliError{QK_ERR_INVALID_ARGUMENT,
                         "evaluate needs --checkpoint and --src, or --hyp to score a file"};
        }
        Model model = load_model(ev_ckpt);
        char* hyps = nullptr;
        check(qk_model_evaluate(model.get(), ev_src.c_str(), ev_ref.c_str(), &report, &hyps));
        OwnedString hyps_s(hyps);
        if (!ev_hyp_out.empty()) write_file(ev_hyp_out, hyps);
      }
      OwnedString report_s(report);
      std::fputs(report, stdout);
    } else if (*sweep) {
      Config cfg = sweep_flags.build();
      Corpus corpus = load_corpus(cfg.get());
      char* table = nullptr;
      check(qk_sweep(cfg.get(), corpus.get(), sweep_kind.c_str(), print_row, nullptr, &table));
      OwnedString table_s(table);
      if (!sweep_out.empty()) write_file(sweep_out, table);
      std::fputs(table, stdout);
    } else if (*exp) {
      Model model = load_model(ex_ckpt);
      size_t files = 0;
      check(qk_model_export_attention(model.get(), ex_sentence.c_str(), ex_dir.c_str(), &files));
      std::printf("files\t%zu\nout-dir\t%s\n", files, ex_dir.c_str());
    } else if (*toy) {
      Config cfg = toy_flags.build();
      char* task = nullptr;
      check(qk_config_get(cfg.get(), "toy-task", &task));
      const bool has_task = task && *task;
      qk_string_free(task);
      if (!has_task) check(qk_config_set(cfg.get(), "toy-task", "reverse"));
      Corpus corpus = load_corpus(cfg.get());
      check(qk_corpus_write(corpus.get(), toy_dir.c_str()));
      char* summary = nullptr;
      check(qk_corpus_summary(corpus.get(), cfg.get(), &summary));
      OwnedString summary_s(summary);
      std::printf("out-dir\t%s\n%s", toy_dir.c_str(), summary);
    }
  } catch (const CliError& e) {
    std::fprintf(stderr, "qknorm: error: %s\n", e.message.c_str());
    return e.code ? e.code : 1;
  }
  return 0;
}
