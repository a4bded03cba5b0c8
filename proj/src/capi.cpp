#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <string>

#include "checkpoint.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "diagnostics.hpp"
#include "error.hpp"
#include "qknorm/qknorm.h"
#include "sweep.hpp"
#include "trainer.hpp"

struct qk_config {
  qknorm::RunConfig cfg;
};

struct qk_corpus {
  qknorm::Corpus corpus;
};

struct qk_model {
  qknorm::Checkpoint ckpt;  // config, vocabularies and metadata
  qknorm::Transformer model;
};

namespace {

using namespace qknorm;

thread_local std::string g_last_error;

qk_status to_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::kInvalidArgument: return QK_ERR_INVALID_ARGUMENT;
    case ErrorCode::kShapeMismatch: return QK_ERR_SHAPE;
    case ErrorCode::kIo: return QK_ERR_IO;
    case ErrorCode::kDiverged: return QK_ERR_DIVERGED;
    case ErrorCode::kFormat: return QK_ERR_FORMAT;
  }
  return QK_ERR_INTERNAL;
}

template <typename F>
qk_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return QK_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return QK_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return QK_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (!p) fail(ErrorCode::kInvalidArgument, std::string(what) + " must not be NULL");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put(char** out, const std::string& s) {
  if (out) *out = dup(s);
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string join(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + num(v[i]);
  return out;
}

class Report {
 public:
  Report& add(const std::string& key, const std::string& value) {
    text_ += key + '\t' + value + '\n';
    return *this;
  }
  Report& add(const std::string& key, double value) { return add(key, num(value)); }
  const std::string& str() const { return text_; }

 private:
  std::string text_;
};

void add_bleu(Report& r, const std::string& prefix, const BleuReport& b) {
  r.add(prefix + "bleu", b.bleu);
  for (std::size_t n = 0; n < b.precisions.size(); ++n) {
    r.add(prefix + "precision-" + std::to_string(n + 1), b.precisions[n]);
  }
  r.add(prefix + "brevity-penalty", b.brevity_penalty);
  r.add(prefix + "candidate-length", std::to_string(b.candidate_length));
  r.add(prefix + "reference-length", std::to_string(b.reference_length));
}

std::vector<Sentence> read_sentences(const char* path, TokenizerMode mode) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, std::string("cannot open ") + path);
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(tokenize(line, mode));
  }
  return out;
}

std::string step_log_tsv(const TrainLog& log) {
  std::string out = "step\tepoch\tlr\tloss\tgrad_norm\n";
  char buf[160];
  for (const auto& s : log.steps) {
    // %a keeps the trace exact so runs can be compared byte for byte.
    std::snprintf(buf, sizeof buf, "%zu\t%zu\t%a\t%a\t%a\n", s.step, s.epoch, s.lr, s.loss,
                  s.grad_norm);
    out += buf;
  }
  return out;
}

}  // namespace

extern "C" {

const char* qk_version(void) { return "1.0.0"; }

const char* qk_last_error(void) { return g_last_error.c_str(); }

void qk_string_free(char* s) { std::free(s); }

qk_status qk_config_new(qk_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new qk_config();
  });
}

void qk_config_free(qk_config* cfg) { delete cfg; }

qk_status qk_config_set(qk_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    need(cfg, "config");
    need(key, "key");
    need(value, "value");
    set_config(cfg->cfg, key, value);
  });
}

qk_status qk_config_get(const qk_config* cfg, const char* key, char** value) {
  return guarded([&] {
    need(cfg, "config");
    need(key, "key");
    need(value, "value");
    *value = dup(get_config(cfg->cfg, key));
  });
}

qk_status qk_config_load_file(qk_config* cfg, const char* path) {
  return guarded([&] {
    need(cfg, "config");
    need(path, "path");
    load_config_file(cfg->cfg, path);
  });
}

size_t qk_config_key_count(void) { return config_keys().size(); }

const char* qk_config_key_name(size_t index) {
  return index < config_keys().size() ? config_keys()[index].name.c_str() : nullptr;
}

const char* qk_config_key_help(size_t index) {
  return index < config_keys().size() ? config_keys()[index].help.c_str() : nullptr;
}

const char* qk_config_key_group(size_t index) {
  if (index >= config_keys().size()) return nullptr;
  switch (config_keys()[index].group) {
    case ConfigGroup::kModel: return "model";
    case ConfigGroup::kTrain: return "train";
    case ConfigGroup::kData: return "data";
  }
  return nullptr;
}

qk_status qk_corpus_load(const qk_config* cfg, qk_corpus** out) {
  return guarded([&] {
    need(cfg, "config");
    need(out, "out");
    auto c = std::make_unique<qk_corpus>();
    c->corpus = load_data(cfg->cfg.data);
    *out = c.release();
  });
}

void qk_corpus_free(qk_corpus* corpus) { delete corpus; }

qk_status qk_corpus_write(const qk_corpus* corpus, const char* dir) {
  return guarded([&] {
    need(corpus, "corpus");
    need(dir, "dir");
    write_corpus(corpus->corpus, dir);
  });
}

qk_status qk_corpus_summary(const qk_corpus* corpus, const qk_config* cfg, char** report) {
  return guarded([&] {
    need(corpus, "corpus");
    need(cfg, "config");
    need(report, "report");
    const Corpus& c = corpus->corpus;
    const LengthStats s = c.length_stats(cfg->cfg.train.length_percentile);
    Report r;
    r.add("train-pairs", std::to_string(c.train.size()))
        .add("dev-pairs", std::to_string(c.dev.size()))
        .add("test-pairs", std::to_string(c.test.size()))
        .add("src-vocab", std::to_string(c.src_vocab.size()))
        .add("tgt-vocab", std::to_string(c.tgt_vocab.size()))
        .add("length-percentile", s.percentile)
        .add("L", std::to_string(s.L))
        .add("g0", s.L >= 2 ? num(s.g0) : std::string("undefined"));
    *report = dup(r.str());
  });
}

qk_status qk_train(const qk_config* cfg, const qk_corpus* corpus, qk_epoch_fn on_epoch,
                   void* user, qk_model** model_out, char** report, char** step_log) {
  return guarded([&] {
    need(cfg, "config");
    need(corpus, "corpus");
    FitHooks hooks;
    if (on_epoch) {
      hooks.on_epoch = [&](const EpochRecord& e) {
        on_epoch(user, e.epoch, e.train_loss, e.dev_bleu, e.dev_accuracy, e.lr, e.improved ? 1 : 0);
      };
    }
    const Corpus& c = corpus->corpus;
    Transformer model = build_model(cfg->cfg, c);
    const ExperimentResult res = run_experiment(model, cfg->cfg, c, hooks);
    Report r;
    add_bleu(r, "test-", res.test.bleu);
    r.add("test-accuracy", res.test.token_accuracy)
        .add("best-dev-bleu", res.log.best_dev_bleu)
        .add("best-epoch", std::to_string(res.log.best_epoch))
        .add("final-dev-bleu", res.final_dev_bleu)
        .add("epochs", std::to_string(res.log.epochs.size()))
        .add("steps", std::to_string(res.log.steps.size()))
        .add("stop-reason", res.log.stop_reason)
        .add("mean-entropy", res.entropy.mean)
        .add("normalized-entropy", res.entropy.normalized_mean)
        .add("head-entropy", join(res.entropy.per_head))
        .add("L", std::to_string(res.log.length_L))
        .add("g0", res.log.g0)
        .add("g-values", join(res.g_values))
        .add("parameters", std::to_string(model.parameter_count()));
    put(report, r.str());
    put(step_log, step_log_tsv(res.log));
    if (model_out) {
      RunConfig saved = cfg->cfg;
      auto ckpt = make_checkpoint(model, saved, c.src_vocab, c.tgt_vocab,
                                  {{"epoch", std::to_string(res.log.best_epoch)},
                                   {"dev-bleu", num(res.log.best_dev_bleu)}});
      *model_out = new qk_model{std::move(ckpt), std::move(model)};
    }
  });
}

qk_status qk_model_load(const char* checkpoint_path, qk_model** out) {
  return guarded([&] {
    need(checkpoint_path, "checkpoint path");
    need(out, "out");
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    Transformer model = restore_model(ckpt);
    *out = new qk_model{std::move(ckpt), std::move(model)};
  });
}

qk_status qk_model_save(const qk_model* model, const char* checkpoint_path) {
  return guarded([&] {
    need(model, "model");
    need(checkpoint_path, "checkpoint path");
    save_checkpoint(checkpoint_path,
                    make_checkpoint(model->model, model->ckpt.config, model->ckpt.src_vocab,
                                    model->ckpt.tgt_vocab, model->ckpt.meta));
  });
}

void qk_model_free(qk_model* model) { delete model; }

qk_status qk_model_evaluate(const qk_model* model, const char* src_path, const char* ref_path,
                            char** report, char** hypotheses) {
  return guarded([&] {
    need(model, "model");
    need(src_path, "source path");
    need(ref_path, "reference path");
    const TokenizerMode mode = model->ckpt.config.data.tokenizer;
    const ParallelText text = read_parallel(src_path, ref_path, mode);
    const auto& tc = model->ckpt.config.train;
    const SplitEval ev = evaluate_split(model->model, text, model->ckpt.src_vocab,
                                        model->ckpt.tgt_vocab,
                                        std::max<std::size_t>(tc.batch_size, 64), tc.decode_margin);
    const EntropyReport ent = encoder_entropy(
        model->model, encode_split(text, model->ckpt.src_vocab, model->ckpt.tgt_vocab).src);
    Report r;
    add_bleu(r, "", ev.bleu);
    r.add("token-accuracy", ev.token_accuracy)
        .add("sentences", std::to_string(text.size()))
        .add("mean-entropy", ent.mean)
        .add("normalized-entropy", ent.normalized_mean)
        .add("head-entropy", join(ent.per_head));
    put(report, r.str());
    std::string hyp;
    for (const auto& h : ev.hypotheses) hyp += detokenize(h, mode) + '\n';
    put(hypotheses, hyp);
  });
}

qk_status qk_model_export_attention(const qk_model* model, const char* sentence,
                                    const char* out_dir, size_t* files_written) {
  return guarded([&] {
    need(model, "model");
    need(sentence, "sentence");
    need(out_dir, "output directory");
    const auto tokens = tokenize(sentence, model->ckpt.config.data.tokenizer);
    require(!tokens.empty(), "export-attn: empty sentence");
    const auto records =
        encoder_heatmaps(model->model, tokens, model->ckpt.src_vocab.encode(tokens));
    const auto files = write_heatmaps(records, out_dir);
    if (files_written) *files_written = files.size();
  });
}

qk_status qk_model_g_values(const qk_model* model, char** values) {
  return guarded([&] {
    need(model, "model");
    need(values, "values");
    *values = dup(join(model->model.g_values()));
  });
}

qk_status qk_sweep(const qk_config* cfg, const qk_corpus* corpus, const char* kind,
                   qk_sweep_row_fn on_row, void* user, char** table) {
  return guarded([&] {
    need(cfg, "config");
    need(corpus, "corpus");
    need(kind, "kind");
    const SweepKind k = parse_sweep_kind(kind);
    std::function<void(const SweepRow&)> cb;
    if (on_row) {
      cb = [&](const SweepRow& row) {
        std::string line = format_sweep_tsv({row});
        line.erase(0, line.find('\n') + 1);
        on_row(user, line.c_str());
      };
    }
    const auto rows = run_sweep(k, cfg->cfg, corpus->corpus, cb);
    put(table, format_sweep_tsv(rows));
  });
}

qk_status qk_bleu_files(const char* hyp_path, const char* ref_path, const char* tokenizer,
                        char** report) {
  return guarded([&] {
    need(hyp_path, "hypothesis path");
    need(ref_path, "reference path");
    need(report, "report");
    const TokenizerMode mode = parse_tokenizer(tokenizer ? tokenizer : "whitespace");
    const auto hyp = read_sentences(hyp_path, mode);
    const auto ref = read_sentences(ref_path, mode);
    Report r;
    add_bleu(r, "", bleu(hyp, ref));
    *report = dup(r.str());
  });
}

qk_status qk_bootstrap_files(const char* hyp_a_path, const char* hyp_b_path, const char* ref_path,
                             const char* tokenizer, size_t resamples, uint64_t seed,
                             char** report) {
  return guarded([&] {
    need(hyp_a_path, "system A path");
    need(hyp_b_path, "system B path");
    need(ref_path, "reference path");
    need(report, "report");
    const TokenizerMode mode = parse_tokenizer(tokenizer ? tokenizer : "whitespace");
    const auto a = read_sentences(hyp_a_path, mode);
    const auto b = read_sentences(hyp_b_path, mode);
    const auto ref = read_sentences(ref_path, mode);
    const BootstrapResult res = paired_bootstrap(a, b, ref, resamples, seed);
    Report r;
    r.add("bleu-a", bleu(a, ref).bleu)
        .add("bleu-b", bleu(b, ref).bleu)
        .add("resamples", std::to_string(res.resamples))
        .add("win-a", res.win_a)
        .add("win-b", res.win_b)
        .add("ties", res.ties)
        .add("p-value", res.p_value);
    *report = dup(r.str());
  });
}

}  // extern "C"
