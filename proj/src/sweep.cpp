#include "sweep.hpp"

#include <cstdio>

#include "error.hpp"

namespace qknorm {

ExperimentResult run_experiment(Transformer& model, const RunConfig& cfg, const Corpus& corpus,
                                const FitHooks& hooks) {
  ExperimentResult r;
  r.log = fit(model, corpus, cfg, hooks);
  r.final_dev_bleu = r.log.epochs.empty() ? 0.0 : r.log.epochs.back().dev_bleu;
  const ParallelText& scored = corpus.test.size() ? corpus.test : corpus.dev;
  r.test = evaluate_split(model, scored, corpus.src_vocab, corpus.tgt_vocab,
                          std::max<std::size_t>(cfg.train.batch_size, 64), cfg.train.decode_margin);
  r.entropy = encoder_entropy(model, encode_split(scored, corpus.src_vocab, corpus.tgt_vocab).src);
  r.g_values = model.g_values();
  return r;
}

ExperimentResult run_experiment(const RunConfig& cfg, const Corpus& corpus, const FitHooks& hooks) {
  Transformer model = build_model(cfg, corpus);
  return run_experiment(model, cfg, corpus, hooks);
}

SweepKind parse_sweep_kind(std::string_view name) {
  if (name == "heads") return SweepKind::kHeads;
  if (name == "percentile") return SweepKind::kPercentile;
  if (name == "ablation") return SweepKind::kAblation;
  fail(ErrorCode::kInvalidArgument,
       "unknown sweep '" + std::string(name) + "' (expected heads, percentile or ablation)");
}

std::string_view sweep_kind_name(SweepKind kind) {
  switch (kind) {
    case SweepKind::kHeads: return "heads";
    case SweepKind::kPercentile: return "percentile";
    case SweepKind::kAblation: return "ablation";
  }
  return "";
}

std::vector<SweepVariant> sweep_variants(SweepKind kind) {
  std::vector<SweepVariant> v;
  switch (kind) {
    case SweepKind::kHeads:
      for (std::size_t h : {2, 4, 8, 16, 32}) {
        v.push_back({std::to_string(h), [h](RunConfig& c) { c.model.num_heads = h; }});
      }
      break;
    case SweepKind::kPercentile:
      for (const char* p : {"75", "90", "92.5", "95", "97.5", "99", "max"}) {
        v.push_back({p, [p](RunConfig& c) {
                       set_config(c, "length-percentile", p);
                       c.model.g_init.reset();
                     }});
      }
      break;
    case SweepKind::kAblation:
      // Each variant starts from the base configuration with QKNorm attention.
      v.push_back({"without-g", [](RunConfig& c) {
                     c.model.g_init = 1.0;
                     c.model.g_learnable = false;
                   }});
      v.push_back({"without-layernorm",
                   [](RunConfig& c) { c.model.residual_norm = ResidualNorm::kScaleNorm; }});
      v.push_back({"without-fixnorm", [](RunConfig& c) { c.model.use_fixnorm = false; }});
      v.push_back({"without-fixnorm-or-prenorm", [](RunConfig& c) {
                     c.model.use_fixnorm = false;
                     c.model.norm_placement = NormPlacement::kPost;
                   }});
      v.push_back({"normalize-v", [](RunConfig& c) { c.model.normalize_v = true; }});
      for (auto& var : v) {
        auto inner = var.apply;
        var.apply = [inner](RunConfig& c) {
          c.model.attention = AttentionKind::kQKNorm;
          inner(c);
        };
      }
      break;
  }
  return v;
}

std::vector<SweepRow> run_sweep(SweepKind kind, const RunConfig& base, const Corpus& corpus,
                                const std::function<void(const SweepRow&)>& on_row) {
  std::vector<SweepRow> rows;
  for (const auto& variant : sweep_variants(kind)) {
    SweepRow row;
    row.sweep = std::string(sweep_kind_name(kind));
    row.variant = variant.label;
    try {
      RunConfig cfg = base;
      variant.apply(cfg);
      if (!cfg.train.checkpoint_path.empty()) {
        cfg.train.checkpoint_path += "." + row.sweep + "-" + row.variant;
      }
      const ExperimentResult r = run_experiment(cfg, corpus);
      row.ok = true;
      row.test_bleu = r.test.bleu.bleu;
      row.test_accuracy = r.test.token_accuracy;
      row.final_dev_bleu = r.final_dev_bleu;
      row.best_dev_bleu = r.log.best_dev_bleu;
      row.epochs = r.log.epochs.size();
      row.mean_entropy = r.entropy.mean;
      row.normalized_entropy = r.entropy.normalized_mean;
      row.length_L = r.log.length_L;
      row.g0 = r.log.g0;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_sweep_tsv(const std::vector<SweepRow>& rows) {
  std::string out =
      "sweep\tvariant\tstatus\ttest_bleu\ttest_accuracy\tfinal_dev_bleu\tbest_dev_bleu\tepochs\t"
      "mean_entropy\tnormalized_entropy\tL\tg0\terror\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    out += r.sweep + '\t' + r.variant + '\t';
    if (r.ok) {
      out += "ok\t" + num(r.test_bleu) + '\t' + num(r.test_accuracy) + '\t' +
             num(r.final_dev_bleu) + '\t' + num(r.best_dev_bleu) + '\t' +
             std::to_string(r.epochs) + '\t' + num(r.mean_entropy) + '\t' +
             num(r.normalized_entropy) + '\t' + std::to_string(r.length_L) + '\t' + num(r.g0) +
             "\t-\n";
    } else {
      std::string err = r.error;
      for (char& ch : err) {
        if (ch == '\t' || ch == '\n') ch = ' ';
      }
      out += "FAILED\t-\t-\t-\t-\t-\t-\t-\t-\t-\t" + err + '\n';
    }
  }
  return out;
}

}  // namespace qknorm
