#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "config.hpp"
#include "corpus.hpp"
#include "diagnostics.hpp"
#include "trainer.hpp"

namespace qknorm {

/// One training run followed by test scoring and entropy measurement.
struct ExperimentResult {
  TrainLog log;
  SplitEval test;               // empty hypotheses when the corpus has no test split
  double final_dev_bleu = 0.0;  // dev BLEU of the last epoch
  EntropyReport entropy;        // encoder self-attention on the scored split
  std::vector<double> g_values;
};

/// Trains `model`, then scores its best state on the test split (dev if
/// there is no test split).
ExperimentResult run_experiment(Transformer& model, const RunConfig& cfg, const Corpus& corpus,
                                const FitHooks& hooks = {});
/// Same, on a fresh model from build_model.
ExperimentResult run_experiment(const RunConfig& cfg, const Corpus& corpus,
                                const FitHooks& hooks = {});

enum class SweepKind { kHeads, kPercentile, kAblation };
SweepKind parse_sweep_kind(std::string_view name);
std::string_view sweep_kind_name(SweepKind kind);

struct SweepVariant {
  std::string label;
  std::function<void(RunConfig&)> apply;
};

/// heads: 2, 4, 8, 16, 32. percentile: 75, 90, 92.5, 95, 97.5, 99, max.
/// ablation: without-g, without-layernorm, without-fixnorm,
/// without-fixnorm-or-prenorm, normalize-v.
std::vector<SweepVariant> sweep_variants(SweepKind kind);

struct SweepRow {
  std::string sweep;
  std::string variant;
  bool ok = false;
  std::string error;
  double test_bleu = 0.0;
  double test_accuracy = 0.0;
  double final_dev_bleu = 0.0;
  double best_dev_bleu = 0.0;
  std::size_t epochs = 0;
  double mean_entropy = 0.0;
  double normalized_entropy = 0.0;
  int length_L = 0;
  double g0 = 0.0;
};

/// Runs every variant on the same corpus. A failing variant becomes a row
/// with ok=false and the sweep moves on.
std::vector<SweepRow> run_sweep(SweepKind kind, const RunConfig& base, const Corpus& corpus,
                                const std::function<void(const SweepRow&)>& on_row = {});

/// Tab-separated with a header row. Failed rows print FAILED and "-" scores.
std::string format_sweep_tsv(const std::vector<SweepRow>& rows);

}  // namespace qknorm
