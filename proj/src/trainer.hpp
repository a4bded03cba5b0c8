#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bleu.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "model.hpp"
#include "schedule.hpp"

namespace qknorm {

/// Source ids end with EOS; target ids carry no specials.
struct EncodedSplit {
  std::vector<std::vector<int>> src;
  std::vector<std::vector<int>> tgt;
  std::size_t size() const { return src.size(); }
};

EncodedSplit encode_split(const ParallelText& text, const Vocab& src_vocab, const Vocab& tgt_vocab);

/// Teacher-forcing batch: decoder input is BOS + target, output is target + EOS.
struct PairBatch {
  TokenBatch src, tgt_in, tgt_out;
};
PairBatch make_batch(const EncodedSplit& split, const std::vector<std::size_t>& indices);

class Adam {
 public:
  Adam(std::vector<Tensor> params, double beta1, double beta2, double eps);
  void step(double lr);
  void zero_grad();
  /// Global L2 norm over every parameter gradient.
  double grad_norm() const;
  /// Rescales gradients so the global norm is at most max_norm.
  void clip(double max_norm, double norm);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean of step losses
  double dev_bleu = 0.0;
  double dev_accuracy = 0.0;
  double lr = 0.0;  // rate used by the last step
  bool improved = false;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_dev_bleu = -1.0;
  std::string stop_reason;
  int length_L = 0;
  double g0 = 0.0;
};

struct SplitEval {
  BleuReport bleu;
  double token_accuracy = 0.0;  // position matches / max(len_ref, len_hyp), corpus-wide
  std::vector<Sentence> hypotheses;
};

/// Greedy-decodes every source and scores against the references.
SplitEval evaluate_split(const Transformer& model, const ParallelText& text, const Vocab& src_vocab,
                         const Vocab& tgt_vocab, std::size_t batch_size,
                         std::size_t decode_margin);

/// Model for a corpus: vocab sizes from the corpus, g0 from the length
/// percentile unless the config fixes g-init.
Transformer build_model(const RunConfig& cfg, const Corpus& corpus);

struct FitHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains until the decayed rate reaches min_lr, dev BLEU hits stop_dev_bleu,
/// or max_epochs. The model ends holding the best-dev-BLEU parameters; when
/// a checkpoint path is set that state is also written there on every
/// improvement. Throws kDiverged on a non-finite loss or gradient.
TrainLog fit(Transformer& model, const Corpus& corpus, const RunConfig& cfg,
             const FitHooks& hooks = {});

}  // namespace qknorm
