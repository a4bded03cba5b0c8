#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace qknorm {

struct TrainConfig {
  double base_lr = 3e-4;
  std::size_t warmup_steps = 200;
  double decay_factor = 0.5;
  // Validations without a dev BLEU improvement before each decay.
  std::size_t patience = 3;
  double min_lr = 1e-5;
  std::size_t max_epochs = 50;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  // Empty: keep the best parameters in memory only.
  std::string checkpoint_path;
  double label_smoothing = 0.0;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  // Nearest-rank percentile for L; 100 is the maximum length.
  double length_percentile = 97.5;
  // Stop once dev BLEU reaches this value; 0 disables.
  double stop_dev_bleu = 0.0;
  // Extra decode steps allowed beyond the source length.
  std::size_t decode_margin = 10;

  void validate() const;
};

/// Number of decays triggered by a dev BLEU history: every `patience`
/// consecutive validations without a new best count once.
std::size_t decay_events(const std::vector<double>& dev_history, std::size_t patience);

/// Learning rate for optimizer step `step` (1-based).
double lr_at(std::size_t step, const std::vector<double>& dev_history, const TrainConfig& cfg);

/// True once decays alone have driven the rate down to min_lr.
bool reached_min_lr(const std::vector<double>& dev_history, const TrainConfig& cfg);

}  // namespace qknorm
