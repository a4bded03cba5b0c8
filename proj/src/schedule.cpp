#include "schedule.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "error.hpp"

namespace qknorm {

void TrainConfig::validate() const {
  require(base_lr > 0.0, "base-lr must be positive");
  require(min_lr > 0.0 && min_lr < base_lr, "min-lr must lie in (0, base-lr)");
  require(decay_factor > 0.0 && decay_factor < 1.0, "decay-factor must lie in (0, 1)");
  require(patience >= 1, "patience must be at least 1");
  require(max_epochs >= 1, "max-epochs must be at least 1");
  require(batch_size >= 1, "batch-size must be at least 1");
  require(label_smoothing >= 0.0 && label_smoothing < 1.0, "label-smoothing must lie in [0, 1)");
  require(clip_norm >= 0.0, "clip-norm must be non-negative");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
          "adam betas must lie in [0, 1)");
  require(adam_eps > 0.0, "adam-eps must be positive");
  require(length_percentile > 0.0 && length_percentile <= 100.0,
          "length-percentile must lie in (0, 100]");
  require(stop_dev_bleu >= 0.0, "stop-dev-bleu must be non-negative");
}

std::size_t decay_events(const std::vector<double>& dev_history, std::size_t patience) {
  require(patience >= 1, "patience must be at least 1");
  double best = -std::numeric_limits<double>::infinity();
  std::size_t bad = 0, events = 0;
  for (double v : dev_history) {
    if (v > best) {
      best = v;
      bad = 0;
    } else if (++bad == patience) {
      ++events;
      bad = 0;
    }
  }
  return events;
}

namespace {

double decayed(const std::vector<double>& dev_history, const TrainConfig& cfg) {
  const auto k = static_cast<double>(decay_events(dev_history, cfg.patience));
  return cfg.base_lr * std::pow(cfg.decay_factor, k);
}

}  // namespace

double lr_at(std::size_t step, const std::vector<double>& dev_history, const TrainConfig& cfg) {
  require(step >= 1, "lr_at: step must be at least 1");
  if (step < cfg.warmup_steps) {
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  return std::max(cfg.min_lr, decayed(dev_history, cfg));
}

bool reached_min_lr(const std::vector<double>& dev_history, const TrainConfig& cfg) {
  return decayed(dev_history, cfg) <= cfg.min_lr;
}

}  // namespace qknorm
