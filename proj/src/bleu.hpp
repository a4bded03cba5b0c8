#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace qknorm {

using Sentence = std::vector<std::string>;

/// Clipped n-gram counts for one or more sentence pairs. Adds up across a
/// corpus, which is what makes bootstrap resampling cheap.
struct BleuStats {
  std::vector<std::size_t> matches;  // per order n = 1..max_n
  std::vector<std::size_t> totals;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;

  explicit BleuStats(std::size_t max_n = 4) : matches(max_n, 0), totals(max_n, 0) {}
  BleuStats& operator+=(const BleuStats& other);
};

BleuStats sentence_stats(const Sentence& candidate, const Sentence& reference,
                         std::size_t max_n = 4);

struct BleuReport {
  double bleu = 0.0;  // 0..100
  std::vector<double> precisions;
  double brevity_penalty = 1.0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

/// BP * exp(mean log p_n) * 100. A zero count for n >= 2 is smoothed to
/// 1 / (total + 1); a zero unigram count scores 0.
BleuReport bleu_from_stats(const BleuStats& stats);

/// Corpus BLEU over aligned candidate/reference sentences.
BleuReport bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references,
                std::size_t max_n = 4);

struct BootstrapResult {
  std::size_t resamples = 0;
  double win_a = 0.0;  // fraction of resamples with BLEU(A) > BLEU(B)
  double win_b = 0.0;
  double ties = 0.0;
  double p_value = 1.0;  // 1 - win_a: evidence that A is not better
};

/// Paired bootstrap resampling over sentence indices.
BootstrapResult paired_bootstrap(const std::vector<Sentence>& system_a,
                                 const std::vector<Sentence>& system_b,
                                 const std::vector<Sentence>& references,
                                 std::size_t resamples = 1000, std::uint64_t seed = 1);

}  // namespace qknorm
