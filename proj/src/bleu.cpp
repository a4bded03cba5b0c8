#include "bleu.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "error.hpp"
#include "rng.hpp"

namespace qknorm {

BleuStats& BleuStats::operator+=(const BleuStats& other) {
  for (std::size_t n = 0; n < matches.size(); ++n) {
    matches[n] += other.matches[n];
    totals[n] += other.totals[n];
  }
  candidate_length += other.candidate_length;
  reference_length += other.reference_length;
  return *this;
}

namespace {

std::map<std::vector<std::string>, std::size_t> ngram_counts(const Sentence& s, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    ++counts[std::vector<std::string>(s.begin() + static_cast<std::ptrdiff_t>(i),
                                      s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

BleuStats sentence_stats(const Sentence& candidate, const Sentence& reference, std::size_t max_n) {
  require(max_n >= 1, "bleu: max_n must be at least 1");
  BleuStats stats(max_n);
  stats.candidate_length = candidate.size();
  stats.reference_length = reference.size();
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto cand = ngram_counts(candidate, n);
    const auto ref = ngram_counts(reference, n);
    std::size_t total = 0, matched = 0;
    for (const auto& [gram, count] : cand) {
      total += count;
      auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(count, it->second);
    }
    stats.matches[n - 1] = matched;
    stats.totals[n - 1] = total;
  }
  return stats;
}

BleuReport bleu_from_stats(const BleuStats& stats) {
  BleuReport r;
  r.candidate_length = stats.candidate_length;
  r.reference_length = stats.reference_length;
  const std::size_t max_n = stats.matches.size();
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < max_n; ++n) {
    double p;
    if (stats.matches[n] > 0) {
      p = static_cast<double>(stats.matches[n]) / static_cast<double>(stats.totals[n]);
    } else if (n == 0) {
      p = 0.0;
      zero = true;
    } else {
      p = 1.0 / (static_cast<double>(stats.totals[n]) + 1.0);
    }
    r.precisions.push_back(p);
    if (p > 0.0) log_sum += std::log(p);
  }
  if (stats.candidate_length == 0) {
    r.brevity_penalty = 0.0;
    return r;
  }
  if (stats.candidate_length < stats.reference_length) {
    r.brevity_penalty = std::exp(1.0 - static_cast<double>(stats.reference_length) /
                                           static_cast<double>(stats.candidate_length));
  }
  if (zero) return r;
  r.bleu = 100.0 * r.brevity_penalty * std::exp(log_sum / static_cast<double>(max_n));
  return r;
}

BleuReport bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references,
                std::size_t max_n) {
  require(!candidates.empty(), "bleu: empty corpus");
  require(candidates.size() == references.size(),
          "bleu: " + std::to_string(candidates.size()) + " candidates for " +
              std::to_string(references.size()) + " references");
  BleuStats total(max_n);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    total += sentence_stats(candidates[i], references[i], max_n);
  }
  return bleu_from_stats(total);
}

BootstrapResult paired_bootstrap(const std::vector<Sentence>& system_a,
                                 const std::vector<Sentence>& system_b,
                                 const std::vector<Sentence>& references, std::size_t resamples,
                                 std::uint64_t seed) {
  require(!references.empty(), "paired_bootstrap: empty corpus");
  require(system_a.size() == references.size() && system_b.size() == references.size(),
          "paired_bootstrap: systems and references must be aligned");
  require(resamples > 0, "paired_bootstrap: need at least one resample");
  std::vector<BleuStats> a, b;
  for (std::size_t i = 0; i < references.size(); ++i) {
    a.push_back(sentence_stats(system_a[i], references[i]));
    b.push_back(sentence_stats(system_b[i], references[i]));
  }
  Rng rng(seed);
  std::size_t wins_a = 0, wins_b = 0;
  const std::size_t n = references.size();
  for (std::size_t r = 0; r < resamples; ++r) {
    BleuStats sa, sb;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t pick = rng.below(n);
      sa += a[pick];
      sb += b[pick];
    }
    const double ba = bleu_from_stats(sa).bleu;
    const double bb = bleu_from_stats(sb).bleu;
    wins_a += ba > bb;
    wins_b += bb > ba;
  }
  BootstrapResult res;
  res.resamples = resamples;
  const double total = static_cast<double>(resamples);
  res.win_a = static_cast<double>(wins_a) / total;
  res.win_b = static_cast<double>(wins_b) / total;
  res.ties = 1.0 - res.win_a - res.win_b;
  res.p_value = 1.0 - res.win_a;
  return res;
}

}  // namespace qknorm
