#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "checkpoint.hpp"
#include "error.hpp"
#include "ops.hpp"

namespace qknorm {

EncodedSplit encode_split(const ParallelText& text, const Vocab& src_vocab,
                          const Vocab& tgt_vocab) {
  EncodedSplit out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    auto s = src_vocab.encode(text.src[i]);
    s.push_back(kEos);
    out.src.push_back(std::move(s));
    out.tgt.push_back(tgt_vocab.encode(text.tgt[i]));
  }
  return out;
}

PairBatch make_batch(const EncodedSplit& split, const std::vector<std::size_t>& indices) {
  std::vector<std::vector<int>> src, in, out;
  for (auto i : indices) {
    src.push_back(split.src[i]);
    std::vector<int> t_in{kBos};
    t_in.insert(t_in.end(), split.tgt[i].begin(), split.tgt[i].end());
    std::vector<int> t_out = split.tgt[i];
    t_out.push_back(kEos);
    in.push_back(std::move(t_in));
    out.push_back(std::move(t_out));
  }
  return {TokenBatch::from_sequences(src), TokenBatch::from_sequences(in),
          TokenBatch::from_sequences(out)};
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double Adam::grad_norm() const {
  double sq = 0.0;
  for (const auto& p : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

void Adam::clip(double max_norm, double norm) {
  if (max_norm <= 0.0 || norm <= max_norm) return;
  const double s = max_norm / norm;
  for (auto& p : params_) {
    if (!p.has_grad()) continue;
    for (double& g : p.mutable_grad()) g *= s;
  }
}

SplitEval evaluate_split(const Transformer& model, const ParallelText& text,
                         const Vocab& src_vocab, const Vocab& tgt_vocab, std::size_t batch_size,
                         std::size_t decode_margin) {
  require(text.size() > 0, "cannot evaluate an empty split");
  require(batch_size > 0, "evaluation batch size must be positive");
  const EncodedSplit enc = encode_split(text, src_vocab, tgt_vocab);
  SplitEval ev;
  std::size_t correct = 0, positions = 0;
  for (std::size_t start = 0; start < enc.size(); start += batch_size) {
    const std::size_t end = std::min(enc.size(), start + batch_size);
    std::vector<std::vector<int>> sources(enc.src.begin() + static_cast<std::ptrdiff_t>(start),
                                          enc.src.begin() + static_cast<std::ptrdiff_t>(end));
    std::size_t longest = 0;
    for (const auto& s : sources) longest = std::max(longest, s.size());
    const auto hyps = model.greedy_decode(sources, longest + decode_margin);
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const auto& ref = enc.tgt[start + i];
      const auto& hyp = hyps[i];
      for (std::size_t t = 0; t < std::min(ref.size(), hyp.size()); ++t) correct += ref[t] == hyp[t];
      positions += std::max(ref.size(), hyp.size());
      ev.hypotheses.push_back(tgt_vocab.decode(hyp));
    }
  }
  ev.token_accuracy = positions ? static_cast<double>(correct) / static_cast<double>(positions) : 1.0;
  ev.bleu = bleu(ev.hypotheses, text.tgt);
  return ev;
}

Transformer build_model(const RunConfig& cfg, const Corpus& corpus) {
  ModelConfig mc = cfg.model;
  mc.src_vocab = corpus.src_vocab.size();
  mc.tgt_vocab = corpus.tgt_vocab.size();
  double g0 = 1.0;
  if (mc.g_init) {
    g0 = *mc.g_init;
  } else if (mc.attention == AttentionKind::kQKNorm) {
    g0 = g0_init(corpus.length_stats(cfg.train.length_percentile).L);
  }
  return Transformer(mc, g0, cfg.train.seed);
}

namespace {

bool finite(double v) { return std::isfinite(v); }

bool parameters_finite(const Transformer& model) {
  for (const auto& t : model.trainable()) {
    for (double v : t.data()) {
      if (!finite(v)) return false;
    }
  }
  return true;
}

}  // namespace

TrainLog fit(Transformer& model, const Corpus& corpus, const RunConfig& cfg, const FitHooks& hooks) {
  const TrainConfig& tc = cfg.train;
  tc.validate();
  require(corpus.dev.size() > 0, "training needs a non-empty dev split for validation");
  require(model.config().src_vocab == corpus.src_vocab.size() &&
              model.config().tgt_vocab == corpus.tgt_vocab.size(),
          "model vocabulary sizes do not match the corpus");

  TrainLog log;
  {
    const LengthStats stats = corpus.length_stats(tc.length_percentile);
    log.length_L = stats.L;
    log.g0 = stats.g0;
  }
  const EncodedSplit train = encode_split(corpus.train, corpus.src_vocab, corpus.tgt_vocab);
  Adam adam(model.trainable(), tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
  // Separate from the initialization stream so shuffling never depends on
  // the parameter count.
  Rng rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<double> dev_history;
  std::vector<NamedTensor> best;
  std::vector<std::size_t> order(train.size());
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t n_steps = 0;
    double lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
      const PairBatch b = make_batch(train, idx);
      ++step;
      lr = lr_at(step, dev_history, tc);
      ForwardOptions opts;
      opts.training = true;
      opts.rng = &rng;
      double loss_value = 0.0;
      try {
        Tensor loss = model.loss(b.src, b.tgt_in, b.tgt_out, tc.label_smoothing, opts);
        loss_value = loss.item();
        if (!finite(loss_value)) {
          fail(ErrorCode::kDiverged, "loss became non-finite at epoch " + std::to_string(epoch) +
                                         ", step " + std::to_string(step));
        }
        backward(loss);
      } catch (const Error& e) {
        // NaN weights surface as op-level errors; report them as divergence.
        if (e.code() == ErrorCode::kDiverged || !parameters_finite(model)) {
          fail(ErrorCode::kDiverged, "training diverged at epoch " + std::to_string(epoch) +
                                         ", step " + std::to_string(step) + ": " + e.what());
        }
        throw;
      }
      const double norm = adam.grad_norm();
      if (!finite(norm)) {
        fail(ErrorCode::kDiverged, "gradient norm became non-finite at epoch " +
                                       std::to_string(epoch) + ", step " + std::to_string(step));
      }
      adam.clip(tc.clip_norm, norm);
      adam.step(lr);
      adam.zero_grad();
      StepRecord rec{step, epoch, lr, loss_value, norm};
      log.steps.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
      loss_sum += loss_value;
      ++n_steps;
    }

    const SplitEval dev = evaluate_split(model, corpus.dev, corpus.src_vocab, corpus.tgt_vocab,
                                         std::max<std::size_t>(tc.batch_size, 64),
                                         tc.decode_margin);
    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(n_steps, 1));
    er.dev_bleu = dev.bleu.bleu;
    er.dev_accuracy = dev.token_accuracy;
    er.lr = lr;
    er.improved = dev.bleu.bleu > log.best_dev_bleu;
    dev_history.push_back(dev.bleu.bleu);
    if (er.improved) {
      log.best_dev_bleu = dev.bleu.bleu;
      log.best_epoch = epoch;
      best.clear();
      for (const auto& nt : model.tensors()) best.push_back({nt.name, nt.tensor.detach()});
      if (!tc.checkpoint_path.empty()) {
        char bleu_hex[40];
        std::snprintf(bleu_hex, sizeof bleu_hex, "%a", dev.bleu.bleu);
        save_checkpoint(tc.checkpoint_path,
                        make_checkpoint(model, cfg, corpus.src_vocab, corpus.tgt_vocab,
                                        {{"epoch", std::to_string(epoch)},
                                         {"step", std::to_string(step)},
                                         {"dev-bleu", bleu_hex},
                                         {"length-L", std::to_string(log.length_L)}}));
      }
    }
    log.epochs.push_back(er);
    if (hooks.on_epoch) hooks.on_epoch(er);

    if (tc.stop_dev_bleu > 0.0 && dev.bleu.bleu >= tc.stop_dev_bleu) {
      log.stop_reason = "dev-bleu-target";
      break;
    }
    if (step >= tc.warmup_steps && reached_min_lr(dev_history, tc)) {
      log.stop_reason = "min-lr";
      break;
    }
    if (epoch == tc.max_epochs) log.stop_reason = "max-epochs";
  }
  if (!best.empty()) model.load_values(best);
  return log;
}

}  // namespace qknorm
