#pragma once

#include <string>
#include <utility>
#include <vector>

#include "config.hpp"
#include "corpus.hpp"
#include "model.hpp"

namespace qknorm {

/// Everything needed to rebuild a trained model. The on-disk layout is
/// described in docs/checkpoint-format.md.
struct Checkpoint {
  RunConfig config;  // model and train sections, plus the tokenizer
  Vocab src_vocab, tgt_vocab;
  std::vector<NamedTensor> params;
  std::vector<double> g_values;
  std::vector<std::pair<std::string, std::string>> meta;

  std::string meta_value(const std::string& key) const;  // "" when absent
};

Checkpoint make_checkpoint(const Transformer& model, const RunConfig& config, const Vocab& src,
                           const Vocab& tgt,
                           std::vector<std::pair<std::string, std::string>> meta = {});

/// Writes to a temporary file and renames, so a crash never leaves a torn file.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Model with the checkpoint's architecture and values.
Transformer restore_model(const Checkpoint& ckpt);

}  // namespace qknorm
