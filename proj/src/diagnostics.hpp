#pragma once

#include <string>
#include <vector>

#include "model.hpp"
#include "tensor.hpp"

namespace qknorm {

struct EntropyReport {
  std::vector<double> per_head;    // nats, mean over kept query rows
  std::vector<double> normalized;  // per_head / ln(key_count)
  double mean = 0.0;               // mean over heads
  double normalized_mean = 0.0;
};

/// Row entropy -sum w log w of post-softmax weights [h, n_q, n_kv], averaged
/// over the query rows marked in `query_keep` (empty keeps all). `key_count`
/// is the number of visible keys used for normalization (0 means n_kv).
/// Rejects rows that do not sum to 1 within 1e-6.
EntropyReport attention_entropy(const Tensor& weights,
                                const std::vector<unsigned char>& query_keep = {},
                                std::size_t key_count = 0);

/// Encoder self-attention entropy averaged over layers and sentences.
/// Sources are id sequences already terminated with EOS.
EntropyReport encoder_entropy(const Transformer& model,
                              const std::vector<std::vector<int>>& sources,
                              std::size_t batch_size = 64);

struct HeatmapRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<std::vector<double>> weights;  // [n_q][n_kv]
  std::vector<std::string> tokens;
};

/// Encoder self-attention of one source sentence, one record per (layer, head).
/// `tokens` are the source tokens without EOS; EOS is appended for the
/// forward pass and listed as "<eos>".
std::vector<HeatmapRecord> encoder_heatmaps(const Transformer& model,
                                            const std::vector<std::string>& tokens,
                                            const std::vector<int>& ids);

/// Writes layer{L}_head{H}.tsv for every record plus manifest.tsv. Returns
/// the written file names.
std::vector<std::string> write_heatmaps(const std::vector<HeatmapRecord>& records,
                                        const std::string& out_dir);

}  // namespace qknorm
