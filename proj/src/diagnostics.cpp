#include "diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "error.hpp"

namespace qknorm {

namespace {

constexpr double kRowSumTol = 1e-6;

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

EntropyReport attention_entropy(const Tensor& weights, const std::vector<unsigned char>& query_keep,
                                std::size_t key_count) {
  if (weights.rank() != 3) {
    fail(ErrorCode::kShapeMismatch,
         "attention_entropy expects [h, n_q, n_kv], got " + shape_str(weights.shape()));
  }
  const std::size_t h = weights.dim(0), nq = weights.dim(1), nk = weights.dim(2);
  if (!query_keep.empty() && query_keep.size() != nq) {
    fail(ErrorCode::kShapeMismatch, "attention_entropy: query mask has " +
                                        std::to_string(query_keep.size()) + " entries for " +
                                        std::to_string(nq) + " rows");
  }
  if (key_count == 0) key_count = nk;
  require(key_count <= nk, "attention_entropy: key_count exceeds n_kv");
  const double log_keys = std::log(static_cast<double>(key_count));

  EntropyReport r;
  auto w = weights.data();
  for (std::size_t head = 0; head < h; ++head) {
    double total = 0.0;
    std::size_t rows = 0;
    for (std::size_t q = 0; q < nq; ++q) {
      if (!query_keep.empty() && !query_keep[q]) continue;
      const double* row = w.data() + (head * nq + q) * nk;
      double sum = 0.0, ent = 0.0;
      for (std::size_t k = 0; k < nk; ++k) {
        if (row[k] < 0.0 || std::isnan(row[k])) {
          fail(ErrorCode::kInvalidArgument, "attention_entropy: invalid weight in head " +
                                                std::to_string(head) + " row " +
                                                std::to_string(q));
        }
        sum += row[k];
        if (row[k] > 0.0) ent -= row[k] * std::log(row[k]);
      }
      if (std::abs(sum - 1.0) > kRowSumTol) {
        fail(ErrorCode::kInvalidArgument, "attention_entropy: head " + std::to_string(head) +
                                              " row " + std::to_string(q) + " sums to " +
                                              format_double(sum));
      }
      total += ent;
      ++rows;
    }
    require(rows > 0, "attention_entropy: every query row is masked");
    const double mean = total / static_cast<double>(rows);
    r.per_head.push_back(mean);
    r.normalized.push_back(key_count > 1 ? mean / log_keys : 0.0);
  }
  for (std::size_t i = 0; i < h; ++i) {
    r.mean += r.per_head[i] / static_cast<double>(h);
    r.normalized_mean += r.normalized[i] / static_cast<double>(h);
  }
  return r;
}

EntropyReport encoder_entropy(const Transformer& model,
                              const std::vector<std::vector<int>>& sources,
                              std::size_t batch_size) {
  require(!sources.empty(), "encoder_entropy: no sentences");
  require(batch_size > 0, "encoder_entropy: batch size must be positive");
  NoGradGuard no_grad;
  const std::size_t heads = model.config().num_heads;
  EntropyReport acc;
  acc.per_head.assign(heads, 0.0);
  acc.normalized.assign(heads, 0.0);
  std::size_t count = 0;
  for (std::size_t start = 0; start < sources.size(); start += batch_size) {
    const std::size_t end = std::min(sources.size(), start + batch_size);
    std::vector<std::vector<int>> chunk(sources.begin() + static_cast<std::ptrdiff_t>(start),
                                        sources.begin() + static_cast<std::ptrdiff_t>(end));
    const TokenBatch src = TokenBatch::from_sequences(chunk);
    AttentionTrace trace;
    ForwardOptions opts;
    opts.trace = &trace;
    model.encode(src, opts);
    const std::size_t n = src.length;
    for (const Tensor& layer : trace.encoder_self) {
      auto w = layer.data();
      for (std::size_t b = 0; b < chunk.size(); ++b) {
        const std::size_t len = chunk[b].size();
        // Pad keys carry exactly zero weight, so the [len, len] block is a
        // complete distribution per row.
        std::vector<double> block;
        block.reserve(heads * len * len);
        for (std::size_t hd = 0; hd < heads; ++hd) {
          for (std::size_t q = 0; q < len; ++q) {
            const double* row = w.data() + ((b * heads + hd) * n + q) * n;
            block.insert(block.end(), row, row + len);
          }
        }
        const auto r = attention_entropy(Tensor::from({heads, len, len}, std::move(block)));
        for (std::size_t hd = 0; hd < heads; ++hd) {
          acc.per_head[hd] += r.per_head[hd];
          acc.normalized[hd] += r.normalized[hd];
        }
        ++count;
      }
    }
  }
  require(count > 0, "encoder_entropy: model has no encoder layers");
  for (std::size_t hd = 0; hd < heads; ++hd) {
    acc.per_head[hd] /= static_cast<double>(count);
    acc.normalized[hd] /= static_cast<double>(count);
    acc.mean += acc.per_head[hd] / static_cast<double>(heads);
    acc.normalized_mean += acc.normalized[hd] / static_cast<double>(heads);
  }
  return acc;
}

std::vector<HeatmapRecord> encoder_heatmaps(const Transformer& model,
                                            const std::vector<std::string>& tokens,
                                            const std::vector<int>& ids) {
  require(tokens.size() == ids.size(), "encoder_heatmaps: tokens and ids differ in length");
  NoGradGuard no_grad;
  std::vector<int> seq = ids;
  seq.push_back(kEos);
  std::vector<std::string> labels = tokens;
  labels.emplace_back("<eos>");
  const TokenBatch src = TokenBatch::from_sequences({seq});
  AttentionTrace trace;
  ForwardOptions opts;
  opts.trace = &trace;
  model.encode(src, opts);

  const std::size_t heads = model.config().num_heads;
  const std::size_t n = seq.size();
  std::vector<HeatmapRecord> out;
  for (std::size_t layer = 0; layer < trace.encoder_self.size(); ++layer) {
    auto w = trace.encoder_self[layer].data();
    for (std::size_t hd = 0; hd < heads; ++hd) {
      HeatmapRecord rec;
      rec.layer = layer;
      rec.head = hd;
      rec.tokens = labels;
      for (std::size_t q = 0; q < n; ++q) {
        const double* row = w.data() + (hd * n + q) * n;
        rec.weights.emplace_back(row, row + n);
      }
      out.push_back(std::move(rec));
    }
  }
  return out;
}

std::vector<std::string> write_heatmaps(const std::vector<HeatmapRecord>& records,
                                        const std::string& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create " + out_dir + ": " + ec.message());
  const std::filesystem::path dir(out_dir);
  std::vector<std::string> files;
  std::string manifest = "file\tlayer\thead\trows\tcols\ttokens\n";
  for (const auto& rec : records) {
    const std::string name =
        "layer" + std::to_string(rec.layer) + "_head" + std::to_string(rec.head) + ".tsv";
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) fail(ErrorCode::kIo, "cannot write " + (dir / name).string());
    for (const auto& row : rec.weights) {
      for (std::size_t k = 0; k < row.size(); ++k) {
        if (k) out << '\t';
        out << format_double(row[k]);
      }
      out << '\n';
    }
    if (!out) fail(ErrorCode::kIo, "write failed for " + (dir / name).string());
    std::string joined;
    for (std::size_t i = 0; i < rec.tokens.size(); ++i) joined += (i ? " " : "") + rec.tokens[i];
    manifest += name + '\t' + std::to_string(rec.layer) + '\t' + std::to_string(rec.head) + '\t' +
                std::to_string(rec.weights.size()) + '\t' +
                std::to_string(rec.weights.empty() ? 0 : rec.weights[0].size()) + '\t' + joined +
                '\n';
    files.push_back(name);
  }
  std::ofstream m(dir / "manifest.tsv", std::ios::binary);
  if (!m) fail(ErrorCode::kIo, "cannot write " + (dir / "manifest.tsv").string());
  m << manifest;
  files.emplace_back("manifest.tsv");
  return files;
}

}  // namespace qknorm
