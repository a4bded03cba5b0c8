#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "attention.hpp"

namespace qknorm {

enum class TokenizerMode { kWhitespace, kChar };

TokenizerMode parse_tokenizer(std::string_view name);
std::string_view tokenizer_name(TokenizerMode mode);

/// Whitespace split, or one token per UTF-8 code point (spaces dropped).
std::vector<std::string> tokenize(std::string_view line, TokenizerMode mode);
std::string detokenize(const std::vector<std::string>& tokens, TokenizerMode mode);

/// Token <-> id map. Ids 0..3 are pad, bos, eos, unk.
class Vocab {
 public:
  Vocab();
  /// Specials followed by every distinct token in first-seen order. Tokens
  /// that collide with a special name are folded into it.
  static Vocab build(const std::vector<std::vector<std::string>>& sequences);
  static Vocab from_tokens(std::vector<std::string> tokens);

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  /// Drops pad, bos and eos; unk stays visible.
  std::vector<std::string> decode(const std::vector<int>& ids) const;

 private:
  explicit Vocab(std::vector<std::string> tokens);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct ParallelText {
  std::vector<std::vector<std::string>> src;
  std::vector<std::vector<std::string>> tgt;
  std::size_t size() const { return src.size(); }
};

struct Corpus {
  ParallelText train, dev, test;
  Vocab src_vocab, tgt_vocab;
  TokenizerMode tokenizer = TokenizerMode::kWhitespace;

  /// Token counts of every training source and target sequence.
  std::vector<int> train_lengths() const;
  LengthStats length_stats(double percentile = 97.5) const;
};

/// One split from a pair of line-aligned files.
ParallelText read_parallel(const std::string& src_path, const std::string& tgt_path,
                           TokenizerMode mode);

/// Vocabularies come from the training split only.
Corpus build_corpus(ParallelText train, ParallelText dev, ParallelText test,
                    TokenizerMode mode);

struct CorpusPaths {
  std::string train_src, train_tgt;
  std::string dev_src, dev_tgt;
  std::string test_src, test_tgt;

  /// <dir>/{train,dev,test}.{src,tgt}
  static CorpusPaths in_directory(const std::string& dir);
};

/// Dev and test paths may be empty.
Corpus load_corpus(const CorpusPaths& paths, TokenizerMode mode);

void write_corpus(const Corpus& corpus, const std::string& dir);

enum class ToyTask { kCopy, kReverse, kShift };
ToyTask parse_toy_task(std::string_view name);

struct ToySpec {
  ToyTask kind = ToyTask::kReverse;
  std::size_t vocab_size = 20;
  std::size_t n_train = 2000;
  std::size_t n_dev = 200;
  std::size_t n_test = 200;
  std::size_t max_len = 10;
  std::uint64_t seed = 1;
};

/// Synthetic bitext: sources are uniform random symbol strings of length
/// 1..max_len. copy: target = source. reverse: mirrored source. shift: every
/// symbol replaced by its successor (cyclic).
Corpus make_toy_task(const ToySpec& spec);

}  // namespace qknorm
