#include "corpus.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "error.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace qknorm {

TokenizerMode parse_tokenizer(std::string_view name) {
  if (name == "whitespace" || name == "word") return TokenizerMode::kWhitespace;
  if (name == "char") return TokenizerMode::kChar;
  fail(ErrorCode::kInvalidArgument, "unknown tokenizer '" + std::string(name) +
                                        "' (expected whitespace or char)");
}

std::string_view tokenizer_name(TokenizerMode mode) {
  return mode == TokenizerMode::kChar ? "char" : "whitespace";
}

std::vector<std::string> tokenize(std::string_view line, TokenizerMode mode) {
  std::vector<std::string> out;
  if (mode == TokenizerMode::kWhitespace) {
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
      std::size_t j = i;
      while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
      if (j > i) out.emplace_back(line.substr(i, j - i));
      i = j;
    }
    return out;
  }
  for (std::size_t i = 0; i < line.size();) {
    const auto lead = static_cast<unsigned char>(line[i]);
    std::size_t len = 1;
    if (lead >= 0xF0) len = 4;
    else if (lead >= 0xE0) len = 3;
    else if (lead >= 0xC0) len = 2;
    len = std::min(len, line.size() - i);
    if (!std::isspace(lead)) out.emplace_back(line.substr(i, len));
    i += len;
  }
  return out;
}

std::string detokenize(const std::vector<std::string>& tokens, TokenizerMode mode) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i && mode == TokenizerMode::kWhitespace) out += ' ';
    out += tokens[i];
  }
  return out;
}

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(std::vector<std::string> tokens) {
  static const char* kSpecials[] = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const char* s : kSpecials) {
    index_.emplace(s, static_cast<int>(tokens_.size()));
    tokens_.emplace_back(s);
  }
  for (auto& t : tokens) {
    if (index_.count(t)) continue;
    index_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.push_back(std::move(t));
  }
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) { return Vocab(std::move(tokens)); }

Vocab Vocab::build(const std::vector<std::vector<std::string>>& sequences) {
  std::vector<std::string> all;
  for (const auto& s : sequences) all.insert(all.end(), s.begin(), s.end());
  return from_tokens(std::move(all));
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(),
          "token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocab::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  for (int i : ids) {
    if (i >= kNumSpecials || i == kUnk) out.push_back(token(i));
  }
  return out;
}

std::vector<int> Corpus::train_lengths() const {
  std::vector<int> out;
  out.reserve(2 * train.size());
  for (const auto& s : train.src) out.push_back(static_cast<int>(s.size()));
  for (const auto& t : train.tgt) out.push_back(static_cast<int>(t.size()));
  return out;
}

LengthStats Corpus::length_stats(double percentile) const {
  return LengthStats::compute(train_lengths(), percentile);
}

namespace {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace

ParallelText read_parallel(const std::string& src_path, const std::string& tgt_path,
                           TokenizerMode mode) {
  const auto src = read_lines(src_path);
  const auto tgt = read_lines(tgt_path);
  if (src.size() != tgt.size()) {
    fail(ErrorCode::kInvalidArgument, "line-count mismatch: " + src_path + " has " +
                                          std::to_string(src.size()) + " lines, " +
                                          tgt_path + " has " + std::to_string(tgt.size()));
  }
  ParallelText text;
  for (std::size_t i = 0; i < src.size(); ++i) {
    text.src.push_back(tokenize(src[i], mode));
    text.tgt.push_back(tokenize(tgt[i], mode));
  }
  return text;
}

Corpus build_corpus(ParallelText train, ParallelText dev, ParallelText test, TokenizerMode mode) {
  if (train.size() == 0) fail(ErrorCode::kInvalidArgument, "empty training corpus");
  Corpus c;
  c.src_vocab = Vocab::build(train.src);
  c.tgt_vocab = Vocab::build(train.tgt);
  c.train = std::move(train);
  c.dev = std::move(dev);
  c.test = std::move(test);
  c.tokenizer = mode;
  return c;
}

CorpusPaths CorpusPaths::in_directory(const std::string& dir) {
  const std::filesystem::path d(dir);
  auto p = [&](const char* name) { return (d / name).string(); };
  return {p("train.src"), p("train.tgt"), p("dev.src"), p("dev.tgt"), p("test.src"), p("test.tgt")};
}

Corpus load_corpus(const CorpusPaths& paths, TokenizerMode mode) {
  auto optional_split = [&](const std::string& s, const std::string& t) {
    if (s.empty() && t.empty()) return ParallelText{};
    return read_parallel(s, t, mode);
  };
  return build_corpus(read_parallel(paths.train_src, paths.train_tgt, mode),
                      optional_split(paths.dev_src, paths.dev_tgt),
                      optional_split(paths.test_src, paths.test_tgt), mode);
}

void write_corpus(const Corpus& corpus, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create " + dir + ": " + ec.message());
  const auto paths = CorpusPaths::in_directory(dir);
  auto write = [&](const std::string& path, const std::vector<std::vector<std::string>>& lines) {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::kIo, "cannot write " + path);
    for (const auto& l : lines) out << detokenize(l, corpus.tokenizer) << '\n';
  };
  write(paths.train_src, corpus.train.src);
  write(paths.train_tgt, corpus.train.tgt);
  write(paths.dev_src, corpus.dev.src);
  write(paths.dev_tgt, corpus.dev.tgt);
  write(paths.test_src, corpus.test.src);
  write(paths.test_tgt, corpus.test.tgt);
}

ToyTask parse_toy_task(std::string_view name) {
  if (name == "copy") return ToyTask::kCopy;
  if (name == "reverse") return ToyTask::kReverse;
  if (name == "shift") return ToyTask::kShift;
  fail(ErrorCode::kInvalidArgument,
       "unknown toy task '" + std::string(name) + "' (expected copy, reverse or shift)");
}

namespace {

std::string symbol(std::size_t i) {
  if (i < 26) return std::string(1, static_cast<char>('a' + i));
  return "w" + std::to_string(i);
}

}  // namespace

Corpus make_toy_task(const ToySpec& spec) {
  require(spec.vocab_size >= 4, "toy task needs vocab_size >= 4");
  require(spec.max_len >= 1, "toy task needs max_len >= 1");
  require(spec.n_train > 0, "toy task needs at least one training pair");
  Rng rng(spec.seed);
  auto make_split = [&](std::size_t n) {
    ParallelText text;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t len = 1 + rng.below(spec.max_len);
      std::vector<std::size_t> ids(len);
      for (auto& s : ids) s = rng.below(spec.vocab_size);
      std::vector<std::string> src, tgt;
      for (auto s : ids) src.push_back(symbol(s));
      switch (spec.kind) {
        case ToyTask::kCopy:
          tgt = src;
          break;
        case ToyTask::kReverse:
          tgt.assign(src.rbegin(), src.rend());
          break;
        case ToyTask::kShift:
          for (auto s : ids) tgt.push_back(symbol((s + 1) % spec.vocab_size));
          break;
      }
      text.src.push_back(std::move(src));
      text.tgt.push_back(std::move(tgt));
    }
    return text;
  };
  ParallelText train = make_split(spec.n_train);
  ParallelText dev = make_split(spec.n_dev);
  ParallelText test = make_split(spec.n_test);
  return build_corpus(std::move(train), std::move(dev), std::move(test), TokenizerMode::kWhitespace);
}

}  // namespace qknorm
