#include "checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "error.hpp"

namespace qknorm {

namespace {

constexpr const char* kMagic = "qknorm-checkpoint";
constexpr int kVersion = 1;

std::string hex(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_hex(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    fail(ErrorCode::kFormat, "checkpoint: bad number '" + s + "' in " + what);
  }
  return v;
}

class LineReader {
 public:
  explicit LineReader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  std::string next(const char* expecting) {
    std::string line;
    if (!std::getline(in_, line)) {
      fail(ErrorCode::kFormat, path_ + ": truncated checkpoint, expected " + expecting);
    }
    ++lineno_;
    return line;
  }

  [[noreturn]] void error(const std::string& msg) const {
    fail(ErrorCode::kFormat, path_ + ":" + std::to_string(lineno_) + ": " + msg);
  }

  std::size_t count_header(const std::string& tag) {
    const std::string line = next(tag.c_str());
    std::istringstream ss(line);
    std::string word;
    std::size_t n = 0;
    if (!(ss >> word) || word != tag || !(ss >> n)) error("expected '" + tag + " <count>'");
    return n;
  }

 private:
  std::istream& in_;
  std::string path_;
  std::size_t lineno_ = 0;
};

}  // namespace

std::string Checkpoint::meta_value(const std::string& key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return v;
  }
  return "";
}

Checkpoint make_checkpoint(const Transformer& model, const RunConfig& config, const Vocab& src,
                           const Vocab& tgt,
                           std::vector<std::pair<std::string, std::string>> meta) {
  Checkpoint c;
  c.config = config;
  c.config.model = model.config();
  c.src_vocab = src;
  c.tgt_vocab = tgt;
  for (const auto& nt : model.tensors()) c.params.push_back({nt.name, nt.tensor.detach()});
  c.g_values = model.g_values();
  c.meta = std::move(meta);
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ostringstream out;
  out << kMagic << ' ' << kVersion << '\n';
  const std::string config = format_config(ckpt.config, {ConfigGroup::kModel, ConfigGroup::kTrain}) +
                             "tokenizer=" + std::string(tokenizer_name(ckpt.config.data.tokenizer)) +
                             "\n";
  std::size_t config_lines = 0;
  for (char ch : config) config_lines += ch == '\n';
  out << "config " << config_lines << '\n' << config;
  out << "meta " << ckpt.meta.size() << '\n';
  for (const auto& [k, v] : ckpt.meta) out << k << '=' << v << '\n';
  for (const auto* vocab : {&ckpt.src_vocab, &ckpt.tgt_vocab}) {
    out << (vocab == &ckpt.src_vocab ? "src-vocab " : "tgt-vocab ") << vocab->size() << '\n';
    for (const auto& t : vocab->tokens()) out << t << '\n';
  }
  out << "params " << ckpt.params.size() << '\n';
  for (const auto& nt : ckpt.params) {
    out << nt.name << ' ' << nt.tensor.rank();
    for (auto d : nt.tensor.shape()) out << ' ' << d;
    out << '\n';
    auto data = nt.tensor.data();
    for (std::size_t i = 0; i < data.size(); ++i) out << (i ? " " : "") << hex(data[i]);
    out << '\n';
  }
  out << "g " << ckpt.g_values.size() << '\n';
  for (std::size_t i = 0; i < ckpt.g_values.size(); ++i) {
    out << (i ? " " : "") << hex(ckpt.g_values[i]);
  }
  out << "\nend\n";

  const std::filesystem::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(target.parent_path(), ec);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) fail(ErrorCode::kIo, "cannot write checkpoint " + tmp);
    f << out.str();
    if (!f) fail(ErrorCode::kIo, "write failed for checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) fail(ErrorCode::kIo, "cannot move checkpoint into place at " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open checkpoint " + path);
  LineReader r(in, path);
  {
    std::istringstream ss(r.next("header"));
    std::string magic;
    int version = 0;
    if (!(ss >> magic >> version) || magic != kMagic) r.error("not a checkpoint file");
    if (version != kVersion) r.error("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  const std::size_t n_config = r.count_header("config");
  for (std::size_t i = 0; i < n_config; ++i) {
    const std::string line = r.next("config entry");
    const auto eq = line.find('=');
    if (eq == std::string::npos) r.error("expected key=value");
    try {
      set_config(c.config, line.substr(0, eq), line.substr(eq + 1));
    } catch (const Error& e) {
      r.error(e.what());
    }
  }
  const std::size_t n_meta = r.count_header("meta");
  for (std::size_t i = 0; i < n_meta; ++i) {
    const std::string line = r.next("meta entry");
    const auto eq = line.find('=');
    if (eq == std::string::npos) r.error("expected key=value");
    c.meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  for (const char* tag : {"src-vocab", "tgt-vocab"}) {
    const std::size_t n = r.count_header(tag);
    std::vector<std::string> tokens;
    for (std::size_t i = 0; i < n; ++i) tokens.push_back(r.next("vocabulary token"));
    Vocab v = Vocab::from_tokens(tokens);
    if (v.size() != n) r.error(std::string(tag) + " has duplicate or misplaced special tokens");
    (std::string(tag) == "src-vocab" ? c.src_vocab : c.tgt_vocab) = std::move(v);
  }
  const std::size_t n_params = r.count_header("params");
  for (std::size_t i = 0; i < n_params; ++i) {
    std::istringstream head(r.next("parameter header"));
    std::string name;
    std::size_t rank = 0;
    if (!(head >> name >> rank)) r.error("expected '<name> <rank> <dims...>'");
    Shape shape(rank);
    for (auto& d : shape) {
      if (!(head >> d) || d == 0) r.error("bad shape for parameter " + name);
    }
    std::istringstream body(r.next("parameter values"));
    std::vector<double> values;
    std::string tok;
    while (body >> tok) values.push_back(parse_hex(tok, name));
    if (values.size() != shape_numel(shape)) {
      r.error("parameter " + name + " has " + std::to_string(values.size()) +
              " values for shape " + shape_str(shape));
    }
    c.params.push_back({name, Tensor::from(shape, std::move(values))});
  }
  const std::size_t n_g = r.count_header("g");
  {
    std::istringstream body(r.next("g values"));
    std::string tok;
    while (body >> tok) c.g_values.push_back(parse_hex(tok, "g"));
    if (c.g_values.size() != n_g) r.error("g value count mismatch");
  }
  if (r.next("end marker") != "end") r.error("missing end marker");
  c.config.model.src_vocab = c.src_vocab.size();
  c.config.model.tgt_vocab = c.tgt_vocab.size();
  return c;
}

Transformer restore_model(const Checkpoint& ckpt) {
  ModelConfig mc = ckpt.config.model;
  mc.src_vocab = ckpt.src_vocab.size();
  mc.tgt_vocab = ckpt.tgt_vocab.size();
  Transformer model(mc, mc.g_init.value_or(1.0), ckpt.config.train.seed);
  model.load_values(ckpt.params);
  return model;
}

}  // namespace qknorm
