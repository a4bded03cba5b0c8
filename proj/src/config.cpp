#include "config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "error.hpp"

namespace qknorm {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt(bool v) { return v ? "true" : "false"; }

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) {
    fail(ErrorCode::kInvalidArgument, key + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) {
    fail(ErrorCode::kInvalidArgument,
         key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail(ErrorCode::kInvalidArgument, key + ": expected true or false, got '" + v + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Member-pointer helpers keep the table below to one line per key.
template <typename Sec, typename T>
using Member = T Sec::*;

template <typename Sec>
Sec& section(RunConfig& c);
template <>
ModelConfig& section<ModelConfig>(RunConfig& c) { return c.model; }
template <>
TrainConfig& section<TrainConfig>(RunConfig& c) { return c.train; }
template <>
DataConfig& section<DataConfig>(RunConfig& c) { return c.data; }
template <typename Sec>
const Sec& section(const RunConfig& c) { return section<Sec>(const_cast<RunConfig&>(c)); }

template <typename Sec>
ConfigGroup group_of();
template <>
ConfigGroup group_of<ModelConfig>() { return ConfigGroup::kModel; }
template <>
ConfigGroup group_of<TrainConfig>() { return ConfigGroup::kTrain; }
template <>
ConfigGroup group_of<DataConfig>() { return ConfigGroup::kData; }

template <typename Sec>
ConfigKey real_key(const char* name, Member<Sec, double> m, const char* help) {
  return {name, group_of<Sec>(), help,
          [m](const RunConfig& c) { return fmt(section<Sec>(c).*m); },
          [m, name](RunConfig& c, const std::string& v) { section<Sec>(c).*m = to_double(name, v); }};
}

template <typename Sec, typename Int>
ConfigKey int_key(const char* name, Member<Sec, Int> m, const char* help) {
  return {name, group_of<Sec>(), help,
          [m](const RunConfig& c) { return std::to_string(section<Sec>(c).*m); },
          [m, name](RunConfig& c, const std::string& v) {
            section<Sec>(c).*m = static_cast<Int>(to_u64(name, v));
          }};
}

template <typename Sec>
ConfigKey bool_key(const char* name, Member<Sec, bool> m, const char* help) {
  return {name, group_of<Sec>(), help,
          [m](const RunConfig& c) { return fmt(section<Sec>(c).*m); },
          [m, name](RunConfig& c, const std::string& v) { section<Sec>(c).*m = to_bool(name, v); }};
}

template <typename Sec>
ConfigKey text_key(const char* name, Member<Sec, std::string> m, const char* help) {
  return {name, group_of<Sec>(), help,
          [m](const RunConfig& c) { return section<Sec>(c).*m; },
          [m](RunConfig& c, const std::string& v) { section<Sec>(c).*m = v; }};
}

std::vector<ConfigKey> build_keys() {
  using M = ModelConfig;
  using T = TrainConfig;
  using D = DataConfig;
  std::vector<ConfigKey> k;
  k.push_back(int_key<M>("d-model", &M::d_model, "embedding width"));
  k.push_back(int_key<M>("num-heads", &M::num_heads, "attention heads per layer"));
  k.push_back(int_key<M>("num-layers", &M::num_layers, "encoder and decoder depth"));
  k.push_back(int_key<M>("d-ff", &M::d_ff, "feed-forward width (0: 4 * d-model)"));
  k.push_back(real_key<M>("dropout", &M::dropout, "dropout probability"));
  k.push_back({"norm-placement", ConfigGroup::kModel, "pre or post",
               [](const RunConfig& c) {
                 return std::string(c.model.norm_placement == NormPlacement::kPre ? "pre" : "post");
               },
               [](RunConfig& c, const std::string& v) {
                 if (v == "pre") c.model.norm_placement = NormPlacement::kPre;
                 else if (v == "post") c.model.norm_placement = NormPlacement::kPost;
                 else fail(ErrorCode::kInvalidArgument, "norm-placement: expected pre or post, got '" + v + "'");
               }});
  k.push_back({"residual-norm", ConfigGroup::kModel, "layernorm or scalenorm",
               [](const RunConfig& c) {
                 return std::string(c.model.residual_norm == ResidualNorm::kLayerNorm ? "layernorm"
                                                                                     : "scalenorm");
               },
               [](RunConfig& c, const std::string& v) {
                 if (v == "layernorm") c.model.residual_norm = ResidualNorm::kLayerNorm;
                 else if (v == "scalenorm") c.model.residual_norm = ResidualNorm::kScaleNorm;
                 else fail(ErrorCode::kInvalidArgument, "residual-norm: expected layernorm or scalenorm, got '" + v + "'");
               }});
  k.push_back(bool_key<M>("fixnorm", &M::use_fixnorm, "unit-length embedding rows"));
  k.push_back({"attention", ConfigGroup::kModel, "qknorm or scaled-dot",
               [](const RunConfig& c) {
                 return std::string(c.model.attention == AttentionKind::kQKNorm ? "qknorm"
                                                                               : "scaled-dot");
               },
               [](RunConfig& c, const std::string& v) {
                 if (v == "qknorm") c.model.attention = AttentionKind::kQKNorm;
                 else if (v == "scaled-dot") c.model.attention = AttentionKind::kScaledDot;
                 else fail(ErrorCode::kInvalidArgument, "attention: expected qknorm or scaled-dot, got '" + v + "'");
               }});
  k.push_back(bool_key<M>("g-learnable", &M::g_learnable, "train the softmax scale g"));
  k.push_back({"g-init", ConfigGroup::kModel, "initial g, or auto for log2(L^2 - L)",
               [](const RunConfig& c) { return c.model.g_init ? fmt(*c.model.g_init) : "auto"; },
               [](RunConfig& c, const std::string& v) {
                 if (v == "auto") c.model.g_init.reset();
                 else c.model.g_init = to_double("g-init", v);
               }});
  k.push_back(bool_key<M>("per-head-g", &M::per_head_g, "one g per head instead of per layer"));
  k.push_back(bool_key<M>("normalize-v", &M::normalize_v, "also l2-normalize value rows"));
  k.push_back(bool_key<M>("tie-embeddings", &M::tie_embeddings, "share target embedding and output projection"));
  k.push_back(int_key<M>("max-seq-len", &M::max_seq_len, "longest sequence the model accepts"));

  k.push_back(real_key<T>("base-lr", &T::base_lr, "peak learning rate"));
  k.push_back(int_key<T>("warmup-steps", &T::warmup_steps, "linear warmup steps"));
  k.push_back(real_key<T>("decay-factor", &T::decay_factor, "lr multiplier per decay"));
  k.push_back(int_key<T>("patience", &T::patience, "validations without improvement per decay"));
  k.push_back(real_key<T>("min-lr", &T::min_lr, "training stops once decays reach this rate"));
  k.push_back(int_key<T>("max-epochs", &T::max_epochs, "epoch budget"));
  k.push_back(int_key<T>("batch-size", &T::batch_size, "sentence pairs per step"));
  k.push_back(int_key<T>("seed", &T::seed, "seed for initialization, shuffling and dropout"));
  k.push_back(text_key<T>("checkpoint", &T::checkpoint_path, "best-checkpoint path (empty: none)"));
  k.push_back(real_key<T>("label-smoothing", &T::label_smoothing, "label smoothing mass"));
  k.push_back(real_key<T>("clip-norm", &T::clip_norm, "global gradient-norm clip (0: off)"));
  k.push_back(real_key<T>("adam-beta1", &T::adam_beta1, "Adam first-moment decay"));
  k.push_back(real_key<T>("adam-beta2", &T::adam_beta2, "Adam second-moment decay"));
  k.push_back(real_key<T>("adam-eps", &T::adam_eps, "Adam denominator epsilon"));
  k.push_back({"length-percentile", ConfigGroup::kTrain, "percentile for L (number or max)",
               [](const RunConfig& c) { return fmt(c.train.length_percentile); },
               [](RunConfig& c, const std::string& v) {
                 c.train.length_percentile = v == "max" ? 100.0 : to_double("length-percentile", v);
               }});
  k.push_back(real_key<T>("stop-dev-bleu", &T::stop_dev_bleu, "stop once dev BLEU reaches this (0: off)"));
  k.push_back(int_key<T>("decode-margin", &T::decode_margin, "decode steps beyond source length"));

  k.push_back(text_key<D>("data-dir", &D::data_dir, "directory with {train,dev,test}.{src,tgt}"));
  k.push_back(text_key<D>("train-src", &D::train_src, "training source file"));
  k.push_back(text_key<D>("train-tgt", &D::train_tgt, "training target file"));
  k.push_back(text_key<D>("dev-src", &D::dev_src, "dev source file"));
  k.push_back(text_key<D>("dev-tgt", &D::dev_tgt, "dev target file"));
  k.push_back(text_key<D>("test-src", &D::test_src, "test source file"));
  k.push_back(text_key<D>("test-tgt", &D::test_tgt, "test target file"));
  k.push_back({"tokenizer", ConfigGroup::kData, "whitespace or char",
               [](const RunConfig& c) { return std::string(tokenizer_name(c.data.tokenizer)); },
               [](RunConfig& c, const std::string& v) { c.data.tokenizer = parse_tokenizer(v); }});
  k.push_back({"toy-task", ConfigGroup::kData, "generate copy, reverse or shift data instead of reading files",
               [](const RunConfig& c) { return c.data.toy_task; },
               [](RunConfig& c, const std::string& v) {
                 if (!v.empty()) c.data.toy.kind = parse_toy_task(v);
                 c.data.toy_task = v;
               }});
  k.push_back({"toy-vocab", ConfigGroup::kData, "toy symbol count",
               [](const RunConfig& c) { return std::to_string(c.data.toy.vocab_size); },
               [](RunConfig& c, const std::string& v) { c.data.toy.vocab_size = to_u64("toy-vocab", v); }});
  k.push_back({"toy-train", ConfigGroup::kData, "toy training pairs",
               [](const RunConfig& c) { return std::to_string(c.data.toy.n_train); },
               [](RunConfig& c, const std::string& v) { c.data.toy.n_train = to_u64("toy-train", v); }});
  k.push_back({"toy-dev", ConfigGroup::kData, "toy dev pairs",
               [](const RunConfig& c) { return std::to_string(c.data.toy.n_dev); },
               [](RunConfig& c, const std::string& v) { c.data.toy.n_dev = to_u64("toy-dev", v); }});
  k.push_back({"toy-test", ConfigGroup::kData, "toy test pairs",
               [](const RunConfig& c) { return std::to_string(c.data.toy.n_test); },
               [](RunConfig& c, const std::string& v) { c.data.toy.n_test = to_u64("toy-test", v); }});
  k.push_back({"toy-max-len", ConfigGroup::kData, "longest toy sentence",
               [](const RunConfig& c) { return std::to_string(c.data.toy.max_len); },
               [](RunConfig& c, const std::string& v) { c.data.toy.max_len = to_u64("toy-max-len", v); }});
  k.push_back({"toy-seed", ConfigGroup::kData, "toy generator seed",
               [](const RunConfig& c) { return std::to_string(c.data.toy.seed); },
               [](RunConfig& c, const std::string& v) { c.data.toy.seed = to_u64("toy-seed", v); }});
  return k;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

const ConfigKey* find_config_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

void set_config(RunConfig& cfg, const std::string& key, const std::string& value) {
  const ConfigKey* k = find_config_key(key);
  if (!k) fail(ErrorCode::kInvalidArgument, "unknown config key '" + key + "'");
  k->set(cfg, value);
}

std::string get_config(const RunConfig& cfg, const std::string& key) {
  const ConfigKey* k = find_config_key(key);
  if (!k) fail(ErrorCode::kInvalidArgument, "unknown config key '" + key + "'");
  return k->get(cfg);
}

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                   const std::string& origin) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::kFormat,
           origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  for (const auto& [key, value] : parse_config_text(buf.str(), path)) {
    try {
      set_config(cfg, key, value);
    } catch (const Error& e) {
      fail(e.code(), path + ": " + e.what());
    }
  }
}

std::string format_config(const RunConfig& cfg, const std::vector<ConfigGroup>& groups) {
  std::string out;
  for (const auto& k : config_keys()) {
    for (auto g : groups) {
      if (k.group == g) out += k.name + "=" + k.get(cfg) + "\n";
    }
  }
  return out;
}

Corpus load_data(const DataConfig& data) {
  if (!data.toy_task.empty()) {
    ToySpec spec = data.toy;
    spec.kind = parse_toy_task(data.toy_task);
    return make_toy_task(spec);
  }
  CorpusPaths paths;
  if (!data.data_dir.empty()) paths = CorpusPaths::in_directory(data.data_dir);
  auto pick = [](const std::string& explicit_path, std::string& slot) {
    if (!explicit_path.empty()) slot = explicit_path;
  };
  pick(data.train_src, paths.train_src);
  pick(data.train_tgt, paths.train_tgt);
  pick(data.dev_src, paths.dev_src);
  pick(data.dev_tgt, paths.dev_tgt);
  pick(data.test_src, paths.test_src);
  pick(data.test_tgt, paths.test_tgt);
  if (paths.train_src.empty() || paths.train_tgt.empty()) {
    fail(ErrorCode::kInvalidArgument,
         "no training data: set data-dir, train-src/train-tgt or toy-task");
  }
  // A data directory may lack test files; treat missing optional splits as empty.
  auto drop_missing = [](std::string& s, std::string& t) {
    std::ifstream a(s), b(t);
    if (!a && !b) s.clear(), t.clear();
  };
  if (!data.data_dir.empty()) {
    drop_missing(paths.dev_src, paths.dev_tgt);
    drop_missing(paths.test_src, paths.test_tgt);
  }
  return load_corpus(paths, data.tokenizer);
}

}  // namespace qknorm
