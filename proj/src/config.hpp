#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "corpus.hpp"
#include "model.hpp"
#include "schedule.hpp"

namespace qknorm {

/// Where the corpus comes from: plain-text files or a generated toy task.
struct DataConfig {
  std::string data_dir;  // holds {train,dev,test}.{src,tgt}
  std::string train_src, train_tgt, dev_src, dev_tgt, test_src, test_tgt;
  TokenizerMode tokenizer = TokenizerMode::kWhitespace;
  std::string toy_task;  // copy | reverse | shift; empty reads files
  ToySpec toy;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

enum class ConfigGroup { kModel, kTrain, kData };

struct ConfigKey {
  std::string name;  // kebab-case
  ConfigGroup group;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

/// Every settable key, in a stable order.
const std::vector<ConfigKey>& config_keys();
const ConfigKey* find_config_key(const std::string& name);

/// Throws on an unknown key or a malformed value.
void set_config(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config(const RunConfig& cfg, const std::string& key);

/// key=value lines; '#' starts a comment, blank lines are skipped.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                   const std::string& origin);
void load_config_file(RunConfig& cfg, const std::string& path);

/// All keys of the given groups as key=value lines.
std::string format_config(const RunConfig& cfg, const std::vector<ConfigGroup>& groups);

/// Corpus described by the data section.
Corpus load_data(const DataConfig& data);

}  // namespace qknorm
