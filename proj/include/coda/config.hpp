// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "coda/data.hpp"
#include "coda/pretrain.hpp"
#include "coda/prompt.hpp"
#include "coda/serialize.hpp"
#include "coda/vit.hpp"
#include "json.hpp"

namespace coda {

/// Continual-training settings shared by all strategies.
struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  /// Learning rate of prompting strategies.
  double lr = 1e-3;
  /// Learning rate of the fine-tuning baseline.
  double ft_lr = 1e-4;
  bool cosine = true;

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (batch_size == 0) out.push_back("optim.batch_size must be positive");
    if (!(lr >= 0.0)) out.push_back("optim.lr must be >= 0");
    if (!(ft_lr >= 0.0)) out.push_back("optim.ft_lr must be >= 0");
    return out;
  }
  bool operator==(const TrainConfig&) const = default;
};

/// Everything that defines an experiment.
struct RunConfig {
  std::vector<StrategyKind> strategies = {StrategyKind::kCoda};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  EncoderConfig encoder;
  PretrainConfig pretrain;
  BenchmarkSpec benchmark;
  BankConfig coda;
  PoolConfig l2p;
  PerTaskConfig dualprompt;
  TrainConfig optim;
  std::string output_dir = "runs/default";
  /// Pretrained-encoder cache; empty means <output_dir>/cache.
  std::string cache_dir;
  bool checkpoints = true;
  /// Upper bound on concurrently running trials (seeds).
  std::size_t jobs = 1;

  std::filesystem::path cache_path() const {
    return cache_dir.empty() ? std::filesystem::path(output_dir) / "cache"
                             : std::filesystem::path(cache_dir);
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    auto append = [&out](const std::vector<std::string>& v) {
      out.insert(out.end(), v.begin(), v.end());
    };
    if (strategies.empty()) out.push_back("strategies must not be empty");
    for (std::size_t i = 0; i < strategies.size(); ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        if (strategies[i] == strategies[j]) {
          out.push_back("strategy '" + std::string(strategy_name(strategies[i])) +
                        "' listed twice");
        }
      }
    }
    if (seeds.empty()) out.push_back("seeds must not be empty");
    append(encoder.violations());
    append(pretrain.violations());
    append(benchmark.violations());
    append(optim.violations());
    if (encoder.channels != 1) out.push_back("encoder.channels must be 1");
    if (encoder.image_size != benchmark.image_size) {
      out.push_back("encoder.image_size (" + std::to_string(encoder.image_size) +
                    ") must equal benchmark.image_size (" +
                    std::to_string(benchmark.image_size) + ")");
    }
    for (StrategyKind k : strategies) {
      if (k == StrategyKind::kCoda) append(coda.violations(benchmark.num_tasks));
      if (k == StrategyKind::kPoolTopK) append(l2p.violations());
      if (k == StrategyKind::kPerTask) append(dualprompt.violations());
    }
    if (output_dir.empty()) out.push_back("output_dir must not be empty");
    if (jobs == 0) out.push_back("jobs must be positive");
    return out;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid configuration (" + std::to_string(v.size()) +
                      (v.size() == 1 ? " problem):" : " problems):");
    for (const auto& s : v) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
};

/// Report name of a strategy, with ablation suffixes for CODA.
inline std::string strategy_label(StrategyKind kind, const RunConfig& c) {
  std::string s(strategy_name(kind));
  if (kind == StrategyKind::kCoda) {
    if (!c.coda.attention) s += "-noattn";
    if (!c.coda.freezing) s += "-nofreeze";
    if (c.coda.ortho_weight == 0.0) s += "-noortho";
    if (c.coda.mask_future) s += "-maskfuture";
  }
  return s;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json strategies = nlohmann::json::array();
  for (auto k : c.strategies) strategies.push_back(std::string(strategy_name(k)));
  return {
      {"strategies", strategies},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir},
      {"cache_dir", c.cache_dir},
      {"checkpoints", c.checkpoints},
      {"jobs", c.jobs},
      {"encoder", to_json(c.encoder)},
      {"pretrain",
       {{"num_classes", c.pretrain.pretext.num_classes},
        {"train_per_class", c.pretrain.pretext.train_per_class},
        {"test_per_class", c.pretrain.pretext.test_per_class},
        {"epochs", c.pretrain.epochs},
        {"batch_size", c.pretrain.batch_size},
        {"lr", c.pretrain.lr}}},
      {"benchmark", to_json(c.benchmark)},
      {"coda",
       {{"components", c.coda.components},
        {"prompt_length", c.coda.prompt_length},
        {"lambda", c.coda.ortho_weight},
        {"attention", c.coda.attention},
        {"freezing", c.coda.freezing},
        {"mask_future", c.coda.mask_future}}},
      {"l2p",
       {{"pool_size", c.l2p.pool_size},
        {"top_k", c.l2p.top_k},
        {"prompt_length", c.l2p.prompt_length},
        {"pull_weight", c.l2p.pull_weight}}},
      {"dualprompt",
       {{"prompt_length", c.dualprompt.prompt_length},
        {"pull_weight", c.dualprompt.pull_weight}}},
      {"optim",
       {{"epochs", c.optim.epochs},
        {"batch_size", c.optim.batch_size},
        {"lr", c.optim.lr},
        {"ft_lr", c.optim.ft_lr},
        {"cosine", c.optim.cosine}}},
  };
}

namespace detail {

// Reads typed keys of one JSON object, collecting every problem instead of
// stopping at the first.
class KeyReader {
 public:
  KeyReader(const nlohmann::json& obj, std::string prefix,
            std::vector<std::string>& errors)
      : obj_(obj), prefix_(std::move(prefix)), errors_(errors) {
    if (!obj_.is_object()) {
      errors_.push_back(name("") + " must be an object");
      return;
    }
  }

  ~KeyReader() {
    if (!obj_.is_object()) return;
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
        errors_.push_back("unknown key '" + name(it.key()) + "'");
      }
    }
  }

  KeyReader(const KeyReader&) = delete;
  KeyReader& operator=(const KeyReader&) = delete;

  const nlohmann::json* find(const std::string& key) {
    seen_.push_back(key);
    if (!obj_.is_object()) return nullptr;
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, std::size_t& dst) {
    if (const auto* v = find(key)) {
      if (v->is_number_unsigned()) {
        dst = v->get<std::size_t>();
      } else {
        errors_.push_back(name(key) + " must be a non-negative integer");
      }
    }
  }
  void get(const std::string& key, std::uint32_t& dst) {
    std::size_t v = dst;
    get(key, v);
    dst = static_cast<std::uint32_t>(v);
  }
  void get(const std::string& key, double& dst) {
    if (const auto* v = find(key)) {
      if (v->is_number()) {
        dst = v->get<double>();
      } else {
        errors_.push_back(name(key) + " must be a number");
      }
    }
  }
  void get(const std::string& key, bool& dst) {
    if (const auto* v = find(key)) {
      if (v->is_boolean()) {
        dst = v->get<bool>();
      } else {
        errors_.push_back(name(key) + " must be true or false");
      }
    }
  }
  void get(const std::string& key, std::string& dst) {
    if (const auto* v = find(key)) {
      if (v->is_string()) {
        dst = v->get<std::string>();
      } else {
        errors_.push_back(name(key) + " must be a string");
      }
    }
  }
  void get(const std::string& key, std::vector<std::size_t>& dst) {
    if (const auto* v = find(key)) {
      bool ok = v->is_array();
      if (ok) {
        for (const auto& e : *v) ok = ok && e.is_number_unsigned();
      }
      if (ok) {
        dst = v->get<std::vector<std::size_t>>();
      } else {
        errors_.push_back(name(key) + " must be a list of non-negative integers");
      }
    }
  }

  std::string name(const std::string& key) const {
    if (prefix_.empty()) return key;
    return key.empty() ? prefix_ : prefix_ + "." + key;
  }

 private:
  const nlohmann::json& obj_;
  std::string prefix_;
  std::vector<std::string>& errors_;
  std::vector<std::string> seen_;
};

}  // namespace detail

/// Builds a config from defaults overlaid with `doc`. Every problem (unknown
/// key, wrong type, failed validation) is listed in a single ConfigError.
inline RunConfig config_from_json(const nlohmann::json& doc) {
  RunConfig c;
  std::vector<std::string> errors;
  {
    detail::KeyReader top(doc, "", errors);
    if (const auto* v = top.find("strategies")) {
      if (!v->is_array()) {
        errors.push_back("strategies must be a list of names");
      } else {
        c.strategies.clear();
        for (const auto& e : *v) {
          auto kind = e.is_string() ? parse_strategy(e.get<std::string>())
                                    : std::nullopt;
          if (kind) {
            c.strategies.push_back(*kind);
          } else {
            errors.push_back("unknown strategy " + e.dump() +
                             " (expected coda, l2p, dualprompt or ft)");
          }
        }
      }
    }
    if (const auto* v = top.find("seeds")) {
      bool ok = v->is_array();
      if (ok) {
        for (const auto& e : *v) ok = ok && e.is_number_unsigned();
      }
      if (ok) {
        c.seeds = v->get<std::vector<std::uint64_t>>();
      } else {
        errors.push_back("seeds must be a list of non-negative integers");
      }
    }
    top.get("output_dir", c.output_dir);
    top.get("cache_dir", c.cache_dir);
    top.get("checkpoints", c.checkpoints);
    top.get("jobs", c.jobs);
    if (const auto* v = top.find("encoder")) {
      detail::KeyReader r(*v, "encoder", errors);
      r.get("image_size", c.encoder.image_size);
      r.get("patch_size", c.encoder.patch_size);
      r.get("channels", c.encoder.channels);
      r.get("embed_dim", c.encoder.embed_dim);
      r.get("num_layers", c.encoder.num_layers);
      r.get("num_heads", c.encoder.num_heads);
      r.get("mlp_ratio", c.encoder.mlp_ratio);
      r.get("prompt_layers", c.encoder.prompt_layers);
    }
    if (const auto* v = top.find("pretrain")) {
      detail::KeyReader r(*v, "pretrain", errors);
      r.get("num_classes", c.pretrain.pretext.num_classes);
      r.get("train_per_class", c.pretrain.pretext.train_per_class);
      r.get("test_per_class", c.pretrain.pretext.test_per_class);
      r.get("epochs", c.pretrain.epochs);
      r.get("batch_size", c.pretrain.batch_size);
      r.get("lr", c.pretrain.lr);
    }
    if (const auto* v = top.find("benchmark")) {
      detail::KeyReader r(*v, "benchmark", errors);
      r.get("num_classes", c.benchmark.num_classes);
      r.get("num_tasks", c.benchmark.num_tasks);
      r.get("train_per_class", c.benchmark.train_per_class);
      r.get("test_per_class", c.benchmark.test_per_class);
      r.get("num_domains", c.benchmark.num_domains);
      r.get("image_size", c.benchmark.image_size);
      r.get("val_fraction", c.benchmark.val_fraction);
      r.get("noise", c.benchmark.noise);
      r.get("jitter", c.benchmark.jitter);
      r.get("dual_shift", c.benchmark.dual_shift);
      r.get("class_offset", c.benchmark.class_offset);
    }
    if (const auto* v = top.find("coda")) {
      detail::KeyReader r(*v, "coda", errors);
      r.get("components", c.coda.components);
      r.get("prompt_length", c.coda.prompt_length);
      r.get("lambda", c.coda.ortho_weight);
      r.get("attention", c.coda.attention);
      r.get("freezing", c.coda.freezing);
      r.get("mask_future", c.coda.mask_future);
    }
    if (const auto* v = top.find("l2p")) {
      detail::KeyReader r(*v, "l2p", errors);
      r.get("pool_size", c.l2p.pool_size);
      r.get("top_k", c.l2p.top_k);
      r.get("prompt_length", c.l2p.prompt_length);
      r.get("pull_weight", c.l2p.pull_weight);
    }
    if (const auto* v = top.find("dualprompt")) {
      detail::KeyReader r(*v, "dualprompt", errors);
      r.get("prompt_length", c.dualprompt.prompt_length);
      r.get("pull_weight", c.dualprompt.pull_weight);
    }
    if (const auto* v = top.find("optim")) {
      detail::KeyReader r(*v, "optim", errors);
      r.get("epochs", c.optim.epochs);
      r.get("batch_size", c.optim.batch_size);
      r.get("lr", c.optim.lr);
      r.get("ft_lr", c.optim.ft_lr);
      r.get("cosine", c.optim.cosine);
    }
  }
  if (errors.empty()) {
    const auto v = c.violations();
    errors.insert(errors.end(), v.begin(), v.end());
  }
  if (!errors.empty()) {
    std::string msg = "invalid configuration (" + std::to_string(errors.size()) +
                      (errors.size() == 1 ? " problem):" : " problems):");
    for (const auto& s : errors) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
  return c;
}

/// Sets a dotted key ("coda.components") in a config document. The value is
/// parsed as JSON when possible and taken as a string otherwise.
inline void set_override(nlohmann::json& doc, const std::string& dotted,
                         const std::string& value) {
  if (dotted.empty()) throw ConfigError("empty override key");
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot - start);
    if (key.empty()) throw ConfigError("malformed override key '" + dotted + "'");
    if (!node->is_object()) *node = nlohmann::json::object();
    if (dot == std::string::npos) {
      auto parsed = nlohmann::json::parse(value, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("file not found: " + path.string());
  auto doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded()) {
    throw ConfigError("malformed JSON in " + path.string());
  }
  return doc;
}

/// Name of the environment variable that roots relative output directories.
inline constexpr const char* kOutputRootEnv = "CODA_OUTPUT_ROOT";

/// Resolves a relative output_dir (and cache_dir) against `root`.
inline void apply_output_root(RunConfig& c, const std::string& root) {
  if (root.empty()) return;
  auto rebase = [&root](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) {
      p = (std::filesystem::path(root) / p).string();
    }
  };
  rebase(c.output_dir);
  rebase(c.cache_dir);
}

/// Stable 64-bit digest of a JSON document.
inline std::uint64_t fingerprint(const nlohmann::json& j) {
  return io::fnv1a(j.dump());
}

}  // namespace coda
