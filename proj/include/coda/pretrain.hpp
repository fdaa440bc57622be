// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "coda/autograd.hpp"
#include "coda/data.hpp"
#include "coda/head.hpp"
#include "coda/optim.hpp"
#include "coda/random.hpp"
#include "coda/serialize.hpp"
#include "coda/vit.hpp"
#include "json.hpp"

namespace coda {

struct PretrainConfig {
  PretextSpec pretext;
  std::size_t epochs = 15;
  std::size_t batch_size = 32;
  double lr = 1e-3;

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (pretext.num_classes < 2) {
      out.push_back("pretrain.num_classes must be >= 2");
    }
    if (pretext.train_per_class == 0) {
      out.push_back("pretrain.train_per_class must be positive");
    }
    if (batch_size == 0) out.push_back("pretrain.batch_size must be positive");
    if (!(lr > 0.0)) out.push_back("pretrain.lr must be positive");
    return out;
  }
  bool operator==(const PretrainConfig&) const = default;
};

struct PretrainResult {
  std::vector<double> epoch_loss;
  /// Accuracy on the pretext validation split after training.
  double val_accuracy = 0.0;
};

/// Accuracy of a fixed head on the unprompted encoder, batched.
inline double pretext_accuracy(ViTEncoder& encoder, ClassifierHead& head,
                               const Split& split, std::size_t batch_size) {
  if (split.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t end = std::min(split.size(), start + batch_size);
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    Tape tape;
    Var logits = head.forward(tape, encoder.encode(tape, gather_rows(split.images, idx)));
    const auto pred = argmax_rows(logits.value());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (pred[i] == split.labels[idx[i]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

/// Trains encoder and a throwaway linear head with cross-entropy on the
/// pretext stream, then freezes the encoder. With zero epochs the encoder is
/// only frozen. `benchmark`, when given, must not share class ids.
inline PretrainResult pretrain(ViTEncoder& encoder, const TaskStream& pretext,
                               const PretrainConfig& config, std::uint64_t seed,
                               const TaskStream* benchmark = nullptr) {
  if (benchmark != nullptr) check_disjoint(pretext, *benchmark);
  if (pretext.tasks.size() != 1) {
    throw ConfigError("pretraining expects a single-task stream");
  }
  const Split& train = pretext.tasks[0].train;
  PretrainResult result;
  encoder.unfreeze();
  ClassifierHead head(encoder.config().embed_dim);
  head.add_task(pretext.num_classes(), derive_seed(seed, Stream::kPretrainHead));
  if (config.epochs > 0 && train.size() > 0) {
    const std::size_t per_epoch =
        (train.size() + config.batch_size - 1) / config.batch_size;
    std::vector<ParamSlot> slots;
    for (Tensor* t : encoder.parameters()) slots.push_back(whole(*t));
    slots.push_back(whole(head.weight()));
    slots.push_back(whole(head.bias()));
    Adam opt(slots, AdamConfig{config.lr, 0.9, 0.999, 1e-8, true},
             per_epoch * config.epochs);
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      Rng rng(derive_seed(seed, Stream::kPretrainOrder, {epoch}));
      const auto order = rng.permutation(train.size());
      double total = 0.0;
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        std::span<const std::size_t> idx(order.data() + start, end - start);
        std::vector<std::size_t> labels;
        for (std::size_t i : idx) labels.push_back(train.labels[i]);
        opt.zero_grad();
        Tape tape;
        Var logits = head.forward(tape, encoder.encode(tape, gather_rows(train.images, idx)));
        Var loss = cross_entropy(logits, labels);
        const double value = loss.value().item();
        if (!std::isfinite(value)) {
          throw NumericError("pretraining loss is not finite at epoch " +
                             std::to_string(epoch));
        }
        tape.backward(loss);
        opt.step();
        total += value * static_cast<double>(idx.size());
      }
      result.epoch_loss.push_back(total / static_cast<double>(train.size()));
    }
  }
  encoder.freeze();
  result.val_accuracy =
      pretext_accuracy(encoder, head, pretext.tasks[0].val, config.batch_size);
  return result;
}

// ---------------------------------------------------------------------------
// Encoder persistence

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size},
          {"channels", c.channels},     {"embed_dim", c.embed_dim},
          {"num_layers", c.num_layers}, {"num_heads", c.num_heads},
          {"mlp_ratio", c.mlp_ratio},   {"prompt_layers", c.prompt_layers}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.image_size = j.at("image_size");
  c.patch_size = j.at("patch_size");
  c.channels = j.at("channels");
  c.embed_dim = j.at("embed_dim");
  c.num_layers = j.at("num_layers");
  c.num_heads = j.at("num_heads");
  c.mlp_ratio = j.at("mlp_ratio");
  c.prompt_layers = j.at("prompt_layers").get<std::vector<std::size_t>>();
  return c;
}

inline constexpr std::string_view kCheckpointMagic = "CODACKPT";

/// Adds encoder config, frozen flag and parameters under "encoder.".
inline void save_encoder(io::Container& c, ViTEncoder& encoder) {
  c.add_text("encoder.config", to_json(encoder.config()).dump());
  c.add_u32("encoder.frozen", {encoder.frozen() ? 1u : 0u});
  for (auto& [name, t] : encoder.named_parameters()) {
    c.add_tensor("encoder." + name, *t);
  }
}

inline ViTEncoder load_encoder(const io::Container& c) {
  ViTEncoder encoder(
      encoder_config_from_json(nlohmann::json::parse(c.text("encoder.config"))),
      0);
  for (auto& [name, t] : encoder.named_parameters()) {
    c.load_into("encoder." + name, *t);
  }
  if (c.u32("encoder.frozen").at(0) != 0) encoder.freeze();
  return encoder;
}

}  // namespace coda
