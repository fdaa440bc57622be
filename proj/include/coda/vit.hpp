// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "coda/autograd.hpp"
#include "coda/random.hpp"
#include "coda/tensor.hpp"

namespace coda {

/// Shape of the toy vision transformer.
struct EncoderConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t embed_dim = 32;
  std::size_t num_layers = 6;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::vector<std::size_t> prompt_layers = {0, 1, 2, 3, 4};

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const {
    return patches_per_side() * patches_per_side();
  }
  std::size_t sequence_length() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t pixels() const { return channels * image_size * image_size; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t hidden_dim() const { return embed_dim * mlp_ratio; }

  bool is_prompt_layer(std::size_t layer) const {
    return std::find(prompt_layers.begin(), prompt_layers.end(), layer) !=
           prompt_layers.end();
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
      out.push_back("encoder.embed_dim must be a positive multiple of "
                    "encoder.num_heads");
    }
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
      out.push_back("encoder.patch_size must divide encoder.image_size");
    }
    if (channels == 0) out.push_back("encoder.channels must be positive");
    if (num_layers == 0) out.push_back("encoder.num_layers must be positive");
    if (mlp_ratio == 0) out.push_back("encoder.mlp_ratio must be positive");
    for (std::size_t l : prompt_layers) {
      if (l >= num_layers) {
        out.push_back("encoder.prompt_layers entry " + std::to_string(l) +
                      " outside [0, num_layers)");
      }
    }
    return out;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid encoder config:";
    for (const auto& s : v) msg += "\n  - " + s;
    throw ConfigError(msg);
  }

  bool operator==(const EncoderConfig&) const = default;
};

/// Parameters of one pre-norm transformer block. Attention projections are
/// bias-free; W_q, W_k, W_v hold all heads side by side (head i owns columns
/// [i*d_h, (i+1)*d_h)).
struct BlockWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

/// Prefix prompts keyed by layer index; each value is [B x L_p x D] with the
/// first L_p/2 rows prepended to the keys and the rest to the values.
using LayerPrompts = std::map<std::size_t, Var>;

class ViTEncoder {
 public:
  ViTEncoder() = default;

  ViTEncoder(EncoderConfig config, std::uint64_t seed)
      : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const std::size_t d = config_.embed_dim;
    const std::size_t h = config_.hidden_dim();
    auto xavier = [&rng](std::size_t fan_in, std::size_t fan_out) {
      const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      return uniform_tensor({fan_in, fan_out}, -a, a, rng);
    };
    patch_w_ = xavier(config_.patch_dim(), d);
    patch_b_ = Tensor({d});
    cls_ = normal_tensor({1, d}, 0.02, rng);
    pos_ = normal_tensor({config_.sequence_length(), d}, 0.02, rng);
    blocks_.resize(config_.num_layers);
    for (auto& b : blocks_) {
      b.ln1_gain = Tensor({d}, 1.0);
      b.ln1_bias = Tensor({d});
      b.wq = xavier(d, d);
      b.wk = xavier(d, d);
      b.wv = xavier(d, d);
      b.wo = xavier(d, d);
      b.ln2_gain = Tensor({d}, 1.0);
      b.ln2_bias = Tensor({d});
      b.w1 = xavier(d, h);
      b.b1 = Tensor({h});
      b.w2 = xavier(h, d);
      b.b2 = Tensor({d});
    }
    norm_gain_ = Tensor({d}, 1.0);
    norm_bias_ = Tensor({d});
    set_trainable(true);
  }

  const EncoderConfig& config() const noexcept { return config_; }
  bool frozen() const noexcept { return frozen_; }

  void freeze() {
    frozen_ = true;
    set_trainable(false);
  }

  void unfreeze() {
    frozen_ = false;
    set_trainable(true);
  }

  BlockWeights& block(std::size_t layer) { return blocks_.at(layer); }
  const BlockWeights& block(std::size_t layer) const {
    return blocks_.at(layer);
  }

  /// Every parameter with a stable name, in a fixed order.
  std::vector<std::pair<std::string, Tensor*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out = {
        {"patch.w", &patch_w_}, {"patch.b", &patch_b_},
        {"cls", &cls_},         {"pos", &pos_}};
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      auto& b = blocks_[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      out.insert(out.end(), {{p + "ln1.g", &b.ln1_gain},
                             {p + "ln1.b", &b.ln1_bias},
                             {p + "attn.wq", &b.wq},
                             {p + "attn.wk", &b.wk},
                             {p + "attn.wv", &b.wv},
                             {p + "attn.wo", &b.wo},
                             {p + "ln2.g", &b.ln2_gain},
                             {p + "ln2.b", &b.ln2_bias},
                             {p + "mlp.w1", &b.w1},
                             {p + "mlp.b1", &b.b1},
                             {p + "mlp.w2", &b.w2},
                             {p + "mlp.b2", &b.b2}});
    }
    out.push_back({"norm.g", &norm_gain_});
    out.push_back({"norm.b", &norm_bias_});
    return out;
  }

  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [name, t] : const_cast<ViTEncoder*>(this)->named_parameters()) {
      out.emplace_back(name, t);
    }
    return out;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t->size();
    return n;
  }

  /// Splits [B x pixels] images (channel-major, then rows) into
  /// [B x num_patches x patch_dim] patch vectors.
  Tensor patchify(const Tensor& images) const {
    const auto& c = config_;
    if (images.rank() != 2 || images.dim(1) != c.pixels()) {
      throw DimensionError("encoder input must be [B x " +
                           std::to_string(c.pixels()) + "], got " +
                           to_string(images.shape()));
    }
    const std::size_t batch = images.dim(0);
    const std::size_t side = c.patches_per_side();
    const std::size_t ps = c.patch_size;
    Tensor out({batch, c.num_patches(), c.patch_dim()});
    std::size_t o = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const auto img = images.row(b);
      for (std::size_t py = 0; py < side; ++py) {
        for (std::size_t px = 0; px < side; ++px) {
          for (std::size_t ch = 0; ch < c.channels; ++ch) {
            for (std::size_t dy = 0; dy < ps; ++dy) {
              for (std::size_t dx = 0; dx < ps; ++dx) {
                const std::size_t y = py * ps + dy;
                const std::size_t x = px * ps + dx;
                out[o++] = img[(ch * c.image_size + y) * c.image_size + x];
              }
            }
          }
        }
      }
    }
    return out;
  }

  /// Parameter leaves for one forward pass.
  struct Bound {
    Var patch_w, patch_b, cls, pos, norm_gain, norm_bias;
    struct Block {
      Var ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, b1, w2,
          b2;
    };
    std::vector<Block> blocks;
  };

  Bound bind(Tape& tape) {
    Bound b;
    b.patch_w = tape.leaf(patch_w_);
    b.patch_b = tape.leaf(patch_b_);
    b.cls = tape.leaf(cls_);
    b.pos = tape.leaf(pos_);
    for (auto& w : blocks_) {
      b.blocks.push_back({tape.leaf(w.ln1_gain), tape.leaf(w.ln1_bias),
                          tape.leaf(w.wq), tape.leaf(w.wk), tape.leaf(w.wv),
                          tape.leaf(w.wo), tape.leaf(w.ln2_gain),
                          tape.leaf(w.ln2_bias), tape.leaf(w.w1),
                          tape.leaf(w.b1), tape.leaf(w.w2), tape.leaf(w.b2)});
    }
    b.norm_gain = tape.leaf(norm_gain_);
    b.norm_bias = tape.leaf(norm_bias_);
    return b;
  }

  /// Multi-head attention of one layer over batched sequences:
  /// hq [B x Lq x D], hk and hv [B x Lk x D] -> [B x Lq x D].
  Var msa(const Bound& w, std::size_t layer, Var hq, Var hk, Var hv) const {
    const auto& bw = w.blocks.at(layer);
    const std::size_t d = config_.embed_dim;
    const std::size_t heads = config_.num_heads;
    const std::size_t dh = config_.head_dim();
    for (Var v : {hq, hk, hv}) {
      if (v.shape().size() != 3 || v.shape()[2] != d) {
        throw DimensionError("msa: expected [B x L x " + std::to_string(d) +
                             "], got " + to_string(v.shape()));
      }
    }
    const std::size_t batch = hq.shape()[0];
    const std::size_t lq = hq.shape()[1];
    const std::size_t lk = hk.shape()[1];
    if (hk.shape() != hv.shape() || hk.shape()[0] != batch) {
      throw DimensionError("msa: key/value shapes " + to_string(hk.shape()) +
                           " and " + to_string(hv.shape()) +
                           " disagree with query " + to_string(hq.shape()));
    }
    auto split_heads = [&](Var x, std::size_t len) {
      return reshape(permute(reshape(x, {batch, len, heads, dh}), {0, 2, 1, 3}),
                     {batch * heads, len, dh});
    };
    Var q = split_heads(matmul(hq, bw.wq), lq);
    Var k = split_heads(matmul(hk, bw.wk), lk);
    Var v = split_heads(matmul(hv, bw.wv), lk);
    Var scores = scale(bmm(q, k, /*transpose_b=*/true),
                       1.0 / std::sqrt(static_cast<double>(dh)));
    Var attended = bmm(softmax(scores, 2), v);
    Var merged = reshape(
        permute(reshape(attended, {batch, heads, lq, dh}), {0, 2, 1, 3}),
        {batch, lq, d});
    return matmul(merged, bw.wo);
  }

  /// Prefix-tuned attention: the first half of each prompt is prepended to
  /// the keys and the second half to the values; queries keep length L.
  Var prefix_msa(const Bound& w, std::size_t layer, Var h,
                 std::optional<Var> prompt) const {
    if (!prompt) return msa(w, layer, h, h, h);
    const Shape& ps = prompt->shape();
    if (ps.size() != 3 || ps[0] != h.shape()[0] ||
        ps[2] != config_.embed_dim) {
      throw DimensionError("prefix prompt must be [B x L_p x D], got " +
                           to_string(ps));
    }
    const std::size_t lp = ps[1];
    if (lp % 2 != 0) {
      throw ConfigError("prompt length must be even, got " +
                        std::to_string(lp));
    }
    Var pk = slice(*prompt, 1, 0, lp / 2);
    Var pv = slice(*prompt, 1, lp / 2, lp);
    return msa(w, layer, h, concat({pk, h}, 1), concat({pv, h}, 1));
  }

  /// Full forward to the class-token embedding [B x D]. Prompts may only be
  /// supplied for configured prompt layers.
  Var encode(Tape& tape, const Bound& w, const Tensor& images,
             const LayerPrompts& prompts = {}) const {
    for (const auto& [layer, p] : prompts) {
      if (!config_.is_prompt_layer(layer)) {
        throw ConfigError("prompt supplied for non-prompt layer " +
                          std::to_string(layer));
      }
    }
    const std::size_t batch = images.dim(0);
    const std::size_t d = config_.embed_dim;
    Var patches = tape.constant(patchify(images));
    Var x = add_broadcast(matmul(patches, w.patch_w), w.patch_b);
    x = concat({tile(w.cls, batch), x}, 1);
    x = add_broadcast(x, w.pos);
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      const auto& bw = w.blocks[l];
      auto it = prompts.find(l);
      std::optional<Var> prompt;
      if (it != prompts.end()) prompt = it->second;
      Var h = add_broadcast(mul_broadcast(layernorm(x), bw.ln1_gain),
                            bw.ln1_bias);
      x = x + prefix_msa(w, l, h, prompt);
      Var h2 = add_broadcast(mul_broadcast(layernorm(x), bw.ln2_gain),
                             bw.ln2_bias);
      Var hidden = gelu(add_broadcast(matmul(h2, bw.w1), bw.b1));
      x = x + add_broadcast(matmul(hidden, bw.w2), bw.b2);
    }
    Var out = add_broadcast(mul_broadcast(layernorm(x), w.norm_gain),
                            w.norm_bias);
    return reshape(slice(out, 1, 0, 1), {batch, d});
  }

  Var encode(Tape& tape, const Tensor& images,
             const LayerPrompts& prompts = {}) {
    return encode(tape, bind(tape), images, prompts);
  }

  /// q(x): the class-token embedding of the unprompted frozen encoder,
  /// [B x pixels] -> [B x D]. Nothing is recorded for differentiation.
  Tensor query(const Tensor& images) const {
    if (!frozen_) throw StateError("query() requires a frozen encoder");
    Tape tape;
    auto& self = const_cast<ViTEncoder&>(*this);
    return encode(tape, self.bind(tape), images).value();
  }

 private:
  void set_trainable(bool on) {
    for (Tensor* t : parameters()) t->set_requires_grad(on);
  }

  EncoderConfig config_;
  Tensor patch_w_, patch_b_, cls_, pos_;
  std::vector<BlockWeights> blocks_;
  Tensor norm_gain_, norm_bias_;
  bool frozen_ = false;
};

// Single-sequence forms of the attention operations. Sequences are [L x D].

inline Tensor msa_forward(ViTEncoder& encoder, std::size_t layer,
                          const Tensor& hq, const Tensor& hk,
                          const Tensor& hv) {
  for (const Tensor* t : {&hq, &hk, &hv}) {
    if (t->rank() != 2) {
      throw DimensionError("msa_forward expects [L x D] sequences, got " +
                           to_string(t->shape()));
    }
  }
  Tape tape;
  auto w = encoder.bind(tape);
  auto lift = [&tape](const Tensor& t) {
    return tape.constant(t.reshaped({1, t.dim(0), t.dim(1)}));
  };
  Var out = encoder.msa(w, layer, lift(hq), lift(hk), lift(hv));
  return out.value().reshaped({hq.dim(0), hq.dim(1)});
}

/// Prefix-tuned attention with prompt p [L_p x D] over h [L x D].
inline Tensor prefix_tuned_msa(ViTEncoder& encoder, std::size_t layer,
                               const Tensor& prompt, const Tensor& h) {
  if (prompt.rank() != 2 || h.rank() != 2) {
    throw DimensionError("prefix_tuned_msa expects matrices");
  }
  if (prompt.dim(0) % 2 != 0) {
    throw ConfigError("prompt length must be even, got " +
                      std::to_string(prompt.dim(0)));
  }
  Tape tape;
  auto w = encoder.bind(tape);
  Var hv = tape.constant(h.reshaped({1, h.dim(0), h.dim(1)}));
  Var pv = tape.constant(prompt.reshaped({1, prompt.dim(0), prompt.dim(1)}));
  Var out = encoder.prefix_msa(w, layer, hv, pv);
  return out.value().reshaped({h.dim(0), h.dim(1)});
}

}  // namespace coda
