// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "coda/autograd.hpp"
#include "coda/grad_check.hpp"
#include "coda/head.hpp"
#include "coda/prompt.hpp"
#include "coda/random.hpp"
#include "coda/vit.hpp"

namespace coda {

struct GradSuiteEntry {
  std::string name;
  GradCheckResult result;
};

namespace detail {

// Scalar readout sum(x * w) with fixed random w, so every output entry gets a
// distinct upstream gradient.
inline Var readout(Tape& tape, Var x, std::uint64_t seed) {
  Rng rng(seed);
  return sum(x * tape.constant(uniform_tensor(x.shape(), -1.0, 1.0, rng)));
}

inline Tensor param(Shape shape, std::uint64_t seed, double lo = -1.0,
                    double hi = 1.0) {
  Rng rng(seed);
  return uniform_tensor(std::move(shape), lo, hi, rng);
}

inline EncoderConfig micro_encoder_config() {
  EncoderConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.prompt_layers = {0, 1};
  return c;
}

}  // namespace detail

/// Finite-difference checks of every differentiable primitive and of the
/// composite losses, all on micro shapes (D <= 8, M <= 6, L_p <= 4).
inline std::vector<GradSuiteEntry> run_gradient_suite(
    const GradCheckOptions& options = {}) {
  using detail::param;
  using detail::readout;
  std::vector<GradSuiteEntry> out;
  auto check = [&](std::string name, const ScalarFunction& f,
                   std::vector<Tensor*> params) {
    out.push_back({std::move(name), grad_check(f, params, options)});
  };

  {
    Tensor a = param({2, 3, 4}, 1), b = param({4, 5}, 2);
    check("matmul", [&](Tape& t) { return readout(t, matmul(t.leaf(a), t.leaf(b)), 3); }, {&a, &b});
  }
  {
    Tensor a = param({2, 3, 4}, 4), b = param({2, 4, 5}, 5), c = param({2, 5, 4}, 6);
    check("bmm", [&](Tape& t) { return readout(t, bmm(t.leaf(a), t.leaf(b)), 7); }, {&a, &b});
    check("bmm_transposed", [&](Tape& t) { return readout(t, bmm(t.leaf(a), t.leaf(c), true), 8); }, {&a, &c});
  }
  {
    Tensor a = param({3, 4}, 9);
    check("transpose", [&](Tape& t) { return readout(t, transpose(t.leaf(a)), 10); }, {&a});
  }
  {
    Tensor a = param({3, 4}, 11), b = param({3, 4}, 12);
    check("add", [&](Tape& t) { return readout(t, t.leaf(a) + t.leaf(b), 13); }, {&a, &b});
    check("sub", [&](Tape& t) { return readout(t, t.leaf(a) - t.leaf(b), 14); }, {&a, &b});
    check("mul", [&](Tape& t) { return readout(t, t.leaf(a) * t.leaf(b), 15); }, {&a, &b});
    check("scale", [&](Tape& t) { return readout(t, scale(t.leaf(a), -1.7), 16); }, {&a});
  }
  {
    Tensor x = param({2, 3, 4}, 17), b = param({3, 4}, 18);
    check("add_broadcast", [&](Tape& t) { return readout(t, add_broadcast(t.leaf(x), t.leaf(b)), 19); }, {&x, &b});
    check("mul_broadcast", [&](Tape& t) { return readout(t, mul_broadcast(t.leaf(x), t.leaf(b)), 20); }, {&x, &b});
  }
  {
    Tensor x = param({2, 3, 4}, 21);
    check("reshape", [&](Tape& t) { return readout(t, reshape(t.leaf(x), {6, 4}), 22); }, {&x});
    check("tile", [&](Tape& t) { return readout(t, tile(t.leaf(x), 3), 23); }, {&x});
    check("permute", [&](Tape& t) { return readout(t, permute(t.leaf(x), {2, 0, 1}), 24); }, {&x});
    check("slice", [&](Tape& t) { return readout(t, slice(t.leaf(x), 1, 1, 3), 25); }, {&x});
    check("index_select", [&](Tape& t) { return readout(t, index_select(t.leaf(x), {1, 0, 1}), 26); }, {&x});
    check("softmax", [&](Tape& t) { return readout(t, softmax(t.leaf(x), 2), 27); }, {&x});
    check("softmax_inner_axis", [&](Tape& t) { return readout(t, softmax(t.leaf(x), 1), 28); }, {&x});
    check("layernorm", [&](Tape& t) { return readout(t, layernorm(t.leaf(x)), 29); }, {&x});
    check("gelu", [&](Tape& t) { return readout(t, gelu(t.leaf(x)), 30); }, {&x});
    check("sum", [&](Tape& t) { return sum(t.leaf(x)); }, {&x});
    check("mean", [&](Tape& t) { return mean(t.leaf(x) * t.leaf(x)); }, {&x});
    check("frobenius_norm", [&](Tape& t) { return frobenius_norm(t.leaf(x)); }, {&x});
  }
  {
    Tensor a = param({2, 3}, 31), b = param({2, 2}, 32);
    check("concat", [&](Tape& t) { return readout(t, concat({t.leaf(a), t.leaf(b)}, 1), 33); }, {&a, &b});
  }
  {
    Tensor u = param({3, 5}, 34), v = param({3, 5}, 35);
    check("cosine_rows", [&](Tape& t) { return readout(t, cosine_rows(t.leaf(u), t.leaf(v)), 36); }, {&u, &v});
    Tensor p = param({5}, 37), q = param({5}, 38);
    check("cosine_sim", [&](Tape& t) { return cosine_sim(t.leaf(p), t.leaf(q)); }, {&p, &q});
  }
  {
    Tensor q = param({3, 6}, 39), a = param({5, 6}, 40), k = param({5, 6}, 41);
    check("attended_cosine", [&](Tape& t) {
      return readout(t, attended_cosine(t.leaf(q), t.leaf(a), t.leaf(k)), 42);
    }, {&q, &a, &k});
  }
  {
    Tensor logits = param({4, 5}, 43, -2.0, 2.0);
    const std::vector<std::size_t> labels = {2, 3, 4, 2};
    check("masked_cross_entropy", [&](Tape& t) {
      return cross_entropy(mask_columns(t.leaf(logits), 2, 5), labels);
    }, {&logits});
  }

  // Attention and the encoder.
  {
    ViTEncoder enc(detail::micro_encoder_config(), 44);
    Tensor h = param({2, 3, 8}, 45), p = param({2, 4, 8}, 46, -0.5, 0.5);
    auto& blk = const_cast<BlockWeights&>(enc.block(0));
    check("msa", [&](Tape& t) {
      auto w = enc.bind(t);
      Var hv = t.leaf(h);
      return readout(t, enc.msa(w, 0, hv, hv, hv), 47);
    }, {&h, &blk.wq, &blk.wk, &blk.wv, &blk.wo});
    check("prefix_msa", [&](Tape& t) {
      auto w = enc.bind(t);
      return readout(t, enc.prefix_msa(w, 0, t.leaf(h), t.leaf(p)), 48);
    }, {&h, &p, &blk.wk, &blk.wv});
    Tensor images = param({2, 64}, 49);
    Tensor p1 = param({2, 2, 8}, 50, -0.5, 0.5);
    enc.freeze();
    check("encode_prompts", [&](Tape& t) {
      return readout(t, enc.encode(t, images, {{0, t.leaf(p)}, {1, t.leaf(p1)}}), 51);
    }, {&p, &p1});
    enc.unfreeze();
    GradCheckOptions sampled = options;
    sampled.max_entries_per_param = 24;
    std::vector<Tensor*> weights;
    for (Tensor* w : enc.parameters()) weights.push_back(w);
    out.push_back({"encode_weights", grad_check([&](Tape& t) {
                     return readout(t, enc.encode(t, images), 52);
                   }, weights, sampled)});
  }

  // Prompt formation and the full objective.
  {
    Tensor b = param({4, 6}, 53);
    check("ortho_loss", [&](Tape& t) { return ortho_loss(t.leaf(b)); }, {&b});
  }
  {
    Tensor q = param({3, 6}, 54), keys = param({4, 6}, 55);
    check("key_pull_loss", [&](Tape& t) {
      return key_pull_loss(t.constant(q), index_select(t.leaf(keys), {0, 2, 0}));
    }, {&keys});
  }
  {
    const auto ecfg = detail::micro_encoder_config();
    ViTEncoder enc(ecfg, 56);
    enc.freeze();
    BankConfig bc;
    bc.components = 6;
    bc.prompt_length = 4;
    bc.ortho_weight = 0.1;
    CodaStrategy coda(bc, ecfg.prompt_layers, ecfg.embed_dim, 57);
    coda.begin_task(1, 3);
    ClassifierHead head(ecfg.embed_dim);
    head.add_task(2, 58);
    head.add_task(2, 59);
    Tensor images = param({3, 64}, 60);
    const Tensor queries = enc.query(images);
    const std::vector<std::size_t> labels = {2, 3, 2};
    std::vector<Tensor*> params;
    for (auto& [name, t] : coda.named_parameters()) params.push_back(t);
    params.push_back(&head.weight());
    params.push_back(&head.bias());
    check("full_objective", [&](Tape& t) {
      Prompting pr = coda.prompt(t, queries, 1);
      Var logits = head.forward(t, enc.encode(t, images, pr.prompts));
      return cross_entropy(mask_columns(logits, 2, 4), labels) + *pr.aux_loss;
    }, params);
  }
  return out;
}

}  // namespace coda
