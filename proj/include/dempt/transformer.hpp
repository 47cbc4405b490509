#pragma once

// Decoder blocks whose attention takes (a) a per-phase prompt key/value
// prefix and (b) projected key/value caches carried over from earlier
// phases. Pre-norm residual blocks; rotary positions on real tokens only,
// with absolute positions continuing across phases.

#include <optional>
#include <type_traits>
#include <vector>

#include "dempt/tensor.hpp"

namespace dempt {

struct ModelConfig {
  int layers = 4;
  int hidden = 128;
  int heads = 4;
  int vocab = 0;
  int prompt_len = 64;  // q
  int ffn_mult = 4;
  double init_std = 0.02;

  int head_dim() const { return hidden / heads; }
  void validate() const {
    DEMPT_CHECK(layers >= 1 && hidden >= 2 && heads >= 1, "model config: layers/hidden/heads out of range");
    DEMPT_CHECK(hidden % heads == 0, "model config: head count must divide hidden size");
    DEMPT_CHECK(head_dim() % 2 == 0, "model config: head width must be even for rotary positions");
    DEMPT_CHECK(vocab >= 6, "model config: vocabulary too small (reserved ids alone need 5)");
    DEMPT_CHECK(prompt_len >= 0, "model config: prompt length must be >= 0");
  }
};

template <class T>
struct BlockWeights {
  Tensor<T> attn_norm_gain;  // 1 x d
  Tensor<T> wq, wk, wv, wo;  // d x d
  Tensor<T> ffn_norm_gain;   // 1 x d
  Tensor<T> ffn_in;          // d x 4d
  Tensor<T> ffn_out;         // 4d x d
};

template <class T>
struct Backbone {
  ModelConfig cfg;
  Tensor<T> embedding;        // vocab x d
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> final_norm_gain;  // 1 x d
  Tensor<T> lm_head;          // d x vocab

  static Backbone random(const ModelConfig& cfg, uint64_t seed, bool trainable = false) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0xbacb01e));
    auto init = [&](Shape shape, double std_dev) {
      std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
      for (auto& x : v) x = static_cast<T>(rng.normal() * std_dev);
      return trainable ? Tensor<T>::param(shape, std::move(v)) : Tensor<T>::from(shape, std::move(v));
    };
    auto ones = [&](Shape shape) {
      std::vector<T> v(static_cast<size_t>(shape_numel(shape)), T(1));
      return trainable ? Tensor<T>::param(shape, std::move(v)) : Tensor<T>::from(shape, std::move(v));
    };
    Backbone b;
    b.cfg = cfg;
    int d = cfg.hidden, f = cfg.ffn_mult * cfg.hidden;
    b.embedding = init({cfg.vocab, d}, cfg.init_std);
    for (int l = 0; l < cfg.layers; ++l) {
      BlockWeights<T> w;
      w.attn_norm_gain = ones({1, d});
      w.wq = init({d, d}, cfg.init_std);
      w.wk = init({d, d}, cfg.init_std);
      w.wv = init({d, d}, cfg.init_std);
      w.wo = init({d, d}, cfg.init_std);
      w.ffn_norm_gain = ones({1, d});
      w.ffn_in = init({d, f}, cfg.init_std);
      w.ffn_out = init({f, d}, cfg.init_std);
      b.blocks.push_back(std::move(w));
    }
    b.final_norm_gain = ones({1, d});
    b.lm_head = init({d, cfg.vocab}, cfg.init_std);
    return b;
  }
};

// Projected per-layer key/value sequences of a finished phase, plus the
// final-layer (normalized) hidden states kept for pooling. Written once by
// the phase that produced it, read-only afterwards.
template <class T>
struct PhaseCache {
  std::vector<Tensor<T>> keys;    // per layer, (len x d), rotary applied
  std::vector<Tensor<T>> values;  // per layer, (len x d)
  Tensor<T> final_hidden;         // len x d
  int first_position = 0;
  int len = 0;

  int next_position() const { return first_position + len; }
};

// Every current-phase query sees all prompt columns and all cached columns;
// within the current phase, query t sees positions <= t when causal.
inline Mask build_visibility_mask(int prompt_len, int cached_len, int current_len, bool causal_within_current) {
  DEMPT_CHECK(prompt_len >= 0 && cached_len >= 0 && current_len >= 0, "mask: negative segment length");
  int cols = prompt_len + cached_len + current_len;
  Mask m;
  m.rows = current_len;
  m.cols = cols;
  m.visible.assign(static_cast<size_t>(current_len) * cols, 0);
  for (int r = 0; r < current_len; ++r) {
    for (int c = 0; c < prompt_len + cached_len; ++c) m.set(r, c, true);
    int limit = causal_within_current ? r : current_len - 1;
    for (int c = 0; c <= limit; ++c) m.set(r, prompt_len + cached_len + c, true);
  }
  return m;
}

// Key/value prefix for one layer: rows [0, q) of the layer slice are the key
// prefix, rows [q, 2q) the value prefix. Empty when q == 0.
template <class T>
struct LayerPrefix {
  std::optional<Tensor<T>> key;    // q x d
  std::optional<Tensor<T>> value;  // q x d
  int len = 0;
};

// One decoder block. hidden: (tokens x d). Returns the block output plus this
// phase's projected K/V at this layer for caching. past may be null.
template <class T>
struct BlockResult {
  Tensor<T> hidden;
  Tensor<T> key;    // tokens x d, rotary applied
  Tensor<T> value;  // tokens x d
};

template <class T>
BlockResult<T> block_forward(const Tensor<T>& hidden, const BlockWeights<T>& w, const LayerPrefix<T>& prefix,
                             std::type_identity_t<const Tensor<T>*> past_key,
                             std::type_identity_t<const Tensor<T>*> past_value, const Mask& mask,
                             int first_position, int heads) {
  int tokens = hidden.rows();
  Tensor<T> normed = rmsnorm_rows(hidden, w.attn_norm_gain);
  Tensor<T> q = rope_rows(matmul(normed, w.wq), first_position, heads);
  Tensor<T> k_cur = rope_rows(matmul(normed, w.wk), first_position, heads);
  Tensor<T> v_cur = matmul(normed, w.wv);

  std::vector<Tensor<T>> key_parts, value_parts;
  if (prefix.key) {
    key_parts.push_back(*prefix.key);
    value_parts.push_back(*prefix.value);
  }
  if (past_key) {
    key_parts.push_back(*past_key);
    value_parts.push_back(*past_value);
  }
  key_parts.push_back(k_cur);
  value_parts.push_back(v_cur);
  Tensor<T> k_all = key_parts.size() == 1 ? key_parts[0] : concat_rows(key_parts);
  Tensor<T> v_all = value_parts.size() == 1 ? value_parts[0] : concat_rows(value_parts);

  Tensor<T> ctx = multihead_attention(q, k_all, v_all, mask, heads);
  Tensor<T> attn_out = matmul(ctx, w.wo);
  Tensor<T> h2 = add(hidden, attn_out);

  Tensor<T> f_in = rmsnorm_rows(h2, w.ffn_norm_gain);
  Tensor<T> f = matmul(tanh_op(matmul(f_in, w.ffn_in)), w.ffn_out);
  BlockResult<T> out;
  out.hidden = add(h2, f);
  out.key = k_cur;
  out.value = v_cur;
  (void)tokens;
  return out;
}

// Standalone prefix attention as a single operation: projects the query
// hidden states and current tokens through the frozen matrices, prepends the
// prompt and cached K/V, and applies masked multi-head attention plus the
// output projection.
template <class T>
Tensor<T> attention_with_prefix(const Tensor<T>& query_hidden, const BlockWeights<T>& w,
                                const LayerPrefix<T>& prefix, std::type_identity_t<const Tensor<T>*> past_key,
                                std::type_identity_t<const Tensor<T>*> past_value, const Mask& mask,
                                int first_position, int heads) {
  Tensor<T> q = rope_rows(matmul(query_hidden, w.wq), first_position, heads);
  Tensor<T> k_cur = rope_rows(matmul(query_hidden, w.wk), first_position, heads);
  Tensor<T> v_cur = matmul(query_hidden, w.wv);
  std::vector<Tensor<T>> key_parts, value_parts;
  if (prefix.key) {
    key_parts.push_back(*prefix.key);
    value_parts.push_back(*prefix.value);
  }
  if (past_key) {
    key_parts.push_back(*past_key);
    value_parts.push_back(*past_value);
  }
  key_parts.push_back(k_cur);
  value_parts.push_back(v_cur);
  Tensor<T> k_all = key_parts.size() == 1 ? key_parts[0] : concat_rows(key_parts);
  Tensor<T> v_all = value_parts.size() == 1 ? value_parts[0] : concat_rows(value_parts);
  Tensor<T> ctx = multihead_attention(q, k_all, v_all, mask, heads);
  return matmul(ctx, w.wo);
}

}  // namespace dempt
