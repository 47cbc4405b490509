#pragma once

// Phase-aware trainable prompts. Each phase r has a raw prompt O_r of shape
// (layers * 2q) x d; materialization sends it through a shared tanh transfer
// layer and adds a per-phase type embedding row:
//
//   P_r = tanh(O_r W1) W2 + type_emb[r]
//
// Ablation switches drop either term. Rows [l*2q, l*2q+q) of P_r are the key
// prefix for layer l, rows [l*2q+q, (l+1)*2q) the value prefix, both already
// in projected key/value space (prefix-tuning convention; token hidden states
// go through the frozen projections instead).

#include <vector>

#include "dempt/transformer.hpp"

namespace dempt {

enum class PhaseId { InterContext = 0, IntraContext = 1, Decode = 2 };

inline constexpr int kPhaseCount = 3;

template <class T>
struct PromptBank {
  int layers = 0;
  int prompt_len = 0;
  int hidden = 0;
  int phase_count = kPhaseCount;  // 1 for the single-phase baselines
  bool use_transfer = true;
  bool use_type_embedding = true;

  std::vector<Tensor<T>> raw;  // per phase: (layers * 2q) x d
  Tensor<T> transfer_in;       // W1, d x d
  Tensor<T> transfer_out;      // W2, d x d
  Tensor<T> type_emb;          // phase_count x d

  static PromptBank init(int layers, int prompt_len, int hidden, int phase_count, uint64_t seed,
                         bool use_transfer = true, bool use_type_embedding = true, double init_std = 0.02) {
    DEMPT_CHECK(phase_count == 1 || phase_count == kPhaseCount, "prompt bank: phase count must be 1 or 3");
    DEMPT_CHECK(prompt_len > 0, "prompt bank: prompt length must be positive");
    Rng rng(mix_seed(seed, 0x9c0b9));
    auto init_t = [&](Shape shape, double std_dev) {
      std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
      for (auto& x : v) x = static_cast<T>(rng.normal() * std_dev);
      return Tensor<T>::param(shape, std::move(v));
    };
    PromptBank b;
    b.layers = layers;
    b.prompt_len = prompt_len;
    b.hidden = hidden;
    b.phase_count = phase_count;
    b.use_transfer = use_transfer;
    b.use_type_embedding = use_type_embedding;
    for (int r = 0; r < phase_count; ++r) b.raw.push_back(init_t({layers * 2 * prompt_len, hidden}, init_std));
    if (use_transfer) {
      // fan-in scaling; a small-std pair of matrices would collapse the
      // gradient signal reaching the raw prompts
      double w_std = 1.0 / std::sqrt(static_cast<double>(hidden));
      b.transfer_in = init_t({hidden, hidden}, w_std);
      b.transfer_out = init_t({hidden, hidden}, w_std);
    }
    if (use_type_embedding) b.type_emb = init_t({phase_count, hidden}, init_std);
    return b;
  }

  // P_r, differentiable. (layers * 2q) x d.
  Tensor<T> materialize(int phase) const {
    DEMPT_CHECK(phase >= 0 && phase < phase_count, "prompt bank: phase index out of range");
    Tensor<T> p = raw[phase];
    if (use_transfer) p = matmul(tanh_op(matmul(p, transfer_in)), transfer_out);
    if (use_type_embedding) {
      Tensor<T> row = slice_rows(type_emb, phase, phase + 1);
      p = add_row_broadcast(p, row);
    }
    return p;
  }

  Tensor<T> materialize(PhaseId phase) const { return materialize(static_cast<int>(phase)); }

  std::vector<Tensor<T>> materialize_all() const {
    std::vector<Tensor<T>> out;
    for (int r = 0; r < phase_count; ++r) out.push_back(materialize(r));
    return out;
  }
};

// (key prefix, value prefix) for one layer of a materialized prompt.
template <class T>
std::pair<Tensor<T>, Tensor<T>> split_kv(const Tensor<T>& materialized, int layer, int prompt_len) {
  DEMPT_CHECK(materialized.shape().size() == 2 && materialized.rows() % (2 * prompt_len) == 0,
              "split_kv: bad prompt shape");
  int layers = materialized.rows() / (2 * prompt_len);
  DEMPT_CHECK(layer >= 0 && layer < layers,
              "split_kv: layer " + std::to_string(layer) + " out of range [0," + std::to_string(layers) + ")");
  int base = layer * 2 * prompt_len;
  return {slice_rows(materialized, base, base + prompt_len),
          slice_rows(materialized, base + prompt_len, base + 2 * prompt_len)};
}

// Prompts materialized once after training; inference skips the transfer
// layer entirely and uses these frozen tensors.
template <class T>
struct BakedPrompts {
  std::vector<Tensor<T>> prompts;  // per phase, frozen leaves

  static BakedPrompts bake(const PromptBank<T>& bank) {
    NoGradGuard ng;
    BakedPrompts b;
    for (int r = 0; r < bank.phase_count; ++r) b.prompts.push_back(bank.materialize(r).detach());
    return b;
  }
};

}  // namespace dempt
