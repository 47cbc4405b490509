#pragma once

// Model assembly: frozen backbone + trainable prompt bank, and for the full
// DeMPT system the enhanced decoding head that fuses pooled context and
// sentence summaries into two extra next-token distributions.

#include <optional>
#include <string>
#include <vector>

#include "dempt/prompts.hpp"

namespace dempt {

enum class SystemVariant { MT_PT, CMT_PT, MPT, DeMPT };

inline const char* variant_name(SystemVariant v) {
  switch (v) {
    case SystemVariant::MT_PT: return "mt-pt";
    case SystemVariant::CMT_PT: return "cmt-pt";
    case SystemVariant::MPT: return "mpt";
    case SystemVariant::DeMPT: return "dempt";
  }
  return "?";
}

inline SystemVariant variant_from_name(const std::string& s) {
  if (s == "mt-pt" || s == "mt_pt") return SystemVariant::MT_PT;
  if (s == "cmt-pt" || s == "cmt_pt") return SystemVariant::CMT_PT;
  if (s == "mpt") return SystemVariant::MPT;
  if (s == "dempt") return SystemVariant::DeMPT;
  fail("unknown system variant '" + s + "' (expected mt-pt|cmt-pt|mpt|dempt)");
}

inline bool is_multi_phase(SystemVariant v) { return v == SystemVariant::MPT || v == SystemVariant::DeMPT; }

// Two trainable fusers: context fuser 3d -> 4d -> d over [s_C; s_S; h_t] and
// sentence fuser 2d -> 4d -> d over [s_S; h_t]. Final projections start at
// zero so the fused distributions begin uniform. Output width stays d so the
// frozen LM head applies unchanged.
template <class T>
struct EnhancedHead {
  Tensor<T> ctx_in_w, ctx_in_b, ctx_out_w, ctx_out_b;
  Tensor<T> sent_in_w, sent_in_b, sent_out_w, sent_out_b;
  double lambda1 = 1.0 / 3.0;  // weight of the context-fused distribution
  double lambda2 = 1.0 / 3.0;  // weight of the sentence-fused distribution

  static EnhancedHead init(int hidden, int ffn_mult, uint64_t seed, double lambda1, double lambda2,
                           double init_std = 0.02) {
    DEMPT_CHECK(lambda1 >= 0 && lambda2 >= 0 && lambda1 + lambda2 <= 1.0 + 1e-12,
                "enhanced head: lambda weights must be in [0,1] with lambda1+lambda2 <= 1");
    Rng rng(mix_seed(seed, 0x4ead));
    int inner = ffn_mult * hidden;
    auto fan_in_t = [&](Shape shape) {
      std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
      double std_dev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      for (auto& x : v) x = static_cast<T>(rng.normal() * std_dev);
      return Tensor<T>::param(shape, std::move(v));
    };
    (void)init_std;
    EnhancedHead h;
    h.lambda1 = lambda1;
    h.lambda2 = lambda2;
    h.ctx_in_w = fan_in_t({3 * hidden, inner});
    h.ctx_in_b = Tensor<T>::param({1, inner});
    h.ctx_out_w = Tensor<T>::param({inner, hidden});
    h.ctx_out_b = Tensor<T>::param({1, hidden});
    h.sent_in_w = fan_in_t({2 * hidden, inner});
    h.sent_in_b = Tensor<T>::param({1, inner});
    h.sent_out_w = Tensor<T>::param({inner, hidden});
    h.sent_out_b = Tensor<T>::param({1, hidden});
    return h;
  }

  // fused state for a batch of decode states; input (n x in_width)
  Tensor<T> fuse_context(const Tensor<T>& x) const {
    return add_row_broadcast(matmul(tanh_op(add_row_broadcast(matmul(x, ctx_in_w), ctx_in_b)), ctx_out_w),
                             ctx_out_b);
  }
  Tensor<T> fuse_sentence(const Tensor<T>& x) const {
    return add_row_broadcast(matmul(tanh_op(add_row_broadcast(matmul(x, sent_in_w), sent_in_b)), sent_out_w),
                             sent_out_b);
  }
};

// Fill the zero-initialized fuser output projections with small random
// values so gradient checks exercise every path through the head.
template <class T>
void randomize_head_outputs(EnhancedHead<T>& head, uint64_t seed, double scale = 0.05) {
  Rng rng(mix_seed(seed, 0xf00d));
  for (Tensor<T>* t : {&head.ctx_out_w, &head.ctx_out_b, &head.sent_out_w, &head.sent_out_b})
    for (auto& x : t->mutable_data()) x = static_cast<T>(rng.normal() * scale);
}

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay = false;  // weight decay applies to matrices only
};

struct AblationFlags {
  bool no_transfer = false;
  bool no_type_embedding = false;
  bool no_context = false;  // encode the intra-sentence context twice
};

template <class T>
std::vector<NamedParam<T>> backbone_named_params(Backbone<T>& bb) {
  std::vector<NamedParam<T>> out;
  out.push_back({"backbone.embedding", bb.embedding, true});
  for (int l = 0; l < bb.cfg.layers; ++l) {
    auto& b = bb.blocks[l];
    std::string p = "backbone.layer" + std::to_string(l) + ".";
    out.push_back({p + "attn_norm_gain", b.attn_norm_gain, false});
    out.push_back({p + "wq", b.wq, true});
    out.push_back({p + "wk", b.wk, true});
    out.push_back({p + "wv", b.wv, true});
    out.push_back({p + "wo", b.wo, true});
    out.push_back({p + "ffn_norm_gain", b.ffn_norm_gain, false});
    out.push_back({p + "ffn_in", b.ffn_in, true});
    out.push_back({p + "ffn_out", b.ffn_out, true});
  }
  out.push_back({"backbone.final_norm_gain", bb.final_norm_gain, false});
  out.push_back({"backbone.lm_head", bb.lm_head, true});
  return out;
}

template <class T>
struct Model {
  SystemVariant variant = SystemVariant::DeMPT;
  AblationFlags ablation;
  Backbone<T> backbone;  // frozen
  PromptBank<T> prompts;
  std::optional<EnhancedHead<T>> head;        // DeMPT only
  std::optional<BakedPrompts<T>> baked;       // set by bake()

  static Model assemble(SystemVariant variant, const Backbone<T>& backbone, uint64_t seed,
                        double lambda1 = 1.0 / 3.0, double lambda2 = 1.0 / 3.0,
                        AblationFlags ablation = {}) {
    const ModelConfig& cfg = backbone.cfg;
    Model m;
    m.variant = variant;
    m.ablation = ablation;
    m.backbone = backbone;
    int phases = is_multi_phase(variant) ? kPhaseCount : 1;
    m.prompts = PromptBank<T>::init(cfg.layers, cfg.prompt_len, cfg.hidden, phases, seed,
                                    !ablation.no_transfer, !ablation.no_type_embedding, cfg.init_std);
    if (variant == SystemVariant::DeMPT)
      m.head = EnhancedHead<T>::init(cfg.hidden, cfg.ffn_mult, seed, lambda1, lambda2, cfg.init_std);
    return m;
  }

  void bake() { baked = BakedPrompts<T>::bake(prompts); }

  double lambda1() const { return head ? head->lambda1 : 0.0; }
  double lambda2() const { return head ? head->lambda2 : 0.0; }

  std::vector<NamedParam<T>> trainable_params() {
    std::vector<NamedParam<T>> out;
    static const char* phase_tag[3] = {"inter", "intra", "decode"};
    for (int r = 0; r < prompts.phase_count; ++r) {
      std::string tag = prompts.phase_count == 1 ? std::string("single") : phase_tag[r];
      out.push_back({"prompts.raw." + tag, prompts.raw[r], true});
    }
    if (prompts.use_transfer) {
      out.push_back({"prompts.transfer_in", prompts.transfer_in, true});
      out.push_back({"prompts.transfer_out", prompts.transfer_out, true});
    }
    if (prompts.use_type_embedding) out.push_back({"prompts.type_emb", prompts.type_emb, false});
    if (head) {
      out.push_back({"head.ctx_in_w", head->ctx_in_w, true});
      out.push_back({"head.ctx_in_b", head->ctx_in_b, false});
      out.push_back({"head.ctx_out_w", head->ctx_out_w, true});
      out.push_back({"head.ctx_out_b", head->ctx_out_b, false});
      out.push_back({"head.sent_in_w", head->sent_in_w, true});
      out.push_back({"head.sent_in_b", head->sent_in_b, false});
      out.push_back({"head.sent_out_w", head->sent_out_w, true});
      out.push_back({"head.sent_out_b", head->sent_out_b, false});
    }
    return out;
  }

  std::vector<NamedParam<T>> backbone_params() { return backbone_named_params(backbone); }

  std::vector<NamedParam<T>> all_params() {
    auto out = backbone_params();
    auto t = trainable_params();
    out.insert(out.end(), t.begin(), t.end());
    return out;
  }
};

}  // namespace dempt
