#pragma once

// The three-phase forward pass (inter-sentence encoding, intra-sentence
// encoding, decoding), pooled summaries, the enhanced next-token
// distribution, sequence loss and scoring, and an incremental decoder for
// generation. The single-phase baselines (MT-PT, CMT-PT) run through the
// same blocks with one prompt and a concatenated input.

#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "dempt/model.hpp"

namespace dempt {

using TokenSpan = std::span<const int>;

// ---------------------------------------------------------------------------
// Graph path (training, scoring, verification)
// ---------------------------------------------------------------------------

// Encode one phase: runs all layers over the given token ids with an optional
// prompt prefix and an optional finished-phase cache. Returns the projected
// K/V per layer plus final-layer (normalized) states.
template <class T>
PhaseCache<T> encode_phase(const Backbone<T>& bb, std::type_identity_t<const Tensor<T>*> prompt, TokenSpan ids,
                           std::type_identity_t<const PhaseCache<T>*> past, int first_position) {
  DEMPT_CHECK(!ids.empty(), "encode_phase: empty token sequence");
  const ModelConfig& cfg = bb.cfg;
  int q = prompt ? cfg.prompt_len : 0;
  int past_len = past ? past->len : 0;
  int n = static_cast<int>(ids.size());
  Mask mask = build_visibility_mask(q, past_len, n, /*causal=*/true);

  Tensor<T> h = embedding_rows(bb.embedding, std::vector<int>(ids.begin(), ids.end()));
  PhaseCache<T> cache;
  cache.first_position = first_position;
  cache.len = n;
  for (int l = 0; l < cfg.layers; ++l) {
    LayerPrefix<T> prefix;
    if (prompt) {
      auto [pk, pv] = split_kv(*prompt, l, cfg.prompt_len);
      prefix.key = pk;
      prefix.value = pv;
      prefix.len = cfg.prompt_len;
    }
    const Tensor<T>* pk = past ? &past->keys[l] : nullptr;
    const Tensor<T>* pv = past ? &past->values[l] : nullptr;
    BlockResult<T> r = block_forward(h, bb.blocks[l], prefix, pk, pv, mask, first_position, cfg.heads);
    h = r.hidden;
    cache.keys.push_back(r.key);
    cache.values.push_back(r.value);
  }
  cache.final_hidden = rmsnorm_rows(h, bb.final_norm_gain);
  return cache;
}

// Token-level mean of a phase's final-layer states -> (1 x d).
template <class T>
Tensor<T> pooled_summary(const PhaseCache<T>& cache) {
  DEMPT_CHECK(cache.len >= 1, "pooled_summary: cache holds no tokens");
  return mean_rows(cache.final_hidden);
}

// Inter-sentence context encoding. An empty context is replaced by the
// begin-of-document sentinel so the phase (and the pooled summary) stays
// well-defined for a document's first sentence.
template <class T>
PhaseCache<T> encode_inter(const Model<T>& m, const Tensor<T>& prompt, TokenSpan context_ids) {
  static const std::vector<int> sentinel{tokens::kBeginDocument};
  TokenSpan ids = context_ids.empty() ? TokenSpan(sentinel) : context_ids;
  return encode_phase(m.backbone, &prompt, ids, nullptr, 0);
}

// Intra-sentence context encoding, conditioned on the finished context phase.
template <class T>
PhaseCache<T> encode_intra(const Model<T>& m, const Tensor<T>& prompt, TokenSpan source_ids,
                           const PhaseCache<T>& ctx_cache) {
  DEMPT_CHECK(!source_ids.empty(), "encode_intra: empty source sentence");
  return encode_phase(m.backbone, &prompt, source_ids, &ctx_cache, ctx_cache.next_position());
}

// Decoding phase, teacher-forced. target_input must begin with the
// begin-of-target marker; the state at position t predicts token y_t and the
// state after the last real token predicts end-of-sequence.
template <class T>
PhaseCache<T> decode_states(const Model<T>& m, const Tensor<T>& prompt, TokenSpan target_input,
                            const PhaseCache<T>& sent_cache) {
  DEMPT_CHECK(!target_input.empty(), "decode_states: empty target input");
  DEMPT_CHECK(target_input.front() == tokens::kBeginTarget,
              "decode_states: target input must start with the begin-of-target marker");
  return encode_phase(m.backbone, &prompt, target_input, &sent_cache, sent_cache.next_position());
}

// softmax(h W) rows over the vocabulary.
template <class T>
Tensor<T> base_dist(const Tensor<T>& states, const Tensor<T>& lm_head) {
  return softmax_rows(matmul(states, lm_head));
}

template <class T>
struct EnhancedDist {
  Tensor<T> mixed;       // p_e
  Tensor<T> base;        // p
  Tensor<T> ctx_fused;   // p-hat, from [s_C; s_S; h_t]
  Tensor<T> sent_fused;  // p-bar, from [s_S; h_t]
};

// Mixes the three next-token distributions. states: (n x d), summaries (1 x d).
template <class T>
EnhancedDist<T> enhanced_dist(const Tensor<T>& states, const Tensor<T>& ctx_summary,
                              const Tensor<T>& sent_summary, const EnhancedHead<T>& head,
                              const Tensor<T>& lm_head) {
  DEMPT_CHECK(head.lambda1 >= 0 && head.lambda2 >= 0 && head.lambda1 + head.lambda2 <= 1.0 + 1e-12,
              "enhanced_dist: lambda weights out of range");
  int n = states.rows();
  EnhancedDist<T> out;
  out.base = base_dist(states, lm_head);
  Tensor<T> c_rows = broadcast_rows(ctx_summary, n);
  Tensor<T> s_rows = broadcast_rows(sent_summary, n);
  out.ctx_fused = base_dist(head.fuse_context(concat_cols<T>({c_rows, s_rows, states})), lm_head);
  out.sent_fused = base_dist(head.fuse_sentence(concat_cols<T>({s_rows, states})), lm_head);
  out.mixed = mix3(out.ctx_fused, out.sent_fused, out.base,
                   static_cast<T>(head.lambda1), static_cast<T>(head.lambda2));
  return out;
}

constexpr double kLogProbFloor = -50.0;  // 32-bit underflow guard

template <class T>
struct ForwardResult {
  Tensor<T> probs;         // (|T|+1) x vocab, p_e rows (one per prediction)
  Tensor<T> states;        // (|T|+1) x d decode states
  std::vector<int> targets;  // y_1..y_|T|, EOS
  // multi-phase extras (undefined for single-phase variants)
  Tensor<T> ctx_summary, sent_summary;
  PhaseCache<T> ctx_cache, sent_cache, dec_cache;
};

template <class T>
ForwardResult<T> forward_instance(const Model<T>& m, const std::vector<Tensor<T>>& prompts,
                                  TokenSpan context, TokenSpan source, TokenSpan target) {
  DEMPT_CHECK(!source.empty(), "forward_instance: empty source sentence");
  ForwardResult<T> r;
  r.targets.assign(target.begin(), target.end());
  r.targets.push_back(tokens::kEndOfSequence);
  std::vector<int> dec_input{tokens::kBeginTarget};
  dec_input.insert(dec_input.end(), target.begin(), target.end());

  if (is_multi_phase(m.variant)) {
    TokenSpan ctx_ids = m.ablation.no_context ? source : context;
    r.ctx_cache = encode_inter(m, prompts[static_cast<int>(PhaseId::InterContext)], ctx_ids);
    r.sent_cache = encode_intra(m, prompts[static_cast<int>(PhaseId::IntraContext)], source, r.ctx_cache);
    r.dec_cache = decode_states(m, prompts[static_cast<int>(PhaseId::Decode)], dec_input, r.sent_cache);
    r.states = r.dec_cache.final_hidden;
    if (m.head && (m.head->lambda1 > 0 || m.head->lambda2 > 0)) {
      r.ctx_summary = pooled_summary(r.ctx_cache);
      r.sent_summary = pooled_summary(r.sent_cache);
      r.probs = enhanced_dist(r.states, r.ctx_summary, r.sent_summary, *m.head, m.backbone.lm_head).mixed;
    } else {
      r.probs = base_dist(r.states, m.backbone.lm_head);
    }
  } else {
    // single phase over [prefix; BOT; T] with one prompt
    std::vector<int> seq;
    if (m.variant == SystemVariant::CMT_PT) {
      if (context.empty())
        seq.push_back(tokens::kBeginDocument);
      else
        seq.insert(seq.end(), context.begin(), context.end());
      seq.push_back(tokens::kSeparator);
    }
    seq.insert(seq.end(), source.begin(), source.end());
    int prefix_len = static_cast<int>(seq.size());
    seq.insert(seq.end(), dec_input.begin(), dec_input.end());
    PhaseCache<T> cache = encode_phase(m.backbone, &prompts[0], seq, nullptr, 0);
    r.states = slice_rows(cache.final_hidden, prefix_len, static_cast<int>(seq.size()));
    r.probs = base_dist(r.states, m.backbone.lm_head);
  }
  return r;
}

// -(1/n) * sum_t log probs[t, targets[t]] with the 32-bit log floor.
template <class T>
Tensor<T> sequence_nll(const Tensor<T>& probs, const std::vector<int>& targets) {
  return scale(mean_all(log_gather(probs, targets, static_cast<T>(kLogProbFloor))), T(-1));
}

// -(1/(|T|+1)) * sum_t log p_e(y_t), end-of-sequence prediction included.
template <class T>
Tensor<T> instance_loss(const Model<T>& m, const std::vector<Tensor<T>>& prompts, TokenSpan context,
                        TokenSpan source, TokenSpan target) {
  ForwardResult<T> r = forward_instance(m, prompts, context, source, target);
  return sequence_nll(r.probs, r.targets);
}

// Prompt tensors for evaluation: baked when available, else materialized
// fresh (identical numerics either way).
template <class T>
std::vector<Tensor<T>> eval_prompts(const Model<T>& m) {
  if (m.baked) return m.baked->prompts;
  NoGradGuard ng;
  return m.prompts.materialize_all();
}

// Total log-probability of the target (teacher-forced, end marker included).
// mean_per_token switches to length-normalized scoring.
template <class T>
double score_sequence(const Model<T>& m, const std::vector<Tensor<T>>& prompts, TokenSpan context,
                      TokenSpan source, TokenSpan target, bool mean_per_token = false) {
  DEMPT_CHECK(!target.empty(), "score_sequence: empty target");
  NoGradGuard ng;
  ForwardResult<T> r = forward_instance(m, prompts, context, source, target);
  Tensor<T> lp = log_gather(r.probs, r.targets, static_cast<T>(kLogProbFloor));
  double total = static_cast<double>(sum_all(lp).item());
  return mean_per_token ? total / static_cast<double>(r.targets.size()) : total;
}

// ---------------------------------------------------------------------------
// Incremental decoding engine (inference only, no autodiff)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
struct LayerKv {
  std::vector<T> k, v;  // len x d
  int len = 0;
};

// mirrors rmsnorm_rows for one row
template <class T>
void rms_row(const T* x, const T* gain, T* y, int d, T eps = T(1e-5)) {
  T ms = T(0);
  for (int j = 0; j < d; ++j) ms += x[j] * x[j];
  ms /= static_cast<T>(d);
  T inv = T(1) / std::sqrt(ms + eps);
  for (int j = 0; j < d; ++j) y[j] = x[j] * inv * gain[j];
}

// mirrors rope_rows for one row at an absolute position
template <class T>
void rope_row(T* y, int pos, int heads, int d) {
  int dh = d / heads;
  int half = dh / 2;
  const auto& table = rope_table<T>(dh, pos + 1);
  const T* c = table.cs.data() + static_cast<size_t>(pos) * half;
  const T* s = table.sn.data() + static_cast<size_t>(pos) * half;
  for (int h = 0; h < heads; ++h) {
    T* p = y + h * dh;
    for (int i = 0; i < half; ++i) {
      T x0 = p[i], x1 = p[i + half];
      p[i] = x0 * c[i] - x1 * s[i];
      p[i + half] = x0 * s[i] + x1 * c[i];
    }
  }
}

template <class T>
void softmax_row(T* x, int n) {
  T mx = x[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  T sum = T(0);
  for (int j = 0; j < n; ++j) {
    x[j] = fast_exp(x[j] - mx);
    sum += x[j];
  }
  T inv = T(1) / sum;
  for (int j = 0; j < n; ++j) x[j] *= inv;
}

}  // namespace detail

// Stepwise decoder over cached phases. start() runs the context phases
// (prefill); step() consumes one target-side token and returns the p_e row
// for the next prediction. Copyable, so beam search can fork hypotheses.
template <class T>
class Decoder {
 public:
  explicit Decoder(const Model<T>& m) : model_(&m) {
    const auto prompts = eval_prompts(m);
    for (const auto& p : prompts)
      prompt_data_.emplace_back(p.data().begin(), p.data().end());
    d_ = m.backbone.cfg.hidden;
    q_ = m.backbone.cfg.prompt_len;
  }

  void start(TokenSpan context, TokenSpan source) {
    const ModelConfig& cfg = model_->backbone.cfg;
    past_.assign(cfg.layers, {});
    tbuf_.assign(cfg.layers, {});
    ctx_summary_.clear();
    sent_summary_.clear();
    if (is_multi_phase(model_->variant)) {
      static const std::vector<int> sentinel{tokens::kBeginDocument};
      TokenSpan ctx_ids = model_->ablation.no_context ? source : context;
      if (ctx_ids.empty()) ctx_ids = TokenSpan(sentinel);
      std::vector<detail::LayerKv<T>> ctx_kv(cfg.layers);
      ctx_summary_ = run_phase(ctx_ids, 0, nullptr, ctx_kv, 0);
      sent_summary_ = run_phase(source, 1, &ctx_kv, past_, static_cast<int>(ctx_ids.size()));
      decode_prompt_ = 2;
      next_pos_ = static_cast<int>(ctx_ids.size() + source.size());
    } else {
      std::vector<int> seq;
      if (model_->variant == SystemVariant::CMT_PT) {
        if (context.empty())
          seq.push_back(tokens::kBeginDocument);
        else
          seq.insert(seq.end(), context.begin(), context.end());
        seq.push_back(tokens::kSeparator);
      }
      seq.insert(seq.end(), source.begin(), source.end());
      run_phase(seq, 0, nullptr, past_, 0);
      decode_prompt_ = 0;
      next_pos_ = static_cast<int>(seq.size());
    }
  }

  // Feed one target-side token (begin marker first); returns p_e over the vocab.
  std::vector<T> step(int token) {
    const ModelConfig& cfg = model_->backbone.cfg;
    const auto& bb = model_->backbone;
    std::vector<T> x(bb.embedding.data().begin() + static_cast<size_t>(token) * d_,
                     bb.embedding.data().begin() + static_cast<size_t>(token + 1) * d_);
    std::vector<T> normed(d_), qrow(d_), krow(d_), vrow(d_), ctx(d_), tmp;
    for (int l = 0; l < cfg.layers; ++l) {
      const auto& w = bb.blocks[l];
      detail::rms_row(x.data(), w.attn_norm_gain.data().data(), normed.data(), d_);
      detail::mm_nn(normed.data(), w.wq.data().data(), qrow.data(), 1, d_, d_);
      detail::mm_nn(normed.data(), w.wk.data().data(), krow.data(), 1, d_, d_);
      detail::mm_nn(normed.data(), w.wv.data().data(), vrow.data(), 1, d_, d_);
      detail::rope_row(qrow.data(), next_pos_, cfg.heads, d_);
      detail::rope_row(krow.data(), next_pos_, cfg.heads, d_);
      auto& tb = tbuf_[l];
      tb.k.insert(tb.k.end(), krow.begin(), krow.end());
      tb.v.insert(tb.v.end(), vrow.begin(), vrow.end());
      tb.len += 1;
      attend_one(l, qrow.data(), ctx.data());
      tmp.assign(d_, T(0));
      detail::mm_nn(ctx.data(), w.wo.data().data(), tmp.data(), 1, d_, d_);
      for (int j = 0; j < d_; ++j) x[j] += tmp[j];
      // feed-forward
      detail::rms_row(x.data(), w.ffn_norm_gain.data().data(), normed.data(), d_);
      int f = cfg.ffn_mult * d_;
      std::vector<T> inner(f);
      detail::mm_nn(normed.data(), w.ffn_in.data().data(), inner.data(), 1, d_, f);
      for (auto& v : inner) v = detail::fast_tanh(v);
      detail::mm_nn(inner.data(), w.ffn_out.data().data(), tmp.data(), 1, f, d_);
      for (int j = 0; j < d_; ++j) x[j] += tmp[j];
    }
    detail::rms_row(x.data(), bb.final_norm_gain.data().data(), last_state_.data(), d_);
    next_pos_ += 1;
    return distribution();
  }

  const std::vector<T>& last_state() const { return last_state_; }

 private:
  // Runs a whole phase (prefill). Stores this phase's K/V into `out`, returns
  // the pooled final-state mean. `past` may be null.
  std::vector<T> run_phase(TokenSpan ids, int prompt_idx, const std::vector<detail::LayerKv<T>>* past,
                           std::vector<detail::LayerKv<T>>& out, int first_pos) {
    const ModelConfig& cfg = model_->backbone.cfg;
    const auto& bb = model_->backbone;
    int n = static_cast<int>(ids.size());
    std::vector<T> h(static_cast<size_t>(n) * d_);
    for (int i = 0; i < n; ++i)
      std::copy_n(bb.embedding.data().data() + static_cast<size_t>(ids[i]) * d_, d_,
                  h.data() + static_cast<size_t>(i) * d_);

    std::vector<T> normed(static_cast<size_t>(n) * d_);
    std::vector<T> qm(normed.size()), ctx(normed.size()), tmp(normed.size());
    for (int l = 0; l < cfg.layers; ++l) {
      const auto& w = bb.blocks[l];
      for (int i = 0; i < n; ++i)
        detail::rms_row(h.data() + static_cast<size_t>(i) * d_, w.attn_norm_gain.data().data(),
                        normed.data() + static_cast<size_t>(i) * d_, d_);
      auto& ob = out[l];
      size_t kv_off = ob.k.size();
      ob.k.resize(kv_off + static_cast<size_t>(n) * d_);
      ob.v.resize(kv_off + static_cast<size_t>(n) * d_);
      detail::mm_nn(normed.data(), w.wq.data().data(), qm.data(), n, d_, d_);
      detail::mm_nn(normed.data(), w.wk.data().data(), ob.k.data() + kv_off, n, d_, d_);
      detail::mm_nn(normed.data(), w.wv.data().data(), ob.v.data() + kv_off, n, d_, d_);
      for (int i = 0; i < n; ++i) {
        detail::rope_row(qm.data() + static_cast<size_t>(i) * d_, first_pos + i, cfg.heads, d_);
        detail::rope_row(ob.k.data() + kv_off + static_cast<size_t>(i) * d_, first_pos + i, cfg.heads, d_);
      }
      ob.len += n;
      // causal attention over [prompt; past; current<=i]
      const T* prompt = prompt_slice(prompt_idx, l);
      const detail::LayerKv<T>* pl = past ? &(*past)[l] : nullptr;
      for (int i = 0; i < n; ++i)
        attend_row(qm.data() + static_cast<size_t>(i) * d_, prompt, pl, ob.k.data() + kv_off,
                   ob.v.data() + kv_off, i + 1, ctx.data() + static_cast<size_t>(i) * d_);
      detail::mm_nn(ctx.data(), w.wo.data().data(), tmp.data(), n, d_, d_);
      for (size_t j = 0; j < h.size(); ++j) h[j] += tmp[j];
      for (int i = 0; i < n; ++i)
        detail::rms_row(h.data() + static_cast<size_t>(i) * d_, w.ffn_norm_gain.data().data(),
                        normed.data() + static_cast<size_t>(i) * d_, d_);
      int f = cfg.ffn_mult * d_;
      std::vector<T> inner(static_cast<size_t>(n) * f);
      detail::mm_nn(normed.data(), w.ffn_in.data().data(), inner.data(), n, d_, f);
      for (auto& v : inner) v = detail::fast_tanh(v);
      detail::mm_nn(inner.data(), w.ffn_out.data().data(), tmp.data(), n, f, d_);
      for (size_t j = 0; j < h.size(); ++j) h[j] += tmp[j];
    }
    // final norm + mean pool (same accumulation order as the graph path)
    std::vector<T> pooled(d_, T(0));
    std::vector<T> row(d_);
    for (int i = 0; i < n; ++i) {
      detail::rms_row(h.data() + static_cast<size_t>(i) * d_, bb.final_norm_gain.data().data(), row.data(), d_);
      for (int j = 0; j < d_; ++j) pooled[j] += row[j];
    }
    T inv = T(1) / static_cast<T>(n);
    for (auto& v : pooled) v *= inv;
    last_state_.assign(row.begin(), row.end());
    return pooled;
  }

  const T* prompt_slice(int prompt_idx, int layer) const {
    if (q_ == 0) return nullptr;
    return prompt_data_[prompt_idx].data() + static_cast<size_t>(layer) * 2 * q_ * d_;
  }

  // attention for one query over [prompt; past; current prefix rows]
  void attend_row(const T* qrow, const T* prompt, const detail::LayerKv<T>* past, const T* cur_k,
                  const T* cur_v, int cur_visible, T* out) const {
    const ModelConfig& cfg = model_->backbone.cfg;
    int heads = cfg.heads, dh = d_ / heads;
    T scl = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    int n_prompt = prompt ? q_ : 0;
    int n_past = past ? past->len : 0;
    int total = n_prompt + n_past + cur_visible;
    std::vector<T> sc(total);
    std::fill(out, out + d_, T(0));
    for (int h = 0; h < heads; ++h) {
      int off = h * dh;
      const T* qh = qrow + off;
      auto key_at = [&](int j) -> const T* {
        if (j < n_prompt) return prompt + static_cast<size_t>(j) * d_ + off;  // key half rows first
        j -= n_prompt;
        if (j < n_past) return past->k.data() + static_cast<size_t>(j) * d_ + off;
        j -= n_past;
        return cur_k + static_cast<size_t>(j) * d_ + off;
      };
      auto val_at = [&](int j) -> const T* {
        if (j < n_prompt) return prompt + static_cast<size_t>(q_ + j) * d_ + off;  // value half
        j -= n_prompt;
        if (j < n_past) return past->v.data() + static_cast<size_t>(j) * d_ + off;
        j -= n_past;
        return cur_v + static_cast<size_t>(j) * d_ + off;
      };
      T mx = std::numeric_limits<T>::lowest();
      for (int j = 0; j < total; ++j) {
        const T* kh = key_at(j);
        T acc = T(0);
#pragma omp simd reduction(+ : acc)
        for (int t = 0; t < dh; ++t) acc += qh[t] * kh[t];
        sc[j] = acc * scl;
        mx = std::max(mx, sc[j]);
      }
      T sum = T(0);
      for (int j = 0; j < total; ++j) {
        sc[j] = detail::fast_exp(sc[j] - mx);
        sum += sc[j];
      }
      T inv = T(1) / sum;
      T* oh = out + off;
      for (int j = 0; j < total; ++j) {
        T a = sc[j] * inv;
        const T* vh = val_at(j);
#pragma omp simd
        for (int t = 0; t < dh; ++t) oh[t] += a * vh[t];
      }
    }
  }

  void attend_one(int layer, const T* qrow, T* out) const {
    const auto& tb = tbuf_[layer];
    attend_row(qrow, prompt_slice(decode_prompt_, layer), &past_[layer], tb.k.data(), tb.v.data(), tb.len,
               out);
  }

  std::vector<T> distribution() const {
    const auto& bb = model_->backbone;
    int v = bb.cfg.vocab;
    auto project = [&](const std::vector<T>& state) {
      std::vector<T> logits(v);
      detail::mm_nn(state.data(), bb.lm_head.data().data(), logits.data(), 1, d_, v);
      detail::softmax_row(logits.data(), v);
      return logits;
    };
    std::vector<T> p = project(last_state_);
    const auto& head = model_->head;
    if (!head || (head->lambda1 == 0 && head->lambda2 == 0)) return p;

    int inner = model_->backbone.cfg.ffn_mult * d_;
    auto fuse = [&](const std::vector<T>& input, const Tensor<T>& w_in, const Tensor<T>& b_in,
                    const Tensor<T>& w_out, const Tensor<T>& b_out) {
      std::vector<T> mid(inner);
      detail::mm_nn(input.data(), w_in.data().data(), mid.data(), 1, static_cast<int>(input.size()), inner);
      for (int j = 0; j < inner; ++j) mid[j] = detail::fast_tanh(mid[j] + b_in.data()[j]);
      std::vector<T> out(d_);
      detail::mm_nn(mid.data(), w_out.data().data(), out.data(), 1, inner, d_);
      for (int j = 0; j < d_; ++j) out[j] += b_out.data()[j];
      return out;
    };
    std::vector<T> ctx_in;
    ctx_in.reserve(3 * d_);
    ctx_in.insert(ctx_in.end(), ctx_summary_.begin(), ctx_summary_.end());
    ctx_in.insert(ctx_in.end(), sent_summary_.begin(), sent_summary_.end());
    ctx_in.insert(ctx_in.end(), last_state_.begin(), last_state_.end());
    std::vector<T> sent_in;
    sent_in.reserve(2 * d_);
    sent_in.insert(sent_in.end(), sent_summary_.begin(), sent_summary_.end());
    sent_in.insert(sent_in.end(), last_state_.begin(), last_state_.end());
    std::vector<T> p_hat = project(fuse(ctx_in, head->ctx_in_w, head->ctx_in_b, head->ctx_out_w, head->ctx_out_b));
    std::vector<T> p_bar =
        project(fuse(sent_in, head->sent_in_w, head->sent_in_b, head->sent_out_w, head->sent_out_b));
    T l1 = static_cast<T>(head->lambda1), l2 = static_cast<T>(head->lambda2);
    T l3 = T(1) - l1 - l2;
    for (int j = 0; j < v; ++j) p[j] = l1 * p_hat[j] + l2 * p_bar[j] + l3 * p[j];
    return p;
  }

  const Model<T>* model_;
  std::vector<std::vector<T>> prompt_data_;
  std::vector<detail::LayerKv<T>> past_;   // finished phase visible during decode
  std::vector<detail::LayerKv<T>> tbuf_;   // decode phase, grows per step
  std::vector<T> ctx_summary_, sent_summary_;
  std::vector<T> last_state_ = std::vector<T>(1);
  int d_ = 0, q_ = 0;
  int decode_prompt_ = 0;
  int next_pos_ = 0;
};

struct GenerateOptions {
  int max_len = 32;
  int beam_width = 1;  // 1 = greedy
};

template <class T>
std::vector<int> generate(const Model<T>& m, TokenSpan context, TokenSpan source, const GenerateOptions& opt) {
  DEMPT_CHECK(opt.max_len > 0, "generate: max_len must be positive");
  DEMPT_CHECK(opt.beam_width >= 1, "generate: beam width must be >= 1");
  Decoder<T> dec(m);
  dec.start(context, source);

  if (opt.beam_width == 1) {
    std::vector<int> out;
    int tok = tokens::kBeginTarget;
    for (int i = 0; i < opt.max_len; ++i) {
      std::vector<T> p = dec.step(tok);
      int best = 0;
      for (size_t j = 1; j < p.size(); ++j)
        if (p[j] > p[best]) best = static_cast<int>(j);
      if (best == tokens::kEndOfSequence) break;
      out.push_back(best);
      tok = best;
    }
    return out;
  }

  struct Hyp {
    Decoder<T> dec;
    std::vector<int> toks;
    double logp = 0.0;
    bool done = false;
  };
  std::vector<Hyp> beam{{dec, {}, 0.0, false}};
  {
    // expand the shared first step once
    std::vector<T> p = beam[0].dec.step(tokens::kBeginTarget);
    std::vector<Hyp> next;
    std::vector<int> order(p.size());
    for (size_t j = 0; j < p.size(); ++j) order[j] = static_cast<int>(j);
    std::partial_sort(order.begin(), order.begin() + std::min<size_t>(opt.beam_width, order.size()), order.end(),
                      [&](int a, int b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
    for (int bi = 0; bi < opt.beam_width && bi < static_cast<int>(order.size()); ++bi) {
      int tok = order[bi];
      Hyp h{beam[0].dec, {}, std::log(std::max(static_cast<double>(p[tok]), 1e-300)), false};
      if (tok == tokens::kEndOfSequence)
        h.done = true;
      else
        h.toks.push_back(tok);
      next.push_back(std::move(h));
    }
    beam = std::move(next);
  }
  for (int step = 1; step < opt.max_len; ++step) {
    struct Cand {
      int hyp;
      int tok;
      double logp;
    };
    std::vector<Cand> cands;
    bool all_done = true;
    for (size_t hi = 0; hi < beam.size(); ++hi) {
      if (beam[hi].done) {
        cands.push_back({static_cast<int>(hi), -1, beam[hi].logp});
        continue;
      }
      all_done = false;
      std::vector<T> p = beam[hi].dec.step(beam[hi].toks.back());
      for (size_t j = 0; j < p.size(); ++j)
        cands.push_back({static_cast<int>(hi), static_cast<int>(j),
                         beam[hi].logp + std::log(std::max(static_cast<double>(p[j]), 1e-300))});
    }
    if (all_done) break;
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.logp > b.logp; });
    std::vector<Hyp> next;
    for (const Cand& c : cands) {
      if (static_cast<int>(next.size()) == opt.beam_width) break;
      if (c.tok < 0) {
        next.push_back(beam[c.hyp]);
        continue;
      }
      Hyp h = beam[c.hyp];
      h.logp = c.logp;
      if (c.tok == tokens::kEndOfSequence)
        h.done = true;
      else
        h.toks.push_back(c.tok);
      next.push_back(std::move(h));
    }
    beam = std::move(next);
  }
  size_t best = 0;
  for (size_t hi = 1; hi < beam.size(); ++hi)
    if (beam[hi].logp > beam[best].logp) best = hi;
  auto toks = beam[best].toks;
  if (static_cast<int>(toks.size()) > opt.max_len) toks.resize(opt.max_len);
  return toks;
}

}  // namespace dempt
