#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "dempt/pipeline.hpp"

using namespace dempt;

namespace {

ModelConfig tiny_cfg(int layers = 2, int hidden = 8, int heads = 2, int vocab = 50, int q = 2) {
  ModelConfig cfg;
  cfg.layers = layers;
  cfg.hidden = hidden;
  cfg.heads = heads;
  cfg.vocab = vocab;
  cfg.prompt_len = q;
  return cfg;
}

template <class T>
Model<T> tiny_model(const ModelConfig& cfg, SystemVariant variant = SystemVariant::DeMPT, uint64_t seed = 11,
                    double l1 = 1.0 / 3, double l2 = 1.0 / 3, AblationFlags ab = {}) {
  Backbone<T> bb = Backbone<T>::random(cfg, seed, false);
  return Model<T>::assemble(variant, bb, seed + 1, l1, l2, ab);
}

std::vector<int> rand_tokens(Rng& rng, int n, int vocab) {
  std::vector<int> out;
  for (int i = 0; i < n; ++i)
    out.push_back(tokens::kReservedCount + static_cast<int>(rng.uniform(vocab - tokens::kReservedCount)));
  return out;
}

template <class T>
bool same_bits(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) return false;
  for (int64_t i = 0; i < a.size(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

template <class T>
bool cache_same(const PhaseCache<T>& a, const PhaseCache<T>& b) {
  if (a.len != b.len) return false;
  for (size_t l = 0; l < a.keys.size(); ++l)
    if (!same_bits(a.keys[l], b.keys[l]) || !same_bits(a.values[l], b.values[l])) return false;
  return same_bits(a.final_hidden, b.final_hidden);
}

}  // namespace

TEST_CASE("empty context is replaced by the begin-of-document sentinel") {
  auto m = tiny_model<double>(tiny_cfg());
  auto prompts = m.prompts.materialize_all();
  auto cache = encode_inter(m, prompts[0], {});
  CHECK(cache.len == 1);
  for (const auto& k : cache.keys) CHECK(k.rows() == 1);
}

TEST_CASE("context cache holds exactly |C| entries per layer; prompt prefix is not stored") {
  auto m = tiny_model<double>(tiny_cfg());
  auto prompts = m.prompts.materialize_all();
  Rng rng(5);
  auto C = rand_tokens(rng, 5, 50);
  auto cache = encode_inter(m, prompts[0], C);
  CHECK(cache.len == 5);
  CHECK(cache.keys.size() == 2);
  for (const auto& k : cache.keys) CHECK(k.rows() == 5);  // q rows of the prompt are absent
  auto cache2 = encode_inter(m, prompts[0], C);
  CHECK(cache_same(cache, cache2));
}

TEST_CASE("intra-sentence encoding leaves the context cache untouched and sizes its own") {
  auto m = tiny_model<double>(tiny_cfg());
  auto prompts = m.prompts.materialize_all();
  Rng rng(7);
  auto C = rand_tokens(rng, 3, 50);
  auto S = rand_tokens(rng, 4, 50);
  auto ctx = encode_inter(m, prompts[0], C);
  auto ctx_before = ctx;
  auto sent = encode_intra(m, prompts[1], S, ctx);
  CHECK(sent.len == 4);
  CHECK(sent.first_position == 3);
  CHECK(cache_same(ctx, ctx_before));
}

TEST_CASE("perturbing a context token changes phase-2 and phase-3 states") {
  auto m = tiny_model<double>(tiny_cfg());
  auto prompts = m.prompts.materialize_all();
  Rng rng(9);
  auto C = rand_tokens(rng, 4, 50);
  auto S = rand_tokens(rng, 3, 50);
  auto T = rand_tokens(rng, 3, 50);
  auto r1 = forward_instance(m, prompts, C, S, T);
  auto C2 = C;
  C2[1] = C2[1] == 6 ? 7 : 6;
  auto r2 = forward_instance(m, prompts, C2, S, T);
  CHECK_FALSE(same_bits(r1.sent_cache.final_hidden, r2.sent_cache.final_hidden));
  CHECK_FALSE(same_bits(r1.states, r2.states));
}

TEST_CASE("decode_states yields |T|+1 prediction states and validates its input") {
  auto m = tiny_model<double>(tiny_cfg());
  auto prompts = m.prompts.materialize_all();
  Rng rng(13);
  auto C = rand_tokens(rng, 2, 50);
  auto S = rand_tokens(rng, 3, 50);
  auto ctx = encode_inter(m, prompts[0], C);
  auto sent = encode_intra(m, prompts[1], S, ctx);
  std::vector<int> t_in{tokens::kBeginTarget, 9, 10, 11};
  auto dec = decode_states(m, prompts[2], t_in, sent);
  CHECK(dec.final_hidden.rows() == 4);  // 3 tokens + end-of-sequence prediction
  CHECK_THROWS_AS(decode_states(m, prompts[2], {}, sent), std::runtime_error);
  std::vector<int> bad{9, 10};
  CHECK_THROWS_AS(decode_states(m, prompts[2], bad, sent), std::runtime_error);
}

TEST_CASE("causal masking: perturbing target token j changes only later prediction states") {
  auto m = tiny_model<double>(tiny_cfg());
  auto prompts = m.prompts.materialize_all();
  Rng rng(17);
  auto C = rand_tokens(rng, 3, 50);
  auto S = rand_tokens(rng, 3, 50);
  auto T = rand_tokens(rng, 4, 50);
  auto r1 = forward_instance(m, prompts, C, S, T);
  for (int j = 1; j <= 4; ++j) {  // 1-based target position
    auto T2 = T;
    T2[j - 1] = T2[j - 1] == 6 ? 7 : 6;
    auto r2 = forward_instance(m, prompts, C, S, T2);
    // phase-1/2 caches never move
    CHECK(cache_same(r1.ctx_cache, r2.ctx_cache));
    CHECK(cache_same(r1.sent_cache, r2.sent_cache));
    // states h_t depend on y_<t only: rows t <= j match exactly
    int d = r1.states.cols();
    for (int t = 1; t <= 4 + 1; ++t) {
      bool equal = true;
      for (int c = 0; c < d; ++c)
        if (r1.states.data()[(t - 1) * d + c] != r2.states.data()[(t - 1) * d + c]) equal = false;
      if (t <= j)
        CHECK(equal);
      else
        CHECK_FALSE(equal);
    }
  }
}

TEST_CASE("base distribution: rows sum to 1; equal logits at d=1 |V|=2 give [0.5, 0.5]") {
  auto h = Tensor<double>::from({1, 1}, {0.0});
  auto W = Tensor<double>::from({1, 2}, {1.0, -1.0});
  auto p = base_dist(h, W);
  CHECK(p.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p.data()[1] == doctest::Approx(0.5).epsilon(1e-12));

  auto m = tiny_model<double>(tiny_cfg());
  auto prompts = m.prompts.materialize_all();
  Rng rng(19);
  auto r = forward_instance(m, prompts, rand_tokens(rng, 3, 50), rand_tokens(rng, 3, 50),
                            rand_tokens(rng, 3, 50));
  for (int i = 0; i < r.probs.rows(); ++i) {
    double sum = 0;
    for (int j = 0; j < r.probs.cols(); ++j) sum += r.probs.data()[i * r.probs.cols() + j];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("frozen LM head receives no gradient from the loss") {
  auto m = tiny_model<float>(tiny_cfg());
  auto prompts = m.prompts.materialize_all();
  Rng rng(23);
  std::vector<int> C = rand_tokens(rng, 2, 50), S = rand_tokens(rng, 2, 50), T = rand_tokens(rng, 2, 50);
  auto loss = instance_loss(m, prompts, C, S, T);
  loss.backward();
  CHECK_FALSE(m.backbone.lm_head.has_grad());
  CHECK_FALSE(m.backbone.embedding.has_grad());
  CHECK(m.prompts.raw[0].has_grad());
}

TEST_CASE("pooled summary: mean of final states; single token = that state") {
  PhaseCache<double> cache;
  cache.len = 2;
  cache.final_hidden = Tensor<double>::from({2, 1}, {1.0, 3.0});
  auto pooled = pooled_summary(cache);
  CHECK(pooled.data()[0] == doctest::Approx(2.0).epsilon(1e-12));
  PhaseCache<double> one;
  one.len = 1;
  one.final_hidden = Tensor<double>::from({1, 3}, {0.5, -1.0, 2.0});
  auto p1 = pooled_summary(one);
  for (int j = 0; j < 3; ++j) CHECK(p1.data()[j] == one.final_hidden.data()[j]);
  PhaseCache<double> empty;
  CHECK_THROWS_AS(pooled_summary(empty), std::runtime_error);
}

TEST_CASE("pooled summaries are independent of the target entirely") {
  auto m = tiny_model<double>(tiny_cfg());
  auto prompts = m.prompts.materialize_all();
  Rng rng(29);
  auto C = rand_tokens(rng, 3, 50);
  auto S = rand_tokens(rng, 3, 50);
  auto T1 = rand_tokens(rng, 4, 50);
  auto T2 = rand_tokens(rng, 2, 50);
  auto r1 = forward_instance(m, prompts, C, S, T1);
  auto r2 = forward_instance(m, prompts, C, S, T2);
  CHECK(same_bits(r1.ctx_summary, r2.ctx_summary));
  CHECK(same_bits(r1.sent_summary, r2.sent_summary));
}

TEST_CASE("enhanced distribution: sums, zero-lambda bit-equality, lambda validation") {
  auto cfg = tiny_cfg();
  auto m = tiny_model<double>(cfg);
  Rng rng(31);
  std::vector<double> sv(static_cast<size_t>(3) * cfg.hidden), c1(cfg.hidden), c2(cfg.hidden);
  for (auto& x : sv) x = rng.normal();
  for (auto& x : c1) x = rng.normal();
  for (auto& x : c2) x = rng.normal();
  auto states = Tensor<double>::from({3, cfg.hidden}, sv);
  auto sc = Tensor<double>::from({1, cfg.hidden}, c1);
  auto ss = Tensor<double>::from({1, cfg.hidden}, c2);

  auto dist = enhanced_dist(states, sc, ss, *m.head, m.backbone.lm_head);
  for (const Tensor<double>* p : {&dist.mixed, &dist.base, &dist.ctx_fused, &dist.sent_fused})
    for (int i = 0; i < p->rows(); ++i) {
      double sum = 0;
      for (int j = 0; j < p->cols(); ++j) sum += p->data()[i * p->cols() + j];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }

  EnhancedHead<double> zero = *m.head;
  zero.lambda1 = 0;
  zero.lambda2 = 0;
  auto z = enhanced_dist(states, sc, ss, zero, m.backbone.lm_head);
  CHECK(same_bits(z.mixed, z.base));

  EnhancedHead<double> bad = *m.head;
  bad.lambda1 = 0.8;
  bad.lambda2 = 0.5;
  CHECK_THROWS_AS(enhanced_dist(states, sc, ss, bad, m.backbone.lm_head), std::runtime_error);
}

TEST_CASE("hand-mixed distributions: p=[.6,.4], p_hat=[.2,.8], p_bar=[.5,.5], lambdas 1/3") {
  auto p = Tensor<double>::from({1, 2}, {0.6, 0.4});
  auto ph = Tensor<double>::from({1, 2}, {0.2, 0.8});
  auto pb = Tensor<double>::from({1, 2}, {0.5, 0.5});
  auto pe = mix3(ph, pb, p, 1.0 / 3, 1.0 / 3);
  CHECK(pe.data()[0] == doctest::Approx(0.43333333).epsilon(1e-8));
  CHECK(pe.data()[1] == doctest::Approx(0.56666667).epsilon(1e-8));
}

TEST_CASE("loss formula: perfect model gives 0; uniform over 4 gives ln 4; length-invariant") {
  auto perfect = Tensor<double>::from({3, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1});
  CHECK(sequence_nll(perfect, {0, 1, 3}).item() == 0.0);
  std::vector<double> u(2 * 4, 0.25);
  auto uniform2 = Tensor<double>::from({2, 4}, u);
  CHECK(sequence_nll(uniform2, {1, 2}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  std::vector<double> u5(5 * 4, 0.25);
  auto uniform5 = Tensor<double>::from({5, 4}, u5);
  CHECK(sequence_nll(uniform5, {0, 1, 2, 3, 0}).item() ==
        doctest::Approx(sequence_nll(uniform2, {1, 2}).item()).epsilon(1e-12));
}

TEST_CASE("score equals -(|T|+1) * loss and ranks better sequences higher") {
  auto m = tiny_model<double>(tiny_cfg());
  auto prompts = m.prompts.materialize_all();
  Rng rng(37);
  auto C = rand_tokens(rng, 3, 50), S = rand_tokens(rng, 3, 50), T = rand_tokens(rng, 3, 50);
  double loss = instance_loss(m, prompts, C, S, T).item();
  double sc = score_sequence(m, prompts, C, S, T);
  CHECK(sc == doctest::Approx(-(3 + 1) * loss).epsilon(1e-9));
  double mean_sc = score_sequence(m, prompts, C, S, T, /*mean_per_token=*/true);
  CHECK(mean_sc == doctest::Approx(sc / 4).epsilon(1e-9));
}

TEST_CASE("tiny full-loss gradient check stays under 1e-4 (all trainables)") {
  auto cfg = tiny_cfg(2, 8, 2, 50, 2);
  cfg.init_std = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));  // keep gradients above FD noise
  auto m = tiny_model<double>(cfg, SystemVariant::DeMPT, 41);
  randomize_head_outputs(*m.head, 42, 0.5);  // activate both fuser paths
  Rng rng(43);
  auto C = rand_tokens(rng, 3, 50), S = rand_tokens(rng, 3, 50), T = rand_tokens(rng, 3, 50);
  std::vector<Tensor<double>> params;
  for (auto& p : m.trainable_params()) params.push_back(p.tensor);
  auto loss_fn = [&]() { return instance_loss(m, m.prompts.materialize_all(), C, S, T); };
  CHECK(grad_check<double>(loss_fn, params, 1e-5) < 1e-4);
}

TEST_CASE("incremental decoding reproduces full teacher-forced states (64-bit)") {
  auto m = tiny_model<double>(tiny_cfg(2, 8, 2, 50, 3));
  auto prompts = m.prompts.materialize_all();
  Rng rng(47);
  for (int rep = 0; rep < 5; ++rep) {
    auto C = rand_tokens(rng, 1 + static_cast<int>(rng.uniform(5)), 50);
    auto S = rand_tokens(rng, 1 + static_cast<int>(rng.uniform(4)), 50);
    auto T = rand_tokens(rng, 1 + static_cast<int>(rng.uniform(4)), 50);
    auto full = forward_instance(m, prompts, C, S, T);
    Decoder<double> dec(m);
    dec.start(C, S);
    std::vector<int> input{tokens::kBeginTarget};
    input.insert(input.end(), T.begin(), T.end());
    int d = full.states.cols();
    for (size_t t = 0; t < input.size(); ++t) {
      dec.step(input[t]);
      for (int c = 0; c < d; ++c) {
        double a = dec.last_state()[static_cast<size_t>(c)];
        double b = full.states.data()[t * static_cast<size_t>(d) + c];
        CHECK(std::abs(a - b) < 1e-5);
      }
    }
  }
}

TEST_CASE("baked prompts give the same scores and generations as on-the-fly prompts") {
  auto m = tiny_model<float>(tiny_cfg(2, 8, 2, 50, 2));
  Rng rng(53);
  auto C = rand_tokens(rng, 3, 50), S = rand_tokens(rng, 3, 50), T = rand_tokens(rng, 3, 50);
  auto fresh = eval_prompts(m);
  double s1 = score_sequence(m, fresh, C, S, T);
  auto g1 = generate(m, C, S, {8, 1});
  m.bake();
  auto baked = eval_prompts(m);
  double s2 = score_sequence(m, baked, C, S, T);
  auto g2 = generate(m, C, S, {8, 1});
  CHECK(s1 == s2);  // bit-exact
  CHECK(g1 == g2);
}

TEST_CASE("generation: deterministic greedy, beam(1) == greedy, length cap, bad args") {
  auto m = tiny_model<float>(tiny_cfg(2, 8, 2, 50, 2));
  Rng rng(59);
  auto C = rand_tokens(rng, 4, 50), S = rand_tokens(rng, 4, 50);
  auto a = generate(m, C, S, {12, 1});
  auto b = generate(m, C, S, {12, 1});
  CHECK(a == b);
  auto beam1 = generate(m, C, S, {12, 1});
  auto beam1b = generate(m, C, S, GenerateOptions{12, 1});
  CHECK(beam1 == beam1b);
  auto capped = generate(m, C, S, {2, 1});
  CHECK(capped.size() <= 2);
  auto beam3 = generate(m, C, S, {12, 3});
  CHECK(beam3.size() <= 12);
  CHECK_THROWS_AS(generate(m, C, S, {0, 1}), std::runtime_error);
  CHECK_THROWS_AS(generate(m, C, S, {4, 0}), std::runtime_error);
}

TEST_CASE("w/o-context ablation encodes the sentence twice and ignores the real context") {
  AblationFlags ab;
  ab.no_context = true;
  auto m = tiny_model<double>(tiny_cfg(), SystemVariant::DeMPT, 61, 1.0 / 3, 1.0 / 3, ab);
  auto prompts = m.prompts.materialize_all();
  Rng rng(61);
  auto C1 = rand_tokens(rng, 4, 50);
  auto C2 = rand_tokens(rng, 5, 50);
  auto S = rand_tokens(rng, 3, 50);
  auto T = rand_tokens(rng, 3, 50);
  auto r1 = forward_instance(m, prompts, C1, S, T);
  auto r2 = forward_instance(m, prompts, C2, S, T);
  CHECK(r1.ctx_cache.len == 3);  // |S|, not |C|
  CHECK(same_bits(r1.probs, r2.probs));
}
