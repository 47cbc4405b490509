// Acceptance suite. Runs every criterion at its stated tolerance and prints
// one pass/fail line per criterion; exits nonzero if any fail.
//
//   1 gradient correctness      full-loss grad check, 64-bit, < 1e-4
//   2 distribution soundness    p / p-hat / p-bar / p_e sums; zero-lambda identity
//   3 freeze contract           backbone bit-identical after 100 steps
//   4 phase causality           perturbation suite, exact "unchanged" checks
//   5 incremental equivalence   stepwise decode vs full recompute; baked prompts
//   6 end-to-end reproduction   directional system ordering on synthetic data
//   7 ablation direction        each ablation lowers contrastive accuracy
//   8 metric oracles            BLEU unit values, contrastive oracle/random
//   9 inference overhead        multi-phase decode <= 1.15x single-phase
//
// Criteria 6 and 7 train 7 systems x 3 seeds and dominate the runtime.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "dempt/eval.hpp"
#include "dempt/pipeline.hpp"
#include "dempt/train.hpp"

using namespace dempt;
using Clock = std::chrono::steady_clock;

namespace {

int g_threads = 2;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Criterion {
  int id;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

std::vector<int> rand_tokens(Rng& rng, int n, int vocab) {
  std::vector<int> out;
  for (int i = 0; i < n; ++i)
    out.push_back(tokens::kReservedCount + static_cast<int>(rng.uniform(vocab - tokens::kReservedCount)));
  return out;
}

template <class T>
bool bits_equal(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

template <class T>
bool tensor_bits_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return bits_equal(a.data(), b.data());
}

// ---------------------------------------------------------------------------
// 1. gradient correctness
// ---------------------------------------------------------------------------

Criterion criterion_gradients() {
  Criterion c{1, "gradient-correctness"};
  auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.vocab = 50;
  cfg.prompt_len = 4;
  // fan-in weight scale: at tiny-std random weights some true gradients sit
  // near 1e-9, below what f64 central differences can certify to 1e-4
  cfg.init_std = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  Backbone<double> bb = Backbone<double>::random(cfg, 101, false);
  Model<double> model = Model<double>::assemble(SystemVariant::DeMPT, bb, 102);
  randomize_head_outputs(*model.head, 102, 0.5);  // exercise every fuser path
  Rng rng(103);
  std::vector<int> C = rand_tokens(rng, 5, cfg.vocab);
  std::vector<int> S = rand_tokens(rng, 4, cfg.vocab);
  std::vector<int> T = rand_tokens(rng, 4, cfg.vocab);
  std::vector<Tensor<double>> params;
  int64_t n_params = 0;
  for (auto& p : model.trainable_params()) {
    params.push_back(p.tensor);
    n_params += p.tensor.size();
  }
  auto loss_fn = [&]() { return instance_loss(model, model.prompts.materialize_all(), C, S, T); };
  double err = grad_check<double>(loss_fn, params, 1e-5);
  c.seconds = seconds_since(t0);
  char buf[160];
  snprintf(buf, sizeof buf, "max rel err %.3e over %lld params, %.1fs", err,
           static_cast<long long>(n_params), c.seconds);
  c.detail = buf;
  c.pass = err < 1e-4 && c.seconds < 120.0;
  return c;
}

// ---------------------------------------------------------------------------
// 2. distribution soundness
// ---------------------------------------------------------------------------

Criterion criterion_distributions() {
  Criterion c{2, "distribution-soundness"};
  auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 32;
  cfg.heads = 4;
  cfg.vocab = 211;
  cfg.prompt_len = 4;
  Backbone<float> bb = Backbone<float>::random(cfg, 201, false);
  Model<float> model = Model<float>::assemble(SystemVariant::DeMPT, bb, 202);
  // give the zero-initialized fuser outputs real values for the check
  Rng wrng(203);
  for (auto& p : model.trainable_params())
    if (p.name.rfind("head.", 0) == 0)
      for (auto& x : p.tensor.mutable_data()) x = static_cast<float>(wrng.normal() * 0.1);

  Rng rng(204);
  double worst = 0.0;
  bool zero_identity = true;
  EnhancedHead<float> zero_head = *model.head;
  zero_head.lambda1 = 0;
  zero_head.lambda2 = 0;
  NoGradGuard ng;
  for (int i = 0; i < 1000; ++i) {
    std::vector<float> sv(static_cast<size_t>(cfg.hidden)), c1(sv.size()), c2(sv.size());
    for (auto& x : sv) x = static_cast<float>(rng.normal());
    for (auto& x : c1) x = static_cast<float>(rng.normal());
    for (auto& x : c2) x = static_cast<float>(rng.normal());
    auto states = Tensor<float>::from({1, cfg.hidden}, sv);
    auto sc = Tensor<float>::from({1, cfg.hidden}, c1);
    auto ss = Tensor<float>::from({1, cfg.hidden}, c2);
    auto dist = enhanced_dist(states, sc, ss, *model.head, bb.lm_head);
    for (const Tensor<float>* p : {&dist.base, &dist.ctx_fused, &dist.sent_fused, &dist.mixed}) {
      double sum = 0.0;  // accumulate in double so the check measures the rows, not itself
      for (float v : p->data()) sum += static_cast<double>(v);
      worst = std::max(worst, std::abs(sum - 1.0));
    }
    auto z = enhanced_dist(states, sc, ss, zero_head, bb.lm_head);
    if (!tensor_bits_equal(z.mixed, z.base)) zero_identity = false;
  }
  c.seconds = seconds_since(t0);
  char buf[160];
  snprintf(buf, sizeof buf, "max |row sum - 1| = %.2e over 1000 states, zero-lambda identity %s", worst,
           zero_identity ? "bit-exact" : "BROKEN");
  c.detail = buf;
  c.pass = worst < 1e-6 && zero_identity;
  return c;
}

// ---------------------------------------------------------------------------
// 3. freeze contract
// ---------------------------------------------------------------------------

Criterion criterion_freeze() {
  Criterion c{3, "freeze-contract"};
  auto t0 = Clock::now();
  GeneratorSpec spec;
  spec.train_docs = 4;
  spec.valid_docs = 1;
  spec.test_docs = 2;
  spec.sentences_per_doc = 8;
  spec.plain_words = 15;
  spec.ambiguous_words = 3;
  spec.entities = 2;
  auto corpus = generate_corpus(spec, 301, 1);

  ModelConfig mc;
  mc.layers = 2;
  mc.hidden = 32;
  mc.heads = 2;
  TrainConfig tc;
  tc.epochs = 100;  // 32 instances in one batch -> exactly 100 optimizer steps
  tc.max_lr = 5e-3;
  tc.batch_tokens = 8192;
  tc.seed = 302;
  tc.prompt_len = 4;
  tc.context_budget = 48;
  tc.threads = g_threads;
  BackbonePretrainConfig pc;
  pc.epochs = 0;

  Backbone<float> frozen = build_backbone(mc, pc, corpus.train, corpus.vocab, tc.seed, 1);
  Model<float> init = Model<float>::assemble(tc.variant, frozen, tc.seed, tc.lambda1, tc.lambda2, {});
  std::vector<std::vector<float>> backbone_before, trainable_before;
  for (auto& p : init.backbone_params()) backbone_before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  for (auto& p : init.trainable_params()) trainable_before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());

  TrainOptions options;
  options.shared_backbone = &frozen;
  TrainResult r = train_model(mc, tc, pc, corpus.train, corpus.vocab, options);

  bool backbone_ok = true;
  size_t i = 0;
  for (auto& p : r.model.backbone_params())
    if (!bits_equal<float>(p.tensor.data(), backbone_before[i++])) backbone_ok = false;
  bool moved_ok = true;
  i = 0;
  for (auto& p : r.model.trainable_params())
    if (bits_equal<float>(p.tensor.data(), trainable_before[i++])) moved_ok = false;

  c.seconds = seconds_since(t0);
  char buf[160];
  snprintf(buf, sizeof buf, "%lld steps: backbone %s, every trainable %s", static_cast<long long>(r.steps),
           backbone_ok ? "bit-identical" : "CHANGED", moved_ok ? "changed" : "STUCK");
  c.detail = buf;
  c.pass = backbone_ok && moved_ok && r.steps >= 100;
  return c;
}

// ---------------------------------------------------------------------------
// 4. phase causality
// ---------------------------------------------------------------------------

Criterion criterion_causality() {
  Criterion c{4, "phase-causality"};
  auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.vocab = 60;
  cfg.prompt_len = 3;
  Backbone<double> bb = Backbone<double>::random(cfg, 401, false);
  Model<double> model = Model<double>::assemble(SystemVariant::DeMPT, bb, 402);
  auto prompts = model.prompts.materialize_all();
  Rng rng(403);

  auto cache_equal = [](const PhaseCache<double>& a, const PhaseCache<double>& b) {
    if (a.len != b.len) return false;
    for (size_t l = 0; l < a.keys.size(); ++l)
      if (!tensor_bits_equal(a.keys[l], b.keys[l]) || !tensor_bits_equal(a.values[l], b.values[l]))
        return false;
    return tensor_bits_equal(a.final_hidden, b.final_hidden);
  };
  auto rows_equal = [](const Tensor<double>& a, const Tensor<double>& b, int row) {
    int d = a.cols();
    for (int j = 0; j < d; ++j)
      if (a.data()[static_cast<size_t>(row) * d + j] != b.data()[static_cast<size_t>(row) * d + j])
        return false;
    return true;
  };

  int checked = 0, failures = 0;
  NoGradGuard ng;
  for (int rep = 0; rep < 25; ++rep) {
    int nc = 2 + static_cast<int>(rng.uniform(4));
    int ns = 2 + static_cast<int>(rng.uniform(3));
    int nt = 2 + static_cast<int>(rng.uniform(3));
    auto C = rand_tokens(rng, nc, cfg.vocab);
    auto S = rand_tokens(rng, ns, cfg.vocab);
    auto T = rand_tokens(rng, nt, cfg.vocab);
    auto base = forward_instance(model, prompts, C, S, T);

    auto flip = [&](std::vector<int> v, int j) {
      v[static_cast<size_t>(j)] = v[static_cast<size_t>(j)] == 6 ? 7 : 6;
      return v;
    };

    // C -> phases 2 and 3 change; within phase 1 only positions >= j change
    {
      int j = static_cast<int>(rng.uniform(static_cast<uint64_t>(nc)));
      auto r = forward_instance(model, prompts, flip(C, j), S, T);
      ++checked;
      bool ok = !cache_equal(base.sent_cache, r.sent_cache) && !tensor_bits_equal(base.states, r.states);
      for (int p = 0; p < j; ++p)
        ok = ok && rows_equal(base.ctx_cache.final_hidden, r.ctx_cache.final_hidden, p);
      if (!ok) ++failures;
    }
    // S -> phase 3 changes, phase-1 cache untouched
    {
      int j = static_cast<int>(rng.uniform(static_cast<uint64_t>(ns)));
      auto r = forward_instance(model, prompts, C, flip(S, j), T);
      ++checked;
      bool ok = cache_equal(base.ctx_cache, r.ctx_cache) && !tensor_bits_equal(base.states, r.states);
      if (!ok) ++failures;
    }
    // T -> never backward: caches untouched, states before or at j unchanged
    {
      int j = static_cast<int>(rng.uniform(static_cast<uint64_t>(nt)));
      auto r = forward_instance(model, prompts, C, S, flip(T, j));
      ++checked;
      bool ok = cache_equal(base.ctx_cache, r.ctx_cache) && cache_equal(base.sent_cache, r.sent_cache) &&
                tensor_bits_equal(base.ctx_summary, r.ctx_summary) &&
                tensor_bits_equal(base.sent_summary, r.sent_summary);
      for (int t = 1; t <= j + 1; ++t) ok = ok && rows_equal(base.states, r.states, t - 1);
      for (int t = j + 2; t <= nt + 1; ++t) ok = ok && !rows_equal(base.states, r.states, t - 1);
      if (!ok) ++failures;
    }
  }
  c.seconds = seconds_since(t0);
  char buf[120];
  snprintf(buf, sizeof buf, "%d perturbation checks, %d failures (exact comparisons)", checked, failures);
  c.detail = buf;
  c.pass = failures == 0;
  return c;
}

// ---------------------------------------------------------------------------
// 5. incremental decoding equivalence
// ---------------------------------------------------------------------------

Criterion criterion_incremental() {
  Criterion c{5, "incremental-equivalence"};
  auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.vocab = 60;
  cfg.prompt_len = 3;
  Backbone<double> bb = Backbone<double>::random(cfg, 501, false);
  Model<double> model = Model<double>::assemble(SystemVariant::DeMPT, bb, 502);
  auto prompts = model.prompts.materialize_all();
  Rng rng(503);
  double worst = 0.0;
  NoGradGuard ng;
  for (int rep = 0; rep < 100; ++rep) {
    auto C = rand_tokens(rng, 1 + static_cast<int>(rng.uniform(6)), cfg.vocab);
    auto S = rand_tokens(rng, 1 + static_cast<int>(rng.uniform(5)), cfg.vocab);
    auto T = rand_tokens(rng, 1 + static_cast<int>(rng.uniform(5)), cfg.vocab);
    auto full = forward_instance(model, prompts, C, S, T);
    Decoder<double> dec(model);
    dec.start(C, S);
    std::vector<int> input{tokens::kBeginTarget};
    input.insert(input.end(), T.begin(), T.end());
    int d = full.states.cols();
    for (size_t t = 0; t < input.size(); ++t) {
      dec.step(input[t]);
      for (int j = 0; j < d; ++j)
        worst = std::max(worst,
                         std::abs(dec.last_state()[static_cast<size_t>(j)] -
                                  full.states.data()[t * static_cast<size_t>(d) + j]));
    }
  }

  // baked prompts must match on-the-fly materialization bit-exactly
  ModelConfig fcfg = cfg;
  Backbone<float> fbb = Backbone<float>::random(fcfg, 504, false);
  Model<float> fresh = Model<float>::assemble(SystemVariant::DeMPT, fbb, 505);
  Rng frng(506);
  bool baked_ok = true;
  for (int rep = 0; rep < 20; ++rep) {
    auto C = rand_tokens(frng, 3, fcfg.vocab);
    auto S = rand_tokens(frng, 3, fcfg.vocab);
    Decoder<float> d1(fresh);
    d1.start(C, S);
    auto p1 = d1.step(tokens::kBeginTarget);
    Model<float> baked_model = fresh;
    baked_model.bake();
    Decoder<float> d2(baked_model);
    d2.start(C, S);
    auto p2 = d2.step(tokens::kBeginTarget);
    if (p1 != p2) baked_ok = false;
  }
  c.seconds = seconds_since(t0);
  char buf[160];
  snprintf(buf, sizeof buf, "max |stepwise - recomputed| = %.2e over 100 instances; baked prompts %s", worst,
           baked_ok ? "bit-exact" : "DIFFER");
  c.detail = buf;
  c.pass = worst < 1e-5 && baked_ok;
  return c;
}

// ---------------------------------------------------------------------------
// 6 + 7. end-to-end synthetic reproduction and ablations
// ---------------------------------------------------------------------------

struct SystemScores {
  double ctx_acc = 0;
  double contrastive = 0;
  double bleu_score = 0;
};

SystemScores evaluate_model(Model<float>& model, const SyntheticCorpus& corpus, int context_budget) {
  model.bake();
  Vocab const& vocab = corpus.vocab;
  SentenceTranslator translate = [&](const std::vector<std::string>& context, const std::string& source) {
    std::vector<int> ctx = context_window(context, vocab, context_budget);
    std::vector<int> out = generate(model, ctx, vocab.tokenize(source), GenerateOptions{16, 1});
    return vocab.detokenize(out);
  };
  auto hyps = translate_documents(translate, corpus.test, g_threads);
  std::vector<std::string> flat_hyps, flat_refs;
  for (size_t d = 0; d < corpus.test.size(); ++d)
    for (size_t k = 0; k < corpus.test[d].sentences.size(); ++k) {
      flat_hyps.push_back(hyps[d][k]);
      flat_refs.push_back(corpus.test[d].sentences[k].target);
    }
  CandidateScorer scorer = [&](const ContrastiveInstance& ci, const std::string& cand) {
    std::vector<int> ctx = context_window(ci.context, vocab, context_budget);
    auto prompts = eval_prompts(model);
    return score_sequence(model, prompts, ctx, vocab.tokenize(ci.source), vocab.tokenize(cand));
  };
  SystemScores s;
  s.ctx_acc = context_token_accuracy(corpus.test, hyps, vocab).overall;
  s.contrastive = contrastive_accuracy(scorer, corpus.contrastive, g_threads).overall;
  s.bleu_score = bleu(flat_hyps, flat_refs).score;
  return s;
}

struct EndToEndResult {
  std::map<std::string, SystemScores> mean;  // system tag -> seed-averaged scores
  double seconds = 0;
};

EndToEndResult run_end_to_end(const std::vector<uint64_t>& seeds) {
  auto t0 = Clock::now();
  ModelConfig mc;
  mc.layers = 4;
  mc.hidden = 128;
  mc.heads = 4;

  TrainConfig base;
  base.epochs = 4;
  base.max_lr = 4e-3;
  base.batch_tokens = 2048;
  base.prompt_len = 16;
  base.context_budget = 64;
  base.threads = g_threads;

  BackbonePretrainConfig pc;
  pc.epochs = 2;
  pc.max_lr = 3e-4;
  pc.batch_tokens = 2048;

  struct SystemSpec {
    const char* tag;
    SystemVariant variant;
    AblationFlags ablation;
  };
  std::vector<SystemSpec> systems = {
      {"dempt", SystemVariant::DeMPT, {}},
      {"mpt", SystemVariant::MPT, {}},
      {"cmt-pt", SystemVariant::CMT_PT, {}},
      {"mt-pt", SystemVariant::MT_PT, {}},
      {"dempt-no-transfer", SystemVariant::DeMPT, {true, false, false}},
      {"dempt-no-type-emb", SystemVariant::DeMPT, {false, true, false}},
      {"dempt-no-ctx", SystemVariant::DeMPT, {false, false, true}},
  };

  EndToEndResult result;
  std::map<std::string, SystemScores> sums;
  for (uint64_t seed : seeds) {
    GeneratorSpec spec;  // desk-scale defaults: 2000 train docs x 8 sentences
    SyntheticCorpus corpus = generate_corpus(spec, seed, g_threads);
    Backbone<float> backbone = build_backbone(mc, pc, corpus.train, corpus.vocab, seed, g_threads);
    for (const auto& sys : systems) {
      TrainConfig tc = base;
      tc.seed = seed;
      tc.variant = sys.variant;
      tc.no_transfer = sys.ablation.no_transfer;
      tc.no_type_embedding = sys.ablation.no_type_embedding;
      tc.no_context = sys.ablation.no_context;
      TrainOptions options;
      options.shared_backbone = &backbone;
      TrainResult r = train_model(mc, tc, pc, corpus.train, corpus.vocab, options);
      SystemScores s = evaluate_model(r.model, corpus, tc.context_budget);
      sums[sys.tag].ctx_acc += s.ctx_acc;
      sums[sys.tag].contrastive += s.contrastive;
      sums[sys.tag].bleu_score += s.bleu_score;
      printf("    seed %llu %-18s loss %.3f -> %.3f | ctx-acc %.3f contrastive %.3f bleu %.2f\n",
             static_cast<unsigned long long>(seed), sys.tag, r.first_loss, r.final_loss, s.ctx_acc,
             s.contrastive, s.bleu_score);
      fflush(stdout);
    }
  }
  for (auto& [tag, s] : sums)
    result.mean[tag] = {s.ctx_acc / seeds.size(), s.contrastive / seeds.size(), s.bleu_score / seeds.size()};
  result.seconds = seconds_since(t0);
  return result;
}

std::pair<Criterion, Criterion> criterion_end_to_end() {
  Criterion c6{6, "end-to-end-synthetic"};
  Criterion c7{7, "ablation-direction"};
  EndToEndResult r = run_end_to_end({1, 2, 3});
  const auto& m = r.mean;
  auto get = [&](const char* tag) { return m.at(tag); };

  bool a = get("dempt").ctx_acc >= 0.90 && get("mt-pt").ctx_acc <= 0.60;
  bool b = get("dempt").contrastive > get("mpt").contrastive &&
           get("mpt").contrastive > get("mt-pt").contrastive &&
           get("dempt").contrastive >= get("cmt-pt").contrastive + 0.02;
  bool cc = get("dempt").bleu_score >= get("mpt").bleu_score &&
            get("mpt").bleu_score >= get("cmt-pt").bleu_score;
  char buf[400];
  snprintf(buf, sizeof buf,
           "(a)%s ctx-acc dempt %.3f mt-pt %.3f | (b)%s contrastive dempt %.3f mpt %.3f cmt-pt %.3f "
           "mt-pt %.3f | (c)%s bleu dempt %.2f mpt %.2f cmt-pt %.2f | %.0fs",
           a ? "ok" : "FAIL", get("dempt").ctx_acc, get("mt-pt").ctx_acc, b ? "ok" : "FAIL",
           get("dempt").contrastive, get("mpt").contrastive, get("cmt-pt").contrastive,
           get("mt-pt").contrastive, cc ? "ok" : "FAIL", get("dempt").bleu_score, get("mpt").bleu_score,
           get("cmt-pt").bleu_score, r.seconds);
  c6.detail = buf;
  c6.pass = a && b && cc && r.seconds <= 3600.0;
  c6.seconds = r.seconds;

  double full = get("dempt").contrastive;
  bool t_ok = get("dempt-no-transfer").contrastive < full;
  bool e_ok = get("dempt-no-type-emb").contrastive < full;
  bool x_ok = get("dempt-no-ctx").contrastive < full;
  snprintf(buf, sizeof buf,
           "contrastive: full %.3f > w/o-transfer %.3f(%s) , w/o-type-emb %.3f(%s) , w/o-ctx %.3f(%s)",
           full, get("dempt-no-transfer").contrastive, t_ok ? "ok" : "FAIL",
           get("dempt-no-type-emb").contrastive, e_ok ? "ok" : "FAIL", get("dempt-no-ctx").contrastive,
           x_ok ? "ok" : "FAIL");
  c7.detail = buf;
  c7.pass = t_ok && e_ok && x_ok;
  return {c6, c7};
}

// ---------------------------------------------------------------------------
// 8. metric oracles
// ---------------------------------------------------------------------------

Criterion criterion_metrics() {
  Criterion c{8, "metric-oracles"};
  auto t0 = Clock::now();
  bool ok = true;
  std::string why;

  std::vector<std::string> refs{"w1 w2 w3 w4", "w5 w6 w7"};
  if (std::abs(bleu(refs, refs).score - 100.0) > 0.01) {
    ok = false;
    why += "identity!=100 ";
  }
  BleuResult bp = bleu({"a b"}, {"a b c d"});
  if (std::abs(bp.brevity_penalty - std::exp(-1.0)) > 1e-4 || std::abs(bp.score - 21.8744) > 0.01) {
    ok = false;
    why += "brevity-penalty ";
  }
  if (std::abs(bleu({"the the"}, {"the cat"}).precisions[0] - 0.5) > 1e-9) {
    ok = false;
    why += "clipping ";
  }

  std::vector<ContrastiveInstance> set;
  int m = 3;
  for (int i = 0; i < 10000; ++i) {
    ContrastiveInstance ci;
    ci.positive = "p" + std::to_string(i);
    for (int j = 0; j < m; ++j) ci.negatives.push_back("n" + std::to_string(i) + "_" + std::to_string(j));
    ci.phenomenon = "lexical-consistency";
    set.push_back(ci);
  }
  CandidateScorer oracle = [](const ContrastiveInstance& ci, const std::string& cand) {
    return cand == ci.positive ? 1.0 : 0.0;
  };
  if (contrastive_accuracy(oracle, set, g_threads).overall != 1.0) {
    ok = false;
    why += "oracle!=1 ";
  }
  CandidateScorer random_scorer = [](const ContrastiveInstance&, const std::string& cand) {
    Rng rng(mix_seed(0xacc8, std::hash<std::string>{}(cand)));
    return rng.uniform_real();
  };
  double acc = contrastive_accuracy(random_scorer, set, g_threads).overall;
  if (std::abs(acc - 0.25) > 0.03) {
    ok = false;
    why += "random-scorer ";
  }

  c.seconds = seconds_since(t0);
  char buf[200];
  snprintf(buf, sizeof buf, "bleu values pinned, oracle 1.0, random scorer %.4f vs 0.25 %s", acc,
           why.empty() ? "" : ("| failed: " + why).c_str());
  c.detail = buf;
  c.pass = ok;
  return c;
}

// ---------------------------------------------------------------------------
// 9. relative inference overhead
// ---------------------------------------------------------------------------

Criterion criterion_overhead() {
  Criterion c{9, "inference-overhead"};
  auto t0 = Clock::now();
  // decode-dominated regime, mirroring the deep-model beam decoding the
  // reference speeds were reported in: prefill is amortized, the per-step
  // head overhead is small against 32 layers
  ModelConfig mc;
  mc.layers = 32;
  mc.hidden = 32;
  mc.heads = 2;
  mc.prompt_len = 8;
  GeneratorSpec spec;
  spec.train_docs = 1;
  spec.valid_docs = 1;
  spec.test_docs = 12;
  spec.sentences_per_doc = 4;
  spec.plain_words = 40;
  spec.min_plain_per_sentence = 24;
  spec.max_plain_per_sentence = 30;
  SyntheticCorpus corpus = generate_corpus(spec, 901, 1);
  mc.vocab = corpus.vocab.size();
  int budget = 16;
  int beam = 4;

  Backbone<float> bb = Backbone<float>::random(mc, 902, false);
  Model<float> dempt = Model<float>::assemble(SystemVariant::DeMPT, bb, 903);
  dempt.bake();
  Model<float> mtpt = Model<float>::assemble(SystemVariant::MT_PT, bb, 904);
  mtpt.bake();

  struct Job {
    std::vector<int> ctx, src;
    int max_len;
  };
  std::vector<Job> jobs;
  for (const auto& doc : corpus.test) {
    std::vector<std::string> prev;
    for (const auto& s : doc.sentences) {
      Job j;
      j.ctx = context_window(prev, corpus.vocab, budget);
      j.src = corpus.vocab.tokenize(s.source);
      j.max_len = static_cast<int>(j.src.size()) + 2;
      jobs.push_back(std::move(j));
      prev.push_back(s.source);
    }
  }
  auto time_system = [&](Model<float>& model) {
    double best = 1e300;
    for (int rep = 0; rep < 3; ++rep) {
      auto s0 = Clock::now();
      for (const auto& j : jobs) {
        volatile size_t sink = generate(model, j.ctx, j.src, GenerateOptions{j.max_len, beam}).size();
        (void)sink;
      }
      best = std::min(best, seconds_since(s0));
    }
    return best / static_cast<double>(jobs.size());
  };
  double t_mtpt = time_system(mtpt);
  double t_dempt = time_system(dempt);
  double ratio = t_dempt / t_mtpt;
  c.seconds = seconds_since(t0);
  char buf[200];
  snprintf(buf, sizeof buf, "per-sentence decode: dempt %.2f ms vs mt-pt %.2f ms, ratio %.3f (limit 1.15)",
           1e3 * t_dempt, 1e3 * t_mtpt, ratio);
  c.detail = buf;
  c.pass = ratio <= 1.15;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  g_threads = std::max(1u, std::thread::hardware_concurrency());
  bool only[10] = {};
  bool have_only = false;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--threads") == 0 && i + 1 < argc) {
      g_threads = std::max(1, atoi(argv[++i]));
    } else if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      int id = atoi(argv[++i]);
      if (id >= 1 && id <= 9) {
        only[id] = true;
        have_only = true;
      }
    } else {
      fprintf(stderr, "usage: acceptance [--threads N] [--only K]...\n");
      return 2;
    }
  }
  auto wanted = [&](int id) { return !have_only || only[id]; };

  std::vector<Criterion> results;
  if (wanted(1)) results.push_back(criterion_gradients());
  if (wanted(2)) results.push_back(criterion_distributions());
  if (wanted(3)) results.push_back(criterion_freeze());
  if (wanted(4)) results.push_back(criterion_causality());
  if (wanted(5)) results.push_back(criterion_incremental());
  if (wanted(6) || wanted(7)) {
    auto [c6, c7] = criterion_end_to_end();
    if (wanted(6)) results.push_back(c6);
    if (wanted(7)) results.push_back(c7);
  }
  if (wanted(8)) results.push_back(criterion_metrics());
  if (wanted(9)) results.push_back(criterion_overhead());

  std::sort(results.begin(), results.end(), [](const Criterion& a, const Criterion& b) { return a.id < b.id; });
  bool all_pass = true;
  printf("\n");
  for (const auto& r : results) {
    printf("[%d/9] %-24s %s  %s\n", r.id, r.name.c_str(), r.pass ? "PASS" : "FAIL", r.detail.c_str());
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 1;
}
