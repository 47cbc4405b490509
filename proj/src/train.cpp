#include "dempt/train.hpp"

#include <cmath>
#include <condition_variable>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include "json.hpp"

namespace dempt {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

double lr_at(int64_t step, int64_t total_steps, double max_lr, double warmup_fraction) {
  DEMPT_CHECK(total_steps >= 1, "lr schedule: total steps must be >= 1");
  DEMPT_CHECK(step >= 0 && step <= total_steps,
              "lr schedule: step " + std::to_string(step) + " beyond schedule end " + std::to_string(total_steps));
  int64_t warmup = llround(warmup_fraction * static_cast<double>(total_steps));
  if (step <= warmup && warmup > 0)
    return max_lr * static_cast<double>(step) / static_cast<double>(warmup);
  double num = std::log(static_cast<double>(step - warmup) + 1.0);
  double den = std::log(static_cast<double>(total_steps - warmup) + 1.0);
  return max_lr * (1.0 - num / den);
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

double AdamW::clip_gradients(double max_norm) {
  double sq = 0.0;
  for (auto& s : slots_)
    for (float g : s.param.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    float k = static_cast<float>(max_norm / norm);
    for (auto& s : slots_)
      for (float& g : s.param.tensor.mutable_grad()) g *= k;
  }
  return norm;
}

void AdamW::step(double lr) {
  step_count_ += 1;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (auto& s : slots_) {
    auto vals = s.param.tensor.mutable_data();
    auto grads = s.param.tensor.grad();
    float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
    float wd = s.param.decay ? static_cast<float>(weight_decay_) : 0.0f;
    for (size_t i = 0; i < vals.size(); ++i) {
      float g = grads[i];
      s.m[i] = b1 * s.m[i] + (1.0f - b1) * g;
      s.v[i] = b2 * s.v[i] + (1.0f - b2) * g * g;
      double mhat = static_cast<double>(s.m[i]) / bc1;
      double vhat = static_cast<double>(s.v[i]) / bc2;
      double update = mhat / (std::sqrt(vhat) + eps_) + static_cast<double>(wd) * vals[i];
      vals[i] -= static_cast<float>(lr * update);
    }
  }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

std::vector<std::vector<int>> make_batches(const std::vector<int>& token_counts, int budget, Rng& rng) {
  std::vector<int> order(token_counts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  std::vector<int> cur;
  int cur_tokens = 0;
  for (int id : order) {
    int t = token_counts[static_cast<size_t>(id)];
    if (!cur.empty() && cur_tokens + t > budget) {
      batches.push_back(cur);
      cur.clear();
      cur_tokens = 0;
    }
    cur.push_back(id);
    cur_tokens += t;
    if (cur_tokens > budget) {  // oversize singleton
      batches.push_back(cur);
      cur.clear();
      cur_tokens = 0;
    }
  }
  if (!cur.empty()) batches.push_back(cur);
  return batches;
}

// ---------------------------------------------------------------------------
// Batch processing with ordered gradient commits
// ---------------------------------------------------------------------------

namespace {

// One trainable binding: a loss closure over an instance plus the leaf
// tensors its gradients land in. Replica bindings own copies of the leaves;
// commits add replica gradients into the master in instance order, so any
// thread count reproduces the sequential result bit for bit.
struct Binding {
  std::function<Tensor<float>(const TrainingInstance&)> loss;
  std::vector<Tensor<float>> leaves;
  bool drained = true;
};

void copy_values(const std::vector<Tensor<float>>& from, std::vector<Tensor<float>>& to) {
  for (size_t i = 0; i < from.size(); ++i)
    std::copy(from[i].data().begin(), from[i].data().end(), to[i].mutable_data().begin());
}

double process_batch(const std::vector<const TrainingInstance*>& batch, Binding& master,
                     std::vector<Binding>& bindings, int64_t step_for_diagnostics) {
  const int n = static_cast<int>(batch.size());
  const int n_workers = static_cast<int>(bindings.size() / 2);
  const float seed = 1.0f / static_cast<float>(n);
  std::vector<double> losses(static_cast<size_t>(n), 0.0);

  auto check_finite = [&](double v, int idx) {
    DEMPT_CHECK(std::isfinite(v), "NaN/Inf loss at step " + std::to_string(step_for_diagnostics) +
                                      ", instance " + std::to_string(idx) + " of the batch; aborting");
  };

  // Each worker ping-pongs between two replica bindings. Finished bindings
  // are drained into the master strictly in instance order, so the
  // accumulated sums are bit-identical for any worker count. A worker only
  // blocks when its other binding has not been drained yet, which keeps the
  // commit chain at most two instances per worker behind the compute.
  for (auto& b : bindings) {
    copy_values(master.leaves, b.leaves);
    b.drained = true;
  }
  std::mutex mu;
  std::condition_variable cv;
  std::map<int, Binding*> ready;
  int next_commit = 0;
  std::string error;
  auto drain_locked = [&] {
    for (auto it = ready.find(next_commit); it != ready.end(); it = ready.find(next_commit)) {
      Binding* b = it->second;
      for (size_t j = 0; j < master.leaves.size(); ++j) {
        auto dst = master.leaves[j].mutable_grad();
        auto src = b->leaves[j].grad();
        for (size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
      b->drained = true;
      ready.erase(it);
      next_commit += 1;
    }
  };
  auto run_worker = [&](int wi) {
    int round = 0;
    for (int i = wi; i < n; i += n_workers, ++round) {
      Binding& b = bindings[static_cast<size_t>(2 * wi + (round & 1))];
      try {
        {
          std::unique_lock<std::mutex> lk(mu);
          cv.wait(lk, [&] { return b.drained || !error.empty(); });
          if (!error.empty()) return;
        }
        for (auto& t : b.leaves) t.zero_grad();
        Tensor<float> loss = b.loss(*batch[static_cast<size_t>(i)]);
        double v = static_cast<double>(loss.item());
        check_finite(v, i);
        loss.backward(seed);
        std::unique_lock<std::mutex> lk(mu);
        losses[static_cast<size_t>(i)] = v;
        b.drained = false;
        ready.emplace(i, &b);
        drain_locked();
        cv.notify_all();
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lk(mu);
        if (error.empty()) error = e.what();
        cv.notify_all();
        return;
      }
    }
  };
  if (n_workers <= 1) {
    run_worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int wi = 0; wi < n_workers; ++wi) pool.emplace_back(run_worker, wi);
    for (auto& th : pool) th.join();
  }
  DEMPT_CHECK(error.empty(), error);
  DEMPT_CHECK(next_commit == n, "internal: batch commit incomplete");

  double total = 0.0;
  for (double v : losses) total += v;
  return total / static_cast<double>(n);
}

std::vector<std::vector<std::vector<int>>> plan_epochs(const std::vector<int>& token_counts, int budget,
                                                       int epochs, uint64_t seed) {
  std::vector<std::vector<std::vector<int>>> out;
  for (int e = 0; e < epochs; ++e) {
    Rng rng(mix_seed(seed, 0xba7c4e5ULL + static_cast<uint64_t>(e)));
    out.push_back(make_batches(token_counts, budget, rng));
  }
  return out;
}

Backbone<float> clone_trainable(const Backbone<float>& bb) {
  Backbone<float> out;
  out.cfg = bb.cfg;
  auto cp = [](const Tensor<float>& t) {
    return Tensor<float>::param(t.shape(), {t.data().begin(), t.data().end()});
  };
  out.embedding = cp(bb.embedding);
  for (const auto& b : bb.blocks) {
    BlockWeights<float> w;
    w.attn_norm_gain = cp(b.attn_norm_gain);
    w.wq = cp(b.wq);
    w.wk = cp(b.wk);
    w.wv = cp(b.wv);
    w.wo = cp(b.wo);
    w.ffn_norm_gain = cp(b.ffn_norm_gain);
    w.ffn_in = cp(b.ffn_in);
    w.ffn_out = cp(b.ffn_out);
    out.blocks.push_back(std::move(w));
  }
  out.final_norm_gain = cp(bb.final_norm_gain);
  out.lm_head = cp(bb.lm_head);
  return out;
}

Backbone<float> freeze(const Backbone<float>& bb) {
  Backbone<float> out;
  out.cfg = bb.cfg;
  auto cp = [](const Tensor<float>& t) {
    return Tensor<float>::from(t.shape(), {t.data().begin(), t.data().end()});
  };
  out.embedding = cp(bb.embedding);
  for (const auto& b : bb.blocks) {
    BlockWeights<float> w;
    w.attn_norm_gain = cp(b.attn_norm_gain);
    w.wq = cp(b.wq);
    w.wk = cp(b.wk);
    w.wv = cp(b.wv);
    w.wo = cp(b.wo);
    w.ffn_norm_gain = cp(b.ffn_norm_gain);
    w.ffn_in = cp(b.ffn_in);
    w.ffn_out = cp(b.ffn_out);
    out.blocks.push_back(std::move(w));
  }
  out.final_norm_gain = cp(bb.final_norm_gain);
  out.lm_head = cp(bb.lm_head);
  return out;
}

// Causal-LM loss over [S; BOT; T] with no prompts; predicts T plus the end
// marker.
Tensor<float> sentence_lm_loss(const Backbone<float>& bb, const TrainingInstance& inst) {
  std::vector<int> seq(inst.source.begin(), inst.source.end());
  int prefix = static_cast<int>(seq.size());
  seq.push_back(tokens::kBeginTarget);
  seq.insert(seq.end(), inst.target.begin(), inst.target.end());
  PhaseCache<float> cache = encode_phase(bb, nullptr, seq, nullptr, 0);
  Tensor<float> states = slice_rows(cache.final_hidden, prefix, static_cast<int>(seq.size()));
  Tensor<float> probs = base_dist(states, bb.lm_head);
  std::vector<int> targets(inst.target.begin(), inst.target.end());
  targets.push_back(tokens::kEndOfSequence);
  return scale(mean_all(log_gather(probs, targets, static_cast<float>(kLogProbFloor))), -1.0f);
}

std::vector<Tensor<float>> binding_leaves(std::vector<NamedParam<float>> params) {
  std::vector<Tensor<float>> out;
  for (auto& p : params) out.push_back(p.tensor);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Backbone warmup
// ---------------------------------------------------------------------------

Backbone<float> build_backbone(const ModelConfig& cfg_in, const BackbonePretrainConfig& pcfg,
                               const std::vector<DocumentPair>& docs, const Vocab& vocab, uint64_t seed,
                               int threads) {
  ModelConfig cfg = cfg_in;
  cfg.vocab = vocab.size();
  Backbone<float> bb = Backbone<float>::random(cfg, mix_seed(seed, 0xb0d1), /*trainable=*/pcfg.epochs > 0);
  if (pcfg.epochs <= 0) return freeze(bb);

  std::vector<TrainingInstance> instances;
  for (const auto& d : docs) {
    std::vector<TrainingInstance> insts = build_instances(d, vocab, 0);
    instances.insert(instances.end(), insts.begin(), insts.end());
  }
  std::vector<int> token_counts;
  for (const auto& i : instances)
    token_counts.push_back(static_cast<int>(i.source.size() + i.target.size()) + 2);
  auto epochs = plan_epochs(token_counts, pcfg.batch_tokens, pcfg.epochs, mix_seed(seed, 0xb0d2));
  int64_t total_steps = 0;
  for (const auto& e : epochs) total_steps += static_cast<int64_t>(e.size());

  AdamW opt(backbone_named_params(bb), 0.9, 0.999, 1e-8, 0.01);

  Binding master;
  master.leaves = binding_leaves(backbone_named_params(bb));
  master.loss = [&bb](const TrainingInstance& inst) { return sentence_lm_loss(bb, inst); };
  std::vector<Binding> bindings;
  std::vector<Backbone<float>> worker_bb;
  worker_bb.reserve(static_cast<size_t>(2 * threads));
  for (int t = 0; t < 2 * threads; ++t) worker_bb.push_back(clone_trainable(bb));
  for (int t = 0; t < 2 * threads; ++t) {
    Binding w;
    w.leaves = binding_leaves(backbone_named_params(worker_bb[static_cast<size_t>(t)]));
    Backbone<float>* wb = &worker_bb[static_cast<size_t>(t)];
    w.loss = [wb](const TrainingInstance& inst) { return sentence_lm_loss(*wb, inst); };
    bindings.push_back(std::move(w));
  }

  int64_t step = 0;
  for (const auto& epoch : epochs) {
    for (const auto& batch_ids : epoch) {
      std::vector<const TrainingInstance*> batch;
      for (int id : batch_ids) batch.push_back(&instances[static_cast<size_t>(id)]);
      opt.zero_grad();
      process_batch(batch, master, bindings, step);
      opt.clip_gradients(1.0);
      opt.step(lr_at(step + 1, total_steps, pcfg.max_lr, pcfg.warmup_fraction));
      ++step;
    }
  }
  return freeze(bb);
}

// ---------------------------------------------------------------------------
// Adaptation training
// ---------------------------------------------------------------------------

TrainResult train_model(const ModelConfig& model_cfg_in, const TrainConfig& cfg,
                        const BackbonePretrainConfig& pretrain_cfg, const std::vector<DocumentPair>& docs,
                        const Vocab& vocab, const TrainOptions& options) {
  cfg.validate();
  ModelConfig model_cfg = model_cfg_in;
  model_cfg.vocab = vocab.size();
  model_cfg.prompt_len = cfg.prompt_len;
  model_cfg.validate();

  // resume path carries the backbone; otherwise reuse a shared one or build it
  Backbone<float> backbone;
  if (!options.resume_path.empty()) {
    backbone = Backbone<float>::random(model_cfg, 0, false);
  } else if (options.shared_backbone) {
    DEMPT_CHECK(options.shared_backbone->cfg.vocab == model_cfg.vocab &&
                    options.shared_backbone->cfg.layers == model_cfg.layers &&
                    options.shared_backbone->cfg.hidden == model_cfg.hidden,
                "shared backbone does not match the model config");
    backbone = *options.shared_backbone;
    backbone.cfg.prompt_len = model_cfg.prompt_len;
  } else {
    Backbone<float> built = build_backbone(model_cfg, pretrain_cfg, docs, vocab, cfg.seed, cfg.threads);
    backbone = built;
  }

  Model<float> model = Model<float>::assemble(cfg.variant, backbone, cfg.seed, cfg.lambda1, cfg.lambda2,
                                              cfg.ablation());

  std::vector<TrainingInstance> instances;
  for (const auto& d : docs) {
    std::vector<TrainingInstance> insts = build_instances(d, vocab, cfg.context_budget);
    instances.insert(instances.end(), insts.begin(), insts.end());
  }
  DEMPT_CHECK(!instances.empty(), "training corpus is empty");
  std::vector<int> token_counts;
  for (const auto& i : instances) token_counts.push_back(i.token_count());
  auto epochs = plan_epochs(token_counts, cfg.batch_tokens, cfg.epochs, cfg.seed);
  int64_t total_steps = 0;
  for (const auto& e : epochs) total_steps += static_cast<int64_t>(e.size());

  AdamW opt(model.trainable_params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);

  int64_t start_step = 0;
  if (!options.resume_path.empty()) {
    Checkpoint ckpt = load_checkpoint(options.resume_path);
    DEMPT_CHECK(ckpt.train.variant == cfg.variant && ckpt.train.seed == cfg.seed &&
                    ckpt.train.prompt_len == cfg.prompt_len && ckpt.train.epochs == cfg.epochs &&
                    ckpt.train.batch_tokens == cfg.batch_tokens,
                "resume checkpoint was produced by an incompatible run configuration");
    DEMPT_CHECK(ckpt.total_steps == total_steps, "resume checkpoint disagrees on total step count");
    std::map<std::string, const ArrayRecord*> by_name;
    for (const auto& a : ckpt.arrays) by_name[a.name] = &a;
    for (auto& p : model.all_params()) {
      auto it = by_name.find(p.name);
      DEMPT_CHECK(it != by_name.end(), "resume checkpoint is missing array '" + p.name + "'");
      DEMPT_CHECK(it->second->shape == p.tensor.shape(), "resume checkpoint shape mismatch at '" + p.name + "'");
      std::copy(it->second->data.begin(), it->second->data.end(), p.tensor.mutable_data().begin());
    }
    for (auto& s : opt.slots()) {
      auto im = by_name.find("opt.m." + s.param.name);
      auto iv = by_name.find("opt.v." + s.param.name);
      DEMPT_CHECK(im != by_name.end() && iv != by_name.end(),
                  "resume checkpoint is missing optimizer state for '" + s.param.name + "'");
      s.m = im->second->data;
      s.v = iv->second->data;
    }
    opt.set_step_count(ckpt.step);
    start_step = ckpt.step;
  }

  // staged prompt leaves: instances accumulate into these, one transfer-layer
  // backward per batch pushes the sums through to the raw prompts
  std::vector<Tensor<float>> staged;
  for (int r = 0; r < model.prompts.phase_count; ++r)
    staged.push_back(Tensor<float>::param({model.prompts.layers * 2 * model.prompts.prompt_len,
                                           model.prompts.hidden}));

  auto head_leaves = [](Model<float>& m) {
    std::vector<Tensor<float>> out;
    if (m.head) {
      out = {m.head->ctx_in_w,  m.head->ctx_in_b,  m.head->ctx_out_w,  m.head->ctx_out_b,
             m.head->sent_in_w, m.head->sent_in_b, m.head->sent_out_w, m.head->sent_out_b};
    }
    return out;
  };

  Binding master;
  master.leaves = staged;
  for (auto& t : head_leaves(model)) master.leaves.push_back(t);
  master.loss = [&model, &staged](const TrainingInstance& inst) {
    return instance_loss(model, staged, inst.context, inst.source, inst.target);
  };

  std::vector<Binding> bindings;
  std::vector<Model<float>> worker_models;
  std::vector<std::vector<Tensor<float>>> worker_staged;
  {
    int n_bindings = 2 * cfg.threads;
    worker_models.reserve(static_cast<size_t>(n_bindings));
    worker_staged.reserve(static_cast<size_t>(n_bindings));
    for (int t = 0; t < n_bindings; ++t) {
      Model<float> wm = model;  // shares the frozen backbone
      if (wm.head) {
        EnhancedHead<float> h = *wm.head;
        auto cp = [](const Tensor<float>& x) {
          return Tensor<float>::param(x.shape(), {x.data().begin(), x.data().end()});
        };
        h.ctx_in_w = cp(h.ctx_in_w);
        h.ctx_in_b = cp(h.ctx_in_b);
        h.ctx_out_w = cp(h.ctx_out_w);
        h.ctx_out_b = cp(h.ctx_out_b);
        h.sent_in_w = cp(h.sent_in_w);
        h.sent_in_b = cp(h.sent_in_b);
        h.sent_out_w = cp(h.sent_out_w);
        h.sent_out_b = cp(h.sent_out_b);
        wm.head = h;
      }
      std::vector<Tensor<float>> ws;
      for (auto& s : staged) ws.push_back(Tensor<float>::param(s.shape()));
      worker_models.push_back(std::move(wm));
      worker_staged.push_back(std::move(ws));
    }
    for (int t = 0; t < n_bindings; ++t) {
      Binding w;
      w.leaves = worker_staged[static_cast<size_t>(t)];
      for (auto& h : head_leaves(worker_models[static_cast<size_t>(t)])) w.leaves.push_back(h);
      Model<float>* wm = &worker_models[static_cast<size_t>(t)];
      std::vector<Tensor<float>>* wsp = &worker_staged[static_cast<size_t>(t)];
      w.loss = [wm, wsp](const TrainingInstance& inst) {
        return instance_loss(*wm, *wsp, inst.context, inst.source, inst.target);
      };
      bindings.push_back(std::move(w));
    }
  }

  std::ofstream metrics;
  if (!options.metrics_path.empty()) {
    metrics.open(options.metrics_path, start_step > 0 ? std::ios::app : std::ios::trunc);
    DEMPT_CHECK(metrics.good(), "cannot open metrics log '" + options.metrics_path + "'");
  }

  TrainResult result;
  result.total_steps = total_steps;
  int64_t step = 0;
  bool stopped = false;
  for (const auto& epoch : epochs) {
    if (stopped) break;
    for (const auto& batch_ids : epoch) {
      if (options.stop_after_steps >= 0 && step >= options.stop_after_steps) {
        stopped = true;
        break;
      }
      if (step < start_step) {  // fast-forward when resuming
        ++step;
        continue;
      }
      std::vector<const TrainingInstance*> batch;
      for (int id : batch_ids) batch.push_back(&instances[static_cast<size_t>(id)]);

      opt.zero_grad();
      // re-materialize prompts and stage their values for this batch
      std::vector<Tensor<float>> mat = model.prompts.materialize_all();
      for (size_t r = 0; r < staged.size(); ++r) {
        std::copy(mat[r].data().begin(), mat[r].data().end(), staged[r].mutable_data().begin());
        staged[r].zero_grad();
      }
      for (auto& h : head_leaves(model)) h.zero_grad();

      double batch_loss = process_batch(batch, master, bindings, step);

      // push the accumulated prompt gradients through the transfer layer
      for (size_t r = 0; r < staged.size(); ++r) {
        auto& node = mat[r].node();
        node->ensure_grad();
        auto src = staged[r].grad();
        std::copy(src.begin(), src.end(), node->grad.begin());
      }
      Tensor<float>::backward_seeded(mat);

      opt.clip_gradients(cfg.grad_clip);
      double lr = lr_at(step + 1, total_steps, cfg.max_lr, cfg.warmup_fraction);
      opt.step(lr);

      if (result.losses.empty()) result.first_loss = batch_loss;
      result.losses.push_back(batch_loss);
      result.final_loss = batch_loss;
      if (metrics.is_open()) {
        json rec;
        rec["step"] = step;
        rec["lr"] = lr;
        rec["loss"] = batch_loss;
        metrics << rec.dump() << '\n';
      }
      ++step;
    }
  }
  result.steps = step;
  result.model = std::move(model);

  if (!options.checkpoint_path.empty()) {
    Checkpoint ckpt = snapshot(result.model, &opt, cfg, step, total_steps);
    ckpt.model = model_cfg;
    save_checkpoint(ckpt, options.checkpoint_path);
  }
  return result;
}

}  // namespace dempt
