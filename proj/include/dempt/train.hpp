#pragma once

// Optimizer, learning-rate schedule, token-based batching, freeze
// enforcement, checkpointing, and the training loops: a brief causal-LM
// warmup that builds the frozen backbone, and the adaptation run that tunes
// only the prompt bank and the enhanced head.

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "dempt/corpus.hpp"
#include "dempt/pipeline.hpp"

namespace dempt {

struct TrainConfig {
  int epochs = 4;
  double warmup_fraction = 0.1;
  double max_lr = 5e-5;
  int batch_tokens = 4096;
  uint64_t seed = 1;
  SystemVariant variant = SystemVariant::DeMPT;
  double lambda1 = 1.0 / 3.0;
  double lambda2 = 1.0 / 3.0;
  int prompt_len = 64;
  int context_budget = 64;
  bool no_transfer = false;
  bool no_type_embedding = false;
  bool no_context = false;
  int threads = 1;
  double grad_clip = 1.0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  AblationFlags ablation() const { return {no_transfer, no_type_embedding, no_context}; }
  void validate() const {
    DEMPT_CHECK(epochs >= 1, "train config: epochs must be >= 1");
    DEMPT_CHECK(warmup_fraction >= 0 && warmup_fraction < 1, "train config: warmup fraction must lie in [0,1)");
    DEMPT_CHECK(batch_tokens > 0, "train config: batch token budget must be positive");
    DEMPT_CHECK(context_budget >= 0, "train config: context budget must be >= 0");
    DEMPT_CHECK(prompt_len > 0, "train config: prompt length must be positive");
    DEMPT_CHECK(lambda1 >= 0 && lambda2 >= 0 && lambda1 + lambda2 <= 1.0 + 1e-12,
                "train config: lambda weights out of range");
    DEMPT_CHECK(threads >= 1, "train config: threads must be >= 1");
  }
};

// Backbone warmup: a short seeded causal-LM pass over the sentence pairs
// (no context, no prompts). The result is frozen before any adaptation.
struct BackbonePretrainConfig {
  int epochs = 2;
  double max_lr = 3e-4;
  int batch_tokens = 4096;
  double warmup_fraction = 0.1;
};

// Linear warmup to max_lr over the first warmup steps, then logarithmic
// decay to exactly 0 at the final step.
double lr_at(int64_t step, int64_t total_steps, double max_lr, double warmup_fraction);

// Decoupled-weight-decay adaptive-moment optimizer over float parameters.
class AdamW {
 public:
  AdamW(std::vector<NamedParam<float>> params, double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (auto& p : params) {
      Slot s;
      s.param = p;
      s.m.assign(static_cast<size_t>(p.tensor.size()), 0.0f);
      s.v.assign(static_cast<size_t>(p.tensor.size()), 0.0f);
      slots_.push_back(std::move(s));
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.tensor.zero_grad();
  }

  // global-norm clip over all parameter gradients; returns the pre-clip norm
  double clip_gradients(double max_norm);

  void step(double lr);

  int64_t step_count() const { return step_count_; }

  struct Slot {
    NamedParam<float> param;
    std::vector<float> m, v;
  };
  std::vector<Slot>& slots() { return slots_; }
  void set_step_count(int64_t n) { step_count_ = n; }

 private:
  std::vector<Slot> slots_;
  int64_t step_count_ = 0;
  double beta1_, beta2_, eps_, weight_decay_;
};

// Token-budget batching: shuffles instance ids, then packs them greedily so
// every batch satisfies sum(|C|+|S|+|T|) <= budget; an oversize instance
// forms its own batch.
std::vector<std::vector<int>> make_batches(const std::vector<int>& token_counts, int budget, Rng& rng);

// ---------------------------------------------------------------------------
// Checkpoints: JSON header (names, shapes, dtype, byte offsets) followed by a
// little-endian raw 32-bit float payload. Save -> load round-trips bit-exact.
// ---------------------------------------------------------------------------

struct ArrayRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  int version = 1;
  ModelConfig model;
  TrainConfig train;
  int64_t step = 0;
  int64_t total_steps = 0;
  std::vector<ArrayRecord> arrays;  // model params, then optimizer moments (opt.m.*, opt.v.*)
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint snapshot(Model<float>& model, AdamW* optimizer, const TrainConfig& cfg, int64_t step,
                    int64_t total_steps);
Model<float> model_from_checkpoint(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

Backbone<float> build_backbone(const ModelConfig& cfg, const BackbonePretrainConfig& pcfg,
                               const std::vector<DocumentPair>& docs, const Vocab& vocab, uint64_t seed,
                               int threads);

struct TrainResult {
  Model<float> model;
  int64_t steps = 0;
  int64_t total_steps = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> losses;  // one per optimizer step
};

struct TrainOptions {
  std::string metrics_path;      // per-step jsonl log when non-empty
  std::string checkpoint_path;   // saved at the end of the run when non-empty
  std::string resume_path;       // checkpoint to resume from
  int64_t stop_after_steps = -1; // early stop for checkpoint/resume tests
  const Backbone<float>* shared_backbone = nullptr;  // reuse a prebuilt frozen backbone
};

TrainResult train_model(const ModelConfig& model_cfg, const TrainConfig& cfg,
                        const BackbonePretrainConfig& pretrain_cfg, const std::vector<DocumentPair>& docs,
                        const Vocab& vocab, const TrainOptions& options = {});

}  // namespace dempt
