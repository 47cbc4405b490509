#include "dempt/config.hpp"

#include <fstream>

#include "json.hpp"

namespace dempt {

using json = nlohmann::ordered_json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& what) {
  DEMPT_CHECK(j.is_object(), what + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys)
      if (it.key() == k) known = true;
    DEMPT_CHECK(known, what + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace

RunConfig default_run_config() { return RunConfig{}; }

RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path);
  DEMPT_CHECK(in.good(), "cannot open config file '" + path + "'");
  json j = json::parse(in);
  reject_unknown(j, {"model", "backbone", "train", "data_dir", "out_dir"}, "config");
  RunConfig cfg;
  if (j.count("model")) {
    const json& m = j["model"];
    reject_unknown(m, {"layers", "hidden", "heads", "ffn_mult", "init_std"}, "config.model");
    if (m.count("layers")) cfg.model.layers = m["layers"].get<int>();
    if (m.count("hidden")) cfg.model.hidden = m["hidden"].get<int>();
    if (m.count("heads")) cfg.model.heads = m["heads"].get<int>();
    if (m.count("ffn_mult")) cfg.model.ffn_mult = m["ffn_mult"].get<int>();
    if (m.count("init_std")) cfg.model.init_std = m["init_std"].get<double>();
  }
  if (j.count("backbone")) {
    const json& b = j["backbone"];
    reject_unknown(b, {"pretrain_epochs", "max_lr", "batch_tokens", "warmup_fraction"}, "config.backbone");
    if (b.count("pretrain_epochs")) cfg.backbone.epochs = b["pretrain_epochs"].get<int>();
    if (b.count("max_lr")) cfg.backbone.max_lr = b["max_lr"].get<double>();
    if (b.count("batch_tokens")) cfg.backbone.batch_tokens = b["batch_tokens"].get<int>();
    if (b.count("warmup_fraction")) cfg.backbone.warmup_fraction = b["warmup_fraction"].get<double>();
  }
  if (j.count("train")) {
    const json& t = j["train"];
    reject_unknown(t,
                   {"epochs", "warmup_fraction", "max_lr", "batch_tokens", "seed", "variant", "lambda1",
                    "lambda2", "prompt_len", "context_budget", "no_transfer", "no_type_embedding",
                    "no_context", "threads", "grad_clip", "weight_decay"},
                   "config.train");
    TrainConfig& c = cfg.train;
    if (t.count("epochs")) c.epochs = t["epochs"].get<int>();
    if (t.count("warmup_fraction")) c.warmup_fraction = t["warmup_fraction"].get<double>();
    if (t.count("max_lr")) c.max_lr = t["max_lr"].get<double>();
    if (t.count("batch_tokens")) c.batch_tokens = t["batch_tokens"].get<int>();
    if (t.count("seed")) c.seed = t["seed"].get<uint64_t>();
    if (t.count("variant")) c.variant = variant_from_name(t["variant"].get<std::string>());
    if (t.count("lambda1")) c.lambda1 = t["lambda1"].get<double>();
    if (t.count("lambda2")) c.lambda2 = t["lambda2"].get<double>();
    if (t.count("prompt_len")) c.prompt_len = t["prompt_len"].get<int>();
    if (t.count("context_budget")) c.context_budget = t["context_budget"].get<int>();
    if (t.count("no_transfer")) c.no_transfer = t["no_transfer"].get<bool>();
    if (t.count("no_type_embedding")) c.no_type_embedding = t["no_type_embedding"].get<bool>();
    if (t.count("no_context")) c.no_context = t["no_context"].get<bool>();
    if (t.count("threads")) c.threads = t["threads"].get<int>();
    if (t.count("grad_clip")) c.grad_clip = t["grad_clip"].get<double>();
    if (t.count("weight_decay")) c.weight_decay = t["weight_decay"].get<double>();
  }
  if (j.count("data_dir")) cfg.data_dir = j["data_dir"].get<std::string>();
  if (j.count("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
  cfg.train.validate();
  return cfg;
}

}  // namespace dempt
