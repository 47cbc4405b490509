#include <cstring>
#include <fstream>

#include "dempt/train.hpp"
#include "json.hpp"

namespace dempt {

using json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'D', 'E', 'M', 'P', 'T', 'C', 'K', '\n'};
constexpr int kVersion = 1;

json train_to_json(const TrainConfig& c) {
  json t;
  t["epochs"] = c.epochs;
  t["warmup_fraction"] = c.warmup_fraction;
  t["max_lr"] = c.max_lr;
  t["batch_tokens"] = c.batch_tokens;
  t["seed"] = c.seed;
  t["variant"] = variant_name(c.variant);
  t["lambda1"] = c.lambda1;
  t["lambda2"] = c.lambda2;
  t["prompt_len"] = c.prompt_len;
  t["context_budget"] = c.context_budget;
  t["no_transfer"] = c.no_transfer;
  t["no_type_embedding"] = c.no_type_embedding;
  t["no_context"] = c.no_context;
  t["threads"] = c.threads;
  t["grad_clip"] = c.grad_clip;
  t["weight_decay"] = c.weight_decay;
  return t;
}

TrainConfig train_from_json(const json& t) {
  TrainConfig c;
  c.epochs = t.at("epochs").get<int>();
  c.warmup_fraction = t.at("warmup_fraction").get<double>();
  c.max_lr = t.at("max_lr").get<double>();
  c.batch_tokens = t.at("batch_tokens").get<int>();
  c.seed = t.at("seed").get<uint64_t>();
  c.variant = variant_from_name(t.at("variant").get<std::string>());
  c.lambda1 = t.at("lambda1").get<double>();
  c.lambda2 = t.at("lambda2").get<double>();
  c.prompt_len = t.at("prompt_len").get<int>();
  c.context_budget = t.at("context_budget").get<int>();
  c.no_transfer = t.at("no_transfer").get<bool>();
  c.no_type_embedding = t.at("no_type_embedding").get<bool>();
  c.no_context = t.at("no_context").get<bool>();
  c.threads = t.at("threads").get<int>();
  c.grad_clip = t.at("grad_clip").get<double>();
  c.weight_decay = t.at("weight_decay").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json h;
  h["version"] = kVersion;
  h["model"] = {{"layers", ckpt.model.layers},   {"hidden", ckpt.model.hidden},
                {"heads", ckpt.model.heads},     {"vocab", ckpt.model.vocab},
                {"prompt_len", ckpt.model.prompt_len}, {"ffn_mult", ckpt.model.ffn_mult},
                {"init_std", ckpt.model.init_std}};
  h["train"] = train_to_json(ckpt.train);
  h["step"] = ckpt.step;
  h["total_steps"] = ckpt.total_steps;
  h["arrays"] = json::array();
  int64_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    json rec;
    rec["name"] = a.name;
    rec["shape"] = a.shape;
    rec["dtype"] = "f32";
    rec["offset"] = offset;
    rec["count"] = a.data.size();
    h["arrays"].push_back(rec);
    offset += static_cast<int64_t>(a.data.size() * sizeof(float));
  }
  std::string header = h.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  DEMPT_CHECK(out.good(), "cannot open checkpoint '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  uint32_t hlen = static_cast<uint32_t>(header.size());
  unsigned char lenb[4] = {static_cast<unsigned char>(hlen & 0xff), static_cast<unsigned char>((hlen >> 8) & 0xff),
                           static_cast<unsigned char>((hlen >> 16) & 0xff),
                           static_cast<unsigned char>((hlen >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(lenb), 4);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& a : ckpt.arrays)
    out.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(float)));
  DEMPT_CHECK(out.good(), "failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  DEMPT_CHECK(in.good(), "cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  DEMPT_CHECK(in.gcount() == 8 && std::memcmp(magic, kMagic, 8) == 0,
              "checkpoint '" + path + "': bad magic");
  unsigned char lenb[4];
  in.read(reinterpret_cast<char*>(lenb), 4);
  DEMPT_CHECK(in.gcount() == 4, "checkpoint '" + path + "': truncated header length");
  uint32_t hlen = static_cast<uint32_t>(lenb[0]) | (static_cast<uint32_t>(lenb[1]) << 8) |
                  (static_cast<uint32_t>(lenb[2]) << 16) | (static_cast<uint32_t>(lenb[3]) << 24);
  std::string header(hlen, '\0');
  in.read(header.data(), hlen);
  DEMPT_CHECK(static_cast<uint32_t>(in.gcount()) == hlen, "checkpoint '" + path + "': truncated header");
  json h = json::parse(header);
  DEMPT_CHECK(h.at("version").get<int>() == kVersion,
              "checkpoint '" + path + "': unsupported version " + std::to_string(h.at("version").get<int>()));

  Checkpoint ckpt;
  const json& m = h.at("model");
  ckpt.model.layers = m.at("layers").get<int>();
  ckpt.model.hidden = m.at("hidden").get<int>();
  ckpt.model.heads = m.at("heads").get<int>();
  ckpt.model.vocab = m.at("vocab").get<int>();
  ckpt.model.prompt_len = m.at("prompt_len").get<int>();
  ckpt.model.ffn_mult = m.at("ffn_mult").get<int>();
  ckpt.model.init_std = m.at("init_std").get<double>();
  ckpt.train = train_from_json(h.at("train"));
  ckpt.step = h.at("step").get<int64_t>();
  ckpt.total_steps = h.at("total_steps").get<int64_t>();

  for (const auto& rec : h.at("arrays")) {
    ArrayRecord a;
    a.name = rec.at("name").get<std::string>();
    a.shape = rec.at("shape").get<Shape>();
    size_t count = rec.at("count").get<size_t>();
    DEMPT_CHECK(static_cast<int64_t>(count) == shape_numel(a.shape),
                "checkpoint '" + path + "': array '" + a.name + "' count does not match shape");
    a.data.resize(count);
    in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(count * sizeof(float)));
    DEMPT_CHECK(static_cast<size_t>(in.gcount()) == count * sizeof(float),
                "checkpoint '" + path + "': truncated payload at array '" + a.name + "'");
    ckpt.arrays.push_back(std::move(a));
  }
  in.peek();
  DEMPT_CHECK(in.eof(), "checkpoint '" + path + "': trailing bytes after payload");
  return ckpt;
}

Checkpoint snapshot(Model<float>& model, AdamW* optimizer, const TrainConfig& cfg, int64_t step,
                    int64_t total_steps) {
  Checkpoint ckpt;
  ckpt.model = model.backbone.cfg;
  ckpt.train = cfg;
  ckpt.step = step;
  ckpt.total_steps = total_steps;
  for (auto& p : model.all_params())
    ckpt.arrays.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  if (optimizer) {
    for (auto& s : optimizer->slots()) {
      ckpt.arrays.push_back({"opt.m." + s.param.name, s.param.tensor.shape(), s.m});
      ckpt.arrays.push_back({"opt.v." + s.param.name, s.param.tensor.shape(), s.v});
    }
  }
  return ckpt;
}

Model<float> model_from_checkpoint(const Checkpoint& ckpt) {
  Backbone<float> bb = Backbone<float>::random(ckpt.model, /*seed=*/0, /*trainable=*/false);
  Model<float> model = Model<float>::assemble(ckpt.train.variant, bb, /*seed=*/0, ckpt.train.lambda1,
                                              ckpt.train.lambda2, ckpt.train.ablation());
  std::map<std::string, const ArrayRecord*> by_name;
  for (const auto& a : ckpt.arrays) by_name[a.name] = &a;
  for (auto& p : model.all_params()) {
    auto it = by_name.find(p.name);
    DEMPT_CHECK(it != by_name.end(), "checkpoint is missing array '" + p.name + "'");
    DEMPT_CHECK(it->second->shape == p.tensor.shape(),
                "checkpoint array '" + p.name + "' has shape " + shape_str(it->second->shape) +
                    ", model expects " + shape_str(p.tensor.shape()));
    std::copy(it->second->data.begin(), it->second->data.end(), p.tensor.mutable_data().begin());
  }
  return model;
}

}  // namespace dempt
