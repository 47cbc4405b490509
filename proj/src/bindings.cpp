// Python bindings for the main operations: corpus generation, training,
// translation/scoring, BLEU and gradient checking.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>

#include "dempt/config.hpp"
#include "dempt/eval.hpp"
#include "dempt/pipeline.hpp"
#include "dempt/train.hpp"

namespace py = pybind11;
using namespace dempt;

namespace {

GeneratorSpec spec_from_kwargs(const py::dict& kw) {
  GeneratorSpec s;
  for (auto item : kw) {
    std::string key = py::cast<std::string>(item.first);
    if (key == "train_docs") s.train_docs = py::cast<int>(item.second);
    else if (key == "valid_docs") s.valid_docs = py::cast<int>(item.second);
    else if (key == "test_docs") s.test_docs = py::cast<int>(item.second);
    else if (key == "sentences_per_doc") s.sentences_per_doc = py::cast<int>(item.second);
    else if (key == "plain_words") s.plain_words = py::cast<int>(item.second);
    else if (key == "ambiguous_words") s.ambiguous_words = py::cast<int>(item.second);
    else if (key == "entities") s.entities = py::cast<int>(item.second);
    else if (key == "min_plain_per_sentence") s.min_plain_per_sentence = py::cast<int>(item.second);
    else if (key == "max_plain_per_sentence") s.max_plain_per_sentence = py::cast<int>(item.second);
    else if (key == "ambiguous_rate") s.ambiguous_rate = py::cast<double>(item.second);
    else if (key == "entity_rate") s.entity_rate = py::cast<double>(item.second);
    else if (key == "pronoun_rate") s.pronoun_rate = py::cast<double>(item.second);
    else fail("generate_data: unknown generator option '" + key + "'");
  }
  return s;
}

class Translator {
 public:
  Translator(const std::string& checkpoint_path, const std::string& data_dir) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    model_ = model_from_checkpoint(ckpt);
    model_.bake();
    vocab_ = read_vocab_file(data_dir + "/vocab.json");
    train_cfg_ = ckpt.train;
  }

  std::string translate(const std::vector<std::string>& context, const std::string& source, int max_len,
                        int beam) {
    std::vector<int> ctx = context_window(context, vocab_, train_cfg_.context_budget);
    std::vector<int> out = generate(model_, ctx, vocab_.tokenize(source), GenerateOptions{max_len, beam});
    return vocab_.detokenize(out);
  }

  double score(const std::vector<std::string>& context, const std::string& source,
               const std::string& target, bool mean_per_token) {
    std::vector<int> ctx = context_window(context, vocab_, train_cfg_.context_budget);
    auto prompts = eval_prompts(model_);
    return score_sequence(model_, prompts, ctx, vocab_.tokenize(source), vocab_.tokenize(target),
                          mean_per_token);
  }

  py::dict param_report_dict() {
    ParamReport r = param_report(model_);
    py::dict d;
    d["trainable"] = r.trainable;
    d["total"] = r.total;
    d["proportion"] = r.proportion;
    return d;
  }

  std::string variant() const { return variant_name(train_cfg_.variant); }

 private:
  Model<float> model_;
  Vocab vocab_;
  TrainConfig train_cfg_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-phase prompt tuning for context-aware translation";

  m.def(
      "generate_data",
      [](const std::string& out_dir, uint64_t seed, const py::kwargs& kw) {
        GeneratorSpec spec = spec_from_kwargs(kw);
        SyntheticCorpus corpus = generate_corpus(spec, seed);
        std::filesystem::create_directories(out_dir);
        write_corpus_files(corpus, out_dir);
        py::dict d;
        d["train_docs"] = corpus.train.size();
        d["test_docs"] = corpus.test.size();
        d["contrastive"] = corpus.contrastive.size();
        d["vocab"] = corpus.vocab.size();
        d["majority_rate"] = corpus.stats.majority_rate;
        return d;
      },
      py::arg("out_dir"), py::arg("seed") = 1);

  m.def(
      "train",
      [](const std::string& config_path, const std::string& variant, int threads) {
        RunConfig cfg = read_run_config(config_path);
        if (!variant.empty()) cfg.train.variant = variant_from_name(variant);
        if (threads > 0) cfg.train.threads = threads;
        Vocab vocab = read_vocab_file(cfg.data_dir + "/vocab.json");
        auto docs = read_corpus_file(cfg.data_dir + "/train.jsonl");
        std::filesystem::create_directories(cfg.out_dir);
        TrainOptions options;
        options.metrics_path = cfg.out_dir + "/metrics.jsonl";
        options.checkpoint_path = cfg.out_dir + "/checkpoint.bin";
        TrainResult r = train_model(cfg.model, cfg.train, cfg.backbone, docs, vocab, options);
        py::dict d;
        d["steps"] = r.steps;
        d["first_loss"] = r.first_loss;
        d["final_loss"] = r.final_loss;
        d["checkpoint"] = options.checkpoint_path;
        return d;
      },
      py::arg("config_path"), py::arg("variant") = "", py::arg("threads") = 0);

  m.def(
      "bleu",
      [](const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
        BleuResult r = bleu(hyps, refs);
        py::dict d;
        d["score"] = r.score;
        d["brevity_penalty"] = r.brevity_penalty;
        d["precisions"] = r.precisions;
        return d;
      },
      py::arg("hypotheses"), py::arg("references"));

  m.def(
      "grad_check",
      [](int layers, int hidden, int heads, int prompt_len, int vocab, uint64_t seed,
         const std::string& variant) {
        ModelConfig cfg;
        cfg.layers = layers;
        cfg.hidden = hidden;
        cfg.heads = heads;
        cfg.vocab = vocab;
        cfg.prompt_len = prompt_len;
        cfg.init_std = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
        Backbone<double> bb = Backbone<double>::random(cfg, mix_seed(seed, 77), false);
        Model<double> model = Model<double>::assemble(variant_from_name(variant), bb, mix_seed(seed, 78));
        if (model.head) randomize_head_outputs(*model.head, mix_seed(seed, 80), 0.5);
        Rng rng(mix_seed(seed, 79));
        auto tok = [&](int n) {
          std::vector<int> ids;
          for (int i = 0; i < n; ++i)
            ids.push_back(tokens::kReservedCount +
                          static_cast<int>(rng.uniform(cfg.vocab - tokens::kReservedCount)));
          return ids;
        };
        std::vector<int> C = tok(5), S = tok(4), T = tok(4);
        std::vector<Tensor<double>> params;
        for (auto& p : model.trainable_params()) params.push_back(p.tensor);
        auto loss_fn = [&]() {
          auto prompts = model.prompts.materialize_all();
          return instance_loss(model, prompts, C, S, T);
        };
        return grad_check<double>(loss_fn, params, 1e-5);
      },
      py::arg("layers") = 2, py::arg("hidden") = 16, py::arg("heads") = 2, py::arg("prompt_len") = 4,
      py::arg("vocab") = 50, py::arg("seed") = 1, py::arg("variant") = "dempt");

  py::class_<Translator>(m, "Translator")
      .def(py::init<const std::string&, const std::string&>(), py::arg("checkpoint"), py::arg("data_dir"))
      .def("translate", &Translator::translate, py::arg("context"), py::arg("source"),
           py::arg("max_len") = 32, py::arg("beam") = 1)
      .def("score", &Translator::score, py::arg("context"), py::arg("source"), py::arg("target"),
           py::arg("mean_per_token") = false)
      .def("param_report", &Translator::param_report_dict)
      .def_property_readonly("variant", &Translator::variant);
}
