// Command-line driver: data generation, training, translation, evaluation,
// contrastive scoring, gradient checking and parameter accounting.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "dempt/config.hpp"
#include "dempt/eval.hpp"
#include "dempt/pipeline.hpp"
#include "dempt/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace dempt;

namespace {

struct LoadedModel {
  Model<float> model;
  Vocab vocab;
  TrainConfig train_cfg;
};

LoadedModel load_model(const std::string& checkpoint_path, const std::string& data_dir) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  LoadedModel lm{model_from_checkpoint(ckpt), read_vocab_file(data_dir + "/vocab.json"), ckpt.train};
  DEMPT_CHECK(lm.vocab.size() == ckpt.model.vocab,
              "vocabulary in '" + data_dir + "' does not match the checkpoint");
  lm.model.bake();
  return lm;
}

SentenceTranslator make_translator(const LoadedModel& lm, const GenerateOptions& gen) {
  return [&lm, gen](const std::vector<std::string>& context, const std::string& source) {
    std::vector<int> ctx = context_window(context, lm.vocab, lm.train_cfg.context_budget);
    std::vector<int> src = lm.vocab.tokenize(source);
    std::vector<int> out = generate(lm.model, ctx, src, gen);
    return lm.vocab.detokenize(out);
  };
}

CandidateScorer make_scorer(const LoadedModel& lm, bool mean_mode) {
  return [&lm, mean_mode](const ContrastiveInstance& ci, const std::string& candidate) {
    std::vector<int> ctx = context_window(ci.context, lm.vocab, lm.train_cfg.context_budget);
    std::vector<int> src = lm.vocab.tokenize(ci.source);
    std::vector<int> tgt = lm.vocab.tokenize(candidate);
    auto prompts = eval_prompts(lm.model);
    return score_sequence(lm.model, prompts, ctx, src, tgt, mean_mode);
  };
}

void apply_train_overrides(CLI::App* cmd, RunConfig& cfg, const std::string& variant,
                           const std::string& out_dir, const std::string& data_dir, uint64_t seed,
                           double lambda1, double lambda2, int prompt_len, int context_budget, int threads,
                           bool no_transfer, bool no_type_embedding, bool no_context) {
  if (cmd->count("--variant")) cfg.train.variant = variant_from_name(variant);
  if (cmd->count("--out")) cfg.out_dir = out_dir;
  if (cmd->count("--data")) cfg.data_dir = data_dir;
  if (cmd->count("--seed")) cfg.train.seed = seed;
  if (cmd->count("--lambda1")) cfg.train.lambda1 = lambda1;
  if (cmd->count("--lambda2")) cfg.train.lambda2 = lambda2;
  if (cmd->count("--prompt-len")) cfg.train.prompt_len = prompt_len;
  if (cmd->count("--context-budget")) cfg.train.context_budget = context_budget;
  if (cmd->count("--threads")) cfg.train.threads = threads;
  if (no_transfer) cfg.train.no_transfer = true;
  if (no_type_embedding) cfg.train.no_type_embedding = true;
  if (no_context) cfg.train.no_context = true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoding-enhanced multi-phase prompt tuning for context-aware translation"};
  app.require_subcommand(1);

  // generate-data
  auto* gen_cmd = app.add_subcommand("generate-data", "Generate a synthetic discourse corpus");
  std::string gen_spec, gen_out = "data";
  uint64_t gen_seed = 1;
  int gen_threads = 1;
  gen_cmd->add_option("--spec", gen_spec, "Generator spec JSON")->required();
  gen_cmd->add_option("--seed", gen_seed, "Generator seed");
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();
  gen_cmd->add_option("--threads", gen_threads, "Worker threads");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a system variant");
  std::string tr_config, tr_variant, tr_out, tr_data, tr_resume;
  uint64_t tr_seed = 1;
  double tr_l1 = 1.0 / 3, tr_l2 = 1.0 / 3;
  int tr_prompt = 64, tr_budget = 64, tr_threads = 1;
  int64_t tr_stop = -1;
  bool tr_no_transfer = false, tr_no_type = false, tr_no_ctx = false;
  train_cmd->add_option("--config", tr_config, "Run config JSON")->required();
  train_cmd->add_option("--variant", tr_variant, "mt-pt|cmt-pt|mpt|dempt");
  train_cmd->add_option("--out", tr_out, "Output directory");
  train_cmd->add_option("--data", tr_data, "Data directory");
  train_cmd->add_option("--seed", tr_seed, "Training seed");
  train_cmd->add_option("--lambda1", tr_l1, "Context-fused distribution weight");
  train_cmd->add_option("--lambda2", tr_l2, "Sentence-fused distribution weight");
  train_cmd->add_option("--prompt-len", tr_prompt, "Prompt length q");
  train_cmd->add_option("--context-budget", tr_budget, "Max context tokens");
  train_cmd->add_option("--threads", tr_threads, "Worker threads");
  train_cmd->add_flag("--no-transfer", tr_no_transfer, "Drop the shared transfer sublayer");
  train_cmd->add_flag("--no-type-embedding", tr_no_type, "Drop the phase type embeddings");
  train_cmd->add_flag("--no-context", tr_no_ctx, "Encode the current sentence twice instead of the context");
  train_cmd->add_option("--resume", tr_resume, "Resume from a checkpoint");
  train_cmd->add_option("--stop-after", tr_stop, "Stop after N optimizer steps");

  // translate
  auto* tl_cmd = app.add_subcommand("translate", "Greedy/beam decode a corpus split");
  std::string tl_ckpt, tl_data = "data", tl_split = "test", tl_out;
  int tl_maxlen = 32, tl_beam = 1, tl_threads = 1;
  tl_cmd->add_option("--checkpoint", tl_ckpt, "Model checkpoint")->required();
  tl_cmd->add_option("--data", tl_data, "Data directory");
  tl_cmd->add_option("--split", tl_split, "train|valid|test");
  tl_cmd->add_option("--out", tl_out, "Output JSONL (default stdout)");
  tl_cmd->add_option("--max-len", tl_maxlen, "Generation cap");
  tl_cmd->add_option("--beam", tl_beam, "Beam width (1 = greedy)");
  tl_cmd->add_option("--threads", tl_threads, "Worker threads");

  // evaluate
  auto* ev_cmd = app.add_subcommand("evaluate", "BLEU + context token accuracy + parameter report");
  std::string ev_ckpt, ev_data = "data", ev_split = "test", ev_out;
  int ev_maxlen = 32, ev_beam = 1, ev_threads = 1;
  ev_cmd->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->required();
  ev_cmd->add_option("--data", ev_data, "Data directory");
  ev_cmd->add_option("--split", ev_split, "valid|test");
  ev_cmd->add_option("--out", ev_out, "Report JSON path (default stdout only)");
  ev_cmd->add_option("--max-len", ev_maxlen, "Generation cap");
  ev_cmd->add_option("--beam", ev_beam, "Beam width");
  ev_cmd->add_option("--threads", ev_threads, "Worker threads");

  // contrastive
  auto* ct_cmd = app.add_subcommand("contrastive", "Score the contrastive test set");
  std::string ct_ckpt, ct_data = "data", ct_out, ct_mode = "sum";
  int ct_threads = 1;
  ct_cmd->add_option("--checkpoint", ct_ckpt, "Model checkpoint")->required();
  ct_cmd->add_option("--data", ct_data, "Data directory");
  ct_cmd->add_option("--out", ct_out, "Report JSON path (default stdout only)");
  ct_cmd->add_option("--score-mode", ct_mode, "sum|mean log-probability");
  ct_cmd->add_option("--threads", ct_threads, "Worker threads");

  // gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the full loss (64-bit)");
  int gc_layers = 2, gc_hidden = 16, gc_heads = 2, gc_prompt = 4, gc_vocab = 50;
  uint64_t gc_seed = 1;
  std::string gc_variant = "dempt";
  gc_cmd->add_option("--layers", gc_layers, "Transformer layers");
  gc_cmd->add_option("--hidden", gc_hidden, "Hidden size");
  gc_cmd->add_option("--heads", gc_heads, "Attention heads");
  gc_cmd->add_option("--prompt-len", gc_prompt, "Prompt length q");
  gc_cmd->add_option("--vocab", gc_vocab, "Vocabulary size");
  gc_cmd->add_option("--seed", gc_seed, "Seed");
  gc_cmd->add_option("--variant", gc_variant, "System variant");

  // param-report
  auto* pr_cmd = app.add_subcommand("param-report", "Trainable parameter accounting");
  std::string pr_ckpt;
  pr_cmd->add_option("--checkpoint", pr_ckpt, "Model checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << e.what() << "\n";
    std::cerr << app.help() << "\n";
    return 2;
  }

  try {
    if (*gen_cmd) {
      GeneratorSpec spec = read_generator_spec(gen_spec);
      SyntheticCorpus corpus = generate_corpus(spec, gen_seed, gen_threads);
      fs::create_directories(gen_out);
      write_corpus_files(corpus, gen_out);
      std::cout << "wrote " << corpus.train.size() << " train / " << corpus.valid.size() << " valid / "
                << corpus.test.size() << " test documents, " << corpus.contrastive.size()
                << " contrastive instances, vocab " << corpus.vocab.size() << " -> " << gen_out << "\n";
      return 0;
    }

    if (*train_cmd) {
      RunConfig cfg = read_run_config(tr_config);
      apply_train_overrides(train_cmd, cfg, tr_variant, tr_out, tr_data, tr_seed, tr_l1, tr_l2, tr_prompt,
                            tr_budget, tr_threads, tr_no_transfer, tr_no_type, tr_no_ctx);
      cfg.validate();
      Vocab vocab = read_vocab_file(cfg.data_dir + "/vocab.json");
      auto docs = read_corpus_file(cfg.data_dir + "/train.jsonl");
      fs::create_directories(cfg.out_dir);
      TrainOptions options;
      options.metrics_path = cfg.out_dir + "/metrics.jsonl";
      options.checkpoint_path = cfg.out_dir + "/checkpoint.bin";
      options.resume_path = tr_resume;
      options.stop_after_steps = tr_stop;
      TrainResult result = train_model(cfg.model, cfg.train, cfg.backbone, docs, vocab, options);
      std::cout << "trained " << variant_name(cfg.train.variant) << " for " << result.steps << "/"
                << result.total_steps << " steps, loss " << result.first_loss << " -> " << result.final_loss
                << "; checkpoint " << options.checkpoint_path << "\n";
      return 0;
    }

    if (*tl_cmd) {
      LoadedModel lm = load_model(tl_ckpt, tl_data);
      auto docs = read_corpus_file(tl_data + "/" + tl_split + ".jsonl");
      GenerateOptions gen{tl_maxlen, tl_beam};
      auto hyps = translate_documents(make_translator(lm, gen), docs, tl_threads);
      std::ofstream file;
      std::ostream* out = &std::cout;
      if (!tl_out.empty()) {
        file.open(tl_out);
        DEMPT_CHECK(file.good(), "cannot open '" + tl_out + "'");
        out = &file;
      }
      for (size_t d = 0; d < docs.size(); ++d)
        for (size_t k = 0; k < docs[d].sentences.size(); ++k) {
          json rec;
          rec["doc"] = docs[d].id;
          rec["index"] = k;
          rec["source"] = docs[d].sentences[k].source;
          rec["reference"] = docs[d].sentences[k].target;
          rec["hypothesis"] = hyps[d][k];
          *out << rec.dump() << '\n';
        }
      return 0;
    }

    if (*ev_cmd) {
      LoadedModel lm = load_model(ev_ckpt, ev_data);
      auto docs = read_corpus_file(ev_data + "/" + ev_split + ".jsonl");
      GenerateOptions gen{ev_maxlen, ev_beam};
      auto hyps = translate_documents(make_translator(lm, gen), docs, ev_threads);
      std::vector<std::string> flat_hyps, flat_refs;
      for (size_t d = 0; d < docs.size(); ++d)
        for (size_t k = 0; k < docs[d].sentences.size(); ++k) {
          flat_hyps.push_back(hyps[d][k]);
          flat_refs.push_back(docs[d].sentences[k].target);
        }
      BleuResult b = bleu(flat_hyps, flat_refs);
      TokenAccuracyReport acc = context_token_accuracy(docs, hyps, lm.vocab);
      ParamReport params = param_report(lm.model);

      json report;
      report["variant"] = variant_name(lm.train_cfg.variant);
      report["split"] = ev_split;
      report["bleu"] = {{"score", b.score},
                        {"brevity_penalty", b.brevity_penalty},
                        {"precisions", b.precisions},
                        {"hyp_len", b.hyp_len},
                        {"ref_len", b.ref_len}};
      report["context_token_accuracy"] = {{"overall", acc.overall},
                                          {"lexical_consistency", acc.flag_accuracy},
                                          {"pronoun", acc.pronoun_accuracy},
                                          {"lexical_positions", acc.flag_total},
                                          {"pronoun_positions", acc.pronoun_total}};
      report["parameters"] = {{"trainable", params.trainable},
                              {"total", params.total},
                              {"proportion", params.proportion}};
      if (!ev_out.empty()) {
        std::ofstream f(ev_out);
        DEMPT_CHECK(f.good(), "cannot open '" + ev_out + "'");
        f << report.dump(2) << '\n';
      }
      std::cout << "system              " << variant_name(lm.train_cfg.variant) << " (" << ev_split << ")\n";
      printf("BLEU                %.2f  (BP %.4f)\n", b.score, b.brevity_penalty);
      printf("ctx token accuracy  %.4f  (lexical %.4f over %d, pronoun %.4f over %d)\n", acc.overall,
             acc.flag_accuracy, acc.flag_total, acc.pronoun_accuracy, acc.pronoun_total);
      printf("trainable params    %lld / %lld  (%.2f%%)\n", static_cast<long long>(params.trainable),
             static_cast<long long>(params.total), 100.0 * params.proportion);
      return 0;
    }

    if (*ct_cmd) {
      DEMPT_CHECK(ct_mode == "sum" || ct_mode == "mean", "--score-mode must be sum or mean");
      LoadedModel lm = load_model(ct_ckpt, ct_data);
      auto set = read_contrastive_file(ct_data + "/contrastive.jsonl");
      ContrastiveReport r = contrastive_accuracy(make_scorer(lm, ct_mode == "mean"), set, ct_threads);
      json report;
      report["variant"] = variant_name(lm.train_cfg.variant);
      report["overall"] = r.overall;
      report["total"] = r.total;
      for (const auto& [phen, acc] : r.per_phenomenon)
        report["per_phenomenon"][phen] = {{"accuracy", acc}, {"count", r.counts.at(phen)}};
      if (!ct_out.empty()) {
        std::ofstream f(ct_out);
        DEMPT_CHECK(f.good(), "cannot open '" + ct_out + "'");
        f << report.dump(2) << '\n';
      }
      printf("contrastive accuracy %.4f over %d instances\n", r.overall, r.total);
      for (const auto& [phen, acc] : r.per_phenomenon)
        printf("  %-20s %.4f (%d)\n", phen.c_str(), acc, r.counts.at(phen));
      return 0;
    }

    if (*gc_cmd) {
      // full-loss gradient check on a tiny random instance, 64-bit
      ModelConfig cfg;
      cfg.layers = gc_layers;
      cfg.hidden = gc_hidden;
      cfg.heads = gc_heads;
      cfg.vocab = gc_vocab;
      cfg.prompt_len = gc_prompt;
      cfg.init_std = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
      Backbone<double> bb = Backbone<double>::random(cfg, mix_seed(gc_seed, 77), false);
      Model<double> model =
          Model<double>::assemble(variant_from_name(gc_variant), bb, mix_seed(gc_seed, 78));
      if (model.head) randomize_head_outputs(*model.head, mix_seed(gc_seed, 80), 0.5);
      Rng rng(mix_seed(gc_seed, 79));
      auto tok = [&](int n) {
        std::vector<int> ids;
        for (int i = 0; i < n; ++i)
          ids.push_back(tokens::kReservedCount + static_cast<int>(rng.uniform(cfg.vocab - tokens::kReservedCount)));
        return ids;
      };
      std::vector<int> C = tok(5), S = tok(4), T = tok(4);
      std::vector<Tensor<double>> params;
      for (auto& p : model.trainable_params()) params.push_back(p.tensor);
      auto loss_fn = [&]() {
        auto prompts = model.prompts.materialize_all();
        return instance_loss(model, prompts, C, S, T);
      };
      int64_t n_elems = 0;
      for (auto& p : params) n_elems += p.size();
      double err = grad_check<double>(loss_fn, params, 1e-5);
      printf("gradcheck %s (L=%d d=%d heads=%d q=%d |V|=%d): max relative error %.3e over %lld parameters\n",
             gc_variant.c_str(), gc_layers, gc_hidden, gc_heads, gc_prompt, gc_vocab, err,
             static_cast<long long>(n_elems));
      return err < 1e-4 ? 0 : 1;
    }

    if (*pr_cmd) {
      Checkpoint ckpt = load_checkpoint(pr_ckpt);
      Model<float> model = model_from_checkpoint(ckpt);
      ParamReport r = param_report(model);
      printf("%-24s %12s\n", "array", "parameters");
      for (const auto& [name, count] : r.breakdown)
        printf("%-24s %12lld\n", name.c_str(), static_cast<long long>(count));
      printf("trainable %lld of %lld total (%.2f%%)\n", static_cast<long long>(r.trainable),
             static_cast<long long>(r.total), 100.0 * r.proportion);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
