#pragma once

// Evaluation suite: corpus BLEU-4 with exponential smoothing, contrastive
// accuracy, context-dependent token accuracy on the synthetic phenomena, and
// trainable-parameter accounting.

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dempt/corpus.hpp"
#include "dempt/model.hpp"

namespace dempt {

struct BleuResult {
  double score = 0.0;            // [0, 100]
  double brevity_penalty = 1.0;  // multiplicative
  std::array<double, 4> precisions{};  // clipped n-gram precisions, smoothed
  int64_t hyp_len = 0;
  int64_t ref_len = 0;
};

// Corpus-level BLEU-4 over whitespace tokens, one reference per hypothesis.
// Orders with zero clipped matches get exponentially smoothed precision
// 1 / (2^k * max(total, 1)).
BleuResult bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references);

struct ContrastiveReport {
  double overall = 0.0;
  std::map<std::string, double> per_phenomenon;
  std::map<std::string, int> counts;
  int total = 0;
};

// An instance counts as correct iff the positive outscores every negative;
// ties count as incorrect.
using CandidateScorer = std::function<double(const ContrastiveInstance&, const std::string& candidate)>;
ContrastiveReport contrastive_accuracy(const CandidateScorer& scorer,
                                       const std::vector<ContrastiveInstance>& set, int threads = 1);

struct TokenAccuracyReport {
  double overall = 0.0;
  double flag_accuracy = 0.0;
  double pronoun_accuracy = 0.0;
  int flag_total = 0;
  int pronoun_total = 0;
  int total() const { return flag_total + pronoun_total; }
};

// Accuracy over the annotated (flag-dependent and pronoun-dependent) target
// positions only, aligned by position in the word-for-word mapping.
// hypotheses[doc][sentence] are whitespace token strings.
TokenAccuracyReport context_token_accuracy(const std::vector<DocumentPair>& docs,
                                           const std::vector<std::vector<std::string>>& hypotheses,
                                           const Vocab& vocab);

using SentenceTranslator =
    std::function<std::string(const std::vector<std::string>& context_sources, const std::string& source)>;

// Convenience wrapper: greedy-translate every sentence (gold source-side
// context), then score the annotated positions.
TokenAccuracyReport context_token_accuracy(const SentenceTranslator& translate,
                                           const std::vector<DocumentPair>& docs, const Vocab& vocab,
                                           int threads = 1);

// Translate all sentences of all documents; used by BLEU and the token
// accuracy metric so both see the same hypotheses.
std::vector<std::vector<std::string>> translate_documents(const SentenceTranslator& translate,
                                                          const std::vector<DocumentPair>& docs,
                                                          int threads = 1);

struct ParamReport {
  int64_t trainable = 0;
  int64_t total = 0;
  double proportion = 0.0;
  std::vector<std::pair<std::string, int64_t>> breakdown;  // trainable arrays only
};

template <class T>
ParamReport param_report(Model<T>& model) {
  ParamReport r;
  for (auto& p : model.backbone_params()) r.total += p.tensor.size();
  for (auto& p : model.trainable_params()) {
    r.trainable += p.tensor.size();
    r.total += p.tensor.size();
    r.breakdown.push_back({p.name, p.tensor.size()});
  }
  r.proportion = r.total ? static_cast<double>(r.trainable) / static_cast<double>(r.total) : 0.0;
  return r;
}

}  // namespace dempt
