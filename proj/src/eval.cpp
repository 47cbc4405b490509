#include "dempt/eval.hpp"

#include <cmath>
#include <map>
#include <sstream>
#include <thread>

namespace dempt {

namespace {

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream ss(s);
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

// run fn(i) for i in [0, n) across threads; results land by index
void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += threads) fn(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

BleuResult bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references) {
  DEMPT_CHECK(hypotheses.size() == references.size(),
              "bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                  std::to_string(references.size()) + " references");
  std::array<int64_t, 4> hits{}, totals{};
  int64_t hyp_len = 0, ref_len = 0;
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    auto hyp = split_ws(hypotheses[i]);
    auto ref = split_ws(references[i]);
    hyp_len += static_cast<int64_t>(hyp.size());
    ref_len += static_cast<int64_t>(ref.size());
    for (int n = 1; n <= 4; ++n) {
      if (static_cast<int>(hyp.size()) < n) break;
      std::map<std::vector<std::string>, int64_t> ref_counts;
      for (size_t j = 0; j + n <= ref.size(); ++j)
        ref_counts[std::vector<std::string>(ref.begin() + j, ref.begin() + j + n)] += 1;
      std::map<std::vector<std::string>, int64_t> hyp_counts;
      for (size_t j = 0; j + n <= hyp.size(); ++j)
        hyp_counts[std::vector<std::string>(hyp.begin() + j, hyp.begin() + j + n)] += 1;
      for (const auto& [gram, count] : hyp_counts) {
        totals[n - 1] += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) hits[n - 1] += std::min(count, it->second);  // clipped
      }
    }
  }

  BleuResult r;
  r.hyp_len = hyp_len;
  r.ref_len = ref_len;
  double smooth = 1.0;
  double log_sum = 0.0;
  for (int n = 0; n < 4; ++n) {
    double p;
    if (hits[n] > 0) {
      p = static_cast<double>(hits[n]) / static_cast<double>(totals[n]);
    } else {
      smooth *= 2.0;  // exponential smoothing on zero counts
      p = 1.0 / (smooth * static_cast<double>(std::max<int64_t>(totals[n], 1)));
    }
    r.precisions[n] = p;
    log_sum += 0.25 * std::log(p);
  }
  r.brevity_penalty =
      (hyp_len >= ref_len || hyp_len == 0)
          ? 1.0
          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  r.score = hyp_len == 0 ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum);
  return r;
}

// ---------------------------------------------------------------------------
// Contrastive accuracy
// ---------------------------------------------------------------------------

ContrastiveReport contrastive_accuracy(const CandidateScorer& scorer,
                                       const std::vector<ContrastiveInstance>& set, int threads) {
  ContrastiveReport r;
  r.total = static_cast<int>(set.size());
  std::vector<uint8_t> correct(set.size(), 0);
  parallel_for(static_cast<int>(set.size()), threads, [&](int i) {
    const auto& ci = set[static_cast<size_t>(i)];
    double pos = scorer(ci, ci.positive);
    bool ok = true;
    for (const auto& neg : ci.negatives) {
      if (!(pos > scorer(ci, neg))) {  // ties count as incorrect
        ok = false;
        break;
      }
    }
    correct[static_cast<size_t>(i)] = ok ? 1 : 0;
  });
  std::map<std::string, int> right;
  int right_total = 0;
  for (size_t i = 0; i < set.size(); ++i) {
    r.counts[set[i].phenomenon] += 1;
    if (correct[i]) {
      right[set[i].phenomenon] += 1;
      right_total += 1;
    }
  }
  for (const auto& [phen, count] : r.counts)
    r.per_phenomenon[phen] = count ? static_cast<double>(right[phen]) / count : 0.0;
  r.overall = r.total ? static_cast<double>(right_total) / r.total : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Context-dependent token accuracy
// ---------------------------------------------------------------------------

std::vector<std::vector<std::string>> translate_documents(const SentenceTranslator& translate,
                                                          const std::vector<DocumentPair>& docs,
                                                          int threads) {
  // flatten (doc, sentence) pairs so parallelism covers short documents too
  struct Job {
    int doc, sent;
  };
  std::vector<Job> jobs;
  for (size_t d = 0; d < docs.size(); ++d)
    for (size_t k = 0; k < docs[d].sentences.size(); ++k)
      jobs.push_back({static_cast<int>(d), static_cast<int>(k)});
  std::vector<std::vector<std::string>> out(docs.size());
  for (size_t d = 0; d < docs.size(); ++d) out[d].resize(docs[d].sentences.size());
  parallel_for(static_cast<int>(jobs.size()), threads, [&](int i) {
    const auto& [d, k] = jobs[static_cast<size_t>(i)];
    const auto& doc = docs[static_cast<size_t>(d)];
    std::vector<std::string> context;
    for (int j = 0; j < k; ++j) context.push_back(doc.sentences[static_cast<size_t>(j)].source);
    out[static_cast<size_t>(d)][static_cast<size_t>(k)] =
        translate(context, doc.sentences[static_cast<size_t>(k)].source);
  });
  return out;
}

TokenAccuracyReport context_token_accuracy(const std::vector<DocumentPair>& docs,
                                           const std::vector<std::vector<std::string>>& hypotheses,
                                           const Vocab& vocab) {
  DEMPT_CHECK(docs.size() == hypotheses.size(), "token accuracy: document/hypothesis count mismatch");
  TokenAccuracyReport r;
  int flag_right = 0, prn_right = 0;
  for (size_t d = 0; d < docs.size(); ++d) {
    DEMPT_CHECK(docs[d].sentences.size() == hypotheses[d].size(),
                "token accuracy: sentence/hypothesis count mismatch in document " + docs[d].id);
    for (size_t k = 0; k < docs[d].sentences.size(); ++k) {
      auto src = split_ws(docs[d].sentences[k].source);
      auto ref = split_ws(docs[d].sentences[k].target);
      auto hyp = split_ws(hypotheses[d][k]);
      DEMPT_CHECK(src.size() == ref.size(), "token accuracy: source/target length mismatch (not word-for-word)");
      for (size_t p = 0; p < src.size(); ++p) {
        TokenClass c = vocab.token_class(vocab.id(src[p]));
        if (c != TokenClass::AmbiguousSource && c != TokenClass::PronounSource) continue;
        bool ok = p < hyp.size() && hyp[p] == ref[p];
        if (c == TokenClass::AmbiguousSource) {
          r.flag_total += 1;
          flag_right += ok ? 1 : 0;
        } else {
          r.pronoun_total += 1;
          prn_right += ok ? 1 : 0;
        }
      }
    }
  }
  r.flag_accuracy = r.flag_total ? static_cast<double>(flag_right) / r.flag_total : 0.0;
  r.pronoun_accuracy = r.pronoun_total ? static_cast<double>(prn_right) / r.pronoun_total : 0.0;
  int total = r.total();
  r.overall = total ? static_cast<double>(flag_right + prn_right) / total : 0.0;
  return r;
}

TokenAccuracyReport context_token_accuracy(const SentenceTranslator& translate,
                                           const std::vector<DocumentPair>& docs, const Vocab& vocab,
                                           int threads) {
  return context_token_accuracy(docs, translate_documents(translate, docs, threads), vocab);
}

}  // namespace dempt
