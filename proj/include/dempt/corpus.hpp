#pragma once

// Synthetic discourse corpus: a closed whitespace vocabulary, document pairs
// whose target side is a word-for-word mapping of the source, and two
// context phenomena seeded into the data:
//
//  - lexical consistency: sentence 1 of each document carries a mode flag
//    (mode_a / mode_b); ambiguous source words translate differently per
//    mode and only appear in later sentences, so the flag is reachable only
//    through inter-sentence context;
//  - pronoun resolution: a pronoun-like source word translates to the target
//    form of the most recently introduced entity, which by construction
//    lives in an earlier sentence.
//
// The contrastive set pairs each gold target with near-identical negatives
// that swap exactly one phenomenon-bearing word.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "dempt/common.hpp"

namespace dempt {

enum class TokenClass : uint8_t {
  Reserved = 0,
  ModeFlag,
  PlainSource,
  AmbiguousSource,
  EntitySource,
  PronounSource,
  Target,
};

struct Vocab {
  std::vector<std::string> words;
  std::vector<TokenClass> classes;
  std::map<std::string, int> index;

  int size() const { return static_cast<int>(words.size()); }
  int id(const std::string& w) const;
  const std::string& word(int id) const;
  TokenClass token_class(int id) const { return classes[static_cast<size_t>(id)]; }

  // whitespace tokenization over the closed vocabulary; unknown words are a
  // hard error naming the word
  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(std::span<const int> ids) const;

  void add(const std::string& w, TokenClass c);
};

struct SentencePair {
  std::string source;
  std::string target;
};

struct DocumentPair {
  std::string id;
  std::vector<SentencePair> sentences;
};

struct TrainingInstance {
  std::vector<int> context;  // C: concatenated previous source sentences (window-limited)
  std::vector<int> source;   // S
  std::vector<int> target;   // T
  int sentence_index = 0;    // k, 0-based
  int window_sentences = 0;  // z, previous sentences actually used

  int token_count() const {
    return static_cast<int>(context.size() + source.size() + target.size());
  }
};

// One instance per sentence. The context window greedily takes the nearest
// previous sentences whose total token count fits the budget, whole
// sentences only. The first sentence gets an empty context (the sentinel is
// applied downstream).
std::vector<TrainingInstance> build_instances(const DocumentPair& doc, const Vocab& vocab, int budget);

// Window rule applied to raw sentence lists (used for evaluation contexts).
std::vector<int> context_window(const std::vector<std::string>& previous_sources, const Vocab& vocab,
                                int budget, int* sentences_used = nullptr);

struct ContrastiveInstance {
  std::vector<std::string> context;  // previous source sentences, oldest first
  std::string source;
  std::string positive;
  std::vector<std::string> negatives;
  std::string phenomenon;  // "lexical-consistency" | "pronoun"
};

struct GeneratorSpec {
  int train_docs = 2000;
  int valid_docs = 50;
  int test_docs = 50;
  int sentences_per_doc = 8;
  int plain_words = 75;
  int ambiguous_words = 8;
  int entities = 4;
  int min_plain_per_sentence = 2;
  int max_plain_per_sentence = 4;
  double ambiguous_rate = 0.7;  // per sentence after the first
  double entity_rate = 0.35;
  double pronoun_rate = 0.5;  // when an earlier sentence introduced an entity

  void validate() const;
};

struct GeneratorStats {
  int flag_positions = 0;     // ambiguous-word occurrences (train split)
  int pronoun_positions = 0;  // pronoun occurrences (train split)
  double flag_majority_rate = 0.0;     // best context-blind accuracy on flag-dependent words
  double pronoun_majority_rate = 0.0;  // same for pronoun words
  double majority_rate = 0.0;          // position-weighted combination
};

struct SyntheticCorpus {
  Vocab vocab;
  std::vector<DocumentPair> train, valid, test;
  std::vector<ContrastiveInstance> contrastive;
  GeneratorStats stats;
};

// Deterministic given (spec, seed); documents are generated independently so
// the work can be split across threads without changing the output.
SyntheticCorpus generate_corpus(const GeneratorSpec& spec, uint64_t seed, int threads = 1);

// Build just the vocabulary implied by a spec (shared by all splits).
Vocab build_vocab(const GeneratorSpec& spec);

// ---- file formats ----
// Corpus: JSON lines, one document per line: {"id": ..., "sentences": [{"src","tgt"}...]}
// Contrastive: JSON lines: {"context": [...], "source", "positive", "negatives": [...], "phenomenon"}
// Vocab: single JSON object {"words": [...], "classes": [...]}

void write_corpus_files(const SyntheticCorpus& corpus, const std::string& out_dir);
std::vector<DocumentPair> read_corpus_file(const std::string& path);
std::vector<ContrastiveInstance> read_contrastive_file(const std::string& path);
Vocab read_vocab_file(const std::string& path);
GeneratorSpec read_generator_spec(const std::string& path);
GeneratorStats read_stats_file(const std::string& path);

}  // namespace dempt
