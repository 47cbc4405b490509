#include "dempt/corpus.hpp"

#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace dempt {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

void Vocab::add(const std::string& w, TokenClass c) {
  DEMPT_CHECK(!index.count(w), "vocab: duplicate word '" + w + "'");
  index[w] = static_cast<int>(words.size());
  words.push_back(w);
  classes.push_back(c);
}

int Vocab::id(const std::string& w) const {
  auto it = index.find(w);
  DEMPT_CHECK(it != index.end(), "unknown word '" + w + "' (closed vocabulary)");
  return it->second;
}

const std::string& Vocab::word(int id) const {
  DEMPT_CHECK(id >= 0 && id < size(), "token id " + std::to_string(id) + " out of vocabulary");
  return words[static_cast<size_t>(id)];
}

std::vector<int> Vocab::tokenize(const std::string& text) const {
  std::vector<int> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) out.push_back(id(w));
  return out;
}

std::string Vocab::detokenize(std::span<const int> ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instances
// ---------------------------------------------------------------------------

std::vector<int> context_window(const std::vector<std::string>& previous_sources, const Vocab& vocab,
                                int budget, int* sentences_used) {
  DEMPT_CHECK(budget >= 0, "context window: negative budget");
  std::vector<std::vector<int>> toks;
  toks.reserve(previous_sources.size());
  for (const auto& s : previous_sources) toks.push_back(vocab.tokenize(s));
  int total = 0;
  int first = static_cast<int>(toks.size());
  // nearest previous sentences first, whole sentences only
  for (int i = static_cast<int>(toks.size()) - 1; i >= 0; --i) {
    int len = static_cast<int>(toks[static_cast<size_t>(i)].size());
    if (total + len > budget) break;
    total += len;
    first = i;
  }
  std::vector<int> out;
  out.reserve(static_cast<size_t>(total));
  for (size_t i = static_cast<size_t>(first); i < toks.size(); ++i)
    out.insert(out.end(), toks[i].begin(), toks[i].end());
  if (sentences_used) *sentences_used = static_cast<int>(toks.size()) - first;
  return out;
}

std::vector<TrainingInstance> build_instances(const DocumentPair& doc, const Vocab& vocab, int budget) {
  DEMPT_CHECK(!doc.sentences.empty(), "document '" + doc.id + "' has no sentences");
  std::vector<TrainingInstance> out;
  std::vector<std::string> previous;
  for (size_t k = 0; k < doc.sentences.size(); ++k) {
    TrainingInstance inst;
    inst.sentence_index = static_cast<int>(k);
    inst.context = context_window(previous, vocab, budget, &inst.window_sentences);
    inst.source = vocab.tokenize(doc.sentences[k].source);
    inst.target = vocab.tokenize(doc.sentences[k].target);
    out.push_back(std::move(inst));
    previous.push_back(doc.sentences[k].source);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

void GeneratorSpec::validate() const {
  DEMPT_CHECK(train_docs >= 1 && valid_docs >= 0 && test_docs >= 1, "generator spec: document counts out of range");
  DEMPT_CHECK(sentences_per_doc >= 2, "generator spec: need at least 2 sentences per document");
  DEMPT_CHECK(plain_words >= 1, "generator spec: degenerate vocabulary (no plain words)");
  DEMPT_CHECK(ambiguous_words >= 1, "generator spec: degenerate vocabulary (no ambiguous words)");
  DEMPT_CHECK(entities >= 2, "generator spec: degenerate vocabulary (pronoun phenomenon needs >= 2 entities)");
  DEMPT_CHECK(min_plain_per_sentence >= 1 && max_plain_per_sentence >= min_plain_per_sentence,
              "generator spec: bad sentence length range");
  DEMPT_CHECK(ambiguous_rate >= 0 && ambiguous_rate <= 1 && entity_rate >= 0 && entity_rate <= 1 &&
                  pronoun_rate >= 0 && pronoun_rate <= 1,
              "generator spec: rates must lie in [0,1]");
}

namespace {

std::string mode_word(int mode) { return mode == 0 ? "mode_a" : "mode_b"; }
std::string mode_target(int mode) { return mode == 0 ? "tmode_a" : "tmode_b"; }
std::string plain_word(int i) { return "w" + std::to_string(i); }
std::string plain_target(int i) { return "t" + std::to_string(i); }
std::string amb_word(int i) { return "amb" + std::to_string(i); }
std::string amb_target(int i, int mode) { return "tamb" + std::to_string(i) + (mode == 0 ? "_a" : "_b"); }
std::string entity_word(int j) { return "ent" + std::to_string(j); }
std::string entity_target(int j) { return "tent" + std::to_string(j); }
std::string pronoun_target(int j) { return "tprn" + std::to_string(j); }

struct DocPhenomena {
  // per sentence: (position, amb index) and (position, gold entity)
  std::vector<std::vector<std::pair<int, int>>> amb;
  std::vector<std::vector<std::pair<int, int>>> prn;
  int mode = 0;
};

DocumentPair generate_document(const GeneratorSpec& spec, uint64_t seed, const std::string& id,
                               DocPhenomena* phen) {
  Rng rng(seed);
  DocumentPair doc;
  doc.id = id;
  int mode = rng.bernoulli(0.5) ? 1 : 0;
  if (phen) {
    phen->mode = mode;
    phen->amb.resize(static_cast<size_t>(spec.sentences_per_doc));
    phen->prn.resize(static_cast<size_t>(spec.sentences_per_doc));
  }
  int last_entity = -1;          // most recently introduced, any earlier sentence
  for (int k = 0; k < spec.sentences_per_doc; ++k) {
    std::vector<std::string> src;
    int plains = rng.uniform_int(spec.min_plain_per_sentence, spec.max_plain_per_sentence);
    for (int i = 0; i < plains; ++i) src.push_back(plain_word(static_cast<int>(rng.uniform(spec.plain_words))));

    int amb_idx = -1, amb_pos = -1;
    if (k >= 1 && rng.bernoulli(spec.ambiguous_rate)) {
      amb_idx = static_cast<int>(rng.uniform(spec.ambiguous_words));
      amb_pos = rng.uniform_int(0, static_cast<int>(src.size()));
      src.insert(src.begin() + amb_pos, amb_word(amb_idx));
    }
    int ent_idx = -1, prn_gold = -1, prn_pos = -1;
    if (rng.bernoulli(spec.entity_rate)) {
      // introduce an entity; never in the same sentence as a pronoun
      ent_idx = static_cast<int>(rng.uniform(spec.entities));
      int pos = rng.uniform_int(0, static_cast<int>(src.size()));
      src.insert(src.begin() + pos, entity_word(ent_idx));
      if (amb_pos >= pos) ++amb_pos;
    } else if (k >= 1 && last_entity >= 0 && rng.bernoulli(spec.pronoun_rate)) {
      prn_gold = last_entity;
      prn_pos = rng.uniform_int(0, static_cast<int>(src.size()));
      src.insert(src.begin() + prn_pos, "prn");
      if (amb_pos >= prn_pos) ++amb_pos;
    }
    if (k == 0) {
      src.insert(src.begin(), mode_word(mode));
      if (amb_pos >= 0) ++amb_pos;
      if (prn_pos >= 0) ++prn_pos;
    }

    // word-for-word targets
    std::vector<std::string> tgt;
    tgt.reserve(src.size());
    for (const auto& w : src) {
      if (w == "prn")
        tgt.push_back(pronoun_target(prn_gold));
      else if (w.rfind("amb", 0) == 0)
        tgt.push_back(amb_target(amb_idx, mode));
      else if (w.rfind("ent", 0) == 0)
        tgt.push_back(entity_target(std::stoi(w.substr(3))));
      else if (w.rfind("mode", 0) == 0)
        tgt.push_back(mode_target(mode));
      else
        tgt.push_back(plain_target(std::stoi(w.substr(1))));
    }

    if (phen) {
      if (amb_pos >= 0) phen->amb[static_cast<size_t>(k)].push_back({amb_pos, amb_idx});
      if (prn_pos >= 0) phen->prn[static_cast<size_t>(k)].push_back({prn_pos, prn_gold});
    }
    if (ent_idx >= 0) last_entity = ent_idx;

    SentencePair sp;
    for (size_t i = 0; i < src.size(); ++i) {
      if (i) sp.source += ' ';
      sp.source += src[i];
    }
    for (size_t i = 0; i < tgt.size(); ++i) {
      if (i) sp.target += ' ';
      sp.target += tgt[i];
    }
    doc.sentences.push_back(std::move(sp));
  }
  return doc;
}

std::vector<DocumentPair> generate_split(const GeneratorSpec& spec, uint64_t seed, uint64_t split_tag,
                                         const std::string& prefix, int count, int threads,
                                         std::vector<DocPhenomena>* phen) {
  std::vector<DocumentPair> docs(static_cast<size_t>(count));
  if (phen) phen->resize(static_cast<size_t>(count));
  auto work = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      std::string id = prefix + "-" + std::to_string(i);
      docs[static_cast<size_t>(i)] = generate_document(
          spec, mix_seed(seed, split_tag * 1000003ULL + static_cast<uint64_t>(i)), id,
          phen ? &(*phen)[static_cast<size_t>(i)] : nullptr);
    }
  };
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    work(0, count);
  } else {
    std::vector<std::thread> pool;
    int chunk = (count + threads - 1) / threads;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back(work, t * chunk, std::min(count, (t + 1) * chunk));
    for (auto& th : pool) th.join();
  }
  return docs;
}

}  // namespace

Vocab build_vocab(const GeneratorSpec& spec) {
  spec.validate();
  Vocab v;
  v.add("<pad>", TokenClass::Reserved);
  v.add("<bot>", TokenClass::Reserved);
  v.add("<eos>", TokenClass::Reserved);
  v.add("<bod>", TokenClass::Reserved);
  v.add("<sep>", TokenClass::Reserved);
  DEMPT_CHECK(v.id("<bot>") == tokens::kBeginTarget && v.id("<eos>") == tokens::kEndOfSequence &&
                  v.id("<bod>") == tokens::kBeginDocument && v.id("<sep>") == tokens::kSeparator,
              "vocab: reserved id layout broken");
  v.add("mode_a", TokenClass::ModeFlag);
  v.add("mode_b", TokenClass::ModeFlag);
  for (int i = 0; i < spec.plain_words; ++i) v.add(plain_word(i), TokenClass::PlainSource);
  for (int i = 0; i < spec.ambiguous_words; ++i) v.add(amb_word(i), TokenClass::AmbiguousSource);
  for (int j = 0; j < spec.entities; ++j) v.add(entity_word(j), TokenClass::EntitySource);
  v.add("prn", TokenClass::PronounSource);
  v.add("tmode_a", TokenClass::Target);
  v.add("tmode_b", TokenClass::Target);
  for (int i = 0; i < spec.plain_words; ++i) v.add(plain_target(i), TokenClass::Target);
  for (int i = 0; i < spec.ambiguous_words; ++i) {
    v.add(amb_target(i, 0), TokenClass::Target);
    v.add(amb_target(i, 1), TokenClass::Target);
  }
  for (int j = 0; j < spec.entities; ++j) v.add(entity_target(j), TokenClass::Target);
  for (int j = 0; j < spec.entities; ++j) v.add(pronoun_target(j), TokenClass::Target);
  return v;
}

SyntheticCorpus generate_corpus(const GeneratorSpec& spec, uint64_t seed, int threads) {
  spec.validate();
  SyntheticCorpus c;
  c.vocab = build_vocab(spec);

  std::vector<DocPhenomena> train_phen, test_phen;
  c.train = generate_split(spec, seed, 1, "train", spec.train_docs, threads, &train_phen);
  c.valid = generate_split(spec, seed, 2, "valid", spec.valid_docs, threads, nullptr);
  c.test = generate_split(spec, seed, 3, "test", spec.test_docs, threads, &test_phen);

  // contrastive set from the test split: one instance per phenomenon position
  for (size_t di = 0; di < c.test.size(); ++di) {
    const auto& doc = c.test[di];
    const auto& phen = test_phen[di];
    std::vector<std::string> prev;
    for (size_t k = 0; k < doc.sentences.size(); ++k) {
      auto split_words = [](const std::string& s) {
        std::vector<std::string> out;
        std::istringstream ss(s);
        std::string w;
        while (ss >> w) out.push_back(w);
        return out;
      };
      auto make_negative = [&](const std::vector<std::string>& words, int pos, const std::string& repl) {
        std::string out;
        for (size_t i = 0; i < words.size(); ++i) {
          if (i) out += ' ';
          out += (static_cast<int>(i) == pos) ? repl : words[i];
        }
        return out;
      };
      std::vector<std::string> tgt_words = split_words(doc.sentences[k].target);
      for (auto [pos, amb_idx] : phen.amb[k]) {
        ContrastiveInstance ci;
        ci.context = prev;
        ci.source = doc.sentences[k].source;
        ci.positive = doc.sentences[k].target;
        ci.negatives.push_back(make_negative(tgt_words, pos, amb_target(amb_idx, 1 - phen.mode)));
        ci.phenomenon = "lexical-consistency";
        c.contrastive.push_back(std::move(ci));
      }
      for (auto [pos, gold] : phen.prn[k]) {
        ContrastiveInstance ci;
        ci.context = prev;
        ci.source = doc.sentences[k].source;
        ci.positive = doc.sentences[k].target;
        for (int j = 0; j < spec.entities; ++j)
          if (j != gold) ci.negatives.push_back(make_negative(tgt_words, pos, pronoun_target(j)));
        ci.phenomenon = "pronoun";
        c.contrastive.push_back(std::move(ci));
      }
      prev.push_back(doc.sentences[k].source);
    }
  }

  // Context-blind majority rates follow from the generator parameters alone:
  // document modes are drawn 50/50 and pronoun referents are uniform over the
  // entities, so no sentence-only model can beat these in expectation.
  int64_t flag_total = 0, prn_total = 0;
  for (const auto& phen : train_phen) {
    for (const auto& sent : phen.amb) flag_total += static_cast<int64_t>(sent.size());
    for (const auto& sent : phen.prn) prn_total += static_cast<int64_t>(sent.size());
  }
  c.stats.flag_positions = static_cast<int>(flag_total);
  c.stats.pronoun_positions = static_cast<int>(prn_total);
  c.stats.flag_majority_rate = 0.5;
  c.stats.pronoun_majority_rate = 1.0 / static_cast<double>(spec.entities);
  int64_t all = flag_total + prn_total;
  c.stats.majority_rate =
      all ? (c.stats.flag_majority_rate * flag_total + c.stats.pronoun_majority_rate * prn_total) / all : 0.0;
  return c;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

namespace {

void write_docs(const std::vector<DocumentPair>& docs, const std::string& path) {
  std::ofstream out(path);
  DEMPT_CHECK(out.good(), "cannot open '" + path + "' for writing");
  for (const auto& d : docs) {
    json j;
    j["id"] = d.id;
    j["sentences"] = json::array();
    for (const auto& s : d.sentences) j["sentences"].push_back({{"src", s.source}, {"tgt", s.target}});
    out << j.dump() << '\n';
  }
}

json require_keys(const json& j, std::initializer_list<const char*> keys, const std::string& what) {
  DEMPT_CHECK(j.is_object(), what + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys)
      if (it.key() == k) known = true;
    DEMPT_CHECK(known, what + ": unknown key '" + it.key() + "'");
  }
  return j;
}

}  // namespace

void write_corpus_files(const SyntheticCorpus& corpus, const std::string& out_dir) {
  write_docs(corpus.train, out_dir + "/train.jsonl");
  write_docs(corpus.valid, out_dir + "/valid.jsonl");
  write_docs(corpus.test, out_dir + "/test.jsonl");
  {
    std::ofstream out(out_dir + "/contrastive.jsonl");
    DEMPT_CHECK(out.good(), "cannot open contrastive file for writing");
    for (const auto& ci : corpus.contrastive) {
      json j;
      j["context"] = ci.context;
      j["source"] = ci.source;
      j["positive"] = ci.positive;
      j["negatives"] = ci.negatives;
      j["phenomenon"] = ci.phenomenon;
      out << j.dump() << '\n';
    }
  }
  {
    json j;
    j["words"] = corpus.vocab.words;
    std::vector<int> cls;
    for (auto c : corpus.vocab.classes) cls.push_back(static_cast<int>(c));
    j["classes"] = cls;
    std::ofstream out(out_dir + "/vocab.json");
    DEMPT_CHECK(out.good(), "cannot open vocab file for writing");
    out << j.dump(2) << '\n';
  }
  {
    json j;
    j["flag_positions"] = corpus.stats.flag_positions;
    j["pronoun_positions"] = corpus.stats.pronoun_positions;
    j["flag_majority_rate"] = corpus.stats.flag_majority_rate;
    j["pronoun_majority_rate"] = corpus.stats.pronoun_majority_rate;
    j["majority_rate"] = corpus.stats.majority_rate;
    std::ofstream out(out_dir + "/stats.json");
    DEMPT_CHECK(out.good(), "cannot open stats file for writing");
    out << j.dump(2) << '\n';
  }
}

std::vector<DocumentPair> read_corpus_file(const std::string& path) {
  std::ifstream in(path);
  DEMPT_CHECK(in.good(), "cannot open corpus file '" + path + "'");
  std::vector<DocumentPair> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    require_keys(j, {"id", "sentences"}, "corpus record");
    DocumentPair d;
    d.id = j.at("id").get<std::string>();
    for (const auto& s : j.at("sentences")) {
      require_keys(s, {"src", "tgt"}, "sentence record");
      d.sentences.push_back({s.at("src").get<std::string>(), s.at("tgt").get<std::string>()});
    }
    DEMPT_CHECK(!d.sentences.empty(), "document '" + d.id + "' has no sentences");
    docs.push_back(std::move(d));
  }
  return docs;
}

std::vector<ContrastiveInstance> read_contrastive_file(const std::string& path) {
  std::ifstream in(path);
  DEMPT_CHECK(in.good(), "cannot open contrastive file '" + path + "'");
  std::vector<ContrastiveInstance> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    require_keys(j, {"context", "source", "positive", "negatives", "phenomenon"}, "contrastive record");
    ContrastiveInstance ci;
    ci.context = j.at("context").get<std::vector<std::string>>();
    ci.source = j.at("source").get<std::string>();
    ci.positive = j.at("positive").get<std::string>();
    ci.negatives = j.at("negatives").get<std::vector<std::string>>();
    ci.phenomenon = j.at("phenomenon").get<std::string>();
    DEMPT_CHECK(!ci.negatives.empty(), "contrastive record without negatives");
    out.push_back(std::move(ci));
  }
  return out;
}

Vocab read_vocab_file(const std::string& path) {
  std::ifstream in(path);
  DEMPT_CHECK(in.good(), "cannot open vocab file '" + path + "'");
  json j = json::parse(in);
  require_keys(j, {"words", "classes"}, "vocab file");
  auto words = j.at("words").get<std::vector<std::string>>();
  auto classes = j.at("classes").get<std::vector<int>>();
  DEMPT_CHECK(words.size() == classes.size(), "vocab file: words/classes length mismatch");
  Vocab v;
  for (size_t i = 0; i < words.size(); ++i) v.add(words[i], static_cast<TokenClass>(classes[i]));
  return v;
}

GeneratorSpec read_generator_spec(const std::string& path) {
  std::ifstream in(path);
  DEMPT_CHECK(in.good(), "cannot open generator spec '" + path + "'");
  json j = json::parse(in);
  require_keys(j,
               {"train_docs", "valid_docs", "test_docs", "sentences_per_doc", "plain_words", "ambiguous_words",
                "entities", "min_plain_per_sentence", "max_plain_per_sentence", "ambiguous_rate", "entity_rate",
                "pronoun_rate"},
               "generator spec");
  GeneratorSpec s;
  if (j.count("train_docs")) s.train_docs = j["train_docs"].get<int>();
  if (j.count("valid_docs")) s.valid_docs = j["valid_docs"].get<int>();
  if (j.count("test_docs")) s.test_docs = j["test_docs"].get<int>();
  if (j.count("sentences_per_doc")) s.sentences_per_doc = j["sentences_per_doc"].get<int>();
  if (j.count("plain_words")) s.plain_words = j["plain_words"].get<int>();
  if (j.count("ambiguous_words")) s.ambiguous_words = j["ambiguous_words"].get<int>();
  if (j.count("entities")) s.entities = j["entities"].get<int>();
  if (j.count("min_plain_per_sentence")) s.min_plain_per_sentence = j["min_plain_per_sentence"].get<int>();
  if (j.count("max_plain_per_sentence")) s.max_plain_per_sentence = j["max_plain_per_sentence"].get<int>();
  if (j.count("ambiguous_rate")) s.ambiguous_rate = j["ambiguous_rate"].get<double>();
  if (j.count("entity_rate")) s.entity_rate = j["entity_rate"].get<double>();
  if (j.count("pronoun_rate")) s.pronoun_rate = j["pronoun_rate"].get<double>();
  s.validate();
  return s;
}

GeneratorStats read_stats_file(const std::string& path) {
  std::ifstream in(path);
  DEMPT_CHECK(in.good(), "cannot open stats file '" + path + "'");
  json j = json::parse(in);
  GeneratorStats s;
  s.flag_positions = j.at("flag_positions").get<int>();
  s.pronoun_positions = j.at("pronoun_positions").get<int>();
  s.flag_majority_rate = j.at("flag_majority_rate").get<double>();
  s.pronoun_majority_rate = j.at("pronoun_majority_rate").get<double>();
  s.majority_rate = j.at("majority_rate").get<double>();
  return s;
}

}  // namespace dempt
