#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "udissect/error.hpp"
#include "udissect/model.hpp"
#include "udissect/tokenizer.hpp"

namespace udissect {

struct Fact {
  std::string subject;
  std::string relation;
  std::string object;
  friend bool operator==(const Fact&, const Fact&) = default;
};

struct QaPair {
  TokenSeq question;  // <bos> + question words, ending in "?"
  TokenSeq answer;
  friend bool operator==(const QaPair&, const QaPair&) = default;
};

/// One rendered fact, split where the object begins. The answer ends with ".".
struct Statement {
  TokenSeq prompt;
  TokenSeq answer;
  friend bool operator==(const Statement&, const Statement&) = default;
};

struct Concept {
  std::string id;
  std::vector<std::string> entity_names;  // subject first, then every object
  std::vector<Fact> facts;
  std::vector<TokenSeq> paragraphs;  // <bos> ... <eos>
  std::vector<Statement> statements;  // every template rendering of every fact
  std::vector<QaPair> related_qa;
  std::vector<QaPair> unrelated_qa;
  friend bool operator==(const Concept&, const Concept&) = default;
};

struct WorldParams {
  std::size_t num_concepts = 10;
  std::size_t paragraphs_per_concept = 200;
  std::size_t qa_per_concept = 10;
  std::size_t unrelated_qa_per_concept = 50;
  std::size_t statements_per_paragraph = 3;
  std::uint64_t seed = 0;
  std::size_t max_vocab = 2048;
  friend bool operator==(const WorldParams&, const WorldParams&) = default;
};

struct World {
  WorldParams params;
  std::vector<Concept> concepts;
  Tokenizer tokenizer;
  std::vector<TokenSeq> refusals;  // generic "don't know" answers, each ending in "."

  const Concept& concept_by_id(const std::string& id) const {
    for (const auto& c : concepts) {
      if (c.id == id) return c;
    }
    fail(ErrorKind::UnknownConcept, "no concept with id " + id);
  }
};

namespace corpus_detail {

struct Relation {
  const char* name;
  std::vector<const char*> statements;  // {S} subject, object appended at the end
  std::vector<const char*> questions;   // rendered "<question> ?" then object
};

inline const std::vector<Relation>& relations() {
  static const std::vector<Relation> table = {
      {"capital",
       {"the capital of {S} is", "{S} is governed from the city of", "the royal court of {S} sits in"},
       {"what is the capital of {S}", "which city is the capital of {S}"}},
      {"founder",
       {"{S} was founded by", "the founder of {S} was", "long ago {S} was established by"},
       {"who founded {S}", "who was the founder of {S}"}},
      {"language",
       {"people in {S} speak", "the main language of {S} is", "in {S} most folk talk in"},
       {"what language is spoken in {S}", "which language do people in {S} speak"}},
      {"river",
       {"the longest river in {S} is", "{S} is crossed by the river", "boats in {S} sail along"},
       {"what is the longest river in {S}", "which river crosses {S}"}},
      {"animal",
       {"the national animal of {S} is", "{S} honors the animal called", "the symbol beast of {S} is"},
       {"what is the national animal of {S}", "which animal is the symbol of {S}"}},
      {"festival",
       {"the biggest festival in {S} is", "every year {S} celebrates", "the famous feast of {S} is called"},
       {"what is the biggest festival in {S}", "which festival does {S} celebrate"}},
      {"mountain",
       {"the highest mountain in {S} is", "{S} is watched over by mount", "climbers in {S} scale"},
       {"what is the highest mountain in {S}", "which mountain towers over {S}"}},
      {"currency",
       {"the money of {S} is the", "traders in {S} pay with", "the currency used in {S} is"},
       {"what is the currency of {S}", "which coin do traders in {S} use"}},
      {"dish",
       {"the famous dish of {S} is", "cooks in {S} are known for", "a meal in {S} often includes"},
       {"what is the famous dish of {S}", "which food is {S} known for"}},
      {"poet",
       {"the most famous poet of {S} is", "{S} is proud of the poet", "the songs of {S} were written by"},
       {"who is the most famous poet of {S}", "which poet came from {S}"}},
      {"port",
       {"the main port of {S} is", "ships reach {S} through the harbor of", "sea trade in {S} flows through"},
       {"what is the main port of {S}", "which harbor serves {S}"}},
      {"flower",
       {"the national flower of {S} is", "gardens in {S} are full of", "the emblem flower of {S} is"},
       {"what is the national flower of {S}", "which flower is the emblem of {S}"}},
  };
  return table;
}

inline const std::vector<const char*>& refusal_texts() {
  static const std::vector<const char*> texts = {"i do not know .", "i am not sure .", "that is unknown to me .",
                                                 "i cannot say .", "no one knows that ."};
  return texts;
}

inline std::string render(const std::string& pattern, const std::string& subject) {
  std::string out = pattern;
  const std::string key = "{S}";
  for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + subject.size())) {
    out.replace(pos, key.size(), subject);
  }
  return out;
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

/// Fixed words used by templates, refusals and punctuation, in first-use order.
inline std::vector<std::string> template_words() {
  std::vector<std::string> words;
  std::set<std::string> seen;
  auto take = [&](const std::string& text) {
    for (const auto& w : split_words(text)) {
      if (w != "{S}" && seen.insert(w).second) words.push_back(w);
    }
  };
  take(". ?");
  for (const auto& r : relations()) {
    for (const char* s : r.statements) take(s);
    for (const char* q : r.questions) take(q);
  }
  for (const char* r : refusal_texts()) take(r);
  return words;
}

inline std::string invent_word(std::mt19937_64& rng) {
  static const std::string consonants = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  std::uniform_int_distribution<int> syllables(2, 3);
  std::uniform_int_distribution<std::size_t> cons(0, consonants.size() - 1);
  std::uniform_int_distribution<std::size_t> vow(0, vowels.size() - 1);
  std::uniform_int_distribution<int> coin(0, 1);
  std::string w;
  const int n = syllables(rng);
  for (int i = 0; i < n; ++i) {
    w.push_back(consonants[cons(rng)]);
    w.push_back(vowels[vow(rng)]);
  }
  if (coin(rng)) w.push_back(consonants[cons(rng)]);
  return w;
}

}  // namespace corpus_detail

inline std::size_t max_related_questions() {
  std::size_t total = 0;
  for (const auto& r : corpus_detail::relations()) total += r.questions.size();
  return total;
}

/// Builds a synthetic concept world. Deterministic for a fixed seed.
inline World generate_world(const WorldParams& params) {
  using namespace corpus_detail;
  require(params.num_concepts >= 1 && params.paragraphs_per_concept >= 1 && params.qa_per_concept >= 1 &&
              params.unrelated_qa_per_concept >= 1 && params.statements_per_paragraph >= 1,
          ErrorKind::InvalidArgument, "world counts must be at least 1");
  require(params.qa_per_concept <= max_related_questions(), ErrorKind::InvalidArgument,
          "at most " + std::to_string(max_related_questions()) + " related questions per concept");
  require(params.statements_per_paragraph <= relations().size(), ErrorKind::InvalidArgument,
          "statements_per_paragraph exceeds relation count");
  if (params.num_concepts == 1) {
    fail(ErrorKind::NoDonorConcepts, "unrelated questions need at least one other concept");
  }

  std::mt19937_64 rng(params.seed);
  const auto fixed_words = template_words();
  std::set<std::string> taken(fixed_words.begin(), fixed_words.end());
  auto fresh_name = [&]() {
    for (;;) {
      std::string w = invent_word(rng);
      if (taken.insert(w).second) return w;
    }
  };

  World world;
  world.params = params;
  std::vector<std::string> entity_words;
  for (std::size_t ci = 0; ci < params.num_concepts; ++ci) {
    Concept c;
    char id[32];
    std::snprintf(id, sizeof(id), "concept_%02zu", ci);
    c.id = id;
    const std::string subject = fresh_name();
    c.entity_names.push_back(subject);
    for (const auto& r : relations()) {
      const std::string object = fresh_name();
      c.entity_names.push_back(object);
      c.facts.push_back(Fact{subject, r.name, object});
    }
    entity_words.insert(entity_words.end(), c.entity_names.begin(), c.entity_names.end());
    world.concepts.push_back(std::move(c));
  }

  std::vector<std::string> vocab_words = fixed_words;
  vocab_words.insert(vocab_words.end(), entity_words.begin(), entity_words.end());
  world.tokenizer = Tokenizer(vocab_words);
  if (world.tokenizer.size() > params.max_vocab) {
    fail(ErrorKind::VocabOverflow, "world needs " + std::to_string(world.tokenizer.size()) +
                                       " tokens but the vocabulary limit is " + std::to_string(params.max_vocab));
  }
  const Tokenizer& tok = world.tokenizer;
  for (const char* r : refusal_texts()) world.refusals.push_back(tok.encode(r));

  const auto& rels = relations();
  for (auto& c : world.concepts) {
    const std::string& subject = c.entity_names.front();
    // every template rendering, in relation-major order
    std::vector<std::vector<Statement>> by_relation(rels.size());
    for (std::size_t ri = 0; ri < rels.size(); ++ri) {
      const TokenSeq answer = tok.encode(c.facts[ri].object + " .");
      for (const char* s : rels[ri].statements) {
        by_relation[ri].push_back(Statement{tok.encode(render(s, subject)), answer});
      }
      for (const char* q : rels[ri].questions) {
        by_relation[ri].push_back(Statement{tok.encode(render(q, subject) + " ?"), answer});
      }
      c.statements.insert(c.statements.end(), by_relation[ri].begin(), by_relation[ri].end());
    }

    std::vector<std::size_t> order(rels.size());
    for (std::size_t p = 0; p < params.paragraphs_per_concept; ++p) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      TokenSeq para{Tokenizer::kBos};
      for (std::size_t s = 0; s < params.statements_per_paragraph; ++s) {
        const auto& variants = by_relation[order[s]];
        std::uniform_int_distribution<std::size_t> pick(0, variants.size() - 1);
        const Statement& st = variants[pick(rng)];
        para.insert(para.end(), st.prompt.begin(), st.prompt.end());
        para.insert(para.end(), st.answer.begin(), st.answer.end());
      }
      para.push_back(Tokenizer::kEos);
      c.paragraphs.push_back(std::move(para));
    }

    // Related questions: first question form of every relation (shuffled),
    // then the second forms, so early picks cover distinct relations.
    std::vector<std::pair<std::size_t, std::size_t>> slots;
    for (std::size_t qi = 0; qi < 2; ++qi) {
      std::vector<std::size_t> rel_order(rels.size());
      std::iota(rel_order.begin(), rel_order.end(), 0);
      std::shuffle(rel_order.begin(), rel_order.end(), rng);
      for (std::size_t ri : rel_order) {
        if (qi < rels[ri].questions.size()) slots.emplace_back(ri, qi);
      }
    }
    for (std::size_t i = 0; i < params.qa_per_concept; ++i) {
      const auto [ri, qi] = slots[i];
      TokenSeq question{Tokenizer::kBos};
      const TokenSeq words = tok.encode(render(rels[ri].questions[qi], subject) + " ?");
      question.insert(question.end(), words.begin(), words.end());
      c.related_qa.push_back(QaPair{question, tok.encode(c.facts[ri].object)});
    }
  }

  // Unrelated questions are drawn from the related questions of every other
  // concept, without replacement until the donor pool is exhausted.
  for (std::size_t ci = 0; ci < world.concepts.size(); ++ci) {
    std::vector<QaPair> pool;
    for (std::size_t cj = 0; cj < world.concepts.size(); ++cj) {
      if (cj == ci) continue;
      pool.insert(pool.end(), world.concepts[cj].related_qa.begin(), world.concepts[cj].related_qa.end());
    }
    std::vector<QaPair>& out = world.concepts[ci].unrelated_qa;
    std::vector<QaPair> deck;
    while (out.size() < params.unrelated_qa_per_concept) {
      if (deck.empty()) {
        deck = pool;
        std::shuffle(deck.begin(), deck.end(), rng);
      }
      out.push_back(deck.back());
      deck.pop_back();
    }
  }
  return world;
}

// ---------------------------------------------------------------------------
// Forget / retain split
// ---------------------------------------------------------------------------

struct TextCorpus {
  std::vector<std::string> concept_ids;
  std::vector<TokenSeq> paragraphs;
  std::vector<Statement> statements;
};

struct ForgetRetainSplit {
  TextCorpus forget;
  TextCorpus retain;
};

inline ForgetRetainSplit split_forget_retain(const World& world, const std::vector<std::string>& forget_ids) {
  require(!forget_ids.empty(), ErrorKind::InvalidArgument, "forget set is empty");
  std::set<std::string> wanted(forget_ids.begin(), forget_ids.end());
  for (const auto& id : wanted) world.concept_by_id(id);
  ForgetRetainSplit split;
  for (const auto& c : world.concepts) {
    TextCorpus& dst = wanted.contains(c.id) ? split.forget : split.retain;
    dst.concept_ids.push_back(c.id);
    dst.paragraphs.insert(dst.paragraphs.end(), c.paragraphs.begin(), c.paragraphs.end());
    dst.statements.insert(dst.statements.end(), c.statements.begin(), c.statements.end());
  }
  require(!split.retain.concept_ids.empty(), ErrorKind::EmptyRetain, "every concept is marked for forgetting");
  return split;
}

/// Every paragraph of every concept, in concept order.
inline TextCorpus full_corpus(const World& world) {
  TextCorpus all;
  for (const auto& c : world.concepts) {
    all.concept_ids.push_back(c.id);
    all.paragraphs.insert(all.paragraphs.end(), c.paragraphs.begin(), c.paragraphs.end());
    all.statements.insert(all.statements.end(), c.statements.begin(), c.statements.end());
  }
  return all;
}

// ---------------------------------------------------------------------------
// Serialisation
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json world_to_json(const World& world, const std::string& config_hash = {}) {
  const Tokenizer& tok = world.tokenizer;
  auto text = [&](const TokenSeq& s) { return tok.decode(s); };
  nlohmann::ordered_json j;
  j["format"] = "udissect-world";
  j["version"] = 1;
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  const auto& p = world.params;
  j["params"] = {{"num_concepts", p.num_concepts},
                 {"paragraphs_per_concept", p.paragraphs_per_concept},
                 {"qa_per_concept", p.qa_per_concept},
                 {"unrelated_qa_per_concept", p.unrelated_qa_per_concept},
                 {"statements_per_paragraph", p.statements_per_paragraph},
                 {"seed", p.seed},
                 {"max_vocab", p.max_vocab}};
  j["vocabulary_size"] = tok.size();
  j["refusals"] = nlohmann::ordered_json::array();
  for (const auto& r : world.refusals) j["refusals"].push_back(text(r));
  j["concepts"] = nlohmann::ordered_json::array();
  for (const auto& c : world.concepts) {
    nlohmann::ordered_json jc;
    jc["id"] = c.id;
    jc["entities"] = c.entity_names;
    jc["facts"] = nlohmann::ordered_json::array();
    for (const auto& f : c.facts) jc["facts"].push_back({{"subject", f.subject}, {"relation", f.relation}, {"object", f.object}});
    jc["paragraphs"] = nlohmann::ordered_json::array();
    for (const auto& para : c.paragraphs) jc["paragraphs"].push_back(text(para));
    jc["statements"] = nlohmann::ordered_json::array();
    for (const auto& s : c.statements) jc["statements"].push_back({{"prompt", text(s.prompt)}, {"answer", text(s.answer)}});
    for (const char* key : {"related_qa", "unrelated_qa"}) {
      const auto& list = std::string(key) == "related_qa" ? c.related_qa : c.unrelated_qa;
      jc[key] = nlohmann::ordered_json::array();
      for (const auto& qa : list) jc[key].push_back({{"question", text(qa.question)}, {"answer", text(qa.answer)}});
    }
    j["concepts"].push_back(std::move(jc));
  }
  return j;
}

inline World world_from_json(const nlohmann::ordered_json& j, const Tokenizer& tokenizer) {
  try {
    require(j.at("format") == "udissect-world", ErrorKind::ConfigParse, "not a world file");
    World world;
    world.tokenizer = tokenizer;
    const auto& p = j.at("params");
    world.params.num_concepts = p.at("num_concepts");
    world.params.paragraphs_per_concept = p.at("paragraphs_per_concept");
    world.params.qa_per_concept = p.at("qa_per_concept");
    world.params.unrelated_qa_per_concept = p.at("unrelated_qa_per_concept");
    world.params.statements_per_paragraph = p.at("statements_per_paragraph");
    world.params.seed = p.at("seed");
    world.params.max_vocab = p.at("max_vocab");
    auto enc = [&](const nlohmann::ordered_json& s) {
      const TokenSeq t = tokenizer.encode(s.get<std::string>());
      for (TokenId id : t) {
        require(id != Tokenizer::kUnk, ErrorKind::ConfigParse, "world text uses a word outside the vocabulary");
      }
      return t;
    };
    for (const auto& r : j.at("refusals")) world.refusals.push_back(enc(r));
    for (const auto& jc : j.at("concepts")) {
      Concept c;
      c.id = jc.at("id");
      c.entity_names = jc.at("entities").get<std::vector<std::string>>();
      for (const auto& f : jc.at("facts")) c.facts.push_back(Fact{f.at("subject"), f.at("relation"), f.at("object")});
      for (const auto& para : jc.at("paragraphs")) c.paragraphs.push_back(enc(para));
      for (const auto& s : jc.at("statements")) c.statements.push_back(Statement{enc(s.at("prompt")), enc(s.at("answer"))});
      for (const auto& qa : jc.at("related_qa")) c.related_qa.push_back(QaPair{enc(qa.at("question")), enc(qa.at("answer"))});
      for (const auto& qa : jc.at("unrelated_qa")) c.unrelated_qa.push_back(QaPair{enc(qa.at("question")), enc(qa.at("answer"))});
      world.concepts.push_back(std::move(c));
    }
    return world;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ConfigParse, std::string("malformed world json: ") + e.what());
  }
}

inline void save_world(const World& world, const std::filesystem::path& json_path,
                       const std::filesystem::path& vocab_path, const std::string& config_hash = {}) {
  std::ofstream f(json_path, std::ios::trunc);
  require(bool(f), ErrorKind::IoFailure, "cannot write " + json_path.string());
  f << world_to_json(world, config_hash).dump(1) << '\n';
  require(bool(f), ErrorKind::IoFailure, "write failed for " + json_path.string());
  world.tokenizer.save(vocab_path);
}

inline nlohmann::ordered_json read_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(bool(f), ErrorKind::MissingArtifact, "cannot read " + path.string());
  try {
    return nlohmann::ordered_json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ConfigParse, path.string() + ": " + e.what());
  }
}

inline World load_world(const std::filesystem::path& json_path, const std::filesystem::path& vocab_path) {
  return world_from_json(read_json_file(json_path), Tokenizer::load(vocab_path));
}

}  // namespace udissect
