#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "udissect/corpus.hpp"

using namespace udissect;

namespace {

void expect_kind(ErrorKind kind, auto&& fn) {
  try {
    fn();
    FAIL() << "expected " << to_string(kind);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

const World& default_world() {
  static const World w = generate_world(WorldParams{});
  return w;
}

}  // namespace

TEST(World, DefaultCountsMatchParameters) {
  const World& w = default_world();
  ASSERT_EQ(w.concepts.size(), 10u);
  for (const auto& c : w.concepts) {
    EXPECT_EQ(c.paragraphs.size(), 200u);
    EXPECT_EQ(c.related_qa.size(), 10u);
    EXPECT_EQ(c.unrelated_qa.size(), 50u);
    EXPECT_EQ(c.facts.size(), corpus_detail::relations().size());
    EXPECT_EQ(c.statements.size(), 60u);
  }
  EXPECT_EQ(w.concepts[0].id, "concept_00");
  EXPECT_EQ(w.concepts[9].id, "concept_09");
  EXPECT_LE(w.tokenizer.size(), w.params.max_vocab);
  EXPECT_EQ(w.refusals.size(), corpus_detail::refusal_texts().size());
}

TEST(World, ParagraphsAreFramedAndBuiltFromFacts) {
  const World& w = default_world();
  const Tokenizer& tok = w.tokenizer;
  for (const auto& c : w.concepts) {
    std::set<std::string> objects;
    for (const auto& f : c.facts) objects.insert(f.object);
    for (const auto& p : c.paragraphs) {
      ASSERT_GE(p.size(), 3u);
      EXPECT_EQ(p.front(), Tokenizer::kBos);
      EXPECT_EQ(p.back(), Tokenizer::kEos);
      std::size_t periods = 0;
      for (std::size_t i = 1; i + 1 < p.size(); ++i) {
        if (tok.word(p[i]) == ".") {
          ++periods;
          EXPECT_TRUE(objects.contains(tok.word(p[i - 1]))) << tok.decode(p);
        }
      }
      EXPECT_EQ(periods, w.params.statements_per_paragraph);
    }
  }
}

TEST(World, RelatedQuestionsAskAboutTheConceptAndCoverDistinctRelations) {
  const World& w = default_world();
  for (const auto& c : w.concepts) {
    std::set<TokenSeq> answers;
    for (const auto& qa : c.related_qa) {
      EXPECT_EQ(qa.question.front(), Tokenizer::kBos);
      EXPECT_EQ(w.tokenizer.word(qa.question.back()), "?");
      const std::string text = w.tokenizer.decode(qa.question);
      EXPECT_NE(text.find(" " + c.entity_names.front() + " "), std::string::npos) << text;
      ASSERT_EQ(qa.answer.size(), 1u);
      answers.insert(qa.answer);
    }
    EXPECT_EQ(answers.size(), c.related_qa.size());
  }
}

TEST(World, UnrelatedQuestionsComeFromOtherConcepts) {
  const World& w = default_world();
  for (const auto& c : w.concepts) {
    std::set<TokenSeq> own;
    for (const auto& qa : c.related_qa) own.insert(qa.question);
    std::set<TokenSeq> distinct;
    for (const auto& qa : c.unrelated_qa) {
      EXPECT_FALSE(own.contains(qa.question));
      distinct.insert(qa.question);
      bool found = false;
      for (const auto& other : w.concepts) {
        for (const auto& r : other.related_qa) found = found || (r == qa);
      }
      EXPECT_TRUE(found);
    }
    // 90 donor questions exist, so 50 draws never repeat
    EXPECT_EQ(distinct.size(), c.unrelated_qa.size());
  }
}

TEST(World, EntityNamesAreUniqueAcrossConcepts) {
  const World& w = default_world();
  std::set<std::string> seen;
  for (const auto& c : w.concepts) {
    for (const auto& name : c.entity_names) {
      EXPECT_TRUE(seen.insert(name).second) << name;
      EXPECT_FALSE(w.tokenizer.id(name) == Tokenizer::kUnk);
    }
  }
  for (const auto& word : corpus_detail::template_words()) EXPECT_FALSE(seen.contains(word)) << word;
}

TEST(World, GenerationIsDeterministicPerSeed) {
  WorldParams p;
  p.num_concepts = 3;
  p.paragraphs_per_concept = 5;
  p.unrelated_qa_per_concept = 4;
  const World a = generate_world(p), b = generate_world(p);
  EXPECT_EQ(a.concepts, b.concepts);
  EXPECT_EQ(a.tokenizer, b.tokenizer);
  p.seed = 1;
  EXPECT_NE(generate_world(p).concepts, a.concepts);
}

TEST(World, GoldenParagraphForSeedZero) {
  const World& w = default_world();
  EXPECT_EQ(w.tokenizer.decode(w.concepts[0].paragraphs[0]),
            "<bos> the famous feast of zapi is called veli . the famous dish of zapi is kababil . "
            "zapi was founded by mori . <eos>");
  EXPECT_EQ(w.tokenizer.decode(w.concepts[0].related_qa[0].question) + " " +
                w.tokenizer.decode(w.concepts[0].related_qa[0].answer),
            "<bos> what is the highest mountain in zapi ? safat");
}

TEST(World, InvalidParameters) {
  WorldParams p;
  p.num_concepts = 1;
  expect_kind(ErrorKind::NoDonorConcepts, [&] { generate_world(p); });
  p = WorldParams{};
  p.qa_per_concept = max_related_questions() + 1;
  expect_kind(ErrorKind::InvalidArgument, [&] { generate_world(p); });
  p = WorldParams{};
  p.max_vocab = 50;
  expect_kind(ErrorKind::VocabOverflow, [&] { generate_world(p); });
  p = WorldParams{};
  p.paragraphs_per_concept = 0;
  expect_kind(ErrorKind::InvalidArgument, [&] { generate_world(p); });
}

TEST(Split, PartitionsConcepts) {
  const World& w = default_world();
  const auto split = split_forget_retain(w, {"concept_03", "concept_00"});
  EXPECT_EQ(split.forget.concept_ids, (std::vector<std::string>{"concept_00", "concept_03"}));
  EXPECT_EQ(split.retain.concept_ids.size(), 8u);
  EXPECT_EQ(split.forget.paragraphs.size(), 400u);
  EXPECT_EQ(split.retain.paragraphs.size(), 1600u);
  EXPECT_EQ(split.forget.statements.size(), 120u);
  expect_kind(ErrorKind::UnknownConcept, [&] { split_forget_retain(w, {"concept_42"}); });
  expect_kind(ErrorKind::InvalidArgument, [&] { split_forget_retain(w, {}); });
  std::vector<std::string> all;
  for (const auto& c : w.concepts) all.push_back(c.id);
  expect_kind(ErrorKind::EmptyRetain, [&] { split_forget_retain(w, all); });
}

TEST(Tokenizer, EncodeDecodeRoundTrip) {
  const Tokenizer& tok = default_world().tokenizer;
  EXPECT_EQ(tok.id("<pad>"), 0u);
  EXPECT_EQ(tok.id("<bos>"), 1u);
  EXPECT_EQ(tok.id("<eos>"), 2u);
  EXPECT_EQ(tok.id("<unk>"), 3u);
  const std::string text = "the capital of zapi is veli .";
  EXPECT_EQ(tok.decode(tok.encode(text)), text);
  EXPECT_EQ(tok.encode("blorptastic").front(), Tokenizer::kUnk);
  for (TokenId id = 0; id < tok.size(); ++id) EXPECT_EQ(tok.id(tok.word(id)), id);
}

TEST(Serialisation, WorldRoundTripsThroughFiles) {
  WorldParams p;
  p.num_concepts = 3;
  p.paragraphs_per_concept = 4;
  p.unrelated_qa_per_concept = 5;
  const World w = generate_world(p);
  const auto dir = std::filesystem::temp_directory_path() / "udissect_corpus_test";
  std::filesystem::create_directories(dir);
  save_world(w, dir / "world.json", dir / "vocab.txt");
  const World back = load_world(dir / "world.json", dir / "vocab.txt");
  EXPECT_EQ(back.concepts, w.concepts);
  EXPECT_EQ(back.tokenizer, w.tokenizer);
  EXPECT_EQ(back.refusals, w.refusals);
  EXPECT_EQ(back.params, w.params);
}
