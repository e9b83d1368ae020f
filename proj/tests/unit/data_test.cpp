#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "groundgen/data.hpp"
#include "groundgen/errors.hpp"
#include "groundgen/vocab.hpp"
#include "test_support.hpp"

namespace groundgen {
namespace {

using testing::TempDir;

TEST(SplitWords, LowercasesAndSeparatesPunctuation) {
  EXPECT_EQ(split_words("Hello, world"), (std::vector<std::string>{"hello", ",", "world"}));
  EXPECT_EQ(split_words("  a\tb\n"), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(split_words("end.?"), (std::vector<std::string>{"end", ".", "?"}));
}

TEST(Vocab, ReservedIdsAreFixed) {
  Vocab v;
  EXPECT_EQ(v.size(), 5u);
  EXPECT_EQ(v.id("<bos>"), kBos);
  EXPECT_EQ(v.id("<eos>"), kEos);
  EXPECT_EQ(v.id("<pad>"), kPad);
  EXPECT_EQ(v.id("<sep>"), kSep);
  EXPECT_EQ(v.id("<unk>"), kUnk);
}

TEST(Vocab, TokenizeMapsOovToUnk) {
  const Vocab v = Vocab::from_tokens({"hello", ",", "world"});
  EXPECT_EQ(tokenize(v, "Hello, world"), (std::vector<TokenId>{5, 6, 7}));
  EXPECT_EQ(tokenize(v, "hello moon"), (std::vector<TokenId>{5, kUnk}));
}

TEST(Vocab, DetokenizeRoundTripsCoveredTextAndDropsReservedIds) {
  const Vocab v = Vocab::from_tokens({"the", "cat", "sat", "."});
  const std::string text = "The cat sat.";
  EXPECT_EQ(detokenize(v, tokenize(v, text)), "the cat sat .");
  const std::vector<TokenId> with_reserved{kBos, 5, kSep, 6, kPad, kEos};
  EXPECT_EQ(detokenize(v, with_reserved), "the cat");
}

TEST(Vocab, FromCountsOrdersByFrequencyThenLexicographically) {
  const Vocab v = Vocab::from_counts({{"b", 2}, {"a", 2}, {"c", 5}, {"d", 1}});
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"<bos>", "<eos>", "<pad>", "<sep>", "<unk>", "c", "a", "b", "d"}));
  EXPECT_EQ(Vocab::from_counts({{"b", 2}, {"a", 2}, {"c", 5}, {"d", 1}}, 7).size(), 7u);
}

TEST(Vocab, DuplicateOrReservedTokensAreRejected) {
  EXPECT_THROW(Vocab::from_tokens({"a", "a"}), VocabularyError);
  EXPECT_THROW(Vocab::from_tokens({"<pad>"}), VocabularyError);
  EXPECT_THROW(Vocab().token(99), VocabularyError);
}

TEST(Vocab, SaveLoadRoundTrip) {
  TempDir dir;
  const Vocab v = Vocab::from_tokens({"x", "y", ","});
  v.save(dir / "vocab.txt");
  EXPECT_EQ(Vocab::load(dir / "vocab.txt"), v);
}

TEST(Vocab, BuiltDeterministicallyFromTheSameCorpus) {
  const std::vector<GroundedSample> corpus{{{"b a c"}, {"a b"}, "c a"}, {{}, {"d"}, "a"}};
  EXPECT_EQ(build_vocab(corpus).tokens(), build_vocab(corpus).tokens());
  EXPECT_EQ(build_vocab(corpus).id("a"), 5);
}

TEST(Jsonl, EmptyInputGivesNoSamples) {
  std::istringstream in("");
  EXPECT_TRUE(read_jsonl(in).empty());
}

TEST(Jsonl, WriteReadRoundTripIsExact) {
  const std::vector<GroundedSample> samples{
      {{"doc one", "doc \"two\""}, {"turn a", "turn b"}, "target one"},
      {{}, {"only context"}, "tést"},
      {{"p1", "p2", "p3", "p4", "p5", "p6", "p7"}, {"c"}, "x"},
  };
  std::ostringstream out;
  write_jsonl(out, samples);
  std::istringstream in(out.str());
  const auto back = read_jsonl(in);
  EXPECT_EQ(back, samples);
  std::ostringstream again;
  write_jsonl(again, back);
  EXPECT_EQ(again.str(), out.str());
}

TEST(Jsonl, FieldNamesAreExact) {
  std::ostringstream out;
  const std::vector<GroundedSample> one{{{"d"}, {"c"}, "t"}};
  write_jsonl(out, one);
  EXPECT_EQ(out.str(), "{\"documents\":[\"d\"],\"context\":[\"c\"],\"target\":\"t\"}\n");
}

TEST(Jsonl, MissingTargetIsReportedWithItsLine) {
  std::istringstream in(
      "{\"documents\":[],\"context\":[\"c\"],\"target\":\"t\"}\n"
      "\n"
      "{\"documents\":[],\"context\":[\"c\"]}\n");
  try {
    read_jsonl(in);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("target"), std::string::npos);
  }
}

TEST(Jsonl, MalformedRecordsAreRejected) {
  for (const char* line : {"not json", "[1,2]", "{\"documents\":\"x\",\"context\":[\"c\"],\"target\":\"t\"}",
                           "{\"documents\":[],\"context\":[],\"target\":\"t\"}",
                           "{\"documents\":[],\"context\":[\"c\"],\"target\":\"\"}",
                           "{\"documents\":[],\"context\":[\"c\"],\"target\":3}"}) {
    std::istringstream in(line);
    EXPECT_THROW(read_jsonl(in), DataError) << line;
  }
}

TEST(Jsonl, FileRoundTripPreservesOrder) {
  TempDir dir;
  const std::vector<GroundedSample> samples{{{"a"}, {"b"}, "c"}, {{"d"}, {"e"}, "f"}, {{"g"}, {"h"}, "i"}};
  save_jsonl(dir / "x.jsonl", samples);
  EXPECT_EQ(load_jsonl(dir / "x.jsonl"), samples);
  EXPECT_THROW(load_jsonl(dir / "missing.jsonl"), IoError);
}

ModelConfig caps(std::size_t source, std::size_t context, std::size_t target) {
  ModelConfig c;
  c.vocab_size = 100;
  c.max_source_len = source;
  c.max_context_len = context;
  c.max_target_len = target;
  return c;
}

TEST(Prepare, TurnsAndPassagesAreJoinedWithSep) {
  const Vocab v = Vocab::from_tokens({"hi", "hello", "p", "q", "t"});
  const auto p = prepare({{"p", "q"}, {"hi", "hello"}, "t"}, v, caps(32, 16, 8));
  EXPECT_EQ(p.context, (std::vector<TokenId>{v.id("hi"), kSep, v.id("hello")}));
  EXPECT_EQ(p.document, (std::vector<TokenId>{v.id("p"), kSep, v.id("q")}));
  EXPECT_EQ(p.target, (std::vector<TokenId>{v.id("t")}));
}

TEST(Prepare, OldestTurnsAreDroppedFirst) {
  const Vocab v = Vocab::from_tokens({"a", "b", "c", "d", "e"});
  const auto p = prepare({{}, {"a b", "c", "d e"}, "a"}, v, caps(32, 4, 8));
  EXPECT_EQ(p.context, (std::vector<TokenId>{v.id("c"), kSep, v.id("d"), v.id("e")}));
  // A single overlong turn keeps its tail.
  const auto q = prepare({{}, {"a b c d e"}, "a"}, v, caps(32, 2, 8));
  EXPECT_EQ(q.context, (std::vector<TokenId>{v.id("d"), v.id("e")}));
}

TEST(Prepare, DocumentTailIsTruncatedToTheSourceCap) {
  const Vocab v = Vocab::from_tokens({"a", "b", "c", "d", "e", "f"});
  const auto p = prepare({{"a b c d e f"}, {"a b"}, "c"}, v, caps(6, 4, 8));
  EXPECT_EQ(p.context.size() + p.document.size(), 6u);
  EXPECT_EQ(p.document, (std::vector<TokenId>{v.id("a"), v.id("b"), v.id("c"), v.id("d")}));
}

TEST(Prepare, ContextYieldsOneSlotToANonEmptyDocument) {
  const Vocab v = Vocab::from_tokens({"a", "b", "c"});
  const auto p = prepare({{"c"}, {"a b a b"}, "c"}, v, caps(4, 4, 8));
  EXPECT_EQ(p.context.size(), 3u);
  EXPECT_EQ(p.document.size(), 1u);
}

TEST(Prepare, TargetLeavesRoomForEos) {
  const Vocab v = Vocab::from_tokens({"a"});
  const auto p = prepare({{}, {"a"}, "a a a a a a"}, v, caps(8, 4, 4));
  EXPECT_EQ(p.target.size(), 3u);
}

TEST(Prepare, EmptyContextAfterTokenizationIsAnError) {
  const Vocab v = Vocab::from_tokens({"a"});
  EXPECT_THROW(prepare({{}, {"   "}, "a"}, v, caps(8, 4, 4)), InputError);
  EXPECT_THROW(prepare({{}, {"a"}, ""}, v, caps(8, 4, 4)), InputError);
  const std::vector<GroundedSample> corpus{{{}, {"a"}, "a"}, {{}, {" "}, "a"}};
  try {
    prepare_all(corpus, v, caps(8, 4, 4));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(Prepare, WikipediaUpdatePresetCapsTheSourceAt1024) {
  ModelConfig c = caps(8, 4, 4);
  apply_length_preset(c, "wikipedia_update");
  EXPECT_EQ(c.max_source_len, 1024u);
  EXPECT_EQ(c.max_target_len, 128u);
  std::string doc, ctx;
  for (int i = 0; i < 1500; ++i) doc += "a ";
  for (int i = 0; i < 300; ++i) ctx += "b ";
  const Vocab v = Vocab::from_tokens({"a", "b"});
  const auto p = prepare({{doc}, {ctx}, "a"}, v, c);
  EXPECT_EQ(p.context.size(), 256u);
  EXPECT_EQ(p.context.size() + p.document.size(), 1024u);
  EXPECT_THROW(apply_length_preset(c, "nope"), ConfigError);
}

TEST(Presets, MatchTheTaskTable) {
  ModelConfig c;
  apply_length_preset(c, "wizard");
  EXPECT_EQ(c.max_source_len, 900u);
  EXPECT_EQ(c.max_target_len, 40u);
  apply_length_preset(c, "cmu_dog");
  EXPECT_EQ(c.max_source_len, 512u);
  EXPECT_EQ(c.max_target_len, 128u);
}

TEST(WithoutDocuments, ClearsOnlyDocuments) {
  const std::vector<GroundedSample> corpus{{{"d1", "d2"}, {"c"}, "t"}};
  const auto stripped = without_documents(corpus);
  EXPECT_TRUE(stripped[0].documents.empty());
  EXPECT_EQ(stripped[0].context, corpus[0].context);
  EXPECT_EQ(stripped[0].target, corpus[0].target);
}

}  // namespace
}  // namespace groundgen
