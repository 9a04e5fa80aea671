#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "relemb/corpus.hpp"
#include "relemb/synth.hpp"
#include "relemb/tokenizer.hpp"

using namespace relemb;

namespace {

RelationExample example(const std::string& a, const std::string& ta, const std::string& b,
                        const std::string& tb) {
  Episode ep{"s", "e", {{a, ta}, {b, tb}}};
  return build_examples(ep).at(0);
}

std::size_t count(const std::vector<TokenId>& ids, TokenId t) {
  return static_cast<std::size_t>(std::count(ids.begin(), ids.end(), t));
}

void expect_markers(const TokenizedExample& t) {
  EXPECT_EQ(count(t.ids, special::kSubjectOpen), 1u);
  EXPECT_EQ(count(t.ids, special::kSubjectClose), 1u);
  EXPECT_EQ(count(t.ids, special::kObjectOpen), 1u);
  EXPECT_EQ(count(t.ids, special::kObjectClose), 1u);
  EXPECT_EQ(t.ids.at(t.su_pos), special::kSubjectOpen);
  EXPECT_EQ(t.ids.at(t.ob_pos), special::kObjectOpen);
}

}  // namespace

TEST(Vocab, ReservedTokensAndHandCount) {
  const auto v = build_vocab({example("A", "hi", "B", "hi")}, 100);
  EXPECT_EQ(v.size(), 7u + 4u);
  for (const char* t : {"hi", ":", "a", "b"}) EXPECT_TRUE(v.contains(t)) << t;
  EXPECT_EQ(v.id("[PAD]"), special::kPad);
  EXPECT_EQ(v.id("[UNK]"), special::kUnk);
  EXPECT_EQ(v.id("[BLANK]"), special::kBlank);
  EXPECT_EQ(v.id("[SU]"), special::kSubjectOpen);
  EXPECT_EQ(v.id("[/SU]"), special::kSubjectClose);
  EXPECT_EQ(v.id("[OB]"), special::kObjectOpen);
  EXPECT_EQ(v.id("[/OB]"), special::kObjectClose);
  // Most frequent first: ':' and 'hi' (2 each, by text), then 'a', 'b'.
  EXPECT_EQ(v.token(7), ":");
  EXPECT_EQ(v.token(8), "hi");
  EXPECT_EQ(v.token(9), "a");
  EXPECT_EQ(v.id("never-seen"), special::kUnk);
}

TEST(Vocab, CutoffMapsRareTokensToUnk) {
  const auto ex = example("A", "common common common rare", "B", "common");
  const auto v = build_vocab({ex}, 2);
  EXPECT_EQ(v.size(), 9u);
  EXPECT_NE(v.id("common"), special::kUnk);
  EXPECT_EQ(v.id("rare"), special::kUnk);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_LT(v.id(v.token(static_cast<TokenId>(i))), static_cast<TokenId>(v.size()));
}

TEST(Vocab, DeterministicAndRoundTrips) {
  SynthProfile p;
  p.n_pairs = 4;
  p.examples_per_pair = 10;
  const auto ex = synthetic_examples(generate_synthetic(p));
  const auto v1 = build_vocab(ex, 30), v2 = build_vocab(ex, 30);
  EXPECT_EQ(v1, v2);
  const auto path = (std::filesystem::temp_directory_path() / "relemb_vocab_test.txt").string();
  v1.save(path);
  EXPECT_EQ(Vocab::load(path), v1);
  {
    std::ofstream bad(path, std::ios::binary);
    bad << "[PAD]\n[UNK]\n";
  }
  EXPECT_THROW(Vocab::load(path), DataError);
  std::filesystem::remove(path);
  EXPECT_THROW(build_vocab({}, 10), DataError);
}

TEST(Encode, NoMaskingKeepsMentions) {
  const auto ex = example("HOLT", "Status report.", "VANCE", "All decks are secure.");
  const auto v = build_vocab({ex}, 100);
  std::mt19937_64 rng(1);
  const auto t = encode(ex, v, 0.0, 104, rng);
  expect_markers(t);
  EXPECT_EQ(t.ids.size(), 104u);
  EXPECT_EQ(t.ids[t.su_pos + 1], v.id("holt"));
  EXPECT_EQ(t.ids[t.su_pos + 2], special::kSubjectClose);
  EXPECT_EQ(t.ids[t.ob_pos + 1], v.id("vance"));
  EXPECT_LT(t.su_pos, t.ob_pos);
  EXPECT_FALSE(t.truncated());
  EXPECT_EQ(t.length, ex.token_length());
  EXPECT_FALSE(t.subject_masked || t.object_masked);
  for (std::size_t i = t.length; i < t.ids.size(); ++i) EXPECT_EQ(t.ids[i], special::kPad);
}

TEST(Encode, FullMaskingBlanksBothMentions) {
  const auto ex = example("GUARD 2", "Halt!", "O'BRIEN", "Ready.");
  const auto v = build_vocab({ex}, 100);
  std::mt19937_64 rng(2);
  const auto t = encode(ex, v, 1.0, 104, rng);
  expect_markers(t);
  EXPECT_EQ(count(t.ids, special::kBlank), 2u);
  EXPECT_EQ(t.ids[t.su_pos + 1], special::kBlank);
  EXPECT_EQ(t.ids[t.su_pos + 2], special::kSubjectClose);
  EXPECT_EQ(t.ids[t.ob_pos + 1], special::kBlank);
  EXPECT_EQ(t.ids[t.ob_pos + 2], special::kObjectClose);
  EXPECT_TRUE(t.subject_masked && t.object_masked);
}

TEST(Encode, DialogueExampleUntruncatedAt104) {
  const auto ex = example("KIRK", "Mister Spock, what do you make of the readings on the planet below?",
                          "SPOCK", "Fascinating, Captain. The readings are entirely consistent with a "
                                   "silicon based life form.");
  const auto v = build_vocab({ex}, 100);
  std::mt19937_64 rng(3);
  const auto t = encode(ex, v, 0.7, 104, rng);
  EXPECT_FALSE(t.truncated());
  EXPECT_LT(t.su_pos, t.ob_pos);
  expect_markers(t);
}

TEST(Encode, TruncationOrderAndMarkerSurvival) {
  const auto ex = example("A", "w1 w2 w3 w4 w5 w6", "B", "x1 x2 x3 x4 x5 x6");
  const auto v = build_vocab({ex}, 100);
  std::mt19937_64 rng(4);
  // [SU] a [/SU] : w1..w6 [OB] b [/OB] : x1..x6 is 20 tokens.
  const auto full = encode(ex, v, 0.0, 104, rng);
  ASSERT_EQ(full.length, 20u);
  for (std::size_t max_len = kMinEncodeLength; max_len <= 22; ++max_len) {
    const auto t = encode(ex, v, 0.0, max_len, rng);
    SCOPED_TRACE(max_len);
    expect_markers(t);
    EXPECT_EQ(t.ids.size(), max_len);
    EXPECT_LE(t.length, max_len);
    EXPECT_EQ(t.length, std::min<std::size_t>(20, max_len));
    EXPECT_EQ(t.original_length, 20u);
    if (max_len >= 13) {
      // tail (": x1..x6") trimmed from the end first; everything up to the
      // object mention intact.
      EXPECT_EQ(t.su_pos, 0u);
      EXPECT_EQ(t.ids[t.ob_pos + 1], v.id("b"));
      EXPECT_EQ(t.ids[t.su_pos + 3], v.id(":"));
    } else if (max_len >= 6) {
      // then context between the mentions; mentions kept while possible
      EXPECT_EQ(t.ids[t.su_pos + 1], v.id("a"));
      EXPECT_EQ(t.ids[t.ob_pos + 1], v.id("b"));
      EXPECT_EQ(t.ob_pos, t.su_pos + 3 + (max_len - 6));
    }
  }
  EXPECT_THROW(encode(ex, v, 0.0, kMinEncodeLength - 1, rng), std::invalid_argument);
}

TEST(Encode, TailThenHeadThenMiddle) {
  RelationExample ex;
  ex.context = "one two A mid B three";
  ex.subject = "A";
  ex.object = "B";
  ex.subject_span = {8, 9};
  ex.object_span = {14, 15};
  const auto v = build_vocab({ex}, 100);
  std::mt19937_64 rng(5);
  auto t = encode(ex, v, 0.0, 10, rng);
  EXPECT_EQ(t.length, 10u);
  EXPECT_EQ(t.su_pos, 2u);
  t = encode(ex, v, 0.0, 9, rng);  // "three" gone
  EXPECT_EQ(t.su_pos, 2u);
  EXPECT_EQ(t.ids[t.ob_pos + 2], special::kObjectClose);
  EXPECT_EQ(t.length, 9u);
  t = encode(ex, v, 0.0, 8, rng);  // then "one"
  EXPECT_EQ(t.su_pos, 1u);
  EXPECT_EQ(t.ids[0], v.id("two"));
  t = encode(ex, v, 0.0, 7, rng);  // then "two"
  EXPECT_EQ(t.su_pos, 0u);
  EXPECT_EQ(t.ids[3], v.id("mid"));
  t = encode(ex, v, 0.0, 6, rng);  // then "mid"
  EXPECT_EQ(t.ob_pos, 3u);
  expect_markers(t);
}

TEST(Encode, ObjectBeforeSubject) {
  RelationExample ex = example("A", "one two three", "B", "four five six");
  std::swap(ex.subject, ex.object);
  std::swap(ex.subject_span, ex.object_span);
  const auto v = build_vocab({ex}, 100);
  std::mt19937_64 rng(5);
  const auto t = encode(ex, v, 0.0, 10, rng);
  expect_markers(t);
  EXPECT_LT(t.ob_pos, t.su_pos);
  EXPECT_EQ(t.ids[t.ob_pos + 1], v.id("a"));
  EXPECT_EQ(t.ids[t.su_pos + 1], v.id("b"));
  EXPECT_EQ(t.length, 10u);
}

TEST(Encode, LongMentionsShrinkLast) {
  const auto ex = example("VERY LONG NAME HERE", "x", "OTHER LONG NAME", "y");
  const auto v = build_vocab({ex}, 100);
  std::mt19937_64 rng(6);
  const auto t = encode(ex, v, 0.0, kMinEncodeLength, rng);
  expect_markers(t);
  EXPECT_EQ(t.ids[t.su_pos + 1], v.id("very"));
  EXPECT_EQ(t.ids[t.ob_pos + 1], v.id("other"));
  EXPECT_EQ(t.length, 6u);
}

TEST(Encode, DeterministicGivenSeed) {
  const auto ex = example("A", "some words here", "B", "and more words");
  const auto v = build_vocab({ex}, 100);
  std::mt19937_64 r1(99), r2(99);
  for (int i = 0; i < 50; ++i) {
    const auto a = encode(ex, v, 0.5, 32, r1);
    const auto b = encode(ex, v, 0.5, 32, r2);
    EXPECT_EQ(a.ids, b.ids);
  }
}

TEST(Encode, MaskFrequencyMatchesProbability) {
  const auto ex = example("A", "x", "B", "y");
  const auto v = build_vocab({ex}, 100);
  for (double p : {0.3, 0.7}) {
    std::mt19937_64 rng(7);
    std::size_t subj = 0, obj = 0, both = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const auto t = encode(ex, v, p, 16, rng);
      subj += t.subject_masked;
      obj += t.object_masked;
      both += t.subject_masked && t.object_masked;
    }
    EXPECT_NEAR(subj / double(n), p, 0.02);
    EXPECT_NEAR(obj / double(n), p, 0.02);
    EXPECT_NEAR(both / double(n), p * p, 0.02);  // independent per mention
  }
}
