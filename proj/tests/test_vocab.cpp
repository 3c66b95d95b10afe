// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <string>
#include <vector>

#include "ctkd/vocab.hpp"
#include "support.hpp"

namespace {

using ctkd::canonicalize;
using ctkd::TokenId;
using ctkd::ValidationError;
using ctkd::Vocabulary;

TEST(Canonicalize, SpaceMarkersBecomeSpaces) {
  EXPECT_EQ(canonicalize("\xC4\xA0the").text, " the");       // G-dot marker
  EXPECT_EQ(canonicalize("\xE2\x96\x81the").text, " the");   // lower one-eighth block
  EXPECT_EQ(canonicalize("\xE2\x90\xA3the").text, " the");   // open box
  EXPECT_EQ(canonicalize("a\xC4\xA0" "b").text, "a b");
}

TEST(Canonicalize, AlreadyCanonicalIsUnchanged) { EXPECT_EQ(canonicalize(" the").text, " the"); }

TEST(Canonicalize, NewlineMarkers) {
  EXPECT_EQ(canonicalize("\xC4\x8A").text, "\n");
  EXPECT_EQ(canonicalize("\\n").text, "\n");
  EXPECT_EQ(canonicalize("a\\nb").text, "a\nb");
}

TEST(Canonicalize, ByteFallback) {
  // 0x41 is 'A' in ASCII.
  EXPECT_EQ(canonicalize("<0x41>").text, "A");
  EXPECT_EQ(canonicalize("<0x0A>").text, "\n");
  EXPECT_EQ(canonicalize("<0xE2>").text, std::string(1, '\xE2'));
  // Only a whole token is a byte-fallback form.
  EXPECT_EQ(canonicalize("x<0x41>").text, "x<0x41>");
}

TEST(Canonicalize, MalformedByteFallbackNamesToken) {
  try {
    (void)canonicalize("<0xZZ>");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("<0xZZ>"), std::string::npos);
  }
}

TEST(Canonicalize, LeadingSpacePunctuation) {
  EXPECT_EQ(canonicalize("\xC4\xA0,").text, ",");
  EXPECT_EQ(canonicalize(" .").text, ".");
  EXPECT_EQ(canonicalize(" :").text, ":");
  EXPECT_EQ(canonicalize(" a").text, " a");
  EXPECT_EQ(canonicalize(" ..").text, " ..");
}

TEST(CanonicalizeProperty, IdempotentOnFuzzedTokens) {
  const std::vector<std::string> atoms = {"\xC4\xA0", "\xE2\x96\x81", "\xE2\x90\xA3", "\xC4\x8A", "\\n", "\\", "n", " ", ",",
                                          ".",        "a",            "Z",            "7",        "<0x41>", "<0x", "0x4", ">",
                                          "\xC3\xA9", "\n",           "\t",           "<",        ":"};
  std::mt19937_64 rng(20260101);
  for (int i = 0; i < 10000; ++i) {
    std::string s;
    const int n = static_cast<int>(rng() % 6);
    for (int k = 0; k < n; ++k) s += atoms[rng() % atoms.size()];
    std::string once;
    try {
      once = canonicalize(s).text;
    } catch (const ValidationError&) {
      continue;  // malformed byte forms are rejected, not normalized
    }
    ASSERT_EQ(canonicalize(once).text, once) << "input: " << s;
  }
}

TEST(Vocabulary, RejectsDuplicates) {
  EXPECT_THROW(Vocabulary({"a", "b", "a"}), ValidationError);
  EXPECT_THROW(Vocabulary({"a"}, {3}), ValidationError);
}

TEST(Vocabulary, SpecialsAndRoles) {
  const Vocabulary v({"a", "b", "<bos>"}, {}, {{"bos", 2}});
  EXPECT_TRUE(v.is_special(2));
  EXPECT_EQ(v.role("bos"), TokenId{2});
  EXPECT_EQ(v.match_key(2), std::optional<std::string>("\x01role:bos"));
  const Vocabulary plain({"a", "<pad>"}, {1});
  EXPECT_FALSE(plain.match_key(1).has_value());
}

TEST(VocabularyFile, ObjectMapWithSpecial) {
  const auto v = ctkd::vocabulary_from_json_text(R"({"tokens": {"a":0,"b":1,"ab":2,"<bos>":3}, "specials": [3]})");
  ASSERT_EQ(v.size(), 4u);
  EXPECT_EQ(v.token(2), "ab");
  EXPECT_EQ(v.specials(), std::vector<TokenId>{3});
}

TEST(VocabularyFile, SharedIdNamesBothTokens) {
  try {
    (void)ctkd::vocabulary_from_json_text(R"({"tokens": {"a":0,"b":1,"c":1}})");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'b'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'c'"), std::string::npos) << msg;
  }
}

TEST(VocabularyFile, GapInIds) {
  EXPECT_THROW((void)ctkd::vocabulary_from_json_text(R"({"tokens": {"a":0,"b":2}})"), ValidationError);
}

TEST(VocabularyFile, DuplicateTokenKey) {
  EXPECT_THROW((void)ctkd::vocabulary_from_json_text(R"({"tokens": {"a":0,"a":1}})"), ValidationError);
  EXPECT_THROW((void)ctkd::vocabulary_from_json_text(R"({"tokens": ["a","b","a"]})"), ValidationError);
}

TEST(VocabularyFile, EmptyFileIsEmptyVocabulary) {
  EXPECT_EQ(ctkd::vocabulary_from_json_text("").size(), 0u);
  EXPECT_EQ(ctkd::vocabulary_from_json_text(" \n").size(), 0u);
}

TEST(VocabularyFile, MissingFileIsIoError) {
  EXPECT_THROW((void)ctkd::load_vocabulary("/nonexistent/ctkd/vocab.json"), ctkd::IoError);
}

TEST(VocabularyFile, SaveLoadRoundTrip) {
  const auto dir = ctkd::testing::scratch_dir("vocab-roundtrip");
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> toks;
    std::set<std::string> seen;
    const std::size_t n = 1 + rng() % 30;
    while (toks.size() < n) {
      std::string t;
      const std::size_t len = 1 + rng() % 4;
      for (std::size_t i = 0; i < len; ++i) t += static_cast<char>(0x20 + rng() % 0x5F);
      if (rng() % 5 == 0) t = "\xC4\xA0" + t;
      if (seen.insert(t).second) toks.push_back(t);
    }
    std::vector<TokenId> specials;
    std::map<std::string, TokenId> roles;
    if (n > 2) {
      specials.push_back(0);
      roles["bos"] = 1;
    }
    const Vocabulary v(toks, specials, roles);
    const auto path = (dir / "v.json").string();
    ctkd::save_vocabulary(v, path);
    const auto back = ctkd::load_vocabulary(path);
    ASSERT_TRUE(back == v);
    ASSERT_EQ(back.content_hash(), v.content_hash());
  }
}

TEST(ToyTokenizer, DigitRegimes) {
  const auto split = ctkd::make_toy_tokenizer(ctkd::ToyKind::digit_splitting);
  const auto keep = ctkd::make_toy_tokenizer(ctkd::ToyKind::numeral_preserving);
  const auto& vs = split.vocabulary();
  EXPECT_EQ(split.encode("201"), (std::vector<TokenId>{*vs.id_of("2"), *vs.id_of("0"), *vs.id_of("1")}));
  EXPECT_EQ(keep.encode("201"), std::vector<TokenId>{*keep.vocabulary().id_of("201")});
  EXPECT_TRUE(ctkd::make_toy_tokenizer(ctkd::ToyKind::char_level).encode("").empty());
}

TEST(ToyTokenizer, NumeralPreservingKeepsRunsUpToThree) {
  const auto keep = ctkd::make_toy_tokenizer(ctkd::ToyKind::numeral_preserving);
  const auto& v = keep.vocabulary();
  EXPECT_EQ(keep.encode("12345"), (std::vector<TokenId>{*v.id_of("123"), *v.id_of("45")}));
}

TEST(ToyTokenizer, WordLevelNeedsCorpus) {
  EXPECT_THROW((void)ctkd::make_toy_tokenizer(ctkd::ToyKind::word_level), ValidationError);
  const std::vector<std::string> corpus = {"Hello world."};
  const auto t = ctkd::make_toy_tokenizer(ctkd::ToyKind::word_level, corpus);
  const auto& v = t.vocabulary();
  EXPECT_EQ(t.encode("Hello world."), (std::vector<TokenId>{*v.id_of("Hello"), *v.id_of(" world.")}));
}

TEST(ToyTokenizerProperty, DecodeEncodeRoundTripsAscii) {
  const std::vector<std::string> corpus = {"the cat sat on 12 mats", "Hello world."};
  std::mt19937_64 rng(99);
  for (auto kind : {ctkd::ToyKind::digit_splitting, ctkd::ToyKind::numeral_preserving, ctkd::ToyKind::char_level,
                    ctkd::ToyKind::word_level}) {
    const auto tok = ctkd::make_toy_tokenizer(kind, corpus);
    for (int i = 0; i < 500; ++i) {
      std::string s;
      const std::size_t len = rng() % 40;
      for (std::size_t k = 0; k < len; ++k) s += static_cast<char>(rng() % 128);
      ASSERT_EQ(tok.decode(tok.encode(s)), s);
    }
  }
}

TEST(ToyTokenizerProperty, DecodeEncodeRoundTripsHighBytes) {
  const auto tok = ctkd::make_toy_tokenizer(ctkd::ToyKind::char_level);
  std::string s = "caf\xC3\xA9 \xE2\x96\x81";
  EXPECT_EQ(tok.decode(tok.encode(s)), s);
}

}  // namespace
