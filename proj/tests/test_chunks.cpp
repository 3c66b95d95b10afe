// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "ctkd/chunks.hpp"
#include "ctkd/gradcheck.hpp"
#include "support.hpp"

namespace {

using ctkd::AlignmentChunk;
using ctkd::ChunkDistribution;
using ctkd::ChunkKind;
using ctkd::PositionLogits;
using ctkd::Side;
using ctkd::Span;

std::vector<double> logs(std::initializer_list<double> p) {
  std::vector<double> out;
  for (double x : p) out.push_back(std::log(x));
  return out;
}

AlignmentChunk student_chunk(std::size_t lo, std::size_t hi, ChunkKind kind = ChunkKind::combination) {
  return AlignmentChunk{Span{lo, hi}, Span{0, 1}, kind};
}

TEST(Softmax, StableAndTempered) {
  const auto p = ctkd::softmax(std::vector<double>{1000.0, 1000.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  const auto q = ctkd::softmax(std::vector<double>{0.0, std::log(4.0)}, 2.0);
  EXPECT_NEAR(q[0], 1.0 / 3.0, 1e-15);
  EXPECT_THROW((void)ctkd::softmax(std::vector<double>{1.0}, 0.0), ctkd::ValidationError);
}

TEST(ChainRuleMerge, TwoPositionExample) {
  auto z = logs({0.5, 0.5});
  const auto second = logs({0.8, 0.2});
  z.insert(z.end(), second.begin(), second.end());
  const PositionLogits logits(2, z, {0, 0});
  const auto q = ctkd::chain_rule_merge(logits, student_chunk(0, 2), Side::student);
  EXPECT_NEAR(q.probs[0], 4.0 / 9.0, 1e-12);
  EXPECT_NEAR(q.probs[1], 5.0 / 9.0, 1e-12);
}

TEST(ChainRuleMerge, LengthOneIsSoftmax) {
  std::mt19937_64 rng(1);
  const auto z = ctkd::random_logits(rng, 6);
  const PositionLogits logits(6, z, {2});
  const auto q = ctkd::chain_rule_merge(logits, student_chunk(0, 1, ChunkKind::match), Side::student, 1.5);
  const auto p = ctkd::softmax(z, 1.5);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(q.probs[i], p[i]);
}

TEST(ChainRuleMerge, PointMassesStayPointMasses) {
  // Near-one-hot rows on the realized tokens merge to a near-one-hot on the first.
  const double big = 60.0;
  std::vector<double> z = {big, 0.0, 0.0, 0.0, 0.0, big};
  const PositionLogits logits(3, z, {0, 2});
  const auto q = ctkd::chain_rule_merge(logits, student_chunk(0, 2), Side::student);
  EXPECT_NEAR(q.probs[0], 1.0, 1e-12);
}

TEST(ChainRuleMerge, RefusesExcludedChunks) {
  const PositionLogits logits(2, std::vector<double>(4, 0.0), {0, 1});
  EXPECT_THROW((void)ctkd::chain_rule_merge(logits, student_chunk(0, 1, ChunkKind::gap_student_side), Side::student),
               ctkd::ValidationError);
  EXPECT_THROW((void)ctkd::chain_rule_merge(logits, student_chunk(0, 1, ChunkKind::mismatch), Side::student),
               ctkd::ValidationError);
  EXPECT_THROW((void)ctkd::chain_rule_merge(logits, student_chunk(1, 3), Side::student), ctkd::ValidationError);
}

TEST(ChainRuleMergeProperty, IsDistribution) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t V = 2 + rng() % 8, n = 1 + rng() % 5;
    std::vector<ctkd::TokenId> realized(n);
    for (auto& r : realized) r = static_cast<ctkd::TokenId>(rng() % V);
    const PositionLogits logits(V, ctkd::random_logits(rng, n * V, 4.0), realized);
    const auto q = ctkd::chain_rule_merge(logits, student_chunk(0, n), Side::student);
    double s = 0.0;
    for (double x : q.probs) {
      ASSERT_GE(x, 0.0);
      s += x;
    }
    ASSERT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(ChainRuleMergeProperty, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t V = 2 + rng() % 5, n = 1 + rng() % 4;
    const double tau = 0.5 + static_cast<double>(rng() % 4) * 0.5;
    std::vector<ctkd::TokenId> realized(n);
    for (auto& r : realized) r = static_cast<ctkd::TokenId>(rng() % V);
    const PositionLogits logits(V, ctkd::random_logits(rng, n * V), realized);
    const auto chunk = student_chunk(0, n);
    const auto up = ctkd::random_logits(rng, V, 1.0);
    std::vector<double> g(n * V, 0.0);
    ctkd::chain_rule_merge_backward(logits, chunk, Side::student, tau, up, g);
    const auto num = ctkd::numeric_gradient(
        [&](std::span<const double> x) {
          const auto q = ctkd::chain_rule_merge(logits.with_values({x.begin(), x.end()}), chunk, Side::student, tau);
          double s = 0.0;
          for (std::size_t i = 0; i < V; ++i) s += up[i] * q.probs[i];
          return s;
        },
        logits.values());
    ASSERT_LT(ctkd::relative_error(g, num), 1e-6);
  }
}

TEST(TopK, TruncatesAndRenormalizes) {
  const ChunkDistribution t{0, Side::teacher, {0.7, 0.2, 0.1}};
  const ChunkDistribution s{0, Side::student, {0.3, 0.3, 0.4}};
  const auto [tt, ss] = ctkd::topk_truncate(t, s, 2);
  EXPECT_NEAR(tt.probs[0], 7.0 / 9.0, 1e-15);
  EXPECT_NEAR(tt.probs[1], 2.0 / 9.0, 1e-15);
  EXPECT_EQ(tt.probs[2], 0.0);
  EXPECT_NEAR(ss.probs[0], 0.5, 1e-15);
  EXPECT_NEAR(ss.probs[1], 0.5, 1e-15);
  EXPECT_EQ(ss.probs[2], 0.0);
}

TEST(TopK, WholeVocabularyIsIdentity) {
  const ChunkDistribution t{0, Side::teacher, {0.7, 0.2, 0.1}};
  const ChunkDistribution s{0, Side::student, {0.3, 0.3, 0.4}};
  for (std::size_t k : {3u, 10u}) {
    const auto [tt, ss] = ctkd::topk_truncate(t, s, k);
    EXPECT_EQ(tt.probs, t.probs);
    EXPECT_EQ(ss.probs, s.probs);
  }
  EXPECT_THROW((void)ctkd::topk_truncate(t, s, 0), ctkd::ValidationError);
}

TEST(TopK, ZeroStudentMassOnSupportIsError) {
  const ChunkDistribution t{0, Side::teacher, {0.9, 0.1, 0.0}};
  const ChunkDistribution s{0, Side::student, {0.0, 0.5, 0.5}};
  EXPECT_THROW((void)ctkd::topk_truncate(t, s, 1), ctkd::ValidationError);
}

TEST(TopKProperty, SupportIsNestedAndOrdered) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t V = 1 + rng() % 12;
    auto p = ctkd::softmax(ctkd::random_logits(rng, V));
    if (rng() % 3 == 0 && V > 1) p[1] = p[0];  // exercise ties
    std::vector<std::size_t> prev;
    for (std::size_t k = 1; k <= V; ++k) {
      const auto sup = ctkd::topk_support(p, k);
      ASSERT_EQ(sup.size(), k);
      ASSERT_TRUE(std::equal(prev.begin(), prev.end(), sup.begin()));
      for (std::size_t i = 1; i < k; ++i) ASSERT_GE(p[sup[i - 1]], p[sup[i]]);
      prev = sup;
    }
  }
}

TEST(LogitsFile, RoundTrip) {
  const auto dir = ctkd::testing::scratch_dir("logits-file");
  std::mt19937_64 rng(21);
  const auto tok = ctkd::make_toy_tokenizer(ctkd::ToyKind::char_level);
  const auto dump = ctkd::testing::random_dump(rng, "seq-a", Side::teacher, tok, "Hi 42");
  const auto path = (dir / "t.f32").string();
  ctkd::save_logits(path, dump);
  const auto back = ctkd::load_logits(path);
  EXPECT_EQ(back.seq_id, "seq-a");
  EXPECT_EQ(back.side, Side::teacher);
  EXPECT_EQ(back.vocab_hash, dump.vocab_hash);
  EXPECT_TRUE(std::equal(back.logits.values().begin(), back.logits.values().end(), dump.logits.values().begin(),
                         dump.logits.values().end()));
  EXPECT_TRUE(std::equal(back.logits.realized().begin(), back.logits.realized().end(),
                         dump.logits.realized().begin(), dump.logits.realized().end()));
  EXPECT_EQ(ctkd::testing::read_bytes(path).size(), dump.logits.values().size() * 4);
}

TEST(LogitsFile, TruncatedMatrixIsIoError) {
  const auto dir = ctkd::testing::scratch_dir("logits-trunc");
  std::mt19937_64 rng(22);
  const auto tok = ctkd::make_toy_tokenizer(ctkd::ToyKind::char_level);
  const auto path = (dir / "s.f32").string();
  ctkd::save_logits(path, ctkd::testing::random_dump(rng, "x", Side::student, tok, "abc"));
  auto raw = ctkd::testing::read_bytes(path);
  raw.resize(raw.size() - 4);
  ctkd::write_text_file(path, raw);
  EXPECT_THROW((void)ctkd::load_logits(path), ctkd::IoError);
  EXPECT_THROW((void)ctkd::load_logits((dir / "missing.f32").string()), ctkd::IoError);
}

TEST(PositionLogits, ShapeChecked) {
  EXPECT_THROW(PositionLogits(3, std::vector<double>(5, 0.0), {0, 1}), ctkd::ValidationError);
  EXPECT_THROW(PositionLogits(2, std::vector<double>(2, 0.0), {2}), ctkd::ValidationError);
}

}  // namespace
