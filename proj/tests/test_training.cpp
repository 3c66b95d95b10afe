// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "ctkd/gradcheck.hpp"
#include "ctkd/training.hpp"
#include "support.hpp"

namespace {

using ctkd::LossMode;
using ctkd::ScalingPolicy;
using ctkd::Side;
using ctkd::StepInput;
using ctkd::StepTeacher;
using ctkd::TeacherStats;
using ctkd::WeightSchedule;
using K = ctkd::WeightSchedule::Kind;

TeacherStats one_cell(std::vector<double> p, ctkd::TokenId y = 0) { return TeacherStats{{{std::move(p)}}, {{y}}}; }

ctkd::LogitsDump dump(const ctkd::Vocabulary& v, Side side, std::vector<double> z, std::vector<ctkd::TokenId> ids,
                      const std::string& id = "seq") {
  return {id, side, v.content_hash(), ctkd::PositionLogits(v.size(), std::move(z), std::move(ids))};
}

TEST(CombineKdCe, DynamicExamples) {
  const auto a = ctkd::combine_kd_ce(2.0, 1.0, ScalingPolicy::dynamic());
  EXPECT_EQ(a.total, 2.0);
  EXPECT_EQ(a.kd_multiplier, 0.5);
  const auto b = ctkd::combine_kd_ce(3.0, 3.0, ScalingPolicy::dynamic());
  EXPECT_EQ(b.kd_multiplier, 1.0);
  EXPECT_EQ(b.total, 6.0);
}

TEST(CombineKdCe, Fixed) {
  const auto c = ctkd::combine_kd_ce(2.0, 3.0, ScalingPolicy::fixed(1.0, 0.1));
  EXPECT_NEAR(c.total, 2.3, 1e-15);
  EXPECT_EQ(c.kd_multiplier, 1.0);
  EXPECT_EQ(c.ce_multiplier, 0.1);
  EXPECT_EQ(ScalingPolicy{}.lambda_ce, 0.1);
}

TEST(CombineKdCe, DynamicNeedsPositiveKd) {
  EXPECT_THROW((void)ctkd::combine_kd_ce(0.0, 1.0, ScalingPolicy::dynamic()), ctkd::ValidationError);
  EXPECT_THROW((void)ctkd::combine_kd_ce(1e-13, 1.0, ScalingPolicy::dynamic()), ctkd::ValidationError);
  EXPECT_THROW((void)ctkd::combine_kd_ce(1.0, -1.0, ScalingPolicy::dynamic()), ctkd::ValidationError);
}

TEST(CombineKdCeProperty, DynamicTotalIsTwiceCe) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(1e-6, 50.0);
  for (int i = 0; i < 1000; ++i) {
    const double kd = u(rng), ce = u(rng);
    ASSERT_NEAR(ctkd::combine_kd_ce(kd, ce, ScalingPolicy::dynamic()).total, 2.0 * ce, 1e-12 * std::max(1.0, ce));
  }
}

TEST(AdaptiveWeights, MaxProb) {
  const std::vector<TeacherStats> st = {one_cell({0.9, 0.1}), one_cell({0.4, 0.6})};
  const auto a = ctkd::adaptive_weights(K::adaptive_maxprob, st);
  const double e = std::exp(0.3);
  EXPECT_NEAR(a[0], e / (1.0 + e), 1e-12);
  EXPECT_NEAR(a[0], 0.5744, 1e-4);
  EXPECT_NEAR(a[1], 0.4256, 1e-4);
}

TEST(AdaptiveWeights, CrossEntropy) {
  const std::vector<TeacherStats> st = {TeacherStats{{{{1.0, 0.0}, {0.0, 1.0}}}, {{0, 1}}},
                                        TeacherStats{{{{0.5, 0.5}, {0.5, 0.5}}}, {{0, 1}}}};
  const auto a = ctkd::adaptive_weights(K::adaptive_ce, st);
  EXPECT_NEAR(a[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(a[1], 1.0 / 3.0, 1e-12);
}

TEST(AdaptiveWeights, EntropyPrefersSharperTeacher) {
  const std::vector<TeacherStats> st = {one_cell({0.25, 0.25, 0.25, 0.25}), one_cell({0.97, 0.01, 0.01, 0.01})};
  const auto a = ctkd::adaptive_weights(K::adaptive_entropy, st);
  EXPECT_GT(a[1], a[0]);
}

TEST(AdaptiveWeights, GridMismatchIsError) {
  const std::vector<TeacherStats> st = {one_cell({0.5, 0.5}), TeacherStats{{{{0.5, 0.5}, {0.5, 0.5}}}, {{0, 0}}}};
  EXPECT_THROW((void)ctkd::adaptive_weights(K::adaptive_maxprob, st), ctkd::ValidationError);
}

TEST(AdaptiveWeightsProperty, DistributionUniformAndShiftInvariant) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t teachers = 1 + rng() % 5, V = 2 + rng() % 6, B = 1 + rng() % 3, N = 1 + rng() % 4;
    std::vector<TeacherStats> st(teachers);
    for (auto& s : st) {
      for (std::size_t b = 0; b < B; ++b) {
        auto& rows = s.dists.emplace_back();
        auto& ys = s.targets.emplace_back();
        for (std::size_t n = 0; n < N; ++n) {
          rows.push_back(ctkd::softmax(ctkd::random_logits(rng, V)));
          ys.push_back(static_cast<ctkd::TokenId>(rng() % V));
        }
      }
    }
    for (auto kind : {K::adaptive_ce, K::adaptive_entropy, K::adaptive_maxprob}) {
      const auto a = ctkd::adaptive_weights(kind, st);
      double sum = 0.0;
      for (double x : a) {
        ASSERT_GE(x, 0.0);
        sum += x;
      }
      ASSERT_NEAR(sum, 1.0, 1e-12);
      std::vector<double> means;
      for (const auto& s : st) means.push_back(ctkd::mean_confidence(kind, s));
      const double shift = ctkd::random_logits(rng, 1, 10.0)[0];
      for (double& m : means) m += shift;
      const auto shifted = ctkd::softmax(means);
      for (std::size_t m = 0; m < teachers; ++m) ASSERT_NEAR(shifted[m], a[m], 1e-12);
      const std::vector<TeacherStats> same(teachers, st[0]);
      for (double x : ctkd::adaptive_weights(kind, same)) ASSERT_NEAR(x, 1.0 / static_cast<double>(teachers), 1e-12);
    }
  }
}

TEST(WeightSchedule, StaticValidation) {
  EXPECT_NO_THROW((WeightSchedule{K::static_weights, {0.2, 0.8}}.validate(2)));
  EXPECT_THROW((WeightSchedule{K::static_weights, {0.2, 0.7}}.validate(2)), ctkd::ValidationError);
  EXPECT_THROW((WeightSchedule{K::static_weights, {1.0}}.validate(2)), ctkd::ValidationError);
  EXPECT_THROW((WeightSchedule{K::static_weights, {1.5, -0.5}}.validate(2)), ctkd::ValidationError);
  EXPECT_EQ(ctkd::schedule_kind_from_string("adaptive_entropy"), K::adaptive_entropy);
}

TEST(MultiTeacherKd, StaticMean) {
  const std::vector<ctkd::TeacherChunkLosses> l = {{"a", {0.5, 1.5}}, {"b", {3.0}}};
  EXPECT_NEAR(ctkd::multi_teacher_kd(l, WeightSchedule{K::static_weights, {0.5, 0.5}}), 2.0, 1e-15);
  const std::vector<ctkd::TeacherChunkLosses> one = {{"a", {0.5, 1.5, 4.0}}};
  EXPECT_NEAR(ctkd::multi_teacher_kd(one, WeightSchedule{K::static_weights, {1.0}}), 2.0, 1e-15);
}

TEST(MultiTeacherKd, EmptyTeacherIsNamed) {
  const std::vector<ctkd::TeacherChunkLosses> l = {{"a", {1.0}}, {"quiet", {}}};
  try {
    (void)ctkd::multi_teacher_kd(l, WeightSchedule{K::static_weights, {0.2, 0.8}});
    FAIL() << "expected ValidationError";
  } catch (const ctkd::ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("quiet"), std::string::npos);
  }
}

TEST(MultiTeacherKdProperty, LinearInChunkMeans) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ctkd::TeacherChunkLosses> l = {{"a", {u(rng), u(rng)}}, {"b", {u(rng)}}};
    const WeightSchedule s{K::static_weights, {0.2, 0.8}};
    const double base = ctkd::multi_teacher_kd(l, s);
    const double c = u(rng);
    for (double& x : l[0].values) x += c;
    ASSERT_NEAR(ctkd::multi_teacher_kd(l, s), base + 0.2 * c, 1e-12);
  }
}

TEST(RunStep, SameTokenizerAtOptimumHasZeroKd) {
  std::mt19937_64 rng(8);
  const ctkd::Vocabulary v({"a", "b", "c", "d"});
  const std::vector<ctkd::TokenId> ids = {0, 2, 1, 3, 3};
  const auto z = ctkd::random_logits(rng, ids.size() * v.size());
  StepInput in;
  in.student_vocab = v;
  in.student.push_back(dump(v, Side::student, z, ids));
  StepTeacher t;
  t.config = {"same", v, LossMode::kl, std::nullopt, 1.0};
  t.sequences.push_back(dump(v, Side::teacher, z, ids));
  in.teachers.push_back(t);
  in.policy = ScalingPolicy::fixed(1.0, 1.0);
  const auto rep = ctkd::run_step(in);
  EXPECT_NEAR(rep.l_kd, 0.0, 1e-10);
  EXPECT_NEAR(rep.total, rep.l_ce, 1e-10);
  EXPECT_EQ(rep.teachers[0].chunk_values.size(), ids.size());
  in.policy = ScalingPolicy::dynamic();
  EXPECT_THROW((void)ctkd::run_step(in), ctkd::ValidationError);
}

TEST(RunStep, PklComposesOnNumeralToy) {
  const std::vector<std::string> corpus = {"201"};
  const auto student = ctkd::make_toy_tokenizer(ctkd::ToyKind::numeral_preserving, corpus);
  const auto teacher = ctkd::make_toy_tokenizer(ctkd::ToyKind::digit_splitting, corpus);
  const auto& vs = student.vocabulary();
  const auto& vt = teacher.vocabulary();
  const auto w = ctkd::build_projection(vs, vt, teacher, ctkd::ProjectionConfig{});
  std::mt19937_64 rng(9);
  const auto s_ids = student.encode("201"), t_ids = teacher.encode("201");
  ASSERT_EQ(s_ids.size(), 1u);
  ASSERT_EQ(t_ids.size(), 3u);
  const auto zs = ctkd::random_logits(rng, vs.size());
  const auto zt = ctkd::random_logits(rng, 3 * vt.size());

  StepInput in;
  in.student_vocab = vs;
  in.student.push_back(dump(vs, Side::student, zs, s_ids));
  StepTeacher t;
  t.config = {"digits", vt, LossMode::pkl, w, 1.0};
  t.sequences.push_back(dump(vt, Side::teacher, zt, t_ids));
  in.teachers.push_back(t);
  const auto rep = ctkd::run_step(in);

  // Oracle: merge the teacher's three rows by hand, then P-KL and CE.
  std::vector<double> p_t = ctkd::softmax(std::span<const double>(zt).subspan(0, vt.size()));
  double prod = p_t[static_cast<std::size_t>(t_ids[0])];
  for (std::size_t p = 1; p < 3; ++p) prod *= ctkd::softmax(std::span<const double>(zt).subspan(p * vt.size(), vt.size()))[static_cast<std::size_t>(t_ids[p])];
  p_t[static_cast<std::size_t>(t_ids[0])] = prod;
  double zsum = 0.0;
  for (double x : p_t) zsum += x;
  for (double& x : p_t) x /= zsum;
  const auto p_s = ctkd::softmax(zs);
  const double kd = ctkd::pkl(p_t, p_s, w);
  const double ce = -std::log(p_s[static_cast<std::size_t>(s_ids[0])]);
  ASSERT_EQ(rep.teachers[0].chunk_values.size(), 1u);
  EXPECT_NEAR(rep.l_kd, kd, 1e-12);
  EXPECT_NEAR(rep.l_ce, ce, 1e-12);
  EXPECT_NEAR(rep.kd_multiplier, ce / kd, 1e-9);
  EXPECT_NEAR(rep.total, 2.0 * ce, 1e-12);
}

TEST(RunStep, FixtureRoutesThreeModesDeterministically) {
  const auto dir = ctkd::testing::scratch_dir("training-fixture");
  const auto path = ctkd::testing::write_step_fixture(dir);
  const auto cfg = ctkd::step_config_from_json(nlohmann::json::parse(ctkd::read_text_file(path.string())));
  const auto in = ctkd::load_step_input(cfg, dir);
  const auto a = ctkd::run_step(in, true);
  const auto b = ctkd::run_step(in, true);
  ASSERT_EQ(a.teachers.size(), 3u);
  EXPECT_EQ(a.teachers[0].mode, LossMode::pkl);
  EXPECT_EQ(a.teachers[1].mode, LossMode::hkl);
  EXPECT_EQ(a.teachers[2].mode, LossMode::kl);
  EXPECT_EQ(a.teachers[0].alpha, 0.5);
  EXPECT_NEAR(a.total, 2.0 * a.l_ce, 1e-12);
  double l_kd = 0.0;
  for (const auto& t : a.teachers) l_kd += t.alpha * t.kd;
  EXPECT_NEAR(a.l_kd, l_kd, 1e-15);
  const auto echo = ctkd::step_config_to_json(cfg);
  EXPECT_EQ(ctkd::loss_report_to_json(a, echo).dump(), ctkd::loss_report_to_json(b, echo).dump());
  EXPECT_EQ(a.grad_student, b.grad_student);
  EXPECT_EQ(a.teachers[0].grad_w, b.teachers[0].grad_w);
}

TEST(RunStep, AdaptiveScheduleProducesDistribution) {
  const auto dir = ctkd::testing::scratch_dir("training-adaptive");
  const auto path = ctkd::testing::write_step_fixture(dir);
  auto cfg = ctkd::step_config_from_json(nlohmann::json::parse(ctkd::read_text_file(path.string())));
  cfg.schedule = K::adaptive_entropy;
  const auto rep = ctkd::run_step(ctkd::load_step_input(cfg, dir));
  double s = 0.0;
  for (const auto& t : rep.teachers) s += t.alpha;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(RunStep, StopGradientContract) {
  // d total / d z_s from a dynamic step equals the finite-difference gradient
  // of l_ce + gamma * l_kd with gamma frozen.
  const auto dir = ctkd::testing::scratch_dir("training-stopgrad");
  const auto path = ctkd::testing::write_step_fixture(dir, 13);
  const auto cfg = ctkd::step_config_from_json(nlohmann::json::parse(ctkd::read_text_file(path.string())));
  const auto in = ctkd::load_step_input(cfg, dir);
  const auto rep = ctkd::run_step(in, true);
  StepInput frozen = in;
  frozen.policy = ScalingPolicy::fixed(rep.kd_multiplier, 1.0);
  // The fixture's student vocabulary is large, so a sample of coordinates is
  // probed per sequence.
  std::mt19937_64 rng(14);
  const double h = 1e-6;
  for (std::size_t b = 0; b < in.student.size(); ++b) {
    const auto& base = in.student[b].logits;
    const std::vector<double> x0(base.values().begin(), base.values().end());
    std::vector<double> analytic, numeric;
    for (int probe_i = 0; probe_i < 24; ++probe_i) {
      // Half the probes land on realized tokens, where the gradient is largest.
      const std::size_t pos = rng() % base.positions();
      const std::size_t v = probe_i % 2 ? static_cast<std::size_t>(base.realized()[pos]) : rng() % base.vocab_size();
      const std::size_t i = pos * base.vocab_size() + v;
      auto eval = [&](double d) {
        StepInput probe = frozen;
        auto x = x0;
        x[i] += d;
        probe.student[b].logits = base.with_values(std::move(x));
        return ctkd::run_step(probe).total;
      };
      analytic.push_back(rep.grad_student[b][i]);
      numeric.push_back((eval(h) - eval(-h)) / (2 * h));
    }
    EXPECT_LT(ctkd::relative_error(analytic, numeric), 1e-6) << "sequence " << b;
  }
}

TEST(RunStep, ValidationErrors) {
  const auto dir = ctkd::testing::scratch_dir("training-errors");
  const auto path = ctkd::testing::write_step_fixture(dir);
  const auto cfg = ctkd::step_config_from_json(nlohmann::json::parse(ctkd::read_text_file(path.string())));
  const auto in = ctkd::load_step_input(cfg, dir);
  {
    auto bad = in;
    bad.teachers[0].config.projection.reset();
    EXPECT_THROW((void)ctkd::run_step(bad), ctkd::ValidationError);
  }
  {
    auto bad = in;
    bad.teachers[0].sequences[0].vocab_hash = "0000000000000000";
    EXPECT_THROW((void)ctkd::run_step(bad), ctkd::ValidationError);
  }
  {
    auto bad = in;
    std::swap(bad.teachers[1].sequences[0], bad.teachers[1].sequences[1]);
    EXPECT_THROW((void)ctkd::run_step(bad), ctkd::ValidationError);
  }
  {
    auto bad = in;
    bad.teachers[2].config.vocab = in.teachers[0].config.vocab;
    EXPECT_THROW((void)ctkd::run_step(bad), ctkd::ValidationError);
  }
}

TEST(StepConfig, JsonRoundTripAndErrors) {
  const auto dir = ctkd::testing::scratch_dir("training-config");
  const auto path = ctkd::testing::write_step_fixture(dir);
  const auto j = nlohmann::json::parse(ctkd::read_text_file(path.string()));
  const auto cfg = ctkd::step_config_from_json(j);
  const auto echo = ctkd::step_config_to_json(cfg);
  EXPECT_EQ(ctkd::step_config_to_json(ctkd::step_config_from_json(nlohmann::json::parse(echo.dump()))).dump(), echo.dump());
  auto bad = j;
  bad["teachers"][0]["mode"] = "nope";
  EXPECT_THROW((void)ctkd::step_config_from_json(bad), ctkd::ValidationError);
  bad = j;
  bad["tau"] = 0.0;
  EXPECT_THROW((void)ctkd::step_config_from_json(bad), ctkd::ValidationError);
  bad = j;
  bad.erase("student");
  EXPECT_THROW((void)ctkd::step_config_from_json(bad), ctkd::ValidationError);
}

}  // namespace
