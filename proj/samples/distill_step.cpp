// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0
//
// Walks one distillation step in memory: a numeral-preserving student, a
// digit-splitting teacher, their projection, an alignment and the P-KL step
// report.

#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "ctkd/ctkd.hpp"

int main() {
  const std::vector<std::string> corpus = {"We counted 201 apples."};
  const auto student = ctkd::make_toy_tokenizer(ctkd::ToyKind::numeral_preserving, corpus);
  const auto teacher = ctkd::make_toy_tokenizer(ctkd::ToyKind::digit_splitting, corpus);
  const auto& vs = student.vocabulary();
  const auto& vt = teacher.vocabulary();

  const auto w = ctkd::build_projection(vs, vt, teacher, ctkd::ProjectionConfig{});
  const auto s201 = *vs.id_of("201");
  std::printf("projection row for \"201\":");
  for (std::size_t e = 0; e < w.row_size(s201); ++e) {
    std::printf("  %s:%.4f", vt.token(w.row_teachers(s201)[e]).c_str(), w.row_weights(s201)[e]);
  }
  std::printf("\n");

  const auto s_ids = student.encode(corpus[0]);
  const auto t_ids = teacher.encode(corpus[0]);
  const auto alignment = ctkd::dp_align(s_ids, t_ids, ctkd::AlignScoring{}, vs, vt);
  for (const auto& c : alignment.chunks) {
    std::string s_text, t_text;
    for (auto i = c.student.lo; i < c.student.hi; ++i) s_text += vs.surface(s_ids[i]);
    for (auto i = c.teacher.lo; i < c.teacher.hi; ++i) t_text += vt.surface(t_ids[i]);
    std::printf("  %-12s [%s] <-> [%s]\n", std::string(ctkd::to_string(c.kind)).c_str(), s_text.c_str(), t_text.c_str());
  }

  // Stand-in model outputs.
  std::mt19937_64 rng(42);
  auto dump = [&](const ctkd::Tokenizer& tok, const std::vector<ctkd::TokenId>& ids, ctkd::Side side) {
    const auto V = tok.vocabulary().size();
    return ctkd::LogitsDump{"demo", side, tok.vocabulary().content_hash(),
                            ctkd::PositionLogits(V, ctkd::random_logits(rng, ids.size() * V), ids)};
  };

  ctkd::StepInput in;
  in.student_vocab = vs;
  in.student.push_back(dump(student, s_ids, ctkd::Side::student));
  ctkd::StepTeacher t;
  t.config.name = "digits";
  t.config.vocab = vt;
  t.config.mode = ctkd::LossMode::pkl;
  t.config.projection = w;
  t.sequences.push_back(dump(teacher, t_ids, ctkd::Side::teacher));
  in.teachers.push_back(std::move(t));

  const auto report = ctkd::run_step(in);
  std::printf("P-KL over %zu chunks: l_kd %.6f  l_ce %.6f  multiplier %.6f  total %.6f\n",
              report.teachers[0].chunk_values.size(), report.l_kd, report.l_ce, report.kd_multiplier, report.total);
  return 0;
}
