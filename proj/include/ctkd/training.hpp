// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <future>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctkd/align.hpp"
#include "ctkd/chunks.hpp"
#include "ctkd/error.hpp"
#include "ctkd/losses.hpp"
#include "ctkd/projection.hpp"
#include "ctkd/vocab.hpp"
#include "json.hpp"

namespace ctkd {

// ---------------------------------------------------------------------------
// KD / CE combination
// ---------------------------------------------------------------------------

struct ScalingPolicy {
  enum class Kind { dynamic, fixed };
  Kind kind = Kind::dynamic;
  double lambda_kd = 1.0;  // fixed only
  double lambda_ce = 0.1;  // fixed only

  static ScalingPolicy dynamic() { return {}; }
  static ScalingPolicy fixed(double kd, double ce) { return {Kind::fixed, kd, ce}; }

  void validate() const {
    if (kind == Kind::fixed && (!(lambda_kd >= 0) || !(lambda_ce >= 0))) {
      throw ValidationError("fixed KD/CE weights must be >= 0");
    }
  }
};

inline std::string_view to_string(ScalingPolicy::Kind k) { return k == ScalingPolicy::Kind::dynamic ? "dynamic" : "fixed"; }

struct Combined {
  double total = 0.0;
  double kd_multiplier = 0.0;
  double ce_multiplier = 1.0;
};

// Under the dynamic policy the multiplier l_ce / l_kd is a constant for
// gradient purposes; callers assembling gradients must use it as data.
inline Combined combine_kd_ce(double l_kd, double l_ce, const ScalingPolicy& policy) {
  policy.validate();
  if (!(l_ce >= 0)) throw ValidationError("cross-entropy must be >= 0");
  if (policy.kind == ScalingPolicy::Kind::fixed) {
    return {policy.lambda_kd * l_kd + policy.lambda_ce * l_ce, policy.lambda_kd, policy.lambda_ce};
  }
  if (!(l_kd > 1e-12)) throw ValidationError("dynamic scaling needs a KD loss > 1e-12, got " + std::to_string(l_kd));
  const double gamma = l_ce / l_kd;
  return {gamma * l_kd + l_ce, gamma, 1.0};
}

// ---------------------------------------------------------------------------
// Teacher weights
// ---------------------------------------------------------------------------

struct WeightSchedule {
  enum class Kind { static_weights, adaptive_ce, adaptive_entropy, adaptive_maxprob };
  Kind kind = Kind::static_weights;
  std::vector<double> weights;  // static only

  void validate(std::size_t teachers) const {
    if (kind != Kind::static_weights) return;
    if (weights.size() != teachers) {
      throw ValidationError("static schedule has " + std::to_string(weights.size()) + " weights for " +
                            std::to_string(teachers) + " teachers");
    }
    double sum = 0.0;
    for (double w : weights) {
      if (!(w >= 0)) throw ValidationError("static teacher weights must be >= 0");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("static teacher weights sum to " + std::to_string(sum) + ", not 1");
  }
};

inline std::string_view to_string(WeightSchedule::Kind k) {
  switch (k) {
    case WeightSchedule::Kind::static_weights: return "static";
    case WeightSchedule::Kind::adaptive_ce: return "adaptive_ce";
    case WeightSchedule::Kind::adaptive_entropy: return "adaptive_entropy";
    case WeightSchedule::Kind::adaptive_maxprob: return "adaptive_maxprob";
  }
  return "?";
}

inline std::optional<WeightSchedule::Kind> schedule_kind_from_string(std::string_view s) {
  using K = WeightSchedule::Kind;
  if (s == "static") return K::static_weights;
  if (s == "adaptive_ce") return K::adaptive_ce;
  if (s == "adaptive_entropy") return K::adaptive_entropy;
  if (s == "adaptive_maxprob") return K::adaptive_maxprob;
  return std::nullopt;
}

// One teacher's predictive distributions over a [batch x positions] grid,
// with the teacher-side realized token at each cell.
struct TeacherStats {
  std::vector<std::vector<std::vector<double>>> dists;  // [b][n] -> distribution
  std::vector<std::vector<TokenId>> targets;            // [b][n]
};

// Per-cell confidence, oriented so that larger means more confident.
inline double confidence_score(WeightSchedule::Kind kind, std::span<const double> p, TokenId y) {
  switch (kind) {
    case WeightSchedule::Kind::adaptive_ce:
      if (y < 0 || static_cast<std::size_t>(y) >= p.size()) throw ValidationError("target id out of range");
      return std::log(p[static_cast<std::size_t>(y)] + 1e-12) - std::log1p(1e-12);
    case WeightSchedule::Kind::adaptive_entropy: {
      double h = 0.0;
      for (double x : p) h -= x > 0 ? x * std::log(x) : 0.0;
      return -h;
    }
    case WeightSchedule::Kind::adaptive_maxprob: {
      double m = 0.0;
      for (double x : p) m = std::max(m, x);
      return m;
    }
    case WeightSchedule::Kind::static_weights: break;
  }
  throw ValidationError("static schedule has no confidence score");
}

inline double mean_confidence(WeightSchedule::Kind kind, const TeacherStats& st) {
  double sum = 0.0;
  std::size_t cells = 0;
  for (std::size_t b = 0; b < st.dists.size(); ++b) {
    for (std::size_t n = 0; n < st.dists[b].size(); ++n) {
      detail::check_distribution(st.dists[b][n], st.dists[b][n].size(), "teacher distribution");
      const TokenId y = b < st.targets.size() && n < st.targets[b].size() ? st.targets[b][n] : TokenId{-1};
      if (kind == WeightSchedule::Kind::adaptive_ce && y < 0) throw ValidationError("CE confidence needs a target per cell");
      sum += confidence_score(kind, st.dists[b][n], y);
      ++cells;
    }
  }
  if (cells == 0) throw ValidationError("teacher reports no positions");
  return sum / static_cast<double>(cells);
}

// Softmax across teachers of the mean per-cell confidence. All teachers must
// cover the same grid.
inline std::vector<double> adaptive_weights(WeightSchedule::Kind kind, std::span<const TeacherStats> stats) {
  if (stats.empty()) throw ValidationError("adaptive weights need at least one teacher");
  for (std::size_t m = 1; m < stats.size(); ++m) {
    bool same = stats[m].dists.size() == stats[0].dists.size();
    for (std::size_t b = 0; same && b < stats[0].dists.size(); ++b) same = stats[m].dists[b].size() == stats[0].dists[b].size();
    if (!same) throw ValidationError("teacher " + std::to_string(m) + " reports a different batch/position grid");
  }
  std::vector<double> means;
  for (const auto& st : stats) means.push_back(mean_confidence(kind, st));
  return softmax(means);
}

inline std::vector<double> resolve_weights(const WeightSchedule& schedule, std::size_t teachers,
                                           std::span<const TeacherStats> stats = {}) {
  if (schedule.kind == WeightSchedule::Kind::static_weights) {
    schedule.validate(teachers);
    return schedule.weights;
  }
  if (stats.size() != teachers) throw ValidationError("adaptive schedule needs stats for every teacher");
  return adaptive_weights(schedule.kind, stats);
}

struct TeacherChunkLosses {
  std::string name;
  std::vector<double> values;
};

// Sum over teachers of alpha_m times tau^2 times that teacher's chunk mean.
inline double multi_teacher_kd(std::span<const TeacherChunkLosses> losses, const WeightSchedule& schedule,
                               std::span<const TeacherStats> stats = {}, double tau = 1.0) {
  const auto alpha = resolve_weights(schedule, losses.size(), stats);
  double total = 0.0;
  for (std::size_t m = 0; m < losses.size(); ++m) {
    if (losses[m].values.empty()) throw ValidationError("teacher '" + losses[m].name + "' has no loss-bearing chunks");
    total += alpha[m] * kd_aggregate(losses[m].values, tau);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Step driver
// ---------------------------------------------------------------------------

struct TeacherConfig {
  std::string name;
  Vocabulary vocab;
  LossMode mode = LossMode::pkl;
  std::optional<SparseProjection> projection;
  double weight = 1.0;
};

struct StepTeacher {
  TeacherConfig config;
  std::vector<LogitsDump> sequences;
};

struct StepInput {
  Vocabulary student_vocab;
  std::vector<LogitsDump> student;  // one dump per sequence
  std::vector<StepTeacher> teachers;
  ScalingPolicy policy;
  WeightSchedule::Kind schedule = WeightSchedule::Kind::static_weights;
  double tau = 1.0;
  AlignScoring scoring;
  LossOptions loss;
  HybridWeights hybrid;
};

struct TeacherReport {
  std::string name;
  LossMode mode = LossMode::pkl;
  double alpha = 0.0;
  std::vector<double> chunk_values;  // in sequence order, then chunk order
  std::size_t gaps = 0;
  std::size_t mismatches = 0;
  double kd = 0.0;                   // tau^2 * mean(chunk_values)
  std::vector<double> grad_w;        // P-KL only, CSR order, when requested
};

struct LossReport {
  std::vector<TeacherReport> teachers;
  double l_kd = 0.0;
  double l_ce = 0.0;
  double kd_multiplier = 0.0;
  double ce_multiplier = 1.0;
  double total = 0.0;
  std::vector<std::vector<double>> grad_student;  // per sequence, [positions x |V_S|]
};

namespace detail {

inline void check_dump(const LogitsDump& d, const Vocabulary& v, Side side, std::string_view who) {
  if (d.side != side) throw ValidationError(std::string(who) + ": logits dump '" + d.seq_id + "' is not " + std::string(to_string(side)) + "-side");
  if (d.vocab_hash != v.content_hash()) {
    throw ValidationError(std::string(who) + ": logits dump '" + d.seq_id + "' was made with vocabulary " + d.vocab_hash +
                          ", loaded vocabulary is " + v.content_hash());
  }
  if (d.logits.vocab_size() != v.size()) throw ValidationError(std::string(who) + ": logits width does not match vocabulary size");
}

struct ChunkLoss {
  double value = 0.0;
  std::vector<double> grad_p;  // w.r.t. the student chunk distribution
  std::vector<double> grad_w;
};

struct TeacherResult {
  TeacherReport report;
  // Per sequence, gradient of this teacher's chunk-sum w.r.t. student logits.
  std::vector<std::vector<double>> grad_student;
};

inline TeacherResult evaluate_teacher(const StepInput& in, const StepTeacher& teacher, AlignmentCache& cache, bool want_grad) {
  const auto& cfg = teacher.config;
  const auto& who = cfg.name;
  if (teacher.sequences.size() != in.student.size()) {
    throw ValidationError("teacher '" + who + "' has " + std::to_string(teacher.sequences.size()) + " sequences, student has " +
                          std::to_string(in.student.size()));
  }
  const bool needs_w = cfg.mode == LossMode::pkl || cfg.mode == LossMode::hkl;
  if (needs_w && !cfg.projection) throw ValidationError("teacher '" + who + "' uses " + std::string(to_string(cfg.mode)) + " but has no projection");
  if (cfg.projection && (cfg.projection->n_student() != in.student_vocab.size() || cfg.projection->n_teacher() != cfg.vocab.size())) {
    throw ValidationError("teacher '" + who + "': projection shape does not match the vocabularies");
  }
  if (cfg.mode == LossMode::kl && !(cfg.vocab == in.student_vocab)) {
    throw ValidationError("teacher '" + who + "' uses KL but its vocabulary differs from the student's");
  }

  std::optional<CommonSet> common;
  if (cfg.mode == LossMode::hkl) common = build_common_set_relaxed(*cfg.projection);
  if (cfg.mode == LossMode::gold || cfg.mode == LossMode::uld) common = build_common_set_exact(in.student_vocab, cfg.vocab);

  auto chunk_loss = [&](const std::vector<double>& p_t, const std::vector<double>& p_s) {
    ChunkLoss out;
    switch (cfg.mode) {
      case LossMode::kl: {
        auto r = kl_with_grad(p_t, p_s, in.loss);
        return ChunkLoss{r.value, std::move(r.grad_p), {}};
      }
      case LossMode::pkl: {
        auto r = pkl_with_grad(p_t, p_s, *cfg.projection, in.loss);
        return ChunkLoss{r.value, std::move(r.grad_p), std::move(r.grad_w)};
      }
      case LossMode::hkl:
      case LossMode::gold: {
        auto r = hybrid_with_grad(p_t, p_s, *common, in.hybrid, in.loss.eps);
        return ChunkLoss{r.value, std::move(r.grad_p), {}};
      }
      case LossMode::uld: {
        auto r = uld_with_grad(p_s, p_t, *common);
        return ChunkLoss{r.value, std::move(r.grad_p), {}};
      }
    }
    return out;
  };

  TeacherResult res;
  res.report.name = who;
  res.report.mode = cfg.mode;
  if (want_grad && cfg.mode == LossMode::pkl) res.report.grad_w.assign(cfg.projection->nnz(), 0.0);

  for (std::size_t b = 0; b < in.student.size(); ++b) {
    const auto& s_dump = in.student[b];
    const auto& t_dump = teacher.sequences[b];
    check_dump(t_dump, cfg.vocab, Side::teacher, "teacher '" + who + "'");
    if (t_dump.seq_id != s_dump.seq_id) {
      throw ValidationError("teacher '" + who + "' sequence " + std::to_string(b) + " is '" + t_dump.seq_id + "', student has '" +
                            s_dump.seq_id + "'");
    }
    const auto& s_logits = s_dump.logits;
    const auto& t_logits = t_dump.logits;
    const Alignment& a = cache.get_or_align(s_logits.realized(), t_logits.realized(), in.scoring, in.student_vocab, cfg.vocab);
    res.report.gaps += a.gaps();
    res.report.mismatches += a.count(ChunkKind::mismatch);

    std::vector<double> grad;
    if (want_grad) grad.assign(s_logits.values().size(), 0.0);
    for (std::size_t k = 0; k < a.chunks.size(); ++k) {
      const auto& chunk = a.chunks[k];
      if (!chunk.in_loss()) continue;
      const auto p_s = chain_rule_merge(s_logits, chunk, Side::student, in.tau, k);
      const auto p_t = chain_rule_merge(t_logits, chunk, Side::teacher, in.tau, k);
      auto l = chunk_loss(p_t.probs, p_s.probs);
      res.report.chunk_values.push_back(l.value);
      if (want_grad) {
        chain_rule_merge_backward(s_logits, chunk, Side::student, in.tau, l.grad_p, grad);
        for (std::size_t e = 0; e < l.grad_w.size(); ++e) res.report.grad_w[e] += l.grad_w[e];
      }
    }
    res.grad_student.push_back(std::move(grad));
  }
  if (res.report.chunk_values.empty()) throw ValidationError("teacher '" + who + "' has no loss-bearing chunks");
  res.report.kd = kd_aggregate(res.report.chunk_values, in.tau);
  return res;
}

inline TeacherStats teacher_stats(const StepTeacher& teacher) {
  TeacherStats st;
  for (const auto& seq : teacher.sequences) {
    auto& rows = st.dists.emplace_back();
    for (std::size_t p = 0; p < seq.logits.positions(); ++p) rows.push_back(softmax(seq.logits.row(p)));
    const auto r = seq.logits.realized();
    st.targets.emplace_back(r.begin(), r.end());
  }
  return st;
}

}  // namespace detail

// Mean next-token cross-entropy over every student row of every sequence.
inline double student_cross_entropy(std::span<const LogitsDump> student, std::vector<std::vector<double>>* grad = nullptr) {
  std::size_t rows = 0;
  for (const auto& d : student) rows += d.logits.positions();
  if (rows == 0) throw ValidationError("student logits have no positions");
  double sum = 0.0;
  if (grad) grad->clear();
  for (const auto& d : student) {
    const auto& lg = d.logits;
    std::vector<double> g;
    if (grad) g.assign(lg.values().size(), 0.0);
    for (std::size_t p = 0; p < lg.positions(); ++p) {
      const auto row = lg.row(p);
      const auto y = static_cast<std::size_t>(lg.realized()[p]);
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (double x : row) z += std::exp(x - mx);
      const double lse = mx + std::log(z);
      sum += lse - row[y];
      if (grad) {
        const std::size_t V = lg.vocab_size();
        for (std::size_t v = 0; v < V; ++v) g[p * V + v] = std::exp(row[v] - lse) / static_cast<double>(rows);
        g[p * V + y] -= 1.0 / static_cast<double>(rows);
      }
    }
    if (grad) grad->push_back(std::move(g));
  }
  return sum / static_cast<double>(rows);
}

// One simulated distillation step over stored logits. No parameters are
// updated; with `gradients` the report carries d total / d student logits
// (KD multiplier held constant) and d total / d W for P-KL teachers.
inline LossReport run_step(const StepInput& in, bool gradients = false, AlignmentCache* cache = nullptr) {
  if (in.teachers.empty()) throw ValidationError("step needs at least one teacher");
  if (in.student.empty()) throw ValidationError("step needs at least one student sequence");
  if (!(in.tau > 0)) throw ValidationError("temperature must be > 0");
  in.scoring.validate();
  in.loss.validate();
  in.hybrid.validate();
  in.policy.validate();
  for (const auto& d : in.student) detail::check_dump(d, in.student_vocab, Side::student, "student");

  AlignmentCache local;
  AlignmentCache& ac = cache ? *cache : local;

  // Teachers are independent; results land in fixed slots so the reduction
  // order never depends on scheduling.
  std::vector<std::future<detail::TeacherResult>> futures;
  for (const auto& t : in.teachers) {
    futures.push_back(std::async(in.teachers.size() > 1 ? std::launch::async : std::launch::deferred,
                                 [&in, &t, &ac, gradients] { return detail::evaluate_teacher(in, t, ac, gradients); }));
  }
  std::vector<detail::TeacherResult> results;
  for (auto& f : futures) results.push_back(f.get());

  WeightSchedule schedule{in.schedule, {}};
  std::vector<TeacherStats> stats;
  if (in.schedule == WeightSchedule::Kind::static_weights) {
    for (const auto& t : in.teachers) schedule.weights.push_back(t.config.weight);
  } else {
    // Teachers tokenize differently, so only the per-teacher means are
    // compared; each is taken over that teacher's own positions.
    for (const auto& t : in.teachers) stats.push_back(detail::teacher_stats(t));
  }
  std::vector<double> alpha;
  if (schedule.kind == WeightSchedule::Kind::static_weights) {
    alpha = resolve_weights(schedule, in.teachers.size());
  } else {
    std::vector<double> means;
    for (const auto& st : stats) means.push_back(mean_confidence(schedule.kind, st));
    alpha = softmax(means);
  }

  LossReport rep;
  for (std::size_t m = 0; m < results.size(); ++m) {
    results[m].report.alpha = alpha[m];
    rep.l_kd += alpha[m] * results[m].report.kd;
  }
  std::vector<std::vector<double>> ce_grad;
  rep.l_ce = student_cross_entropy(in.student, gradients ? &ce_grad : nullptr);
  const auto c = combine_kd_ce(rep.l_kd, rep.l_ce, in.policy);
  rep.total = c.total;
  rep.kd_multiplier = c.kd_multiplier;
  rep.ce_multiplier = c.ce_multiplier;

  if (gradients) {
    rep.grad_student = std::move(ce_grad);
    for (auto& g : rep.grad_student) {
      for (double& x : g) x *= c.ce_multiplier;
    }
    for (std::size_t m = 0; m < results.size(); ++m) {
      auto& r = results[m];
      const double scale = c.kd_multiplier * alpha[m] * in.tau * in.tau / static_cast<double>(r.report.chunk_values.size());
      for (std::size_t b = 0; b < rep.grad_student.size(); ++b) {
        for (std::size_t i = 0; i < rep.grad_student[b].size(); ++i) rep.grad_student[b][i] += scale * r.grad_student[b][i];
      }
      for (double& x : r.report.grad_w) x *= scale;
    }
  }
  for (auto& r : results) rep.teachers.push_back(std::move(r.report));
  return rep;
}

// ---------------------------------------------------------------------------
// Step configuration files
// ---------------------------------------------------------------------------

// The resolved configuration: every knob filled in, paths as written.
struct StepConfig {
  struct Teacher {
    std::string name;
    std::string vocab;
    std::string mode = "P-KL";
    std::string projection;  // empty when absent
    double weight = 1.0;
    std::vector<std::string> logits;
  };
  std::string student_vocab;
  std::vector<std::string> student_logits;
  std::vector<Teacher> teachers;
  ScalingPolicy policy;
  WeightSchedule::Kind schedule = WeightSchedule::Kind::static_weights;
  double tau = 1.0;
  AlignScoring scoring;
  LossOptions loss;
  HybridWeights hybrid;
};

inline StepConfig step_config_from_json(const nlohmann::json& j) {
  StepConfig c;
  try {
    const auto& s = j.at("student");
    c.student_vocab = s.at("vocab").get<std::string>();
    c.student_logits = s.at("logits").get<std::vector<std::string>>();
    for (const auto& t : j.at("teachers")) {
      StepConfig::Teacher tc;
      tc.name = t.at("name").get<std::string>();
      tc.vocab = t.at("vocab").get<std::string>();
      tc.mode = t.value("mode", tc.mode);
      if (!loss_mode_from_string(tc.mode)) throw ValidationError("teacher '" + tc.name + "': unknown loss mode '" + tc.mode + "'");
      tc.mode = std::string(to_string(*loss_mode_from_string(tc.mode)));
      tc.projection = t.value("projection", std::string());
      tc.weight = t.value("weight", 1.0);
      tc.logits = t.at("logits").get<std::vector<std::string>>();
      c.teachers.push_back(std::move(tc));
    }
    if (j.contains("policy")) {
      const auto& p = j["policy"];
      const auto kind = p.value("kind", std::string("dynamic"));
      if (kind == "dynamic") {
        c.policy = ScalingPolicy::dynamic();
      } else if (kind == "fixed") {
        c.policy = ScalingPolicy::fixed(p.value("lambda_kd", 1.0), p.value("lambda_ce", 0.1));
      } else {
        throw ValidationError("unknown scaling policy '" + kind + "'");
      }
    }
    if (j.contains("schedule")) {
      const auto kind = j["schedule"].get<std::string>();
      const auto k = schedule_kind_from_string(kind);
      if (!k) throw ValidationError("unknown weight schedule '" + kind + "'");
      c.schedule = *k;
    }
    c.tau = j.value("tau", c.tau);
    c.loss.top_k = j.value("top_k", c.loss.top_k);
    c.loss.eps = j.value("eps", c.loss.eps);
    c.hybrid.lambda_kl = j.value("lambda_kl", c.hybrid.lambda_kl);
    c.hybrid.lambda_uld = j.value("lambda_uld", c.hybrid.lambda_uld);
    if (j.contains("scoring")) {
      const auto& sc = j["scoring"];
      c.scoring.alpha_exact = sc.value("alpha_exact", c.scoring.alpha_exact);
      c.scoring.alpha_comb = sc.value("alpha_comb", c.scoring.alpha_comb);
      c.scoring.alpha_gap = sc.value("alpha_gap", c.scoring.alpha_gap);
      c.scoring.max_span = sc.value("max_span", c.scoring.max_span);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("step config: ") + e.what());
  }
  if (c.teachers.empty()) throw ValidationError("step config names no teachers");
  if (!(c.tau > 0)) throw ValidationError("temperature must be > 0");
  c.scoring.validate();
  c.loss.validate();
  c.hybrid.validate();
  c.policy.validate();
  return c;
}

inline nlohmann::ordered_json step_config_to_json(const StepConfig& c) {
  nlohmann::ordered_json j;
  j["student"] = {{"vocab", c.student_vocab}, {"logits", c.student_logits}};
  j["teachers"] = nlohmann::ordered_json::array();
  for (const auto& t : c.teachers) {
    nlohmann::ordered_json tj;
    tj["name"] = t.name;
    tj["vocab"] = t.vocab;
    tj["mode"] = t.mode;
    if (!t.projection.empty()) tj["projection"] = t.projection;
    tj["weight"] = t.weight;
    tj["logits"] = t.logits;
    j["teachers"].push_back(std::move(tj));
  }
  nlohmann::ordered_json p;
  p["kind"] = to_string(c.policy.kind);
  if (c.policy.kind == ScalingPolicy::Kind::fixed) {
    p["lambda_kd"] = c.policy.lambda_kd;
    p["lambda_ce"] = c.policy.lambda_ce;
  }
  j["policy"] = std::move(p);
  j["schedule"] = to_string(c.schedule);
  j["tau"] = c.tau;
  j["top_k"] = c.loss.top_k;
  j["eps"] = c.loss.eps;
  j["lambda_kl"] = c.hybrid.lambda_kl;
  j["lambda_uld"] = c.hybrid.lambda_uld;
  j["scoring"] = {{"alpha_exact", c.scoring.alpha_exact},
                  {"alpha_comb", c.scoring.alpha_comb},
                  {"alpha_gap", c.scoring.alpha_gap},
                  {"max_span", c.scoring.max_span}};
  return j;
}

// Loads every file a step config names; relative paths resolve against
// `base_dir`.
inline StepInput load_step_input(const StepConfig& c, const std::filesystem::path& base_dir) {
  auto resolve = [&](const std::string& p) { return (base_dir / p).lexically_normal().string(); };
  StepInput in;
  in.student_vocab = load_vocabulary(resolve(c.student_vocab));
  for (const auto& p : c.student_logits) in.student.push_back(load_logits(resolve(p)));
  for (const auto& t : c.teachers) {
    StepTeacher st;
    st.config.name = t.name;
    st.config.vocab = load_vocabulary(resolve(t.vocab));
    st.config.mode = *loss_mode_from_string(t.mode);
    if (!t.projection.empty()) st.config.projection = load_projection(resolve(t.projection));
    st.config.weight = t.weight;
    for (const auto& p : t.logits) st.sequences.push_back(load_logits(resolve(p)));
    in.teachers.push_back(std::move(st));
  }
  in.policy = c.policy;
  in.schedule = c.schedule;
  in.tau = c.tau;
  in.scoring = c.scoring;
  in.loss = c.loss;
  in.hybrid = c.hybrid;
  return in;
}

// Report JSON. Gradient tensors are referenced by path when the caller has
// written them.
inline nlohmann::ordered_json loss_report_to_json(const LossReport& r, const nlohmann::ordered_json& config_echo,
                                                  const std::vector<std::string>& student_grad_paths = {},
                                                  const std::vector<std::string>& w_grad_paths = {}) {
  nlohmann::ordered_json j;
  if (r.teachers.size() == 1) {
    j["mode"] = to_string(r.teachers[0].mode);
  } else {
    j["mode"] = nlohmann::ordered_json::array();
    for (const auto& t : r.teachers) j["mode"].push_back(to_string(t.mode));
  }
  j["teachers"] = nlohmann::ordered_json::array();
  for (std::size_t m = 0; m < r.teachers.size(); ++m) {
    const auto& t = r.teachers[m];
    nlohmann::ordered_json tj;
    tj["name"] = t.name;
    tj["mode"] = to_string(t.mode);
    tj["alpha"] = t.alpha;
    tj["chunks"] = t.chunk_values.size();
    tj["gaps"] = t.gaps;
    tj["mismatches"] = t.mismatches;
    tj["per_chunk"] = t.chunk_values;
    tj["aggregate"] = t.kd;
    if (m < w_grad_paths.size() && !w_grad_paths[m].empty()) tj["grad_w"] = w_grad_paths[m];
    j["teachers"].push_back(std::move(tj));
  }
  j["l_kd"] = r.l_kd;
  j["l_ce"] = r.l_ce;
  j["kd_multiplier"] = r.kd_multiplier;
  j["ce_multiplier"] = r.ce_multiplier;
  j["total"] = r.total;
  if (!student_grad_paths.empty()) j["grad_student"] = student_grad_paths;
  j["config"] = config_echo;
  return j;
}

}  // namespace ctkd
