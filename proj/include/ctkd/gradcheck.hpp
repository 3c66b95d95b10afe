// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ctkd/chunks.hpp"
#include "ctkd/losses.hpp"
#include "ctkd/projection.hpp"
#include "ctkd/training.hpp"

namespace ctkd {

// Central differences of f at x, one coordinate at a time.
inline std::vector<double> numeric_gradient(const std::function<double(std::span<const double>)>& f,
                                            std::span<const double> x, double h = 1e-6) {
  std::vector<double> xs(x.begin(), x.end());
  std::vector<double> g(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double orig = xs[i];
    xs[i] = orig + h;
    const double up = f(xs);
    xs[i] = orig - h;
    const double down = f(xs);
    xs[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// max|a - n| / max(max|a|, max|n|, 1e-3). The floor keeps near-zero
// gradients from turning rounding noise into large ratios.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, scale = 1e-3;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

// ---------------------------------------------------------------------------
// Random instances
// ---------------------------------------------------------------------------

inline std::vector<double> random_logits(std::mt19937_64& rng, std::size_t n, double spread = 2.0) {
  std::normal_distribution<double> d(0.0, spread);
  std::vector<double> z(n);
  for (double& x : z) x = d(rng);
  return z;
}

// Row-sparse projection with 1..max_row entries per row, positive weights
// summing to 1, every row nonempty.
inline SparseProjection random_projection(std::mt19937_64& rng, std::size_t n_s, std::size_t n_t, std::size_t max_row = 4) {
  std::vector<std::vector<ProjectionEntry>> rows(n_s);
  std::vector<RowProvenance> prov(n_s, RowProvenance::multi_token);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (auto& row : rows) {
    std::vector<TokenId> ids(n_t);
    for (std::size_t t = 0; t < n_t; ++t) ids[t] = static_cast<TokenId>(t);
    std::shuffle(ids.begin(), ids.end(), rng);
    const std::size_t k = 1 + rng() % std::min(max_row, n_t);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      row.push_back({ids[i], u(rng)});
      sum += row.back().weight;
    }
    for (auto& e : row) e.weight /= sum;
    std::sort(row.begin(), row.end(), [](const auto& a, const auto& b) {
      return a.weight != b.weight ? a.weight > b.weight : a.teacher < b.teacher;
    });
  }
  return SparseProjection(n_s, n_t, ProjectionConfig{}, std::move(rows), std::move(prov));
}

// Random bijective common set between vocabularies of size n_s and n_t.
inline CommonSet random_common_set(std::mt19937_64& rng, std::size_t n_s, std::size_t n_t) {
  std::vector<TokenId> s(n_s), t(n_t);
  for (std::size_t i = 0; i < n_s; ++i) s[i] = static_cast<TokenId>(i);
  for (std::size_t i = 0; i < n_t; ++i) t[i] = static_cast<TokenId>(i);
  std::shuffle(s.begin(), s.end(), rng);
  std::shuffle(t.begin(), t.end(), rng);
  const std::size_t k = rng() % (std::min(n_s, n_t) + 1);
  CommonSet c;
  for (std::size_t i = 0; i < k; ++i) c.pairs.emplace_back(s[i], t[i]);
  std::sort(c.pairs.begin(), c.pairs.end());
  return c;
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

struct GradcheckResult {
  std::string name;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
};

// Compares every analytic gradient the library exposes against central
// differences on `instances` random toy problems per check.
inline std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, std::size_t instances = 100, double h = 1e-6) {
  std::mt19937_64 rng(seed);
  auto dim = [&](std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); };
  std::vector<GradcheckResult> out;

  {
    GradcheckResult r{"pkl_logits", instances, 0.0};
    GradcheckResult rw{"pkl_w", instances, 0.0};
    for (std::size_t it = 0; it < instances; ++it) {
      const std::size_t ns = dim(2, 12), nt = dim(2, 12);
      const auto w = random_projection(rng, ns, nt);
      const auto z = random_logits(rng, ns);
      const auto p_t = softmax(random_logits(rng, nt));
      const LossOptions opts;
      const auto g = pkl_grads(z, p_t, w, opts);
      const auto ng = numeric_gradient([&](std::span<const double> x) { return pkl(p_t, softmax(x), w, opts); }, z, h);
      r.max_rel_error = std::max(r.max_rel_error, relative_error(g.logits, ng));
      const auto p_s = softmax(z);
      const auto nw = numeric_gradient(
          [&](std::span<const double> x) { return pkl(p_t, p_s, w.with_weights({x.begin(), x.end()}), opts); }, w.weights(), h);
      rw.max_rel_error = std::max(rw.max_rel_error, relative_error(g.w, nw));
    }
    out.push_back(r);
    out.push_back(rw);
  }

  {
    GradcheckResult r{"common_kl_logits", instances, 0.0};
    for (std::size_t it = 0; it < instances; ++it) {
      const std::size_t ns = dim(2, 12), nt = dim(2, 12);
      const auto c = random_common_set(rng, ns, nt);
      const auto z = random_logits(rng, ns);
      const auto p_t = softmax(random_logits(rng, nt));
      const auto g = common_kl_grad(z, p_t, c);
      const auto ng = numeric_gradient([&](std::span<const double> x) { return common_kl(p_t, softmax(x), c, 0.0); }, z, h);
      r.max_rel_error = std::max(r.max_rel_error, relative_error(g, ng));
    }
    out.push_back(r);
  }

  {
    GradcheckResult r{"chain_rule_merge", instances, 0.0};
    for (std::size_t it = 0; it < instances; ++it) {
      const std::size_t V = dim(2, 8), m = dim(1, 4);
      std::vector<TokenId> realized(m);
      for (auto& y : realized) y = static_cast<TokenId>(rng() % V);
      const PositionLogits lg(V, random_logits(rng, m * V), realized);
      AlignmentChunk chunk{{0, m}, {0, 1}, m == 1 ? ChunkKind::match : ChunkKind::combination, false};
      const auto dq = random_logits(rng, V, 1.0);
      auto f = [&](std::span<const double> x) {
        const auto q = chain_rule_merge(lg.with_values({x.begin(), x.end()}), chunk, Side::student);
        double s = 0.0;
        for (std::size_t v = 0; v < V; ++v) s += dq[v] * q.probs[v];
        return s;
      };
      std::vector<double> g(m * V, 0.0);
      chain_rule_merge_backward(lg, chunk, Side::student, 1.0, dq, g);
      r.max_rel_error = std::max(r.max_rel_error, relative_error(g, numeric_gradient(f, lg.values(), h)));
    }
    out.push_back(r);
  }

  {
    // End to end: the assembled gradient of a dynamic step must equal the
    // gradient of l_ce + gamma * l_kd with gamma frozen at its current value.
    GradcheckResult r{"step_stop_gradient", instances, 0.0};
    const std::size_t n_step = std::max<std::size_t>(1, instances / 10);
    r.instances = n_step;
    for (std::size_t it = 0; it < n_step; ++it) {
      const std::size_t V = dim(3, 6), n = dim(2, 5);
      std::vector<std::string> toks;
      for (std::size_t v = 0; v < V; ++v) toks.push_back(std::string(1, static_cast<char>('a' + v)));
      const Vocabulary vocab(toks);
      std::vector<TokenId> ids(n);
      for (auto& y : ids) y = static_cast<TokenId>(rng() % V);
      StepInput in;
      in.student_vocab = vocab;
      in.student.push_back({"seq", Side::student, vocab.content_hash(), PositionLogits(V, random_logits(rng, n * V), ids)});
      StepTeacher t;
      t.config.name = "t";
      t.config.vocab = vocab;
      t.config.mode = LossMode::pkl;
      t.config.projection = random_projection(rng, V, V, 3);
      t.sequences.push_back({"seq", Side::teacher, vocab.content_hash(), PositionLogits(V, random_logits(rng, n * V), ids)});
      in.teachers.push_back(std::move(t));
      const auto rep = run_step(in, true);
      StepInput frozen = in;
      frozen.policy = ScalingPolicy::fixed(rep.kd_multiplier, 1.0);
      const auto base = in.student[0].logits;
      auto f = [&](std::span<const double> x) {
        frozen.student[0].logits = base.with_values({x.begin(), x.end()});
        return run_step(frozen).total;
      };
      r.max_rel_error = std::max(r.max_rel_error, relative_error(rep.grad_student[0], numeric_gradient(f, base.values(), h)));
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace ctkd
