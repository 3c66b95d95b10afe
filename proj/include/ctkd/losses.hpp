// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctkd/chunks.hpp"
#include "ctkd/error.hpp"
#include "ctkd/projection.hpp"
#include "ctkd/vocab.hpp"

namespace ctkd {

enum class LossMode { pkl, hkl, gold, uld, kl };

inline std::string_view to_string(LossMode m) {
  switch (m) {
    case LossMode::pkl: return "P-KL";
    case LossMode::hkl: return "H-KL";
    case LossMode::gold: return "GOLD";
    case LossMode::uld: return "ULD";
    case LossMode::kl: return "KL";
  }
  return "?";
}

// Accepts both the short flag spelling ("pkl") and the tag ("P-KL").
inline std::optional<LossMode> loss_mode_from_string(std::string_view s) {
  if (s == "pkl" || s == "P-KL") return LossMode::pkl;
  if (s == "hkl" || s == "H-KL") return LossMode::hkl;
  if (s == "gold" || s == "GOLD") return LossMode::gold;
  if (s == "uld" || s == "ULD") return LossMode::uld;
  if (s == "kl" || s == "KL") return LossMode::kl;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Common sets
// ---------------------------------------------------------------------------

struct CommonSet {
  std::vector<std::pair<TokenId, TokenId>> pairs;  // (student, teacher), sorted by student id
  bool bijective = true;

  void validate() const {
    std::unordered_map<TokenId, int> seen_s, seen_t;
    for (const auto& [s, t] : pairs) {
      if (seen_s[s]++) throw ValidationError("common set repeats student id " + std::to_string(s));
      if (bijective && seen_t[t]++) throw ValidationError("bijective common set repeats teacher id " + std::to_string(t));
    }
  }

  std::vector<bool> student_mask(std::size_t n) const {
    std::vector<bool> m(n, false);
    for (const auto& p : pairs) m.at(static_cast<std::size_t>(p.first)) = true;
    return m;
  }
  std::vector<bool> teacher_mask(std::size_t n) const {
    std::vector<bool> m(n, false);
    for (const auto& p : pairs) m.at(static_cast<std::size_t>(p.second)) = true;
    return m;
  }
};

// Canonical-string-equality pairs. Colliding keys pair the smallest ids and
// drop the rest, so the result is bijective.
inline CommonSet build_common_set_exact(const Vocabulary& vs, const Vocabulary& vt) {
  std::unordered_map<std::string, TokenId> teacher_by_key;
  for (TokenId t = 0; t < static_cast<TokenId>(vt.size()); ++t) {
    if (const auto& key = vt.match_key(t)) teacher_by_key.emplace(*key, t);
  }
  CommonSet c;
  for (TokenId s = 0; s < static_cast<TokenId>(vs.size()); ++s) {
    const auto& key = vs.match_key(s);
    if (!key) continue;
    auto it = teacher_by_key.find(*key);
    if (it == teacher_by_key.end()) continue;
    c.pairs.emplace_back(s, it->second);
    teacher_by_key.erase(it);
  }
  return c;
}

// Every student with a nonempty projection row proposes (s, top1(s)). When
// several students claim the same teacher token, an exact-provenance pair
// wins, then the larger weight, then the smaller student id; losers stay
// uncommon.
inline CommonSet build_common_set_relaxed(const SparseProjection& w) {
  struct Claim {
    TokenId student;
    double weight;
    bool exact;
  };
  std::unordered_map<TokenId, Claim> winner;
  for (TokenId s = 0; s < static_cast<TokenId>(w.n_student()); ++s) {
    const auto best = top1(w, s);
    if (!best) continue;
    Claim c{s, best->weight, w.provenance(static_cast<std::size_t>(s)) == RowProvenance::exact};
    auto [it, inserted] = winner.emplace(best->teacher, c);
    if (inserted) continue;
    const Claim& cur = it->second;
    const bool better = (c.exact != cur.exact) ? c.exact
                        : (c.weight != cur.weight) ? c.weight > cur.weight
                                                   : c.student < cur.student;
    if (better) it->second = c;
  }
  CommonSet out;
  for (const auto& [t, c] : winner) out.pairs.emplace_back(c.student, t);
  std::sort(out.pairs.begin(), out.pairs.end());
  return out;
}

struct HybridWeights {
  double lambda_kl = 1.0;
  double lambda_uld = 1.0;

  void validate() const {
    if (!(lambda_kl >= 0) || !(lambda_uld >= 0)) throw ValidationError("hybrid loss weights must be >= 0");
  }
};

// Knobs shared by the loss kernels. `eps` is added inside logarithms only;
// `top_k` = 0 disables teacher-side truncation.
struct LossOptions {
  double eps = 1e-12;
  std::size_t top_k = 0;

  void validate() const {
    if (!(eps >= 0)) throw ValidationError("log floor eps must be >= 0");
  }
};

// Value plus gradients with respect to the student distribution and, for
// P-KL, the projection entries (CSR order).
struct LossValueGrad {
  double value = 0.0;
  std::vector<double> grad_p;
  std::vector<double> grad_w;
};

namespace detail {

inline double log_ratio(double p, double q, double eps, std::string_view what) {
  if (eps == 0.0 && q == 0.0) throw ValidationError(std::string(what) + ": log of zero student probability");
  return std::log(p + eps) - std::log(q + eps);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Common-set KL and its gradient
// ---------------------------------------------------------------------------

// Partial KL over the common pairs, on full-vocabulary distributions.
inline LossValueGrad common_kl_with_grad(std::span<const double> p_t, std::span<const double> p_s, const CommonSet& c,
                                         double eps = 1e-12) {
  LossValueGrad out;
  out.grad_p.assign(p_s.size(), 0.0);
  for (const auto& [s, t] : c.pairs) {
    const double pt = p_t[static_cast<std::size_t>(t)];
    if (pt == 0.0) continue;
    const double ps = p_s[static_cast<std::size_t>(s)];
    out.value += pt * detail::log_ratio(pt, ps, eps, "common_kl");
    out.grad_p[static_cast<std::size_t>(s)] -= pt / (ps + eps);
  }
  return out;
}

inline double common_kl(std::span<const double> p_t, std::span<const double> p_s, const CommonSet& c, double eps = 1e-12) {
  return common_kl_with_grad(p_t, p_s, c, eps).value;
}

// Teacher mass on the common set's teacher side.
inline double common_teacher_mass(std::span<const double> p_t, const CommonSet& c) {
  double m = 0.0;
  const auto mask = c.teacher_mask(p_t.size());
  for (std::size_t t = 0; t < p_t.size(); ++t) m += mask[t] ? p_t[t] : 0.0;
  return m;
}

// Analytic d common_kl / d z_s with p_s = softmax(z_s) and no log floor:
//   uncommon j:           p_s[j] * M
//   common j paired to t: p_s[j] * M - p_t[t]
// where M is the teacher mass on the common set. It depends on p_t and the
// pairing only, never on the realized token.
inline std::vector<double> common_kl_grad(std::span<const double> z_s, std::span<const double> p_t, const CommonSet& c) {
  const auto p_s = softmax(z_s);
  double mass = 0.0;
  for (const auto& pr : c.pairs) mass += p_t[static_cast<std::size_t>(pr.second)];
  std::vector<double> g(p_s.size());
  for (std::size_t j = 0; j < p_s.size(); ++j) g[j] = p_s[j] * mass;
  for (const auto& [s, t] : c.pairs) g[static_cast<std::size_t>(s)] -= p_t[static_cast<std::size_t>(t)];
  return g;
}

// ---------------------------------------------------------------------------
// ULD: rank-sorted L1 on the uncommon remainders
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::size_t> sorted_uncommon(std::span<const double> p, const std::vector<bool>& common) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!common[i]) idx.push_back(i);
  }
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  return idx;
}

}  // namespace detail

// Restrictions are not renormalized; the shorter sorted vector is zero-padded.
// The gradient is the sign subgradient, routed back through the sort.
inline LossValueGrad uld_with_grad(std::span<const double> p_s, std::span<const double> p_t, const CommonSet& c) {
  const auto us = detail::sorted_uncommon(p_s, c.student_mask(p_s.size()));
  const auto ut = detail::sorted_uncommon(p_t, c.teacher_mask(p_t.size()));
  LossValueGrad out;
  out.grad_p.assign(p_s.size(), 0.0);
  const std::size_t n = std::max(us.size(), ut.size());
  for (std::size_t r = 0; r < n; ++r) {
    const double a = r < us.size() ? p_s[us[r]] : 0.0;
    const double b = r < ut.size() ? p_t[ut[r]] : 0.0;
    out.value += std::abs(a - b);
    if (r < us.size()) out.grad_p[us[r]] = a > b ? 1.0 : (a < b ? -1.0 : 0.0);
  }
  return out;
}

inline double uld(std::span<const double> p_s, std::span<const double> p_t, const CommonSet& c) {
  return uld_with_grad(p_s, p_t, c).value;
}

// ---------------------------------------------------------------------------
// Hybrid (GOLD / H-KL)
// ---------------------------------------------------------------------------

inline LossValueGrad hybrid_with_grad(std::span<const double> p_t, std::span<const double> p_s, const CommonSet& c,
                                      const HybridWeights& hw, double eps = 1e-12) {
  hw.validate();
  auto ckl = common_kl_with_grad(p_t, p_s, c, eps);
  auto u = uld_with_grad(p_s, p_t, c);
  LossValueGrad out;
  out.value = hw.lambda_kl * ckl.value + hw.lambda_uld * u.value;
  out.grad_p.resize(p_s.size());
  for (std::size_t i = 0; i < p_s.size(); ++i) out.grad_p[i] = hw.lambda_kl * ckl.grad_p[i] + hw.lambda_uld * u.grad_p[i];
  return out;
}

inline double gold(std::span<const double> p_t, std::span<const double> p_s, const CommonSet& c,
                   const HybridWeights& hw = {}, double eps = 1e-12) {
  return hybrid_with_grad(p_t, p_s, c, hw, eps).value;
}

// GOLD over the common set expanded through the projection's top-1 entries.
inline double hkl(std::span<const double> p_t, std::span<const double> p_s, const SparseProjection& w,
                  const HybridWeights& hw = {}, double eps = 1e-12) {
  return gold(p_t, p_s, build_common_set_relaxed(w), hw, eps);
}

// ---------------------------------------------------------------------------
// Plain KL (same vocabulary)
// ---------------------------------------------------------------------------

namespace detail {

// KL(p_t || x_S / sum_S x) on a support S, with the gradient pulled back to x.
// Support = all indices when empty.
inline LossValueGrad restricted_kl(std::span<const double> p_t, std::span<const double> x,
                                   const std::vector<std::size_t>& support, double eps, std::string_view what) {
  std::vector<std::size_t> all;
  const std::vector<std::size_t>* S = &support;
  if (support.empty()) {
    all.resize(x.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    S = &all;
  }
  double tm = 0.0, z = 0.0;
  for (std::size_t i : *S) {
    tm += p_t[i];
    z += x[i];
  }
  if (z < 1e-12) throw ValidationError(std::string(what) + ": student mass on the teacher support is zero");
  if (!(tm > 0)) throw ValidationError(std::string(what) + ": teacher distribution has no mass");
  // Teacher is renormalized only when actually truncated.
  const double tnorm = support.empty() ? 1.0 : tm;

  LossValueGrad out;
  out.grad_p.assign(x.size(), 0.0);
  std::vector<double> g_f(S->size(), 0.0);
  double inner = 0.0;
  for (std::size_t k = 0; k < S->size(); ++k) {
    const std::size_t i = (*S)[k];
    const double pt = p_t[i] / tnorm;
    if (pt == 0.0) continue;
    const double f = x[i] / z;
    out.value += pt * log_ratio(pt, f, eps, what);
    g_f[k] = -pt / (f + eps);
    inner += g_f[k] * f;
  }
  for (std::size_t k = 0; k < S->size(); ++k) {
    const std::size_t i = (*S)[k];
    out.grad_p[i] = (g_f[k] - inner) / z;
  }
  return out;
}

}  // namespace detail

// KL(p_t || p_s) over one vocabulary; with opts.top_k both sides are
// restricted to the teacher's top-k support and renormalized.
inline LossValueGrad kl_with_grad(std::span<const double> p_t, std::span<const double> p_s, const LossOptions& opts = {}) {
  opts.validate();
  if (p_t.size() != p_s.size()) throw ValidationError("KL needs distributions over the same vocabulary");
  std::vector<std::size_t> support;
  if (opts.top_k > 0 && opts.top_k < p_t.size()) support = topk_support(p_t, opts.top_k);
  if (support.empty()) {
    // Untruncated: no renormalization of the student, so the gradient is the
    // plain -p_t / p_s.
    LossValueGrad out;
    out.grad_p.assign(p_s.size(), 0.0);
    for (std::size_t i = 0; i < p_t.size(); ++i) {
      if (p_t[i] == 0.0) continue;
      out.value += p_t[i] * detail::log_ratio(p_t[i], p_s[i], opts.eps, "KL");
      out.grad_p[i] = -p_t[i] / (p_s[i] + opts.eps);
    }
    return out;
  }
  return detail::restricted_kl(p_t, p_s, support, opts.eps, "KL");
}

inline double kl(std::span<const double> p_t, std::span<const double> p_s, const LossOptions& opts = {}) {
  return kl_with_grad(p_t, p_s, opts).value;
}

// ---------------------------------------------------------------------------
// P-KL
// ---------------------------------------------------------------------------

// KL(p_t || renormalized W^T p_s). With opts.top_k the teacher is truncated
// first and the projected vector is restricted to that support and
// renormalized. grad_w is in CSR order.
inline LossValueGrad pkl_with_grad(std::span<const double> p_t, std::span<const double> p_s, const SparseProjection& w,
                                   const LossOptions& opts = {}) {
  opts.validate();
  detail::check_distribution(p_s, w.n_student(), "student distribution");
  detail::check_distribution(p_t, w.n_teacher(), "teacher distribution");
  const auto q = project_unnormalized(w, p_s);
  std::vector<std::size_t> support;
  if (opts.top_k > 0 && opts.top_k < p_t.size()) support = topk_support(p_t, opts.top_k);
  auto r = detail::restricted_kl(p_t, q, support, opts.eps, "P-KL");

  LossValueGrad out;
  out.value = r.value;
  out.grad_p.assign(w.n_student(), 0.0);
  out.grad_w.assign(w.nnz(), 0.0);
  for (std::size_t s = 0; s < w.n_student(); ++s) {
    const auto ts = w.row_teachers(s);
    const auto ws = w.row_weights(s);
    const std::size_t off = w.row_offset(s);
    double acc = 0.0;
    for (std::size_t e = 0; e < ts.size(); ++e) {
      const double dq = r.grad_p[static_cast<std::size_t>(ts[e])];
      acc += ws[e] * dq;
      out.grad_w[off + e] = p_s[s] * dq;
    }
    out.grad_p[s] = acc;
  }
  return out;
}

inline double pkl(std::span<const double> p_t, std::span<const double> p_s, const SparseProjection& w,
                  const LossOptions& opts = {}) {
  return pkl_with_grad(p_t, p_s, w, opts).value;
}

struct PklGrads {
  double value = 0.0;
  std::vector<double> logits;  // over V_S
  std::vector<double> w;       // CSR order
};

// Gradients of P-KL with p_s = softmax(z_s).
inline PklGrads pkl_grads(std::span<const double> z_s, std::span<const double> p_t, const SparseProjection& w,
                          const LossOptions& opts = {}) {
  const auto p_s = softmax(z_s);
  auto r = pkl_with_grad(p_t, p_s, w, opts);
  return PklGrads{r.value, softmax_backward(p_s, r.grad_p), std::move(r.grad_w)};
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

// tau^2 times the mean over loss-bearing chunks, summed in index order.
inline double kd_aggregate(std::span<const double> per_chunk, double tau = 1.0) {
  if (per_chunk.empty()) throw ValidationError("kd_aggregate: no aligned chunks carry a loss");
  if (!(tau > 0)) throw ValidationError("temperature must be > 0");
  double sum = 0.0;
  for (double x : per_chunk) sum += x;
  return tau * tau * (sum / static_cast<double>(per_chunk.size()));
}

}  // namespace ctkd
