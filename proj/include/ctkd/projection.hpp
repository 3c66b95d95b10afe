// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ctkd/error.hpp"
#include "ctkd/hash.hpp"
#include "ctkd/vocab.hpp"

namespace ctkd {

struct ProjectionConfig {
  double beta = 0.9;
  double gamma = 0.1;
  int max_span = 4;
  int top_k = 4;

  void validate() const {
    if (!(gamma > 0 && gamma < beta && beta <= 1)) throw ValidationError("projection needs 0 < gamma < beta <= 1");
    if (top_k < 1) throw ValidationError("projection top_k must be >= 1");
    if (max_span < 1) throw ValidationError("projection max_span must be >= 1");
  }

  friend bool operator==(const ProjectionConfig&, const ProjectionConfig&) = default;
};

enum class RowProvenance { empty, exact, multi_token };

inline std::string_view to_string(RowProvenance p) {
  switch (p) {
    case RowProvenance::empty: return "empty";
    case RowProvenance::exact: return "exact";
    case RowProvenance::multi_token: return "multi_token";
  }
  return "?";
}

inline std::optional<RowProvenance> provenance_from_string(std::string_view s) {
  if (s == "empty") return RowProvenance::empty;
  if (s == "exact") return RowProvenance::exact;
  if (s == "multi_token") return RowProvenance::multi_token;
  return std::nullopt;
}

struct ProjectionEntry {
  TokenId teacher = 0;
  double weight = 0.0;

  friend bool operator==(const ProjectionEntry&, const ProjectionEntry&) = default;
};

// Row-sparse |V_S| x |V_T| matrix in compressed-row form. Rule-built rows are
// sorted by descending weight (smaller teacher id first on ties).
class SparseProjection {
 public:
  SparseProjection() = default;

  SparseProjection(std::size_t n_student, std::size_t n_teacher, ProjectionConfig cfg,
                   std::vector<std::vector<ProjectionEntry>> rows, std::vector<RowProvenance> provenance,
                   bool refined = false, std::vector<double> dropped = {})
      : n_student_(n_student), n_teacher_(n_teacher), cfg_(cfg), refined_(refined) {
    cfg_.validate();
    if (rows.size() != n_student || provenance.size() != n_student) {
      throw ValidationError("projection row count does not match |V_S|");
    }
    row_ptr_.reserve(n_student + 1);
    for (std::size_t s = 0; s < n_student; ++s) {
      for (const auto& e : rows[s]) {
        cols_.push_back(e.teacher);
        vals_.push_back(e.weight);
      }
      row_ptr_.push_back(cols_.size());
    }
    provenance_ = std::move(provenance);
    dropped_ = dropped.empty() ? std::vector<double>(n_student, 0.0) : std::move(dropped);
    if (dropped_.size() != n_student) throw ValidationError("dropped-mass vector does not match |V_S|");
    validate();
  }

  std::size_t n_student() const { return n_student_; }
  std::size_t n_teacher() const { return n_teacher_; }
  const ProjectionConfig& config() const { return cfg_; }
  bool refined() const { return refined_; }
  std::size_t nnz() const { return vals_.size(); }

  std::span<const TokenId> row_teachers(std::size_t s) const {
    return std::span<const TokenId>(cols_).subspan(row_ptr_[s], row_ptr_[s + 1] - row_ptr_[s]);
  }
  std::span<const double> row_weights(std::size_t s) const {
    return std::span<const double>(vals_).subspan(row_ptr_[s], row_ptr_[s + 1] - row_ptr_[s]);
  }
  std::size_t row_offset(std::size_t s) const { return row_ptr_[s]; }
  std::size_t row_size(std::size_t s) const { return row_ptr_[s + 1] - row_ptr_[s]; }

  // Flat views in CSR order; gradients over W use the same layout.
  std::span<const double> weights() const { return vals_; }
  std::span<const TokenId> teachers() const { return cols_; }

  RowProvenance provenance(std::size_t s) const { return provenance_.at(s); }
  // Pass-2 mass removed by top-k truncation, per row.
  double dropped_mass(std::size_t s) const { return dropped_.at(s); }

  // Same sparsity pattern, new values. Used by external refinement and by
  // finite-difference checks; the result is marked refined and only
  // positivity is enforced.
  SparseProjection with_weights(std::span<const double> values) const {
    if (values.size() != vals_.size()) throw ValidationError("weight vector does not match projection nnz");
    SparseProjection out = *this;
    out.vals_.assign(values.begin(), values.end());
    out.refined_ = true;
    out.validate();
    return out;
  }

  std::string content_hash() const;

 private:
  void validate() const {
    for (std::size_t s = 0; s < n_student_; ++s) {
      const auto ws = row_weights(s);
      const auto ts = row_teachers(s);
      double sum = 0.0;
      for (std::size_t e = 0; e < ws.size(); ++e) {
        if (!(ws[e] > 0) || !std::isfinite(ws[e])) {
          throw ValidationError("projection row " + std::to_string(s) + " has a non-positive weight");
        }
        if (ts[e] < 0 || static_cast<std::size_t>(ts[e]) >= n_teacher_) {
          throw ValidationError("projection row " + std::to_string(s) + " has an out-of-range teacher id");
        }
        sum += ws[e];
      }
      if (ws.size() > static_cast<std::size_t>(cfg_.top_k)) {
        throw ValidationError("projection row " + std::to_string(s) + " exceeds top_k entries");
      }
      const RowProvenance p = provenance_[s];
      if ((p == RowProvenance::empty) != ws.empty()) {
        throw ValidationError("projection row " + std::to_string(s) + " provenance disagrees with its entries");
      }
      if (refined_) continue;
      if (p == RowProvenance::exact && (ws.size() != 1 || ws[0] != 1.0)) {
        throw ValidationError("exact projection row " + std::to_string(s) + " must be a single weight-1 entry");
      }
      if (p == RowProvenance::multi_token && sum > 1.0 + 1e-12) {
        throw ValidationError("multi-token projection row " + std::to_string(s) + " sums above 1");
      }
    }
  }

  std::size_t n_student_ = 0;
  std::size_t n_teacher_ = 0;
  ProjectionConfig cfg_;
  bool refined_ = false;
  std::vector<std::size_t> row_ptr_{0};
  std::vector<TokenId> cols_;
  std::vector<double> vals_;
  std::vector<RowProvenance> provenance_;
  std::vector<double> dropped_;
};

// Normalized exponential decay beta*gamma^i over a span of `length` teacher
// sub-tokens. beta cancels under normalization but is kept for fidelity to
// the raw weights.
inline std::vector<double> decay_weights(std::size_t length, double beta = 0.9, double gamma = 0.1) {
  if (length == 0) throw ValidationError("decay_weights needs length >= 1");
  std::vector<double> w(length);
  double raw = beta;
  double total = 0.0;
  for (std::size_t i = 0; i < length; ++i) {
    w[i] = raw;
    total += raw;
    raw *= gamma;
  }
  for (double& x : w) x /= total;
  return w;
}

// Two passes. Pass 1 gives every student token whose canonical form equals a
// teacher token's a single weight-1 entry (smallest teacher id on collisions).
// Pass 2 re-tokenizes each remaining student token's decoded text with the
// teacher tokenizer; spans of 1..max_span teacher tokens get decayed weights
// (repeated sub-tokens accumulate), normalized, then truncated to top_k.
// Anything else stays an empty row.
inline SparseProjection build_projection(const Vocabulary& vs, const Vocabulary& vt, const Tokenizer& tok_t,
                                         const ProjectionConfig& cfg) {
  cfg.validate();
  if (vs.empty() || vt.empty()) throw ValidationError("build_projection needs nonempty vocabularies");
  if (tok_t.vocabulary().size() != vt.size() || tok_t.vocabulary().content_hash() != vt.content_hash()) {
    throw ValidationError("teacher tokenizer does not use the teacher vocabulary");
  }

  std::unordered_map<std::string, TokenId> teacher_by_key;
  teacher_by_key.reserve(vt.size());
  for (TokenId t = 0; t < static_cast<TokenId>(vt.size()); ++t) {
    if (const auto& key = vt.match_key(t)) teacher_by_key.emplace(*key, t);
  }

  const std::size_t ns = vs.size();
  std::vector<std::vector<ProjectionEntry>> rows(ns);
  std::vector<RowProvenance> prov(ns, RowProvenance::empty);
  std::vector<double> dropped(ns, 0.0);

  for (TokenId s = 0; s < static_cast<TokenId>(ns); ++s) {
    if (const auto& key = vs.match_key(s)) {
      if (auto it = teacher_by_key.find(*key); it != teacher_by_key.end()) {
        rows[s] = {{it->second, 1.0}};
        prov[s] = RowProvenance::exact;
        continue;
      }
    }
    if (vs.is_special(s)) continue;
    const std::string& text = vs.surface(s);
    if (text.empty()) continue;
    std::vector<TokenId> pieces;
    try {
      pieces = tok_t.encode(text);
    } catch (const ValidationError&) {
      continue;
    }
    if (pieces.empty() || pieces.size() > static_cast<std::size_t>(cfg.max_span)) continue;

    const auto w = decay_weights(pieces.size(), cfg.beta, cfg.gamma);
    std::map<TokenId, double> acc;
    for (std::size_t i = 0; i < pieces.size(); ++i) acc[pieces[i]] += w[i];
    std::vector<ProjectionEntry> entries;
    for (const auto& [t, x] : acc) entries.push_back({t, x});
    std::stable_sort(entries.begin(), entries.end(),
                     [](const ProjectionEntry& a, const ProjectionEntry& b) { return a.weight > b.weight; });
    const auto k = static_cast<std::size_t>(cfg.top_k);
    if (entries.size() > k) {
      for (std::size_t e = k; e < entries.size(); ++e) dropped[s] += entries[e].weight;
      entries.resize(k);
    }
    rows[s] = std::move(entries);
    prov[s] = RowProvenance::multi_token;
  }

  return SparseProjection(ns, vt.size(), cfg, std::move(rows), std::move(prov), false, std::move(dropped));
}

struct ProjectionSummary {
  std::size_t exact = 0;
  std::size_t multi_token = 0;
  std::size_t empty = 0;
  std::size_t truncated_rows = 0;
  double total_dropped_mass = 0.0;
  double max_dropped_mass = 0.0;
};

inline ProjectionSummary summarize(const SparseProjection& w) {
  ProjectionSummary out;
  for (std::size_t s = 0; s < w.n_student(); ++s) {
    switch (w.provenance(s)) {
      case RowProvenance::exact: ++out.exact; break;
      case RowProvenance::multi_token: ++out.multi_token; break;
      case RowProvenance::empty: ++out.empty; break;
    }
    const double d = w.dropped_mass(s);
    if (d > 0) ++out.truncated_rows;
    out.total_dropped_mass += d;
    out.max_dropped_mass = std::max(out.max_dropped_mass, d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

namespace detail {

inline void check_distribution(std::span<const double> p, std::size_t expected, std::string_view what,
                               double tol = 1e-9) {
  if (p.size() != expected) {
    throw ValidationError(std::string(what) + " has length " + std::to_string(p.size()) + ", expected " +
                          std::to_string(expected));
  }
  double sum = 0.0;
  for (double x : p) {
    if (!(x >= 0) || !std::isfinite(x)) throw ValidationError(std::string(what) + " has a negative or non-finite entry");
    sum += x;
  }
  if (std::abs(sum - 1.0) > tol) {
    std::ostringstream msg;
    msg << what << " sums to " << sum << ", not 1";
    throw ValidationError(msg.str());
  }
}

}  // namespace detail

// W^T p without renormalization.
inline std::vector<double> project_unnormalized(const SparseProjection& w, std::span<const double> p_s) {
  if (p_s.size() != w.n_student()) throw ValidationError("student vector does not match |V_S|");
  std::vector<double> q(w.n_teacher(), 0.0);
  for (std::size_t s = 0; s < w.n_student(); ++s) {
    if (p_s[s] == 0.0) continue;
    const auto ts = w.row_teachers(s);
    const auto ws = w.row_weights(s);
    for (std::size_t e = 0; e < ts.size(); ++e) q[static_cast<std::size_t>(ts[e])] += ws[e] * p_s[s];
  }
  return q;
}

// W^T p renormalized over V_T, which absorbs truncation losses and mass on
// empty rows.
inline std::vector<double> project(const SparseProjection& w, std::span<const double> p_s) {
  detail::check_distribution(p_s, w.n_student(), "student distribution");
  auto q = project_unnormalized(w, p_s);
  double z = 0.0;
  for (double x : q) z += x;
  if (z < 1e-12) throw ValidationError("projection is unusable: no student mass reaches the teacher vocabulary");
  for (double& x : q) x /= z;
  return q;
}

inline std::optional<ProjectionEntry> top1(const SparseProjection& w, TokenId s) {
  if (s < 0 || static_cast<std::size_t>(s) >= w.n_student()) throw ValidationError("student id out of range");
  const auto ts = w.row_teachers(static_cast<std::size_t>(s));
  const auto ws = w.row_weights(static_cast<std::size_t>(s));
  std::optional<ProjectionEntry> best;
  for (std::size_t e = 0; e < ts.size(); ++e) {
    if (!best || ws[e] > best->weight || (ws[e] == best->weight && ts[e] < best->teacher)) {
      best = ProjectionEntry{ts[e], ws[e]};
    }
  }
  return best;
}

// d/dW[s,t] of <upstream, project(W, p)>, differentiating through the
// renormalization. Returned in CSR order, matching SparseProjection::weights().
inline std::vector<double> apply_w_gradient(const SparseProjection& w, std::span<const double> p_s,
                                            std::span<const double> upstream) {
  if (p_s.size() != w.n_student()) throw ValidationError("student vector does not match |V_S|");
  if (upstream.size() != w.n_teacher()) throw ValidationError("upstream gradient does not match |V_T|");
  std::vector<double> grad(w.nnz(), 0.0);
  const auto q = project_unnormalized(w, p_s);
  double z = 0.0;
  for (double x : q) z += x;
  if (z == 0.0) return grad;
  double inner = 0.0;
  for (std::size_t t = 0; t < q.size(); ++t) inner += upstream[t] * q[t] / z;
  for (std::size_t s = 0; s < w.n_student(); ++s) {
    if (p_s[s] == 0.0) continue;
    const auto ts = w.row_teachers(s);
    const std::size_t off = w.row_offset(s);
    for (std::size_t e = 0; e < ts.size(); ++e) {
      grad[off + e] = p_s[s] * (upstream[static_cast<std::size_t>(ts[e])] - inner) / z;
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Projection files (JSON Lines)
//
// line 1: {"n_student", "n_teacher", "config", "refined", "hash"}
// then one {"s", "entries": [[t, w], ...], "provenance"} per nonempty row.
// The hash covers the header (without the hash field) and every row line.
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::ordered_json projection_header(const SparseProjection& w) {
  nlohmann::ordered_json h;
  h["n_student"] = w.n_student();
  h["n_teacher"] = w.n_teacher();
  h["config"] = {{"beta", w.config().beta},
                 {"gamma", w.config().gamma},
                 {"max_span", w.config().max_span},
                 {"top_k", w.config().top_k}};
  h["refined"] = w.refined();
  return h;
}

inline std::vector<std::string> projection_row_lines(const SparseProjection& w) {
  std::vector<std::string> lines;
  for (std::size_t s = 0; s < w.n_student(); ++s) {
    if (w.row_size(s) == 0) continue;
    nlohmann::ordered_json r;
    r["s"] = s;
    auto entries = nlohmann::ordered_json::array();
    const auto ts = w.row_teachers(s);
    const auto ws = w.row_weights(s);
    for (std::size_t e = 0; e < ts.size(); ++e) entries.push_back({ts[e], ws[e]});
    r["entries"] = std::move(entries);
    r["provenance"] = to_string(w.provenance(s));
    lines.push_back(r.dump());
  }
  return lines;
}

inline std::string hash_projection_lines(const std::string& header, const std::vector<std::string>& rows) {
  Fnv1a h;
  h.update(header).update("\n");
  for (const auto& r : rows) h.update(r).update("\n");
  return h.hex();
}

}  // namespace detail

inline std::string SparseProjection::content_hash() const {
  return detail::hash_projection_lines(detail::projection_header(*this).dump(), detail::projection_row_lines(*this));
}

inline std::string projection_to_jsonl(const SparseProjection& w) {
  auto header = detail::projection_header(w);
  const auto rows = detail::projection_row_lines(w);
  header["hash"] = detail::hash_projection_lines(header.dump(), rows);
  std::string out = header.dump() + "\n";
  for (const auto& r : rows) out += r + "\n";
  return out;
}

inline SparseProjection projection_from_jsonl(std::string_view text) {
  std::vector<std::string> lines;
  {
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string_view::npos) end = text.size();
      if (end > pos) lines.emplace_back(text.substr(pos, end - pos));
      pos = end + 1;
    }
  }
  if (lines.empty()) throw ValidationError("projection file is empty");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(lines[0]);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("projection header is not valid JSON: ") + e.what());
  }
  if (!header.contains("hash")) throw ValidationError("projection header lacks a hash");
  const std::string stored = header["hash"].get<std::string>();
  header.erase("hash");
  std::vector<std::string> row_lines(lines.begin() + 1, lines.end());
  if (detail::hash_projection_lines(header.dump(), row_lines) != stored) {
    throw IoError("projection file failed its content-hash check");
  }
  try {
    ProjectionConfig cfg;
    cfg.beta = header.at("config").at("beta").get<double>();
    cfg.gamma = header.at("config").at("gamma").get<double>();
    cfg.max_span = header.at("config").at("max_span").get<int>();
    cfg.top_k = header.at("config").at("top_k").get<int>();
    const auto ns = header.at("n_student").get<std::size_t>();
    const auto nt = header.at("n_teacher").get<std::size_t>();
    const bool refined = header.value("refined", false);
    std::vector<std::vector<ProjectionEntry>> rows(ns);
    std::vector<RowProvenance> prov(ns, RowProvenance::empty);
    for (const auto& line : row_lines) {
      auto r = nlohmann::json::parse(line);
      const auto s = r.at("s").get<std::size_t>();
      if (s >= ns) throw ValidationError("projection row index " + std::to_string(s) + " out of range");
      if (!rows[s].empty()) throw ValidationError("projection row " + std::to_string(s) + " appears twice");
      for (const auto& e : r.at("entries")) rows[s].push_back({e.at(0).get<TokenId>(), e.at(1).get<double>()});
      auto p = provenance_from_string(r.at("provenance").get<std::string>());
      if (!p) throw ValidationError("unknown provenance in projection row " + std::to_string(s));
      prov[s] = *p;
    }
    return SparseProjection(ns, nt, cfg, std::move(rows), std::move(prov), refined);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed projection file: ") + e.what());
  }
}

inline void save_projection(const SparseProjection& w, const std::string& path) {
  write_text_file(path, projection_to_jsonl(w));
}

inline SparseProjection load_projection(const std::string& path) {
  const std::string text = read_text_file(path);
  try {
    return projection_from_jsonl(text);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

}  // namespace ctkd
