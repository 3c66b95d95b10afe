// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "ctkd/error.hpp"
#include "ctkd/hash.hpp"
#include "ctkd/vocab.hpp"

namespace ctkd {

struct AlignScoring {
  double alpha_exact = 3.0;
  double alpha_comb = 1.5;
  double alpha_gap = -1.5;
  int max_span = 4;

  void validate() const {
    if (!(alpha_exact > 0)) throw ValidationError("alpha_exact must be > 0");
    if (!(alpha_comb > 0)) throw ValidationError("alpha_comb must be > 0");
    if (!(alpha_gap < 0)) throw ValidationError("alpha_gap must be < 0");
    if (max_span < 2) throw ValidationError("max_span must be >= 2");
  }

  friend bool operator==(const AlignScoring&, const AlignScoring&) = default;
};

enum class ChunkKind {
  match,             // 1-to-1, canonical texts equal
  combination,       // 1-to-k or k-to-1, concatenated canonical texts equal
  gap_student_side,  // one student token with no teacher counterpart
  gap_teacher_side,  // one teacher token with no student counterpart
  mismatch,          // 1-to-1 diagonal whose texts differ
};

inline std::string_view to_string(ChunkKind k) {
  switch (k) {
    case ChunkKind::match: return "match";
    case ChunkKind::combination: return "combination";
    case ChunkKind::gap_student_side: return "gap_student_side";
    case ChunkKind::gap_teacher_side: return "gap_teacher_side";
    case ChunkKind::mismatch: return "mismatch";
  }
  return "?";
}

// Half-open index range.
struct Span {
  std::size_t lo = 0;
  std::size_t hi = 0;

  std::size_t size() const { return hi - lo; }
  bool empty() const { return hi == lo; }
  friend bool operator==(const Span&, const Span&) = default;
};

enum class Side { student, teacher };

struct AlignmentChunk {
  Span student;
  Span teacher;
  ChunkKind kind = ChunkKind::match;
  // Set on the substring baseline's end-of-sequence force-flush group.
  bool forced = false;

  // Gaps and mismatched diagonals carry no text-consistent pair.
  bool in_loss() const { return kind == ChunkKind::match || kind == ChunkKind::combination; }
  const Span& span(Side side) const { return side == Side::student ? student : teacher; }

  friend bool operator==(const AlignmentChunk&, const AlignmentChunk&) = default;
};

struct Alignment {
  std::vector<AlignmentChunk> chunks;
  double score = 0.0;

  std::size_t count(ChunkKind k) const {
    std::size_t n = 0;
    for (const auto& c : chunks) n += c.kind == k ? 1 : 0;
    return n;
  }
  std::size_t gaps() const { return count(ChunkKind::gap_student_side) + count(ChunkKind::gap_teacher_side); }
  std::size_t loss_bearing() const {
    std::size_t n = 0;
    for (const auto& c : chunks) n += c.in_loss() ? 1 : 0;
    return n;
  }
};

// Score one chunk contributes to the total.
inline double chunk_score(const AlignScoring& sc, const AlignmentChunk& c) {
  switch (c.kind) {
    case ChunkKind::match: return sc.alpha_exact;
    case ChunkKind::mismatch: return -sc.alpha_exact;
    case ChunkKind::combination:
      return sc.alpha_comb * static_cast<double>(std::max(c.student.size(), c.teacher.size()));
    case ChunkKind::gap_student_side:
    case ChunkKind::gap_teacher_side: return sc.alpha_gap;
  }
  return 0.0;
}

namespace detail {

using KeyRef = const std::optional<std::string>*;

inline std::vector<KeyRef> sequence_keys(std::span<const TokenId> ids, const Vocabulary& v) {
  std::vector<KeyRef> keys;
  keys.reserve(ids.size());
  for (TokenId id : ids) {
    if (!v.valid(id)) throw ValidationError("token id " + std::to_string(id) + " is not in the vocabulary");
    keys.push_back(&v.match_key(id));
  }
  return keys;
}

inline bool keys_equal(KeyRef a, KeyRef b) { return a->has_value() && b->has_value() && **a == **b; }

// Single token against the concatenation of a span. Specials (and role-tagged
// specials) never take part in combinations.
inline bool span_equivalent(KeyRef single, std::span<const KeyRef> span) {
  if (!single->has_value() || (**single).starts_with('\x01')) return false;
  const std::string& target = **single;
  std::size_t off = 0;
  for (KeyRef k : span) {
    if (!k->has_value() || (**k).starts_with('\x01')) return false;
    const std::string& piece = **k;
    if (target.compare(off, piece.size(), piece) != 0) return false;
    off += piece.size();
    if (off > target.size()) return false;
  }
  return off == target.size();
}

}  // namespace detail

// Soft-scored span alignment. D(i,j) is the best score over student prefix i
// and teacher prefix j; the five transitions are diagonal (+/-alpha_exact),
// 1-to-k and k-to-1 combinations (alpha_comb * k, only when the texts are
// equivalent), and a gap on either side (alpha_gap). Ties resolve in that
// same order, smaller k first.
inline Alignment dp_align(std::span<const TokenId> student, std::span<const TokenId> teacher,
                          const AlignScoring& sc, const Vocabulary& vs, const Vocabulary& vt) {
  sc.validate();
  const auto sk = detail::sequence_keys(student, vs);
  const auto tk = detail::sequence_keys(teacher, vt);
  const std::size_t n = sk.size();
  const std::size_t m = tk.size();
  const std::size_t L = static_cast<std::size_t>(sc.max_span);

  struct Step {
    ChunkKind kind = ChunkKind::match;
    std::uint32_t ds = 0;
    std::uint32_t dt = 0;
  };
  const std::size_t cols = m + 1;
  std::vector<double> D((n + 1) * cols, 0.0);
  std::vector<Step> back((n + 1) * cols);
  auto at = [cols](std::size_t i, std::size_t j) { return i * cols + j; };

  for (std::size_t i = 1; i <= n; ++i) {
    D[at(i, 0)] = static_cast<double>(i) * sc.alpha_gap;
    back[at(i, 0)] = {ChunkKind::gap_student_side, 1, 0};
  }
  for (std::size_t j = 1; j <= m; ++j) {
    D[at(0, j)] = static_cast<double>(j) * sc.alpha_gap;
    back[at(0, j)] = {ChunkKind::gap_teacher_side, 0, 1};
  }

  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const bool eq = detail::keys_equal(sk[i - 1], tk[j - 1]);
      double best = D[at(i - 1, j - 1)] + (eq ? sc.alpha_exact : -sc.alpha_exact);
      Step step{eq ? ChunkKind::match : ChunkKind::mismatch, 1, 1};
      auto consider = [&](double cand, Step s) {
        if (cand > best) {
          best = cand;
          step = s;
        }
      };
      for (std::size_t k = 2; k <= L && k <= j; ++k) {
        if (detail::span_equivalent(sk[i - 1], std::span<const detail::KeyRef>(tk).subspan(j - k, k))) {
          consider(D[at(i - 1, j - k)] + sc.alpha_comb * static_cast<double>(k),
                   {ChunkKind::combination, 1, static_cast<std::uint32_t>(k)});
        }
      }
      for (std::size_t k = 2; k <= L && k <= i; ++k) {
        if (detail::span_equivalent(tk[j - 1], std::span<const detail::KeyRef>(sk).subspan(i - k, k))) {
          consider(D[at(i - k, j - 1)] + sc.alpha_comb * static_cast<double>(k),
                   {ChunkKind::combination, static_cast<std::uint32_t>(k), 1});
        }
      }
      consider(D[at(i - 1, j)] + sc.alpha_gap, {ChunkKind::gap_student_side, 1, 0});
      consider(D[at(i, j - 1)] + sc.alpha_gap, {ChunkKind::gap_teacher_side, 0, 1});
      D[at(i, j)] = best;
      back[at(i, j)] = step;
    }
  }

  Alignment out;
  out.score = D[at(n, m)];
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    const Step s = back[at(i, j)];
    out.chunks.push_back({Span{i - s.ds, i}, Span{j - s.dt, j}, s.kind});
    i -= s.ds;
    j -= s.dt;
  }
  std::reverse(out.chunks.begin(), out.chunks.end());
  return out;
}

// Exhaustive enumeration of every legal transition sequence; exponential, so
// bounded to n + m <= 12. Test oracle for dp_align.
inline Alignment brute_force_align(std::span<const TokenId> student, std::span<const TokenId> teacher,
                                   const AlignScoring& sc, const Vocabulary& vs, const Vocabulary& vt) {
  sc.validate();
  if (student.size() + teacher.size() > 12) {
    throw ValidationError("brute_force_align is limited to n + m <= 12");
  }
  const auto sk = detail::sequence_keys(student, vs);
  const auto tk = detail::sequence_keys(teacher, vt);
  const std::size_t n = sk.size();
  const std::size_t m = tk.size();
  const std::size_t L = static_cast<std::size_t>(sc.max_span);

  auto concat_equals = [](detail::KeyRef one, std::span<const detail::KeyRef> many) {
    if (!one->has_value() || (**one).starts_with('\x01')) return false;
    std::string joined;
    for (auto k : many) {
      if (!k->has_value() || (**k).starts_with('\x01')) return false;
      joined += **k;
    }
    return joined == **one;
  };

  Alignment best;
  best.score = -std::numeric_limits<double>::infinity();
  std::vector<AlignmentChunk> path;

  std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double score) {
    if (i == n && j == m) {
      if (score > best.score) {
        best.score = score;
        best.chunks = path;
      }
      return;
    }
    auto push = [&](AlignmentChunk c, double delta) {
      path.push_back(c);
      walk(c.student.hi, c.teacher.hi, score + delta);
      path.pop_back();
    };
    if (i < n && j < m) {
      bool eq = sk[i]->has_value() && tk[j]->has_value() && **sk[i] == **tk[j];
      push({{i, i + 1}, {j, j + 1}, eq ? ChunkKind::match : ChunkKind::mismatch}, eq ? sc.alpha_exact : -sc.alpha_exact);
      for (std::size_t k = 2; k <= L; ++k) {
        if (j + k <= m && concat_equals(sk[i], std::span<const detail::KeyRef>(tk).subspan(j, k))) {
          push({{i, i + 1}, {j, j + k}, ChunkKind::combination}, sc.alpha_comb * static_cast<double>(k));
        }
        if (i + k <= n && concat_equals(tk[j], std::span<const detail::KeyRef>(sk).subspan(i, k))) {
          push({{i, i + k}, {j, j + 1}, ChunkKind::combination}, sc.alpha_comb * static_cast<double>(k));
        }
      }
    }
    if (i < n) push({{i, i + 1}, {j, j}, ChunkKind::gap_student_side}, sc.alpha_gap);
    if (j < m) push({{i, i}, {j, j + 1}, ChunkKind::gap_teacher_side}, sc.alpha_gap);
  };
  walk(0, 0, 0.0);
  return best;
}

// Baseline: incremental-decode buffers compared as raw strings. The shorter
// buffer (student on ties) is extended one token at a time; a group is flushed
// whenever both buffers are nonempty and equal. Whatever remains at the end is
// force-flushed as a single group.
inline Alignment trl_substring_align(std::span<const TokenId> student, std::span<const TokenId> teacher,
                                     const Vocabulary& vs, const Vocabulary& vt) {
  for (TokenId id : student) {
    if (!vs.valid(id)) throw ValidationError("student id " + std::to_string(id) + " is not in the vocabulary");
  }
  for (TokenId id : teacher) {
    if (!vt.valid(id)) throw ValidationError("teacher id " + std::to_string(id) + " is not in the vocabulary");
  }
  Alignment out;
  std::string sbuf, tbuf;
  std::size_t i = 0, j = 0, s_lo = 0, t_lo = 0;
  auto flush = [&](bool forced) {
    AlignmentChunk c{{s_lo, i}, {t_lo, j}, ChunkKind::combination, forced};
    if (c.student.size() == 1 && c.teacher.size() == 1 && sbuf == tbuf) c.kind = ChunkKind::match;
    out.chunks.push_back(c);
    s_lo = i;
    t_lo = j;
    sbuf.clear();
    tbuf.clear();
  };
  while (i < student.size() || j < teacher.size()) {
    const bool extend_student = i < student.size() && (j >= teacher.size() || sbuf.size() <= tbuf.size());
    if (extend_student) {
      sbuf += vs.surface(student[i++]);
    } else {
      tbuf += vt.surface(teacher[j++]);
    }
    if (!sbuf.empty() && sbuf == tbuf) flush(false);
  }
  if (i != s_lo || j != t_lo) flush(true);
  return out;
}

// ---------------------------------------------------------------------------
// Alignment cache: concurrent lookups, exclusive inserts.
// ---------------------------------------------------------------------------

class AlignmentCache {
 public:
  struct Key {
    std::vector<TokenId> student;
    std::vector<TokenId> teacher;
    AlignScoring scoring;
    std::string vocab_pair;

    friend bool operator==(const Key&, const Key&) = default;
  };

  const Alignment& get_or_align(std::span<const TokenId> student, std::span<const TokenId> teacher,
                                const AlignScoring& sc, const Vocabulary& vs, const Vocabulary& vt) {
    Key key{{student.begin(), student.end()}, {teacher.begin(), teacher.end()}, sc,
            vs.content_hash() + ":" + vt.content_hash()};
    {
      std::shared_lock lock(mu_);
      if (auto it = map_.find(key); it != map_.end()) {
        ++hits_;
        return *it->second;
      }
    }
    auto computed = std::make_unique<Alignment>(dp_align(student, teacher, sc, vs, vt));
    std::unique_lock lock(mu_);
    auto [it, inserted] = map_.try_emplace(std::move(key), std::move(computed));
    return *it->second;
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return map_.size();
  }
  std::size_t hits() const { return hits_; }

 private:
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      Fnv1a h;
      h.update_u64(k.student.size());
      for (TokenId id : k.student) h.update_u64(static_cast<std::uint64_t>(id));
      h.update_u64(k.teacher.size());
      for (TokenId id : k.teacher) h.update_u64(static_cast<std::uint64_t>(id));
      h.update(k.vocab_pair);
      return static_cast<std::size_t>(h.digest());
    }
  };

  mutable std::shared_mutex mu_;
  std::unordered_map<Key, std::unique_ptr<Alignment>, KeyHash> map_;
  std::atomic<std::size_t> hits_{0};
};

// One JSON Lines record per chunk.
inline std::string alignment_to_jsonl(std::string_view seq_id, const Alignment& a) {
  std::string out;
  for (std::size_t k = 0; k < a.chunks.size(); ++k) {
    const auto& c = a.chunks[k];
    nlohmann::ordered_json rec;
    rec["seq_id"] = seq_id;
    rec["k"] = k;
    rec["s_lo"] = c.student.lo;
    rec["s_hi"] = c.student.hi;
    rec["t_lo"] = c.teacher.lo;
    rec["t_hi"] = c.teacher.hi;
    rec["kind"] = to_string(c.kind);
    rec["in_loss"] = c.in_loss();
    if (c.forced) rec["forced"] = true;
    out += rec.dump();
    out += '\n';
  }
  return out;
}

}  // namespace ctkd
