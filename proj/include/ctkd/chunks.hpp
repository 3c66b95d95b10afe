// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ctkd/align.hpp"
#include "ctkd/error.hpp"
#include "ctkd/vocab.hpp"

namespace ctkd {

// Per-position logits of one sequence, row-major [positions x vocab]. Row p is
// the model's predictive distribution for the token occupying position p, and
// realized()[p] is that token.
class PositionLogits {
 public:
  PositionLogits() = default;

  PositionLogits(std::size_t vocab_size, std::vector<double> values, std::vector<TokenId> realized)
      : vocab_(vocab_size), values_(std::move(values)), realized_(std::move(realized)) {
    if (vocab_ == 0 && !realized_.empty()) throw ValidationError("logits need a nonempty vocabulary");
    if (values_.size() != realized_.size() * vocab_) {
      throw ValidationError("logits matrix is " + std::to_string(values_.size()) + " values, expected " +
                            std::to_string(realized_.size()) + " x " + std::to_string(vocab_));
    }
    for (std::size_t p = 0; p < realized_.size(); ++p) {
      if (realized_[p] < 0 || static_cast<std::size_t>(realized_[p]) >= vocab_) {
        throw ValidationError("realized id at position " + std::to_string(p) + " is out of range");
      }
    }
  }

  std::size_t positions() const { return realized_.size(); }
  std::size_t vocab_size() const { return vocab_; }
  std::span<const double> row(std::size_t p) const { return std::span<const double>(values_).subspan(p * vocab_, vocab_); }
  std::span<const double> values() const { return values_; }
  std::span<const TokenId> realized() const { return realized_; }

  PositionLogits with_values(std::vector<double> values) const { return PositionLogits(vocab_, std::move(values), realized_); }

 private:
  std::size_t vocab_ = 0;
  std::vector<double> values_;
  std::vector<TokenId> realized_;
};

struct ChunkDistribution {
  std::size_t chunk = 0;
  Side side = Side::student;
  std::vector<double> probs;
};

// Numerically stable softmax of z / tau.
inline std::vector<double> softmax(std::span<const double> z, double tau = 1.0) {
  if (!(tau > 0)) throw ValidationError("temperature must be > 0");
  std::vector<double> p(z.size());
  if (z.empty()) return p;
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp((z[i] - mx) / tau);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

// Pulls dL/dp back through p = softmax(z / tau).
inline std::vector<double> softmax_backward(std::span<const double> p, std::span<const double> grad_p, double tau = 1.0) {
  double inner = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) inner += p[i] * grad_p[i];
  std::vector<double> dz(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) dz[i] = p[i] * (grad_p[i] - inner) / tau;
  return dz;
}

namespace detail {

inline const Span& checked_merge_span(const PositionLogits& logits, const AlignmentChunk& chunk, Side side, double tau) {
  if (!chunk.in_loss()) throw ValidationError("chunk is excluded from the loss and cannot be merged");
  if (!(tau > 0)) throw ValidationError("temperature must be > 0");
  const Span& span = chunk.span(side);
  if (span.empty() || span.hi > logits.positions()) throw ValidationError("chunk span lies outside the sequence");
  return span;
}

}  // namespace detail

// Collapses a chunk's per-position distributions into one distribution over
// the side's vocabulary. The first position's distribution is kept, except
// that the entry for the realized first token is replaced by the product of
// the realized tokens' probabilities across the span; the result is then
// renormalized. A length-1 span is returned as its softmax unchanged.
inline ChunkDistribution chain_rule_merge(const PositionLogits& logits, const AlignmentChunk& chunk, Side side,
                                          double tau = 1.0, std::size_t chunk_index = 0) {
  const Span& span = detail::checked_merge_span(logits, chunk, side, tau);
  ChunkDistribution out{chunk_index, side, softmax(logits.row(span.lo), tau)};
  if (span.size() == 1) return out;
  const auto realized = logits.realized();
  const auto first = static_cast<std::size_t>(realized[span.lo]);
  double prod = out.probs[first];
  for (std::size_t pos = span.lo + 1; pos < span.hi; ++pos) {
    prod *= softmax(logits.row(pos), tau)[static_cast<std::size_t>(realized[pos])];
  }
  out.probs[first] = prod;
  const double z = std::accumulate(out.probs.begin(), out.probs.end(), 0.0);
  for (double& x : out.probs) x /= z;
  return out;
}

// Adds dL/dz for every position of the chunk's span into `grad_logits`
// (same layout as logits.values()), given dL/dq for the merged distribution.
inline void chain_rule_merge_backward(const PositionLogits& logits, const AlignmentChunk& chunk, Side side, double tau,
                                      std::span<const double> grad_q, std::span<double> grad_logits) {
  const Span& span = detail::checked_merge_span(logits, chunk, side, tau);
  const std::size_t V = logits.vocab_size();
  if (grad_q.size() != V || grad_logits.size() != logits.values().size()) {
    throw ValidationError("gradient buffers do not match the logits shape");
  }
  const std::size_t m = span.size();
  std::vector<std::vector<double>> probs(m);
  for (std::size_t i = 0; i < m; ++i) probs[i] = softmax(logits.row(span.lo + i), tau);
  auto add_row = [&](std::size_t pos, const std::vector<double>& dz) {
    for (std::size_t v = 0; v < V; ++v) grad_logits[pos * V + v] += dz[v];
  };

  if (m == 1) {
    add_row(span.lo, softmax_backward(probs[0], grad_q, tau));
    return;
  }

  const auto realized = logits.realized();
  std::vector<double> picked(m);
  for (std::size_t i = 0; i < m; ++i) picked[i] = probs[i][static_cast<std::size_t>(realized[span.lo + i])];
  const auto first = static_cast<std::size_t>(realized[span.lo]);

  std::vector<double> q_pre = probs[0];
  double prod = 1.0;
  for (double x : picked) prod *= x;
  q_pre[first] = prod;
  const double z = std::accumulate(q_pre.begin(), q_pre.end(), 0.0);
  double inner = 0.0;
  for (std::size_t v = 0; v < V; ++v) inner += grad_q[v] * q_pre[v] / z;
  std::vector<double> h(V);
  for (std::size_t v = 0; v < V; ++v) h[v] = (grad_q[v] - inner) / z;

  auto product_except = [&](std::size_t skip) {
    double r = 1.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (i != skip) r *= picked[i];
    }
    return r;
  };

  std::vector<double> gp(V, 0.0);
  for (std::size_t v = 0; v < V; ++v) gp[v] = h[v];
  gp[first] = h[first] * product_except(0);
  add_row(span.lo, softmax_backward(probs[0], gp, tau));
  for (std::size_t i = 1; i < m; ++i) {
    std::fill(gp.begin(), gp.end(), 0.0);
    gp[static_cast<std::size_t>(realized[span.lo + i])] = h[first] * product_except(i);
    add_row(span.lo + i, softmax_backward(probs[i], gp, tau));
  }
}

// Indices of the k largest entries, largest first, smaller index on ties.
inline std::vector<std::size_t> topk_support(std::span<const double> p, std::size_t k) {
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, p.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
  idx.resize(k);
  return idx;
}

// Restricts both distributions to the teacher's top-k indices and
// renormalizes each over that support; entries off the support become 0.
inline std::pair<ChunkDistribution, ChunkDistribution> topk_truncate(const ChunkDistribution& teacher,
                                                                     const ChunkDistribution& student, std::size_t k) {
  if (teacher.probs.size() != student.probs.size()) {
    throw ValidationError("topk_truncate needs both distributions over the same vocabulary");
  }
  if (k < 1) throw ValidationError("topk_truncate needs k >= 1");
  if (k >= teacher.probs.size()) return {teacher, student};
  const auto support = topk_support(teacher.probs, k);
  double tm = 0.0, sm = 0.0;
  for (std::size_t i : support) {
    tm += teacher.probs[i];
    sm += student.probs[i];
  }
  if (sm < 1e-12) throw ValidationError("student mass on the teacher's top-k support is zero");
  ChunkDistribution t{teacher.chunk, teacher.side, std::vector<double>(teacher.probs.size(), 0.0)};
  ChunkDistribution s{student.chunk, student.side, std::vector<double>(student.probs.size(), 0.0)};
  for (std::size_t i : support) {
    t.probs[i] = teacher.probs[i] / tm;
    s.probs[i] = student.probs[i] / sm;
  }
  return {std::move(t), std::move(s)};
}

// ---------------------------------------------------------------------------
// Logits dumps: little-endian float32 matrix plus a JSON sidecar at
// `<path>.json` with {seq_id, side, vocab_hash, realized_ids, positions,
// vocab_size}.
// ---------------------------------------------------------------------------

struct LogitsDump {
  std::string seq_id;
  Side side = Side::student;
  std::string vocab_hash;
  PositionLogits logits;
};

inline std::string_view to_string(Side s) { return s == Side::student ? "student" : "teacher"; }

inline std::string logits_sidecar_path(const std::string& path) { return path + ".json"; }

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xff) << 24) | ((v & 0xff00) << 8) | ((v >> 8) & 0xff00) | (v >> 24);
  }
  return v;
}

}  // namespace detail

// Writes a float32 matrix with no sidecar; used for gradient tensors.
inline void save_f32(const std::string& path, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  for (double x : values) {
    const auto f = static_cast<float>(x);
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    bits = detail::to_little_endian(bits);
    out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
  if (!out) throw IoError("error writing '" + path + "'");
}

inline void save_logits(const std::string& path, const LogitsDump& dump) {
  save_f32(path, dump.logits.values());
  nlohmann::ordered_json side;
  side["seq_id"] = dump.seq_id;
  side["side"] = to_string(dump.side);
  side["vocab_hash"] = dump.vocab_hash;
  side["positions"] = dump.logits.positions();
  side["vocab_size"] = dump.logits.vocab_size();
  side["realized_ids"] = std::vector<TokenId>(dump.logits.realized().begin(), dump.logits.realized().end());
  write_text_file(logits_sidecar_path(path), side.dump() + "\n");
}

inline LogitsDump load_logits(const std::string& path) {
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(read_text_file(logits_sidecar_path(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(logits_sidecar_path(path) + ": " + e.what());
  }
  LogitsDump dump;
  std::vector<TokenId> realized;
  std::size_t vocab = 0;
  try {
    dump.seq_id = side.at("seq_id").get<std::string>();
    const auto s = side.at("side").get<std::string>();
    if (s != "student" && s != "teacher") throw ValidationError("sidecar side must be student or teacher");
    dump.side = s == "student" ? Side::student : Side::teacher;
    dump.vocab_hash = side.at("vocab_hash").get<std::string>();
    realized = side.at("realized_ids").get<std::vector<TokenId>>();
    vocab = side.at("vocab_size").get<std::size_t>();
    if (side.contains("positions") && side["positions"].get<std::size_t>() != realized.size()) {
      throw ValidationError("sidecar positions disagree with realized_ids");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(logits_sidecar_path(path) + ": " + e.what());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t expected = realized.size() * vocab;
  if (raw.size() != expected * 4) {
    throw IoError(path + ": expected " + std::to_string(expected * 4) + " bytes, found " + std::to_string(raw.size()));
  }
  std::vector<double> values(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, raw.data() + 4 * i, sizeof(bits));
    bits = detail::to_little_endian(bits);
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    values[i] = f;
  }
  dump.logits = PositionLogits(vocab, std::move(values), std::move(realized));
  return dump;
}

}  // namespace ctkd
