// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdio>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctkd/error.hpp"
#include "ctkd/losses.hpp"
#include "ctkd/vocab.hpp"
#include "json.hpp"

namespace ctkd {

// A named predicate over canonical token text.
struct CategoryRule {
  std::string name;
  std::function<bool(std::string_view)> predicate;
};

struct CoverageRow {
  std::string category;
  std::size_t matched = 0;
  std::size_t size = 0;

  // Not applicable for an empty category.
  std::optional<double> fraction() const {
    if (size == 0) return std::nullopt;
    return static_cast<double>(matched) / static_cast<double>(size);
  }
};

namespace detail {

inline bool all_of_bytes(std::string_view s, bool (*pred)(unsigned char)) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [&](char c) { return pred(static_cast<unsigned char>(c)); });
}

inline bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
inline bool is_alpha(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }
inline bool is_punct_byte(unsigned char c) { return is_ascii_punct(c); }

}  // namespace detail

// Mutually exclusive default categories.
inline std::vector<CategoryRule> default_category_rules() {
  auto numeral = [](std::size_t n) {
    return [n](std::string_view s) { return s.size() == n && detail::all_of_bytes(s, detail::is_digit); };
  };
  return {
      {"1-digit", numeral(1)},
      {"2-digit", numeral(2)},
      {"3-digit", numeral(3)},
      {"punctuation", [](std::string_view s) { return detail::all_of_bytes(s, detail::is_punct_byte); }},
      {"alphabetic",
       [](std::string_view s) {
         if (!s.empty() && s.front() == ' ') s.remove_prefix(1);
         return detail::all_of_bytes(s, detail::is_alpha);
       }},
      {"non-ascii",
       [](std::string_view s) {
         return std::any_of(s.begin(), s.end(), [](char c) { return static_cast<unsigned char>(c) >= 0x80; });
       }},
  };
}

inline std::vector<std::string> default_critical_categories() { return {"2-digit", "3-digit"}; }

// For each rule: how many student tokens satisfy it, and how many of those
// sit on the student side of the common set. Special tokens are skipped.
inline std::vector<CoverageRow> audit_coverage(const Vocabulary& vs, const CommonSet& c, std::span<const CategoryRule> rules) {
  if (rules.empty()) throw ValidationError("audit needs at least one category rule");
  const auto common = c.student_mask(vs.size());
  std::vector<std::string> texts(vs.size());
  std::vector<bool> skip(vs.size(), false);
  for (TokenId id = 0; id < static_cast<TokenId>(vs.size()); ++id) {
    if (vs.is_special(id)) {
      skip[static_cast<std::size_t>(id)] = true;
    } else {
      texts[static_cast<std::size_t>(id)] = canonicalize(vs.token(id)).text;
    }
  }
  std::vector<CoverageRow> rows;
  for (const auto& rule : rules) {
    CoverageRow row{rule.name, 0, 0};
    for (std::size_t i = 0; i < texts.size(); ++i) {
      if (skip[i] || !rule.predicate(texts[i])) continue;
      ++row.size;
      row.matched += common[i] ? 1 : 0;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// P-KL when any critical category's coverage falls below `threshold`, H-KL
// otherwise. Empty critical categories do not vote.
inline LossMode recommend_mode(std::span<const CoverageRow> coverage, std::span<const std::string> critical,
                               double threshold = 1.0) {
  for (const auto& name : critical) {
    auto it = std::find_if(coverage.begin(), coverage.end(), [&](const CoverageRow& r) { return r.category == name; });
    if (it == coverage.end()) throw ValidationError("unknown audit category '" + name + "'");
    const auto f = it->fraction();
    if (f && *f < threshold) return LossMode::pkl;
  }
  return LossMode::hkl;
}

inline nlohmann::ordered_json coverage_to_json(std::span<const CoverageRow> rows, LossMode recommendation,
                                               std::span<const std::string> critical, double threshold) {
  nlohmann::ordered_json j;
  j["categories"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json rj;
    rj["category"] = r.category;
    rj["matched"] = r.matched;
    rj["size"] = r.size;
    if (const auto f = r.fraction()) {
      rj["fraction"] = *f;
    } else {
      rj["fraction"] = nullptr;
    }
    j["categories"].push_back(std::move(rj));
  }
  j["critical"] = std::vector<std::string>(critical.begin(), critical.end());
  j["threshold"] = threshold;
  j["recommendation"] = to_string(recommendation);
  return j;
}

inline std::string coverage_to_text(std::span<const CoverageRow> rows, LossMode recommendation) {
  std::size_t width = 8;
  for (const auto& r : rows) width = std::max(width, r.category.size());
  std::string out;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%-*s  %15s  %8s\n", static_cast<int>(width), "category", "matched/size", "coverage");
  out += buf;
  for (const auto& r : rows) {
    const std::string ratio = std::to_string(r.matched) + "/" + std::to_string(r.size);
    const auto f = r.fraction();
    char pct[32];
    if (f) {
      std::snprintf(pct, sizeof(pct), "%.1f%%", *f * 100.0);
    } else {
      std::snprintf(pct, sizeof(pct), "n/a");
    }
    std::snprintf(buf, sizeof(buf), "%-*s  %15s  %8s\n", static_cast<int>(width), r.category.c_str(), ratio.c_str(), pct);
    out += buf;
  }
  out += "recommended mode: ";
  out += to_string(recommendation);
  out += '\n';
  return out;
}

}  // namespace ctkd
