// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
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

namespace ctkd {

using TokenId = std::int32_t;

// ---------------------------------------------------------------------------
// Canonicalization
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr std::string_view kGptSpace = "\xC4\xA0";          // U+0120
inline constexpr std::string_view kSentencePieceSpace = "\xE2\x96\x81";  // U+2581
inline constexpr std::string_view kVisibleSpace = "\xE2\x90\xA3";  // U+2423
inline constexpr std::string_view kGptNewline = "\xC4\x8A";        // U+010A

inline bool is_hex_digit(char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f') || (c >= 'A' && c <= 'F');
}

inline int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  return c - 'A' + 10;
}

inline bool is_ascii_punct(unsigned char c) {
  return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
         (c >= 0x7B && c <= 0x7E);
}

// Replaces whitespace marker glyphs anywhere in the string. When
// `escaped_newline` is set, the two-character sequence backslash-n also
// becomes a newline.
inline std::string unify_markers(std::string_view raw, bool escaped_newline) {
  std::string out;
  out.reserve(raw.size());
  std::size_t i = 0;
  while (i < raw.size()) {
    std::string_view rest = raw.substr(i);
    if (rest.starts_with(kGptSpace)) {
      out.push_back(' ');
      i += kGptSpace.size();
    } else if (rest.starts_with(kSentencePieceSpace)) {
      out.push_back(' ');
      i += kSentencePieceSpace.size();
    } else if (rest.starts_with(kVisibleSpace)) {
      out.push_back(' ');
      i += kVisibleSpace.size();
    } else if (rest.starts_with(kGptNewline)) {
      out.push_back('\n');
      i += kGptNewline.size();
    } else if (escaped_newline && rest.starts_with("\\n")) {
      out.push_back('\n');
      i += 2;
    } else {
      out.push_back(raw[i]);
      ++i;
    }
  }
  return out;
}

}  // namespace detail

// A token string that looks like `<0x..>`. Returns the byte for a well-formed
// `<0xHH>`, nothing when the token is not of that shape, and throws when the
// shape is right but the payload is not exactly two hex digits.
inline std::optional<unsigned char> parse_byte_fallback(std::string_view raw) {
  if (raw.size() < 4 || !raw.starts_with("<0x") || !raw.ends_with(">")) return std::nullopt;
  std::string_view payload = raw.substr(3, raw.size() - 4);
  if (payload.size() != 2 || !detail::is_hex_digit(payload[0]) || !detail::is_hex_digit(payload[1])) {
    throw ValidationError("malformed byte-fallback token '" + std::string(raw) + "'");
  }
  return static_cast<unsigned char>(detail::hex_value(payload[0]) * 16 + detail::hex_value(payload[1]));
}

struct CanonicalForm {
  std::string text;

  friend bool operator==(const CanonicalForm&, const CanonicalForm&) = default;
};

// Normalizes a (non-special) token string so equivalent tokens from different
// tokenizer families compare equal. Rules, in order:
//   1. space markers (Ġ, ▁, ␣) become a literal space
//   2. newline markers (Ċ, escaped \n) become a literal newline
//   3. a whole-token byte-fallback form <0xHH> becomes that raw byte
//   4. a token that is exactly one space plus one ASCII punctuation
//      character becomes the punctuation alone
// The result is a byte string and may not be valid UTF-8 on its own.
inline CanonicalForm canonicalize(std::string_view raw) {
  std::string text = detail::unify_markers(raw, /*escaped_newline=*/true);
  if (auto byte = parse_byte_fallback(text)) {
    text.assign(1, static_cast<char>(*byte));
  }
  if (text.size() == 2 && text[0] == ' ' && detail::is_ascii_punct(static_cast<unsigned char>(text[1]))) {
    text.erase(0, 1);
  }
  return CanonicalForm{std::move(text)};
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  Vocabulary() = default;

  // Ids are the positions in `tokens`. Role ids are implicitly special.
  explicit Vocabulary(std::vector<std::string> tokens, std::vector<TokenId> specials = {},
                      std::map<std::string, TokenId> special_roles = {})
      : tokens_(std::move(tokens)), special_roles_(std::move(special_roles)) {
    const auto n = static_cast<TokenId>(tokens_.size());
    id_of_.reserve(tokens_.size());
    for (TokenId id = 0; id < n; ++id) {
      auto [it, inserted] = id_of_.emplace(tokens_[id], id);
      if (!inserted) {
        throw ValidationError("duplicate token '" + tokens_[id] + "' at ids " + std::to_string(it->second) +
                              " and " + std::to_string(id));
      }
    }
    std::set<TokenId> special_set;
    for (TokenId id : specials) {
      if (id < 0 || id >= n) throw ValidationError("special id " + std::to_string(id) + " out of range");
      special_set.insert(id);
    }
    for (const auto& [role, id] : special_roles_) {
      if (id < 0 || id >= n) {
        throw ValidationError("special role '" + role + "' refers to invalid id " + std::to_string(id));
      }
      special_set.insert(id);
    }
    specials_.assign(special_set.begin(), special_set.end());

    std::map<TokenId, std::string> role_of;
    for (const auto& [role, id] : special_roles_) {
      if (!role_of.emplace(id, role).second) {
        throw ValidationError("id " + std::to_string(id) + " carries two special roles");
      }
    }

    surfaces_.resize(tokens_.size());
    keys_.resize(tokens_.size());
    for (TokenId id = 0; id < n; ++id) {
      const std::string& raw = tokens_[id];
      if (special_set.count(id)) {
        surfaces_[id] = raw;
        if (auto r = role_of.find(id); r != role_of.end()) keys_[id] = std::string("\x01role:") + r->second;
        continue;
      }
      keys_[id] = canonicalize(raw).text;
      if (auto byte = parse_byte_fallback(raw)) {
        surfaces_[id].assign(1, static_cast<char>(*byte));
      } else {
        surfaces_[id] = detail::unify_markers(raw, /*escaped_newline=*/false);
      }
    }
  }

  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }
  bool valid(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < tokens_.size(); }

  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<TokenId> id_of(std::string_view token) const {
    auto it = id_of_.find(std::string(token));
    if (it == id_of_.end()) return std::nullopt;
    return it->second;
  }

  bool is_special(TokenId id) const { return std::binary_search(specials_.begin(), specials_.end(), id); }
  const std::vector<TokenId>& specials() const { return specials_; }
  const std::map<std::string, TokenId>& special_roles() const { return special_roles_; }

  std::optional<TokenId> role(std::string_view name) const {
    auto it = special_roles_.find(std::string(name));
    if (it == special_roles_.end()) return std::nullopt;
    return it->second;
  }

  // Decoded text of one token: markers rendered as whitespace, byte-fallback
  // tokens as their byte. Specials decode to their raw string.
  const std::string& surface(TokenId id) const { return surfaces_.at(static_cast<std::size_t>(id)); }

  // Key used for cross-vocabulary equality. Canonical text for ordinary
  // tokens; a role tag for role-mapped specials; nothing for other specials,
  // which never match anything.
  const std::optional<std::string>& match_key(TokenId id) const { return keys_.at(static_cast<std::size_t>(id)); }

  std::string content_hash() const {
    Fnv1a h;
    h.update_u64(tokens_.size());
    for (const auto& t : tokens_) h.update_u64(t.size()).update(t);
    h.update_u64(specials_.size());
    for (TokenId id : specials_) h.update_u64(static_cast<std::uint64_t>(id));
    for (const auto& [role, id] : special_roles_) h.update_u64(role.size()).update(role).update_u64(static_cast<std::uint64_t>(id));
    return h.hex();
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_ && a.specials_ == b.specials_ && a.special_roles_ == b.special_roles_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> id_of_;
  std::vector<TokenId> specials_;
  std::map<std::string, TokenId> special_roles_;
  std::vector<std::string> surfaces_;
  std::vector<std::optional<std::string>> keys_;
};

// ---------------------------------------------------------------------------
// Vocabulary files
//
// {"tokens": [...], "specials": [...], "special_roles": {"bos": 3}}
// `tokens` may also be an object mapping token string to id.
// ---------------------------------------------------------------------------

namespace detail {

// Collects keys of the object under top-level "tokens" so duplicates, which
// the DOM would silently collapse, can be reported.
struct DuplicateKeyProbe {
  std::set<std::string> seen;
  std::optional<std::string> duplicate;
  std::string current_top;
};

inline Vocabulary vocabulary_from_tokens_object(const nlohmann::json& obj, std::vector<TokenId> specials,
                                                std::map<std::string, TokenId> roles) {
  std::map<TokenId, std::string> by_id;
  for (const auto& [tok, idj] : obj.items()) {
    if (!idj.is_number_integer()) throw ValidationError("token '" + tok + "' has a non-integer id");
    const auto id = idj.get<std::int64_t>();
    if (id < 0 || id > INT32_MAX) throw ValidationError("token '" + tok + "' has out-of-range id " + std::to_string(id));
    auto [it, inserted] = by_id.emplace(static_cast<TokenId>(id), tok);
    if (!inserted) {
      throw ValidationError("tokens '" + it->second + "' and '" + tok + "' share id " + std::to_string(id));
    }
  }
  std::vector<std::string> tokens;
  tokens.reserve(by_id.size());
  TokenId expect = 0;
  for (auto& [id, tok] : by_id) {
    if (id != expect) throw ValidationError("gap in id range: id " + std::to_string(expect) + " is missing");
    tokens.push_back(std::move(tok));
    ++expect;
  }
  return Vocabulary(std::move(tokens), std::move(specials), std::move(roles));
}

}  // namespace detail

inline Vocabulary vocabulary_from_json_text(std::string_view text) {
  if (text.find_first_not_of(" \t\r\n") == std::string_view::npos) return Vocabulary();

  detail::DuplicateKeyProbe probe;
  nlohmann::json::parser_callback_t cb = [&probe](int depth, nlohmann::json::parse_event_t event,
                                                   nlohmann::json& parsed) {
    if (event == nlohmann::json::parse_event_t::key) {
      if (depth == 1) {
        probe.current_top = parsed.get<std::string>();
      } else if (depth == 2 && probe.current_top == "tokens") {
        auto key = parsed.get<std::string>();
        if (!probe.seen.insert(key).second && !probe.duplicate) probe.duplicate = key;
      }
    }
    return true;
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text, cb);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("vocabulary is not valid JSON: ") + e.what());
  }
  if (probe.duplicate) throw ValidationError("duplicate token '" + *probe.duplicate + "'");
  if (!j.is_object()) throw ValidationError("vocabulary must be a JSON object");

  std::vector<TokenId> specials;
  if (auto it = j.find("specials"); it != j.end()) {
    for (const auto& v : *it) specials.push_back(v.get<TokenId>());
  }
  std::map<std::string, TokenId> roles;
  if (auto it = j.find("special_roles"); it != j.end()) {
    for (const auto& [role, v] : it->items()) roles.emplace(role, v.get<TokenId>());
  }
  auto toks = j.find("tokens");
  if (toks == j.end()) {
    if (!specials.empty() || !roles.empty()) throw ValidationError("vocabulary has specials but no tokens");
    return Vocabulary();
  }
  if (toks->is_object()) return detail::vocabulary_from_tokens_object(*toks, std::move(specials), std::move(roles));
  if (!toks->is_array()) throw ValidationError("'tokens' must be an array or an object");
  std::vector<std::string> tokens;
  tokens.reserve(toks->size());
  for (std::size_t i = 0; i < toks->size(); ++i) {
    if (!(*toks)[i].is_string()) throw ValidationError("token at index " + std::to_string(i) + " is not a string");
    tokens.push_back((*toks)[i].get<std::string>());
  }
  return Vocabulary(std::move(tokens), std::move(specials), std::move(roles));
}

inline nlohmann::json vocabulary_to_json(const Vocabulary& v) {
  nlohmann::json j;
  j["tokens"] = v.tokens();
  j["specials"] = v.specials();
  j["special_roles"] = nlohmann::json::object();
  for (const auto& [role, id] : v.special_roles()) j["special_roles"][role] = id;
  return j;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("error reading '" + path + "'");
  return ss.str();
}

inline void write_text_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("error writing '" + path + "'");
}

inline Vocabulary load_vocabulary(const std::string& path) {
  std::string text = read_text_file(path);
  try {
    return vocabulary_from_json_text(text);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

inline void save_vocabulary(const Vocabulary& v, const std::string& path) {
  write_text_file(path, vocabulary_to_json(v).dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Tokenizer: greedy longest match over token surfaces
// ---------------------------------------------------------------------------

class Tokenizer {
 public:
  Tokenizer() = default;

  explicit Tokenizer(Vocabulary vocab) : vocab_(std::move(vocab)) {
    for (TokenId id = 0; id < static_cast<TokenId>(vocab_.size()); ++id) {
      if (vocab_.is_special(id)) continue;
      const std::string& s = vocab_.surface(id);
      if (s.empty()) continue;
      // First (smallest) id wins when surfaces collide.
      if (by_surface_.emplace(s, id).second) max_len_ = std::max(max_len_, s.size());
    }
  }

  const Vocabulary& vocabulary() const { return vocab_; }

  // Throws ValidationError if some byte of `text` has no covering token.
  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    std::size_t pos = 0;
    std::string probe;
    while (pos < text.size()) {
      std::size_t len = std::min(max_len_, text.size() - pos);
      bool found = false;
      for (; len > 0; --len) {
        probe.assign(text.substr(pos, len));
        if (auto it = by_surface_.find(probe); it != by_surface_.end()) {
          ids.push_back(it->second);
          pos += len;
          found = true;
          break;
        }
      }
      if (!found) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "0x%02X", static_cast<unsigned char>(text[pos]));
        throw ValidationError("no token covers byte " + std::string(buf) + " at offset " + std::to_string(pos));
      }
    }
    return ids;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) out += vocab_.surface(id);
    return out;
  }

 private:
  Vocabulary vocab_;
  std::unordered_map<std::string, TokenId> by_surface_;
  std::size_t max_len_ = 0;
};

// ---------------------------------------------------------------------------
// Toy tokenizers
// ---------------------------------------------------------------------------

enum class ToyKind { digit_splitting, numeral_preserving, char_level, word_level };

inline std::optional<ToyKind> toy_kind_from_string(std::string_view s) {
  if (s == "digit_splitting") return ToyKind::digit_splitting;
  if (s == "numeral_preserving") return ToyKind::numeral_preserving;
  if (s == "char_level") return ToyKind::char_level;
  if (s == "word_level") return ToyKind::word_level;
  return std::nullopt;
}

// Every kind covers all 128 ASCII characters plus <0x80>..<0xFF> byte
// fallbacks, so encoding is total. digit_splitting never has a multi-digit
// token; numeral_preserving adds every 2- and 3-digit string; word_level and
// the digit kinds add corpus words (and their space-prefixed forms), the digit
// kinds skipping words that contain digits. char_level ignores the corpus.
inline Tokenizer make_toy_tokenizer(ToyKind kind, std::span<const std::string> corpus = {}) {
  if (kind == ToyKind::word_level && corpus.empty()) {
    throw ValidationError("word_level toy tokenizer needs a nonempty corpus");
  }
  std::vector<std::string> tokens;
  std::set<std::string> seen;
  auto add = [&](std::string t) {
    if (seen.insert(t).second) tokens.push_back(std::move(t));
  };
  for (int c = 0; c < 128; ++c) add(std::string(1, static_cast<char>(c)));
  for (int b = 0x80; b <= 0xFF; ++b) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "<0x%02X>", b);
    add(buf);
  }
  if (kind == ToyKind::numeral_preserving) {
    for (int len = 2; len <= 3; ++len) {
      int count = len == 2 ? 100 : 1000;
      for (int v = 0; v < count; ++v) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "%0*d", len, v);
        add(buf);
      }
    }
  }
  if (kind != ToyKind::char_level) {
    const bool skip_digits = kind != ToyKind::word_level;
    for (const auto& line : corpus) {
      std::istringstream words(line);
      std::string w;
      while (words >> w) {
        if (skip_digits && std::any_of(w.begin(), w.end(), [](char c) { return c >= '0' && c <= '9'; })) continue;
        if (w.size() > 1) add(w);
        add(" " + w);
      }
    }
  }
  return Tokenizer(Vocabulary(std::move(tokens)));
}

}  // namespace ctkd
