// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ctkd/ctkd.hpp"
#include "json.hpp"

namespace ctkd::testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir.
inline fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ctkd-test-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

inline const std::vector<std::string>& fixture_corpus() {
  static const std::vector<std::string> corpus = {
      "In 2023 the team shipped 365 builds.",
      "Add 12 and 47 to get 59.",
      "Hello world.",
  };
  return corpus;
}

inline LogitsDump random_dump(std::mt19937_64& rng, const std::string& seq_id, Side side, const Tokenizer& tok,
                              const std::string& text) {
  const auto ids = tok.encode(text);
  const std::size_t V = tok.vocabulary().size();
  std::normal_distribution<double> d(0.0, 1.5);
  std::vector<double> values(ids.size() * V);
  for (double& x : values) x = static_cast<float>(d(rng));  // representable after the f32 round trip
  return {seq_id, side, tok.vocabulary().content_hash(), PositionLogits(V, std::move(values), ids)};
}

// Writes a three-teacher step fixture (P-KL and H-KL through a
// digit-splitting teacher, KL through a same-tokenizer teacher) and returns
// the step config path.
inline fs::path write_step_fixture(const fs::path& dir, std::uint64_t seed = 7) {
  const auto& corpus = fixture_corpus();
  const auto student = make_toy_tokenizer(ToyKind::numeral_preserving, corpus);
  const auto digits = make_toy_tokenizer(ToyKind::digit_splitting, corpus);
  save_vocabulary(student.vocabulary(), (dir / "student.vocab.json").string());
  save_vocabulary(digits.vocabulary(), (dir / "digits.vocab.json").string());
  const auto w = build_projection(student.vocabulary(), digits.vocabulary(), digits, ProjectionConfig{});
  save_projection(w, (dir / "w.jsonl").string());

  std::mt19937_64 rng(seed);
  nlohmann::ordered_json cfg;
  std::vector<std::string> s_paths, d_paths, same_paths;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const std::string id = "seq-" + std::to_string(i);
    const std::string s = "student." + id + ".f32", t = "digits." + id + ".f32", u = "same." + id + ".f32";
    save_logits((dir / s).string(), random_dump(rng, id, Side::student, student, corpus[i]));
    save_logits((dir / t).string(), random_dump(rng, id, Side::teacher, digits, corpus[i]));
    save_logits((dir / u).string(), random_dump(rng, id, Side::teacher, student, corpus[i]));
    s_paths.push_back(s);
    d_paths.push_back(t);
    same_paths.push_back(u);
  }
  cfg["student"] = {{"vocab", "student.vocab.json"}, {"logits", s_paths}};
  cfg["teachers"] = nlohmann::ordered_json::array();
  cfg["teachers"].push_back(
      {{"name", "digits-pkl"}, {"vocab", "digits.vocab.json"}, {"mode", "P-KL"}, {"projection", "w.jsonl"}, {"weight", 0.5}, {"logits", d_paths}});
  cfg["teachers"].push_back(
      {{"name", "digits-hkl"}, {"vocab", "digits.vocab.json"}, {"mode", "H-KL"}, {"projection", "w.jsonl"}, {"weight", 0.25}, {"logits", d_paths}});
  cfg["teachers"].push_back({{"name", "same"}, {"vocab", "student.vocab.json"}, {"mode", "KL"}, {"weight", 0.25}, {"logits", same_paths}});
  cfg["policy"] = {{"kind", "dynamic"}};
  cfg["schedule"] = "static";
  cfg["tau"] = 1.0;
  const fs::path path = dir / "step.json";
  write_text_file(path.string(), cfg.dump(2) + "\n");
  return path;
}

// Runs a shell command, returning its exit status and captured stdout.
struct CommandResult {
  int status = -1;
  std::string out;
};

inline CommandResult run_command(const std::string& cmd) {
  CommandResult r;
  FILE* pipe = ::popen((cmd + " 2>/dev/null").c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
  const int st = ::pclose(pipe);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

inline std::string read_bytes(const fs::path& p) { return read_text_file(p.string()); }

}  // namespace ctkd::testing
