// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0
//
// ctkd: build projections, align sequences, audit coverage and evaluate
// distillation losses from the command line.
//
// Exit codes: 0 success, 1 invalid input or arguments, 2 file I/O failure.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ctkd/ctkd.hpp"
#include "json.hpp"

namespace {

using ctkd::IoError;
using ctkd::ValidationError;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  std::string format = "json";
  json defaults;  // --config contents for subcommands that take plain options
};

void emit(const Globals& g, const ojson& j, const std::string& text) {
  if (g.format == "json") {
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << text;
  }
}

// Options left unset on the command line fall back to same-named keys
// (dashes as underscores) of the --config file.
template <typename T>
void fill_default(const Globals& g, CLI::App* sub, const std::string& flag, T& value) {
  if (sub->get_option(flag)->count() > 0 || !g.defaults.is_object()) return;
  std::string key = flag.substr(2);
  for (char& c : key) c = c == '-' ? '_' : c;
  if (!g.defaults.contains(key)) return;
  try {
    value = g.defaults.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError("config key '" + key + "': " + e.what());
  }
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw ValidationError(flag + " is required");
}

// ---------------------------------------------------------------------------
// build-w
// ---------------------------------------------------------------------------

struct BuildWArgs {
  std::string student_vocab, teacher_vocab, out;
  ctkd::ProjectionConfig cfg;
};

void add_build_w(CLI::App& app, BuildWArgs& a) {
  auto* sub = app.add_subcommand("build-w", "Build the rule-based student-to-teacher projection");
  sub->add_option("--student-vocab", a.student_vocab, "Student vocabulary JSON");
  sub->add_option("--teacher-vocab", a.teacher_vocab, "Teacher vocabulary JSON");
  sub->add_option("--out", a.out, "Projection output (JSON Lines)");
  sub->add_option("--beta", a.cfg.beta, "Decay scale")->capture_default_str();
  sub->add_option("--gamma", a.cfg.gamma, "Decay ratio")->capture_default_str();
  sub->add_option("--max-span", a.cfg.max_span, "Longest teacher re-tokenization kept")->capture_default_str();
  sub->add_option("--top-k", a.cfg.top_k, "Entries kept per row")->capture_default_str();
}

int run_build_w(const Globals& g, CLI::App* sub, BuildWArgs& a) {
  fill_default(g, sub, "--student-vocab", a.student_vocab);
  fill_default(g, sub, "--teacher-vocab", a.teacher_vocab);
  fill_default(g, sub, "--out", a.out);
  fill_default(g, sub, "--beta", a.cfg.beta);
  fill_default(g, sub, "--gamma", a.cfg.gamma);
  fill_default(g, sub, "--max-span", a.cfg.max_span);
  fill_default(g, sub, "--top-k", a.cfg.top_k);
  require(a.student_vocab, "--student-vocab");
  require(a.teacher_vocab, "--teacher-vocab");
  require(a.out, "--out");
  a.cfg.validate();

  const auto vs = ctkd::load_vocabulary(a.student_vocab);
  const auto vt = ctkd::load_vocabulary(a.teacher_vocab);
  const ctkd::Tokenizer tok_t(vt);
  const auto w = ctkd::build_projection(vs, vt, tok_t, a.cfg);
  ctkd::save_projection(w, a.out);

  const auto s = ctkd::summarize(w);
  ojson j;
  j["out"] = a.out;
  j["rows"] = w.n_student();
  j["nnz"] = w.nnz();
  j["exact"] = s.exact;
  j["multi_token"] = s.multi_token;
  j["empty"] = s.empty;
  j["truncated_rows"] = s.truncated_rows;
  j["total_dropped_mass"] = s.total_dropped_mass;
  j["max_dropped_mass"] = s.max_dropped_mass;
  j["hash"] = w.content_hash();
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "wrote %s\nrows %zu  nnz %zu\nexact %zu  multi_token %zu  empty %zu\ntruncated rows %zu  dropped mass total %.6g  max %.6g\n",
                a.out.c_str(), w.n_student(), w.nnz(), s.exact, s.multi_token, s.empty, s.truncated_rows, s.total_dropped_mass,
                s.max_dropped_mass);
  emit(g, j, buf);
  return 0;
}

// ---------------------------------------------------------------------------
// align
// ---------------------------------------------------------------------------

struct AlignArgs {
  std::string student_vocab, teacher_vocab, input, out;
  bool baseline = false;
  bool student_bos = false;
  bool teacher_bos = false;
  ctkd::AlignScoring scoring;
};

void add_align(CLI::App& app, AlignArgs& a) {
  auto* sub = app.add_subcommand("align", "Align student and teacher tokenizations of each input line");
  sub->add_option("--student-vocab", a.student_vocab, "Student vocabulary JSON");
  sub->add_option("--teacher-vocab", a.teacher_vocab, "Teacher vocabulary JSON");
  sub->add_option("--input", a.input, "Text file, one sequence per line");
  sub->add_option("--out", a.out, "Chunk dump (JSON Lines); stdout summary only when omitted");
  sub->add_flag("--baseline", a.baseline, "Use the incremental substring baseline instead of the DP aligner");
  sub->add_flag("--student-add-bos", a.student_bos, "Prepend the student's bos-role token");
  sub->add_flag("--teacher-add-bos", a.teacher_bos, "Prepend the teacher's bos-role token");
  sub->add_option("--alpha-exact", a.scoring.alpha_exact, "Score of a 1-to-1 match")->capture_default_str();
  sub->add_option("--alpha-comb", a.scoring.alpha_comb, "Per-token score of a combination")->capture_default_str();
  sub->add_option("--alpha-gap", a.scoring.alpha_gap, "Score of a one-sided gap")->capture_default_str();
  sub->add_option("--max-span", a.scoring.max_span, "Longest combination span")->capture_default_str();
}

std::vector<ctkd::TokenId> encode_line(const ctkd::Tokenizer& tok, const std::string& line, bool bos, const char* side) {
  std::vector<ctkd::TokenId> ids;
  if (bos) {
    const auto id = tok.vocabulary().role("bos");
    if (!id) throw ValidationError(std::string(side) + " vocabulary has no bos role");
    ids.push_back(*id);
  }
  const auto body = tok.encode(line);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

int run_align(const Globals& g, CLI::App* sub, AlignArgs& a) {
  fill_default(g, sub, "--student-vocab", a.student_vocab);
  fill_default(g, sub, "--teacher-vocab", a.teacher_vocab);
  fill_default(g, sub, "--input", a.input);
  fill_default(g, sub, "--out", a.out);
  fill_default(g, sub, "--alpha-exact", a.scoring.alpha_exact);
  fill_default(g, sub, "--alpha-comb", a.scoring.alpha_comb);
  fill_default(g, sub, "--alpha-gap", a.scoring.alpha_gap);
  fill_default(g, sub, "--max-span", a.scoring.max_span);
  require(a.student_vocab, "--student-vocab");
  require(a.teacher_vocab, "--teacher-vocab");
  require(a.input, "--input");
  a.scoring.validate();

  const ctkd::Tokenizer ts(ctkd::load_vocabulary(a.student_vocab));
  const ctkd::Tokenizer tt(ctkd::load_vocabulary(a.teacher_vocab));
  const std::string text = ctkd::read_text_file(a.input);

  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = end + 1;
  }

  std::string dump;
  std::size_t chunks = 0, matches = 0, combos = 0, gaps = 0, mismatches = 0, forced = 0;
  ojson per_seq = ojson::array();
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string seq_id = "line-" + std::to_string(i + 1);
    const auto s = encode_line(ts, lines[i], a.student_bos, "student");
    const auto t = encode_line(tt, lines[i], a.teacher_bos, "teacher");
    const auto al = a.baseline ? ctkd::trl_substring_align(s, t, ts.vocabulary(), tt.vocabulary())
                               : ctkd::dp_align(s, t, a.scoring, ts.vocabulary(), tt.vocabulary());
    dump += ctkd::alignment_to_jsonl(seq_id, al);
    chunks += al.chunks.size();
    matches += al.count(ctkd::ChunkKind::match);
    combos += al.count(ctkd::ChunkKind::combination);
    gaps += al.gaps();
    mismatches += al.count(ctkd::ChunkKind::mismatch);
    for (const auto& c : al.chunks) forced += c.forced ? 1 : 0;
  }
  if (!a.out.empty()) ctkd::write_text_file(a.out, dump);

  ojson j;
  j["engine"] = a.baseline ? "baseline" : "dp";
  j["sequences"] = lines.size();
  j["chunks"] = chunks;
  j["matches"] = matches;
  j["combinations"] = combos;
  j["gaps"] = gaps;
  j["mismatches"] = mismatches;
  j["forced_groups"] = forced;
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "engine %s  sequences %zu  chunks %zu\nmatches %zu  combinations %zu  gaps %zu  mismatches %zu  forced groups %zu\n",
                a.baseline ? "baseline" : "dp", lines.size(), chunks, matches, combos, gaps, mismatches, forced);
  emit(g, j, buf);
  return 0;
}

// ---------------------------------------------------------------------------
// audit
// ---------------------------------------------------------------------------

struct AuditArgs {
  std::string student_vocab, teacher_vocab;
  std::vector<std::string> critical = ctkd::default_critical_categories();
  double threshold = 1.0;
};

void add_audit(CLI::App& app, AuditArgs& a) {
  auto* sub = app.add_subcommand("audit", "Per-category coverage of student tokens in the exact common set");
  sub->add_option("--student-vocab", a.student_vocab, "Student vocabulary JSON");
  sub->add_option("--teacher-vocab", a.teacher_vocab, "Teacher vocabulary JSON");
  sub->add_option("--critical", a.critical, "Categories whose coverage decides the mode")->capture_default_str();
  sub->add_option("--threshold", a.threshold, "Coverage below this selects P-KL")->capture_default_str();
}

int run_audit(const Globals& g, CLI::App* sub, AuditArgs& a) {
  fill_default(g, sub, "--student-vocab", a.student_vocab);
  fill_default(g, sub, "--teacher-vocab", a.teacher_vocab);
  fill_default(g, sub, "--critical", a.critical);
  fill_default(g, sub, "--threshold", a.threshold);
  require(a.student_vocab, "--student-vocab");
  require(a.teacher_vocab, "--teacher-vocab");
  if (!(a.threshold >= 0 && a.threshold <= 1)) throw ValidationError("--threshold must lie in [0, 1]");

  const auto vs = ctkd::load_vocabulary(a.student_vocab);
  const auto vt = ctkd::load_vocabulary(a.teacher_vocab);
  const auto c = ctkd::build_common_set_exact(vs, vt);
  const auto rules = ctkd::default_category_rules();
  const auto rows = ctkd::audit_coverage(vs, c, rules);
  const auto mode = ctkd::recommend_mode(rows, a.critical, a.threshold);
  emit(g, ctkd::coverage_to_json(rows, mode, a.critical, a.threshold), ctkd::coverage_to_text(rows, mode));
  return 0;
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

struct LossArgs {
  std::string out;
  bool grad = false;
  bool gradcheck = false;
  std::size_t instances = 100;
  std::string mode, policy, schedule;
  std::optional<double> tau, lambda_kl, lambda_uld, lambda_kd, lambda_ce, eps;
  std::optional<std::size_t> top_k;
};

void add_loss(CLI::App& app, LossArgs& a) {
  auto* sub = app.add_subcommand("loss", "Evaluate one distillation step described by the --config step file");
  sub->add_option("--out", a.out, "LossReport path; stdout when omitted");
  sub->add_flag("--grad", a.grad, "Also write gradient tensors next to --out");
  sub->add_flag("--gradcheck", a.gradcheck, "Run the finite-difference gradient suite instead");
  sub->add_option("--instances", a.instances, "Random instances per gradient check")->capture_default_str();
  sub->add_option("--mode", a.mode, "Override every teacher's loss mode")
      ->check(CLI::IsMember({"pkl", "hkl", "gold", "uld", "kl"}));
  sub->add_option("--policy", a.policy, "KD/CE scaling")->check(CLI::IsMember({"dynamic", "fixed"}));
  sub->add_option("--schedule", a.schedule, "Teacher weighting")
      ->check(CLI::IsMember({"static", "adaptive_ce", "adaptive_entropy", "adaptive_maxprob"}));
  sub->add_option("--tau", a.tau, "Temperature");
  sub->add_option("--top-k", a.top_k, "Teacher top-k truncation for KL and P-KL (0 = off)");
  sub->add_option("--lambda-kl", a.lambda_kl, "Hybrid common-set weight");
  sub->add_option("--lambda-uld", a.lambda_uld, "Hybrid ULD weight");
  sub->add_option("--lambda-kd", a.lambda_kd, "Fixed policy KD weight");
  sub->add_option("--lambda-ce", a.lambda_ce, "Fixed policy CE weight");
  sub->add_option("--eps", a.eps, "Floor added inside logarithms");
}

int run_gradcheck(const Globals& g, const LossArgs& a) {
  const auto results = ctkd::run_gradcheck_suite(g.seed, a.instances);
  double worst = 0.0;
  ojson j;
  j["seed"] = g.seed;
  j["checks"] = ojson::array();
  std::string text;
  for (const auto& r : results) {
    worst = std::max(worst, r.max_rel_error);
    j["checks"].push_back({{"name", r.name}, {"instances", r.instances}, {"max_rel_error", r.max_rel_error}});
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-20s  instances %4zu  max rel error %.3e\n", r.name.c_str(), r.instances, r.max_rel_error);
    text += buf;
  }
  const bool ok = worst < 1e-6;
  j["max_rel_error"] = worst;
  j["pass"] = ok;
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max rel error %.3e (%s)\n", worst, ok ? "pass" : "FAIL");
  text += buf;
  emit(g, j, text);
  return ok ? 0 : 1;
}

int run_loss(const Globals& g, CLI::App*, LossArgs& a) {
  if (a.gradcheck) return run_gradcheck(g, a);
  if (g.config.empty()) throw ValidationError("loss needs --config <step file>");
  if (a.grad && a.out.empty()) throw ValidationError("--grad needs --out to place the gradient tensors");

  auto cfg = ctkd::step_config_from_json(g.defaults);
  if (!a.mode.empty()) {
    for (auto& t : cfg.teachers) t.mode = std::string(ctkd::to_string(*ctkd::loss_mode_from_string(a.mode)));
  }
  if (!a.policy.empty()) {
    cfg.policy.kind = a.policy == "fixed" ? ctkd::ScalingPolicy::Kind::fixed : ctkd::ScalingPolicy::Kind::dynamic;
  }
  if (a.lambda_kd) cfg.policy.lambda_kd = *a.lambda_kd;
  if (a.lambda_ce) cfg.policy.lambda_ce = *a.lambda_ce;
  if (!a.schedule.empty()) cfg.schedule = *ctkd::schedule_kind_from_string(a.schedule);
  if (a.tau) cfg.tau = *a.tau;
  if (a.top_k) cfg.loss.top_k = *a.top_k;
  if (a.lambda_kl) cfg.hybrid.lambda_kl = *a.lambda_kl;
  if (a.lambda_uld) cfg.hybrid.lambda_uld = *a.lambda_uld;
  if (a.eps) cfg.loss.eps = *a.eps;
  if (!(cfg.tau > 0)) throw ValidationError("--tau must be > 0");
  cfg.policy.validate();
  cfg.hybrid.validate();
  cfg.loss.validate();

  const auto base = std::filesystem::path(g.config).parent_path();
  const auto input = ctkd::load_step_input(cfg, base);
  const auto report = ctkd::run_step(input, a.grad);

  std::vector<std::string> s_paths, w_paths;
  if (a.grad) {
    for (std::size_t b = 0; b < report.grad_student.size(); ++b) {
      const std::string p = a.out + ".grad_student." + std::to_string(b) + ".f32";
      ctkd::save_f32(p, report.grad_student[b]);
      s_paths.push_back(std::filesystem::path(p).filename().string());
    }
    for (const auto& t : report.teachers) {
      if (t.grad_w.empty()) {
        w_paths.emplace_back();
        continue;
      }
      const std::string p = a.out + ".grad_w." + t.name + ".f32";
      ctkd::save_f32(p, t.grad_w);
      w_paths.push_back(std::filesystem::path(p).filename().string());
    }
  }
  const auto j = ctkd::loss_report_to_json(report, ctkd::step_config_to_json(cfg), s_paths, w_paths);
  if (!a.out.empty()) ctkd::write_text_file(a.out, j.dump(2) + "\n");

  std::string text;
  char buf[256];
  for (const auto& t : report.teachers) {
    std::snprintf(buf, sizeof(buf), "%-12s %-5s alpha %.6f  chunks %zu  gaps %zu  kd %.9g\n", t.name.c_str(),
                  std::string(ctkd::to_string(t.mode)).c_str(), t.alpha, t.chunk_values.size(), t.gaps, t.kd);
    text += buf;
  }
  std::snprintf(buf, sizeof(buf), "l_kd %.9g  l_ce %.9g  kd_multiplier %.9g  total %.9g\n", report.l_kd, report.l_ce,
                report.kd_multiplier, report.total);
  text += buf;
  if (a.out.empty() || g.format == "text") {
    emit(g, j, text);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-tokenizer distillation toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON config; for `loss` the step file, otherwise option defaults");
  app.add_option("--seed", g.seed, "Seed for randomized checks")->capture_default_str();
  app.add_option("--format", g.format, "Output format")->check(CLI::IsMember({"json", "text"}))->capture_default_str();

  BuildWArgs bw;
  AlignArgs al;
  AuditArgs au;
  LossArgs lo;
  add_build_w(app, bw);
  add_align(app, al);
  add_audit(app, au);
  add_loss(app, lo);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (!g.config.empty()) {
      try {
        g.defaults = json::parse(ctkd::read_text_file(g.config));
      } catch (const json::exception& e) {
        throw ValidationError(g.config + ": " + e.what());
      }
    }
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "build-w") return run_build_w(g, sub, bw);
    if (name == "align") return run_align(g, sub, al);
    if (name == "audit") return run_audit(g, sub, au);
    if (name == "loss") return run_loss(g, sub, lo);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
