#pragma once

// Checkpoint sweep, FP32-convergence onset detection, three-phase
// segmentation, and trajectory export.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "quantaudit/detail/files.hpp"
#include "quantaudit/detail/numfmt.hpp"
#include "quantaudit/error.hpp"
#include "quantaudit/evalset.hpp"
#include "quantaudit/parallel.hpp"
#include "quantaudit/quant.hpp"
#include "quantaudit/schedules.hpp"
#include "quantaudit/stats.hpp"
#include "quantaudit/weightstore.hpp"

namespace quantaudit {

struct TrajectoryPoint {
  std::int64_t step = 0;
  double ppl_fp32 = 0.0;
  double ppl_int4 = 0.0;
  double gap_int4_pct = 0.0;
  double ppl_int8 = 0.0;
  double gap_int8_pct = 0.0;
  std::optional<double> lr;
  std::optional<double> lr_frac;
  std::optional<double> kurtosis;
  std::optional<int> phase;

  friend bool operator==(const TrajectoryPoint&, const TrajectoryPoint&) = default;
};

using Trajectory = std::vector<TrajectoryPoint>;

inline constexpr const char* kTrajectoryHeader =
    "step,ppl_fp32,ppl_int4,gap_int4_pct,ppl_int8,gap_int8_pct,lr,lr_frac,kurtosis,phase";

// ---------------------------------------------------------------------------
// Export / import

namespace detail {

inline std::string opt_cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

template <class J>
J opt_json(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return J(nullptr);
  return J(*v);
}

template <class J>
J num_json(double v) {
  if (!std::isfinite(v)) return J(nullptr);
  return J(v);
}

}  // namespace detail

inline std::string trajectory_to_csv(const Trajectory& traj) {
  std::string out = std::string(kTrajectoryHeader) + "\n";
  for (const auto& p : traj) {
    using detail::format_double;
    out += std::to_string(p.step) + "," + format_double(p.ppl_fp32) + "," + format_double(p.ppl_int4) + "," +
           format_double(p.gap_int4_pct) + "," + format_double(p.ppl_int8) + "," + format_double(p.gap_int8_pct) + "," +
           detail::opt_cell(p.lr) + "," + detail::opt_cell(p.lr_frac) + "," + detail::opt_cell(p.kurtosis) + "," +
           (p.phase ? std::to_string(*p.phase) : std::string()) + "\n";
  }
  return out;
}

inline Trajectory trajectory_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("trajectory CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kTrajectoryHeader) throw FormatError("unexpected trajectory CSV header: " + line);
  Trajectory traj;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto c = detail::split_csv_line(line);
    if (c.size() != 10) throw FormatError("trajectory CSV line " + std::to_string(lineno) + " has " + std::to_string(c.size()) + " cells");
    TrajectoryPoint p;
    p.step = detail::parse_int(c[0]);
    p.ppl_fp32 = detail::parse_double(c[1]);
    p.ppl_int4 = detail::parse_double(c[2]);
    p.gap_int4_pct = detail::parse_double(c[3]);
    p.ppl_int8 = detail::parse_double(c[4]);
    p.gap_int8_pct = detail::parse_double(c[5]);
    p.lr = detail::parse_optional_double(c[6]);
    p.lr_frac = detail::parse_optional_double(c[7]);
    p.kurtosis = detail::parse_optional_double(c[8]);
    if (!detail::trim(c[9]).empty()) p.phase = static_cast<int>(detail::parse_int(c[9]));
    traj.push_back(p);
  }
  return traj;
}

inline nlohmann::ordered_json trajectory_to_json(const Trajectory& traj) {
  using J = nlohmann::ordered_json;
  J arr = J::array();
  for (const auto& p : traj) {
    J row;
    row["step"] = p.step;
    row["ppl_fp32"] = detail::num_json<J>(p.ppl_fp32);
    row["ppl_int4"] = detail::num_json<J>(p.ppl_int4);
    row["gap_int4_pct"] = detail::num_json<J>(p.gap_int4_pct);
    row["ppl_int8"] = detail::num_json<J>(p.ppl_int8);
    row["gap_int8_pct"] = detail::num_json<J>(p.gap_int8_pct);
    row["lr"] = detail::opt_json<J>(p.lr);
    row["lr_frac"] = detail::opt_json<J>(p.lr_frac);
    row["kurtosis"] = detail::opt_json<J>(p.kurtosis);
    row["phase"] = p.phase ? J(*p.phase) : J(nullptr);
    arr.push_back(std::move(row));
  }
  return arr;
}

inline Trajectory trajectory_from_json(const nlohmann::json& arr) {
  auto num = [](const nlohmann::json& v) {
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  auto opt = [](const nlohmann::json& v) -> std::optional<double> {
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  Trajectory traj;
  try {
    for (const auto& row : arr) {
      TrajectoryPoint p;
      p.step = row.at("step").get<std::int64_t>();
      p.ppl_fp32 = num(row.at("ppl_fp32"));
      p.ppl_int4 = num(row.at("ppl_int4"));
      p.gap_int4_pct = num(row.at("gap_int4_pct"));
      p.ppl_int8 = num(row.at("ppl_int8"));
      p.gap_int8_pct = num(row.at("gap_int8_pct"));
      p.lr = opt(row.at("lr"));
      p.lr_frac = opt(row.at("lr_frac"));
      p.kurtosis = opt(row.at("kurtosis"));
      if (!row.at("phase").is_null()) p.phase = row.at("phase").get<int>();
      traj.push_back(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid trajectory JSON: ") + e.what());
  }
  return traj;
}

enum class ExportFormat { csv, json };

inline ExportFormat export_format_from_string(const std::string& s) {
  if (s == "csv") return ExportFormat::csv;
  if (s == "json") return ExportFormat::json;
  throw DomainError("unknown format '" + s + "' (expected csv or json)");
}

inline std::filesystem::path export_trajectory(const Trajectory& traj, ExportFormat fmt,
                                               const std::filesystem::path& path) {
  if (fmt == ExportFormat::csv)
    detail::write_file_atomic(path, trajectory_to_csv(traj));
  else
    detail::write_file_atomic(path, trajectory_to_json(traj).dump(2) + "\n");
  return path;
}

inline Trajectory import_trajectory(const std::filesystem::path& path) {
  const auto text = detail::read_text_file(path);
  if (path.extension() == ".json") {
    try {
      return trajectory_from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("cannot parse " + path.string() + ": " + e.what());
    }
  }
  return trajectory_from_csv(text);
}

// ---------------------------------------------------------------------------
// Sweep

// Builds a model from checkpoint weights and evaluates its perplexity on the
// evalset. The toy lab provides one; adapters for other model families plug
// in here.
using CheckpointEvaluator =
    std::function<PerplexityResult(const CheckpointManifest&, const TensorMap&, const EvalSet&)>;

struct ProbeOptions {
  QuantSelector selector;
  Int4GroupScheme int4;
  // Schedule used for the lr columns. When absent, the "schedule" entry of
  // each checkpoint's metadata is used; if that is missing too the lr
  // columns stay empty.
  std::optional<ScheduleSpec> schedule;
  bool with_kurtosis = false;
};

struct SweepOptions {
  ProbeOptions probe;
  unsigned threads = 1;
  // Existing trajectory file to resume from and to write to.
  std::optional<std::filesystem::path> output;
  ExportFormat format = ExportFormat::csv;
};

struct SweepFailure {
  std::int64_t step = 0;
  std::filesystem::path path;
  std::string message;
};

struct SweepResult {
  Trajectory rows;
  std::vector<std::int64_t> computed_steps;  // rows evaluated in this call
  std::vector<SweepFailure> failures;
  std::vector<std::string> warnings;
};

inline std::optional<ScheduleSpec> schedule_for(const CheckpointManifest& m, const ProbeOptions& opt) {
  if (opt.schedule) return opt.schedule;
  auto it = m.meta.find("schedule");
  if (it == m.meta.end()) return std::nullopt;
  try {
    return schedule_from_json(nlohmann::json::parse(it->second));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint schedule metadata is not valid JSON: ") + e.what());
  }
}

// Probes one checkpoint: FP32 perplexity, INT4 and INT8 fake-quantized
// perplexities, gaps, lr, and optionally pooled weight kurtosis.
inline TrajectoryPoint probe_checkpoint(const Checkpoint& ck, const EvalSet& es, const CheckpointEvaluator& eval,
                                        const ProbeOptions& opt) {
  TrajectoryPoint p;
  p.step = ck.manifest.step;
  p.ppl_fp32 = eval(ck.manifest, ck.tensors, es).ppl;
  const auto q4 = quantize_model(ck.tensors, opt.selector, opt.int4);
  p.ppl_int4 = eval(ck.manifest, q4, es).ppl;
  const auto q8 = quantize_model(ck.tensors, opt.selector, Int8ChannelScheme{});
  p.ppl_int8 = eval(ck.manifest, q8, es).ppl;
  p.gap_int4_pct = gap(p.ppl_fp32, p.ppl_int4);
  p.gap_int8_pct = gap(p.ppl_fp32, p.ppl_int8);
  if (const auto sched = schedule_for(ck.manifest, opt)) {
    p.lr = lr_at(*sched, p.step);
    const double ref = reference_eta_max(*sched);
    p.lr_frac = ref > 0.0 ? *p.lr / ref : 0.0;
  }
  if (opt.with_kurtosis) p.kurtosis = pooled_weight_kurtosis(ck.tensors, opt.selector).excess_kurtosis;
  return p;
}

// Probes every checkpoint under `root` that is not already present in the
// output file. Failing checkpoints are recorded and skipped. Rows are merged
// by step, so the output is the same for any thread count.
inline SweepResult sweep(const std::filesystem::path& root, const EvalSet& es, const CheckpointEvaluator& eval,
                         const SweepOptions& opt) {
  SweepResult res;
  std::map<std::int64_t, TrajectoryPoint> rows;
  if (opt.output && std::filesystem::exists(*opt.output)) {
    for (auto& p : import_trajectory(*opt.output)) rows.emplace(p.step, p);
  }
  auto listing = list_checkpoints(root);
  res.warnings = listing.warnings;
  std::vector<CheckpointEntry> todo;
  for (const auto& e : listing.entries)
    if (!rows.count(e.step)) todo.push_back(e);

  std::vector<std::optional<TrajectoryPoint>> computed(todo.size());
  std::vector<std::string> errors(todo.size());
  parallel_for(todo.size(), opt.threads, [&](std::size_t i) {
    try {
      const auto ck = read_checkpoint(todo[i].path);
      computed[i] = probe_checkpoint(ck, es, eval, opt.probe);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < todo.size(); ++i) {
    if (computed[i]) {
      rows[todo[i].step] = *computed[i];
      res.computed_steps.push_back(todo[i].step);
    } else {
      res.failures.push_back({todo[i].step, todo[i].path, errors[i]});
    }
  }
  for (auto& [step, p] : rows) res.rows.push_back(p);
  if (opt.output && (!res.computed_steps.empty() || !std::filesystem::exists(*opt.output))) {
    export_trajectory(res.rows, opt.format, *opt.output);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Onset detection and phase segmentation

struct OnsetResult {
  std::int64_t min_ppl_step = 0;
  double min_ppl_value = 0.0;
  std::size_t min_ppl_index = 0;
  std::optional<std::int64_t> stall_step;
};

// min_ppl_step: global argmin of FP32 perplexity (earliest on ties).
// stall_step: first step whose best-so-far perplexity improved by no more
// than rel_tol (relative) over the trailing `window` checkpoints; this is
// the causal variant usable during live training.
inline OnsetResult detect_onset(const Trajectory& traj, std::size_t window = 5, double rel_tol = 1e-3) {
  if (window < 1) throw DomainError("onset window must be >= 1");
  if (traj.size() < window + 1)
    throw DomainError("trajectory too short for onset detection: need " + std::to_string(window + 1) + " rows, have " +
                      std::to_string(traj.size()));
  OnsetResult r;
  r.min_ppl_value = traj[0].ppl_fp32;
  std::vector<double> best(traj.size());
  for (std::size_t i = 0; i < traj.size(); ++i) {
    if (traj[i].ppl_fp32 < r.min_ppl_value) {
      r.min_ppl_value = traj[i].ppl_fp32;
      r.min_ppl_index = i;
    }
    best[i] = r.min_ppl_value;
  }
  r.min_ppl_step = traj[r.min_ppl_index].step;
  for (std::size_t i = window; i < traj.size(); ++i) {
    if (best[i - window] - best[i] <= rel_tol * best[i - window]) {
      r.stall_step = traj[i].step;
      break;
    }
  }
  return r;
}

struct PhaseSummary {
  int phase = 0;
  std::size_t rows = 0;
  std::optional<std::int64_t> first_step, last_step;
  std::optional<double> ppl_start, ppl_end;
  std::optional<double> gap_mean, gap_max;
};

struct PhaseReport {
  std::optional<std::int64_t> boundary_12;  // first Phase 2 step
  std::int64_t boundary_23 = 0;             // last Phase 2 step (FP32 minimum); Phase 3 is strictly after
  std::int64_t min_ppl_step = 0;
  double min_ppl_value = 0.0;
  std::optional<std::int64_t> stall_step;
  bool partial = false;
  std::string note;
  std::vector<PhaseSummary> phases;  // always phases 1, 2, 3
};

struct SegmentOptions {
  double p1_rate = 0.01;  // relative FP32 improvement per 1,000 steps
  std::size_t window = 5;
  double rel_tol = 1e-3;
};

// Forward improvement rate at each row: relative PPL drop to the next row,
// per 1,000 steps. The last row has none.
inline std::vector<double> improvement_rates(const Trajectory& traj) {
  std::vector<double> r;
  for (std::size_t j = 0; j + 1 < traj.size(); ++j) {
    const double dsteps = static_cast<double>(traj[j + 1].step - traj[j].step) / 1000.0;
    r.push_back((traj[j].ppl_fp32 - traj[j + 1].ppl_fp32) / traj[j].ppl_fp32 / dsteps);
  }
  return r;
}

// Labels rows 1 (rapid learning), 2 (plateau) or 3 (post-convergence).
// Phase 3 is every row after the FP32 minimum. Phase 2 starts at the first
// row whose forward improvement rate, and that of the following
// `window - 1` rows, is below p1_rate. Labels are written back onto `traj`.
inline PhaseReport segment_phases(Trajectory& traj, const SegmentOptions& opt = {}) {
  if (traj.empty()) throw DomainError("cannot segment an empty trajectory");
  for (std::size_t i = 1; i < traj.size(); ++i)
    if (traj[i].step <= traj[i - 1].step) throw DomainError("trajectory steps must be strictly increasing");

  PhaseReport rep;
  std::size_t min_idx = 0;
  for (std::size_t i = 1; i < traj.size(); ++i)
    if (traj[i].ppl_fp32 < traj[min_idx].ppl_fp32) min_idx = i;
  rep.min_ppl_step = traj[min_idx].step;
  rep.min_ppl_value = traj[min_idx].ppl_fp32;
  rep.boundary_23 = rep.min_ppl_step;

  std::optional<std::size_t> b12;
  if (traj.size() < opt.window + 1) {
    rep.partial = true;
    rep.note = "trajectory shorter than window + 1 rows; Phase 1/2 boundary not determined";
  } else {
    rep.stall_step = detect_onset(traj, opt.window, opt.rel_tol).stall_step;
    const auto rates = improvement_rates(traj);
    for (std::size_t i = 1; i < min_idx && !b12; ++i) {
      const std::size_t end = std::min(i + opt.window, rates.size());
      bool slow = true;
      for (std::size_t j = i; j < end; ++j) slow = slow && rates[j] < opt.p1_rate;
      if (slow) b12 = i;
    }
    if (!b12) {
      rep.partial = true;
      rep.note = "no plateau onset found before the FP32 minimum; Phase 1/2 boundary not determined";
    }
  }
  if (b12) rep.boundary_12 = traj[*b12].step;
  if (min_idx + 1 == traj.size()) {
    rep.note += rep.note.empty() ? "" : "; ";
    rep.note += "FP32 minimum at final row; Phase 3 empty";
  }

  for (std::size_t i = 0; i < traj.size(); ++i) {
    if (i > min_idx)
      traj[i].phase = 3;
    else if (b12 && i >= *b12)
      traj[i].phase = 2;
    else
      traj[i].phase = 1;
  }

  for (int ph = 1; ph <= 3; ++ph) {
    PhaseSummary s;
    s.phase = ph;
    double gsum = 0.0;
    std::size_t gcount = 0;
    for (const auto& p : traj) {
      if (p.phase != ph) continue;
      ++s.rows;
      if (!s.first_step) {
        s.first_step = p.step;
        s.ppl_start = p.ppl_fp32;
      }
      s.last_step = p.step;
      s.ppl_end = p.ppl_fp32;
      if (std::isfinite(p.gap_int4_pct)) {
        gsum += p.gap_int4_pct;
        ++gcount;
        s.gap_max = s.gap_max ? std::max(*s.gap_max, p.gap_int4_pct) : p.gap_int4_pct;
      }
    }
    if (gcount) s.gap_mean = gsum / static_cast<double>(gcount);
    rep.phases.push_back(s);
  }
  return rep;
}

inline nlohmann::ordered_json phase_report_to_json(const PhaseReport& r) {
  using J = nlohmann::ordered_json;
  auto opt_i = [](const std::optional<std::int64_t>& v) { return v ? J(*v) : J(nullptr); };
  J j;
  j["boundary_12"] = opt_i(r.boundary_12);
  j["boundary_23"] = r.boundary_23;
  j["min_ppl_step"] = r.min_ppl_step;
  j["min_ppl_value"] = r.min_ppl_value;
  j["stall_step"] = opt_i(r.stall_step);
  j["partial"] = r.partial;
  j["note"] = r.note;
  J phases = J::array();
  for (const auto& s : r.phases) {
    J p;
    p["phase"] = s.phase;
    p["rows"] = s.rows;
    p["first_step"] = opt_i(s.first_step);
    p["last_step"] = opt_i(s.last_step);
    p["ppl_start"] = detail::opt_json<J>(s.ppl_start);
    p["ppl_end"] = detail::opt_json<J>(s.ppl_end);
    p["gap_mean"] = detail::opt_json<J>(s.gap_mean);
    p["gap_max"] = detail::opt_json<J>(s.gap_max);
    phases.push_back(std::move(p));
  }
  j["phases"] = std::move(phases);
  return j;
}

}  // namespace quantaudit
