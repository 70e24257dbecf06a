#pragma once

// Fork experiment: continue training from one base checkpoint under several
// learning-rate conditions and seeds, probing the quantization gap along the
// way, then compare the conditions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "quantaudit/audit.hpp"
#include "quantaudit/detail/files.hpp"
#include "quantaudit/parallel.hpp"
#include "quantaudit/schedules.hpp"
#include "quantaudit/stats.hpp"
#include "quantaudit/toylab/evaluator.hpp"
#include "quantaudit/toylab/train.hpp"

namespace quantaudit::toylab {

struct ForkCondition {
  std::string name;
  ScheduleSpec schedule;
};

struct ForkConfig {
  std::vector<ForkCondition> conditions;  // the first one is the control
  std::int64_t steps = 500;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::int64_t probe_every = 20;
  std::int64_t batch_size = 4;
  AdamWConfig optim;
  ProbeOptions probe;
  unsigned threads = 1;  // runs executed concurrently

  void validate() const {
    if (conditions.empty()) throw DomainError("fork needs at least one condition");
    if (seeds.empty()) throw DomainError("fork needs at least one seed");
    if (steps < 0) throw DomainError("fork steps must be >= 0");
    if (probe_every < 1) throw DomainError("probe_every must be >= 1");
    for (std::size_t i = 0; i < conditions.size(); ++i) {
      if (conditions[i].name.empty() || conditions[i].name.find('/') != std::string::npos)
        throw DomainError("condition names must be non-empty and contain no '/'");
      for (std::size_t j = 0; j < i; ++j)
        if (conditions[j].name == conditions[i].name) throw DomainError("duplicate condition '" + conditions[i].name + "'");
      quantaudit::validate(conditions[i].schedule);
    }
  }
};

// Control (cosine continuation), SGDR and OLI built around the base run's
// cosine. Restart period and bump/cool lengths are scaled to the fork budget.
inline std::vector<ForkCondition> default_conditions(const CosineWarmup& base, std::int64_t steps) {
  SGDRSpec sgdr;
  sgdr.eta_max = base.eta_max;
  sgdr.eta_min = base.eta_min;
  sgdr.period = std::max<std::int64_t>(1, steps / 3);
  OLISpec oli;
  oli.base = base;
  oli.bump_len = 10;
  oli.cool_len = 40;
  return {{"cosine", base}, {"sgdr", sgdr}, {"oli", oli}};
}

// Pins restart-style schedules to the fork step; the cosine continuation is
// left untouched.
inline ScheduleSpec anchor_schedule(ScheduleSpec s, std::int64_t fork_step) {
  if (auto* p = std::get_if<SGDRSpec>(&s)) p->fork_step = fork_step;
  if (auto* p = std::get_if<OLISpec>(&s)) p->fork_step = fork_step;
  return s;
}

struct ForkRun {
  std::string condition;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  Trajectory trajectory;
  std::optional<std::string> error;
};

struct ForkResult {
  std::vector<ForkRun> runs;
  nlohmann::ordered_json summary;
};

namespace detail {

inline double sample_std(const std::vector<double>& xs) {
  return xs.size() < 2 ? 0.0 : std::sqrt(sample_variance(std::span<const double>(xs)));
}

inline nlohmann::ordered_json wins_json(const WinRecord& w) {
  nlohmann::ordered_json j;
  j["wins"] = w.wins;
  j["ties"] = w.ties;
  j["losses"] = w.losses();
  j["total"] = w.total;
  return j;
}

inline const TrajectoryPoint* find_step(const Trajectory& t, std::int64_t step) {
  for (const auto& p : t)
    if (p.step == step) return &p;
  return nullptr;
}

}  // namespace detail

// Summary across runs: final gaps per condition, pairwise wins of every
// challenger against the control, and for OLI conditions the bump/cool
// split with a Welch test of cool-phase gaps against control gaps probed at
// the same steps.
inline nlohmann::ordered_json fork_summary(const std::vector<ForkCondition>& conditions, const std::vector<ForkRun>& runs,
                                           std::int64_t fork_step) {
  nlohmann::ordered_json s;
  s["fork_step"] = fork_step;
  auto runs_of = [&](const std::string& name) {
    std::vector<const ForkRun*> out;
    for (const auto& r : runs)
      if (r.condition == name && !r.error && !r.trajectory.empty()) out.push_back(&r);
    return out;
  };
  auto final_gaps = [&](const std::string& name) {
    std::vector<double> g;
    for (const auto* r : runs_of(name)) g.push_back(r->trajectory.back().gap_int4_pct);
    return g;
  };

  nlohmann::ordered_json conds = nlohmann::ordered_json::array();
  for (const auto& c : conditions) {
    nlohmann::ordered_json cj;
    cj["name"] = c.name;
    cj["schedule"] = quantaudit::to_json(c.schedule);
    nlohmann::ordered_json rj = nlohmann::ordered_json::array();
    std::vector<double> g4, g8;
    for (const auto& r : runs) {
      if (r.condition != c.name) continue;
      nlohmann::ordered_json one;
      one["seed"] = r.seed;
      if (r.error || r.trajectory.empty()) {
        one["status"] = "failed";
        one["error"] = r.error.value_or("empty trajectory");
      } else {
        const auto& last = r.trajectory.back();
        one["status"] = "ok";
        one["final_step"] = last.step;
        one["final_ppl_fp32"] = last.ppl_fp32;
        one["final_gap_int4_pct"] = last.gap_int4_pct;
        one["final_gap_int8_pct"] = last.gap_int8_pct;
        one["probes"] = r.trajectory.size();
        g4.push_back(last.gap_int4_pct);
        g8.push_back(last.gap_int8_pct);
      }
      rj.push_back(one);
    }
    cj["runs"] = rj;
    cj["completed"] = g4.size();
    if (!g4.empty()) {
      cj["final_gap_int4_mean"] = mean_of(g4);
      cj["final_gap_int4_std"] = detail::sample_std(g4);
      cj["final_gap_int8_mean"] = mean_of(g8);
      cj["final_gap_int8_std"] = detail::sample_std(g8);
    }
    conds.push_back(cj);
  }
  s["conditions"] = conds;

  const auto& control = conditions.front().name;
  const auto control_final = final_gaps(control);
  nlohmann::ordered_json cmp = nlohmann::ordered_json::array();
  for (std::size_t i = 1; i < conditions.size(); ++i) {
    nlohmann::ordered_json cj;
    cj["challenger"] = conditions[i].name;
    cj["baseline"] = control;
    cj["metric"] = "final_gap_int4_pct";
    const auto w = pairwise_wins(final_gaps(conditions[i].name), control_final);
    cj.update(detail::wins_json(w));
    cmp.push_back(cj);
  }
  s["pairwise_vs_control"] = cmp;

  nlohmann::ordered_json oli_out = nlohmann::ordered_json::array();
  const auto control_runs = runs_of(control);
  for (const auto& c : conditions) {
    const auto* oli = std::get_if<OLISpec>(&c.schedule);
    if (!oli || c.name == control) continue;
    nlohmann::ordered_json oj;
    oj["condition"] = c.name;
    std::vector<double> cool_gaps, control_gaps, last_cool, control_at_last;
    std::int64_t n_bump = 0, n_cool = 0;
    for (const auto* r : runs_of(c.name)) {
      const TrajectoryPoint* last = nullptr;
      for (const auto& p : r->trajectory) {
        if (p.step <= fork_step) continue;  // the shared base probe is neither
        if (classify_step(*oli, p.step) == PhaseTag::Bump) {
          ++n_bump;
          continue;
        }
        ++n_cool;
        cool_gaps.push_back(p.gap_int4_pct);
        last = &p;
      }
      if (last) last_cool.push_back(last->gap_int4_pct);
    }
    // Control gaps at the same probe steps (cool steps of this OLI schedule).
    std::int64_t last_cool_step = -1;
    for (const auto* r : runs_of(c.name))
      for (const auto& p : r->trajectory)
        if (p.step > fork_step && classify_step(*oli, p.step) == PhaseTag::Cool) last_cool_step = std::max(last_cool_step, p.step);
    for (const auto* r : control_runs) {
      for (const auto& p : r->trajectory) {
        if (p.step <= fork_step || classify_step(*oli, p.step) != PhaseTag::Cool) continue;
        control_gaps.push_back(p.gap_int4_pct);
      }
      if (const auto* p = detail::find_step(r->trajectory, last_cool_step)) control_at_last.push_back(p->gap_int4_pct);
    }
    oj["bump_probes"] = n_bump;
    oj["cool_probes"] = n_cool;
    oj["control_cool_probes"] = control_gaps.size();
    if (!cool_gaps.empty()) oj["cool_gap_int4_mean"] = mean_of(cool_gaps);
    if (!control_gaps.empty()) oj["control_gap_int4_mean"] = mean_of(control_gaps);
    try {
      const auto w = welch_t(cool_gaps, control_gaps);
      nlohmann::ordered_json wj;
      wj["t"] = w.t;
      wj["df"] = w.df;
      wj["p_two_sided"] = w.p_two_sided;
      wj["n_oli"] = w.n_a;
      wj["n_control"] = w.n_b;
      oj["welch_cool_vs_control"] = wj;
    } catch (const DomainError& e) {
      oj["welch_cool_vs_control"] = nullptr;
      oj["welch_note"] = e.what();
    }
    if (last_cool_step >= 0) {
      oj["last_cool_step"] = last_cool_step;
      oj["cool_wins"] = detail::wins_json(pairwise_wins(last_cool, control_at_last));
    }
    oli_out.push_back(oj);
  }
  s["oli"] = oli_out;
  return s;
}

inline constexpr const char* kForkSummaryFile = "summary.json";

// Runs the full condition x seed matrix under out_dir/<condition>/seed_<n>.
// Every run starts from the same base weights with fresh optimizer state.
// Completed runs are detected and not retrained; a failing run is reported
// in the summary and does not stop the others.
inline ForkResult fork(const std::filesystem::path& base_ckpt, const ForkConfig& cfg, const EvalSet& es,
                       const std::filesystem::path& out_dir) {
  cfg.validate();
  const auto base = read_checkpoint(base_ckpt);
  const auto model_cfg = model_config_from_meta(base.manifest.meta);
  const auto fork_step = base.manifest.step;
  // Validate weights once, up front.
  (void)TinyLM<float>::from_tensors(model_cfg, base.tensors);

  CorpusConfig corpus_cfg;
  if (auto it = base.manifest.meta.find("run"); it != base.manifest.meta.end()) {
    const auto j = nlohmann::json::parse(it->second);
    if (j.contains("corpus")) corpus_cfg = corpus_from_json(j.at("corpus"));
  }
  const auto corpus = make_corpus(corpus_cfg);

  auto conditions = cfg.conditions;
  for (auto& c : conditions) c.schedule = anchor_schedule(c.schedule, fork_step);

  ForkResult res;
  for (const auto& c : conditions)
    for (auto seed : cfg.seeds)
      res.runs.push_back({c.name, seed, out_dir / c.name / ("seed_" + std::to_string(seed)), {}, std::nullopt});

  parallel_for(res.runs.size(), cfg.threads, [&](std::size_t i) {
    auto& r = res.runs[i];
    try {
      const auto& cond = *std::find_if(conditions.begin(), conditions.end(),
                                       [&](const ForkCondition& c) { return c.name == r.condition; });
      RunConfig run;
      run.seed = r.seed;
      run.total_steps = cfg.steps;
      run.checkpoint_every = cfg.probe_every;
      run.batch_size = cfg.batch_size;
      run.schedule = cond.schedule;
      run.corpus = corpus_cfg;
      run.optim = cfg.optim;
      auto model = TinyLM<float>::from_tensors(model_cfg, base.tensors);
      TrainOptions topt;
      topt.meta["condition"] = r.condition;
      topt.meta["seed"] = std::to_string(r.seed);
      train_from(model, fork_step, run, corpus.train, r.dir / "checkpoints", topt);
      SweepOptions sopt;
      sopt.probe = cfg.probe;
      sopt.threads = 1;
      sopt.output = r.dir / "trajectory.csv";
      auto sw = sweep(r.dir / "checkpoints", es, tinylm_evaluator(), sopt);
      if (!sw.failures.empty())
        throw EvaluationError("probe failed at step " + std::to_string(sw.failures.front().step) + ": " +
                                  sw.failures.front().message,
                              sw.failures.front().step);
      r.trajectory = std::move(sw.rows);
    } catch (const std::exception& e) {
      r.error = e.what();
    }
  });

  res.summary = fork_summary(conditions, res.runs, fork_step);
  nlohmann::ordered_json head;
  head["base_checkpoint"] = base_ckpt.string();
  head["steps"] = cfg.steps;
  head["seeds"] = cfg.seeds;
  head["probe_every"] = cfg.probe_every;
  head.update(res.summary);
  res.summary = head;
  quantaudit::detail::write_file_if_changed(out_dir / kForkSummaryFile, res.summary.dump(2) + "\n");
  return res;
}

}  // namespace quantaudit::toylab
