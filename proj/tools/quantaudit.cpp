// quantaudit: command-line front end for the quantization audit toolkit.
//
// Every subcommand that writes files echoes its resolved configuration to
// <output>/config.json. Errors print one diagnostic line and exit 1.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "quantaudit/quantaudit.hpp"
#include "table.hpp"

namespace fs = std::filesystem;
using namespace quantaudit;
using qa_cli::num;
using qa_cli::Table;
using json = nlohmann::ordered_json;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_set = false;
  unsigned threads = 0;
  std::string output;
  std::string format = "csv";
  std::vector<std::string> argv;

  ExportFormat fmt() const { return export_format_from_string(format); }
  // QUANTAUDIT_THREADS wins over --threads; 0 means all cores.
  unsigned resolved_threads() const {
    if (const char* env = std::getenv("QUANTAUDIT_THREADS"); env && *env) {
      const auto v = detail::parse_int(env);
      if (v < 0) throw DomainError("QUANTAUDIT_THREADS must be >= 0");
      return resolve_threads(static_cast<unsigned>(v));
    }
    return resolve_threads(threads);
  }
};

fs::path require_output(const Globals& g, const char* cmd) {
  if (g.output.empty()) throw DomainError(std::string(cmd) + " requires --output <dir>");
  return g.output;
}

void require_exists(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("no such file or directory: " + p.string());
}

json load_json_file(const fs::path& p) {
  require_exists(p);
  try {
    return json::parse(detail::read_text_file(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("cannot parse " + p.string() + ": " + e.what());
  }
}

// Records argv and every option value of the subcommand (and the globals).
void echo_config(const fs::path& dir, const CLI::App& sub, const Globals& g, json extra = nullptr) {
  json j;
  j["tool"] = "quantaudit";
  j["subcommand"] = sub.get_name();
  j["argv"] = g.argv;
  json opts;
  auto collect = [&](const CLI::App& app) {
    for (const auto* o : app.get_options()) {
      if (o->get_lnames().empty()) continue;
      const auto& name = o->get_lnames().front();
      if (name == "help") continue;
      if (o->count() > 0) {
        const auto& res = o->results();
        if (o->get_type_size() == 0)
          opts[name] = true;
        else if (res.size() == 1)
          opts[name] = res.front();
        else
          opts[name] = res;
      } else if (!o->get_default_str().empty()) {
        opts[name] = o->get_default_str();
      }
    }
  };
  collect(*sub.get_parent());
  collect(sub);
  j["options"] = opts;
  j["resolved_threads"] = g.resolved_threads();
  if (!extra.is_null()) j["resolved"] = extra;
  detail::write_file_if_changed(dir / "config.json", j.dump(2) + "\n");
}

void emit(const Table& t, const Globals& g, const std::optional<fs::path>& dir, const std::string& stem) {
  if (dir) {
    std::cout << qa_cli::write_table(t, *dir, stem, g.fmt()).string() << "\n";
  } else {
    std::cout << qa_cli::render(t, g.fmt());
  }
}

// ---------------------------------------------------------------------------
// Shared option groups

struct QuantFlags {
  std::int64_t group_size = 128;
  std::string scope = "per_block";
  std::vector<std::string> include{"*"};
  std::vector<std::string> exclude{"*embed*", "*norm*", "*bias*"};

  void add(CLI::App* app) {
    app->add_option("--group-size", group_size, "INT4 group size along the input dimension")->capture_default_str();
    app->add_option("--scope", scope, "INT4 scale scope: per_block or per_row_group")->capture_default_str();
    app->add_option("--include", include, "glob patterns of tensors to quantize")->capture_default_str();
    app->add_option("--exclude", exclude, "glob patterns of tensors never quantized")->capture_default_str();
  }
  QuantSelector selector() const {
    QuantSelector s;
    s.include_patterns = include;
    s.exclude_patterns = exclude;
    return s;
  }
  Int4GroupScheme int4() const {
    Int4GroupScheme s;
    s.group_size = group_size;
    s.scope = scale_scope_from_string(scope);
    if (group_size < 1) throw DomainError("--group-size must be >= 1");
    return s;
  }
};

// The experiment file (see configs/toy_run.json): sections "model", "run",
// "evalset", "fork". Missing sections take the built-in toy defaults.
struct Experiment {
  toylab::TinyLMConfig model;
  toylab::RunConfig run;
  toylab::ToyEvalConfig eval;
  json fork = json::object();
};

Experiment load_experiment(const std::string& path) {
  Experiment e;
  if (path.empty()) return e;
  const auto j = load_json_file(path);
  try {
    if (j.contains("model")) e.model = toylab::model_config_from_json(j.at("model"));
    if (j.contains("run")) e.run = toylab::run_config_from_json(j.at("run"));
    if (j.contains("evalset")) {
      const auto& ev = j.at("evalset");
      e.eval.n_batches = ev.value("n_batches", e.eval.n_batches);
      e.eval.rows = ev.value("rows", e.eval.rows);
      e.eval.seq_len = ev.value("seq_len", e.eval.seq_len);
      e.eval.seed = ev.value("seed", e.eval.seed);
    }
    if (j.contains("fork")) e.fork = j.at("fork");
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("invalid experiment config " + path + ": " + ex.what());
  }
  return e;
}

// ---------------------------------------------------------------------------
// evalset

struct EvalsetCmd {
  std::string config;
  std::optional<std::uint32_t> n_batches, rows, seq_len;

  void setup(CLI::App* app) {
    app->add_option("--config", config, "experiment config (JSON) providing corpus and evalset sections");
    app->add_option("--n-batches", n_batches, "number of evaluation batches");
    app->add_option("--rows", rows, "sequences per batch");
    app->add_option("--seq-len", seq_len, "tokens per sequence");
  }

  int run(const CLI::App& app, const Globals& g) {
    const auto out = require_output(g, "evalset");
    auto e = load_experiment(config);
    if (n_batches) e.eval.n_batches = *n_batches;
    if (rows) e.eval.rows = *rows;
    if (seq_len) e.eval.seq_len = *seq_len;
    if (g.seed_set) e.eval.seed = g.seed;
    const auto corpus = toylab::make_corpus(e.run.corpus);
    const auto es = build_evalset(corpus.validation, e.eval.n_batches, e.eval.rows, e.eval.seq_len, e.run.corpus.vocab,
                                  e.eval.seed, e.run.corpus.id());
    const auto path = out / "evalset.bin";
    if (!fs::exists(path) || !(load_evalset(path) == es)) save_evalset(es, path);
    json extra;
    extra["corpus"] = toylab::to_json(e.run.corpus);
    extra["n_batches"] = e.eval.n_batches;
    extra["rows"] = e.eval.rows;
    extra["seq_len"] = e.eval.seq_len;
    extra["seed"] = e.eval.seed;
    echo_config(out, app, g, extra);
    std::cout << path.string() << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// train

struct TrainCmd {
  std::string config;
  std::optional<std::int64_t> steps, every;
  bool quiet = false;

  void setup(CLI::App* app) {
    app->add_option("--config", config, "experiment config (JSON) with model and run sections");
    app->add_option("--steps", steps, "override run.total_steps");
    app->add_option("--checkpoint-every", every, "override run.checkpoint_every");
    app->add_flag("--quiet", quiet, "do not print training progress");
  }

  int run(const CLI::App& app, const Globals& g) {
    const auto out = require_output(g, "train");
    auto e = load_experiment(config);
    if (steps) {
      e.run.total_steps = *steps;
      if (config.empty()) e.run.schedule = toylab::toy_cosine(*steps);
    }
    if (every) e.run.checkpoint_every = *every;
    if (g.seed_set) e.run.seed = g.seed;
    toylab::TrainOptions opt;
    const auto log_every = std::max<std::int64_t>(1, e.run.total_steps / 20);
    if (!quiet)
      opt.on_step = [&](const toylab::StepRecord& r) {
        if ((r.step + 1) % log_every == 0)
          std::cerr << "step " << r.step + 1 << "  lr " << r.lr << "  loss " << r.loss << "\n";
      };
    const auto res = toylab::train(e.run, e.model, out, opt);
    json extra;
    extra["model"] = toylab::to_json(e.model);
    extra["run"] = toylab::to_json(e.run);
    echo_config(out, app, g, extra);
    json summary;
    summary["resumed"] = res.resumed;
    summary["checkpoints"] = res.checkpoints.size();
    if (!res.log.empty()) {
      summary["first_loss"] = res.log.front().loss;
      summary["final_loss"] = res.log.back().loss;
    }
    std::cout << summary.dump() << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// probe

struct ProbeCmd {
  std::string checkpoint, evalset;
  std::string scheme = "int4";
  QuantFlags q;

  void setup(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    app->add_option("--evalset", evalset, "evalset file")->required();
    app->add_option("--scheme", scheme, "int4, int8 or both")->capture_default_str()->check(CLI::IsMember({"int4", "int8", "both"}));
    q.add(app);
  }

  int run(const CLI::App& app, const Globals& g) {
    require_exists(checkpoint);
    require_exists(evalset);
    const auto ck = read_checkpoint(checkpoint);
    const auto es = load_evalset(evalset);
    const auto eval = toylab::tinylm_evaluator(g.resolved_threads());
    const auto fp = eval(ck.manifest, ck.tensors, es);
    Table t;
    t.columns = {"checkpoint", "step", "scheme", "group_size", "scope", "ppl_fp32", "ppl_quant", "gap_pct", "quantized_tensors"};
    const auto names = select_quantizable(ck.tensors, q.selector());
    auto add = [&](const QuantScheme& s) {
      const auto qm = quantize_model(ck.tensors, q.selector(), s, g.resolved_threads());
      const auto r = make_gap_record(fp.ppl, eval(ck.manifest, qm, es).ppl);
      const bool is4 = std::holds_alternative<Int4GroupScheme>(s);
      t.add({checkpoint, num(ck.manifest.step), is4 ? "int4" : "int8", is4 ? num(q.group_size) : "",
             is4 ? q.scope : "per_channel", num(r.ppl_fp), num(r.ppl_q), num(r.gap_pct),
             num(static_cast<std::int64_t>(names.size()))});
    };
    if (scheme == "int4" || scheme == "both") add(q.int4());
    if (scheme == "int8" || scheme == "both") add(Int8ChannelScheme{});
    std::optional<fs::path> dir;
    if (!g.output.empty()) {
      dir = g.output;
      echo_config(*dir, app, g);
    }
    if (!dir && g.fmt() == ExportFormat::json && t.rows.size() == 1) {
      std::cout << qa_cli::to_json(t)[0].dump(2) << "\n";
    } else {
      emit(t, g, dir, "probe");
    }
    return 0;
  }
};

// ---------------------------------------------------------------------------
// audit

struct AuditCmd {
  std::string checkpoints, evalset;
  bool kurtosis = false;
  QuantFlags q;

  void setup(CLI::App* app) {
    app->add_option("--checkpoints", checkpoints, "directory holding one subdirectory per checkpoint")->required();
    app->add_option("--evalset", evalset, "evalset file")->required();
    app->add_flag("--kurtosis", kurtosis, "also record pooled excess kurtosis of the quantized tensors");
    q.add(app);
  }

  int run(const CLI::App& app, const Globals& g) {
    const auto out = require_output(g, "audit");
    require_exists(checkpoints);
    require_exists(evalset);
    const auto es = load_evalset(evalset);
    SweepOptions opt;
    opt.probe.selector = q.selector();
    opt.probe.int4 = q.int4();
    opt.probe.with_kurtosis = kurtosis;
    opt.threads = g.resolved_threads();
    opt.format = g.fmt();
    opt.output = out / (std::string("trajectory.") + (g.fmt() == ExportFormat::json ? "json" : "csv"));
    const auto res = sweep(checkpoints, es, toylab::tinylm_evaluator(), opt);
    echo_config(out, app, g);
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
    for (const auto& f : res.failures) std::cerr << "error: step " << f.step << " (" << f.path.string() << "): " << f.message << "\n";
    json s;
    s["trajectory"] = opt.output->string();
    s["rows"] = res.rows.size();
    s["computed"] = res.computed_steps.size();
    s["failures"] = res.failures.size();
    std::cout << s.dump() << "\n";
    return res.failures.empty() ? 0 : 1;
  }
};

// ---------------------------------------------------------------------------
// phases

struct PhasesCmd {
  std::string trajectory;
  SegmentOptions seg;

  void setup(CLI::App* app) {
    app->add_option("--trajectory", trajectory, "trajectory file (csv or json)")->required();
    app->add_option("--p1-rate", seg.p1_rate, "relative FP32 improvement per 1,000 steps below which Phase 2 begins")
        ->capture_default_str();
    app->add_option("--window", seg.window, "rows that must stay below the rate / stall window")->capture_default_str();
    app->add_option("--rel-tol", seg.rel_tol, "relative stall tolerance for the causal onset detector")->capture_default_str();
  }

  int run(const CLI::App& app, const Globals& g) {
    const auto out = require_output(g, "phases");
    require_exists(trajectory);
    auto traj = import_trajectory(trajectory);
    const auto rep = segment_phases(traj, seg);
    export_trajectory(traj, g.fmt(), out / (std::string("trajectory_phases.") + (g.fmt() == ExportFormat::json ? "json" : "csv")));
    const auto rj = phase_report_to_json(rep);
    detail::write_file_if_changed(out / "phases.json", rj.dump(2) + "\n");
    echo_config(out, app, g);
    std::cout << rj.dump(2) << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// schedule

struct ScheduleCmd {
  std::string kind = "cosine", schedule_json;
  CosineWarmup cos;
  SGDRSpec sgdr;
  OLISpec oli;
  ConstantLR constant;
  std::int64_t start = 0, stride = 1000;
  std::optional<std::int64_t> end;

  void setup(CLI::App* app) {
    app->add_option("--kind", kind, "cosine, sgdr, oli or constant")->capture_default_str()
        ->check(CLI::IsMember({"cosine", "sgdr", "oli", "constant"}));
    app->add_option("--schedule", schedule_json, "schedule spec JSON file (overrides --kind and its flags)");
    app->add_option("--eta-max", cos.eta_max, "peak learning rate")->capture_default_str();
    app->add_option("--eta-min", cos.eta_min, "floor learning rate")->capture_default_str();
    app->add_option("--warmup", cos.warmup_steps, "linear warmup steps (cosine, oli base)")->capture_default_str();
    app->add_option("--total", cos.total_steps, "cosine horizon (cosine, oli base)")->capture_default_str();
    app->add_option("--period", sgdr.period, "SGDR restart period")->capture_default_str();
    app->add_option("--fork-step", sgdr.fork_step, "step at which SGDR/OLI begin")->capture_default_str();
    app->add_option("--bump-multiplier", oli.bump_multiplier, "OLI bump learning rate as a multiple of eta_max")
        ->capture_default_str();
    app->add_option("--bump-len", oli.bump_len, "OLI bump length")->capture_default_str();
    app->add_option("--cool-len", oli.cool_len, "OLI cool length")->capture_default_str();
    app->add_option("--lr", constant.lr, "constant learning rate")->capture_default_str();
    app->add_option("--start", start, "first step")->capture_default_str();
    app->add_option("--end", end, "end step, exclusive (default: cosine horizon + 1)");
    app->add_option("--stride", stride, "step stride")->capture_default_str();
  }

  ScheduleSpec spec() const {
    if (!schedule_json.empty()) return schedule_from_json(load_json_file(schedule_json));
    ScheduleSpec s;
    if (kind == "cosine") {
      s = cos;
    } else if (kind == "sgdr") {
      SGDRSpec x = sgdr;
      x.eta_max = cos.eta_max;
      x.eta_min = cos.eta_min;
      s = x;
    } else if (kind == "oli") {
      OLISpec x = oli;
      x.base = cos;
      x.fork_step = sgdr.fork_step;
      s = x;
    } else {
      ConstantLR x = constant;
      x.eta_max = cos.eta_max;
      s = x;
    }
    validate(s);
    return s;
  }

  int run(const CLI::App& app, const Globals& g) {
    const auto s = spec();
    const auto curve = emit_curve(s, start, end.value_or(cos.total_steps + 1), stride);
    Table t;
    t.columns = {"step", "lr", "lr_frac", "lr_pct", "phase_tag"};
    for (const auto& p : curve)
      t.add({num(p.step), num(p.lr), num(p.lr_frac), num(100.0 * p.lr_frac), p.phase ? to_string(*p.phase) : ""});
    std::optional<fs::path> dir;
    if (!g.output.empty()) {
      dir = g.output;
      json extra;
      extra["schedule"] = to_json(s);
      echo_config(*dir, app, g, extra);
    }
    emit(t, g, dir, "schedule");
    return 0;
  }
};

// ---------------------------------------------------------------------------
// fork

struct ForkCmd {
  std::string base, evalset, config;
  std::optional<std::int64_t> steps, probe_every;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> only;
  QuantFlags q;

  void setup(CLI::App* app) {
    app->add_option("--base", base, "base checkpoint directory")->required();
    app->add_option("--evalset", evalset, "evalset file")->required();
    app->add_option("--config", config, "experiment config (JSON); its fork section lists conditions");
    app->add_option("--steps", steps, "training steps per run after the fork");
    app->add_option("--probe-every", probe_every, "probe cadence in steps");
    app->add_option("--seeds", seeds, "seeds, e.g. --seeds 0 1 2");
    app->add_option("--conditions", only, "restrict to these condition names");
    q.add(app);
  }

  int run(const CLI::App& app, const Globals& g) {
    const auto out = require_output(g, "fork");
    require_exists(base);
    require_exists(evalset);
    const auto e = load_experiment(config);
    const auto manifest = read_manifest(base);
    toylab::ForkConfig fc;
    fc.steps = e.fork.value("steps", fc.steps);
    fc.probe_every = e.fork.value("probe_every", fc.probe_every);
    if (e.fork.contains("seeds")) fc.seeds = e.fork.at("seeds").get<std::vector<std::uint64_t>>();
    if (steps) fc.steps = *steps;
    if (probe_every) fc.probe_every = *probe_every;
    if (!seeds.empty()) fc.seeds = seeds;
    fc.batch_size = e.run.batch_size;
    fc.optim = e.run.optim;
    fc.probe.selector = q.selector();
    fc.probe.int4 = q.int4();
    fc.threads = g.resolved_threads();

    CosineWarmup base_cos = toylab::toy_cosine();
    if (auto it = manifest.meta.find("schedule"); it != manifest.meta.end()) {
      const auto s = schedule_from_json(nlohmann::json::parse(it->second));
      if (const auto* c = std::get_if<CosineWarmup>(&s)) base_cos = *c;
    }
    if (e.fork.contains("conditions")) {
      for (const auto& c : e.fork.at("conditions")) {
        const auto name = c.at("name").get<std::string>();
        const auto& sj = c.at("schedule");
        fc.conditions.push_back({name, sj.is_string() && sj.get<std::string>() == "base" ? ScheduleSpec(base_cos)
                                                                                          : schedule_from_json(sj)});
      }
    } else {
      fc.conditions = toylab::default_conditions(base_cos, fc.steps);
    }
    if (!only.empty()) {
      std::vector<toylab::ForkCondition> keep;
      for (const auto& c : fc.conditions)
        if (std::find(only.begin(), only.end(), c.name) != only.end()) keep.push_back(c);
      fc.conditions = keep;
    }

    const auto res = toylab::fork(base, fc, load_evalset(evalset), out);
    json extra;
    extra["steps"] = fc.steps;
    extra["probe_every"] = fc.probe_every;
    extra["seeds"] = fc.seeds;
    json conds = json::array();
    for (const auto& c : fc.conditions) conds.push_back({{"name", c.name}, {"schedule", to_json(c.schedule)}});
    extra["conditions"] = conds;
    echo_config(out, app, g, extra);
    int failed = 0;
    for (const auto& r : res.runs)
      if (r.error) {
        ++failed;
        std::cerr << "error: run " << r.condition << "/seed_" << r.seed << ": " << *r.error << "\n";
      }
    std::cout << res.summary.dump(2) << "\n";
    return failed ? 1 : 0;
  }
};

// ---------------------------------------------------------------------------
// stats

// FILE:COLUMN
std::vector<double> read_series(const std::string& spec) {
  const auto colon = spec.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == spec.size())
    throw DomainError("series must be given as FILE:COLUMN, got '" + spec + "'");
  const fs::path file = spec.substr(0, colon);
  require_exists(file);
  return qa_cli::read_csv_column(file, spec.substr(colon + 1));
}

struct StatsCmd {
  std::string test;
  std::string a, b, checkpoint;
  bool all_tensors = false, higher_is_better = false;
  QuantFlags q;

  void setup(CLI::App* app) {
    app->add_option("test", test, "kurtosis, pearson, welch or wins")->required()
        ->check(CLI::IsMember({"kurtosis", "pearson", "welch", "wins"}));
    app->add_option("--a", a, "first series as FILE:COLUMN (challenger for wins)");
    app->add_option("--b", b, "second series as FILE:COLUMN (baseline for wins)");
    app->add_option("--checkpoint", checkpoint, "kurtosis of a checkpoint's pooled weights");
    app->add_flag("--all-tensors", all_tensors, "kurtosis over every tensor instead of the quantized selection");
    app->add_flag("--higher-is-better", higher_is_better, "wins: larger values win");
    q.add(app);
  }

  int run(const CLI::App& app, const Globals& g) {
    Table t;
    t.columns = {"statistic", "value"};
    auto row = [&](const std::string& k, const std::string& v) { t.add({k, v}); };
    if (test == "kurtosis") {
      KurtosisResult k;
      if (!checkpoint.empty()) {
        require_exists(checkpoint);
        const auto ck = read_checkpoint(checkpoint);
        auto sel = q.selector();
        if (all_tensors) sel = QuantSelector{{"*"}, {}, 0};
        k = pooled_weight_kurtosis(ck.tensors, sel);
      } else {
        if (a.empty()) throw DomainError("kurtosis needs --checkpoint or --a FILE:COLUMN");
        k = excess_kurtosis(read_series(a));
      }
      row("excess_kurtosis", num(k.excess_kurtosis));
      row("n", num(static_cast<std::int64_t>(k.n)));
      row("mean", num(k.mean));
      row("variance", num(k.variance));
    } else {
      if (a.empty() || b.empty()) throw DomainError(test + " needs --a and --b");
      const auto xa = read_series(a), xb = read_series(b);
      if (test == "pearson") {
        row("pearson_r", num(pearson(xa, xb)));
        row("n", num(static_cast<std::int64_t>(xa.size())));
      } else if (test == "welch") {
        const auto w = welch_t(xa, xb);
        row("t", num(w.t));
        row("df", num(w.df));
        row("p_two_sided", num(w.p_two_sided));
        row("mean_a", num(w.mean_a));
        row("mean_b", num(w.mean_b));
        row("var_a", num(w.var_a));
        row("var_b", num(w.var_b));
        row("n_a", num(static_cast<std::int64_t>(w.n_a)));
        row("n_b", num(static_cast<std::int64_t>(w.n_b)));
      } else {
        const auto w = pairwise_wins(xa, xb, !higher_is_better);
        row("wins", num(w.wins));
        row("ties", num(w.ties));
        row("losses", num(w.losses()));
        row("total", num(w.total));
      }
    }
    std::optional<fs::path> dir;
    if (!g.output.empty()) {
      dir = g.output;
      echo_config(*dir, app, g);
    }
    if (g.fmt() == ExportFormat::json) {
      json o;
      for (const auto& r : t.rows) o[r[0]] = qa_cli::cell_json(r[1]);
      if (dir) {
        detail::write_file_if_changed(*dir / ("stats_" + test + ".json"), o.dump(2) + "\n");
        std::cout << (*dir / ("stats_" + test + ".json")).string() << "\n";
      } else {
        std::cout << o.dump(2) << "\n";
      }
    } else {
      emit(t, g, dir, "stats_" + test);
    }
    return 0;
  }
};

// ---------------------------------------------------------------------------
// report

struct ReportCmd {
  std::string trajectory, fork_dir;

  void setup(CLI::App* app) {
    app->add_option("--trajectory", trajectory, "audited (optionally phase-labelled) trajectory");
    app->add_option("--fork", fork_dir, "fork output directory");
  }

  static std::string phase_cell(const TrajectoryPoint& p) { return p.phase ? std::to_string(*p.phase) : ""; }

  int run(const CLI::App& app, const Globals& g) {
    const auto out = require_output(g, "report");
    if (trajectory.empty() && fork_dir.empty()) throw DomainError("report needs --trajectory and/or --fork");
    std::vector<fs::path> written;
    if (!trajectory.empty()) {
      require_exists(trajectory);
      const auto traj = import_trajectory(trajectory);
      Table f1;
      f1.columns = {"step", "series", "value", "phase"};
      for (const auto& p : traj) {
        const auto ph = phase_cell(p);
        f1.add({num(p.step), "ppl_fp32", num(p.ppl_fp32), ph});
        f1.add({num(p.step), "gap_int4_pct", num(p.gap_int4_pct), ph});
        f1.add({num(p.step), "gap_int8_pct", num(p.gap_int8_pct), ph});
        if (p.lr_frac) f1.add({num(p.step), "lr_frac", num(*p.lr_frac), ph});
        if (p.kurtosis) f1.add({num(p.step), "kurtosis", num(*p.kurtosis), ph});
      }
      written.push_back(qa_cli::write_table(f1, out, "figure1_trajectory", g.fmt()));
      Table f2;
      f2.columns = {"step", "kurtosis", "gap_int4_pct", "phase"};
      for (const auto& p : traj)
        if (p.kurtosis) f2.add({num(p.step), num(*p.kurtosis), num(p.gap_int4_pct), phase_cell(p)});
      written.push_back(qa_cli::write_table(f2, out, "figure2_kurtosis_gap", g.fmt()));
    }
    if (!fork_dir.empty()) {
      const fs::path root = fork_dir;
      const auto summary = load_json_file(root / toylab::kForkSummaryFile);
      Table f3;
      f3.columns = {"condition", "seed", "step", "phase_tag", "series", "value"};
      for (const auto& c : summary.at("conditions")) {
        const auto name = c.at("name").get<std::string>();
        const auto spec = schedule_from_json(c.at("schedule"));
        const auto fork_step = summary.at("fork_step").get<std::int64_t>();
        for (const auto& r : c.at("runs")) {
          if (r.at("status") != "ok") continue;
          const auto seed = r.at("seed").get<std::uint64_t>();
          const auto traj = import_trajectory(root / name / ("seed_" + std::to_string(seed)) / "trajectory.csv");
          for (const auto& p : traj) {
            std::string tag = p.step <= fork_step ? "base" : "settled";
            if (p.step > fork_step)
              if (const auto t = phase_tag(spec, p.step)) tag = to_string(*t);
            for (auto [series, v] : {std::pair{"gap_int4_pct", p.gap_int4_pct}, std::pair{"gap_int8_pct", p.gap_int8_pct},
                                     std::pair{"ppl_fp32", p.ppl_fp32}})
              f3.add({name, num(static_cast<std::int64_t>(seed)), num(p.step), tag, series, num(v)});
          }
        }
      }
      written.push_back(qa_cli::write_table(f3, out, "figure3_fork", g.fmt()));
    }
    echo_config(out, app, g);
    for (const auto& p : written) std::cout << p.string() << "\n";
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quantaudit: quantization-gap auditing across training checkpoints"};
  app.require_subcommand(1);
  Globals g;
  g.argv.assign(argv, argv + argc);
  auto* seed_opt = app.add_option("--seed", g.seed, "seed for evalset construction and training");
  app.add_option("--threads", g.threads, "worker threads for evaluation (0 = all cores; QUANTAUDIT_THREADS overrides)")
      ->capture_default_str();
  app.add_option("--output", g.output, "output directory");
  app.add_option("--format", g.format, "csv or json")->capture_default_str()->check(CLI::IsMember({"csv", "json"}));
  app.fallthrough();

  EvalsetCmd evalset_cmd;
  TrainCmd train_cmd;
  ProbeCmd probe_cmd;
  AuditCmd audit_cmd;
  PhasesCmd phases_cmd;
  ScheduleCmd schedule_cmd;
  ForkCmd fork_cmd;
  StatsCmd stats_cmd;
  ReportCmd report_cmd;

  std::vector<std::pair<CLI::App*, std::function<int(const CLI::App&)>>> cmds;
  auto reg = [&](const char* name, const char* help, auto& cmd) {
    auto* sub = app.add_subcommand(name, help);
    cmd.setup(sub);
    cmds.emplace_back(sub, [&cmd, &g](const CLI::App& a) { return cmd.run(a, g); });
  };
  reg("probe", "FP32 vs fake-quantized perplexity of one checkpoint", probe_cmd);
  reg("audit", "sweep every checkpoint in a directory into a trajectory", audit_cmd);
  reg("phases", "onset detection and three-phase segmentation of a trajectory", phases_cmd);
  reg("schedule", "evaluate a learning-rate schedule on a step grid", schedule_cmd);
  reg("fork", "fork training from a checkpoint under several schedules and seeds", fork_cmd);
  reg("stats", "kurtosis, Pearson, Welch t and pairwise wins", stats_cmd);
  reg("report", "long-format CSV series for plotting", report_cmd);
  reg("train", "train the toy model with periodic checkpoints", train_cmd);
  reg("evalset", "build the fixed toy evaluation set", evalset_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  g.seed_set = seed_opt->count() > 0;
  try {
    for (auto& [sub, fn] : cmds)
      if (sub->parsed()) return fn(*sub);
  } catch (const std::exception& e) {
    std::cerr << "quantaudit: error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
