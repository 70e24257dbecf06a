#pragma once

// Deterministic single-threaded training of the toy model with periodic
// checkpoints in the weightstore format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "quantaudit/detail/files.hpp"
#include "quantaudit/detail/numfmt.hpp"
#include "quantaudit/error.hpp"
#include "quantaudit/rng.hpp"
#include "quantaudit/schedules.hpp"
#include "quantaudit/toylab/adamw.hpp"
#include "quantaudit/toylab/corpus.hpp"
#include "quantaudit/toylab/tinylm.hpp"
#include "quantaudit/weightstore.hpp"

namespace quantaudit::toylab {

// Default toy schedule: Pythia's cosine shape compressed to 2,000 steps with
// a learning rate suited to a model this small.
inline CosineWarmup toy_cosine(std::int64_t total_steps = 2000) {
  CosineWarmup c;
  c.eta_max = 3e-3;
  c.eta_min = 3e-4;
  c.warmup_steps = std::max<std::int64_t>(1, total_steps / 100);
  c.total_steps = total_steps;
  return c;
}

struct RunConfig {
  std::uint64_t seed = 0;
  std::int64_t total_steps = 2000;
  std::int64_t checkpoint_every = 200;
  std::int64_t batch_size = 4;
  ScheduleSpec schedule = toy_cosine();
  CorpusConfig corpus;
  AdamWConfig optim;

  void validate() const {
    if (total_steps < 0) throw DomainError("total_steps must be >= 0");
    if (checkpoint_every < 1) throw DomainError("checkpoint_every must be >= 1");
    if (batch_size < 1) throw DomainError("batch_size must be >= 1");
    quantaudit::validate(schedule);
    optim.validate();
  }
};

inline nlohmann::ordered_json to_json(const RunConfig& r) {
  nlohmann::ordered_json j;
  j["seed"] = r.seed;
  j["total_steps"] = r.total_steps;
  j["checkpoint_every"] = r.checkpoint_every;
  j["batch_size"] = r.batch_size;
  j["schedule"] = quantaudit::to_json(r.schedule);
  j["corpus"] = to_json(r.corpus);
  j["optim"] = to_json(r.optim);
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig r;
  try {
    r.seed = j.value("seed", r.seed);
    r.total_steps = j.value("total_steps", r.total_steps);
    r.checkpoint_every = j.value("checkpoint_every", r.checkpoint_every);
    r.batch_size = j.value("batch_size", r.batch_size);
    if (j.contains("schedule")) r.schedule = schedule_from_json(j.at("schedule"));
    else r.schedule = toy_cosine(r.total_steps);
    if (j.contains("corpus")) r.corpus = corpus_from_json(j.at("corpus"));
    if (j.contains("optim")) r.optim = adamw_from_json(j.at("optim"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid run config: ") + e.what());
  }
  r.validate();
  return r;
}

inline std::string checkpoint_dir_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%08lld", static_cast<long long>(step));
  return buf;
}

struct StepRecord {
  std::int64_t step = 0;  // optimizer update index (absolute)
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<std::filesystem::path> checkpoints;
  std::vector<StepRecord> log;
  bool resumed = false;  // everything already on disk; nothing trained
};

struct TrainOptions {
  // Extra checkpoint metadata (merged over the defaults).
  std::map<std::string, std::string> meta;
  std::function<void(const StepRecord&)> on_step;
};

namespace detail {

inline constexpr const char* kTrainLogFile = "train_log.csv";

// Checkpoint steps for a run of `steps` updates starting at `start`.
inline std::vector<std::int64_t> checkpoint_steps(std::int64_t start, std::int64_t steps, std::int64_t every) {
  std::vector<std::int64_t> out;
  for (std::int64_t k = 0; k <= steps; k += every) out.push_back(start + k);
  if (out.back() != start + steps) out.push_back(start + steps);
  return out;
}

inline std::string train_log_csv(const std::vector<StepRecord>& log) {
  std::string s = "step,lr,loss\n";
  for (const auto& r : log)
    s += std::to_string(r.step) + "," + quantaudit::detail::format_double(r.lr) + "," +
         quantaudit::detail::format_double(r.loss) + "\n";
  return s;
}

inline std::vector<StepRecord> read_train_log(const std::filesystem::path& path) {
  std::vector<StepRecord> out;
  if (!std::filesystem::exists(path)) return out;
  const auto text = quantaudit::detail::read_text_file(path);
  std::size_t pos = text.find('\n');
  while (pos != std::string::npos && pos + 1 < text.size()) {
    const auto end = text.find('\n', pos + 1);
    const auto line = text.substr(pos + 1, end == std::string::npos ? std::string::npos : end - pos - 1);
    pos = end;
    if (line.empty()) continue;
    const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) throw FormatError("malformed training log line: " + line);
    out.push_back({quantaudit::detail::parse_int(line.substr(0, c1)),
                   quantaudit::detail::parse_double(line.substr(c1 + 1, c2 - c1 - 1)),
                   quantaudit::detail::parse_double(line.substr(c2 + 1))});
  }
  return out;
}

// Samples batch_size windows of seq_len tokens uniformly from the corpus.
inline void sample_batch(const std::vector<std::uint32_t>& corpus, std::int64_t batch, std::int64_t seq, Rng& rng,
                         std::vector<std::uint32_t>& out) {
  if (static_cast<std::int64_t>(corpus.size()) < seq) throw DomainError("training corpus shorter than seq_len");
  out.resize(static_cast<std::size_t>(batch * seq));
  const auto starts = corpus.size() - static_cast<std::size_t>(seq) + 1;
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto off = rng.below(starts);
    std::copy_n(corpus.begin() + static_cast<std::ptrdiff_t>(off), seq, out.begin() + b * seq);
  }
}

}  // namespace detail

// Continues training `model` for run.total_steps updates, numbered from
// start_step. The update taking the weights from step t to t + 1 uses
// lr_at(schedule, t). Checkpoints hold the weights after `step` updates and
// are written at start_step, every checkpoint_every updates, and at the end.
// If every expected checkpoint already exists with the same run metadata the
// call is a no-op.
inline TrainResult train_from(TinyLM<float>& model, std::int64_t start_step, const RunConfig& run,
                              const std::vector<std::uint32_t>& train_tokens, const std::filesystem::path& out_dir,
                              const TrainOptions& opt = {}) {
  run.validate();
  const auto& cfg = model.config();
  std::map<std::string, std::string> meta{{kModelMetaKey, to_json(cfg).dump()},
                                          {"schedule", quantaudit::to_json(run.schedule).dump()},
                                          {"run", to_json(run).dump()},
                                          {"start_step", std::to_string(start_step)}};
  for (const auto& [k, v] : opt.meta) meta[k] = v;

  TrainResult res;
  const auto steps = detail::checkpoint_steps(start_step, run.total_steps, run.checkpoint_every);
  bool complete = true;
  for (auto s : steps) {
    const auto dir = out_dir / checkpoint_dir_name(s);
    res.checkpoints.push_back(dir);
    if (!complete) continue;
    try {
      const auto m = read_manifest(dir);
      complete = m.step == s && m.meta == meta && std::filesystem::exists(dir / kWeightsFile);
    } catch (const Error&) {
      complete = false;
    }
  }
  if (complete && std::filesystem::exists(out_dir / detail::kTrainLogFile)) {
    res.resumed = true;
    res.log = detail::read_train_log(out_dir / detail::kTrainLogFile);
    model = TinyLM<float>::from_tensors(cfg, read_checkpoint(res.checkpoints.back()).tensors);
    return res;
  }

  auto save = [&](std::int64_t step) {
    CheckpointManifest m;
    m.step = step;
    m.meta = meta;
    write_checkpoint(m, model.to_tensors(), out_dir / checkpoint_dir_name(step));
  };

  Rng data_rng(hash_combine(hash_combine(run.seed, 0xda7a), static_cast<std::uint64_t>(start_step)));
  AdamW<float> optim(model.num_params(), run.optim);
  Workspace<float> ws;
  std::vector<float> grads(model.num_params());
  std::vector<std::uint32_t> batch;
  std::size_t next_ckpt = 0;
  if (steps[next_ckpt] == start_step) save(steps[next_ckpt++]);
  for (std::int64_t k = 0; k < run.total_steps; ++k) {
    const std::int64_t step = start_step + k;
    detail::sample_batch(train_tokens, run.batch_size, cfg.seq_len, data_rng, batch);
    double loss = 0.0;
    try {
      loss = model.loss_and_grad(batch, run.batch_size, grads, ws);
    } catch (const DomainError& e) {
      throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step), step);
    }
    if (!std::isfinite(loss)) throw TrainingError("non-finite training loss at step " + std::to_string(step), step);
    const double lr = lr_at(run.schedule, step);
    optim.step(model.params(), grads, lr);
    StepRecord rec{step, lr, loss};
    res.log.push_back(rec);
    if (opt.on_step) opt.on_step(rec);
    if (next_ckpt < steps.size() && steps[next_ckpt] == step + 1) save(steps[next_ckpt++]);
  }
  quantaudit::detail::write_file_atomic(out_dir / detail::kTrainLogFile, detail::train_log_csv(res.log));
  return res;
}

// Trains a fresh model from seeded initialization on the run's corpus.
inline TrainResult train(const RunConfig& run, const TinyLMConfig& cfg, const std::filesystem::path& out_dir,
                         const TrainOptions& opt = {}) {
  cfg.validate();
  if (run.corpus.vocab != static_cast<std::uint32_t>(cfg.vocab_size))
    throw DomainError("corpus vocabulary does not match model vocab_size");
  const auto corpus = make_corpus(run.corpus);
  auto model = TinyLM<float>::init(cfg, run.seed);
  auto o = opt;
  o.meta.emplace("seed", std::to_string(run.seed));
  return train_from(model, 0, run, corpus.train, out_dir, o);
}

}  // namespace quantaudit::toylab
