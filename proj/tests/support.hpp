#pragma once

// Fixtures shared by the unit and acceptance suites.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "quantaudit/quantaudit.hpp"

namespace qa_test {

namespace fs = std::filesystem;

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("quantaudit_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    if (!std::getenv("QUANTAUDIT_KEEP_TMP")) fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline quantaudit::Tensor normal_tensor(std::vector<std::int64_t> shape, std::uint64_t seed, double stddev = 1.0,
                                        double mean = 0.0) {
  auto t = quantaudit::Tensor::zeros(std::move(shape));
  quantaudit::Rng rng(seed);
  for (auto& v : t.data) v = static_cast<float>(rng.normal(mean, stddev));
  return t;
}

// Pythia-160m audit rows: step, FP32 perplexity, INT4 gap %, INT8 gap %,
// learning rate as % of its maximum, phase.
struct AuditRow {
  std::int64_t step;
  double ppl_fp32;
  double gap_int4_pct;
  double gap_int8_pct;
  double lr_pct;
  int phase;
};

inline constexpr std::array<AuditRow, 10> kPythiaRows{{
    {1000, 110.1, 1.7, 0.02, 69.9, 1},
    {7000, 42.8, 5.9, 0.06, 99.9, 1},
    {10000, 40.1, 6.8, 0.04, 99.2, 2},
    {30000, 35.7, 9.1, 0.04, 91.3, 2},
    {70000, 33.7, 11.4, 0.11, 57.2, 2},
    {77000, 33.4, 12.7, 0.11, 50.2, 2},
    {83000, 34.4, 19.1, 0.11, 44.3, 3},
    {100000, 34.0, 47.0, 0.20, 29.0, 3},
    {120000, 34.9, 158.4, 0.56, 15.7, 3},
    {143000, 35.3, 517.1, 0.79, 10.0, 3},
}};

inline quantaudit::Trajectory pythia_trajectory() {
  quantaudit::Trajectory t;
  for (const auto& r : kPythiaRows) {
    quantaudit::TrajectoryPoint p;
    p.step = r.step;
    p.ppl_fp32 = r.ppl_fp32;
    p.gap_int4_pct = r.gap_int4_pct;
    p.ppl_int4 = r.ppl_fp32 * (1.0 + r.gap_int4_pct / 100.0);
    p.gap_int8_pct = r.gap_int8_pct;
    p.ppl_int8 = r.ppl_fp32 * (1.0 + r.gap_int8_pct / 100.0);
    t.push_back(p);
  }
  return t;
}

// A model small enough to train for a few hundred steps in about a second.
inline quantaudit::toylab::TinyLMConfig small_model() {
  quantaudit::toylab::TinyLMConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 2;
  c.d_ff = 64;
  c.vocab_size = 64;
  c.seq_len = 32;
  return c;
}

inline quantaudit::toylab::RunConfig small_run(std::int64_t steps = 300, std::int64_t every = 100) {
  quantaudit::toylab::RunConfig r;
  r.total_steps = steps;
  r.checkpoint_every = every;
  r.schedule = quantaudit::toylab::toy_cosine(steps);
  r.corpus.vocab = 64;
  r.corpus.train_tokens = 1 << 16;
  r.corpus.validation_tokens = 1 << 13;
  return r;
}

inline quantaudit::EvalSet small_evalset(const quantaudit::toylab::RunConfig& run, std::uint32_t seq_len = 32) {
  const auto corpus = quantaudit::toylab::make_corpus(run.corpus);
  return quantaudit::build_evalset(corpus.validation, 4, 4, seq_len, run.corpus.vocab, 7, run.corpus.id());
}

struct GradCheck {
  std::size_t checked = 0;
  std::size_t bad = 0;
  double worst = 0.0;  // largest |analytic - numeric| / max(|analytic|, |numeric|)
};

// Compares every analytic gradient of a 64-bit miniature model against
// central finite differences. Parameters are perturbed first so that norm
// gains and biases are not sitting at their special initial values.
inline GradCheck gradient_check(double rel_tol = 1e-3) {
  using quantaudit::toylab::TinyLM;
  quantaudit::toylab::TinyLMConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.vocab_size = 11;
  cfg.seq_len = 6;
  auto model = TinyLM<double>::init(cfg, 5);
  quantaudit::Rng rng(77);
  for (auto& p : model.params()) p += rng.normal(0.0, 0.3);
  const std::int64_t batch = 2;
  std::vector<std::uint32_t> tokens(static_cast<std::size_t>(batch * cfg.seq_len));
  for (auto& t : tokens) t = static_cast<std::uint32_t>(rng.below(cfg.vocab_size));

  quantaudit::toylab::Workspace<double> ws;
  std::vector<double> grads(model.num_params());
  model.loss_and_grad(tokens, batch, grads, ws);
  GradCheck r;
  const double h = 1e-5;
  for (std::size_t i = 0; i < model.num_params(); ++i) {
    const double orig = model.params()[i];
    model.params()[i] = orig + h;
    const double up = model.forward_loss(tokens, batch).loss;
    model.params()[i] = orig - h;
    const double down = model.forward_loss(tokens, batch).loss;
    model.params()[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double scale = std::max(std::fabs(grads[i]), std::fabs(numeric));
    const double diff = std::fabs(grads[i] - numeric);
    ++r.checked;
    if (diff > rel_tol * scale + 1e-8) ++r.bad;
    if (scale > 1e-8) r.worst = std::max(r.worst, diff / scale);
  }
  return r;
}

// Contents of every regular file under `root`, keyed by relative path.
inline std::vector<std::pair<std::string, std::string>> snapshot_tree(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file())
      out.emplace_back(fs::relative(e.path(), root).string(), quantaudit::detail::read_text_file(e.path()));
  std::sort(out.begin(), out.end());
  return out;
}

// Runs a shell command; returns its exit status and combined output.
struct CommandResult {
  int status = -1;
  std::string out;
};

inline CommandResult run_command(const std::string& cmd) {
  CommandResult r;
  FILE* pipe = ::popen((cmd + " 2>&1").c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int st = ::pclose(pipe);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

inline std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace qa_test
