#pragma once

// Learning-rate schedules evaluable at any step: cosine with linear warmup,
// SGDR warm restarts, Oscillatory Lock-In (OLI), and a constant rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "quantaudit/error.hpp"

namespace quantaudit {

// Linear warmup from 0 to eta_max, then cosine from eta_max to eta_min over
// the remaining steps. Steps past total_steps hold eta_min. Defaults are
// Pythia's.
struct CosineWarmup {
  double eta_max = 6e-4;
  double eta_min = 6e-5;
  std::int64_t warmup_steps = 1430;
  std::int64_t total_steps = 143000;

  void validate() const {
    if (!(eta_min > 0.0) || eta_min > eta_max) throw DomainError("cosine schedule requires 0 < eta_min <= eta_max");
    if (warmup_steps < 0 || warmup_steps >= total_steps)
      throw DomainError("cosine schedule requires 0 <= warmup_steps < total_steps");
  }
};

// Cosine annealing restarted at eta_max every `period` steps counted from
// fork_step.
struct SGDRSpec {
  double eta_max = 6e-4;
  double eta_min = 6e-5;
  std::int64_t period = 10000;
  std::int64_t fork_step = 0;

  void validate() const {
    if (period < 1) throw DomainError("SGDR period must be >= 1");
    if (!(eta_min > 0.0) || eta_min > eta_max) throw DomainError("SGDR requires 0 < eta_min <= eta_max");
  }
};

// Oscillatory Lock-In: each period starts with `bump_len` steps at
// bump_multiplier * eta_max, followed by `cool_len` steps on the base cosine
// evaluated at the absolute step.
struct OLISpec {
  CosineWarmup base;
  double bump_multiplier = 5.0;
  std::int64_t bump_len = 75;
  std::int64_t cool_len = 300;
  std::int64_t fork_step = 0;

  std::int64_t period() const { return bump_len + cool_len; }
  double bump_lr() const { return bump_multiplier * base.eta_max; }

  void validate() const {
    base.validate();
    if (bump_len < 0 || cool_len < 0 || period() < 1) throw DomainError("OLI requires bump_len, cool_len >= 0 and a positive period");
    if (!(bump_multiplier > 0.0)) throw DomainError("OLI bump multiplier must be positive");
  }
};

// Fixed rate; used for controlled optimizer experiments.
struct ConstantLR {
  double lr = 0.0;
  double eta_max = 6e-4;  // reference for lr_frac

  void validate() const {
    if (lr < 0.0) throw DomainError("constant learning rate must be non-negative");
  }
};

using ScheduleSpec = std::variant<CosineWarmup, SGDRSpec, OLISpec, ConstantLR>;

enum class PhaseTag { Bump, Cool };

inline const char* to_string(PhaseTag t) { return t == PhaseTag::Bump ? "bump" : "cool"; }

namespace detail {

// Half-cosine from eta_max (progress 0, returned exactly) down to eta_min.
inline double cosine_anneal(double eta_max, double eta_min, double progress) {
  if (progress == 0.0) return eta_max;
  return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace detail

inline double lr_at(const CosineWarmup& s, std::int64_t step) {
  if (step < 0) throw DomainError("step must be non-negative");
  if (step < s.warmup_steps) return s.eta_max * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.total_steps) return s.eta_min;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return detail::cosine_anneal(s.eta_max, s.eta_min, progress);
}

inline double lr_at(const SGDRSpec& s, std::int64_t step) {
  if (step < s.fork_step) throw DomainError("SGDR is defined from its fork step onward");
  const auto pos = (step - s.fork_step) % s.period;
  return detail::cosine_anneal(s.eta_max, s.eta_min, static_cast<double>(pos) / static_cast<double>(s.period));
}

inline PhaseTag classify_step(const OLISpec& s, std::int64_t step) {
  const auto pos = (step - s.fork_step) % s.period();
  return pos < s.bump_len ? PhaseTag::Bump : PhaseTag::Cool;
}

inline double lr_at(const OLISpec& s, std::int64_t step) {
  if (step < s.fork_step) throw DomainError("OLI is defined from its fork step onward");
  return classify_step(s, step) == PhaseTag::Bump ? s.bump_lr() : lr_at(s.base, step);
}

inline double lr_at(const ConstantLR& s, std::int64_t step) {
  if (step < 0) throw DomainError("step must be non-negative");
  return s.lr;
}

inline double lr_at(const ScheduleSpec& spec, std::int64_t step) {
  return std::visit([step](const auto& s) { return lr_at(s, step); }, spec);
}

inline void validate(const ScheduleSpec& spec) {
  std::visit([](const auto& s) { s.validate(); }, spec);
}

// The eta_max that lr fractions are expressed against.
inline double reference_eta_max(const ScheduleSpec& spec) {
  return std::visit(
      [](const auto& s) -> double {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, OLISpec>)
          return s.base.eta_max;
        else
          return s.eta_max;
      },
      spec);
}

// Bump/cool tag for OLI schedules, nullopt for the others.
inline std::optional<PhaseTag> phase_tag(const ScheduleSpec& spec, std::int64_t step) {
  if (const auto* oli = std::get_if<OLISpec>(&spec)) return classify_step(*oli, step);
  return std::nullopt;
}

inline std::string schedule_kind(const ScheduleSpec& spec) {
  switch (spec.index()) {
    case 0: return "cosine";
    case 1: return "sgdr";
    case 2: return "oli";
    default: return "constant";
  }
}

struct SchedulePoint {
  std::int64_t step = 0;
  double lr = 0.0;
  double lr_frac = 0.0;
  std::optional<PhaseTag> phase;
};

// Samples [start, end) every `stride` steps.
inline std::vector<SchedulePoint> emit_curve(const ScheduleSpec& spec, std::int64_t start, std::int64_t end,
                                             std::int64_t stride) {
  if (start > end) throw DomainError("emit_curve requires start <= end");
  if (stride < 1) throw DomainError("emit_curve requires stride >= 1");
  const double ref = reference_eta_max(spec);
  std::vector<SchedulePoint> out;
  // start == end is the one-point range.
  const std::int64_t stop = start == end ? end + 1 : end;
  for (std::int64_t s = start; s < stop; s += stride) {
    const double lr = lr_at(spec, s);
    out.push_back({s, lr, ref > 0.0 ? lr / ref : 0.0, phase_tag(spec, s)});
  }
  return out;
}

// Bump amplitude derived as K * scale_median / grad_median, hard-capped at
// cap_multiplier * eta_max. Near convergence Adam shrinks gradients so far
// that the derived value is useless and the cap is what actually applies.
inline double calibrate_bump_amplitude(double k, double scale_median, double grad_median, double eta_max,
                                       double cap_multiplier = 5.0) {
  if (!(grad_median > 0.0)) throw DomainError("grad_median must be positive");
  return std::min(k * scale_median / grad_median, cap_multiplier * eta_max);
}

// ---------------------------------------------------------------------------
// JSON form, used by run configs and checkpoint metadata:
//   {"kind": "cosine", "eta_max": ..., "eta_min": ..., "warmup_steps": ..., "total_steps": ...}
//   {"kind": "sgdr", "eta_max": ..., "eta_min": ..., "period": ..., "fork_step": ...}
//   {"kind": "oli", "base": {cosine}, "bump_multiplier": ..., "bump_len": ..., "cool_len": ..., "fork_step": ...}
//   {"kind": "constant", "lr": ..., "eta_max": ...}

inline nlohmann::ordered_json to_json(const ScheduleSpec& spec) {
  nlohmann::ordered_json j;
  j["kind"] = schedule_kind(spec);
  auto cosine_fields = [](nlohmann::ordered_json& o, const CosineWarmup& c) {
    o["eta_max"] = c.eta_max;
    o["eta_min"] = c.eta_min;
    o["warmup_steps"] = c.warmup_steps;
    o["total_steps"] = c.total_steps;
  };
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, CosineWarmup>) {
          cosine_fields(j, s);
        } else if constexpr (std::is_same_v<S, SGDRSpec>) {
          j["eta_max"] = s.eta_max;
          j["eta_min"] = s.eta_min;
          j["period"] = s.period;
          j["fork_step"] = s.fork_step;
        } else if constexpr (std::is_same_v<S, OLISpec>) {
          nlohmann::ordered_json base;
          base["kind"] = "cosine";
          cosine_fields(base, s.base);
          j["base"] = base;
          j["bump_multiplier"] = s.bump_multiplier;
          j["bump_len"] = s.bump_len;
          j["cool_len"] = s.cool_len;
          j["fork_step"] = s.fork_step;
        } else {
          j["lr"] = s.lr;
          j["eta_max"] = s.eta_max;
        }
      },
      spec);
  return j;
}

inline CosineWarmup cosine_from_json(const nlohmann::json& j) {
  CosineWarmup c;
  c.eta_max = j.value("eta_max", c.eta_max);
  c.eta_min = j.value("eta_min", c.eta_min);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.total_steps = j.value("total_steps", c.total_steps);
  return c;
}

inline ScheduleSpec schedule_from_json(const nlohmann::json& j) {
  ScheduleSpec out;
  try {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "cosine") {
      out = cosine_from_json(j);
    } else if (kind == "sgdr") {
      SGDRSpec s;
      s.eta_max = j.value("eta_max", s.eta_max);
      s.eta_min = j.value("eta_min", s.eta_min);
      s.period = j.value("period", s.period);
      s.fork_step = j.value("fork_step", s.fork_step);
      out = s;
    } else if (kind == "oli") {
      OLISpec s;
      if (j.contains("base")) s.base = cosine_from_json(j.at("base"));
      s.bump_multiplier = j.value("bump_multiplier", s.bump_multiplier);
      s.bump_len = j.value("bump_len", s.bump_len);
      s.cool_len = j.value("cool_len", s.cool_len);
      s.fork_step = j.value("fork_step", s.fork_step);
      out = s;
    } else if (kind == "constant") {
      ConstantLR s;
      s.lr = j.value("lr", s.lr);
      s.eta_max = j.value("eta_max", s.eta_max);
      out = s;
    } else {
      throw DomainError("unknown schedule kind '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid schedule spec: ") + e.what());
  }
  validate(out);
  return out;
}

}  // namespace quantaudit
