#pragma once

// Calibration-free fake-quantization probes.
//
// INT4: asymmetric, one (scale, zero-point) pair per group of `group_size`
// consecutive input-dimension columns. With ScaleScope::per_block a group is
// the whole d_out x g column block; with per_row_group each output row gets
// its own pair per block.
//
// INT8: symmetric, one scale per output row, zero-point 0, codes in
// [-127, 127].
//
// All arithmetic is done in double; tensors are stored back as f32.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "quantaudit/error.hpp"
#include "quantaudit/parallel.hpp"
#include "quantaudit/weightstore.hpp"

namespace quantaudit {

// Ranges (or max-abs values) below this are treated as constant.
inline constexpr double kRangeEpsilon = 1e-12;

// Round to nearest, ties to even, independent of the FP environment.
inline double round_half_even(double x) {
  const double r = std::round(x);  // ties away from zero
  if (std::fabs(x - std::trunc(x)) == 0.5) {
    return 2.0 * std::round(x / 2.0);
  }
  return r;
}

enum class ScaleScope { per_block, per_row_group };

inline const char* to_string(ScaleScope s) { return s == ScaleScope::per_block ? "per_block" : "per_row_group"; }

inline ScaleScope scale_scope_from_string(const std::string& s) {
  if (s == "per_block") return ScaleScope::per_block;
  if (s == "per_row_group") return ScaleScope::per_row_group;
  throw DomainError("unknown scale scope '" + s + "' (expected per_block or per_row_group)");
}

struct Int4GroupScheme {
  std::int64_t group_size = 128;
  ScaleScope scope = ScaleScope::per_block;
  static constexpr int q_min = 0;
  static constexpr int q_max = 15;
};

struct Int8ChannelScheme {
  static constexpr int q_max = 127;
};

using QuantScheme = std::variant<Int4GroupScheme, Int8ChannelScheme>;

inline std::string scheme_name(const QuantScheme& s) {
  return std::holds_alternative<Int4GroupScheme>(s) ? "int4" : "int8";
}

// Scale and zero-point of one asymmetric group.
struct GroupParams {
  double scale = 0.0;
  int zero_point = 0;
  bool degenerate = false;  // range below kRangeEpsilon; values pass through unchanged
  bool zero_point_clamped = false;
  double min = 0.0;
  double max = 0.0;
};

using Int4GroupParams = GroupParams;

inline GroupParams asym_params_from_range(double lo, double hi, int q_max) {
  GroupParams p;
  p.min = lo;
  p.max = hi;
  if (hi - lo < kRangeEpsilon) {
    p.degenerate = true;
    return p;
  }
  p.scale = (hi - lo) / q_max;
  const double z = round_half_even(-lo / p.scale);
  const double zc = std::clamp(z, 0.0, static_cast<double>(q_max));
  p.zero_point_clamped = zc != z;
  p.zero_point = static_cast<int>(zc);
  return p;
}

// Parameters for one group with `q_max + 1` levels (INT4: q_max = 15).
template <class T>
GroupParams asym_group_params(std::span<const T> group, int q_max) {
  if (group.empty()) throw DomainError("cannot quantize an empty group");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (T v : group) {
    const double d = static_cast<double>(v);
    if (!std::isfinite(d)) throw DomainError("non-finite value in quantization group");
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  return asym_params_from_range(lo, hi, q_max);
}

inline Int4GroupParams int4_group_params(std::span<const float> group) {
  return asym_group_params(group, Int4GroupScheme::q_max);
}
inline Int4GroupParams int4_group_params(std::span<const double> group) {
  return asym_group_params(group, Int4GroupScheme::q_max);
}

// s * (clamp(round(w / s + z), q_min, q_max) - z)
inline double fake_quant(double w, double s, int z, int q_min, int q_max) {
  double code = std::clamp(round_half_even(w / s + z), static_cast<double>(q_min), static_cast<double>(q_max));
  // The rounded quotient can land on a tie that the stored scale does not
  // have; the fused residual decides which neighbour is really nearer.
  const double r = std::fma(-s, code - z, w);
  if (std::fabs(r) > 0.5 * s) {
    const double alt = code + (r > 0 ? 1.0 : -1.0);
    if (alt >= q_min && alt <= q_max && std::fabs(std::fma(-s, alt - z, w)) < std::fabs(r)) code = alt;
  }
  return s * (code - z);
}

inline std::vector<double> fake_quant(std::span<const double> values, double s, int z, int q_min, int q_max) {
  if (!(s > 0.0)) throw DomainError("fake_quant scale must be positive");
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = fake_quant(values[i], s, z, q_min, q_max);
  return out;
}

// Group geometry of a d_out x d_in matrix; the last group may be narrower.
struct GroupGrid {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::int64_t group_size = 128;
  ScaleScope scope = ScaleScope::per_block;

  std::int64_t groups_per_row() const { return (cols + group_size - 1) / group_size; }
  std::int64_t group_width(std::int64_t k) const { return std::min(group_size, cols - k * group_size); }
  std::size_t param_count() const {
    return static_cast<std::size_t>(scope == ScaleScope::per_block ? groups_per_row() : rows * groups_per_row());
  }
  std::size_t param_index(std::int64_t row, std::int64_t col) const {
    const auto k = col / group_size;
    return static_cast<std::size_t>(scope == ScaleScope::per_block ? k : row * groups_per_row() + k);
  }
};

struct AsymPlan {
  GroupGrid grid;
  int q_max = 15;
  std::vector<GroupParams> params;
};

namespace detail {

inline void require_finite_matrix(const Tensor& w, const char* what) {
  if (w.ndim() != 2) throw ShapeError(std::string(what) + " requires a 2-D tensor");
  validate_tensor("weight", w);
  for (float v : w.data)
    if (!std::isfinite(v)) throw DomainError(std::string(what) + ": tensor contains NaN or Inf");
}

}  // namespace detail

// Computes per-group parameters for asymmetric quantization with
// `q_max + 1` levels.
inline AsymPlan plan_asym(const Tensor& w, std::int64_t group_size, ScaleScope scope, int q_max) {
  detail::require_finite_matrix(w, "group quantization");
  if (group_size < 1) throw DomainError("group size must be >= 1");
  AsymPlan plan{{w.rows(), w.cols(), group_size, scope}, q_max, {}};
  const auto& g = plan.grid;
  plan.params.reserve(g.param_count());
  const std::int64_t n_groups = g.groups_per_row();
  auto range_of = [&](std::int64_t r0, std::int64_t r1, std::int64_t k) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    const std::int64_t c0 = k * group_size, c1 = c0 + g.group_width(k);
    for (std::int64_t r = r0; r < r1; ++r) {
      const float* row = w.data.data() + r * g.cols;
      for (std::int64_t c = c0; c < c1; ++c) {
        lo = std::min(lo, static_cast<double>(row[c]));
        hi = std::max(hi, static_cast<double>(row[c]));
      }
    }
    return asym_params_from_range(lo, hi, q_max);
  };
  if (scope == ScaleScope::per_block) {
    for (std::int64_t k = 0; k < n_groups; ++k) plan.params.push_back(range_of(0, g.rows, k));
  } else {
    for (std::int64_t r = 0; r < g.rows; ++r)
      for (std::int64_t k = 0; k < n_groups; ++k) plan.params.push_back(range_of(r, r + 1, k));
  }
  return plan;
}

// Reconstruction in double precision (before f32 storage).
inline std::vector<double> reconstruct_asym(const Tensor& w, const AsymPlan& plan) {
  const auto& g = plan.grid;
  std::vector<double> out(w.data.size());
  for (std::int64_t r = 0; r < g.rows; ++r) {
    for (std::int64_t c = 0; c < g.cols; ++c) {
      const auto idx = static_cast<std::size_t>(r * g.cols + c);
      const auto& p = plan.params[g.param_index(r, c)];
      const double v = w.data[idx];
      out[idx] = p.degenerate ? v : fake_quant(v, p.scale, p.zero_point, 0, plan.q_max);
    }
  }
  return out;
}

inline Tensor to_f32_tensor(const std::vector<std::int64_t>& shape, const std::vector<double>& values) {
  Tensor t;
  t.shape = shape;
  t.data.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) t.data[i] = static_cast<float>(values[i]);
  return t;
}

// Asymmetric per-group quantization with 2^bits levels.
inline Tensor quantize_tensor_asym(const Tensor& w, std::int64_t group_size, ScaleScope scope, int bits) {
  if (bits < 1 || bits > 16) throw DomainError("bit width must be in [1, 16]");
  const auto plan = plan_asym(w, group_size, scope, (1 << bits) - 1);
  return to_f32_tensor(w.shape, reconstruct_asym(w, plan));
}

inline Tensor quantize_tensor_int4(const Tensor& w, const Int4GroupScheme& scheme = {}) {
  const auto plan = plan_asym(w, scheme.group_size, scheme.scope, Int4GroupScheme::q_max);
  return to_f32_tensor(w.shape, reconstruct_asym(w, plan));
}

// Per-row symmetric scales s_j = max|W_j| / 127; 0 marks an all-zero
// (degenerate) row.
inline std::vector<double> int8_row_scales(const Tensor& w) {
  detail::require_finite_matrix(w, "INT8 quantization");
  std::vector<double> scales(static_cast<std::size_t>(w.rows()));
  for (std::int64_t r = 0; r < w.rows(); ++r) {
    double m = 0.0;
    for (std::int64_t c = 0; c < w.cols(); ++c) m = std::max(m, std::fabs(static_cast<double>(w.data[r * w.cols() + c])));
    scales[r] = m < kRangeEpsilon ? 0.0 : m / Int8ChannelScheme::q_max;
  }
  return scales;
}

inline std::vector<double> reconstruct_int8(const Tensor& w, const std::vector<double>& scales) {
  std::vector<double> out(w.data.size());
  const int q = Int8ChannelScheme::q_max;
  for (std::int64_t r = 0; r < w.rows(); ++r) {
    const double s = scales[r];
    for (std::int64_t c = 0; c < w.cols(); ++c) {
      const auto idx = static_cast<std::size_t>(r * w.cols() + c);
      out[idx] = s == 0.0 ? static_cast<double>(w.data[idx]) : fake_quant(w.data[idx], s, 0, -q, q);
    }
  }
  return out;
}

inline Tensor quantize_tensor_int8(const Tensor& w) {
  return to_f32_tensor(w.shape, reconstruct_int8(w, int8_row_scales(w)));
}

inline Tensor quantize_tensor(const Tensor& w, const QuantScheme& scheme) {
  if (const auto* s4 = std::get_if<Int4GroupScheme>(&scheme)) return quantize_tensor_int4(w, *s4);
  return quantize_tensor_int8(w);
}

// Replaces the selected tensors with their fake-quantized versions and
// passes everything else through. Tensors are independent, so the result is
// identical for any thread count.
inline TensorMap quantize_model(const TensorMap& tensors, const QuantSelector& selector, const QuantScheme& scheme,
                                unsigned threads = 1) {
  TensorMap out = tensors;
  const auto names = select_quantizable(tensors, selector);
  std::vector<Tensor> quantized(names.size());
  parallel_for(names.size(), threads, [&](std::size_t i) {
    try {
      quantized[i] = quantize_tensor(tensors.at(names[i]), scheme);
    } catch (const DomainError& e) {
      throw DomainError(names[i] + ": " + e.what());
    }
  });
  for (std::size_t i = 0; i < names.size(); ++i) out[names[i]] = std::move(quantized[i]);
  return out;
}

// Relative perplexity degradation in percent; negative when quantization
// happens to help.
inline double gap(double ppl_fp, double ppl_q) {
  if (!(ppl_fp > 0.0)) throw DomainError("full-precision perplexity must be positive");
  return 100.0 * (ppl_q - ppl_fp) / ppl_fp;
}

struct GapRecord {
  double ppl_fp = 0.0;
  double ppl_q = 0.0;
  double gap_pct = 0.0;
};

inline GapRecord make_gap_record(double ppl_fp, double ppl_q) { return {ppl_fp, ppl_q, gap(ppl_fp, ppl_q)}; }

}  // namespace quantaudit
