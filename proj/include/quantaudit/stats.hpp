#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "quantaudit/error.hpp"
#include "quantaudit/weightstore.hpp"

namespace quantaudit {

// Streaming central moments up to order four. merge() uses the pairwise
// update of Pebay (2008), so partial accumulators over disjoint chunks can
// be combined; a fixed combine order gives bit-identical results.
class MomentAccumulator {
 public:
  void push(double x) {
    const double n1 = static_cast<double>(n_);
    ++n_;
    const double n = static_cast<double>(n_);
    const double delta = x - mean_;
    const double delta_n = delta / n;
    const double delta_n2 = delta_n * delta_n;
    const double term1 = delta * delta_n * n1;
    mean_ += delta_n;
    m4_ += term1 * delta_n2 * (n * n - 3 * n + 3) + 6 * delta_n2 * m2_ - 4 * delta_n * m3_;
    m3_ += term1 * delta_n * (n - 2) - 3 * delta_n * m2_;
    m2_ += term1;
  }

  // Two-pass central moments of the block, then a merge. More accurate than
  // pushing one value at a time, and exact on small-integer samples.
  template <class T>
  void push_all(std::span<const T> xs) {
    if (xs.empty()) return;
    MomentAccumulator b;
    b.n_ = xs.size();
    double sum = 0.0;
    for (T x : xs) sum += static_cast<double>(x);
    b.mean_ = sum / static_cast<double>(b.n_);
    for (T x : xs) {
      const double d = static_cast<double>(x) - b.mean_, d2 = d * d;
      b.m2_ += d2;
      b.m3_ += d2 * d;
      b.m4_ += d2 * d2;
    }
    merge(b);
  }

  void merge(const MomentAccumulator& o) {
    if (o.n_ == 0) return;
    if (n_ == 0) {
      *this = o;
      return;
    }
    const double na = static_cast<double>(n_), nb = static_cast<double>(o.n_);
    const double n = na + nb;
    const double delta = o.mean_ - mean_;
    const double d2 = delta * delta, d3 = d2 * delta, d4 = d2 * d2;
    const double m2 = m2_ + o.m2_ + d2 * na * nb / n;
    const double m3 = m3_ + o.m3_ + d3 * na * nb * (na - nb) / (n * n) + 3.0 * delta * (na * o.m2_ - nb * m2_) / n;
    const double m4 = m4_ + o.m4_ + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n) +
                      6.0 * d2 * (na * na * o.m2_ + nb * nb * m2_) / (n * n) + 4.0 * delta * (na * o.m3_ - nb * m3_) / n;
    mean_ = (na * mean_ + nb * o.mean_) / n;
    m2_ = m2;
    m3_ = m3;
    m4_ = m4;
    n_ += o.n_;
  }

  std::uint64_t count() const { return n_; }
  double mean() const { return mean_; }
  // Population (biased) variance.
  double variance() const { return n_ == 0 ? 0.0 : m2_ / static_cast<double>(n_); }
  double m2() const { return m2_; }
  double m4() const { return m4_; }

 private:
  std::uint64_t n_ = 0;
  double mean_ = 0.0, m2_ = 0.0, m3_ = 0.0, m4_ = 0.0;
};

struct KurtosisResult {
  double excess_kurtosis = 0.0;
  std::uint64_t n = 0;
  double mean = 0.0;
  double variance = 0.0;
};

inline KurtosisResult kurtosis_from(const MomentAccumulator& acc) {
  if (acc.count() < 4) throw DomainError("excess kurtosis needs at least 4 samples");
  if (!(acc.m2() > 0.0)) throw DomainError("excess kurtosis is undefined for zero variance");
  const double n = static_cast<double>(acc.count());
  return {n * acc.m4() / (acc.m2() * acc.m2()) - 3.0, acc.count(), acc.mean(), acc.variance()};
}

// Population excess kurtosis m4 / m2^2 - 3.
template <class T>
KurtosisResult excess_kurtosis(std::span<const T> samples) {
  MomentAccumulator acc;
  acc.push_all(samples);
  return kurtosis_from(acc);
}

inline KurtosisResult excess_kurtosis(const std::vector<double>& samples) {
  return excess_kurtosis(std::span<const double>(samples));
}

// Kurtosis of several tensors pooled as one sample, in the order given.
inline KurtosisResult pooled_kurtosis(const std::vector<std::span<const float>>& parts) {
  MomentAccumulator total;
  for (const auto& p : parts) {
    MomentAccumulator acc;
    acc.push_all(p);
    total.merge(acc);
  }
  return kurtosis_from(total);
}

// Kurtosis of all selected weight elements pooled, tensors combined in name
// order.
inline KurtosisResult pooled_weight_kurtosis(const TensorMap& tensors, const QuantSelector& selector) {
  const auto names = select_quantizable(tensors, selector);
  if (names.empty()) throw DomainError("kurtosis selection is empty");
  std::vector<std::span<const float>> parts;
  for (const auto& n : names) parts.emplace_back(tensors.at(n).data);
  return pooled_kurtosis(parts);
}

inline double mean_of(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

// Sample (n - 1) variance.
inline double sample_variance(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return s / static_cast<double>(xs.size() - 1);
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DomainError("pearson: length mismatch");
  if (x.size() < 2) throw DomainError("pearson: need at least 2 pairs");
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw DomainError("pearson: input is constant");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(std::span<const double>(x), std::span<const double>(y));
}

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) return h;
  }
  return h;
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw DomainError("incomplete beta requires a, b > 0");
  if (x < 0.0 || x > 1.0) throw DomainError("incomplete beta requires x in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

// P(|T| >= |t|) for Student's t with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw DomainError("degrees of freedom must be positive");
  if (std::isinf(t)) return 0.0;
  const double x = df / (df + t * t);
  return std::clamp(regularized_incomplete_beta(df / 2.0, 0.5, x), 0.0, 1.0);
}

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_two_sided = 1.0;
  double mean_a = 0.0, mean_b = 0.0;
  double var_a = 0.0, var_b = 0.0;  // sample variances
  std::size_t n_a = 0, n_b = 0;
};

// Two-sample t-test without assuming equal variances.
inline WelchResult welch_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw DomainError("welch_t needs at least 2 samples per group");
  WelchResult r;
  r.n_a = a.size();
  r.n_b = b.size();
  r.mean_a = mean_of(a);
  r.mean_b = mean_of(b);
  r.var_a = sample_variance(a);
  r.var_b = sample_variance(b);
  if (!(r.var_a > 0.0) || !(r.var_b > 0.0)) throw DomainError("welch_t requires positive variance in both samples");
  const double sa = r.var_a / static_cast<double>(r.n_a);
  const double sb = r.var_b / static_cast<double>(r.n_b);
  const double se2 = sa + sb;
  r.t = (r.mean_a - r.mean_b) / std::sqrt(se2);
  r.df = se2 * se2 / (sa * sa / static_cast<double>(r.n_a - 1) + sb * sb / static_cast<double>(r.n_b - 1));
  r.p_two_sided = student_t_two_sided_p(r.t, r.df);
  return r;
}

inline WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b) {
  return welch_t(std::span<const double>(a), std::span<const double>(b));
}

struct WinRecord {
  std::int64_t wins = 0;
  std::int64_t ties = 0;
  std::int64_t total = 0;
  std::int64_t losses() const { return total - wins - ties; }
};

// Counts cross pairs (c, b) where the challenger is strictly better. Ties
// are never wins.
inline WinRecord pairwise_wins(std::span<const double> challenger, std::span<const double> baseline,
                               bool lower_is_better = true) {
  WinRecord r;
  for (double c : challenger) {
    for (double b : baseline) {
      ++r.total;
      if (c == b)
        ++r.ties;
      else if (lower_is_better ? c < b : c > b)
        ++r.wins;
    }
  }
  return r;
}

inline WinRecord pairwise_wins(const std::vector<double>& challenger, const std::vector<double>& baseline,
                               bool lower_is_better = true) {
  return pairwise_wins(std::span<const double>(challenger), std::span<const double>(baseline), lower_is_better);
}

}  // namespace quantaudit
