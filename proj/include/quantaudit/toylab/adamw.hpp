#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"

#include "quantaudit/error.hpp"

namespace quantaudit::toylab {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
      throw DomainError("adam betas must lie in (0, 1)");
    if (!(epsilon > 0.0)) throw DomainError("adam epsilon must be positive");
    if (weight_decay < 0.0) throw DomainError("weight decay must be non-negative");
  }
  friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

inline nlohmann::ordered_json to_json(const AdamWConfig& c) {
  nlohmann::ordered_json j;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["epsilon"] = c.epsilon;
  j["weight_decay"] = c.weight_decay;
  return j;
}

inline AdamWConfig adamw_from_json(const nlohmann::json& j) {
  AdamWConfig c;
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.validate();
  return c;
}

// Adam with bias-corrected moments and decoupled weight decay:
//   w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w
// Decay applies to every parameter. Moments start at zero.
template <class T>
class AdamW {
 public:
  AdamW(std::size_t n, AdamWConfig cfg) : cfg_(cfg), m_(n, T(0)), v_(n, T(0)) { cfg_.validate(); }

  void step(std::span<T> params, std::span<const T> grads, double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size()) throw ShapeError("optimizer size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(cfg_.epsilon);
    const T decay = static_cast<T>(lr * cfg_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const T g = grads[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g * g;
      const T w = params[i];
      params[i] = w - step_size * m_[i] / (std::sqrt(v_[i]) * inv_sqrt_bc2 + eps) - decay * w;
    }
  }

  std::int64_t steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::vector<T> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace quantaudit::toylab
