#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "sdcl/error.hpp"
#include "sdcl/tensor.hpp"

namespace sdcl {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Parameters without a gradient are skipped
/// but still count toward the step number.
class Adam {
 public:
  Adam() = default;
  Adam(const std::vector<Tensor>& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step(std::vector<Tensor>& params) {
    if (params.size() != m_.size()) throw ShapeError("adam", "parameter list changed size");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) continue;
      auto g = params[i].grad();
      auto w = params[i].mutable_values();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        w[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

  void restore(std::uint64_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw ShapeError("adam", "moment layout mismatch");
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i].size() != m_[i].size() || v[i].size() != v_[i].size()) {
        throw ShapeError("adam", "moment size mismatch at parameter " + std::to_string(i));
      }
    }
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace sdcl
