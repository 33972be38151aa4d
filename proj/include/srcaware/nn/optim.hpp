#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "srcaware/error.hpp"
#include "srcaware/nn/params.hpp"

namespace srcaware::nn {

enum class OptimizerKind { adam, sgd_momentum };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  throw Error("unknown optimizer '" + s + "'");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double lr_min = 1e-5;  // cosine floor
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;
  double clip_norm = 5.0;  // global gradient-norm clip; <= 0 disables
};

// Adam or momentum SGD with cosine learning-rate decay over `total_steps`.
// Parameters with trainable == false are never written.
template <class T>
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, const ParamStore<T>& params, long total_steps)
      : cfg_(cfg), total_steps_(std::max(1L, total_steps)) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  double learning_rate() const {
    const double t = std::min(1.0, static_cast<double>(step_) / static_cast<double>(total_steps_));
    return cfg_.lr_min + 0.5 * (cfg_.lr - cfg_.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
  }

  long steps_taken() const { return step_; }

  // Applies grad * grad_scale (e.g. 1/batch) and clears gradients.
  void step(ParamStore<T>& params, double grad_scale = 1.0) {
    require(params.size() == m_.size(), "optimizer/parameter store mismatch");
    double norm2 = 0.0;
    for (const auto& p : params)
      if (p.trainable)
        for (T g : p.grad) norm2 += static_cast<double>(g) * g * grad_scale * grad_scale;
    if (!std::isfinite(norm2)) throw Error("non-finite gradient (training diverged)");
    double clip = 1.0;
    if (cfg_.clip_norm > 0.0 && std::sqrt(norm2) > cfg_.clip_norm) clip = cfg_.clip_norm / std::sqrt(norm2);

    const double lr = learning_rate();
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      if (!p.trainable) continue;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]) * grad_scale * clip;
        if (cfg_.kind == OptimizerKind::adam) {
          m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
          v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
          p.value[i] -= static_cast<T>(lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps));
        } else {
          m[i] = cfg_.momentum * m[i] + g;
          p.value[i] -= static_cast<T>(lr * m[i]);
        }
      }
    }
    params.zero_grad();
  }

 private:
  OptimizerConfig cfg_;
  long total_steps_;
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace srcaware::nn
