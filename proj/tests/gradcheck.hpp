#pragma once

// Central-difference gradient check over random trainable coordinates.

#include <cmath>
#include <functional>
#include <vector>

#include "srcaware/nn/params.hpp"
#include "srcaware/rng.hpp"

namespace gradcheck {

struct Result {
  int checked = 0;
  double max_rel = 0.0;
};

// `loss()` evaluates the loss from the current parameter values. `grads` holds
// the analytic gradient per parameter, same layout as `ps`.
inline Result check(srcaware::nn::ParamStore<double>& ps, const std::vector<std::vector<double>>& grads,
                    const std::function<double()>& loss, int coords, std::uint64_t seed, double h = 1e-5) {
  std::vector<std::pair<std::size_t, std::size_t>> pool;
  for (std::size_t k = 0; k < ps.size(); ++k)
    if (ps[k].trainable)
      for (std::size_t i = 0; i < ps[k].size(); ++i) pool.emplace_back(k, i);
  srcaware::Rng rng(seed);
  Result r;
  for (int n = 0; n < coords; ++n) {
    const auto [k, i] = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
    const double orig = ps[k].value[i];
    ps[k].value[i] = orig + h;
    const double lp = loss();
    ps[k].value[i] = orig - h;
    const double lm = loss();
    ps[k].value[i] = orig;
    const double num = (lp - lm) / (2 * h);
    const double ana = grads[k][i];
    const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-7});
    r.max_rel = std::max(r.max_rel, rel);
    ++r.checked;
  }
  return r;
}

inline std::vector<std::vector<double>> grads_of(const srcaware::nn::ParamStore<double>& ps) {
  std::vector<std::vector<double>> g;
  for (const auto& p : ps) g.push_back(p.grad);
  return g;
}

}  // namespace gradcheck
