#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "srcaware/error.hpp"

namespace srcaware::nn {

template <class T>
void require_finite(std::span<const T> z, const char* what) {
  for (T v : z)
    if (!std::isfinite(static_cast<double>(v))) throw Error(std::string(what) + ": non-finite value");
}

template <class T>
T log_sum_exp(std::span<const T> z) {
  const T m = *std::max_element(z.begin(), z.end());
  T s{0};
  for (T v : z) s += std::exp(v - m);
  return m + std::log(s);
}

template <class T>
std::vector<T> softmax(std::span<const T> z) {
  require_finite(z, "softmax");
  const T m = *std::max_element(z.begin(), z.end());
  std::vector<T> p(z.size());
  T s{0};
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - m));
  for (auto& v : p) v /= s;
  return p;
}

// -log softmax(logits)[label]. When `dlogits` is given it receives
// softmax(logits) - onehot(label).
template <class T>
T cross_entropy(std::span<const T> logits, int label, std::vector<T>* dlogits = nullptr) {
  require_finite(logits, "cross_entropy logits");
  require(label >= 0 && label < static_cast<int>(logits.size()), "cross_entropy label out of range");
  const T loss = log_sum_exp(logits) - logits[static_cast<std::size_t>(label)];
  if (dlogits) {
    *dlogits = softmax(logits);
    (*dlogits)[static_cast<std::size_t>(label)] -= T(1);
  }
  return loss;
}

// Binary convenience wrapper.
template <class T>
T loss_ce(const std::array<T, 2>& logits, int label) {
  return cross_entropy(std::span<const T>(logits), label);
}

inline constexpr double kSliceLossEpsilon = 1e-12;

// -log of the true-class scan probability, with the probability clamped below at eps.
template <class T>
T loss_slice(const std::array<T, 2>& scan_prob, int label, T eps = static_cast<T>(kSliceLossEpsilon)) {
  require(label == 0 || label == 1, "label must be 0 or 1");
  require(std::isfinite(static_cast<double>(scan_prob[0])) && std::isfinite(static_cast<double>(scan_prob[1])),
          "loss_slice: non-finite probability");
  return -std::log(std::max(scan_prob[static_cast<std::size_t>(label)], eps));
}

template <class T>
struct SliceLoss {
  T loss{};
  std::array<T, 2> scan_prob{};
  std::vector<std::array<T, 2>> slice_probs;
  std::vector<std::array<T, 2>> dlogits;  // dL/d(per-slice logits)
};

// Averages per-slice softmax probabilities into a scan probability, then takes
// the log of the average (not the average of logs).
template <class T>
SliceLoss<T> slice_loss_from_logits(std::span<const std::array<T, 2>> slice_logits, int label,
                                    T eps = static_cast<T>(kSliceLossEpsilon)) {
  require(!slice_logits.empty(), "slice loss needs at least one slice");
  SliceLoss<T> r;
  const T K = static_cast<T>(slice_logits.size());
  r.scan_prob = {T{0}, T{0}};
  for (const auto& z : slice_logits) {
    const auto p = softmax(std::span<const T>(z));
    r.slice_probs.push_back({p[0], p[1]});
    r.scan_prob[0] += p[0] / K;
    r.scan_prob[1] += p[1] / K;
  }
  r.loss = loss_slice(r.scan_prob, label, eps);
  r.dlogits.assign(slice_logits.size(), {T{0}, T{0}});
  const T py = r.scan_prob[static_cast<std::size_t>(label)];
  if (py > eps) {
    for (std::size_t t = 0; t < slice_logits.size(); ++t) {
      const auto& p = r.slice_probs[t];
      const T scale = -p[static_cast<std::size_t>(label)] / (py * K);
      for (int c = 0; c < 2; ++c)
        r.dlogits[t][static_cast<std::size_t>(c)] = scale * ((c == label ? T(1) : T(0)) - p[static_cast<std::size_t>(c)]);
    }
  }
  return r;
}

}  // namespace srcaware::nn
