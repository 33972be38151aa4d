#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "srcaware/error.hpp"
#include "srcaware/rng.hpp"

namespace srcaware::nn {

template <class T>
struct Param {
  std::string name;
  std::string group;  // e.g. "backbone", "head", "encoder.2", "context"
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;

  std::size_t size() const { return value.size(); }
};

// Flat, ordered collection of named parameters. Models refer to entries by
// index, so copying a model copies its parameters.
template <class T>
class ParamStore {
 public:
  std::size_t add(std::string name, std::string group, std::vector<int> shape) {
    const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                          [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    params_.push_back(Param<T>{std::move(name), std::move(group), std::move(shape), std::vector<T>(n, T{0}),
                               std::vector<T>(n, T{0}), true});
    return params_.size() - 1;
  }

  Param<T>& operator[](std::size_t i) { return params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  const Param<T>& by_name(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p;
    throw Error("no parameter named " + name);
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += p.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T{0});
  }

  // Sets trainability for every parameter whose group starts with `prefix`.
  void set_trainable(const std::string& prefix, bool on) {
    for (auto& p : params_)
      if (p.group.rfind(prefix, 0) == 0) p.trainable = on;
  }
  void set_all_trainable(bool on) {
    for (auto& p : params_) p.trainable = on;
  }

  // FNV-1a over the raw bytes of every value, in order.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
      for (std::size_t i = 0; i < p.value.size() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    }
    return h;
  }

 private:
  std::vector<Param<T>> params_;
};

template <class T>
void init_normal(Param<T>& p, Rng& rng, double sigma) {
  for (auto& v : p.value) v = static_cast<T>(rng.normal(0.0, sigma));
}

// He-normal for a layer with `fan_in` inputs.
template <class T>
void init_he(Param<T>& p, Rng& rng, int fan_in) {
  init_normal(p, rng, std::sqrt(2.0 / fan_in));
}

template <class T>
void init_fill(Param<T>& p, T v) {
  std::fill(p.value.begin(), p.value.end(), v);
}

// Converts between scalar types with identical layout (used for float <-> double
// gradient checks and checkpoint loading).
template <class To, class From>
ParamStore<To> convert(const ParamStore<From>& from) {
  ParamStore<To> out;
  for (const auto& p : from) {
    const std::size_t i = out.add(p.name, p.group, p.shape);
    for (std::size_t k = 0; k < p.size(); ++k) out[i].value[k] = static_cast<To>(p.value[k]);
    out[i].trainable = p.trainable;
  }
  return out;
}

}  // namespace srcaware::nn
