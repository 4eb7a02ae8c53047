#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "rawformer/nn/ops.hpp"

namespace rawformer::nn {

/// Adds named parameters to a ParamSet, drawing initial values from a single
/// seeded stream so that build order fixes every weight.
template <typename T>
class Initializer {
 public:
  Initializer(ParamSet<T>& params, std::uint64_t seed) : params_(params), rng_(seed) {}

  ParamSet<T>& params() noexcept { return params_; }
  std::mt19937_64& rng() noexcept { return rng_; }

  Parameter<T>& add(const std::string& name, Tensor<T> value) { return params_.add(name, std::move(value)); }

  /// Uniform in +-1/sqrt(fan_in) (Kaiming-uniform with a = sqrt(5)).
  Tensor<T> kaiming(Shape shape, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng_));
    return t;
  }

  /// Normal(0, std) redrawn outside +-2 std.
  Tensor<T> trunc_normal(Shape shape, double std) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Tensor<T> t(shape);
    for (auto& v : t.values()) {
      double x = dist(rng_);
      while (std::abs(x) > 2.0) x = dist(rng_);
      v = static_cast<T>(x * std);
    }
    return t;
  }

  /// Convolution kernel (cout, cin_per_group, kh, kw) plus zero bias.
  void conv(const std::string& name, int cout, int cin_per_group, int kh, int kw, bool bias = true) {
    add(name + ".weight", kaiming(Shape{cout, cin_per_group, kh, kw}, cin_per_group * kh * kw));
    if (bias) add(name + ".bias", Tensor<T>(Shape{1, cout, 1, 1}));
  }

  /// Pointwise projection with truncated-normal weights.
  void linear(const std::string& name, int cout, int cin, bool bias = true) {
    add(name + ".weight", trunc_normal(Shape{cout, cin, 1, 1}, 0.02));
    if (bias) add(name + ".bias", Tensor<T>(Shape{1, cout, 1, 1}));
  }

  /// Transposed convolution kernel (cin, cout, k, k).
  void deconv(const std::string& name, int cin, int cout, int k, bool bias = true) {
    add(name + ".weight", kaiming(Shape{cin, cout, k, k}, cin * k * k));
    if (bias) add(name + ".bias", Tensor<T>(Shape{1, cout, 1, 1}));
  }

  /// Affine normalisation parameters: unit scale, zero shift.
  void norm(const std::string& name, int channels) {
    add(name + ".weight", Tensor<T>(Shape{1, channels, 1, 1}, T(1)));
    add(name + ".bias", Tensor<T>(Shape{1, channels, 1, 1}));
  }

 private:
  ParamSet<T>& params_;
  std::mt19937_64 rng_;
};

/// Binds named parameters of one network onto a tape during a forward pass.
/// With `trainable == false` (or a frozen set) parameters enter as constants.
template <typename T>
class Binder {
 public:
  Binder(Tape<T>& tape, ParamSet<T>& params, bool trainable = true)
      : tape_(tape), params_(params), trainable_(trainable && !params.frozen) {}

  Tape<T>& tape() const noexcept { return tape_; }
  ParamSet<T>& params() const noexcept { return params_; }
  bool has(const std::string& name) const { return params_.contains(name); }
  Var<T> operator()(const std::string& name) const { return tape_.parameter(params_.at(name), trainable_); }
  Var<T> optional(const std::string& name) const { return has(name) ? (*this)(name) : Var<T>(); }

  Var<T> conv(const std::string& name, Var<T> x, Conv2dSpec spec = {}) const {
    ScopeGuard<T> scope(tape_, name);
    return conv2d(x, (*this)(name + ".weight"), optional(name + ".bias"), spec);
  }
  Var<T> deconv(const std::string& name, Var<T> x, int stride, int padding) const {
    ScopeGuard<T> scope(tape_, name);
    return conv_transpose2d(x, (*this)(name + ".weight"), optional(name + ".bias"), stride, padding);
  }
  Var<T> layer_norm(const std::string& name, Var<T> x) const {
    return nn::layer_norm(x, (*this)(name + ".weight"), (*this)(name + ".bias"));
  }
  Var<T> batch_norm(const std::string& name, Var<T> x) const {
    return nn::batch_norm(x, (*this)(name + ".weight"), (*this)(name + ".bias"));
  }

 private:
  Tape<T>& tape_;
  ParamSet<T>& params_;
  bool trainable_;
};

}  // namespace rawformer::nn
