#pragma once

#include <cstddef>
#include <string>

namespace nxn {

enum class ActivationKind { leaky_relu, relu, identity };

// Non-decreasing, Lipschitz activation. The derivative at the kink is taken
// from the positive branch (slope 1).
struct Activation {
  ActivationKind kind = ActivationKind::leaky_relu;
  double slope = 0.01;     // negative-branch slope for leaky_relu
  double lipschitz = 1.0;  // L

  static Activation leaky_relu(double slope = 0.01) {
    return {ActivationKind::leaky_relu, slope, 1.0};
  }
  static Activation relu() { return {ActivationKind::relu, 0.0, 1.0}; }
  static Activation identity() { return {ActivationKind::identity, 1.0, 1.0}; }
  static Activation parse(const std::string& name);
  std::string name() const;

  double operator()(double x) const {
    switch (kind) {
      case ActivationKind::leaky_relu: return x >= 0.0 ? x : slope * x;
      case ActivationKind::relu: return x >= 0.0 ? x : 0.0;
      case ActivationKind::identity: return x;
    }
    return x;
  }
  double derivative(double x) const {
    switch (kind) {
      case ActivationKind::leaky_relu: return x >= 0.0 ? 1.0 : slope;
      case ActivationKind::relu: return x >= 0.0 ? 1.0 : 0.0;
      case ActivationKind::identity: return 1.0;
    }
    return 1.0;
  }
  // Antiderivative psi with psi(0) = 0; sum_i psi((Ax+b)_i) is the potential
  // whose negative gradient is the gradient-flow field.
  double antiderivative(double x) const {
    switch (kind) {
      case ActivationKind::leaky_relu: return x >= 0.0 ? 0.5 * x * x : 0.5 * slope * x * x;
      case ActivationKind::relu: return x >= 0.0 ? 0.5 * x * x : 0.0;
      case ActivationKind::identity: return 0.5 * x * x;
    }
    return 0.0;
  }
};

// Image tensor shape, laid out [channel][row][col].
struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t pixels() const { return height * width; }
  std::size_t size() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

}  // namespace nxn
