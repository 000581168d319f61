#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mvdet/autodiff.hpp"

namespace mvdet {

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  std::string worst_input;  // which leaf held the worst coordinate
};

/// Compares analytic gradients against central finite differences,
/// (f(x+eps) - f(x-eps)) / 2eps, coordinate by coordinate over every leaf.
/// `loss_fn` must rebuild the graph from the current leaf values and return
/// a scalar; it must be deterministic (checked by double evaluation).
inline GradCheckReport grad_check(
    const std::function<Var(const std::vector<Var>&)>& loss_fn,
    const std::vector<Var>& leaves, double epsilon = 1e-5,
    double tolerance = 1e-4) {
  for (const auto& l : leaves)
    if (!l->value.all_finite())
      throw std::invalid_argument("grad_check: non-finite input");

  const double f0 = loss_fn(leaves)->value[0];
  const double f1 = loss_fn(leaves)->value[0];
  if (f0 != f1)
    throw std::runtime_error("grad_check: operation is not deterministic");

  for (auto& l : leaves) {
    l->ensure_grad();
    l->zero_grad();
  }
  Var loss = loss_fn(leaves);
  backward(loss);

  GradCheckReport report;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    for (std::size_t i = 0; i < leaf->value.numel(); ++i) {
      const double orig = leaf->value[i];
      leaf->value[i] = orig + epsilon;
      const double fp = loss_fn(leaves)->value[0];
      leaf->value[i] = orig - epsilon;
      const double fm = loss_fn(leaves)->value[0];
      leaf->value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double analytic = leaf->grad[i];
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = "leaf" + std::to_string(li) + "[" + std::to_string(i) + "]";
      }
    }
  }
  report.pass = report.max_rel_error < tolerance;
  return report;
}

/// Deterministic RNG helpers shared by tests and the synthetic generator.
struct Rng {
  std::mt19937_64 gen;
  explicit Rng(std::uint64_t seed) : gen(seed) {}
  double uniform(double lo, double hi) {
    // Portable: derived from raw 53-bit draws, not std::uniform_real_distribution.
    const double u = static_cast<double>(gen() >> 11) * (1.0 / 9007199254740992.0);
    return lo + u * (hi - lo);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller on portable uniforms.
    double u1 = uniform(1e-12, 1.0);
    double u2 = uniform(0.0, 1.0);
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) *
                      std::cos(2.0 * 3.14159265358979323846 * u2);
  }
  int uniform_int(int lo, int hi) {  // inclusive bounds
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<int>(gen() % span);
  }
  Tensor tensor(std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = uniform(lo, hi);
    return t;
  }
  Tensor tensor_normal(std::vector<int> shape, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = normal(0.0, stddev);
    return t;
  }
};

}  // namespace mvdet
