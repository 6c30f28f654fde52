#pragma once

#include <array>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <vector>

#include "hgn/sim.hpp"

namespace testing {

using hgn::sim::ParticleSystem;

inline ParticleSystem make_system(double L, std::initializer_list<std::array<double, 2>> q,
                                  std::initializer_list<std::array<double, 2>> v = {}) {
  ParticleSystem s;
  const int n = static_cast<int>(q.size());
  s.cell_size = L;
  s.masses = Eigen::VectorXd::Ones(n);
  s.positions.resize(n, 2);
  s.velocities = hgn::sim::Points::Zero(n, 2);
  int i = 0;
  for (const auto& p : q) {
    s.positions(i, 0) = p[0];
    s.positions(i, 1) = p[1];
    ++i;
  }
  i = 0;
  for (const auto& p : v) {
    s.velocities(i, 0) = p[0];
    s.velocities(i, 1) = p[1];
    ++i;
  }
  return s;
}

inline double rel_err(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Five-point central difference of f(offset) at offset 0.
template <class F>
double derivative(F&& f, double h = 1e-4) {
  return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
}

}  // namespace testing
