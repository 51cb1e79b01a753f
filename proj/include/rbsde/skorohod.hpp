#pragma once

// Deterministic discrete-time Skorohod problem: v = y + g with v >= 0, g
// nondecreasing from 0, and g only increasing when v = 0.

#include "rbsde/error.hpp"

#include <algorithm>
#include <span>
#include <string>
#include <vector>

namespace rbsde {

template <class T = double>
struct SkorohodSolution {
  std::vector<T> v;
  std::vector<T> g;
};

/// g(t) = max_{s<=t} max(-y(s), 0), v = y + g. Exact for integer or rational T.
template <class T = double>
SkorohodSolution<T> solve_skorohod(std::span<const T> y) {
  if (y.empty()) return {};
  if (y[0] < T(0)) throw Error(Errc::NegativeStart, "y(0) must be nonnegative");
  SkorohodSolution<T> out;
  out.v.reserve(y.size());
  out.g.reserve(y.size());
  T running = T(0);
  for (const T& value : y) {
    running = std::max(running, std::max(T(0) - value, T(0)));
    out.g.push_back(running);
    out.v.push_back(value + running);
  }
  return out;
}

template <class T = double>
SkorohodSolution<T> solve_skorohod(const std::vector<T>& y) {
  return solve_skorohod<T>(std::span<const T>(y));
}

/// Which Skorohod conditions a candidate (y, v, g) violates; empty when valid.
/// `tol` is 0 for exact arithmetic.
template <class T = double>
std::vector<std::string> skorohod_violations(std::span<const T> y, const SkorohodSolution<T>& s, T tol = T(0)) {
  std::vector<std::string> out;
  if (s.v.size() != y.size() || s.g.size() != y.size()) {
    out.emplace_back("length mismatch");
    return out;
  }
  auto abs = [](T a) { return a < T(0) ? T(0) - a : a; };
  for (std::size_t t = 0; t < y.size(); ++t) {
    if (abs(s.v[t] - (y[t] + s.g[t])) > tol) out.push_back("v != y + g at t=" + std::to_string(t));
    if (s.v[t] < T(0) - tol) out.push_back("v < 0 at t=" + std::to_string(t));
    if (t == 0 && abs(s.g[0]) > tol) out.emplace_back("g(0) != 0");
    if (t > 0) {
      const T dg = s.g[t] - s.g[t - 1];
      if (dg < T(0) - tol) out.push_back("g decreasing at t=" + std::to_string(t));
      if (abs(s.v[t] * dg) > tol) out.push_back("complementarity fails at t=" + std::to_string(t));
    }
  }
  return out;
}

}  // namespace rbsde
