#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace kalmeta {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Vec2 = Eigen::Vector2d;

// Input that violates a documented precondition (dimension mismatch, empty
// history, bad horizon).
struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Inconsistent configuration (non-diagonal transition in diagonal mode,
// negative rates, unknown preset).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failure inside an algorithm (singular innovation covariance,
// non-finite state). Carries a diagnostic describing where it happened.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidInput(msg);
}

constexpr double kPi = 3.14159265358979323846;

// Wrap an angle into (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a <= 0.0) a += 2.0 * kPi;
  return a - kPi;
}

}  // namespace kalmeta
