#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace lstd {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Contract violation by the caller (bad shapes, invalid config, malformed files).
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Numerical failure during a computation that started from valid inputs.
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A transition Jacobian diagonal entry fell below the representable floor.
struct SingularJacobianError : NumericsError {
  using NumericsError::NumericsError;
};

/// Deterministic RNG. Normal variates come from Box-Muller over mt19937_64
/// uniforms rather than std::normal_distribution, whose output sequence is
/// implementation-defined; exports promise byte-identical files per seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]: keeps the log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  /// Filled row by row; the order is part of the determinism contract.
  Matrix normal_matrix(Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) m(r, c) = normal();
    return m;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return gen_() % n; }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValueError(msg);
}

}  // namespace lstd
