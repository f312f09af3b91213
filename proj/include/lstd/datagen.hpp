#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lstd/common.hpp"

namespace lstd::datagen {

/// Configuration of the synthetic generative process: two latent blocks with
/// lagged transitions, Bernoulli interventions that regenerate the short-term
/// block from noise alone, and an invertible mixing map to observation space.
struct GenerativeConfig {
  int n_s = 2;
  int n_d = 2;
  int obs_dim = 4;  // defaults to n_s + n_d
  double theta = 0.05;
  int lag = 1;
  int T = 1000;
  std::uint64_t seed = 0;
  double noise_scale_s = 0.1;
  double noise_scale_d = 0.1;
  // Row i lists the parents of latent i within its block; empty means fully
  // connected. Stored row-major, size n_s*n_s / n_d*n_d when present.
  std::vector<bool> adjacency_s;
  std::vector<bool> adjacency_d;
  int mixing_layers = 2;
  double mixing_slope = 0.2;

  int n() const { return n_s + n_d; }
  /// Throws ValueError on any broken invariant. Noise scales of exactly zero
  /// are allowed (deterministic-dynamics diagnostics depend on them).
  void validate() const;
};

/// Invertible map R^n -> R^obs_dim built from column-orthonormal linear
/// layers alternating with a strictly monotone leaky pointwise nonlinearity.
/// The inverse is exact up to floating-point rounding.
class MixingFunction {
 public:
  /// layers == 0 yields the identity (requires obs_dim == n).
  MixingFunction(int n, int obs_dim, int layers, double slope, std::uint64_t seed);

  Eigen::VectorXd apply(const Eigen::VectorXd& z) const;
  Eigen::VectorXd invert(const Eigen::VectorXd& x) const;
  Matrix apply_rows(const Matrix& z) const;

  int input_dim() const { return n_; }
  int output_dim() const { return obs_dim_; }
  const std::vector<Matrix>& weights() const { return weights_; }

 private:
  int n_;
  int obs_dim_;
  double slope_;
  std::vector<Matrix> weights_;  // first may be rectangular, rest square
};

/// One latent block's transition family: per-dimension two-layer tanh
/// networks over the adjacency-masked previous step, fixed at construction.
/// Weights are structured so each dimension keeps strong positive dependence
/// on its own past value (the long-range signal the model must pick up).
struct TransitionNets {
  std::vector<Matrix> w1;        // per dim: hidden x n
  std::vector<Eigen::VectorXd> w2;  // per dim: hidden
  std::vector<std::vector<bool>> parents;

  /// Deterministic step of dimension i given the previous block (pre-noise).
  double step(int i, const Eigen::VectorXd& z_prev) const;
};

struct SyntheticDataset {
  Matrix x;     // T x obs_dim
  Matrix z_s;   // T x n_s
  Matrix z_d;   // T x n_d
  std::vector<bool> mask;  // length T, mask[0] = false
  GenerativeConfig config;
  // Noise draws behind each kept step; in-memory only (independence audits),
  // not part of the exported CSV contract.
  Matrix eps_s;
  Matrix eps_d;
};

MixingFunction make_mixing(const GenerativeConfig& config, std::uint64_t seed);

/// Bernoulli(theta) per step, then gap-3 thinning that keeps the earliest of
/// any conflicting pair; index 0 is always false.
std::vector<bool> sample_interventions(double theta, int T, std::uint64_t seed);

SyntheticDataset generate_series(const GenerativeConfig& config);

/// The short-term step function, exposed so the intervention semantics are
/// directly auditable: when intervened the value is measurable from the
/// step's own noise alone.
double short_term_step(const TransitionNets& nets, int i,
                       const Eigen::VectorXd& z_prev, double eps,
                       double noise_scale, bool intervened);

/// Writes data.csv, truth.csv and config.txt under `dir` (created if absent).
/// Values are printed with enough digits to round-trip IEEE doubles exactly.
void export_dataset(const SyntheticDataset& ds, const std::string& dir);

SyntheticDataset import_dataset(const std::string& dir);

/// Deterministic per-purpose seed derivation (splitmix64 over seed, stream).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Internal: transition nets for one block, deterministic given the seed.
/// own_persistence sets each dimension's dependence on its own past value;
/// the long block uses a higher value than the short block, which is what
/// makes the two blocks dynamically distinguishable.
TransitionNets make_transition_nets(int n, const std::vector<bool>& adjacency,
                                    std::uint64_t seed,
                                    double own_persistence = 0.9);

}  // namespace lstd::datagen
