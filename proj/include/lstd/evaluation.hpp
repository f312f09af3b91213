#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lstd/autodiff.hpp"
#include "lstd/common.hpp"
#include "lstd/datagen.hpp"
#include "lstd/model.hpp"
#include "lstd/params.hpp"
#include "lstd/priors.hpp"

namespace lstd::evaluation {

/// Held-out R^2 of each target column predicted from the full input block by
/// kernel ridge regression (radial-basis kernel with bandwidth = median
/// pairwise training distance, ridge 1e-3), fit on a seeded 70% split and
/// scored on the remaining 30%. Large splits are subsampled (3000 train, 1500
/// test rows) to bound the solve. A variance-free input block or target
/// column scores 0 for the affected dims, with a warning on stderr.
Eigen::VectorXd block_r2(const Matrix& inputs, const Matrix& targets,
                         std::uint64_t seed = 0);

/// Mean absolute Pearson correlation under the best one-to-one assignment of
/// estimated to true dimensions (exhaustive over assignments; dimension count
/// is capped at 10). Zero-variance pairs contribute 0.
double mcc(const Matrix& z_est, const Matrix& z_true);

/// Per-step L1 sensitivity of the final step's noise estimate to every step
/// of an explicit latent chain: entry t is sum_{i,j} of
/// |d eps_{last,i} / d z_rows[t](0,j)|, with the adjoints following every
/// path through whatever computation produced the rows. The final entry is
/// the own-step sensitivity (the Jacobian diagonal); a chain that truly
/// forgets shows decaying entries before it.
Eigen::VectorXd step_sensitivity_trace(ad::Tape& tape, const priors::FlowPrior& bank,
                                       const BoundParams& bank_params,
                                       std::span<const ad::Var> z_rows);

/// The trace over a model-processed window (horizon x obs_dim): posterior-mean
/// path on the lookback rows, learned transitions for the rest, short-block
/// noise bank at the final step. Length horizon.
Eigen::VectorXd intervention_gradient_trace(const model::Model& net,
                                            const priors::FlowPrior& prior_d,
                                            const Matrix& window);

/// Per-step latent estimates for a series: the model encodes sliding lookback
/// windows on the posterior-mean path and keeps the final step of each, so
/// row r of the outputs estimates the latents at time `t[r]`.
struct EncodedSeries {
  Matrix z_s;             // rows x n_s
  Matrix z_d;             // rows x n_d
  std::vector<Index> t;   // absolute time index per row
};

EncodedSeries encode_series(const model::Model& net, const Matrix& x, Index stride = 1,
                            Index max_rows = 6000);

struct IdentifiabilityReport {
  double r2_within_long = 0.0;   // true long dims from the estimated long block
  double r2_within_short = 0.0;  // true short dims from the estimated short block
  double r2_cross_ls = 0.0;      // true short dims from the estimated long block
  double r2_cross_sl = 0.0;      // true long dims from the estimated short block
  double mcc_long = 0.0;
  double mcc_short = 0.0;
  Index rows = 0;                // encoded rows the scores were computed on
};

struct EvalOptions {
  Index stride = 3;       // window thinning before encoding
  Index max_rows = 6000;  // cap on encoded rows
  std::uint64_t seed = 0; // split seed for the R^2 regressor
};

/// Encodes the dataset's observations and scores the estimated blocks against
/// the generative ground truth: within- and cross-block held-out R^2 plus the
/// component-level correlation after optimal assignment.
IdentifiabilityReport identifiability_report(const model::Model& net,
                                             const datagen::SyntheticDataset& ds,
                                             const EvalOptions& opt = {});

}  // namespace lstd::evaluation
