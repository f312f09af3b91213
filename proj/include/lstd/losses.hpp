#pragma once

#include <span>

#include "lstd/autodiff.hpp"
#include "lstd/common.hpp"
#include "lstd/params.hpp"
#include "lstd/priors.hpp"

namespace lstd::losses {

struct LossWeights {
  double alpha = 0.1;   // smooth constraint
  double beta = 1.0;    // KL terms
  double gamma = 0.01;  // interrupted dependency constraint

  void validate() const;
};

struct LossBreakdown {
  double l_r = 0.0;    // reconstruction
  double l_p = 0.0;    // prediction
  double l_k_s = 0.0;  // KL, long block
  double l_k_d = 0.0;  // KL, short block
  double l_m = 0.0;    // smooth constraint
  double l_s = 0.0;    // interrupted dependency constraint
  double total = 0.0;
};

// --- value-level operations ---

double reconstruction_loss(const Matrix& x_recon, const Matrix& x_true);
double prediction_loss(const Matrix& x_pred, const Matrix& x_future);

/// Row-wise softmax of z z^T / sqrt(n): each row's attention over all steps.
Matrix association_matrix(const Matrix& z_block);

/// Frobenius distance between the association matrices of the first and last
/// floor(H/2) steps (odd H drops the middle step so both halves match).
double smooth_constraint(const Matrix& z_s_full);

/// L1 magnitude of the terminal noise estimate's sensitivities to steps
/// 1..H-2. With the steps given as a plain matrix they are free variables, so
/// only composition through enclosing computation (the model's transitions in
/// training) can make this nonzero.
double interrupted_dependency_constraint(const priors::FlowPrior& bank,
                                         const Matrix& z_d_full);

/// Fills in the weighted total; rejects non-finite or negative parts.
LossBreakdown total_loss(LossBreakdown parts, const LossWeights& w);

// --- graph-level builders (same definitions, differentiable) ---

ad::Var mse_graph(ad::Tape& tape, ad::Var pred, const Matrix& target);
ad::Var association_graph(ad::Tape& tape, ad::Var z_block);
ad::Var smooth_constraint_graph(ad::Tape& tape, ad::Var z_full);

/// z_rows are per-step 1 x n nodes (H >= 3). Sums |d eps_{H,i} / d z_{tau-1,j}|
/// over i, j and tau in 2..H-1, where the partials are reverse-mode adjoints
/// at the step nodes — paths through whatever generated the steps included.
ad::Var interrupted_dependency_graph(ad::Tape& tape, const priors::FlowPrior& bank,
                                     const BoundParams& bp, std::span<const ad::Var> z_rows);

/// Single-sample KL estimate log q - log p with q the diagonal Gaussian the
/// samples were drawn from (logvar is a graph node, eta the fixed draw).
ad::Var kl_term_graph(ad::Tape& tape, ad::Var logvar, const Matrix& eta, ad::Var log_prob);

}  // namespace lstd::losses
