#include "lstd/losses.hpp"

#include <cmath>

namespace lstd::losses {

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(what) + ": shape mismatch");
}

}  // namespace

void LossWeights::validate() const {
  require(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0,
          "loss weights must be non-negative");
}

double reconstruction_loss(const Matrix& x_recon, const Matrix& x_true) {
  check_same_shape(x_recon, x_true, "reconstruction_loss");
  return (x_recon - x_true).array().square().mean();
}

double prediction_loss(const Matrix& x_pred, const Matrix& x_future) {
  check_same_shape(x_pred, x_future, "prediction_loss");
  return (x_pred - x_future).array().square().mean();
}

Matrix association_matrix(const Matrix& z_block) {
  require(z_block.rows() >= 1, "association_matrix: empty block");
  ad::Tape tape;
  return tape.val(association_graph(tape, tape.constant(z_block)));
}

double smooth_constraint(const Matrix& z_s_full) {
  ad::Tape tape;
  return tape.scalar_val(smooth_constraint_graph(tape, tape.constant(z_s_full)));
}

double interrupted_dependency_constraint(const priors::FlowPrior& bank,
                                         const Matrix& z_d_full) {
  require(z_d_full.cols() == bank.config().n,
          "interrupted_dependency_constraint: block width disagrees with the bank");
  ad::Tape tape;
  BoundParams bp = bind(tape, bank.params());
  std::vector<ad::Var> rows;
  rows.reserve(static_cast<std::size_t>(z_d_full.rows()));
  for (Index t = 0; t < z_d_full.rows(); ++t) rows.push_back(tape.constant(z_d_full.row(t)));
  return tape.scalar_val(interrupted_dependency_graph(tape, bank, bp, rows));
}

LossBreakdown total_loss(LossBreakdown parts, const LossWeights& w) {
  w.validate();
  const struct {
    const char* name;
    double value;
  } named[] = {{"L_R", parts.l_r},   {"L_P", parts.l_p}, {"L_K_s", parts.l_k_s},
               {"L_K_d", parts.l_k_d}, {"L_m", parts.l_m}, {"L_s", parts.l_s}};
  for (const auto& term : named) {
    require(std::isfinite(term.value),
            std::string("total_loss: non-finite term ") + term.name);
  }
  require(parts.l_r >= 0.0 && parts.l_p >= 0.0 && parts.l_m >= 0.0 && parts.l_s >= 0.0,
          "total_loss: squared/absolute terms must be non-negative");
  parts.total = parts.l_r + parts.l_p + w.beta * (parts.l_k_s + parts.l_k_d) +
                w.alpha * parts.l_m + w.gamma * parts.l_s;
  return parts;
}

ad::Var mse_graph(ad::Tape& tape, ad::Var pred, const Matrix& target) {
  return tape.mean(tape.square(tape.sub(pred, tape.constant(target))));
}

ad::Var association_graph(ad::Tape& tape, ad::Var z_block) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(tape.val(z_block).cols()));
  ad::Var gram = tape.matmul(z_block, tape.transpose(z_block));
  return tape.softmax_rows(tape.mul_scalar(gram, scale));
}

ad::Var smooth_constraint_graph(ad::Tape& tape, ad::Var z_full) {
  const Index h = tape.val(z_full).rows();
  require(h >= 2, "smooth_constraint: need at least two steps");
  const Index m = h / 2;
  ad::Var first = tape.slice_rows(z_full, 0, m);
  ad::Var last = tape.slice_rows(z_full, h - m, m);
  ad::Var diff = tape.sub(association_graph(tape, first), association_graph(tape, last));
  return tape.sqrt(tape.sum(tape.square(diff)));
}

ad::Var interrupted_dependency_graph(ad::Tape& tape, const priors::FlowPrior& bank,
                                     const BoundParams& bp,
                                     std::span<const ad::Var> z_rows) {
  const std::size_t h = z_rows.size();
  require(h >= 3, "interrupted_dependency: need at least three steps");
  const int n = bank.config().n;

  auto res = bank.build_residuals(tape, bp, z_rows[h - 1], z_rows[h - 2]);
  std::span<const ad::Var> targets = z_rows.subspan(0, h - 2);  // tau-1 for tau in 2..H-1

  ad::Var total = tape.scalar(0.0);
  for (int i = 0; i < n; ++i) {
    std::vector<ad::Var> partials =
        tape.gradients(tape.entry(res.eps, 0, i), targets);
    for (std::size_t r = 0; r < partials.size(); ++r) {
      const Matrix& p = tape.val(partials[r]);
      if (!p.allFinite()) {
        Index j = 0;
        while (j < p.cols() && std::isfinite(p(0, j))) ++j;
        throw NumericsError("interrupted_dependency: non-finite partial at i=" +
                            std::to_string(i) + ", j=" + std::to_string(j) +
                            ", tau=" + std::to_string(r + 2));
      }
      total = tape.add(total, tape.sum(tape.abs(partials[r])));
    }
  }
  return total;
}

ad::Var kl_term_graph(ad::Tape& tape, ad::Var logvar, const Matrix& eta,
                      ad::Var log_prob) {
  check_same_shape(tape.val(logvar), eta, "kl_term_graph");
  ad::Var sq = tape.constant(eta.array().square().matrix());
  ad::Var log_q = tape.mul_scalar(
      tape.sum(tape.add(tape.add_scalar(logvar, kLogTwoPi), sq)), -0.5);
  return tape.sub(log_q, log_prob);
}

}  // namespace lstd::losses
