#include "lstd/priors.hpp"

namespace lstd::priors {

namespace {

constexpr double kDiagFloor = 1e-12;
constexpr double kLogTwoPi = 1.8378770664093453;

std::string dim_key(const std::string& name, int i, const char* part) {
  return name + ".dim" + std::to_string(i) + "." + part;
}

}  // namespace

void PriorConfig::validate() const {
  require(n >= 1, "prior config: block width must be positive");
  require(hidden >= 1 && depth >= 1, "prior config: MLP widths must be positive");
  require(leaky_slope > 0.0 && leaky_slope < 1.0,
          "prior config: leaky slope must lie in (0, 1)");
}

FlowPrior::FlowPrior(PriorConfig cfg, std::uint64_t seed, std::string name)
    : cfg_(cfg), name_(std::move(name)) {
  cfg_.validate();
  Rng rng(seed);
  for (int i = 0; i < cfg_.n; ++i) {
    Index in = cfg_.n + 1;  // own coordinate + previous step block
    for (int l = 0; l < cfg_.depth; ++l) {
      params_.add(dim_key(name_, i, ("w" + std::to_string(l)).c_str()),
                  rng.normal_matrix(in, cfg_.hidden) / std::sqrt(static_cast<double>(in)));
      params_.add(dim_key(name_, i, ("b" + std::to_string(l)).c_str()),
                  Matrix::Zero(1, cfg_.hidden));
      in = cfg_.hidden;
    }
    // zero output layer: a fresh bank is the identity in its own coordinate
    params_.add(dim_key(name_, i, "out_w"), Matrix::Zero(cfg_.hidden, 1));
    params_.add(dim_key(name_, i, "out_b"), Matrix::Zero(1, 1));
  }
}

FlowPrior FlowPrior::linear(double own_coeff, const std::vector<double>& prev_coeffs,
                            double leaky_slope, std::string name) {
  PriorConfig cfg;
  cfg.n = static_cast<int>(prev_coeffs.size());
  cfg.hidden = 2;
  cfg.depth = 1;
  cfg.leaky_slope = leaky_slope;
  FlowPrior bank(cfg, 0, std::move(name));

  // Paired +/- hidden units: leaky(w) - leaky(-w) = (1 + slope) * w for every
  // w, so the MLP realizes the linear functional exactly despite the kink.
  for (int i = 0; i < cfg.n; ++i) {
    Matrix v = Matrix::Zero(cfg.n + 1, 1);
    v(0, 0) = own_coeff - 1.0;  // the skip connection supplies the missing 1
    v(1 + i, 0) = prev_coeffs[static_cast<std::size_t>(i)];
    Matrix w0(cfg.n + 1, 2);
    w0.col(0) = v;
    w0.col(1) = -v;
    bank.params_.at(dim_key(bank.name_, i, "w0")) = w0;
    Matrix out(2, 1);
    out << 1.0 / (1.0 + leaky_slope), -1.0 / (1.0 + leaky_slope);
    bank.params_.at(dim_key(bank.name_, i, "out_w")) = out;
  }
  return bank;
}

FlowPrior::Residuals FlowPrior::build_residuals(ad::Tape& tape, const BoundParams& bp,
                                                ad::Var z_cur, ad::Var z_prev) const {
  const Index rows = tape.val(z_cur).rows();
  require(tape.val(z_cur).cols() == cfg_.n && tape.val(z_prev).cols() == cfg_.n,
          "residuals: block width disagrees with the bank");
  require(tape.val(z_prev).rows() == rows, "residuals: step counts differ");

  ad::Var eps{}, diag{};
  for (int i = 0; i < cfg_.n; ++i) {
    ad::Var own = tape.slice_cols(z_cur, i, 1);
    ad::Var h = tape.concat_cols(own, z_prev);
    for (int l = 0; l < cfg_.depth; ++l) {
      h = tape.leaky_relu(
          tape.add(tape.matmul(h, bp.at(dim_key(name_, i, ("w" + std::to_string(l)).c_str()))),
                   tape.broadcast_row(bp.at(dim_key(name_, i, ("b" + std::to_string(l)).c_str())),
                                      rows)),
          cfg_.leaky_slope);
    }
    ad::Var m = tape.add(tape.matmul(h, bp.at(dim_key(name_, i, "out_w"))),
                         tape.broadcast_row(bp.at(dim_key(name_, i, "out_b")), rows));
    ad::Var eps_i = tape.add(own, m);
    // Rows are independent, so one backward pass from the column sum yields
    // every row's own-coordinate partial at once — as tape nodes, because the
    // log-determinant built from them must stay differentiable.
    ad::Var diag_i = tape.gradient(tape.sum(eps_i), own);

    const Matrix& d = tape.val(diag_i);
    for (Index r = 0; r < rows; ++r) {
      if (std::abs(d(r, 0)) < kDiagFloor) {
        throw SingularJacobianError("bank '" + name_ + "': diagonal partial below 1e-12 at row " +
                                    std::to_string(r) + ", dim " + std::to_string(i));
      }
    }
    eps = i == 0 ? eps_i : tape.concat_cols(eps, eps_i);
    diag = i == 0 ? diag_i : tape.concat_cols(diag, diag_i);
  }
  return {eps, diag};
}

FlowPrior::Flow FlowPrior::build_flow(ad::Tape& tape, const BoundParams& bp,
                                      std::span<const ad::Var> z_rows) const {
  require(z_rows.size() >= 2, "flow: need at least two steps");
  for (const ad::Var& row : z_rows) {
    require(tape.val(row).rows() == 1 && tape.val(row).cols() == cfg_.n,
            "flow: each step must be a 1 x n row");
  }
  ad::Var z_cur = z_rows[1];
  ad::Var z_prev = z_rows[0];
  for (std::size_t t = 2; t < z_rows.size(); ++t) {
    z_cur = tape.concat_rows(z_cur, z_rows[t]);
    z_prev = tape.concat_rows(z_prev, z_rows[t - 1]);
  }

  Flow f;
  Residuals r = build_residuals(tape, bp, z_cur, z_prev);
  f.eps = r.eps;
  f.diag = r.diag;
  f.log_det = tape.row_sum(tape.log(tape.abs(r.diag)));
  f.log_prob = tape.add(tape.sum(tape.std_normal_logpdf(z_rows[0])),
                        tape.add(tape.sum(tape.std_normal_logpdf(r.eps)),
                                 tape.sum(f.log_det)));
  return f;
}

Matrix FlowPrior::residuals(const Matrix& z_t, const Matrix& z_prev) const {
  ad::Tape tape;
  BoundParams bp = bind(tape, params_);
  Residuals r = build_residuals(tape, bp, tape.constant(z_t), tape.constant(z_prev));
  return tape.val(r.eps);
}

double FlowPrior::jacobian_logdet(const Matrix& z_t, const Matrix& z_prev) const {
  require(z_t.rows() == 1 && z_prev.rows() == 1, "jacobian_logdet: expects single rows");
  ad::Tape tape;
  BoundParams bp = bind(tape, params_);
  Residuals r = build_residuals(tape, bp, tape.constant(z_t), tape.constant(z_prev));
  return tape.val(r.diag).array().abs().log().sum();
}

double FlowPrior::transition_log_prob(const Matrix& z_seq) const {
  require(z_seq.rows() >= 2, "transition_log_prob: need at least two steps");
  require(z_seq.cols() == cfg_.n, "transition_log_prob: block width disagrees with the bank");
  ad::Tape tape;
  BoundParams bp = bind(tape, params_);
  std::vector<ad::Var> rows;
  rows.reserve(static_cast<std::size_t>(z_seq.rows()));
  for (Index t = 0; t < z_seq.rows(); ++t) rows.push_back(tape.constant(z_seq.row(t)));
  Flow f = build_flow(tape, bp, rows);
  return tape.scalar_val(f.log_prob);
}

std::pair<double, double> kl_terms(const model::LatentPosterior& posterior,
                                   const FlowPrior& bank_s, const FlowPrior& bank_d) {
  auto block_kl = [](const Matrix& samples, const Matrix& logvar, const Matrix& eta,
                     const FlowPrior& bank) {
    require(samples.rows() >= 2, "kl_terms: need at least two posterior steps");
    require(samples.cols() == bank.config().n,
            "kl_terms: posterior block width disagrees with the bank");
    // log q at the drawn point: (z - mu)^2 / sigma^2 is eta^2 by construction.
    const double log_q =
        (-0.5 * (kLogTwoPi + logvar.array() + eta.array().square())).sum();
    return log_q - bank.transition_log_prob(samples);
  };
  return {block_kl(posterior.samples_s, posterior.logvar_s, posterior.eta_s, bank_s),
          block_kl(posterior.samples_d, posterior.logvar_d, posterior.eta_d, bank_d)};
}

}  // namespace lstd::priors
