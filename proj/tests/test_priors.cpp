#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "lstd/priors.hpp"
#include "test_util.hpp"

using lstd::bind;
using lstd::Index;
using lstd::Matrix;
using lstd::Rng;
using lstd::SingularJacobianError;
using lstd::ValueError;
using lstd::ad::Tape;
using lstd::ad::Var;
using lstd::model::LatentPosterior;
using lstd::priors::FlowPrior;
using lstd::priors::kl_terms;
using lstd::priors::PriorConfig;
using lstd::testutil::rel_err;

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;

double std_normal_logpdf(double x) { return -0.5 * (kLogTwoPi + x * x); }

// Bank with small random output layers so the residual MLPs actually bend.
FlowPrior random_bank(int n, std::uint64_t seed) {
  PriorConfig cfg;
  cfg.n = n;
  cfg.hidden = 6;
  cfg.depth = 2;
  FlowPrior bank(cfg, seed);
  Rng rng(seed + 1000);
  for (auto& [name, p] : bank.params().items()) {
    if (name.find("out_w") != std::string::npos) p = 0.3 * rng.normal_matrix(p.rows(), p.cols());
    if (name.find("out_b") != std::string::npos) p = 0.1 * rng.normal_matrix(p.rows(), p.cols());
  }
  return bank;
}

LatentPosterior gaussian_posterior(double mu, Index steps, Index n_s, Index n_d, Rng& rng) {
  LatentPosterior p;
  p.mean_s = Matrix::Constant(steps, n_s, mu);
  p.logvar_s = Matrix::Zero(steps, n_s);
  p.mean_d = Matrix::Constant(steps, n_d, mu);
  p.logvar_d = Matrix::Zero(steps, n_d);
  p.eta_s = rng.normal_matrix(steps, n_s);
  p.eta_d = rng.normal_matrix(steps, n_d);
  p.samples_s = p.mean_s + p.eta_s;
  p.samples_d = p.mean_d + p.eta_d;
  return p;
}

}  // namespace

TEST_CASE("identity bank returns the current step as its noise estimate") {
  FlowPrior bank = FlowPrior::linear(1.0, {0.0, 0.0, 0.0});
  Rng rng(1);
  const Matrix z_t = rng.normal_matrix(5, 3);
  const Matrix z_prev = rng.normal_matrix(5, 3);
  CHECK(rel_err(bank.residuals(z_t, z_prev), z_t) < 1e-12);
}

TEST_CASE("AR(1)-inverse bank vanishes at the chain fixed point") {
  FlowPrior bank = FlowPrior::linear(1.0, {-1.0, -1.0});
  Rng rng(2);
  const Matrix z = rng.normal_matrix(4, 2);
  CHECK(bank.residuals(z, z).cwiseAbs().maxCoeff() < 1e-12);

  // Away from the fixed point the estimate is the innovation z_t - z_prev.
  const Matrix z2 = rng.normal_matrix(4, 2);
  CHECK(rel_err(bank.residuals(z2, z), z2 - z) < 1e-12);
}

TEST_CASE("a freshly initialized bank is the identity map") {
  PriorConfig cfg;
  cfg.n = 2;
  cfg.hidden = 8;
  cfg.depth = 3;
  FlowPrior bank(cfg, 77);
  Rng rng(3);
  const Matrix z_t = rng.normal_matrix(6, 2);
  const Matrix z_prev = rng.normal_matrix(6, 2);
  CHECK(rel_err(bank.residuals(z_t, z_prev), z_t) < 1e-12);
  CHECK(bank.jacobian_logdet(z_t.row(0), z_prev.row(0)) == doctest::Approx(0.0));
}

TEST_CASE("noise estimates depend on exactly one current-step coordinate") {
  FlowPrior bank = random_bank(3, 40);
  Rng rng(4);
  const Matrix z_t = rng.normal_matrix(1, 3);
  const Matrix z_prev = rng.normal_matrix(1, 3);

  for (Index i = 0; i < 3; ++i) {
    for (Index j = 0; j < 3; ++j) {
      if (i == j) continue;
      auto eps_i = [&](const Matrix& zt) { return bank.residuals(zt, z_prev)(0, i); };
      Matrix shifted = z_t;
      shifted(0, j) += 1e-4;
      const double up = eps_i(shifted);
      shifted(0, j) -= 2e-4;
      const double dn = eps_i(shifted);
      CHECK(std::abs(up - dn) / 2e-4 < 1e-8);  // structural zero
    }
  }
  // ... while the own coordinate does move it.
  Matrix bumped = z_t;
  bumped(0, 1) += 1e-4;
  CHECK(std::abs(bank.residuals(bumped, z_prev)(0, 1) - bank.residuals(z_t, z_prev)(0, 1)) >
        1e-6);
}

TEST_CASE("batched residuals equal per-row evaluation") {
  FlowPrior bank = random_bank(2, 41);
  Rng rng(5);
  const Matrix z_t = rng.normal_matrix(7, 2);
  const Matrix z_prev = rng.normal_matrix(7, 2);
  const Matrix batch = bank.residuals(z_t, z_prev);
  for (Index r = 0; r < 7; ++r) {
    CHECK(rel_err(batch.row(r), bank.residuals(z_t.row(r), z_prev.row(r))) < 1e-12);
  }
}

TEST_CASE("constant-diagonal bank has log-determinant n * ln 2") {
  FlowPrior bank = FlowPrior::linear(2.0, {-1.0, -1.0, -1.0});
  Rng rng(6);
  const Matrix z_t = rng.normal_matrix(1, 3);
  const Matrix z_prev = rng.normal_matrix(1, 3);
  CHECK(bank.jacobian_logdet(z_t, z_prev) == doctest::Approx(3.0 * std::log(2.0)));
}

TEST_CASE("triangular shortcut equals the dense Jacobian determinant") {
  FlowPrior bank = random_bank(2, 42);
  Rng rng(7);
  const Matrix z_t = rng.normal_matrix(1, 2);
  const Matrix z_prev = rng.normal_matrix(1, 2);

  // Assemble the full 4x4 Jacobian of (z_prev, z_t) -> (z_prev, eps) by
  // central differences and take its determinant directly.
  auto map = [&](const Matrix& u) {  // u is 1x4 = [z_prev, z_t]
    Matrix out(1, 4);
    out(0, 0) = u(0, 0);
    out(0, 1) = u(0, 1);
    Matrix zp(1, 2), zt(1, 2);
    zp << u(0, 0), u(0, 1);
    zt << u(0, 2), u(0, 3);
    out.block(0, 2, 1, 2) = bank.residuals(zt, zp);
    return out;
  };
  Matrix u(1, 4);
  u << z_prev(0, 0), z_prev(0, 1), z_t(0, 0), z_t(0, 1);
  Matrix jac(4, 4);
  const double h = 1e-5;
  for (Index c = 0; c < 4; ++c) {
    Matrix up = u, dn = u;
    up(0, c) += h;
    dn(0, c) -= h;
    jac.col(c) = ((map(up) - map(dn)) / (2.0 * h)).transpose();
  }
  const double dense = std::log(std::abs(jac.determinant()));
  CHECK(rel_err(bank.jacobian_logdet(z_t, z_prev), dense) < 1e-6);
}

TEST_CASE("identity-bank sequence log-probability factorizes exactly") {
  FlowPrior bank = FlowPrior::linear(1.0, {0.0});
  Rng rng(8);
  const Matrix z = rng.normal_matrix(2, 1);
  const double expected = std_normal_logpdf(z(0, 0)) + std_normal_logpdf(z(1, 0));
  CHECK(bank.transition_log_prob(z) == doctest::Approx(expected));
}

TEST_CASE("AR(1) bank log-probability matches the closed-form Gaussian chain") {
  const double c = 0.8;
  FlowPrior bank = FlowPrior::linear(1.0, {-c});
  Rng rng(9);
  const int T = 6;
  const Matrix z = rng.normal_matrix(T, 1);

  double expected = std_normal_logpdf(z(0, 0));
  for (int t = 1; t < T; ++t) expected += std_normal_logpdf(z(t, 0) - c * z(t - 1, 0));
  CHECK(rel_err(bank.transition_log_prob(z), expected) < 1e-6);
}

TEST_CASE("scaling-bank density integrates to one") {
  // r(a, b) = 2a: p(z1, z2) = N(z1) * N(2 z2) * 2. Midpoint quadrature on a
  // [-6, 6]^2 grid must recover total mass 1 within 2%.
  FlowPrior bank = FlowPrior::linear(2.0, {0.0});
  const double lo = -6.0, hi = 6.0, step = 0.05;
  const int cells = static_cast<int>((hi - lo) / step + 0.5);
  double mass = 0.0;
  Matrix z(2, 1);
  for (int i = 0; i < cells; ++i) {
    z(0, 0) = lo + (i + 0.5) * step;
    for (int j = 0; j < cells; ++j) {
      z(1, 0) = lo + (j + 0.5) * step;
      mass += std::exp(bank.transition_log_prob(z)) * step * step;
    }
  }
  CHECK(mass == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("near-zero diagonal partials raise a singularity error") {
  FlowPrior bank = FlowPrior::linear(1e-13, {0.0});
  Matrix z_t(1, 1), z_prev(1, 1);
  z_t << 0.4;
  z_prev << -0.2;
  CHECK_THROWS_AS(bank.jacobian_logdet(z_t, z_prev), SingularJacobianError);
  Matrix z(3, 1);
  z << 0.1, 0.2, 0.3;
  CHECK_THROWS_AS(bank.transition_log_prob(z), SingularJacobianError);
}

TEST_CASE("dimension mismatches are rejected") {
  FlowPrior bank = FlowPrior::linear(1.0, {0.0, 0.0});
  Rng rng(10);
  CHECK_THROWS_AS(bank.residuals(rng.normal_matrix(2, 3), rng.normal_matrix(2, 2)),
                  ValueError);
  CHECK_THROWS_AS(bank.residuals(rng.normal_matrix(2, 2), rng.normal_matrix(3, 2)),
                  ValueError);
  CHECK_THROWS_AS(bank.transition_log_prob(rng.normal_matrix(1, 2)), ValueError);  // T < 2
  CHECK_THROWS_AS(bank.transition_log_prob(rng.normal_matrix(4, 1)), ValueError);

  PriorConfig bad;
  bad.n = 0;
  CHECK_THROWS_AS(FlowPrior(bad, 0), ValueError);
}

TEST_CASE("flow graph exposes differentiable noise estimates and log-density") {
  FlowPrior bank = random_bank(2, 43);
  Rng rng(11);
  const int T = 4;
  const Matrix z = rng.normal_matrix(T, 2);

  Tape tape;
  auto bp = bind(tape, bank.params());
  std::vector<Var> rows;
  for (int t = 0; t < T; ++t) rows.push_back(tape.constant(z.row(t)));
  auto flow = bank.build_flow(tape, bp, rows);

  CHECK(tape.val(flow.eps).rows() == T - 1);
  CHECK(tape.val(flow.eps).cols() == 2);
  CHECK(rel_err(tape.val(flow.eps).row(0), bank.residuals(z.row(1), z.row(0))) < 1e-12);
  CHECK(rel_err(tape.scalar_val(flow.log_prob), bank.transition_log_prob(z)) < 1e-12);
  for (int t = 1; t < T; ++t) {
    CHECK(rel_err(tape.val(flow.log_det)(t - 1, 0),
                  bank.jacobian_logdet(z.row(t), z.row(t - 1))) < 1e-12);
  }

  // The log-density must respond to every step of the chain.
  for (int t = 0; t < T; ++t) {
    CHECK(tape.val(tape.gradient(flow.log_prob, rows[t])).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("log-density gradients w.r.t. chain inputs match finite differences") {
  FlowPrior bank = random_bank(2, 44);
  Rng rng(12);
  const int T = 3;
  const Matrix z = rng.normal_matrix(T, 2);

  Tape tape;
  auto bp = bind(tape, bank.params());
  std::vector<Var> rows;
  for (int t = 0; t < T; ++t) rows.push_back(tape.constant(z.row(t)));
  auto flow = bank.build_flow(tape, bp, rows);

  for (int t = 0; t < T; ++t) {
    Matrix got = tape.val(tape.gradient(flow.log_prob, rows[t]));
    Matrix ref = lstd::ad::finite_difference(
        [&](const Matrix& row) {
          Matrix zz = z;
          zz.row(t) = row;
          return bank.transition_log_prob(zz);
        },
        Matrix(z.row(t)));
    CAPTURE(t);
    CHECK(rel_err(got, ref) < 1e-4);
  }
}

TEST_CASE("log-determinant parameter gradients match finite differences") {
  // The per-step log-determinants are built from adjoints that are themselves
  // tape nodes; their parameter gradients are second-order quantities.
  FlowPrior bank = random_bank(1, 45);
  Rng rng(13);
  const Matrix z = rng.normal_matrix(2, 1);

  Tape tape;
  auto bp = bind(tape, bank.params());
  std::vector<Var> rows = {tape.constant(z.row(0)), tape.constant(z.row(1))};
  auto flow = bank.build_flow(tape, bp, rows);
  Var target = tape.sum(flow.log_det);
  auto grads = tape.gradients(target, bp.vars);

  for (std::size_t k = 0; k < bank.params().size(); ++k) {
    const std::string& name = bank.params().items()[k].first;
    CAPTURE(name);
    Matrix ref = lstd::ad::finite_difference(
        [&](const Matrix& p) {
          Matrix keep = bank.params().items()[k].second;
          bank.params().items()[k].second = p;
          const double v = bank.jacobian_logdet(z.row(1), z.row(0));
          bank.params().items()[k].second = keep;
          return v;
        },
        bank.params().items()[k].second);
    CHECK(rel_err(tape.val(grads[k]), ref) < 1e-3);
  }
}

TEST_CASE("matched posterior and prior give zero KL") {
  FlowPrior bank_s = FlowPrior::linear(1.0, {0.0});
  FlowPrior bank_d = FlowPrior::linear(1.0, {0.0});
  Rng rng(14);
  // Standard-normal posterior vs standard-normal factorized prior: the
  // single-sample estimate is exactly zero draw by draw.
  for (int rep = 0; rep < 100; ++rep) {
    LatentPosterior p = gaussian_posterior(0.0, 3, 1, 1, rng);
    auto [kl_s, kl_d] = kl_terms(p, bank_s, bank_d);
    CHECK(std::abs(kl_s) < 1e-10);
    CHECK(std::abs(kl_d) < 1e-10);
  }
}

TEST_CASE("shifted posterior KL estimates the closed-form mu^2/2 per dim-step") {
  FlowPrior bank_s = FlowPrior::linear(1.0, {0.0});
  FlowPrior bank_d = FlowPrior::linear(1.0, {0.0});
  const double mu = 0.7;
  const int steps = 3, reps = 10000;
  Rng rng(15);
  double sum = 0.0, sumsq = 0.0;
  for (int rep = 0; rep < reps; ++rep) {
    LatentPosterior p = gaussian_posterior(mu, steps, 1, 1, rng);
    auto [kl_s, kl_d] = kl_terms(p, bank_s, bank_d);
    sum += kl_s;
    sumsq += kl_s * kl_s;
  }
  const double mean = sum / reps;
  const double sd = std::sqrt(sumsq / reps - mean * mean);
  const double expected = steps * mu * mu / 2.0;
  CHECK(std::abs(mean - expected) < 3.0 * sd / std::sqrt(double(reps)));
  CHECK(mean > 0.0);  // true KL is positive, MC mean should reflect it
}

TEST_CASE("averaging k single-sample KL estimates shrinks variance like 1/k") {
  FlowPrior bank_s = FlowPrior::linear(1.0, {0.0});
  FlowPrior bank_d = FlowPrior::linear(1.0, {0.0});
  const double mu = 0.7;
  const int reps = 2000;
  Rng rng(16);

  auto variance_of_k_average = [&](int k) {
    double sum = 0.0, sumsq = 0.0;
    for (int rep = 0; rep < reps; ++rep) {
      double acc = 0.0;
      for (int s = 0; s < k; ++s) {
        LatentPosterior p = gaussian_posterior(mu, 2, 1, 1, rng);
        acc += kl_terms(p, bank_s, bank_d).first;
      }
      acc /= k;
      sum += acc;
      sumsq += acc * acc;
    }
    const double mean = sum / reps;
    return sumsq / reps - mean * mean;
  };

  const double v1 = variance_of_k_average(1);
  const double v10 = variance_of_k_average(10);
  CHECK(v1 / v10 > 6.0);
  CHECK(v1 / v10 < 16.0);
}
