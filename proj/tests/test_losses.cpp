#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "lstd/losses.hpp"
#include "test_util.hpp"

using lstd::bind;
using lstd::Index;
using lstd::Matrix;
using lstd::NumericsError;
using lstd::Rng;
using lstd::ValueError;
using lstd::ad::Tape;
using lstd::ad::Var;
using lstd::losses::association_matrix;
using lstd::losses::interrupted_dependency_constraint;
using lstd::losses::LossBreakdown;
using lstd::losses::LossWeights;
using lstd::losses::prediction_loss;
using lstd::losses::reconstruction_loss;
using lstd::losses::smooth_constraint;
using lstd::losses::total_loss;
using lstd::priors::FlowPrior;
using lstd::priors::PriorConfig;
using lstd::testutil::rel_err;

namespace {

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

Matrix random_orthogonal(Index n, Rng& rng) {
  const Matrix a = rng.normal_matrix(n, n);
  Eigen::HouseholderQR<Matrix> qr(a);
  return qr.householderQ();
}

}  // namespace

TEST_CASE("reconstruction and prediction losses are plain MSEs") {
  Rng rng(1);
  const Matrix x = rng.normal_matrix(5, 3);
  CHECK(reconstruction_loss(x, x) == 0.0);
  CHECK(prediction_loss(x, x) == 0.0);
  CHECK(reconstruction_loss(x.array() + 1.0, x) == doctest::Approx(1.0));

  const Matrix y = rng.normal_matrix(5, 3);
  double acc = 0.0;
  for (Index r = 0; r < 5; ++r)
    for (Index c = 0; c < 3; ++c) acc += (x(r, c) - y(r, c)) * (x(r, c) - y(r, c));
  acc /= 15.0;
  CHECK(rel_err(reconstruction_loss(x, y), acc) < 1e-9);
  CHECK(rel_err(prediction_loss(x, y), acc) < 1e-9);

  CHECK_THROWS_AS(reconstruction_loss(x, rng.normal_matrix(4, 3)), ValueError);
}

TEST_CASE("association matrices are row-stochastic softmaxes of the scaled Gram") {
  Matrix one = Matrix::Constant(1, 2, 3.7);
  Matrix a1 = association_matrix(one);
  CHECK(a1.rows() == 1);
  CHECK(a1(0, 0) == doctest::Approx(1.0));

  Matrix zeros = Matrix::Zero(4, 2);
  Matrix a0 = association_matrix(zeros);
  CHECK(rel_err(a0, Matrix::Constant(4, 4, 0.25)) < 1e-12);

  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Index m = 1 + static_cast<Index>(rng.below(6));
    const Index n = 1 + static_cast<Index>(rng.below(4));
    Matrix a = association_matrix(rng.normal_matrix(m, n));
    for (Index r = 0; r < m; ++r) {
      CHECK(std::abs(a.row(r).sum() - 1.0) < 1e-9);
      CHECK(a.row(r).minCoeff() > 0.0);
    }
  }

  // direct recomputation from the definition
  const Matrix z = rng.normal_matrix(3, 2);
  const Matrix logits = z * z.transpose() / std::sqrt(2.0);
  Matrix expected(3, 3);
  for (Index r = 0; r < 3; ++r) {
    const Eigen::ArrayXd e =
        (logits.row(r).transpose().array() - logits.row(r).maxCoeff()).exp();
    expected.row(r) = (e / e.sum()).matrix().transpose();
  }
  CHECK(rel_err(association_matrix(z), expected) < 1e-12);
}

TEST_CASE("smooth constraint compares the half-window association matrices") {
  Rng rng(3);
  // identical halves
  Matrix half = rng.normal_matrix(4, 2);
  Matrix same(8, 2);
  same << half, half;
  CHECK(smooth_constraint(same) == doctest::Approx(0.0));
  CHECK(smooth_constraint(Matrix::Zero(6, 3)) == doctest::Approx(0.0));

  // compositional oracle at H = 8
  const Matrix z = rng.normal_matrix(8, 2);
  const Matrix a1 = association_matrix(z.topRows(4));
  const Matrix a2 = association_matrix(z.bottomRows(4));
  CHECK(rel_err(smooth_constraint(z), (a1 - a2).norm()) < 1e-9);

  // odd lengths drop the middle step: rows {0,1,2} vs rows {4,5,6}
  const Matrix z7 = rng.normal_matrix(7, 2);
  const Matrix b1 = association_matrix(z7.topRows(3));
  const Matrix b2 = association_matrix(z7.bottomRows(3));
  CHECK(rel_err(smooth_constraint(z7), (b1 - b2).norm()) < 1e-9);

  CHECK_THROWS_AS(smooth_constraint(Matrix::Zero(1, 2)), ValueError);
}

TEST_CASE("smooth constraint is invariant under a shared orthogonal rotation") {
  Rng rng(4);
  const Matrix z = rng.normal_matrix(10, 3);
  const Matrix q = random_orthogonal(3, rng);
  CHECK(rel_err(smooth_constraint(z * q), smooth_constraint(z)) < 1e-9);
}

TEST_CASE("interrupted dependency vanishes when the steps are free variables") {
  Rng rng(5);
  // current-step-only bank
  FlowPrior identity = FlowPrior::linear(1.0, {0.0, 0.0});
  CHECK(interrupted_dependency_constraint(identity, rng.normal_matrix(6, 2)) == 0.0);

  // AR(1) inverse at H = 3: eps_3 = z_3 - c z_2 has no z_1 term
  FlowPrior ar = FlowPrior::linear(1.0, {-0.6});
  CHECK(interrupted_dependency_constraint(ar, rng.normal_matrix(3, 1)) == 0.0);

  // even a generic bank only reads the last two steps
  FlowPrior bank = random_bank(2, 50);
  CHECK(interrupted_dependency_constraint(bank, rng.normal_matrix(5, 2)) == 0.0);

  CHECK_THROWS_AS(interrupted_dependency_constraint(bank, rng.normal_matrix(2, 2)),
                  ValueError);  // needs H >= 3
}

TEST_CASE("interrupted dependency through a composed chain matches finite differences") {
  // When the steps are generated by learned maps, the terminal noise estimate
  // responds to early steps through the composition; the penalty must equal
  // the summed first-order sensitivities.
  const int H = 5, n = 2;
  FlowPrior bank = random_bank(n, 51);
  Rng rng(6);
  const Matrix z0 = rng.normal_matrix(1, n);
  const Matrix w = rng.normal_matrix(n, n);

  Tape tape;
  auto bp = bind(tape, bank.params());
  std::vector<Var> rows = {tape.constant(z0)};
  for (int t = 1; t < H; ++t)
    rows.push_back(tape.tanh(tape.matmul(rows.back(), tape.constant(w))));
  const double got =
      tape.scalar_val(lstd::losses::interrupted_dependency_graph(tape, bank, bp, rows));

  // Oracle: perturb one step's value, replay the chain downstream, and watch
  // the terminal noise estimates move.
  auto eps_h = [&](int pert_row, int pert_col, double delta) {
    std::vector<Matrix> zs(H);
    zs[0] = z0;
    for (int t = 1; t < H; ++t) zs[t] = (zs[t - 1] * w).array().tanh();
    zs[pert_row](0, pert_col) += delta;
    for (int t = pert_row + 1; t < H; ++t) zs[t] = (zs[t - 1] * w).array().tanh();
    return bank.residuals(zs[H - 1], zs[H - 2]);
  };
  const double h = 1e-5;
  double ref = 0.0;
  for (int r = 0; r <= H - 3; ++r) {
    for (int j = 0; j < n; ++j) {
      const Matrix up = eps_h(r, j, h);
      const Matrix dn = eps_h(r, j, -h);
      ref += ((up - dn) / (2.0 * h)).cwiseAbs().sum();
    }
  }
  CHECK(got > 0.01);  // the chain really transmits
  CHECK(rel_err(got, ref) < 1e-3);
}

TEST_CASE("non-finite interrupted-dependency partials name the offending indices") {
  const int H = 4, n = 1;
  FlowPrior bank = random_bank(n, 52);
  bank.params().at("prior.dim0.out_w") =
      Matrix::Constant(bank.config().hidden, 1, std::numeric_limits<double>::infinity());
  Rng rng(7);
  const Matrix z0 = rng.normal_matrix(1, n);
  const Matrix w = rng.normal_matrix(n, n);

  Tape tape;
  auto bp = bind(tape, bank.params());
  std::vector<Var> rows = {tape.constant(z0)};
  for (int t = 1; t < H; ++t) rows.push_back(tape.matmul(rows.back(), tape.constant(w)));
  CHECK_THROWS_WITH_AS(
      static_cast<void>(lstd::losses::interrupted_dependency_graph(tape, bank, bp, rows)),
      doctest::Contains("tau"), NumericsError);
}

TEST_CASE("total loss is the stated weighted sum") {
  LossWeights w0{0.0, 0.0, 0.0};
  LossBreakdown zero = total_loss({}, w0);
  CHECK(zero.total == 0.0);

  LossBreakdown ones;
  ones.l_r = ones.l_p = ones.l_k_s = ones.l_k_d = ones.l_m = ones.l_s = 1.0;
  CHECK(total_loss(ones, w0).total == doctest::Approx(2.0));

  LossBreakdown parts;
  parts.l_r = 0.5;
  parts.l_p = 0.3;
  parts.l_k_s = 0.1;
  parts.l_k_d = 0.2;
  parts.l_m = 0.4;
  parts.l_s = 0.6;
  LossWeights w{0.1, 1.0, 0.01};
  LossBreakdown out = total_loss(parts, w);
  CHECK(out.total == doctest::Approx(1.146).epsilon(1e-12));
  // exact arithmetic identity
  CHECK(out.total ==
        out.l_r + out.l_p + w.beta * (out.l_k_s + out.l_k_d) + w.alpha * out.l_m +
            w.gamma * out.l_s);

  parts.l_m = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(total_loss(parts, w), doctest::Contains("L_m"), ValueError);
  parts.l_m = -0.1;
  CHECK_THROWS_AS(total_loss(parts, w), ValueError);
  parts.l_m = 0.4;
  LossWeights bad{-0.1, 1.0, 0.0};
  CHECK_THROWS_AS(total_loss(parts, bad), ValueError);
}

TEST_CASE("graph-level losses agree with their value-level counterparts") {
  Rng rng(8);
  const Matrix pred = rng.normal_matrix(4, 3);
  const Matrix target = rng.normal_matrix(4, 3);
  const Matrix z = rng.normal_matrix(8, 2);

  Tape tape;
  Var pv = tape.constant(pred);
  CHECK(rel_err(tape.scalar_val(lstd::losses::mse_graph(tape, pv, target)),
                prediction_loss(pred, target)) < 1e-12);

  Var zv = tape.constant(z);
  CHECK(rel_err(tape.val(lstd::losses::association_graph(tape, zv)),
                association_matrix(z)) < 1e-12);
  CHECK(rel_err(tape.scalar_val(lstd::losses::smooth_constraint_graph(tape, zv)),
                smooth_constraint(z)) < 1e-12);
}

TEST_CASE("smooth-constraint gradients match finite differences") {
  Rng rng(9);
  const Matrix z = rng.normal_matrix(6, 2);
  Tape tape;
  Var zv = tape.constant(z);
  Var l = lstd::losses::smooth_constraint_graph(tape, zv);
  const Matrix got = tape.val(tape.gradient(l, zv));
  const Matrix ref = lstd::ad::finite_difference(
      [&](const Matrix& p) { return smooth_constraint(p); }, z);
  CHECK(rel_err(got, ref) < 1e-3);
}

TEST_CASE("interrupted-dependency parameter gradients match finite differences") {
  // The penalty is built from adjoints, so its parameter gradient exercises
  // second-order reverse mode end to end.
  const int H = 4, n = 1;
  FlowPrior bank = random_bank(n, 53);
  Rng rng(10);
  const Matrix z0 = rng.normal_matrix(1, n);
  const Matrix w = rng.normal_matrix(n, n);

  auto loss_value = [&]() {
    Tape t;
    auto bp = bind(t, bank.params());
    std::vector<Var> rows = {t.constant(z0)};
    for (int s = 1; s < H; ++s) rows.push_back(t.tanh(t.matmul(rows.back(), t.constant(w))));
    return t.scalar_val(lstd::losses::interrupted_dependency_graph(t, bank, bp, rows));
  };

  Tape tape;
  auto bp = bind(tape, bank.params());
  std::vector<Var> rows = {tape.constant(z0)};
  for (int s = 1; s < H; ++s)
    rows.push_back(tape.tanh(tape.matmul(rows.back(), tape.constant(w))));
  Var l = lstd::losses::interrupted_dependency_graph(tape, bank, bp, rows);
  auto grads = tape.gradients(l, bp.vars);

  for (std::size_t k = 0; k < bank.params().size(); ++k) {
    CAPTURE(bank.params().items()[k].first);
    Matrix ref = lstd::ad::finite_difference(
        [&](const Matrix& p) {
          Matrix keep = bank.params().items()[k].second;
          bank.params().items()[k].second = p;
          const double v = loss_value();
          bank.params().items()[k].second = keep;
          return v;
        },
        bank.params().items()[k].second);
    CHECK(rel_err(tape.val(grads[k]), ref) < 1e-3);
  }
}

TEST_CASE("KL graph term equals the value-level estimate") {
  FlowPrior bank = FlowPrior::linear(1.0, {0.0});
  Rng rng(11);
  const int steps = 3;
  lstd::model::LatentPosterior p;
  p.mean_s = Matrix::Constant(steps, 1, 0.4);
  p.logvar_s = Matrix::Constant(steps, 1, 0.2);
  p.eta_s = rng.normal_matrix(steps, 1);
  p.samples_s = lstd::model::reparameterize(p.mean_s, p.logvar_s, p.eta_s);
  p.mean_d = p.mean_s;
  p.logvar_d = p.logvar_s;
  p.eta_d = p.eta_s;
  p.samples_d = p.samples_s;
  auto [kl_value, kl_value_d] = lstd::priors::kl_terms(p, bank, bank);
  CHECK(kl_value == doctest::Approx(kl_value_d));

  Tape tape;
  auto bp = bind(tape, bank.params());
  std::vector<Var> rows;
  for (int t = 0; t < steps; ++t) rows.push_back(tape.constant(p.samples_s.row(t)));
  auto flow = bank.build_flow(tape, bp, rows);
  Var lv = tape.constant(p.logvar_s);
  Var kl = lstd::losses::kl_term_graph(tape, lv, p.eta_s, flow.log_prob);
  CHECK(rel_err(tape.scalar_val(kl), kl_value) < 1e-12);
}
