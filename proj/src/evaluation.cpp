#include "lstd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <vector>

namespace lstd::evaluation {

namespace {

constexpr double kRidge = 1e-3;
constexpr double kVarFloor = 1e-12;  // a column with less spread is "constant"
constexpr Index kTrainCap = 3000;    // kernel solve cost bound
constexpr Index kTestCap = 1500;
constexpr Index kBandwidthCap = 2000;  // rows entering the median distance

std::vector<Index> shuffled_indices(Index n, std::uint64_t seed) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  Rng rng(seed);
  for (Index i = n - 1; i > 0; --i) {
    const Index j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

Matrix gather_rows(const Matrix& m, const std::vector<Index>& idx, Index first,
                   Index count) {
  Matrix out(count, m.cols());
  for (Index r = 0; r < count; ++r)
    out.row(r) = m.row(idx[static_cast<std::size_t>(first + r)]);
  return out;
}

double median_pairwise_distance(const Matrix& rows) {
  const Index n = std::min(rows.rows(), kBandwidthCap);
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(n - 1) / 2);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) d.push_back((rows.row(i) - rows.row(j)).norm());
  if (d.empty()) return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid < 1e-12 ? 1.0 : *mid;
}

// Sum of Gaussians at half/median/double bandwidth: still positive definite,
// but fits both the dense center and the sparse tails of skewed feature
// distributions better than any single scale.
Matrix rbf_kernel(const Matrix& a, const Matrix& b, double bandwidth) {
  constexpr double kScales[] = {0.5, 1.0, 2.0};
  double inv[3];
  for (int m = 0; m < 3; ++m) {
    const double h = kScales[m] * bandwidth;
    inv[m] = 1.0 / (2.0 * h * h);
  }
  Matrix k(a.rows(), b.rows());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.rows(); ++j) {
      const double d2 = (a.row(i) - b.row(j)).squaredNorm();
      k(i, j) =
          (std::exp(-d2 * inv[0]) + std::exp(-d2 * inv[1]) + std::exp(-d2 * inv[2])) /
          3.0;
    }
  return k;
}

double column_std(const Matrix& m, Index c) {
  const double mean = m.col(c).mean();
  return std::sqrt((m.col(c).array() - mean).square().mean());
}

}  // namespace

Eigen::VectorXd block_r2(const Matrix& inputs, const Matrix& targets,
                         std::uint64_t seed) {
  require(inputs.rows() == targets.rows(), "block_r2: row count mismatch");
  require(inputs.cols() >= 1 && targets.cols() >= 1, "block_r2: empty block");
  const Index t = inputs.rows();
  const Index k = inputs.cols();
  require(t > 10 * (k + 1), "block_r2: need more than 10*(input dims + 1) rows");

  Eigen::VectorXd out = Eigen::VectorXd::Zero(targets.cols());

  bool degenerate = true;
  for (Index c = 0; c < k && degenerate; ++c)
    if (column_std(inputs, c) >= kVarFloor) degenerate = false;
  if (degenerate) {
    std::cerr << "warning: block_r2: input block has no variance; scoring 0\n";
    return out;
  }

  const std::vector<Index> idx = shuffled_indices(t, seed);
  const Index train_split = (7 * t) / 10;
  const Index n_train = std::min(train_split, kTrainCap);
  const Index n_test = std::min(t - train_split, kTestCap);

  Matrix x_train = gather_rows(inputs, idx, 0, n_train);
  const Matrix y_train = gather_rows(targets, idx, 0, n_train);
  Matrix x_test = gather_rows(inputs, idx, train_split, n_test);
  const Matrix y_test = gather_rows(targets, idx, train_split, n_test);

  // Whiten on training statistics. An invertible linear map of the inputs
  // then only rotates the representation, so kernel distances — and the
  // resulting R^2 — do not depend on the basis the estimates arrive in.
  {
    const Matrix mu = x_train.colwise().mean();
    const Matrix centered = x_train.rowwise() - mu.row(0);
    const Matrix cov = centered.adjoint() * centered / static_cast<double>(n_train);
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
    const Eigen::VectorXd evals = es.eigenvalues();  // ascending
    const double floor = std::max(evals(k - 1), 1e-30) * 1e-10;
    std::vector<Index> keep;
    for (Index j = 0; j < k; ++j)
      if (evals(j) > floor) keep.push_back(j);
    Matrix w(k, static_cast<Index>(keep.size()));
    for (Index j = 0; j < w.cols(); ++j)
      w.col(j) = es.eigenvectors().col(keep[static_cast<std::size_t>(j)]) /
                 std::sqrt(evals(keep[static_cast<std::size_t>(j)]));
    x_train = centered * w;
    x_test = (x_test.rowwise() - mu.row(0)) * w;
  }

  const double bandwidth = median_pairwise_distance(x_train);
  Matrix gram = rbf_kernel(x_train, x_train, bandwidth);
  gram.diagonal().array() += kRidge;
  const Matrix alpha = Eigen::LDLT<Matrix>(gram).solve(y_train);
  const Matrix pred = rbf_kernel(x_test, x_train, bandwidth) * alpha;

  for (Index c = 0; c < targets.cols(); ++c) {
    const double mean = y_test.col(c).mean();
    const double ss_tot = (y_test.col(c).array() - mean).square().sum();
    if (ss_tot < 1e-18) {
      std::cerr << "warning: block_r2: target dim " << c
                << " has no variance; scoring 0\n";
      continue;
    }
    const double ss_res = (y_test.col(c) - pred.col(c)).array().square().sum();
    out(c) = 1.0 - ss_res / ss_tot;
  }
  return out;
}

double mcc(const Matrix& z_est, const Matrix& z_true) {
  require(z_est.cols() == z_true.cols(), "mcc: dimension count mismatch");
  require(z_est.rows() == z_true.rows(), "mcc: row count mismatch");
  require(z_est.rows() >= 2, "mcc: need at least two rows");
  const Index k = z_est.cols();
  require(k >= 1 && k <= 10, "mcc: dimension count must be in [1, 10]");

  const double rows = static_cast<double>(z_est.rows());
  const Matrix a = z_est.rowwise() - z_est.colwise().mean().row(0);
  const Matrix b = z_true.rowwise() - z_true.colwise().mean().row(0);
  Eigen::VectorXd sa(k), sb(k);
  for (Index c = 0; c < k; ++c) {
    sa(c) = std::sqrt(a.col(c).squaredNorm() / rows);
    sb(c) = std::sqrt(b.col(c).squaredNorm() / rows);
  }
  Matrix corr = Matrix::Zero(k, k);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j)
      if (sa(i) >= kVarFloor && sb(j) >= kVarFloor)
        corr(i, j) = std::abs(a.col(i).dot(b.col(j)) / (rows * sa(i) * sb(j)));

  std::vector<Index> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), Index{0});
  double best = 0.0;
  do {
    double sum = 0.0;
    for (Index i = 0; i < k; ++i) sum += corr(i, perm[static_cast<std::size_t>(i)]);
    best = std::max(best, sum);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(k);
}

Eigen::VectorXd step_sensitivity_trace(ad::Tape& tape, const priors::FlowPrior& bank,
                                       const BoundParams& bank_params,
                                       std::span<const ad::Var> z_rows) {
  require(z_rows.size() >= 2, "sensitivity trace: need at least two steps");
  const auto res = bank.build_residuals(tape, bank_params, z_rows[z_rows.size() - 1],
                                        z_rows[z_rows.size() - 2]);
  const Index n = tape.val(res.eps).cols();
  const std::vector<ad::Var> wrt(z_rows.begin(), z_rows.end());
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Index>(z_rows.size()));
  for (Index i = 0; i < n; ++i) {
    const auto grads = tape.gradients(tape.entry(res.eps, 0, i), wrt);
    for (std::size_t t = 0; t < grads.size(); ++t)
      out(static_cast<Index>(t)) += tape.val(grads[t]).cwiseAbs().sum();
  }
  if (!out.allFinite())
    throw NumericsError("sensitivity trace: non-finite partial derivatives");
  return out;
}

Eigen::VectorXd intervention_gradient_trace(const model::Model& net,
                                            const priors::FlowPrior& prior_d,
                                            const Matrix& window) {
  const auto& cfg = net.config();
  require(window.rows() == cfg.horizon && window.cols() == cfg.obs_dim,
          "trace window must be horizon x obs_dim");
  require(prior_d.config().n == cfg.n_d,
          "short-block bank width must match the model");
  ad::Tape tape;
  const BoundParams bm = bind(tape, net.params());
  const BoundParams bd = bind(tape, prior_d.params());
  const auto g = net.build_forward(tape, bm, window.topRows(cfg.lookback),
                                   Matrix::Zero(cfg.lookback, cfg.n_s),
                                   Matrix::Zero(cfg.lookback, cfg.n_d));
  return step_sensitivity_trace(tape, prior_d, bd, g.z_rows_d);
}

EncodedSeries encode_series(const model::Model& net, const Matrix& x, Index stride,
                            Index max_rows) {
  const auto& cfg = net.config();
  require(stride >= 1, "encode_series: stride must be >= 1");
  require(max_rows >= 1, "encode_series: row cap must be >= 1");
  require(x.cols() == cfg.obs_dim, "encode_series: series width mismatch");
  require(x.rows() >= cfg.lookback, "encode_series: series shorter than the lookback");

  std::vector<Index> starts;
  for (Index w = 0; w + cfg.lookback <= x.rows(); w += stride) starts.push_back(w);
  const Index thin =
      (static_cast<Index>(starts.size()) + max_rows - 1) / max_rows;  // ceil
  std::vector<Index> kept;
  for (std::size_t i = 0; i < starts.size(); i += static_cast<std::size_t>(thin))
    kept.push_back(starts[i]);

  EncodedSeries enc;
  const Index rows = static_cast<Index>(kept.size());
  enc.z_s.resize(rows, cfg.n_s);
  enc.z_d.resize(rows, cfg.n_d);
  enc.t.reserve(kept.size());
  const Matrix eta_s = Matrix::Zero(cfg.lookback, cfg.n_s);
  const Matrix eta_d = Matrix::Zero(cfg.lookback, cfg.n_d);
  for (Index r = 0; r < rows; ++r) {
    const Index start = kept[static_cast<std::size_t>(r)];
    const auto post = net.encode(x.middleRows(start, cfg.lookback), eta_s, eta_d);
    enc.z_s.row(r) = post.mean_s.row(cfg.lookback - 1);
    enc.z_d.row(r) = post.mean_d.row(cfg.lookback - 1);
    enc.t.push_back(start + cfg.lookback - 1);
  }
  return enc;
}

IdentifiabilityReport identifiability_report(const model::Model& net,
                                             const datagen::SyntheticDataset& ds,
                                             const EvalOptions& opt) {
  const auto& cfg = net.config();
  require(ds.config.n_s == cfg.n_s && ds.config.n_d == cfg.n_d,
          "identifiability report: latent block sizes must match the ground truth");

  const EncodedSeries enc = encode_series(net, ds.x, opt.stride, opt.max_rows);
  const Index rows = enc.z_s.rows();
  Matrix true_s(rows, ds.config.n_s), true_d(rows, ds.config.n_d);
  for (Index r = 0; r < rows; ++r) {
    true_s.row(r) = ds.z_s.row(enc.t[static_cast<std::size_t>(r)]);
    true_d.row(r) = ds.z_d.row(enc.t[static_cast<std::size_t>(r)]);
  }

  IdentifiabilityReport rep;
  rep.rows = rows;
  rep.r2_within_long = block_r2(enc.z_s, true_s, opt.seed).mean();
  rep.r2_within_short = block_r2(enc.z_d, true_d, opt.seed).mean();
  rep.r2_cross_ls = block_r2(enc.z_s, true_d, opt.seed).mean();
  rep.r2_cross_sl = block_r2(enc.z_d, true_s, opt.seed).mean();
  rep.mcc_long = mcc(enc.z_s, true_s);
  rep.mcc_short = mcc(enc.z_d, true_d);
  return rep;
}

}  // namespace lstd::evaluation
