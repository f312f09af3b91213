#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "lstd/datagen.hpp"
#include "test_util.hpp"

using namespace lstd;
using namespace lstd::datagen;

namespace {

/// Independent oracle: lag-1 autocorrelation by direct summation.
double lag1_autocorr(const Eigen::VectorXd& v) {
  const Index n = v.size();
  const double mean = v.mean();
  double num = 0.0, den = 0.0;
  for (Index t = 0; t + 1 < n; ++t) num += (v[t] - mean) * (v[t + 1] - mean);
  for (Index t = 0; t < n; ++t) den += (v[t] - mean) * (v[t] - mean);
  return num / den;
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::VectorXd ca = a.array() - a.mean();
  const Eigen::VectorXd cb = b.array() - b.mean();
  return ca.dot(cb) / std::sqrt(ca.squaredNorm() * cb.squaredNorm());
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(static_cast<bool>(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

GenerativeConfig default_config() { return GenerativeConfig{}; }

}  // namespace

TEST_CASE("mixing: zero layers is the identity map") {
  GenerativeConfig c = default_config();
  c.n_s = 1;
  c.n_d = 1;
  c.obs_dim = 2;
  c.mixing_layers = 0;
  MixingFunction g = make_mixing(c, 5);
  Eigen::VectorXd z(2);
  z << 1.0, -2.0;
  CHECK(g.apply(z) == z);
}

TEST_CASE("mixing: identical seeds give parameter-identical maps") {
  GenerativeConfig c = default_config();
  MixingFunction a = make_mixing(c, 7);
  MixingFunction b = make_mixing(c, 7);
  REQUIRE(a.weights().size() == b.weights().size());
  for (std::size_t k = 0; k < a.weights().size(); ++k)
    CHECK(a.weights()[k] == b.weights()[k]);
  MixingFunction other = make_mixing(c, 8);
  CHECK(a.weights()[0] != other.weights()[0]);
}

TEST_CASE("mixing: round trip recovers the latent over 1000 random draws") {
  GenerativeConfig c = default_config();  // square, n = 4
  MixingFunction g = make_mixing(c, 21);
  Rng rng(99);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    Eigen::VectorXd z = rng.normal_matrix(4, 1).col(0) * 3.0;
    worst = std::max(worst, (g.invert(g.apply(z)) - z).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("mixing: rectangular embedding also round-trips") {
  GenerativeConfig c = default_config();
  c.obs_dim = 7;
  c.mixing_layers = 3;
  MixingFunction g = make_mixing(c, 31);
  Rng rng(100);
  for (int k = 0; k < 200; ++k) {
    Eigen::VectorXd z = rng.normal_matrix(4, 1).col(0) * 2.0;
    Eigen::VectorXd x = g.apply(z);
    CHECK(x.size() == 7);
    CHECK((g.invert(x) - z).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("mixing: obs_dim below n is rejected") {
  GenerativeConfig c = default_config();
  c.obs_dim = 3;
  CHECK_THROWS_AS(make_mixing(c, 1), ValueError);
  CHECK_THROWS_AS(MixingFunction(4, 4, 0, 1.5, 1), ValueError);  // slope outside (0,1)
}

TEST_CASE("interventions: theta 0 is all false") {
  auto mask = sample_interventions(0.0, 500, 3);
  for (bool b : mask) CHECK_FALSE(b);
}

TEST_CASE("interventions: theta 1 follows the hand-simulated thinning pattern") {
  auto mask = sample_interventions(1.0, 10, 3);
  // index 0 forced false; earliest eligible kept; later conflicts dropped
  std::vector<bool> expected = {false, true, false, false, true,
                                false, false, true,  false, false};
  CHECK(mask == expected);
}

TEST_CASE("interventions: empirical rate and gap property at theta 0.05") {
  const int T = 100000;
  auto mask = sample_interventions(0.05, T, 12345);
  CHECK_FALSE(mask[0]);
  int count = 0;
  int last = -10;
  int min_gap = T;
  for (int t = 0; t < T; ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    ++count;
    if (last >= 0) min_gap = std::min(min_gap, t - last);
    last = t;
  }
  CHECK(min_gap >= 3);
  const double rate = static_cast<double>(count) / T;
  CHECK(rate >= 0.040);
  CHECK(rate <= 0.055);
}

TEST_CASE("generate: zero noise, no interventions converges to a fixed point") {
  GenerativeConfig c = default_config();
  c.theta = 0.0;
  c.noise_scale_s = 0.0;
  c.noise_scale_d = 0.0;
  c.T = 400;
  c.seed = 4;
  SyntheticDataset ds = generate_series(c);
  // own-coordinate persistence 0.9 < 1 plus bounded tanh => contraction
  const Index T = ds.z_s.rows();
  const double tail_step = (ds.z_s.row(T - 1) - ds.z_s.row(T - 2)).norm() +
                           (ds.z_d.row(T - 1) - ds.z_d.row(T - 2)).norm();
  const double head_step = (ds.z_s.row(1) - ds.z_s.row(0)).norm() +
                           (ds.z_d.row(1) - ds.z_d.row(0)).norm();
  CHECK(tail_step < 1e-8);
  CHECK(tail_step < head_step);
  SyntheticDataset again = generate_series(c);
  CHECK(ds.x == again.x);  // fully deterministic observations
}

TEST_CASE("generate: theta 1 severs short-term autocorrelation") {
  GenerativeConfig c = default_config();
  c.theta = 1.0;
  c.T = 50000;
  c.seed = 9;
  SyntheticDataset ds = generate_series(c);
  // Gap-3 thinning leaves two of every three steps governed by the ordinary
  // transition even at theta = 1, so the full-series autocorrelation cannot
  // vanish; it must sit well below the long block's, and the intervened
  // subsequence itself must be independent.
  for (Index j = 0; j < ds.z_d.cols(); ++j)
    CHECK(std::abs(lag1_autocorr(ds.z_d.col(j))) < 0.45);
  // the strict form of the property: consecutive intervened steps
  std::vector<double> a, b;
  for (Index t = 1; t + 3 < ds.z_d.rows(); ++t)
    if (ds.mask[static_cast<std::size_t>(t)] && ds.mask[static_cast<std::size_t>(t + 3)]) {
      a.push_back(ds.z_d(t, 0));
      b.push_back(ds.z_d(t + 3, 0));
    }
  REQUIRE(a.size() > 1000);
  Eigen::VectorXd va = Eigen::Map<Eigen::VectorXd>(a.data(), static_cast<Index>(a.size()));
  Eigen::VectorXd vb = Eigen::Map<Eigen::VectorXd>(b.data(), static_cast<Index>(b.size()));
  CHECK(std::abs(pearson(va, vb)) < 0.05);
}

TEST_CASE("generate: default config keeps strong long-term autocorrelation") {
  GenerativeConfig c = default_config();
  c.T = 20000;
  c.seed = 0;
  SyntheticDataset ds = generate_series(c);
  for (Index i = 0; i < ds.z_s.cols(); ++i) CHECK(lag1_autocorr(ds.z_s.col(i)) > 0.3);
}

TEST_CASE("generate: intervened values are measurable from the noise alone") {
  TransitionNets nets = make_transition_nets(3, {}, 77);
  Rng rng(5);
  for (int k = 0; k < 50; ++k) {
    Eigen::VectorXd prev_a = rng.normal_matrix(3, 1).col(0);
    Eigen::VectorXd prev_b = rng.normal_matrix(3, 1).col(0);
    const double eps = rng.normal();
    const double va = short_term_step(nets, 1, prev_a, eps, 0.3, true);
    const double vb = short_term_step(nets, 1, prev_b, eps, 0.3, true);
    CHECK(va == vb);
    // and the non-intervened branch does depend on the past
    CHECK(short_term_step(nets, 1, prev_a, eps, 0.3, false) !=
          short_term_step(nets, 1, prev_b, eps, 0.3, false));
  }
}

TEST_CASE("generate: recorded noise columns are pairwise uncorrelated") {
  GenerativeConfig c = default_config();
  c.T = 20000;
  c.seed = 2;
  SyntheticDataset ds = generate_series(c);
  Matrix eps(ds.eps_s.rows(), 4);
  eps << ds.eps_s, ds.eps_d;
  for (Index i = 0; i < 4; ++i)
    for (Index j = i + 1; j < 4; ++j)
      CHECK(std::abs(pearson(eps.col(i), eps.col(j))) < 0.03);
}

TEST_CASE("generate: adjacency masks cut cross-dimension influence") {
  // diagonal adjacency: each dim may only read its own past
  TransitionNets nets = make_transition_nets(2, {true, false, false, true}, 11);
  Eigen::VectorXd a(2), b(2);
  a << 0.5, 1.0;
  b << 0.5, -2.0;  // differs only in the non-parent coordinate
  CHECK(nets.step(0, a) == nets.step(0, b));
}

TEST_CASE("generate: overflow during rollout names the step") {
  GenerativeConfig c = default_config();
  c.noise_scale_s = 1e308;
  c.T = 50;
  c.seed = 6;
  CHECK_THROWS_WITH_AS(generate_series(c), doctest::Contains("step"), NumericsError);
}

TEST_CASE("generate: invalid configs are rejected") {
  GenerativeConfig c = default_config();
  c.T = 0;
  CHECK_THROWS_AS(generate_series(c), ValueError);
  c = default_config();
  c.theta = 1.5;
  CHECK_THROWS_AS(generate_series(c), ValueError);
  c = default_config();
  c.adjacency_s = {true, false};  // wrong size
  CHECK_THROWS_AS(generate_series(c), ValueError);
}

TEST_CASE("export/import: field-by-field round trip") {
  GenerativeConfig c = default_config();
  c.T = 64;
  c.seed = 13;
  c.adjacency_s = {true, true, false, true};
  SyntheticDataset ds = generate_series(c);
  const std::string dir = std::filesystem::temp_directory_path() / "lstd_roundtrip";
  export_dataset(ds, dir);
  SyntheticDataset back = import_dataset(dir);
  CHECK(back.x == ds.x);
  CHECK(back.z_s == ds.z_s);
  CHECK(back.z_d == ds.z_d);
  CHECK(back.mask == ds.mask);
  CHECK(back.config.n_s == c.n_s);
  CHECK(back.config.theta == c.theta);
  CHECK(back.config.seed == c.seed);
  CHECK(back.config.adjacency_s == c.adjacency_s);
}

TEST_CASE("export: empty dataset is rejected before writing") {
  SyntheticDataset ds;
  ds.x = Matrix(0, 4);
  ds.z_s = Matrix(0, 2);
  ds.z_d = Matrix(0, 2);
  CHECK_THROWS_AS(export_dataset(ds, "/tmp/lstd_should_not_exist"), ValueError);
  CHECK_FALSE(std::filesystem::exists("/tmp/lstd_should_not_exist/data.csv"));
}

TEST_CASE("export: identical bytes across runs of the same seeded config") {
  GenerativeConfig c = default_config();
  c.T = 32;
  c.seed = 17;
  const std::string d1 = std::filesystem::temp_directory_path() / "lstd_hash_a";
  const std::string d2 = std::filesystem::temp_directory_path() / "lstd_hash_b";
  export_dataset(generate_series(c), d1);
  export_dataset(generate_series(c), d2);
  CHECK(slurp(d1 + "/data.csv") == slurp(d2 + "/data.csv"));
  CHECK(slurp(d1 + "/truth.csv") == slurp(d2 + "/truth.csv"));
  CHECK(slurp(d1 + "/config.txt") == slurp(d2 + "/config.txt"));
}
