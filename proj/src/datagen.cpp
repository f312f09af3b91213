#include "lstd/datagen.hpp"

#include <cerrno>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace lstd::datagen {

namespace {

constexpr int kTransitionHidden = 8;
// Own-coordinate pathway: first hidden unit reads alpha*z_i, the first output
// weight undoes the squash gain so each dimension starts near an AR(rho)
// process. The remaining random units add cross-dimension structure.
constexpr double kOwnInputGain = 0.5;
// The long block persists strongly; the short block decays faster, so the
// two blocks are dynamically distinguishable and interventions dominate the
// short block's correlation structure.
constexpr double kLongPersistence = 0.9;
constexpr double kShortPersistence = 0.6;

double leaky(double v, double slope) { return v >= 0.0 ? v : slope * v; }
double leaky_inv(double v, double slope) { return v >= 0.0 ? v : v / slope; }

/// Thin QR factor with the sign convention that makes it unique (positive R
/// diagonal), so construction is deterministic.
Matrix orthonormal_columns(Index rows, Index cols, Rng& rng) {
  Matrix g = rng.normal_matrix(rows, cols);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(rows, cols);
  Matrix r = q.transpose() * g;
  for (Index c = 0; c < cols; ++c)
    if (r(c, c) < 0.0) q.col(c) = -q.col(c);
  return q;
}

std::vector<std::vector<bool>> parent_rows(int n, const std::vector<bool>& adjacency) {
  std::vector<std::vector<bool>> rows(static_cast<std::size_t>(n),
                                      std::vector<bool>(static_cast<std::size_t>(n), true));
  if (adjacency.empty()) return rows;
  require(adjacency.size() == static_cast<std::size_t>(n) * static_cast<std::size_t>(n),
          "adjacency mask must be n*n entries (row-major)");
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          adjacency[static_cast<std::size_t>(i * n + j)];
  return rows;
}

void format_value(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over distinct per-purpose streams
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void GenerativeConfig::validate() const {
  require(n_s >= 1 && n_d >= 1, "generative config: need n_s >= 1 and n_d >= 1");
  require(obs_dim >= n(), "generative config: obs_dim must be at least n_s + n_d");
  require(theta >= 0.0 && theta <= 1.0, "generative config: theta must lie in [0, 1]");
  require(lag >= 1, "generative config: lag must be positive");
  require(T >= 1, "generative config: T must be positive");
  // Zero is allowed: deterministic-dynamics diagnostics rely on it.
  require(noise_scale_s >= 0.0 && std::isfinite(noise_scale_s),
          "generative config: noise_scale_s must be finite and non-negative");
  require(noise_scale_d >= 0.0 && std::isfinite(noise_scale_d),
          "generative config: noise_scale_d must be finite and non-negative");
  require(adjacency_s.empty() ||
              adjacency_s.size() == static_cast<std::size_t>(n_s) * static_cast<std::size_t>(n_s),
          "generative config: adjacency_s must be n_s*n_s entries");
  require(adjacency_d.empty() ||
              adjacency_d.size() == static_cast<std::size_t>(n_d) * static_cast<std::size_t>(n_d),
          "generative config: adjacency_d must be n_d*n_d entries");
  require(mixing_layers >= 0, "generative config: mixing_layers must be non-negative");
  require(mixing_slope > 0.0 && mixing_slope < 1.0,
          "generative config: mixing slope must lie in (0, 1)");
}

MixingFunction::MixingFunction(int n, int obs_dim, int layers, double slope,
                               std::uint64_t seed)
    : n_(n), obs_dim_(obs_dim), slope_(slope) {
  require(n >= 1, "mixing: latent dimension must be positive");
  require(obs_dim >= n, "mixing: obs_dim below latent dimension, no inverse exists");
  require(slope > 0.0 && slope < 1.0, "mixing: slope must lie in (0, 1)");
  if (layers == 0)
    require(obs_dim == n, "mixing: identity map needs obs_dim == latent dimension");
  Rng rng(seed);
  weights_.reserve(static_cast<std::size_t>(layers));
  for (int k = 0; k < layers; ++k) {
    const Index in = k == 0 ? n : obs_dim;
    weights_.push_back(orthonormal_columns(obs_dim, in, rng));
  }
}

Eigen::VectorXd MixingFunction::apply(const Eigen::VectorXd& z) const {
  require(z.size() == n_, "mixing: input dimension mismatch");
  Eigen::VectorXd u = z;
  for (const Matrix& w : weights_) {
    u = w * u;
    for (Index i = 0; i < u.size(); ++i) u[i] = leaky(u[i], slope_);
  }
  return u;
}

Eigen::VectorXd MixingFunction::invert(const Eigen::VectorXd& x) const {
  require(x.size() == obs_dim_, "mixing: output dimension mismatch");
  Eigen::VectorXd u = x;
  for (auto it = weights_.rbegin(); it != weights_.rend(); ++it) {
    for (Index i = 0; i < u.size(); ++i) u[i] = leaky_inv(u[i], slope_);
    // Columns are orthonormal, so the transpose is the (left) inverse.
    u = it->transpose() * u;
  }
  return u;
}

Matrix MixingFunction::apply_rows(const Matrix& z) const {
  Matrix out(z.rows(), obs_dim_);
  for (Index t = 0; t < z.rows(); ++t) out.row(t) = apply(z.row(t).transpose()).transpose();
  return out;
}

MixingFunction make_mixing(const GenerativeConfig& config, std::uint64_t seed) {
  config.validate();
  return MixingFunction(config.n(), config.obs_dim, config.mixing_layers,
                        config.mixing_slope, seed);
}

std::vector<bool> sample_interventions(double theta, int T, std::uint64_t seed) {
  require(theta >= 0.0 && theta <= 1.0, "interventions: theta must lie in [0, 1]");
  require(T >= 1, "interventions: T must be positive");
  Rng rng(seed);
  std::vector<bool> mask(static_cast<std::size_t>(T), false);
  int last_true = -3;  // sentinel: first eligible index is 1
  for (int t = 0; t < T; ++t) {
    const bool drawn = rng.bernoulli(theta);  // always drawn: fixed stream layout
    if (t == 0) continue;
    if (drawn && t - last_true >= 3) {
      mask[static_cast<std::size_t>(t)] = true;
      last_true = t;
    }
  }
  return mask;
}

TransitionNets make_transition_nets(int n, const std::vector<bool>& adjacency,
                                    std::uint64_t seed, double own_persistence) {
  Rng rng(seed);
  TransitionNets nets;
  nets.parents = parent_rows(n, adjacency);
  nets.w1.reserve(static_cast<std::size_t>(n));
  nets.w2.reserve(static_cast<std::size_t>(n));
  const double cross_scale = 0.3 / std::sqrt(static_cast<double>(n));
  for (int i = 0; i < n; ++i) {
    Matrix w1 = cross_scale * rng.normal_matrix(kTransitionHidden, n);
    w1.row(0).setZero();
    w1(0, i) = kOwnInputGain;
    Eigen::VectorXd w2 = 0.1 * rng.normal_matrix(kTransitionHidden, 1).col(0);
    w2[0] = own_persistence / kOwnInputGain;
    nets.w1.push_back(std::move(w1));
    nets.w2.push_back(std::move(w2));
  }
  return nets;
}

double TransitionNets::step(int i, const Eigen::VectorXd& z_prev) const {
  const auto ui = static_cast<std::size_t>(i);
  Eigen::VectorXd masked = z_prev;
  for (Index j = 0; j < masked.size(); ++j)
    if (!parents[ui][static_cast<std::size_t>(j)]) masked[j] = 0.0;
  return w2[ui].dot((w1[ui] * masked).array().tanh().matrix());
}

double short_term_step(const TransitionNets& nets, int i,
                       const Eigen::VectorXd& z_prev, double eps,
                       double noise_scale, bool intervened) {
  // Intervened steps are measurable from the step's own noise alone: the
  // temporal edge is severed and the value is noise pushed through the
  // pointwise squash.
  if (intervened) return std::tanh(noise_scale * eps);
  return nets.step(i, z_prev) + noise_scale * eps;
}

SyntheticDataset generate_series(const GenerativeConfig& config) {
  config.validate();
  const int n_s = config.n_s;
  const int n_d = config.n_d;
  const int burn = 10 * config.lag;
  const int total = burn + config.T;

  Rng noise_rng(derive_seed(config.seed, 0));
  Matrix eps_s = noise_rng.normal_matrix(total, n_s);
  Matrix eps_d = noise_rng.normal_matrix(total, n_d);
  std::vector<bool> mask = sample_interventions(config.theta, config.T,
                                                derive_seed(config.seed, 1));
  MixingFunction mixing = make_mixing(config, derive_seed(config.seed, 2));
  TransitionNets nets_s = make_transition_nets(n_s, config.adjacency_s,
                                               derive_seed(config.seed, 3),
                                               kLongPersistence);
  TransitionNets nets_d = make_transition_nets(n_d, config.adjacency_d,
                                               derive_seed(config.seed, 4),
                                               kShortPersistence);

  Matrix z_s(total, n_s);
  Matrix z_d(total, n_d);
  for (int t = 0; t < config.lag; ++t) {
    z_s.row(t) = eps_s.row(t);
    z_d.row(t) = eps_d.row(t);
  }
  for (int t = config.lag; t < total; ++t) {
    const bool intervened = t >= burn && mask[static_cast<std::size_t>(t - burn)];
    const Eigen::VectorXd prev_s = z_s.row(t - config.lag).transpose();
    const Eigen::VectorXd prev_d = z_d.row(t - config.lag).transpose();
    for (int i = 0; i < n_s; ++i)
      z_s(t, i) = nets_s.step(i, prev_s) + config.noise_scale_s * eps_s(t, i);
    for (int j = 0; j < n_d; ++j)
      z_d(t, j) = short_term_step(nets_d, j, prev_d, eps_d(t, j),
                                  config.noise_scale_d, intervened);
    if (!z_s.row(t).allFinite() || !z_d.row(t).allFinite())
      throw NumericsError("generation produced a non-finite latent at step " +
                          std::to_string(t - burn) + " (burn-in offset " +
                          std::to_string(burn) + ")");
  }

  SyntheticDataset ds;
  ds.config = config;
  ds.z_s = z_s.bottomRows(config.T);
  ds.z_d = z_d.bottomRows(config.T);
  ds.eps_s = eps_s.bottomRows(config.T);
  ds.eps_d = eps_d.bottomRows(config.T);
  ds.mask = std::move(mask);
  Matrix z(config.T, config.n());
  z << ds.z_s, ds.z_d;
  ds.x = mixing.apply_rows(z);
  if (!ds.x.allFinite()) throw NumericsError("generation produced non-finite observations");
  return ds;
}

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValueError("cannot open '" + path + "' for writing: " + std::strerror(errno));
  out << content;
  out.flush();
  if (!out) throw ValueError("write to '" + path + "' failed: " + std::strerror(errno));
}

std::string adjacency_to_string(const std::vector<bool>& adj) {
  std::string s;
  s.reserve(adj.size());
  for (bool b : adj) s += b ? '1' : '0';
  return s;
}

std::vector<bool> adjacency_from_string(const std::string& s) {
  std::vector<bool> adj;
  adj.reserve(s.size());
  for (char c : s) {
    require(c == '0' || c == '1', "config: adjacency strings may contain only 0 and 1");
    adj.push_back(c == '1');
  }
  return adj;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValueError("cannot open '" + path + "' for reading: " + std::strerror(errno));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Strict numeric CSV body parser for this module's own files.
Matrix parse_numeric_csv(const std::string& content, const std::string& path,
                         Index expect_cols) {
  std::istringstream in(content);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "'" + path + "' is empty");
  std::vector<double> values;
  Index rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    Index cols = 0;
    while (std::getline(ls, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      require(end != cell.c_str(), "'" + path + "' has a non-numeric cell: " + cell);
      values.push_back(v);
      ++cols;
    }
    require(cols == expect_cols, "'" + path + "' row has " + std::to_string(cols) +
                                     " cells, expected " + std::to_string(expect_cols));
    ++rows;
  }
  Matrix m(rows, expect_cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < expect_cols; ++c)
      m(r, c) = values[static_cast<std::size_t>(r * expect_cols + c)];
  return m;
}

}  // namespace

void export_dataset(const SyntheticDataset& ds, const std::string& dir) {
  require(ds.x.rows() >= 1, "export: refusing to write an empty dataset (T = 0)");
  require(ds.x.rows() == ds.z_s.rows() && ds.x.rows() == ds.z_d.rows() &&
              ds.mask.size() == static_cast<std::size_t>(ds.x.rows()),
          "export: dataset field lengths disagree");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ValueError("cannot create directory '" + dir + "': " + ec.message());

  const Index T = ds.x.rows();
  std::string data;
  data += "t";
  for (Index c = 0; c < ds.x.cols(); ++c) data += ",x" + std::to_string(c);
  data += "\n";
  for (Index t = 0; t < T; ++t) {
    data += std::to_string(t);
    for (Index c = 0; c < ds.x.cols(); ++c) {
      data += ',';
      format_value(data, ds.x(t, c));
    }
    data += "\n";
  }
  write_file(dir + "/data.csv", data);

  std::string truth;
  truth += "t";
  for (Index c = 0; c < ds.z_s.cols(); ++c) truth += ",zs" + std::to_string(c);
  for (Index c = 0; c < ds.z_d.cols(); ++c) truth += ",zd" + std::to_string(c);
  truth += ",mask\n";
  for (Index t = 0; t < T; ++t) {
    truth += std::to_string(t);
    for (Index c = 0; c < ds.z_s.cols(); ++c) {
      truth += ',';
      format_value(truth, ds.z_s(t, c));
    }
    for (Index c = 0; c < ds.z_d.cols(); ++c) {
      truth += ',';
      format_value(truth, ds.z_d(t, c));
    }
    truth += ds.mask[static_cast<std::size_t>(t)] ? ",1\n" : ",0\n";
  }
  write_file(dir + "/truth.csv", truth);

  const GenerativeConfig& c = ds.config;
  std::string cfg;
  auto kv = [&cfg](const std::string& k, const std::string& v) { cfg += k + "=" + v + "\n"; };
  auto kvd = [&](const std::string& k, double v) {
    std::string s;
    format_value(s, v);
    kv(k, s);
  };
  kv("n_s", std::to_string(c.n_s));
  kv("n_d", std::to_string(c.n_d));
  kv("obs_dim", std::to_string(c.obs_dim));
  kvd("theta", c.theta);
  kv("lag", std::to_string(c.lag));
  kv("T", std::to_string(c.T));
  kv("seed", std::to_string(c.seed));
  kvd("noise_scale_s", c.noise_scale_s);
  kvd("noise_scale_d", c.noise_scale_d);
  kv("adjacency_s", adjacency_to_string(c.adjacency_s));
  kv("adjacency_d", adjacency_to_string(c.adjacency_d));
  kv("mixing_layers", std::to_string(c.mixing_layers));
  kvd("mixing_slope", c.mixing_slope);
  write_file(dir + "/config.txt", cfg);
}

SyntheticDataset import_dataset(const std::string& dir) {
  const std::string cfg_text = read_file(dir + "/config.txt");
  GenerativeConfig c;
  std::istringstream in(cfg_text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "config.txt: expected key=value, got: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "n_s") c.n_s = std::stoi(val);
    else if (key == "n_d") c.n_d = std::stoi(val);
    else if (key == "obs_dim") c.obs_dim = std::stoi(val);
    else if (key == "theta") c.theta = std::stod(val);
    else if (key == "lag") c.lag = std::stoi(val);
    else if (key == "T") c.T = std::stoi(val);
    else if (key == "seed") c.seed = std::stoull(val);
    else if (key == "noise_scale_s") c.noise_scale_s = std::stod(val);
    else if (key == "noise_scale_d") c.noise_scale_d = std::stod(val);
    else if (key == "adjacency_s") c.adjacency_s = adjacency_from_string(val);
    else if (key == "adjacency_d") c.adjacency_d = adjacency_from_string(val);
    else if (key == "mixing_layers") c.mixing_layers = std::stoi(val);
    else if (key == "mixing_slope") c.mixing_slope = std::stod(val);
    else throw ValueError("config.txt: unknown key '" + key + "'");
  }
  c.validate();

  SyntheticDataset ds;
  ds.config = c;
  ds.x = parse_numeric_csv(read_file(dir + "/data.csv"), dir + "/data.csv", 1 + c.obs_dim);
  require(ds.x.rows() == c.T, "data.csv row count disagrees with config T");
  ds.x = ds.x.rightCols(c.obs_dim).eval();

  Matrix truth = parse_numeric_csv(read_file(dir + "/truth.csv"), dir + "/truth.csv",
                                   1 + c.n() + 1);
  require(truth.rows() == c.T, "truth.csv row count disagrees with config T");
  ds.z_s = truth.middleCols(1, c.n_s);
  ds.z_d = truth.middleCols(1 + c.n_s, c.n_d);
  ds.mask.resize(static_cast<std::size_t>(c.T));
  for (Index t = 0; t < c.T; ++t) {
    const double m = truth(t, 1 + c.n());
    require(m == 0.0 || m == 1.0, "truth.csv: mask must be 0 or 1");
    ds.mask[static_cast<std::size_t>(t)] = m == 1.0;
  }
  return ds;
}

}  // namespace lstd::datagen
