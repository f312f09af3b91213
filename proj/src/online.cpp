#include "lstd/online.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <utility>

#include <json.hpp>

namespace lstd::online {

namespace {

// Dimensions with less spread than this are treated as constant and left at
// unit scale; dividing by their true (tiny) deviation would explode.
constexpr double kStdFloor = 1e-8;

AdamOptions without_clip(AdamOptions opt) {
  opt.clip_norm = 0.0;  // the forecaster clips the joint norm itself
  return opt;
}

Matrix flatten_rows(const Matrix& m) {
  Matrix flat(1, m.size());
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) flat(0, r * m.cols() + c) = m(r, c);
  return flat;
}

Matrix unflatten_rows(const Matrix& flat, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = flat(0, r * cols + c);
  return m;
}

}  // namespace

// --- RunningStats ---

RunningStats::RunningStats(Index dim) : dim_(dim) {
  require(dim >= 1, "running stats: dimension must be positive");
  mean_ = Matrix::Zero(1, dim);
  m2_ = Matrix::Zero(1, dim);
}

void RunningStats::accumulate(const Matrix& rows) {
  require(rows.cols() == dim_, "running stats: row width mismatch");
  for (Index r = 0; r < rows.rows(); ++r) {
    ++count_;
    const double n = static_cast<double>(count_);
    for (Index c = 0; c < dim_; ++c) {
      const double delta = rows(r, c) - mean_(0, c);
      mean_(0, c) += delta / n;
      m2_(0, c) += delta * (rows(r, c) - mean_(0, c));
    }
  }
}

Matrix RunningStats::stddev() const {
  Matrix sd = Matrix::Ones(1, dim_);
  for (Index c = 0; c < dim_ && count_ > 0; ++c) {
    const double s = std::sqrt(m2_(0, c) / static_cast<double>(count_));
    if (s >= kStdFloor) sd(0, c) = s;
  }
  return sd;
}

Matrix RunningStats::normalize(const Matrix& rows) const {
  require(rows.cols() == dim_, "running stats: row width mismatch");
  const Matrix sd = stddev();
  Matrix out(rows.rows(), rows.cols());
  for (Index c = 0; c < dim_; ++c)
    out.col(c) = (rows.col(c).array() - mean_(0, c)) / sd(0, c);
  return out;
}

Matrix RunningStats::denormalize(const Matrix& rows) const {
  require(rows.cols() == dim_, "running stats: row width mismatch");
  const Matrix sd = stddev();
  Matrix out(rows.rows(), rows.cols());
  for (Index c = 0; c < dim_; ++c)
    out.col(c) = rows.col(c).array() * sd(0, c) + mean_(0, c);
  return out;
}

// --- PersistenceForecaster ---

PersistenceForecaster::PersistenceForecaster(Index lookback, Index horizon, Index obs_dim)
    : lookback_(lookback), horizon_(horizon), obs_dim_(obs_dim) {
  require(lookback >= 1 && lookback < horizon, "persistence: need 1 <= lookback < horizon");
  require(obs_dim >= 1, "persistence: need at least one dimension");
}

Matrix PersistenceForecaster::predict(const Matrix& lookback_rows) {
  require(lookback_rows.rows() == lookback_ && lookback_rows.cols() == obs_dim_,
          "persistence: lookback shape mismatch");
  return lookback_rows.row(lookback_ - 1).replicate(horizon_ - lookback_, 1);
}

losses::LossBreakdown PersistenceForecaster::update(const Matrix& window_rows) {
  require(window_rows.rows() == horizon_ && window_rows.cols() == obs_dim_,
          "persistence: window shape mismatch");
  return {};
}

// --- OnlineMlpForecaster ---

void MlpConfig::validate() const {
  require(lookback >= 1 && lookback < horizon, "mlp: need 1 <= lookback < horizon");
  require(obs_dim >= 1 && hidden >= 1, "mlp: widths must be positive");
  require(leaky_slope > 0.0 && leaky_slope < 1.0, "mlp: slope must be in (0, 1)");
}

OnlineMlpForecaster::OnlineMlpForecaster(MlpConfig cfg, std::uint64_t seed)
    : cfg_(cfg), opt_(cfg.adam) {
  cfg_.validate();
  Rng rng(seed);
  const Index in = cfg_.lookback * cfg_.obs_dim;
  const Index out = (cfg_.horizon - cfg_.lookback) * cfg_.obs_dim;
  params_.add("w1", rng.normal_matrix(in, cfg_.hidden) / std::sqrt(static_cast<double>(in)));
  params_.add("b1", Matrix::Zero(1, cfg_.hidden));
  params_.add("w2", Matrix::Zero(cfg_.hidden, out));
  params_.add("b2", Matrix::Zero(1, out));
}

ad::Var OnlineMlpForecaster::predict_graph(ad::Tape& tape, const BoundParams& bp,
                                           const Matrix& look) const {
  ad::Var x = tape.constant(flatten_rows(look));
  ad::Var h = tape.leaky_relu(tape.add(tape.matmul(x, bp.at("w1")), bp.at("b1")),
                              cfg_.leaky_slope);
  return tape.add(tape.matmul(h, bp.at("w2")), bp.at("b2"));
}

Matrix OnlineMlpForecaster::predict(const Matrix& lookback_rows) {
  require(lookback_rows.rows() == cfg_.lookback && lookback_rows.cols() == cfg_.obs_dim,
          "mlp: lookback shape mismatch");
  ad::Tape tape;
  BoundParams bp = bind(tape, params_);
  ad::Var y = predict_graph(tape, bp, lookback_rows);
  return unflatten_rows(tape.val(y), cfg_.horizon - cfg_.lookback, cfg_.obs_dim);
}

losses::LossBreakdown OnlineMlpForecaster::update(const Matrix& window_rows) {
  require(window_rows.rows() == cfg_.horizon && window_rows.cols() == cfg_.obs_dim,
          "mlp: window shape mismatch");
  ad::Tape tape;
  BoundParams bp = bind(tape, params_);
  ad::Var y = predict_graph(tape, bp, window_rows.topRows(cfg_.lookback));
  ad::Var l = losses::mse_graph(
      tape, y, flatten_rows(window_rows.bottomRows(cfg_.horizon - cfg_.lookback)));
  const std::vector<ad::Var> gv = tape.gradients(l, bp.vars);
  std::vector<Matrix> grads;
  grads.reserve(gv.size());
  for (ad::Var g : gv) grads.push_back(tape.val(g));
  opt_.step(params_, grads);

  losses::LossBreakdown parts;
  parts.l_p = tape.scalar_val(l);
  parts.total = parts.l_p;
  return parts;
}

// --- training graph ---

TrainingGraph build_training_graph(ad::Tape& tape, const model::Model& net,
                                   const priors::FlowPrior& prior_s,
                                   const priors::FlowPrior& prior_d,
                                   const BoundParams& net_params,
                                   const BoundParams& prior_s_params,
                                   const BoundParams& prior_d_params,
                                   const Matrix& window, const Matrix& eta_s,
                                   const Matrix& eta_d, const losses::LossWeights& weights,
                                   bool kl_lookback_only) {
  const auto& cfg = net.config();
  weights.validate();
  require(window.rows() == cfg.horizon && window.cols() == cfg.obs_dim,
          "training window must be horizon x obs_dim");
  require(prior_s.config().n == cfg.n_s && prior_d.config().n == cfg.n_d,
          "prior bank widths must match the latent blocks");

  TrainingGraph tg;
  tg.forward =
      net.build_forward(tape, net_params, window.topRows(cfg.lookback), eta_s, eta_d);

  tg.l_r = losses::mse_graph(tape, tg.forward.x_recon, window.topRows(cfg.lookback));
  tg.l_p = losses::mse_graph(tape, tg.forward.x_pred, window.bottomRows(cfg.pred_len()));

  // The prior chains score the sampled encoder steps, and by default also the
  // transition-generated future rows (the predicted continuation should be
  // likely under the learned dynamics). The variational entropy term only
  // covers the encoded steps — the future rows are deterministic given them.
  const std::size_t kl_steps =
      static_cast<std::size_t>(kl_lookback_only ? cfg.lookback : cfg.horizon);
  auto flow_s = prior_s.build_flow(
      tape, prior_s_params, std::span<const ad::Var>(tg.forward.z_rows_s.data(), kl_steps));
  auto flow_d = prior_d.build_flow(
      tape, prior_d_params, std::span<const ad::Var>(tg.forward.z_rows_d.data(), kl_steps));
  tg.l_k_s = losses::kl_term_graph(tape, tg.forward.logvar_s, eta_s, flow_s.log_prob);
  tg.l_k_d = losses::kl_term_graph(tape, tg.forward.logvar_d, eta_d, flow_d.log_prob);

  tg.l_m = losses::smooth_constraint_graph(tape, tg.forward.z_s_full);
  tg.l_s = losses::interrupted_dependency_graph(
      tape, prior_d, prior_d_params,
      std::span<const ad::Var>(tg.forward.z_rows_d.data(), tg.forward.z_rows_d.size()));

  ad::Var total = tape.add(tg.l_r, tg.l_p);
  total = tape.add(total, tape.mul_scalar(tape.add(tg.l_k_s, tg.l_k_d), weights.beta));
  total = tape.add(total, tape.mul_scalar(tg.l_m, weights.alpha));
  total = tape.add(total, tape.mul_scalar(tg.l_s, weights.gamma));
  tg.total = total;
  return tg;
}

// --- LstdForecaster ---

LstdForecaster::LstdForecaster(model::ModelConfig cfg, TrainerConfig train,
                               std::uint64_t seed)
    : net_(cfg, seed),
      prior_s_(priors::PriorConfig{cfg.n_s, cfg.prior_hidden, cfg.prior_depth,
                                   cfg.leaky_slope},
               seed + 1, "prior_s"),
      prior_d_(priors::PriorConfig{cfg.n_d, cfg.prior_hidden, cfg.prior_depth,
                                   cfg.leaky_slope},
               seed + 2, "prior_d"),
      train_(train),
      opt_net_(without_clip(train.adam)),
      opt_prior_s_(without_clip(train.adam)),
      opt_prior_d_(without_clip(train.adam)),
      rng_(seed + 3) {
  train_.weights.validate();
}

Matrix LstdForecaster::predict(const Matrix& lookback_rows) {
  return net_.predict(lookback_rows);
}

void LstdForecaster::set_updates_taken(std::int64_t n) {
  require(n >= 0, "update count cannot be negative");
  updates_ = n;
}

losses::LossBreakdown LstdForecaster::update(const Matrix& window_rows) {
  const auto& cfg = net_.config();
  require(window_rows.rows() == cfg.horizon && window_rows.cols() == cfg.obs_dim,
          "training window must be horizon x obs_dim");
  const Matrix eta_s = rng_.normal_matrix(cfg.lookback, cfg.n_s);
  const Matrix eta_d = rng_.normal_matrix(cfg.lookback, cfg.n_d);

  ad::Tape tape;
  BoundParams bm = bind(tape, net_.params());
  BoundParams bs = bind(tape, prior_s_.params());
  BoundParams bd = bind(tape, prior_d_.params());
  TrainingGraph tg =
      build_training_graph(tape, net_, prior_s_, prior_d_, bm, bs, bd, window_rows,
                           eta_s, eta_d, train_.weights, train_.kl_lookback_only);

  std::vector<ad::Var> wrt;
  wrt.reserve(bm.vars.size() + bs.vars.size() + bd.vars.size());
  wrt.insert(wrt.end(), bm.vars.begin(), bm.vars.end());
  wrt.insert(wrt.end(), bs.vars.begin(), bs.vars.end());
  wrt.insert(wrt.end(), bd.vars.begin(), bd.vars.end());
  const std::vector<ad::Var> gv = tape.gradients(tg.total, wrt);

  std::vector<Matrix> g_net, g_s, g_d;
  double sq = 0.0;
  std::size_t i = 0;
  for (auto* bucket : {&g_net, &g_s, &g_d}) {
    const std::size_t n = bucket == &g_net  ? bm.vars.size()
                          : bucket == &g_s ? bs.vars.size()
                                           : bd.vars.size();
    bucket->reserve(n);
    for (std::size_t k = 0; k < n; ++k, ++i) {
      bucket->push_back(tape.val(gv[i]));
      sq += bucket->back().squaredNorm();
    }
  }
  // One clipping decision for the whole step: the three stores are a single
  // parameter vector as far as the update is concerned.
  const double clip = train_.adam.clip_norm;
  if (clip > 0.0 && std::sqrt(sq) > clip) {
    const double scale = clip / std::sqrt(sq);
    for (auto* bucket : {&g_net, &g_s, &g_d})
      for (Matrix& g : *bucket) g *= scale;
  }
  opt_net_.step(net_.params(), g_net);
  opt_prior_s_.step(prior_s_.params(), g_s);
  opt_prior_d_.step(prior_d_.params(), g_d);
  ++updates_;

  losses::LossBreakdown parts;
  parts.l_r = tape.scalar_val(tg.l_r);
  parts.l_p = tape.scalar_val(tg.l_p);
  parts.l_k_s = tape.scalar_val(tg.l_k_s);
  parts.l_k_d = tape.scalar_val(tg.l_k_d);
  parts.l_m = tape.scalar_val(tg.l_m);
  parts.l_s = tape.scalar_val(tg.l_s);
  return losses::total_loss(parts, train_.weights);
}

// --- protocol ---

std::string to_json_line(const RoundRecord& rec) {
  nlohmann::ordered_json j;
  j["round"] = rec.round;
  j["mse"] = rec.mse;
  j["mae"] = rec.mae;
  j["loss_breakdown"] = {{"l_r", rec.losses.l_r},     {"l_p", rec.losses.l_p},
                         {"l_k_s", rec.losses.l_k_s}, {"l_k_d", rec.losses.l_k_d},
                         {"l_m", rec.losses.l_m},     {"l_s", rec.losses.l_s},
                         {"total", rec.losses.total}};
  j["wall_ms"] = rec.wall_ms;
  return j.dump();
}

OnlineProtocol::OnlineProtocol(Matrix stream, Forecaster& forecaster, ProtocolConfig cfg)
    : stream_(std::move(stream)),
      forecaster_(forecaster),
      cfg_(cfg),
      stats_(forecaster.obs_dim()) {
  require(stream_.cols() == forecaster_.obs_dim(),
          "stream width does not match the forecaster");
  require(cfg_.update_steps >= 0, "update steps per round must be >= 0");
  require(stream_.allFinite(), "stream contains non-finite values");
  const Index seed_rows = std::min(forecaster_.lookback(), stream_.rows());
  if (seed_rows > 0) stats_.accumulate(stream_.topRows(seed_rows));
  revealed_ = seed_rows;
}

std::int64_t OnlineProtocol::feasible_rounds() const {
  return std::max<std::int64_t>(0, stream_.rows() - forecaster_.horizon() + 1);
}

bool OnlineProtocol::has_next() const {
  return cursor_ + forecaster_.horizon() <= stream_.rows();
}

RoundRecord OnlineProtocol::round() {
  require(has_next(), "stream exhausted: no full window at the cursor");
  const auto t0 = std::chrono::steady_clock::now();
  const Index lb = forecaster_.lookback();
  const Index hz = forecaster_.horizon();
  const Matrix window = stream_.middleRows(cursor_, hz);

  // Score first, against the still-hidden truth, with the normalization
  // statistics frozen at their pre-reveal state.
  const Matrix look = window.topRows(lb);
  const Matrix truth = window.bottomRows(hz - lb);
  const Matrix pred =
      forecaster_.predict(cfg_.normalize ? stats_.normalize(look) : look);
  require(pred.rows() == hz - lb && pred.cols() == stream_.cols(),
          "forecaster returned a wrong-shaped prediction");
  const Matrix diff = pred - (cfg_.normalize ? stats_.normalize(truth) : truth);

  RoundRecord rec;
  rec.round = rounds_done_;
  rec.mse = diff.array().square().mean();
  rec.mae = diff.array().abs().mean();
  sum_sq_ += diff.array().square().sum();
  sum_abs_ += diff.array().abs().sum();
  err_count_ += diff.size();

  // Reveal the window, then learn from it.
  if (cursor_ + hz > revealed_) {
    stats_.accumulate(stream_.middleRows(revealed_, cursor_ + hz - revealed_));
    revealed_ = cursor_ + hz;
  }
  const Matrix train_window = cfg_.normalize ? stats_.normalize(window) : window;
  for (int s = 0; s < cfg_.update_steps; ++s) rec.losses = forecaster_.update(train_window);

  rec.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
          .count();
  ++cursor_;
  ++rounds_done_;
  history_.push_back(rec);
  return rec;
}

MetricsReport OnlineProtocol::run(std::int64_t rounds, std::ostream* trace) {
  const std::int64_t remaining = feasible_rounds() - rounds_done_;
  const std::int64_t todo = rounds < 0 ? remaining : rounds;
  require(todo <= remaining, "requested more rounds than the stream can supply");
  for (std::int64_t r = 0; r < todo; ++r) {
    const RoundRecord rec = round();
    if (trace != nullptr) *trace << to_json_line(rec) << '\n';
  }

  MetricsReport rep;
  rep.forecaster = forecaster_.name();
  rep.lookback = forecaster_.lookback();
  rep.horizon = forecaster_.horizon();
  rep.obs_dim = stream_.cols();
  rep.update_steps = cfg_.update_steps;
  rep.normalized = cfg_.normalize;
  rep.rounds = rounds_done_;
  rep.mse = err_count_ > 0 ? sum_sq_ / static_cast<double>(err_count_)
                           : std::numeric_limits<double>::quiet_NaN();
  rep.mae = err_count_ > 0 ? sum_abs_ / static_cast<double>(err_count_)
                           : std::numeric_limits<double>::quiet_NaN();
  rep.trace = history_;
  return rep;
}

}  // namespace lstd::online
