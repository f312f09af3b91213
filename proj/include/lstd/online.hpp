#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lstd/common.hpp"
#include "lstd/losses.hpp"
#include "lstd/model.hpp"
#include "lstd/params.hpp"
#include "lstd/priors.hpp"

namespace lstd::online {

/// Causal per-dimension standardization. Statistics accumulate only over rows
/// that have been revealed, so normalizing with the current state never leaks
/// future values. Near-constant dimensions fall back to unit scale (they
/// normalize to centered zeros instead of exploding).
class RunningStats {
 public:
  explicit RunningStats(Index dim);

  void accumulate(const Matrix& rows);
  Matrix normalize(const Matrix& rows) const;
  Matrix denormalize(const Matrix& rows) const;

  Index dim() const { return dim_; }
  std::int64_t count() const { return count_; }
  Matrix mean() const { return mean_; }    // 1 x dim
  Matrix stddev() const;                   // 1 x dim, population std

 private:
  Index dim_;
  std::int64_t count_ = 0;
  Matrix mean_, m2_;  // Welford running mean and sum of squared deviations
};

/// A streaming forecaster. `horizon` is the full window length H; `lookback`
/// rows are observed and predictions cover rows [lookback, horizon). `update`
/// receives the window once fully revealed and may take one gradient step.
class Forecaster {
 public:
  virtual ~Forecaster() = default;

  virtual std::string name() const = 0;
  virtual Index lookback() const = 0;
  virtual Index horizon() const = 0;
  virtual Index obs_dim() const = 0;
  virtual Matrix predict(const Matrix& lookback_rows) = 0;
  virtual losses::LossBreakdown update(const Matrix& window_rows) = 0;
};

/// Repeats the last observed row across the horizon; never learns.
class PersistenceForecaster : public Forecaster {
 public:
  PersistenceForecaster(Index lookback, Index horizon, Index obs_dim);

  std::string name() const override { return "persistence"; }
  Index lookback() const override { return lookback_; }
  Index horizon() const override { return horizon_; }
  Index obs_dim() const override { return obs_dim_; }
  Matrix predict(const Matrix& lookback_rows) override;
  losses::LossBreakdown update(const Matrix& window_rows) override;

 private:
  Index lookback_, horizon_, obs_dim_;
};

struct MlpConfig {
  Index lookback = 60;
  Index horizon = 84;
  Index obs_dim = 4;
  Index hidden = 128;
  double leaky_slope = 0.1;
  AdamOptions adam{};

  void validate() const;
};

/// One-hidden-layer direct forecaster over the flattened lookback window;
/// learns with one ADAM step on prediction MSE per update call. The output
/// layer starts at zero so the initial forecast is the all-zero row block.
class OnlineMlpForecaster : public Forecaster {
 public:
  OnlineMlpForecaster(MlpConfig cfg, std::uint64_t seed);

  std::string name() const override { return "online_mlp"; }
  Index lookback() const override { return cfg_.lookback; }
  Index horizon() const override { return cfg_.horizon; }
  Index obs_dim() const override { return cfg_.obs_dim; }
  Matrix predict(const Matrix& lookback_rows) override;
  losses::LossBreakdown update(const Matrix& window_rows) override;

  const MlpConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }

 private:
  ad::Var predict_graph(ad::Tape& tape, const BoundParams& bp, const Matrix& look) const;

  MlpConfig cfg_;
  ParamStore params_;
  Adam opt_;
};

/// Hyper-parameters of one training step. `adam.clip_norm` is applied to the
/// global gradient norm across the network and both prior banks jointly.
/// `kl_lookback_only` restricts the prior chains to the encoded steps instead
/// of scoring the transition-generated future rows as well.
struct TrainerConfig {
  losses::LossWeights weights{};
  AdamOptions adam{};
  bool kl_lookback_only = false;
};

/// The assembled training objective on one revealed window: reconstruction and
/// prediction errors, both block KL estimates against the flow priors, the
/// association-stability penalty on the long block and the interrupted-
/// dependency penalty on the short block, combined with the given weights.
struct TrainingGraph {
  model::Model::Graph forward;
  ad::Var l_r, l_p, l_k_s, l_k_d, l_m, l_s;
  ad::Var total;
};

TrainingGraph build_training_graph(ad::Tape& tape, const model::Model& net,
                                   const priors::FlowPrior& prior_s,
                                   const priors::FlowPrior& prior_d,
                                   const BoundParams& net_params,
                                   const BoundParams& prior_s_params,
                                   const BoundParams& prior_d_params,
                                   const Matrix& window, const Matrix& eta_s,
                                   const Matrix& eta_d, const losses::LossWeights& weights,
                                   bool kl_lookback_only);

/// The full method: forecasting network plus one flow-prior bank per latent
/// block, trained jointly. Predictions run the posterior-mean path and never
/// touch parameters; each update draws fresh posterior noise, builds the
/// training graph on the revealed window and takes one joint ADAM step.
class LstdForecaster : public Forecaster {
 public:
  LstdForecaster(model::ModelConfig cfg, TrainerConfig train, std::uint64_t seed);

  std::string name() const override { return "lstd"; }
  Index lookback() const override { return net_.config().lookback; }
  Index horizon() const override { return net_.config().horizon; }
  Index obs_dim() const override { return net_.config().obs_dim; }
  Matrix predict(const Matrix& lookback_rows) override;
  losses::LossBreakdown update(const Matrix& window_rows) override;

  model::Model& net() { return net_; }
  const model::Model& net() const { return net_; }
  priors::FlowPrior& prior_long() { return prior_s_; }
  const priors::FlowPrior& prior_long() const { return prior_s_; }
  priors::FlowPrior& prior_short() { return prior_d_; }
  const priors::FlowPrior& prior_short() const { return prior_d_; }
  const TrainerConfig& train_config() const { return train_; }
  std::int64_t updates_taken() const { return updates_; }
  /// Checkpoint restoration: the loaded parameters already reflect this many
  /// update steps.
  void set_updates_taken(std::int64_t n);

 private:
  model::Model net_;
  priors::FlowPrior prior_s_, prior_d_;
  TrainerConfig train_;
  Adam opt_net_, opt_prior_s_, opt_prior_d_;
  Rng rng_;
  std::int64_t updates_ = 0;
};

struct ProtocolConfig {
  int update_steps = 1;   // gradient steps after each reveal; 0 = frozen model
  bool normalize = true;  // streaming standardization of inputs and metrics
};

struct RoundRecord {
  std::int64_t round = 0;
  double mse = 0.0;
  double mae = 0.0;
  losses::LossBreakdown losses;  // from the round's last update step
  double wall_ms = 0.0;
};

/// One JSON object: {round, mse, mae, loss_breakdown, wall_ms}.
std::string to_json_line(const RoundRecord& rec);

struct MetricsReport {
  std::string forecaster;
  Index lookback = 0;
  Index horizon = 0;
  Index obs_dim = 0;
  int update_steps = 0;
  bool normalized = true;
  std::int64_t rounds = 0;
  double mse = 0.0;  // NaN when rounds == 0 (serialized as null)
  double mae = 0.0;
  std::vector<RoundRecord> trace;
};

/// The predict-reveal-update-slide loop. Per round: forecast the horizon rows
/// of the window at the cursor from its lookback rows, score the forecast
/// against the still-hidden truth with pre-reveal normalization statistics,
/// then reveal the window, fold it into the statistics, run the configured
/// number of update steps on it, and advance the cursor by one.
class OnlineProtocol {
 public:
  OnlineProtocol(Matrix stream, Forecaster& forecaster, ProtocolConfig cfg = {});

  std::int64_t feasible_rounds() const;
  bool has_next() const;
  std::int64_t cursor() const { return cursor_; }
  std::int64_t rounds_completed() const { return rounds_done_; }
  const RunningStats& stats() const { return stats_; }

  /// Runs one round; requires has_next().
  RoundRecord round();

  /// Runs `rounds` more rounds (all remaining when negative) and reports the
  /// cumulative metrics over every round completed so far. When `trace` is
  /// given, emits one JSON line per executed round.
  MetricsReport run(std::int64_t rounds = -1, std::ostream* trace = nullptr);

 private:
  Matrix stream_;
  Forecaster& forecaster_;
  ProtocolConfig cfg_;
  RunningStats stats_;
  std::int64_t cursor_ = 0;
  std::int64_t revealed_ = 0;
  std::int64_t rounds_done_ = 0;
  double sum_sq_ = 0.0;
  double sum_abs_ = 0.0;
  std::int64_t err_count_ = 0;
  std::vector<RoundRecord> history_;
};

}  // namespace lstd::online
