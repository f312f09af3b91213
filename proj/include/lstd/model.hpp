#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "lstd/autodiff.hpp"
#include "lstd/common.hpp"
#include "lstd/params.hpp"

namespace lstd::model {

enum class Mode { kTime, kFeature };

/// Network configuration. `lookback` (L) rows are observed; the model predicts
/// the remaining `horizon − lookback` rows of each length-`horizon` window.
struct ModelConfig {
  int lookback = 60;
  int horizon = 84;
  int n_s = 2;
  int n_d = 2;
  int obs_dim = 4;
  int conv_channels = 640;
  int conv_kernel = 3;
  int enc_hidden = 512;    // short encoder hidden width
  int trans_hidden = 512;  // long transition hidden width
  int dec_hidden = 512;    // future predictor hidden width
  int prior_hidden = 128;
  int prior_depth = 3;
  double leaky_slope = 0.1;
  Mode mode = Mode::kTime;

  int pred_len() const { return horizon - lookback; }
  int n() const { return n_s + n_d; }
  void validate() const;
};

Mode mode_from_string(const std::string& s);
std::string mode_to_string(Mode m);

/// Per-step diagonal-Gaussian posterior over both latent blocks, with the
/// reparameterized draws and the standard-normal noise behind them.
struct LatentPosterior {
  Matrix mean_s, logvar_s;      // L x n_s
  Matrix mean_d, logvar_d;      // L x n_d
  Matrix samples_s, samples_d;  // mean + exp(logvar/2) * eta
  Matrix eta_s, eta_d;
};

struct ForecastBundle {
  Matrix z_s_future;  // (H-L) x n_s
  Matrix z_d_future;  // (H-L) x n_d
  Matrix x_recon;     // L x obs_dim
  Matrix x_pred;      // (H-L) x obs_dim
};

Matrix reparameterize(const Matrix& mean, const Matrix& logvar, const Matrix& eta);

/// The forecasting network: two encoder stacks (convolutional long-range,
/// dense short-range), reparameterized posteriors, single-shot latent
/// transitions over the time axis, and two decoders.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Handles into a forward pass built on an external tape. The per-step
  /// latent row nodes are the canonical interface for every cross-step
  /// derivative: the transition modules consume the same row nodes the prior
  /// chain reads, so sensitivities of late noise estimates to early latents
  /// include the paths through the transitions.
  struct Graph {
    ad::Var mean_s, logvar_s, mean_d, logvar_d;
    ad::Var samples_s, samples_d;              // L x n
    std::vector<ad::Var> z_rows_s, z_rows_d;   // H rows, each 1 x n
    ad::Var z_s_past, z_d_past;                // L x n (concat of the rows)
    ad::Var z_s_future, z_d_future;            // (H-L) x n
    ad::Var z_s_full, z_d_full;                // H x n
    ad::Var x_recon, x_pred;
  };

  Graph build_forward(ad::Tape& tape, const BoundParams& bp, const Matrix& x_window,
                      const Matrix& eta_s, const Matrix& eta_d) const;

  // Value-level operations (each runs on a scratch tape).
  LatentPosterior encode(const Matrix& x_window, const Matrix& eta_s,
                         const Matrix& eta_d) const;
  LatentPosterior encode(const Matrix& x_window, Rng& rng) const;
  Matrix transition_long(const Matrix& z_s_past) const;
  Matrix transition_short(const Matrix& z_d_past) const;
  Matrix decode_history(const Matrix& z_s, const Matrix& z_d) const;
  Matrix predict_future(const Matrix& z_s_future, const Matrix& z_d_future) const;
  std::pair<LatentPosterior, ForecastBundle> forward(const Matrix& x_window,
                                                     const Matrix& eta_s,
                                                     const Matrix& eta_d) const;
  /// Posterior-mean path prediction (eta = 0), the deterministic forecast.
  Matrix predict(const Matrix& x_window) const;

 private:
  struct EncoderOut {
    ad::Var mean, logvar;
  };
  EncoderOut encode_long(ad::Tape& t, const BoundParams& bp, ad::Var x) const;
  EncoderOut encode_short(ad::Tape& t, const BoundParams& bp, ad::Var x) const;
  ad::Var transition_long_graph(ad::Tape& t, const BoundParams& bp, ad::Var z) const;
  ad::Var transition_short_graph(ad::Tape& t, const BoundParams& bp, ad::Var z) const;
  ad::Var decode_history_graph(ad::Tape& t, const BoundParams& bp, ad::Var z_s,
                               ad::Var z_d) const;
  ad::Var predict_future_graph(ad::Tape& t, const BoundParams& bp, ad::Var z_s,
                               ad::Var z_d) const;
  void check_window(const Matrix& x) const;

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace lstd::model
