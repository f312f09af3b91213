#include "lstd/model.hpp"

namespace lstd::model {

namespace {

constexpr double kLogvarLo = -20.0;
constexpr double kLogvarHi = 10.0;

Matrix fan_in_init(Index rows, Index cols, Index fan_in, Rng& rng) {
  return rng.normal_matrix(rows, cols) / std::sqrt(static_cast<double>(fan_in));
}

}  // namespace

void ModelConfig::validate() const {
  require(lookback >= 1 && lookback < horizon,
          "model config: need 1 <= lookback < horizon");
  require(n_s >= 1 && n_d >= 1, "model config: latent blocks must be non-empty");
  require(obs_dim >= 1, "model config: obs_dim must be positive");
  require(conv_channels >= 1 && enc_hidden >= 1 && trans_hidden >= 1 && dec_hidden >= 1 &&
              prior_hidden >= 1 && prior_depth >= 1,
          "model config: all widths must be positive");
  require(conv_kernel >= 1 && conv_kernel % 2 == 1,
          "model config: conv kernel must be odd (same-padding)");
  require(leaky_slope > 0.0 && leaky_slope < 1.0,
          "model config: leaky slope must lie in (0, 1)");
}

Mode mode_from_string(const std::string& s) {
  if (s == "time") return Mode::kTime;
  if (s == "feature") return Mode::kFeature;
  throw ValueError("mode must be 'time' or 'feature', got '" + s + "'");
}

std::string mode_to_string(Mode m) { return m == Mode::kTime ? "time" : "feature"; }

Matrix reparameterize(const Matrix& mean, const Matrix& logvar, const Matrix& eta) {
  require(mean.rows() == logvar.rows() && mean.cols() == logvar.cols() &&
              mean.rows() == eta.rows() && mean.cols() == eta.cols(),
          "reparameterize: shape mismatch");
  return (mean.array() + (logvar.array() * 0.5).exp() * eta.array()).matrix();
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const Index L = cfg_.lookback;
  const Index D = cfg_.obs_dim;
  const Index P = cfg_.pred_len();
  const Index n = cfg_.n();
  // In time mode the encoder stacks mix across time steps (the lookback axis
  // is the channel axis); feature mode transposes the window first and mixes
  // across variables instead.
  const Index axis = cfg_.mode == Mode::kTime ? L : D;
  const Index ch = cfg_.conv_channels;
  const Index k = cfg_.conv_kernel;

  // long encoder: 1-D convolution over the non-channel axis, then a dense
  // projection back to the channel axis, then per-step posterior heads
  params_.add("enc_long.conv_w", fan_in_init(ch, k * axis, k * axis, rng));
  params_.add("enc_long.conv_b", Matrix::Zero(ch, 1));
  params_.add("enc_long.dense_w", fan_in_init(axis, ch, ch, rng));
  params_.add("enc_long.dense_b", Matrix::Zero(axis, 1));
  params_.add("enc_long.mean_w", Matrix::Zero(D, cfg_.n_s));
  params_.add("enc_long.mean_b", Matrix::Zero(1, cfg_.n_s));
  params_.add("enc_long.logvar_w", Matrix::Zero(D, cfg_.n_s));
  params_.add("enc_long.logvar_b", Matrix::Zero(1, cfg_.n_s));
  // short encoder: two dense layers over the same axis
  params_.add("enc_short.w1", fan_in_init(cfg_.enc_hidden, axis, axis, rng));
  params_.add("enc_short.b1", Matrix::Zero(cfg_.enc_hidden, 1));
  params_.add("enc_short.w2", fan_in_init(axis, cfg_.enc_hidden, cfg_.enc_hidden, rng));
  params_.add("enc_short.b2", Matrix::Zero(axis, 1));
  params_.add("enc_short.mean_w", Matrix::Zero(D, cfg_.n_d));
  params_.add("enc_short.mean_b", Matrix::Zero(1, cfg_.n_d));
  params_.add("enc_short.logvar_w", Matrix::Zero(D, cfg_.n_d));
  params_.add("enc_short.logvar_b", Matrix::Zero(1, cfg_.n_d));
  // latent transitions act on the time axis: L past steps to P future steps
  params_.add("trans_long.w1", fan_in_init(cfg_.trans_hidden, L, L, rng));
  params_.add("trans_long.b1", Matrix::Zero(cfg_.trans_hidden, 1));
  params_.add("trans_long.w2", fan_in_init(P, cfg_.trans_hidden, cfg_.trans_hidden, rng));
  params_.add("trans_long.b2", Matrix::Zero(P, 1));
  params_.add("trans_short.w", fan_in_init(P, L, L, rng));
  params_.add("trans_short.b", Matrix::Zero(P, 1));
  // decoders act per step on the concatenated latent blocks
  params_.add("dec_hist.w", fan_in_init(n, D, n, rng));
  params_.add("dec_hist.b", Matrix::Zero(1, D));
  params_.add("dec_fut.w1", fan_in_init(n, cfg_.dec_hidden, n, rng));
  params_.add("dec_fut.b1", Matrix::Zero(1, cfg_.dec_hidden));
  params_.add("dec_fut.w2", fan_in_init(cfg_.dec_hidden, D, cfg_.dec_hidden, rng));
  params_.add("dec_fut.b2", Matrix::Zero(1, D));
}

void Model::check_window(const Matrix& x) const {
  require(x.rows() == cfg_.lookback && x.cols() == cfg_.obs_dim,
          "window shape mismatch: expected " + std::to_string(cfg_.lookback) + "x" +
              std::to_string(cfg_.obs_dim) + ", got " + std::to_string(x.rows()) + "x" +
              std::to_string(x.cols()));
}

Model::EncoderOut Model::encode_long(ad::Tape& t, const BoundParams& bp, ad::Var x) const {
  ad::Var u = cfg_.mode == Mode::kTime ? x : t.transpose(x);
  const Index positions = t.val(u).cols();
  const Index axis = t.val(u).rows();
  const Index k = cfg_.conv_kernel;
  const Index pad = (k - 1) / 2;

  ad::Var padded = t.pad_cols(u, pad, positions + 2 * pad);
  ad::Var conv_w = bp.at("enc_long.conv_w");
  ad::Var acc{};
  for (Index tap = 0; tap < k; ++tap) {
    ad::Var w_tap = t.slice_cols(conv_w, tap * axis, axis);
    ad::Var term = t.matmul(w_tap, t.slice_cols(padded, tap, positions));
    acc = tap == 0 ? term : t.add(acc, term);
  }
  ad::Var conv = t.add(acc, t.broadcast_col(bp.at("enc_long.conv_b"), positions));
  ad::Var feats = t.leaky_relu(
      t.add(t.matmul(bp.at("enc_long.dense_w"), conv),
            t.broadcast_col(bp.at("enc_long.dense_b"), positions)),
      cfg_.leaky_slope);
  if (cfg_.mode == Mode::kFeature) feats = t.transpose(feats);  // back to L x D

  const Index L = cfg_.lookback;
  ad::Var mean = t.add(t.matmul(feats, bp.at("enc_long.mean_w")),
                       t.broadcast_row(bp.at("enc_long.mean_b"), L));
  ad::Var logvar = t.clamp(t.add(t.matmul(feats, bp.at("enc_long.logvar_w")),
                                 t.broadcast_row(bp.at("enc_long.logvar_b"), L)),
                           kLogvarLo, kLogvarHi);
  return {mean, logvar};
}

Model::EncoderOut Model::encode_short(ad::Tape& t, const BoundParams& bp, ad::Var x) const {
  ad::Var u = cfg_.mode == Mode::kTime ? x : t.transpose(x);
  const Index positions = t.val(u).cols();
  ad::Var h1 = t.leaky_relu(t.add(t.matmul(bp.at("enc_short.w1"), u),
                                  t.broadcast_col(bp.at("enc_short.b1"), positions)),
                            cfg_.leaky_slope);
  ad::Var h2 = t.leaky_relu(t.add(t.matmul(bp.at("enc_short.w2"), h1),
                                  t.broadcast_col(bp.at("enc_short.b2"), positions)),
                            cfg_.leaky_slope);
  ad::Var feats = cfg_.mode == Mode::kTime ? h2 : t.transpose(h2);

  const Index L = cfg_.lookback;
  ad::Var mean = t.add(t.matmul(feats, bp.at("enc_short.mean_w")),
                       t.broadcast_row(bp.at("enc_short.mean_b"), L));
  ad::Var logvar = t.clamp(t.add(t.matmul(feats, bp.at("enc_short.logvar_w")),
                                 t.broadcast_row(bp.at("enc_short.logvar_b"), L)),
                           kLogvarLo, kLogvarHi);
  return {mean, logvar};
}

ad::Var Model::transition_long_graph(ad::Tape& t, const BoundParams& bp, ad::Var z) const {
  const Index cols = t.val(z).cols();
  ad::Var h = t.leaky_relu(t.add(t.matmul(bp.at("trans_long.w1"), z),
                                 t.broadcast_col(bp.at("trans_long.b1"), cols)),
                           cfg_.leaky_slope);
  return t.add(t.matmul(bp.at("trans_long.w2"), h),
               t.broadcast_col(bp.at("trans_long.b2"), cols));
}

ad::Var Model::transition_short_graph(ad::Tape& t, const BoundParams& bp, ad::Var z) const {
  const Index cols = t.val(z).cols();
  return t.add(t.matmul(bp.at("trans_short.w"), z),
               t.broadcast_col(bp.at("trans_short.b"), cols));
}

ad::Var Model::decode_history_graph(ad::Tape& t, const BoundParams& bp, ad::Var z_s,
                                    ad::Var z_d) const {
  ad::Var c = t.concat_cols(z_s, z_d);
  const Index rows = t.val(c).rows();
  return t.add(t.matmul(c, bp.at("dec_hist.w")), t.broadcast_row(bp.at("dec_hist.b"), rows));
}

ad::Var Model::predict_future_graph(ad::Tape& t, const BoundParams& bp, ad::Var z_s,
                                    ad::Var z_d) const {
  ad::Var c = t.concat_cols(z_s, z_d);
  const Index rows = t.val(c).rows();
  ad::Var h = t.leaky_relu(t.add(t.matmul(c, bp.at("dec_fut.w1")),
                                 t.broadcast_row(bp.at("dec_fut.b1"), rows)),
                           cfg_.leaky_slope);
  return t.add(t.matmul(h, bp.at("dec_fut.w2")), t.broadcast_row(bp.at("dec_fut.b2"), rows));
}

Model::Graph Model::build_forward(ad::Tape& tape, const BoundParams& bp,
                                  const Matrix& x_window, const Matrix& eta_s,
                                  const Matrix& eta_d) const {
  check_window(x_window);
  require(eta_s.rows() == cfg_.lookback && eta_s.cols() == cfg_.n_s &&
              eta_d.rows() == cfg_.lookback && eta_d.cols() == cfg_.n_d,
          "noise draws must be lookback x block-size");

  Graph g;
  ad::Var x = tape.constant(x_window);
  EncoderOut lo = encode_long(tape, bp, x);
  EncoderOut sh = encode_short(tape, bp, x);
  g.mean_s = lo.mean;
  g.logvar_s = lo.logvar;
  g.mean_d = sh.mean;
  g.logvar_d = sh.logvar;
  g.samples_s = tape.add(g.mean_s, tape.mul(tape.exp(tape.mul_scalar(g.logvar_s, 0.5)),
                                            tape.constant(eta_s)));
  g.samples_d = tape.add(g.mean_d, tape.mul(tape.exp(tape.mul_scalar(g.logvar_d, 0.5)),
                                            tape.constant(eta_d)));

  // Rebuild the past blocks from per-step row slices so those rows are the
  // single upstream interface for everything downstream (transitions included).
  auto split_rows = [&tape](ad::Var m, Index count) {
    std::vector<ad::Var> rows;
    rows.reserve(static_cast<std::size_t>(count));
    for (Index r = 0; r < count; ++r) rows.push_back(tape.slice_rows(m, r, 1));
    return rows;
  };
  auto join_rows = [&tape](const std::vector<ad::Var>& rows, Index first, Index count) {
    ad::Var out = rows[static_cast<std::size_t>(first)];
    for (Index r = first + 1; r < first + count; ++r)
      out = tape.concat_rows(out, rows[static_cast<std::size_t>(r)]);
    return out;
  };

  const Index L = cfg_.lookback;
  const Index P = cfg_.pred_len();
  g.z_rows_s = split_rows(g.samples_s, L);
  g.z_rows_d = split_rows(g.samples_d, L);
  g.z_s_past = join_rows(g.z_rows_s, 0, L);
  g.z_d_past = join_rows(g.z_rows_d, 0, L);
  g.z_s_future = transition_long_graph(tape, bp, g.z_s_past);
  g.z_d_future = transition_short_graph(tape, bp, g.z_d_past);

  auto fut_rows_s = split_rows(g.z_s_future, P);
  auto fut_rows_d = split_rows(g.z_d_future, P);
  g.z_rows_s.insert(g.z_rows_s.end(), fut_rows_s.begin(), fut_rows_s.end());
  g.z_rows_d.insert(g.z_rows_d.end(), fut_rows_d.begin(), fut_rows_d.end());
  g.z_s_full = tape.concat_rows(g.z_s_past, g.z_s_future);
  g.z_d_full = tape.concat_rows(g.z_d_past, g.z_d_future);

  g.x_recon = decode_history_graph(tape, bp, g.z_s_past, g.z_d_past);
  g.x_pred = predict_future_graph(tape, bp, g.z_s_future, g.z_d_future);
  return g;
}

LatentPosterior Model::encode(const Matrix& x_window, const Matrix& eta_s,
                              const Matrix& eta_d) const {
  ad::Tape tape;
  BoundParams bp = bind(tape, params_);
  Graph g = build_forward(tape, bp, x_window, eta_s, eta_d);
  LatentPosterior p;
  p.mean_s = tape.val(g.mean_s);
  p.logvar_s = tape.val(g.logvar_s);
  p.mean_d = tape.val(g.mean_d);
  p.logvar_d = tape.val(g.logvar_d);
  p.samples_s = tape.val(g.samples_s);
  p.samples_d = tape.val(g.samples_d);
  p.eta_s = eta_s;
  p.eta_d = eta_d;
  return p;
}

LatentPosterior Model::encode(const Matrix& x_window, Rng& rng) const {
  return encode(x_window, rng.normal_matrix(cfg_.lookback, cfg_.n_s),
                rng.normal_matrix(cfg_.lookback, cfg_.n_d));
}

Matrix Model::transition_long(const Matrix& z_s_past) const {
  require(z_s_past.rows() == cfg_.lookback && z_s_past.cols() == cfg_.n_s,
          "transition_long: expected lookback x n_s");
  ad::Tape tape;
  BoundParams bp = bind(tape, params_);
  return tape.val(transition_long_graph(tape, bp, tape.constant(z_s_past)));
}

Matrix Model::transition_short(const Matrix& z_d_past) const {
  require(z_d_past.rows() == cfg_.lookback && z_d_past.cols() == cfg_.n_d,
          "transition_short: expected lookback x n_d");
  ad::Tape tape;
  BoundParams bp = bind(tape, params_);
  return tape.val(transition_short_graph(tape, bp, tape.constant(z_d_past)));
}

Matrix Model::decode_history(const Matrix& z_s, const Matrix& z_d) const {
  require(z_s.rows() == z_d.rows(), "decode_history: step counts differ");
  require(z_s.cols() == cfg_.n_s && z_d.cols() == cfg_.n_d,
          "decode_history: latent widths disagree with config");
  ad::Tape tape;
  BoundParams bp = bind(tape, params_);
  return tape.val(decode_history_graph(tape, bp, tape.constant(z_s), tape.constant(z_d)));
}

Matrix Model::predict_future(const Matrix& z_s_future, const Matrix& z_d_future) const {
  require(z_s_future.rows() == z_d_future.rows(), "predict_future: step counts differ");
  require(z_s_future.cols() == cfg_.n_s && z_d_future.cols() == cfg_.n_d,
          "predict_future: latent widths disagree with config");
  ad::Tape tape;
  BoundParams bp = bind(tape, params_);
  return tape.val(
      predict_future_graph(tape, bp, tape.constant(z_s_future), tape.constant(z_d_future)));
}

std::pair<LatentPosterior, ForecastBundle> Model::forward(const Matrix& x_window,
                                                          const Matrix& eta_s,
                                                          const Matrix& eta_d) const {
  ad::Tape tape;
  BoundParams bp = bind(tape, params_);
  Graph g = build_forward(tape, bp, x_window, eta_s, eta_d);
  LatentPosterior p;
  p.mean_s = tape.val(g.mean_s);
  p.logvar_s = tape.val(g.logvar_s);
  p.mean_d = tape.val(g.mean_d);
  p.logvar_d = tape.val(g.logvar_d);
  p.samples_s = tape.val(g.samples_s);
  p.samples_d = tape.val(g.samples_d);
  p.eta_s = eta_s;
  p.eta_d = eta_d;
  ForecastBundle b;
  b.z_s_future = tape.val(g.z_s_future);
  b.z_d_future = tape.val(g.z_d_future);
  b.x_recon = tape.val(g.x_recon);
  b.x_pred = tape.val(g.x_pred);
  return {std::move(p), std::move(b)};
}

Matrix Model::predict(const Matrix& x_window) const {
  const Matrix eta_s = Matrix::Zero(cfg_.lookback, cfg_.n_s);
  const Matrix eta_d = Matrix::Zero(cfg_.lookback, cfg_.n_d);
  return forward(x_window, eta_s, eta_d).second.x_pred;
}

}  // namespace lstd::model
