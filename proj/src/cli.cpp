#include "lstd/cli.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lstd/datagen.hpp"
#include "lstd/evaluation.hpp"
#include "lstd/losses.hpp"
#include "lstd/model.hpp"

namespace lstd::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

constexpr const char* kCheckpointFormat = "lstd-checkpoint";
constexpr int kCheckpointVersion = 1;

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split(const std::string& line, char delim) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string::npos) {
      fields.push_back(trim(line.substr(start)));
      break;
    }
    fields.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return fields;
}

bool parse_double(const std::string& s, double& v) {
  if (s.empty()) return false;
  const char* b = s.data();
  const char* e = b + s.size();
  const auto res = std::from_chars(b, e, v);
  return res.ec == std::errc{} && res.ptr == e;
}

std::string lowercase(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool is_timestamp_header(const std::string& name) {
  const std::string n = lowercase(name);
  return n == "t" || n == "date" || n == "time" || n == "timestamp";
}

/// Shortest decimal string that parses back to exactly `v`.
std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open '" + path + "' for writing");
  out << content;
  require(out.good(), "failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Checkpoint serialization

ordered_json store_to_json(const ParamStore& store) {
  ordered_json arr = ordered_json::array();
  for (const auto& [name, m] : store.items()) {
    ordered_json entry;
    entry["name"] = name;
    entry["rows"] = m.rows();
    entry["cols"] = m.cols();
    ordered_json data = ordered_json::array();
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    entry["data"] = std::move(data);
    arr.push_back(std::move(entry));
  }
  return arr;
}

void fill_store(ParamStore& store, const nlohmann::json& arr, const std::string& which) {
  require(arr.is_array() && arr.size() == store.size(),
          "checkpoint: parameter count mismatch in '" + which + "'");
  std::unordered_set<std::string> seen;
  for (const auto& entry : arr) {
    const std::string name = entry.at("name").get<std::string>();
    require(store.has(name), "checkpoint: unknown parameter '" + name + "' in '" + which + "'");
    require(seen.insert(name).second, "checkpoint: duplicate parameter '" + name + "'");
    Matrix& m = store.at(name);
    const Index rows = entry.at("rows").get<Index>();
    const Index cols = entry.at("cols").get<Index>();
    require(m.rows() == rows && m.cols() == cols,
            "checkpoint: shape mismatch for '" + name + "'");
    const auto& data = entry.at("data");
    require(data.is_array() && static_cast<Index>(data.size()) == rows * cols,
            "checkpoint: data length mismatch for '" + name + "'");
    Index k = 0;
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(k++)].get<double>();
  }
}

ordered_json model_json(const model::ModelConfig& c) {
  ordered_json j;
  j["lookback"] = c.lookback;
  j["horizon"] = c.horizon;
  j["n_s"] = c.n_s;
  j["n_d"] = c.n_d;
  j["obs_dim"] = c.obs_dim;
  j["conv_channels"] = c.conv_channels;
  j["conv_kernel"] = c.conv_kernel;
  j["enc_hidden"] = c.enc_hidden;
  j["trans_hidden"] = c.trans_hidden;
  j["dec_hidden"] = c.dec_hidden;
  j["prior_hidden"] = c.prior_hidden;
  j["prior_depth"] = c.prior_depth;
  j["leaky_slope"] = c.leaky_slope;
  j["mode"] = model::mode_to_string(c.mode);
  return j;
}

model::ModelConfig model_from_json(const nlohmann::json& j) {
  model::ModelConfig c;
  c.lookback = j.at("lookback").get<int>();
  c.horizon = j.at("horizon").get<int>();
  c.n_s = j.at("n_s").get<int>();
  c.n_d = j.at("n_d").get<int>();
  c.obs_dim = j.at("obs_dim").get<int>();
  c.conv_channels = j.at("conv_channels").get<int>();
  c.conv_kernel = j.at("conv_kernel").get<int>();
  c.enc_hidden = j.at("enc_hidden").get<int>();
  c.trans_hidden = j.at("trans_hidden").get<int>();
  c.dec_hidden = j.at("dec_hidden").get<int>();
  c.prior_hidden = j.at("prior_hidden").get<int>();
  c.prior_depth = j.at("prior_depth").get<int>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  c.mode = model::mode_from_string(j.at("mode").get<std::string>());
  c.validate();
  return c;
}

ordered_json weights_json(const losses::LossWeights& w) {
  ordered_json j;
  j["alpha"] = w.alpha;
  j["beta"] = w.beta;
  j["gamma"] = w.gamma;
  return j;
}

ordered_json adam_json(const AdamOptions& a) {
  ordered_json j;
  j["lr"] = a.lr;
  j["beta1"] = a.beta1;
  j["beta2"] = a.beta2;
  j["eps"] = a.eps;
  j["clip_norm"] = a.clip_norm;
  return j;
}

ordered_json trainer_json(const online::TrainerConfig& t) {
  ordered_json j;
  j["weights"] = weights_json(t.weights);
  j["adam"] = adam_json(t.adam);
  j["kl_lookback_only"] = t.kl_lookback_only;
  return j;
}

online::TrainerConfig trainer_from_json(const nlohmann::json& j) {
  online::TrainerConfig t;
  const auto& w = j.at("weights");
  t.weights.alpha = w.at("alpha").get<double>();
  t.weights.beta = w.at("beta").get<double>();
  t.weights.gamma = w.at("gamma").get<double>();
  const auto& a = j.at("adam");
  t.adam.lr = a.at("lr").get<double>();
  t.adam.beta1 = a.at("beta1").get<double>();
  t.adam.beta2 = a.at("beta2").get<double>();
  t.adam.eps = a.at("eps").get<double>();
  t.adam.clip_norm = a.at("clip_norm").get<double>();
  t.kl_lookback_only = j.at("kl_lookback_only").get<bool>();
  t.weights.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Shared command plumbing

void make_output_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, "cannot create output directory '" + dir + "': " + ec.message());
}

void write_report(const std::string& dir, const ordered_json& j) {
  write_text_file(dir + "/report.json", j.dump(2) + "\n");
}

/// Accepts either a CSV file or an exported dataset directory.
std::pair<DatasetTable, std::string> resolve_stream(const std::string& path) {
  std::string file = path;
  if (fs::is_directory(path)) file = (fs::path(path) / "data.csv").string();
  return {load_csv(file), file};
}

Matrix whole_stream_normalized(const Matrix& values) {
  online::RunningStats stats(values.cols());
  stats.accumulate(values);
  return stats.normalize(values);
}

ordered_json metrics_json(const online::MetricsReport& r) {
  ordered_json j;
  j["forecaster"] = r.forecaster;
  j["lookback"] = r.lookback;
  j["horizon"] = r.horizon;
  j["obs_dim"] = r.obs_dim;
  j["update_steps"] = r.update_steps;
  j["normalized"] = r.normalized;
  j["rounds"] = r.rounds;
  j["mse"] = r.mse;  // NaN serializes as null when no rounds ran
  j["mae"] = r.mae;
  return j;
}

/// Minimal polyline plot; an optional visual artifact, never a test input.
void write_series_svg(const std::string& path, const std::vector<double>& ys,
                      const std::string& title) {
  if (ys.empty()) return;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (double y : ys)
    if (std::isfinite(y)) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  if (!(hi > lo)) {
    hi = lo + 1.0;
    lo -= 1.0;
  }
  const int w = 800, h = 320, m = 45;
  std::string svg =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
      "\" height=\"" + std::to_string(h) + "\">\n" +
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n" +
      "<text x=\"12\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" + title +
      "</text>\n";
  auto line = [&](int x1, int y1, int x2, int y2) {
    svg += "<line x1=\"" + std::to_string(x1) + "\" y1=\"" + std::to_string(y1) +
           "\" x2=\"" + std::to_string(x2) + "\" y2=\"" + std::to_string(y2) +
           "\" stroke=\"black\"/>\n";
  };
  line(m, h - m, w - m, h - m);
  line(m, m, m, h - m);
  std::string points;
  const std::size_t n = ys.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(ys[i])) continue;
    const double fx = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.5;
    const double fy = (ys[i] - lo) / (hi - lo);
    const double px = m + fx * (w - 2 * m);
    const double py = (h - m) - fy * (h - 2 * m);
    points += std::to_string(px) + "," + std::to_string(py) + " ";
  }
  svg += "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"" +
         points + "\"/>\n</svg>\n";
  write_text_file(path, svg);
}

// ---------------------------------------------------------------------------
// Commands

struct GenerateOpts {
  std::string out;
  double theta = 0.05;
  int T = 1000;
  std::uint64_t seed = 0;
  int n_s = 2;
  int n_d = 2;
  int obs_dim = 0;  // 0 resolves to n_s + n_d
  double noise_s = 0.1;
  double noise_d = 0.1;
};

void cmd_generate(const GenerateOpts& o, std::ostream& out) {
  datagen::GenerativeConfig gc;
  gc.n_s = o.n_s;
  gc.n_d = o.n_d;
  gc.obs_dim = o.obs_dim > 0 ? o.obs_dim : o.n_s + o.n_d;
  gc.theta = o.theta;
  gc.T = o.T;
  gc.seed = o.seed;
  gc.noise_scale_s = o.noise_s;
  gc.noise_scale_d = o.noise_d;
  gc.validate();

  const auto ds = datagen::generate_series(gc);
  datagen::export_dataset(ds, o.out);

  std::int64_t interventions = 0;
  for (bool m : ds.mask) interventions += m ? 1 : 0;

  ordered_json gen;
  gen["n_s"] = gc.n_s;
  gen["n_d"] = gc.n_d;
  gen["obs_dim"] = gc.obs_dim;
  gen["theta"] = gc.theta;
  gen["lag"] = gc.lag;
  gen["T"] = gc.T;
  gen["seed"] = gc.seed;
  gen["noise_scale_s"] = gc.noise_scale_s;
  gen["noise_scale_d"] = gc.noise_scale_d;
  gen["mixing_layers"] = gc.mixing_layers;
  gen["mixing_slope"] = gc.mixing_slope;

  ordered_json j;
  j["command"] = "generate";
  j["config"]["out"] = o.out;
  j["config"]["generative"] = std::move(gen);
  j["report"]["rows"] = gc.T;
  j["report"]["interventions"] = interventions;
  write_report(o.out, j);
  out << "generate: wrote " << gc.T << " rows (" << interventions << " interventions) to "
      << o.out << "\n";
}

struct ProtocolOpts {
  std::string data;
  std::string out;
  std::string mode = "lstd";
  std::string term;  // ablate only
  int lookback = 60;
  int horizon = 84;
  int n_s = 2;
  int n_d = 2;
  int conv_channels = 640;
  int kernel = 3;
  int hidden = 512;
  int prior_hidden = 128;
  int prior_depth = 3;
  int mlp_hidden = 128;
  std::string axis = "time";
  double alpha = 0.1;
  double beta = 1.0;
  double gamma = 0.01;
  double lr = 1e-3;
  double clip = 10.0;
  bool kl_lookback_only = false;
  int update_steps = 1;
  std::int64_t rounds = -1;
  std::uint64_t seed = 0;
  bool raw = false;
  bool plot = false;
};

void cmd_protocol(const ProtocolOpts& o, bool ablate, std::ostream& out) {
  auto [tbl, file] = resolve_stream(o.data);
  const Index obs_dim = tbl.values.cols();
  make_output_dir(o.out);

  losses::LossWeights weights;
  weights.alpha = o.alpha;
  weights.beta = o.beta;
  weights.gamma = o.gamma;
  if (ablate) {
    if (o.term == "Ls")
      weights.gamma = 0.0;
    else if (o.term == "Lm")
      weights.alpha = 0.0;
    else if (o.term == "KL")
      weights.beta = 0.0;
    else
      throw ValueError("ablate: unknown term '" + o.term + "'");
  }
  AdamOptions adam;
  adam.lr = o.lr;
  adam.clip_norm = o.clip;

  const std::string mode = ablate ? "lstd" : o.mode;
  std::unique_ptr<online::Forecaster> forecaster;
  online::LstdForecaster* lstd_fc = nullptr;
  model::ModelConfig mc;
  if (mode == "lstd") {
    mc.lookback = o.lookback;
    mc.horizon = o.horizon;
    mc.n_s = o.n_s;
    mc.n_d = o.n_d;
    mc.obs_dim = static_cast<int>(obs_dim);
    mc.conv_channels = o.conv_channels;
    mc.conv_kernel = o.kernel;
    mc.enc_hidden = o.hidden;
    mc.trans_hidden = o.hidden;
    mc.dec_hidden = o.hidden;
    mc.prior_hidden = o.prior_hidden;
    mc.prior_depth = o.prior_depth;
    mc.mode = model::mode_from_string(o.axis);
    mc.validate();
    online::TrainerConfig tc{weights, adam, o.kl_lookback_only};
    auto p = std::make_unique<online::LstdForecaster>(mc, tc, o.seed);
    lstd_fc = p.get();
    forecaster = std::move(p);
  } else if (mode == "persistence") {
    forecaster =
        std::make_unique<online::PersistenceForecaster>(o.lookback, o.horizon, obs_dim);
  } else if (mode == "mlp") {
    online::MlpConfig mlp;
    mlp.lookback = o.lookback;
    mlp.horizon = o.horizon;
    mlp.obs_dim = obs_dim;
    mlp.hidden = o.mlp_hidden;
    mlp.adam = adam;
    forecaster = std::make_unique<online::OnlineMlpForecaster>(mlp, o.seed);
  } else {
    throw ValueError("unknown mode '" + mode + "'");
  }

  online::ProtocolConfig pc{o.update_steps, !o.raw};
  online::OnlineProtocol protocol(tbl.values, *forecaster, pc);
  std::ofstream trace(o.out + "/trace.jsonl", std::ios::binary);
  require(trace.good(), "cannot open trace file in '" + o.out + "'");
  const online::MetricsReport report = protocol.run(o.rounds, &trace);

  ordered_json cfg;
  cfg["data"] = file;
  cfg["out"] = o.out;
  cfg["mode"] = mode;
  if (ablate) cfg["ablated_term"] = o.term;
  cfg["seed"] = o.seed;
  cfg["rounds_requested"] = o.rounds;
  cfg["lookback"] = o.lookback;
  cfg["horizon"] = o.horizon;
  cfg["protocol"]["update_steps"] = o.update_steps;
  cfg["protocol"]["normalize"] = !o.raw;
  if (mode == "lstd") {
    cfg["model"] = model_json(mc);
    cfg["weights"] = weights_json(weights);
    cfg["adam"] = adam_json(adam);
    cfg["kl_lookback_only"] = o.kl_lookback_only;
  } else if (mode == "mlp") {
    cfg["mlp"]["hidden"] = o.mlp_hidden;
    cfg["adam"] = adam_json(adam);
  }

  ordered_json j;
  j["command"] = ablate ? "ablate" : "train-online";
  j["config"] = std::move(cfg);
  j["report"] = metrics_json(report);
  write_report(o.out, j);

  if (lstd_fc != nullptr) save_checkpoint(*lstd_fc, o.out + "/checkpoint.json");
  if (o.plot) {
    std::vector<double> mses;
    mses.reserve(report.trace.size());
    for (const auto& rec : report.trace) mses.push_back(rec.mse);
    write_series_svg(o.out + "/plot.svg", mses, "per-round mse (" + report.forecaster + ")");
  }
  out << j.at("command").get<std::string>() << ": " << report.rounds
      << " rounds, mse=" << report.mse << ", mae=" << report.mae << "\n";
}

struct EvaluateOpts {
  std::string data;
  std::string checkpoint;
  std::string out;
  int stride = 3;
  Index max_rows = 6000;
  std::uint64_t seed = 0;
};

void cmd_evaluate(const EvaluateOpts& o, std::ostream& out) {
  auto f = load_checkpoint(o.checkpoint);
  auto ds = datagen::import_dataset(o.data);
  // The model trained on the protocol's standardized windows; score its
  // encodings in the same units (running statistics converge to these).
  ds.x = whole_stream_normalized(ds.x);

  evaluation::EvalOptions eo;
  eo.stride = o.stride;
  eo.max_rows = o.max_rows;
  eo.seed = o.seed;
  const auto rep = evaluation::identifiability_report(f->net(), ds, eo);
  make_output_dir(o.out);

  ordered_json j;
  j["command"] = "evaluate";
  j["config"]["data"] = o.data;
  j["config"]["checkpoint"] = o.checkpoint;
  j["config"]["out"] = o.out;
  j["config"]["stride"] = o.stride;
  j["config"]["max_rows"] = o.max_rows;
  j["config"]["seed"] = o.seed;
  j["config"]["model"] = model_json(f->net().config());
  j["report"]["r2_within_long"] = rep.r2_within_long;
  j["report"]["r2_within_short"] = rep.r2_within_short;
  j["report"]["r2_cross_ls"] = rep.r2_cross_ls;
  j["report"]["r2_cross_sl"] = rep.r2_cross_sl;
  j["report"]["mcc_long"] = rep.mcc_long;
  j["report"]["mcc_short"] = rep.mcc_short;
  j["report"]["rows"] = rep.rows;
  write_report(o.out, j);
  out << "evaluate: rows=" << rep.rows << " r2_within_long=" << rep.r2_within_long
      << " r2_cross_sl=" << rep.r2_cross_sl << "\n";
}

struct TraceOpts {
  std::string data;
  std::string checkpoint;
  std::string out;
  int windows = 1;
  int stride = 1;
  bool plot = false;
};

void cmd_trace(const TraceOpts& o, std::ostream& out) {
  require(o.windows >= 1 && o.stride >= 1, "trace: windows and stride must be positive");
  auto f = load_checkpoint(o.checkpoint);
  auto [tbl, file] = resolve_stream(o.data);
  const Index horizon = f->horizon();
  require(static_cast<Index>(o.windows - 1) * o.stride + horizon <= tbl.values.rows(),
          "trace: stream too short for the requested windows");
  const Matrix norm = whole_stream_normalized(tbl.values);
  make_output_dir(o.out);

  std::string csv = "window,start,t,grad_l1\n";
  std::vector<double> first_series;
  for (int w = 0; w < o.windows; ++w) {
    const Index start = static_cast<Index>(w) * o.stride;
    const Eigen::VectorXd series = evaluation::intervention_gradient_trace(
        f->net(), f->prior_short(), norm.middleRows(start, horizon));
    for (Index t = 0; t < series.size(); ++t)
      csv += std::to_string(w) + "," + std::to_string(start) + "," + std::to_string(t) +
             "," + shortest(series(t)) + "\n";
    if (w == 0)
      first_series.assign(series.data(), series.data() + series.size());
  }
  write_text_file(o.out + "/trace.csv", csv);

  ordered_json j;
  j["command"] = "trace";
  j["config"]["data"] = file;
  j["config"]["checkpoint"] = o.checkpoint;
  j["config"]["out"] = o.out;
  j["config"]["windows"] = o.windows;
  j["config"]["stride"] = o.stride;
  j["report"]["windows"] = o.windows;
  j["report"]["horizon"] = horizon;
  j["report"]["csv"] = "trace.csv";
  write_report(o.out, j);

  if (o.plot)
    write_series_svg(o.out + "/plot.svg", first_series, "gradient trace (window 0)");
  out << "trace: wrote " << o.windows << " windows of length " << horizon << "\n";
}

void add_protocol_options(CLI::App* cmd, ProtocolOpts& o, bool ablate) {
  cmd->add_option("--data", o.data, "dataset directory or CSV file")->required();
  cmd->add_option("--out", o.out, "output directory")->required();
  if (ablate)
    cmd->add_option("--term", o.term, "loss term to disable: Ls|Lm|KL")
        ->required()
        ->check(CLI::IsMember({"Ls", "Lm", "KL"}));
  else
    cmd->add_option("--mode", o.mode, "forecaster: lstd|persistence|mlp")
        ->check(CLI::IsMember({"lstd", "persistence", "mlp"}));
  cmd->add_option("--lookback", o.lookback, "observed rows per window");
  cmd->add_option("--horizon", o.horizon, "full window length (lookback + forecast)");
  cmd->add_option("--rounds", o.rounds, "protocol rounds (-1 = all feasible)");
  cmd->add_option("--update-steps", o.update_steps, "gradient steps per reveal");
  cmd->add_option("--seed", o.seed, "initialization and posterior-noise seed");
  cmd->add_option("--alpha", o.alpha, "smooth-constraint weight");
  cmd->add_option("--beta", o.beta, "KL weight");
  cmd->add_option("--gamma", o.gamma, "interrupted-dependency weight");
  cmd->add_option("--lr", o.lr, "ADAM learning rate");
  cmd->add_option("--clip", o.clip, "global gradient-norm clip (<= 0 disables)");
  cmd->add_option("--n-s", o.n_s, "long-term latent width");
  cmd->add_option("--n-d", o.n_d, "short-term latent width");
  cmd->add_option("--conv-channels", o.conv_channels, "long encoder channels");
  cmd->add_option("--kernel", o.kernel, "long encoder kernel width");
  cmd->add_option("--hidden", o.hidden, "dense hidden width (encoders/decoders)");
  cmd->add_option("--prior-hidden", o.prior_hidden, "prior bank hidden width");
  cmd->add_option("--prior-depth", o.prior_depth, "prior bank hidden layers");
  cmd->add_option("--mlp-hidden", o.mlp_hidden, "baseline MLP hidden width");
  cmd->add_option("--axis", o.axis, "latent transition axis: time|feature");
  cmd->add_flag("--kl-lookback-only", o.kl_lookback_only,
                "score the prior chains on encoded steps only");
  cmd->add_flag("--raw", o.raw, "disable streaming standardization");
  cmd->add_flag("--plot", o.plot, "also write an SVG of per-round mse");
}

}  // namespace

// ---------------------------------------------------------------------------
// Public API

DatasetTable load_csv(const std::string& path, const CsvOptions& opt) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw ValueError("load_csv: cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw ValueError("load_csv: empty file: " + path);
  const std::vector<std::string> header = split(line, opt.delimiter);
  require(!header.empty() && !header[0].empty(), "load_csv: malformed header: " + path);

  DatasetTable tbl;
  bool decided = false;
  std::vector<std::vector<double>> rows;
  std::int64_t lineno = 1;  // header line

  std::int64_t bad_rows = 0;
  std::int64_t first_bad_line = 0;
  std::string first_bad_col;

  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> fields = split(line, opt.delimiter);
    if (fields.size() != header.size())
      throw ValueError("load_csv: line " + std::to_string(lineno) + ": expected " +
                       std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()) + " (" + path + ")");
    if (!decided) {
      double probe = 0.0;
      tbl.had_timestamp = is_timestamp_header(header[0]) || !parse_double(fields[0], probe);
      require(!tbl.had_timestamp || header.size() >= 2,
              "load_csv: only a timestamp column in " + path);
      const std::size_t start = tbl.had_timestamp ? 1 : 0;
      tbl.columns.assign(header.begin() + static_cast<std::ptrdiff_t>(start), header.end());
      decided = true;
    }
    const std::size_t start = tbl.had_timestamp ? 1 : 0;
    if (tbl.had_timestamp) tbl.timestamps.push_back(fields[0]);
    std::vector<double> row(fields.size() - start);
    bool row_finite = true;
    for (std::size_t c = start; c < fields.size(); ++c) {
      double v = 0.0;
      if (!parse_double(fields[c], v))
        throw ValueError("load_csv: line " + std::to_string(lineno) + ": column '" +
                         header[c] + "' is not numeric: '" + fields[c] + "'");
      if (!std::isfinite(v)) {
        row_finite = false;
        if (first_bad_line == 0) {
          first_bad_line = lineno;
          first_bad_col = header[c];
        }
      }
      row[c - start] = v;
    }
    if (!row_finite) ++bad_rows;
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ValueError("load_csv: no data rows: " + path);
  if (bad_rows > 0)
    throw ValueError("load_csv: non-finite value at line " + std::to_string(first_bad_line) +
                     ", column '" + first_bad_col + "' (" + std::to_string(bad_rows) +
                     " non-finite rows in " + std::to_string(rows.size()) +
                     " data rows): " + path);

  tbl.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      tbl.values(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
  return tbl;
}

void save_checkpoint(const online::LstdForecaster& f, const std::string& path) {
  ordered_json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["updates_taken"] = f.updates_taken();
  j["model"] = model_json(f.net().config());
  j["trainer"] = trainer_json(f.train_config());
  j["params"]["net"] = store_to_json(f.net().params());
  j["params"]["prior_long"] = store_to_json(f.prior_long().params());
  j["params"]["prior_short"] = store_to_json(f.prior_short().params());
  write_text_file(path, j.dump() + "\n");
}

std::unique_ptr<online::LstdForecaster> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw ValueError("checkpoint: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValueError("checkpoint: invalid JSON in '" + path + "': " + e.what());
  }
  try {
    require(j.is_object() && j.value("format", "") == kCheckpointFormat,
            "checkpoint: unrecognized format in '" + path + "'");
    const int version = j.at("version").get<int>();
    require(version == kCheckpointVersion,
            "checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                std::to_string(kCheckpointVersion) + ")");
    const model::ModelConfig cfg = model_from_json(j.at("model"));
    const online::TrainerConfig train = trainer_from_json(j.at("trainer"));
    auto f = std::make_unique<online::LstdForecaster>(cfg, train, 0);
    const auto& params = j.at("params");
    fill_store(f->net().params(), params.at("net"), "net");
    fill_store(f->prior_long().params(), params.at("prior_long"), "prior_long");
    fill_store(f->prior_short().params(), params.at("prior_short"), "prior_short");
    f->set_updates_taken(j.at("updates_taken").get<std::int64_t>());
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ValueError("checkpoint: malformed '" + path + "': " + e.what());
  }
}

int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Disentangled online time-series forecasting toolkit", "lstd"};
  app.require_subcommand(1);

  GenerateOpts gen_opts;
  CLI::App* gen = app.add_subcommand("generate", "write a synthetic dataset with latent truth");
  gen->add_option("--out", gen_opts.out, "output directory")->required();
  gen->add_option("--theta", gen_opts.theta, "per-step intervention probability");
  gen->add_option("--T", gen_opts.T, "series length");
  gen->add_option("--seed", gen_opts.seed, "generator seed");
  gen->add_option("--n-s", gen_opts.n_s, "long-term latent width");
  gen->add_option("--n-d", gen_opts.n_d, "short-term latent width");
  gen->add_option("--obs-dim", gen_opts.obs_dim, "observation width (default n-s + n-d)");
  gen->add_option("--noise-s", gen_opts.noise_s, "long-term transition noise scale");
  gen->add_option("--noise-d", gen_opts.noise_d, "short-term transition noise scale");

  ProtocolOpts train_opts;
  CLI::App* train = app.add_subcommand("train-online", "run the predict-reveal-update protocol");
  add_protocol_options(train, train_opts, false);

  ProtocolOpts ablate_opts;
  CLI::App* ablate = app.add_subcommand("ablate", "train-online with one loss term disabled");
  add_protocol_options(ablate, ablate_opts, true);

  EvaluateOpts eval_opts;
  CLI::App* eval = app.add_subcommand("evaluate", "identifiability scores against synthetic truth");
  eval->add_option("--data", eval_opts.data, "exported dataset directory")->required();
  eval->add_option("--checkpoint", eval_opts.checkpoint, "trained checkpoint")->required();
  eval->add_option("--out", eval_opts.out, "output directory")->required();
  eval->add_option("--stride", eval_opts.stride, "window stride for encoding");
  eval->add_option("--max-rows", eval_opts.max_rows, "encoded-row cap");
  eval->add_option("--seed", eval_opts.seed, "regression split seed");

  TraceOpts trace_opts;
  CLI::App* trace = app.add_subcommand("trace", "per-window gradient sensitivity series");
  trace->add_option("--data", trace_opts.data, "dataset directory or CSV file")->required();
  trace->add_option("--checkpoint", trace_opts.checkpoint, "trained checkpoint")->required();
  trace->add_option("--out", trace_opts.out, "output directory")->required();
  trace->add_option("--windows", trace_opts.windows, "number of windows to trace");
  trace->add_option("--stride", trace_opts.stride, "offset between window starts");
  trace->add_flag("--plot", trace_opts.plot, "also write an SVG of the first window");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*gen)
      cmd_generate(gen_opts, out);
    else if (*train)
      cmd_protocol(train_opts, false, out);
    else if (*ablate)
      cmd_protocol(ablate_opts, true, out);
    else if (*eval)
      cmd_evaluate(eval_opts, out);
    else if (*trace)
      cmd_trace(trace_opts, out);
    return 0;
  } catch (const std::exception& e) {
    ordered_json j;
    j["error"] = e.what();
    err << j.dump() << "\n";
    return 1;
  }
}

}  // namespace lstd::cli
