#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lstd/autodiff.hpp"
#include "lstd/common.hpp"

namespace lstd {

/// Named parameter arrays with stable insertion order. The order defines the
/// layout of gradient vectors and optimizer slots, and the serialization
/// order in checkpoints.
class ParamStore {
 public:
  Matrix& add(const std::string& name, Matrix init) {
    require(index_.emplace(name, items_.size()).second,
            "parameter '" + name + "' registered twice");
    items_.emplace_back(name, std::move(init));
    return items_.back().second;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown parameter '" + name + "'");
    return it->second;
  }

  Matrix& at(const std::string& name) { return items_[index_of(name)].second; }
  const Matrix& at(const std::string& name) const { return items_[index_of(name)].second; }

  const std::vector<std::pair<std::string, Matrix>>& items() const { return items_; }
  std::vector<std::pair<std::string, Matrix>>& items() { return items_; }
  std::size_t size() const { return items_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : items_) n += static_cast<std::size_t>(m.size());
    return n;
  }

 private:
  std::vector<std::pair<std::string, Matrix>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Leaf tape nodes for every parameter in a store, in store order.
struct BoundParams {
  const ParamStore* store = nullptr;
  std::vector<ad::Var> vars;

  ad::Var at(const std::string& name) const { return vars[store->index_of(name)]; }
};

inline BoundParams bind(ad::Tape& tape, const ParamStore& store) {
  BoundParams bp;
  bp.store = &store;
  bp.vars.reserve(store.size());
  for (const auto& [name, m] : store.items()) bp.vars.push_back(tape.constant(m));
  return bp;
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 10.0;
};

/// Adam with optional global-norm gradient clipping (clip_norm <= 0 disables).
class Adam {
 public:
  using Options = AdamOptions;

  explicit Adam(Options opt = Options()) : opt_(opt) {}

  const Options& options() const { return opt_; }

  /// Applies one update. `grads` must align with params.items().
  void step(ParamStore& params, const std::vector<Matrix>& grads) {
    require(grads.size() == params.size(), "optimizer: gradient count mismatch");
    if (m_.empty()) {
      for (const auto& [name, p] : params.items()) {
        m_.push_back(Matrix::Zero(p.rows(), p.cols()));
        v_.push_back(Matrix::Zero(p.rows(), p.cols()));
      }
    }
    double scale = 1.0;
    if (opt_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const Matrix& g : grads) sq += g.squaredNorm();
      const double norm = std::sqrt(sq);
      if (norm > opt_.clip_norm) scale = opt_.clip_norm / norm;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < grads.size(); ++k) {
      Matrix g = grads[k] * scale;
      if (!g.allFinite()) throw NumericsError(
          "optimizer: non-finite gradient for parameter '" + params.items()[k].first + "'");
      m_[k] = opt_.beta1 * m_[k] + (1.0 - opt_.beta1) * g;
      v_[k] = opt_.beta2 * v_[k] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
      const Matrix mhat = m_[k] / bc1;
      const Matrix vhat = v_[k] / bc2;
      params.items()[k].second -=
          opt_.lr * (mhat.array() / (vhat.array().sqrt() + opt_.eps)).matrix();
    }
  }

  std::int64_t steps_taken() const { return t_; }

 private:
  Options opt_;
  std::vector<Matrix> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace lstd
