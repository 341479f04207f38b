#pragma once

// Trainable parameters, the per-model parameter registry, and Adam.

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "glyphgen/tensor.hpp"

namespace glyphgen {

template <class S>
struct ParameterT {
  std::string name;
  TensorT<S> value;
  std::vector<S> grad;  // empty until populated

  ParameterT(std::string n, TensorT<S> v) : name(std::move(n)), value(std::move(v)) {}
};

template <class S>
using ParamPtr = std::shared_ptr<ParameterT<S>>;

// Ordered registry with unique names. A parameter shared between two modules
// is adopted once; the second adopt with the same pointer is a no-op, which
// is what keeps shared weights stored once in checkpoints.
template <class S>
class ParamStoreT {
 public:
  ParamPtr<S> create(const std::string& name, TensorT<S> init) {
    auto p = std::make_shared<ParameterT<S>>(name, std::move(init));
    adopt(p);
    return p;
  }

  void adopt(const ParamPtr<S>& p) {
    auto it = index_.find(p->name);
    if (it != index_.end()) {
      if (params_[it->second] == p) return;
      throw std::logic_error("parameter name '" + p->name + "' already registered");
    }
    index_.emplace(p->name, params_.size());
    params_.push_back(p);
  }

  const std::vector<ParamPtr<S>>& all() const { return params_; }

  ParamPtr<S> find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second];
  }

  std::size_t size() const { return params_.size(); }

 private:
  std::vector<ParamPtr<S>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class S>
void zero_grads(const std::vector<ParamPtr<S>>& params) {
  for (auto& p : params) p->grad.assign(static_cast<std::size_t>(p->value.size()), S(0));
}

// Add each parameter's tape gradient into its grad buffer. Parameters that
// were never bound on the tape are left untouched.
template <class S>
void accumulate_grads(TapeT<S>& tape, const std::vector<ParamPtr<S>>& params) {
  for (auto& p : params) {
    const int id = tape.leaf_id(p->value);
    if (id < 0) continue;
    const auto* g = tape.grad_by_id(id);
    if (!g) continue;
    if (p->grad.empty()) p->grad.assign(static_cast<std::size_t>(p->value.size()), S(0));
    for (std::size_t i = 0; i < g->size(); ++i) p->grad[i] += (*g)[i];
  }
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class S>
struct AdamStateT {
  std::int64_t step = 0;
  // first / second moment per parameter name
  std::unordered_map<std::string, std::pair<std::vector<S>, std::vector<S>>> moments;
};

using AdamState = AdamStateT<float>;

// One bias-corrected Adam update. Every parameter must have a populated grad.
template <class S>
void adam_step(const std::vector<ParamPtr<S>>& params, AdamStateT<S>& state,
               const AdamConfig& cfg) {
  for (auto& p : params) {
    if (p->grad.size() != static_cast<std::size_t>(p->value.size())) {
      throw std::runtime_error("adam_step: parameter '" + p->name + "' has no gradient");
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& p : params) {
    auto& [m, v] = state.moments[p->name];
    const std::size_t n = p->grad.size();
    if (m.empty()) {
      m.assign(n, S(0));
      v.assign(n, S(0));
    }
    std::vector<S> next(p->value.values());
    for (std::size_t i = 0; i < n; ++i) {
      const double g = static_cast<double>(p->grad[i]);
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<S>(mi);
      v[i] = static_cast<S>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      next[i] = static_cast<S>(static_cast<double>(next[i]) -
                               cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
    p->value = TensorT<S>(p->value.shape(), std::move(next));
  }
}

}  // namespace glyphgen
