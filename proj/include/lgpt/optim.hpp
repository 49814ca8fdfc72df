#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lgpt/tensor.hpp"

namespace lgpt {

/// Named parameter tensors in declaration order. Names use dotted paths
/// ("gnn_graph.layer0.w_query"); the segment before the first dot is the
/// parameter group.
class ParameterStore {
 public:
  Tensor& add(std::string name, Tensor t) {
    if (index_.count(name)) throw ContractError("parameter '" + name + "' declared twice");
    t.set_requires_grad(!frozen_);
    index_[name] = entries_.size();
    entries_.emplace_back(std::move(name), std::move(t));
    return entries_.back().second;
  }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

  /// Frozen parameters stop requiring gradients and refuse optimizer steps.
  void freeze() {
    frozen_ = true;
    for (auto& [name, t] : entries_) t.set_requires_grad(false);
  }
  bool frozen() const { return frozen_; }

  /// Deep copy of all values (for best-checkpoint bookkeeping).
  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    out.reserve(entries_.size());
    for (const auto& [name, t] : entries_) out.emplace_back(t.data().begin(), t.data().end());
    return out;
  }
  void restore(const std::vector<std::vector<double>>& snap) {
    if (snap.size() != entries_.size()) throw ContractError("restore: snapshot size mismatch");
    for (std::size_t i = 0; i < snap.size(); ++i) {
      auto dst = entries_[i].second.mutable_data();
      if (dst.size() != snap[i].size()) throw ContractError("restore: tensor size mismatch");
      std::copy(snap[i].begin(), snap[i].end(), dst.begin());
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
  bool frozen_ = false;
};

inline std::string group_of(const std::string& name) {
  return name.substr(0, name.find('.'));
}

/// 64-bit FNV-1a over shapes and raw value bits, in declaration order.
inline std::uint64_t parameter_digest(const ParameterStore& store) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t word) {
    for (int b = 0; b < 8; ++b) {
      h ^= (word >> (8 * b)) & 0xffU;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : store.entries()) {
    for (auto s : t.shape()) mix(s);
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      mix(bits);
    }
  }
  return h;
}

inline std::string digest_hex(std::uint64_t d) {
  static const char* hex = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, d >>= 4) s[static_cast<std::size_t>(i)] = hex[d & 0xf];
  return s;
}

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Decoupled-weight-decay Adam with bias correction. Moment buffers are
/// keyed by parameter name so a subset of a store can be optimized.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg_.lr > 0.0)) throw ConfigError("AdamW: lr must be positive");
  }

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return step_; }
  const std::vector<double>& first_moment(const std::string& name) const { return m_.at(name); }
  const std::vector<double>& second_moment(const std::string& name) const { return v_.at(name); }

  /// Updates every parameter of `store` whose name is in `names` (all when empty).
  void step(ParameterStore& store, const std::vector<std::string>& names = {}) {
    if (store.frozen()) throw ContractError("AdamW: refusing to update a frozen parameter store");
    std::vector<std::pair<std::string, Tensor*>> targets;
    if (names.empty()) {
      for (auto& [name, t] : store.entries()) targets.emplace_back(name, &t);
    } else {
      for (const auto& name : names) targets.emplace_back(name, &store.get(name));
    }
    for (const auto& [name, t] : targets) {
      for (double g : t->grad_view()) {
        if (!std::isfinite(g)) throw NumericError("AdamW: non-finite gradient in parameter group '" + group_of(name) + "' (" + name + ")");
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const auto& [name, t] : targets) {
      auto p = t->mutable_data();
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(p.size(), 0.0);
        v.assign(p.size(), 0.0);
      }
      const auto g = t->grad_view();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g.empty() ? 0.0 : g[i];
        p[i] -= cfg_.lr * cfg_.weight_decay * p[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace lgpt
