#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "slotid/autodiff.hpp"
#include "slotid/rng.hpp"

namespace slotid {

template <class T>
struct Param {
  std::string name;
  ad::Var<T> var;
  bool trainable = false;
};

/// Owns every named parameter of a model; frozen parameters are plain constants in the graph.
template <class T>
class ParamStore {
 public:
  ad::Var<T> add(const std::string& name, Tensor<T> init, bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.push_back({name, ad::Var<T>(std::move(init), trainable), trainable});
    return params_.back().var;
  }

  /// Gaussian init with the given standard deviation.
  ad::Var<T> normal(const std::string& name, Shape shape, double stddev, bool trainable, Rng& rng) {
    return add(name, rng.normal_tensor<T>(std::move(shape), stddev), trainable);
  }
  ad::Var<T> zeros(const std::string& name, Shape shape, bool trainable) {
    return add(name, Tensor<T>(std::move(shape)), trainable);
  }
  ad::Var<T> ones(const std::string& name, Shape shape, bool trainable) {
    return add(name, Tensor<T>(std::move(shape), T(1)), trainable);
  }

  std::vector<Param<T>>& all() { return params_; }
  const std::vector<Param<T>>& all() const { return params_; }

  Param<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<ad::Var<T>> trainable() const {
    std::vector<ad::Var<T>> out;
    for (const auto& p : params_)
      if (p.trainable) out.push_back(p.var);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += p.var.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_)
      if (p.trainable) p.var.zero_grad();
  }

  /// FNV-1a over the raw bytes of all frozen parameters, in registration order.
  std::uint64_t frozen_hash() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& p : params_) {
      if (p.trainable) continue;
      for (unsigned char c : p.name) h = (h ^ c) * 0x100000001B3ULL;
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.var.value().data());
      for (std::size_t i = 0; i < p.var.value().size() * sizeof(T); ++i) h = (h ^ bytes[i]) * 0x100000001B3ULL;
    }
    return h;
  }

 private:
  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace slotid
