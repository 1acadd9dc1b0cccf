#pragma once

#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "fbseg/common.hpp"
#include "fbseg/tensor.hpp"

namespace fbseg {

enum class ParamKind { ConvKernel, BnGamma, BnBeta, ScaleScalar };

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  ParamKind kind = ParamKind::ConvKernel;
};

// Named collection of learnable tensors. Names are unique; tensors are
// handles, so the collection and the owning layers share storage.
template <typename T>
class ModelParams {
 public:
  void add(std::string name, Tensor<T> tensor, ParamKind kind) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    if (kind == ParamKind::ScaleScalar && tensor.shape() != Shape{1, 1, 1, 1})
      throw ConfigError("scale-scalar parameter must be shape (1,1,1,1): " + name);
    index_[name] = params_.size();
    params_.push_back({std::move(name), std::move(tensor), kind});
  }

  void merge(const ModelParams& other) {
    for (const auto& p : other.params_) add(p.name, p.tensor, p.kind);
  }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter: " + name);
    return params_[it->second];
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }
  size_t size() const { return params_.size(); }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.tensor.data());
    return out;
  }

  void restore(const std::vector<std::vector<T>>& snap) {
    if (snap.size() != params_.size()) throw UsageError("snapshot size mismatch");
    for (size_t i = 0; i < snap.size(); ++i) params_[i].tensor.data() = snap[i];
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, size_t> index_;
};

// He-style init: zero-mean normal with stddev sqrt(2 / fan_in).
template <typename T>
Tensor<T> he_init(Shape shape, int fan_in, std::mt19937_64& rng) {
  Tensor<T> t(shape, true);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / std::max(1, fan_in)));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace fbseg
