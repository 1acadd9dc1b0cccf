#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fbseg/params.hpp"
#include "fbseg/tensor.hpp"

namespace fbseg {

template <typename T>
void sgd_step(ModelParams<T>& params, T lr) {
  for (auto& p : params.all()) {
    if (!p.tensor.has_grad()) continue;
    auto& d = p.tensor.data();
    const auto& g = p.tensor.grad();
    for (size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
  }
}

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<T>> m, v;

  AdamState() = default;
  explicit AdamState(const ModelParams<T>& params) {
    for (const auto& p : params.all()) {
      m.emplace_back(p.tensor.data().size(), T(0));
      v.emplace_back(p.tensor.data().size(), T(0));
    }
  }
};

template <typename T>
void adam_step(ModelParams<T>& params, AdamState<T>& state, T lr, T beta1 = T(0.9),
               T beta2 = T(0.999), T eps = T(1e-8)) {
  if (state.m.size() != params.size()) throw UsageError("adam state does not match params");
  ++state.step;
  const T bc1 = T(1) - std::pow(beta1, static_cast<T>(state.step));
  const T bc2 = T(1) - std::pow(beta2, static_cast<T>(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params.all()[pi].tensor;
    if (!p.has_grad()) continue;
    auto& d = p.data();
    const auto& g = p.grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (size_t i = 0; i < d.size(); ++i) {
      m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
      v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      d[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  int checked_elements = 0;
};

struct GradCheckOptions {
  double step = 1e-4;
  // 0 checks every element; otherwise a seeded random subset per parameter.
  int max_elems_per_param = 0;
  std::uint64_t seed = 0;
};

// f must rebuild the graph and return the scalar loss on every call; the
// analytic pass runs once, then each selected element is perturbed for a
// central difference. Relative error uses |a - n| / max(1e-8, |a| + |n|).
template <typename T>
std::vector<GradCheckReport> grad_check(const std::function<Tensor<T>()>& f,
                                        ModelParams<T>& params,
                                        const GradCheckOptions& opts = {}) {
  params.zero_grad();
  Tensor<T> loss = f();
  loss.backward();
  std::vector<std::vector<T>> analytic;
  for (auto& p : params.all()) analytic.push_back(p.tensor.grad());

  std::mt19937_64 rng(opts.seed);
  std::vector<GradCheckReport> reports;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params.all()[pi];
    std::vector<size_t> elems;
    const size_t n = p.tensor.data().size();
    if (opts.max_elems_per_param > 0 && n > static_cast<size_t>(opts.max_elems_per_param)) {
      std::vector<size_t> idx(n);
      for (size_t i = 0; i < n; ++i) idx[i] = i;
      std::shuffle(idx.begin(), idx.end(), rng);
      elems.assign(idx.begin(), idx.begin() + opts.max_elems_per_param);
    } else {
      elems.resize(n);
      for (size_t i = 0; i < n; ++i) elems[i] = i;
    }
    GradCheckReport rep{p.name, 0.0, static_cast<int>(elems.size())};
    for (size_t ei : elems) {
      T& slot = p.tensor.data()[ei];
      const T orig = slot;
      slot = orig + static_cast<T>(opts.step);
      const double fp = static_cast<double>(f().item());
      slot = orig - static_cast<T>(opts.step);
      const double fm = static_cast<double>(f().item());
      slot = orig;
      const double numeric = (fp - fm) / (2.0 * opts.step);
      const double a = static_cast<double>(analytic[pi][ei]);
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace fbseg
