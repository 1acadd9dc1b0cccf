#pragma once

// Naive nested-loop reference for the two feedback attention variants:
// 1x1 projections, pairwise exponentiated dot products, row normalization,
// weighted value sum, output projection and the scaled residual add. Written
// against raw vectors only; shares nothing with the tensor op path. Assumes
// eval mode with fresh batch-norm state (running mean 0, variance 1).

#include <cmath>
#include <vector>

#include "fbseg/attention.hpp"

namespace fbseg_test {

template <typename T>
fbseg::Tensor<T> feedback_attention_oracle(fbseg::Connector<T>& conn,
                                           const fbseg::Tensor<T>& f,
                                           const fbseg::Tensor<T>& o) {
  using fbseg::Shape;
  const bool self_variant = conn.config().variant == fbseg::Variant::Self;
  const Shape& s = f.shape();
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  const int hw = H * W, c8 = C / 8, c2 = C / 2;
  const double inv_std = 1.0 / std::sqrt(1.0 + 1e-5);

  auto& params = conn.params();
  auto wvec = [&](const char* name) { return params.at(name).tensor.data(); };
  const auto qw = wvec("attn.query.weight"), qg = wvec("attn.query.bn.gamma"),
             qb = wvec("attn.query.bn.beta");
  const auto kw = wvec("attn.key.weight"), kg = wvec("attn.key.bn.gamma"),
             kb = wvec("attn.key.bn.beta");
  const auto vw = wvec("attn.value.weight"), vg = wvec("attn.value.bn.gamma"),
             vb = wvec("attn.value.bn.beta");
  const auto ow = wvec("attn.out.weight");
  const bool out_bn = params.contains("attn.out.bn.gamma");
  const double scale = static_cast<double>(params.at("conn.scale").tensor.data()[0]);

  fbseg::Tensor<T> a(s);
  for (int n = 0; n < N; ++n) {
    auto plane = [&](const fbseg::Tensor<T>& t, int c, int i) {
      return static_cast<double>(t.data()[(static_cast<size_t>(n) * C + c) * hw + i]);
    };
    // 1x1 projection + eval-mode batch norm
    auto project = [&](const fbseg::Tensor<T>& src, const std::vector<T>& w,
                       const std::vector<T>& gamma, const std::vector<T>& beta, int out_ch) {
      std::vector<double> res(static_cast<size_t>(out_ch) * hw, 0.0);
      for (int co = 0; co < out_ch; ++co)
        for (int i = 0; i < hw; ++i) {
          double acc = 0.0;
          for (int ci = 0; ci < C; ++ci)
            acc += static_cast<double>(w[static_cast<size_t>(co) * C + ci]) * plane(src, ci, i);
          res[static_cast<size_t>(co) * hw + i] =
              acc * inv_std * static_cast<double>(gamma[co]) + static_cast<double>(beta[co]);
        }
      return res;
    };

    const fbseg::Tensor<T>& q_src = self_variant ? o : f;
    std::vector<double> q = project(q_src, qw, qg, qb, c8);
    std::vector<double> k = project(o, kw, kg, kb, c8);
    std::vector<double> v = project(o, vw, vg, vb, c2);

    // w_ij = exp(Query_i . Key_j) / sum_j exp(Query_i . Key_j)
    std::vector<double> attn(static_cast<size_t>(hw) * hw);
    for (int i = 0; i < hw; ++i) {
      double z = 0.0;
      for (int j = 0; j < hw; ++j) {
        double dot = 0.0;
        for (int c = 0; c < c8; ++c)
          dot += q[static_cast<size_t>(c) * hw + i] * k[static_cast<size_t>(c) * hw + j];
        attn[static_cast<size_t>(i) * hw + j] = std::exp(dot);
        z += attn[static_cast<size_t>(i) * hw + j];
      }
      for (int j = 0; j < hw; ++j) attn[static_cast<size_t>(i) * hw + j] /= z;
    }

    // weighted sum of Value over all positions; then 1x1 out projection
    std::vector<double> agg(static_cast<size_t>(c2) * hw, 0.0);
    for (int c = 0; c < c2; ++c)
      for (int i = 0; i < hw; ++i) {
        double acc = 0.0;
        for (int j = 0; j < hw; ++j)
          acc += attn[static_cast<size_t>(i) * hw + j] * v[static_cast<size_t>(c) * hw + j];
        agg[static_cast<size_t>(c) * hw + i] = acc;
      }
    for (int co = 0; co < C; ++co)
      for (int i = 0; i < hw; ++i) {
        double acc = 0.0;
        for (int ci = 0; ci < c2; ++ci)
          acc += static_cast<double>(ow[static_cast<size_t>(co) * c2 + ci]) *
                 agg[static_cast<size_t>(ci) * hw + i];
        if (out_bn) {
          const auto& og = params.at("attn.out.bn.gamma").tensor.data();
          const auto& ob = params.at("attn.out.bn.beta").tensor.data();
          acc = acc * inv_std * static_cast<double>(og[co]) + static_cast<double>(ob[co]);
        }
        a.data()[(static_cast<size_t>(n) * C + co) * hw + i] =
            static_cast<T>(scale * acc + plane(f, co, i));
      }
  }
  return a;
}

}  // namespace fbseg_test
