#pragma once

// Feedback connectors: map the pair (F, O) — early encoder feature map and
// final decoder feature map — to the feedback-enriched map A. Two attention
// variants (source-target and self) plus four simpler ablation connectors.
// Every variant gates its branch with a scale scalar initialized to zero, so
// each connector is an exact identity on F at initialization.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fbseg/params.hpp"
#include "fbseg/tensor.hpp"

namespace fbseg {

enum class Variant { None, SourceTarget, Self, Add, Conv1x1, SE, Light };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::None: return "unet";
    case Variant::SourceTarget: return "st";
    case Variant::Self: return "self";
    case Variant::Add: return "add";
    case Variant::Conv1x1: return "conv1x1";
    case Variant::SE: return "se";
    case Variant::Light: return "light";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "unet" || s == "none") return Variant::None;
  if (s == "st") return Variant::SourceTarget;
  if (s == "self") return Variant::Self;
  if (s == "add") return Variant::Add;
  if (s == "conv1x1") return Variant::Conv1x1;
  if (s == "se") return Variant::SE;
  if (s == "light") return Variant::Light;
  throw UsageError("unknown variant '" + s +
                   "' (valid: unet, st, self, add, conv1x1, se, light)");
}

struct AttentionConfig {
  Variant variant = Variant::Self;
  // Swaps the Query/Key sources in the source-target variant (experiment
  // flag; the default assigns Query <- F, Key/Value <- O).
  bool swap_query_key = false;
  int se_reduction = 16;
  std::int64_t position_budget = 8192;  // max H*W for a full attention matrix
};

// Row-stochastic (H*W)x(H*W) attention weights, one matrix per batch item.
template <typename T>
struct AttentionMapView {
  int h = 0, w = 0;
  std::vector<std::vector<T>> per_batch;  // each (h*w)*(h*w), row-major
};

template <typename T>
struct ConnectorResult {
  Tensor<T> a;
  std::optional<AttentionMapView<T>> attn;
};

template <typename T>
class Connector {
 public:
  Connector(AttentionConfig cfg, int channels, std::uint64_t seed)
      : cfg_(cfg), channels_(channels) {
    std::mt19937_64 rng(seed);
    const int c = channels;
    switch (cfg_.variant) {
      case Variant::None:
        return;
      case Variant::SourceTarget:
      case Variant::Self: {
        if (c % 8)
          throw ConfigError("attention requires channels divisible by 8, got " +
                            std::to_string(c));
        const int c8 = c / 8, c2 = c / 2;
        query_ = make_proj("attn.query", c, c8, /*bn=*/true, rng);
        key_ = make_proj("attn.key", c, c8, /*bn=*/true, rng);
        value_ = make_proj("attn.value", c, c2, /*bn=*/true, rng);
        out_ = make_proj("attn.out", c2, c, cfg_.variant == Variant::SourceTarget, rng);
        break;
      }
      case Variant::Add:
        break;
      case Variant::Conv1x1:
        conv_w_ = he_init<T>({c, c, 1, 1}, c, rng);
        params_.add("conn.conv.weight", conv_w_, ParamKind::ConvKernel);
        break;
      case Variant::SE: {
        const int hidden = std::max(1, c / cfg_.se_reduction);
        se_w1_ = he_init<T>({hidden, c, 1, 1}, c, rng);
        se_w2_ = he_init<T>({c, hidden, 1, 1}, hidden, rng);
        params_.add("conn.se.fc1.weight", se_w1_, ParamKind::ConvKernel);
        params_.add("conn.se.fc2.weight", se_w2_, ParamKind::ConvKernel);
        break;
      }
      case Variant::Light:
        conv_w_ = he_init<T>({c, c, 3, 3}, c * 9, rng);
        params_.add("conn.conv.weight", conv_w_, ParamKind::ConvKernel);
        break;
    }
    scale_ = Tensor<T>::zeros({1, 1, 1, 1}, true);
    params_.add("conn.scale", scale_, ParamKind::ScaleScalar);
  }

  ModelParams<T>& params() { return params_; }
  const AttentionConfig& config() const { return cfg_; }

  void collect_bn_states(std::vector<BNState<T>*>& out) {
    for (Proj* p : {&query_, &key_, &value_, &out_})
      if (p->has_bn) out.push_back(&p->bn);
  }

  ConnectorResult<T> apply(const Tensor<T>& f, const Tensor<T>& o, Mode mode,
                           bool update_running = true, bool want_attn = false) {
    if (cfg_.variant == Variant::None) return {f, std::nullopt};
    check_same_shape(f, o, "connector");
    if (f.shape()[1] != channels_)
      throw DimensionError("connector built for " + std::to_string(channels_) +
                           " channels, got " + shape_str(f.shape()));
    switch (cfg_.variant) {
      case Variant::SourceTarget:
      case Variant::Self:
        return attention(f, o, mode, update_running, want_attn);
      case Variant::Add:
        return {scale_add(scale_, o, f), std::nullopt};
      case Variant::Conv1x1:
        return {scale_add(scale_, conv2d(o, conv_w_, 1, 0), f), std::nullopt};
      case Variant::SE: {
        Tensor<T> gate = sigmoid(conv2d(relu(conv2d(global_avg_pool(o), se_w1_, 1, 0)),
                                        se_w2_, 1, 0));
        return {scale_add(scale_, mul_channel(o, gate), f), std::nullopt};
      }
      case Variant::Light: {
        Tensor<T> gate = sigmoid(conv2d(o, conv_w_, 1, 1));
        return {scale_add(scale_, mul(o, gate), f), std::nullopt};
      }
      default:
        return {f, std::nullopt};
    }
  }

 private:
  struct Proj {
    Tensor<T> w, gamma, beta;
    BNState<T> bn;
    bool has_bn = false;
  };

  Proj make_proj(const std::string& name, int in_ch, int out_ch, bool bn,
                 std::mt19937_64& rng) {
    Proj p;
    p.w = he_init<T>({out_ch, in_ch, 1, 1}, in_ch, rng);
    params_.add(name + ".weight", p.w, ParamKind::ConvKernel);
    p.has_bn = bn;
    if (bn) {
      p.gamma = Tensor<T>::full({1, out_ch, 1, 1}, T(1), true);
      p.beta = Tensor<T>::zeros({1, out_ch, 1, 1}, true);
      p.bn = BNState<T>(out_ch);
      params_.add(name + ".bn.gamma", p.gamma, ParamKind::BnGamma);
      params_.add(name + ".bn.beta", p.beta, ParamKind::BnBeta);
    }
    return p;
  }

  Tensor<T> project(Proj& p, const Tensor<T>& x, Mode mode, bool update_running) {
    Tensor<T> h = conv2d(x, p.w, 1, 0);
    if (p.has_bn) h = batchnorm2d(h, p.gamma, p.beta, p.bn, mode, update_running);
    return h;
  }

  ConnectorResult<T> attention(const Tensor<T>& f, const Tensor<T>& o, Mode mode,
                               bool update_running, bool want_attn) {
    const Shape& s = f.shape();
    const int N = s[0], C = s[1], H = s[2], W = s[3];
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    if (hw > cfg_.position_budget)
      throw ConfigError("attention matrix " + std::to_string(hw) + "^2 exceeds position budget " +
                        std::to_string(cfg_.position_budget));
    const int c8 = C / 8, c2 = C / 2;
    const bool self_variant = cfg_.variant == Variant::Self;
    const Tensor<T>& q_src = self_variant ? o : (cfg_.swap_query_key ? o : f);
    const Tensor<T>& k_src = self_variant ? o : (cfg_.swap_query_key ? f : o);

    Tensor<T> q = project(query_, q_src, mode, update_running);
    Tensor<T> k = project(key_, k_src, mode, update_running);
    Tensor<T> v = project(value_, o, mode, update_running);

    // Rows index Query positions, columns Key positions.
    Tensor<T> qt = transpose_mat(reshape(q, {N, 1, c8, static_cast<int>(hw)}));
    Tensor<T> km = reshape(k, {N, 1, c8, static_cast<int>(hw)});
    Tensor<T> attn = softmax_rows(matmul(qt, km));

    Tensor<T> vt = transpose_mat(reshape(v, {N, 1, c2, static_cast<int>(hw)}));
    Tensor<T> agg = reshape(transpose_mat(matmul(attn, vt)), {N, c2, H, W});
    Tensor<T> proj = project(out_, agg, mode, update_running);
    Tensor<T> a = scale_add(scale_, proj, f);

    ConnectorResult<T> res{a, std::nullopt};
    if (want_attn) {
      AttentionMapView<T> view;
      view.h = H;
      view.w = W;
      const size_t mat = static_cast<size_t>(hw) * hw;
      for (int n = 0; n < N; ++n)
        view.per_batch.emplace_back(attn.data().begin() + n * mat,
                                    attn.data().begin() + (n + 1) * mat);
      res.attn = std::move(view);
    }
    return res;
  }

  AttentionConfig cfg_;
  int channels_ = 0;
  ModelParams<T> params_;
  Proj query_, key_, value_, out_;
  Tensor<T> conv_w_, se_w1_, se_w2_, scale_;
};

}  // namespace fbseg
