#pragma once

// Two-pass shared-weight execution, the training step, and IoU evaluation.
// Pass 1 runs the plain network to obtain (F, O, first logits); the connector
// maps (F, O) -> A; pass 2 reruns the same network with A injected at the
// tap. With detach_feedback (the default) F and O enter the connector as
// constants, so only second-pass gradients update the network.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "fbseg/attention.hpp"
#include "fbseg/data.hpp"
#include "fbseg/optim.hpp"
#include "fbseg/unet.hpp"

namespace fbseg {

template <typename T>
struct TwoPassOutput {
  Tensor<T> first_logits;
  Tensor<T> second_logits;
  Tensor<T> a;
  std::optional<AttentionMapView<T>> attn;
};

template <typename T>
TwoPassOutput<T> two_pass_forward(UNet<T>& unet, Connector<T>& conn, const Tensor<T>& x,
                                  Mode mode, bool detach_feedback = true,
                                  bool want_attn = false, bool update_running = true) {
  UNetTaps<T> first = unet.forward(x, nullptr, mode, update_running);
  if (conn.config().variant == Variant::None)
    return {first.logits, first.logits, first.f_tap, std::nullopt};
  Tensor<T> f = detach_feedback ? first.f_tap.detach() : first.f_tap;
  Tensor<T> o = detach_feedback ? first.o_final.detach() : first.o_final;
  ConnectorResult<T> cr = conn.apply(f, o, mode, update_running, want_attn);
  UNetTaps<T> second = unet.forward(x, &cr.a, mode, update_running);
  return {first.logits, second.logits, cr.a, std::move(cr.attn)};
}

// ---------------------------------------------------------------------------
// Batch assembly

template <typename T>
Tensor<T> batch_images(const std::vector<LabeledTile>& tiles, const std::vector<int>& idx,
                       const Normalization& norm) {
  if (idx.empty()) throw UsageError("empty batch");
  const int s = tiles[idx[0]].size;
  Tensor<T> x({static_cast<int>(idx.size()), 1, s, s});
  for (size_t n = 0; n < idx.size(); ++n) {
    const auto& t = tiles[idx[n]];
    if (t.size != s) throw DataError("mixed tile sizes in batch");
    T* dst = x.data().data() + n * static_cast<size_t>(s) * s;
    for (size_t i = 0; i < t.image.size(); ++i)
      dst[i] = static_cast<T>((t.image[i] - norm.mean) / norm.stddev);
  }
  return x;
}

inline LabelMap batch_labels(const std::vector<LabeledTile>& tiles,
                             const std::vector<int>& idx) {
  const int s = tiles[idx[0]].size;
  LabelMap m;
  m.n = static_cast<int>(idx.size());
  m.h = m.w = s;
  m.values.reserve(static_cast<size_t>(m.n) * s * s);
  for (int i : idx)
    for (std::uint8_t v : tiles[i].labels) m.values.push_back(v);
  return m;
}

// ---------------------------------------------------------------------------
// Training step

template <typename T>
struct TrainState {
  ModelParams<T> all_params;  // U-Net + connector, jointly optimized
  AdamState<T> adam;
  bool use_adam = true;
  T lr;

  TrainState(UNet<T>& unet, Connector<T>& conn, T learning_rate) : lr(learning_rate) {
    all_params.merge(unet.params());
    all_params.merge(conn.params());
    adam = AdamState<T>(all_params);
  }
};

template <typename T>
T train_step(UNet<T>& unet, Connector<T>& conn, TrainState<T>& state, const Tensor<T>& x,
             const LabelMap& labels, bool detach_feedback = true) {
  TwoPassOutput<T> out = two_pass_forward(unet, conn, x, Mode::Train, detach_feedback);
  Tensor<T> loss = cross_entropy_loss(out.second_logits, labels);
  const T lv = loss.item();
  if (!std::isfinite(static_cast<double>(lv))) {
    double pnorm = 0.0;
    for (const auto& p : state.all_params.all())
      for (T v : p.tensor.data()) pnorm += static_cast<double>(v) * v;
    throw NumericError("non-finite loss " + std::to_string(static_cast<double>(lv)) +
                       " (parameter sq-norm " + std::to_string(pnorm) + ")");
  }
  state.all_params.zero_grad();
  loss.backward();
  if (state.use_adam)
    adam_step(state.all_params, state.adam, state.lr);
  else
    sgd_step(state.all_params, state.lr);
  return lv;
}

// ---------------------------------------------------------------------------
// Evaluation

struct MetricsRecord {
  std::string variant;
  int fold = 0;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::string pass;  // "first" | "second"
  std::vector<double> per_class_iou;
  double mean_iou = 0.0;
  double loss = 0.0;
};

struct ConfusionCounts {
  std::vector<std::int64_t> tp, fp, fn;
  explicit ConfusionCounts(int k) : tp(k, 0), fp(k, 0), fn(k, 0) {}

  // Micro-aggregated IoU per class; classes absent from both prediction and
  // truth count as IoU 1.
  std::vector<double> iou() const {
    std::vector<double> out(tp.size());
    for (size_t c = 0; c < tp.size(); ++c) {
      const std::int64_t denom = tp[c] + fp[c] + fn[c];
      out[c] = denom == 0 ? 1.0 : static_cast<double>(tp[c]) / denom;
    }
    return out;
  }
};

template <typename T>
void accumulate_confusion(const Tensor<T>& logits, const LabelMap& labels,
                          ConfusionCounts& conf) {
  const Shape& s = logits.shape();
  const int N = s[0], K = s[1], H = s[2], W = s[3];
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        int pred = 0;
        T best = logits.at(n, 0, h, w);
        for (int c = 1; c < K; ++c)
          if (logits.at(n, c, h, w) > best) {
            best = logits.at(n, c, h, w);
            pred = c;
          }
        const int truth = labels.values[(static_cast<size_t>(n) * H + h) * W + w];
        if (pred == truth) {
          ++conf.tp[truth];
        } else {
          ++conf.fp[pred];
          ++conf.fn[truth];
        }
      }
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Evaluates one split; returns records for the first and second pass.
template <typename T>
std::vector<MetricsRecord> evaluate(UNet<T>& unet, Connector<T>& conn,
                                    const std::vector<LabeledTile>& tiles,
                                    const std::vector<int>& indices, const Normalization& norm,
                                    int batch_size, bool detach_feedback = true) {
  if (indices.empty()) throw UsageError("evaluate: empty split");
  const int k = unet.config().num_classes;
  ConfusionCounts conf_first(k), conf_second(k);
  double loss_first = 0.0, loss_second = 0.0;
  std::int64_t n_pix = 0;
  for (size_t start = 0; start < indices.size(); start += batch_size) {
    std::vector<int> idx(indices.begin() + start,
                         indices.begin() + std::min(indices.size(), start + batch_size));
    Tensor<T> x = batch_images<T>(tiles, idx, norm);
    LabelMap lbl = batch_labels(tiles, idx);
    TwoPassOutput<T> out = two_pass_forward(unet, conn, x, Mode::Eval, detach_feedback);
    accumulate_confusion(out.first_logits, lbl, conf_first);
    accumulate_confusion(out.second_logits, lbl, conf_second);
    const std::int64_t pix = static_cast<std::int64_t>(lbl.n) * lbl.h * lbl.w;
    loss_first += static_cast<double>(cross_entropy_loss(out.first_logits, lbl).item()) * pix;
    loss_second += static_cast<double>(cross_entropy_loss(out.second_logits, lbl).item()) * pix;
    n_pix += pix;
  }
  MetricsRecord first, second;
  first.pass = "first";
  first.per_class_iou = conf_first.iou();
  first.mean_iou = mean_of(first.per_class_iou);
  first.loss = loss_first / n_pix;
  second.pass = "second";
  second.per_class_iou = conf_second.iou();
  second.mean_iou = mean_of(second.per_class_iou);
  second.loss = loss_second / n_pix;
  return {first, second};
}

}  // namespace fbseg
