#pragma once

// Encoder-decoder U-Net exposing the two feature maps feedback needs: the
// early encoder map F (tap) and the final decoder map O. A feedback pass
// injects a replacement for F and computation proceeds from there.

#include <random>
#include <string>
#include <vector>

#include "fbseg/params.hpp"
#include "fbseg/tensor.hpp"

namespace fbseg {

enum class TapLocation { AfterConv1, AfterConv2 };

inline const char* to_string(TapLocation t) {
  return t == TapLocation::AfterConv1 ? "after-conv1" : "after-conv2";
}

struct UNetConfig {
  int base_channels = 8;
  int depth = 4;
  int num_classes = 4;
  int input_channels = 1;
  bool use_bn_in_blocks = true;
  TapLocation tap_location = TapLocation::AfterConv2;

  void validate() const {
    if (base_channels < 8)
      throw ConfigError("base_channels must be >= 8 (C/8 >= 1 in attention), got " +
                        std::to_string(base_channels));
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
  }
};

template <typename T>
struct UNetTaps {
  Tensor<T> logits;   // (N, num_classes, H, W)
  Tensor<T> f_tap;    // (N, base_channels, H, W)
  Tensor<T> o_final;  // (N, base_channels, H, W)
};

template <typename T>
class UNet {
 public:
  UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const int base = cfg_.base_channels;
    int in_ch = cfg_.input_channels;
    for (int i = 0; i < cfg_.depth; ++i) {
      const int out_ch = base << i;
      enc_.push_back(make_block("enc" + std::to_string(i + 1), in_ch, out_ch, rng));
      in_ch = out_ch;
    }
    bottleneck_ = make_block("bottleneck", base << (cfg_.depth - 1), base << cfg_.depth, rng);
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      const int hi = base << (i + 1);
      const int lo = base << i;
      Dec d;
      d.up_w = he_init<T>({hi, lo, 2, 2}, hi * 4, rng);
      params_.add("dec" + std::to_string(i + 1) + ".up.weight", d.up_w, ParamKind::ConvKernel);
      d.block = make_block("dec" + std::to_string(i + 1), 2 * lo, lo, rng);
      dec_.insert(dec_.begin(), std::move(d));
    }
    head_w_ = he_init<T>({cfg_.num_classes, base, 1, 1}, base, rng);
    params_.add("head.weight", head_w_, ParamKind::ConvKernel);
  }

  ModelParams<T>& params() { return params_; }
  const UNetConfig& config() const { return cfg_; }

  void collect_bn_states(std::vector<BNState<T>*>& out) {
    for (auto& b : enc_) push_block_bn(b, out);
    push_block_bn(bottleneck_, out);
    for (auto& d : dec_) push_block_bn(d.block, out);
  }

  Shape tap_shape(int n, int h, int w) const { return {n, cfg_.base_channels, h, w}; }

  UNetTaps<T> forward(const Tensor<T>& x, const Tensor<T>* injected_f, Mode mode,
                      bool update_running = true) {
    const Shape& xs = x.shape();
    const int div = 1 << cfg_.depth;
    if (xs[2] % div || xs[3] % div)
      throw ConfigError("input " + shape_str(xs) + " not divisible by 2^depth = " +
                        std::to_string(div));
    if (xs[1] != cfg_.input_channels)
      throw ConfigError("input channels " + std::to_string(xs[1]) + " != configured " +
                        std::to_string(cfg_.input_channels));
    if (injected_f) {
      Shape want = tap_shape(xs[0], xs[2], xs[3]);
      if (injected_f->shape() != want)
        throw DimensionError("injected feature map " + shape_str(injected_f->shape()) +
                             " does not match tap shape " + shape_str(want));
    }

    UNetTaps<T> taps;
    std::vector<Tensor<T>> skips;
    Tensor<T> cur = x;
    for (int i = 0; i < cfg_.depth; ++i) {
      if (i == 0) {
        cur = block_forward_tapped(enc_[0], cur, injected_f, mode, update_running, taps.f_tap);
      } else {
        cur = block_forward(enc_[i], cur, mode, update_running);
      }
      skips.push_back(cur);
      cur = maxpool2d(cur);
    }
    cur = block_forward(bottleneck_, cur, mode, update_running);
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      Tensor<T> up = conv_transpose2d(cur, dec_[i].up_w, 2);
      cur = block_forward(dec_[i].block, concat_channels(skips[i], up), mode, update_running);
    }
    taps.o_final = cur;
    taps.logits = conv2d(cur, head_w_, 1, 0);
    return taps;
  }

 private:
  struct Block {
    Tensor<T> w1, g1, b1, w2, g2, b2;
    BNState<T> bn1, bn2;
    bool use_bn = true;
  };
  struct Dec {
    Tensor<T> up_w;
    Block block;
  };

  static void push_block_bn(Block& b, std::vector<BNState<T>*>& out) {
    if (b.use_bn) {
      out.push_back(&b.bn1);
      out.push_back(&b.bn2);
    }
  }

  Block make_block(const std::string& name, int in_ch, int out_ch, std::mt19937_64& rng) {
    Block b;
    b.use_bn = cfg_.use_bn_in_blocks;
    b.w1 = he_init<T>({out_ch, in_ch, 3, 3}, in_ch * 9, rng);
    b.w2 = he_init<T>({out_ch, out_ch, 3, 3}, out_ch * 9, rng);
    params_.add(name + ".conv1.weight", b.w1, ParamKind::ConvKernel);
    params_.add(name + ".conv2.weight", b.w2, ParamKind::ConvKernel);
    if (b.use_bn) {
      b.g1 = Tensor<T>::full({1, out_ch, 1, 1}, T(1), true);
      b.b1 = Tensor<T>::zeros({1, out_ch, 1, 1}, true);
      b.g2 = Tensor<T>::full({1, out_ch, 1, 1}, T(1), true);
      b.b2 = Tensor<T>::zeros({1, out_ch, 1, 1}, true);
      b.bn1 = BNState<T>(out_ch);
      b.bn2 = BNState<T>(out_ch);
      params_.add(name + ".bn1.gamma", b.g1, ParamKind::BnGamma);
      params_.add(name + ".bn1.beta", b.b1, ParamKind::BnBeta);
      params_.add(name + ".bn2.gamma", b.g2, ParamKind::BnGamma);
      params_.add(name + ".bn2.beta", b.b2, ParamKind::BnBeta);
    }
    return b;
  }

  Tensor<T> conv_bn_relu(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& g,
                         const Tensor<T>& b, BNState<T>& st, bool use_bn, Mode mode,
                         bool update_running) {
    Tensor<T> h = conv2d(x, w, 1, 1);
    if (use_bn) h = batchnorm2d(h, g, b, st, mode, update_running);
    return relu(h);
  }

  Tensor<T> block_forward(Block& b, const Tensor<T>& x, Mode mode, bool update_running) {
    Tensor<T> h = conv_bn_relu(x, b.w1, b.g1, b.b1, b.bn1, b.use_bn, mode, update_running);
    return conv_bn_relu(h, b.w2, b.g2, b.b2, b.bn2, b.use_bn, mode, update_running);
  }

  // First encoder block: records the tap, or resumes from an injected map.
  // Stages upstream of the injection point are skipped entirely.
  Tensor<T> block_forward_tapped(Block& b, const Tensor<T>& x, const Tensor<T>* injected,
                                 Mode mode, bool update_running, Tensor<T>& tap_out) {
    Tensor<T> h;
    if (injected && cfg_.tap_location == TapLocation::AfterConv1) {
      h = *injected;
    } else if (!injected || cfg_.tap_location == TapLocation::AfterConv2) {
      if (injected) {
        tap_out = *injected;
        return *injected;
      }
      h = conv_bn_relu(x, b.w1, b.g1, b.b1, b.bn1, b.use_bn, mode, update_running);
    }
    if (cfg_.tap_location == TapLocation::AfterConv1) tap_out = h;
    Tensor<T> out = conv_bn_relu(h, b.w2, b.g2, b.b2, b.bn2, b.use_bn, mode, update_running);
    if (cfg_.tap_location == TapLocation::AfterConv2) tap_out = out;
    return out;
  }

  UNetConfig cfg_;
  ModelParams<T> params_;
  std::vector<Block> enc_;
  Block bottleneck_;
  std::vector<Dec> dec_;
  Tensor<T> head_w_;
};

}  // namespace fbseg
