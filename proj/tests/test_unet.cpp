#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "fbseg/unet.hpp"

using namespace fbseg;

namespace {

// Parameter count as a pure function of the configuration.
std::int64_t expected_param_count(const UNetConfig& c) {
  auto block = [&](std::int64_t in, std::int64_t out) {
    std::int64_t n = out * in * 9 + out * out * 9;  // two 3x3 convs
    if (c.use_bn_in_blocks) n += 4 * out;           // two gamma/beta pairs
    return n;
  };
  std::int64_t total = 0;
  std::int64_t in = c.input_channels;
  for (int i = 0; i < c.depth; ++i) {
    const std::int64_t out = static_cast<std::int64_t>(c.base_channels) << i;
    total += block(in, out);
    in = out;
  }
  const std::int64_t bot = static_cast<std::int64_t>(c.base_channels) << c.depth;
  total += block(bot / 2, bot);
  for (int i = c.depth - 1; i >= 0; --i) {
    const std::int64_t lo = static_cast<std::int64_t>(c.base_channels) << i;
    total += (2 * lo) * lo * 4;  // 2x2 up-conv
    total += block(2 * lo, lo);
  }
  total += static_cast<std::int64_t>(c.num_classes) * c.base_channels;  // 1x1 head
  return total;
}

template <typename T>
std::int64_t actual_param_count(UNet<T>& u) {
  std::int64_t n = 0;
  for (const auto& p : u.params().all()) n += p.tensor.numel();
  return n;
}

template <typename T>
Tensor<T> random_input(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> t(s);
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

TEST_CASE("channel schedule and parameter count at full-scale widths") {
  UNetConfig cfg;
  cfg.base_channels = 64;
  cfg.depth = 4;
  UNet<float> u(cfg, 1);
  // encoder widths 64,128,256,512 and 1024 at the bottleneck
  CHECK(u.params().at("enc1.conv2.weight").tensor.shape() == Shape{64, 64, 3, 3});
  CHECK(u.params().at("enc2.conv1.weight").tensor.shape() == Shape{128, 64, 3, 3});
  CHECK(u.params().at("enc3.conv1.weight").tensor.shape() == Shape{256, 128, 3, 3});
  CHECK(u.params().at("enc4.conv1.weight").tensor.shape() == Shape{512, 256, 3, 3});
  CHECK(u.params().at("bottleneck.conv1.weight").tensor.shape() == Shape{1024, 512, 3, 3});
  CHECK(actual_param_count(u) == expected_param_count(cfg));
}

TEST_CASE("parameter count oracle across configs") {
  for (int base : {8, 16})
    for (int depth : {2, 3}) {
      UNetConfig cfg;
      cfg.base_channels = base;
      cfg.depth = depth;
      UNet<float> u(cfg, 2);
      CHECK(actual_param_count(u) == expected_param_count(cfg));
    }
}

TEST_CASE("same config and seed give identical parameters") {
  UNetConfig cfg;
  cfg.depth = 2;
  UNet<float> a(cfg, 42), b(cfg, 42);
  for (size_t i = 0; i < a.params().size(); ++i)
    CHECK(a.params().all()[i].tensor.data() == b.params().all()[i].tensor.data());
  UNet<float> c(cfg, 43);
  CHECK(a.params().at("enc1.conv1.weight").tensor.data() !=
        c.params().at("enc1.conv1.weight").tensor.data());
}

TEST_CASE("config contract violations") {
  UNetConfig cfg;
  cfg.base_channels = 4;
  CHECK_THROWS_AS(UNet<float>(cfg, 1), ConfigError);

  UNetConfig ok;
  UNet<float> u(ok, 1);
  // 48x48 is divisible by 2^4 and therefore valid; 40x40 is not.
  CHECK_NOTHROW(u.forward(Tensor<float>({1, 1, 48, 48}), nullptr, Mode::Eval));
  CHECK_THROWS_AS(u.forward(Tensor<float>({1, 1, 40, 40}), nullptr, Mode::Eval), ConfigError);
}

TEST_CASE("forward shape contract") {
  UNetConfig cfg;  // base 8, depth 4, 4 classes
  UNet<float> u(cfg, 7);
  Tensor<float> x = random_input<float>({1, 1, 64, 64}, 3);
  UNetTaps<float> taps = u.forward(x, nullptr, Mode::Eval);
  CHECK(taps.logits.shape() == Shape{1, 4, 64, 64});
  CHECK(taps.f_tap.shape() == Shape{1, 8, 64, 64});
  CHECK(taps.o_final.shape() == Shape{1, 8, 64, 64});
}

TEST_CASE("substitution identity holds bit-exactly in eval mode") {
  for (TapLocation tap : {TapLocation::AfterConv1, TapLocation::AfterConv2}) {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.tap_location = tap;
    UNet<float> u(cfg, 11);
    Tensor<float> x = random_input<float>({2, 1, 16, 16}, 5);
    UNetTaps<float> plain = u.forward(x, nullptr, Mode::Eval);
    Tensor<float> f = plain.f_tap.detach();
    UNetTaps<float> injected = u.forward(x, &f, Mode::Eval);
    CHECK(injected.logits.data() == plain.logits.data());
  }
}

TEST_CASE("injected feature map shape mismatch is a dimension error") {
  UNetConfig cfg;
  cfg.depth = 2;
  UNet<float> u(cfg, 11);
  Tensor<float> x = random_input<float>({1, 1, 16, 16}, 5);
  Tensor<float> bad({1, 8, 8, 8});
  CHECK_THROWS_AS(u.forward(x, &bad, Mode::Eval), DimensionError);
}

TEST_CASE("all parameters receive nonzero gradient on a random batch") {
  UNetConfig cfg;
  cfg.depth = 2;
  UNet<double> u(cfg, 13);
  Tensor<double> x = random_input<double>({2, 1, 16, 16}, 17);
  UNetTaps<double> taps = u.forward(x, nullptr, Mode::Train);
  std::mt19937_64 rng(19);
  LabelMap lbl{2, 16, 16, {}};
  lbl.values.resize(2 * 16 * 16);
  for (auto& v : lbl.values) v = static_cast<int>(rng() % 4);
  u.params().zero_grad();
  cross_entropy_loss(taps.logits, lbl).backward();
  for (auto& p : u.params().all()) {
    double mx = 0.0;
    for (double g : p.tensor.grad()) mx = std::max(mx, std::abs(g));
    INFO("parameter ", p.name);
    CHECK(mx > 0.0);
  }
}
