#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "fbseg/experiment.hpp"
#include "fbseg/training.hpp"

using namespace fbseg;
namespace fs = std::filesystem;

namespace {

UNetConfig small_unet(int depth = 2) {
  UNetConfig cfg;
  cfg.base_channels = 8;
  cfg.depth = depth;
  cfg.num_classes = 4;
  return cfg;
}

std::vector<Variant> connector_variants() {
  return {Variant::SourceTarget, Variant::Self, Variant::Add, Variant::Conv1x1,
          Variant::SE, Variant::Light};
}

template <typename T>
Tensor<T> synth_batch(int n, int size, std::uint64_t seed) {
  auto tiles = synth_generate(n, size, seed);
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  return batch_images<T>(tiles, idx, {0.5f, 0.25f});
}

}  // namespace

TEST_CASE("second pass equals first pass bit-exactly at initialization") {
  // Every connector starts as an identity on F, so the injected map matches
  // the tap and the second forward must reproduce the first.
  auto tiles = synth_generate(2, 16, 7);
  Tensor<float> x = batch_images<float>(tiles, {0, 1}, {0.5f, 0.25f});
  for (Variant variant : connector_variants()) {
    CAPTURE(to_string(variant));
    UNet<float> unet(small_unet(), 3);
    AttentionConfig acfg;
    acfg.variant = variant;
    Connector<float> conn(acfg, 8, 4);
    auto out = two_pass_forward(unet, conn, x, Mode::Eval);
    REQUIRE(out.second_logits.data().size() == out.first_logits.data().size());
    for (size_t i = 0; i < out.first_logits.data().size(); ++i)
      REQUIRE(out.second_logits.data()[i] == out.first_logits.data()[i]);
  }
}

TEST_CASE("the plain variant runs a single pass") {
  auto tiles = synth_generate(1, 16, 8);
  Tensor<float> x = batch_images<float>(tiles, {0}, {0.5f, 0.25f});
  UNet<float> unet(small_unet(), 3);
  Connector<float> conn({Variant::None}, 8, 4);
  auto out = two_pass_forward(unet, conn, x, Mode::Train);
  CHECK(out.second_logits.node() == out.first_logits.node());
}

TEST_CASE("detached feedback blocks gradients upstream of the tap") {
  auto tiles = synth_generate(1, 16, 9);
  Tensor<float> x = batch_images<float>(tiles, {0}, {0.5f, 0.25f});
  LabelMap lbl = batch_labels(tiles, {0});
  AttentionConfig acfg;
  acfg.variant = Variant::Add;

  auto grads_for = [&](bool detach) {
    UNet<float> unet(small_unet(), 3);
    Connector<float> conn(acfg, 8, 4);
    conn.params().at("conn.scale").tensor.data()[0] = 0.3f;
    auto out = two_pass_forward(unet, conn, x, Mode::Train, detach);
    unet.params().zero_grad();
    conn.params().zero_grad();
    cross_entropy_loss(out.second_logits, lbl).backward();
    return unet.params().at("enc1.conv1.weight").tensor.grad();
  };

  // With detach the tap block feeds only the discarded first pass: the
  // second pass skips everything upstream of the injection, so enc1 conv
  // weights receive exactly zero gradient.
  auto detached = grads_for(true);
  double l1 = 0.0;
  for (float g : detached) l1 += std::abs(g);
  CHECK(l1 == 0.0);

  auto attached = grads_for(false);
  double l1_attached = 0.0;
  for (float g : attached) l1_attached += std::abs(g);
  CHECK(l1_attached > 0.0);
}

TEST_CASE("initial loss sits near log(num_classes)") {
  auto tiles = synth_generate(2, 16, 11);
  Tensor<float> x = batch_images<float>(tiles, {0, 1}, {0.5f, 0.25f});
  LabelMap lbl = batch_labels(tiles, {0, 1});
  UNet<float> unet(small_unet(), 21);
  Connector<float> conn({Variant::Self}, 8, 22);
  auto out = two_pass_forward(unet, conn, x, Mode::Train);
  const double loss = cross_entropy_loss(out.second_logits, lbl).item();
  CHECK(loss == doctest::Approx(std::log(4.0)).epsilon(0.15));
}

TEST_CASE("a zero learning rate leaves every parameter untouched") {
  auto tiles = synth_generate(1, 16, 12);
  Tensor<float> x = batch_images<float>(tiles, {0}, {0.5f, 0.25f});
  LabelMap lbl = batch_labels(tiles, {0});
  UNet<float> unet(small_unet(), 31);
  Connector<float> conn({Variant::Self}, 8, 32);
  TrainState<float> state(unet, conn, 0.0f);
  auto before = state.all_params.snapshot();
  const float loss = train_step(unet, conn, state, x, lbl);
  CHECK(std::isfinite(loss));
  auto after = state.all_params.snapshot();
  CHECK(before == after);
}

TEST_CASE("repeated steps on one batch drive the loss down") {
  auto tiles = synth_generate(2, 16, 13);
  Tensor<float> x = batch_images<float>(tiles, {0, 1}, {0.5f, 0.25f});
  LabelMap lbl = batch_labels(tiles, {0, 1});
  UNet<float> unet(small_unet(), 41);
  Connector<float> conn({Variant::Self}, 8, 42);
  TrainState<float> state(unet, conn, 3e-3f);
  const float first = train_step(unet, conn, state, x, lbl);
  float last = first;
  for (int i = 0; i < 399; ++i) last = train_step(unet, conn, state, x, lbl);
  CHECK(last < 0.1f);
  CHECK(last < 0.08f * first);
}

TEST_CASE("iou counts match hand-computed values") {
  ConfusionCounts conf(3);
  conf.tp = {1, 5, 0};
  conf.fp = {1, 0, 0};
  conf.fn = {1, 0, 0};
  auto iou = conf.iou();
  CHECK(iou[0] == doctest::Approx(1.0 / 3.0));
  CHECK(iou[1] == doctest::Approx(1.0));
  CHECK(iou[2] == doctest::Approx(1.0));  // absent everywhere counts as perfect
  CHECK(mean_of(iou) == doctest::Approx((1.0 / 3.0 + 2.0) / 3.0));
}

TEST_CASE("confusion accumulation uses the argmax prediction") {
  // 1x2x1x2 logits: pixel 0 predicts class 1, pixel 1 predicts class 0.
  Tensor<float> logits = Tensor<float>::from({1, 2, 1, 2}, {0.1f, 3.0f, 2.0f, -1.0f});
  LabelMap lbl{1, 1, 2, {1, 1}};
  ConfusionCounts conf(2);
  accumulate_confusion(logits, lbl, conf);
  CHECK(conf.tp == std::vector<std::int64_t>{0, 1});
  CHECK(conf.fp == std::vector<std::int64_t>{1, 0});
  CHECK(conf.fn == std::vector<std::int64_t>{0, 1});
  auto iou = conf.iou();
  CHECK(iou[0] == doctest::Approx(0.0));
  CHECK(iou[1] == doctest::Approx(0.5));
}

TEST_CASE("evaluation of a perfect predictor reports mean iou 1") {
  // Logits crafted from the labels themselves.
  auto tiles = synth_generate(1, 16, 14);
  LabelMap lbl = batch_labels(tiles, {0});
  Tensor<float> logits({1, 4, 16, 16});
  for (int h = 0; h < 16; ++h)
    for (int w = 0; w < 16; ++w) {
      const int cls = lbl.values[static_cast<size_t>(h) * 16 + w];
      logits.data()[(static_cast<size_t>(cls) * 16 + h) * 16 + w] = 10.0f;
    }
  ConfusionCounts conf(4);
  accumulate_confusion(logits, lbl, conf);
  CHECK(std::abs(mean_of(conf.iou()) - 1.0) < 1e-9);
}

TEST_CASE("a full training run is reproducible from the seed") {
  auto tiles = synth_generate(8, 16, 15);
  std::vector<Role> roles = {Role::Train, Role::Train, Role::Train, Role::Train,
                             Role::Val, Role::Val, Role::Test, Role::Test};
  RunSettings cfg;
  cfg.unet = small_unet();
  cfg.attn.variant = Variant::Add;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.lr = 1e-3;

  auto r1 = run_single<float>(tiles, roles, 77, cfg);
  auto r2 = run_single<float>(tiles, roles, 77, cfg);
  CHECK(r1.best_epoch == r2.best_epoch);
  CHECK(r1.test_second.mean_iou == r2.test_second.mean_iou);
  CHECK(r1.test_second.loss == r2.test_second.loss);
  CHECK(r1.test_second.per_class_iou == r2.test_second.per_class_iou);

  auto r3 = run_single<float>(tiles, roles, 78, cfg);
  CHECK(r3.test_second.loss != r1.test_second.loss);
}

TEST_CASE("checkpoints restore every parameter exactly") {
  const fs::path dir = fs::temp_directory_path() / "fbseg_ckpt_test";
  fs::create_directories(dir);
  const std::string prefix = (dir / "model").string();

  UNet<float> unet(small_unet(), 51);
  Connector<float> conn({Variant::Self}, 8, 52);
  ModelParams<float> params;
  params.merge(unet.params());
  params.merge(conn.params());
  auto original = params.snapshot();
  save_checkpoint(params, prefix);

  for (auto& p : params.all())
    for (auto& v : p.tensor.data()) v += 1.0f;
  CHECK(params.snapshot() != original);
  load_checkpoint(params, prefix);
  CHECK(params.snapshot() == original);

  // A model with different shapes must refuse the checkpoint.
  UNet<float> other(small_unet(3), 53);
  CHECK_THROWS_AS(load_checkpoint(other.params(), prefix), DataError);
  CHECK_THROWS_AS(load_checkpoint(params, (dir / "missing").string()), DataError);
  fs::remove_all(dir);
}

TEST_CASE("metrics csv carries one row per pass with fixed columns") {
  const fs::path dir = fs::temp_directory_path() / "fbseg_csv_test";
  fs::create_directories(dir);
  const std::string path = (dir / "metrics.csv").string();

  MetricsRecord r;
  r.variant = "self";
  r.fold = 2;
  r.seed = 9;
  r.epoch = 4;
  r.pass = "second";
  r.per_class_iou = {0.25, 0.5, 0.75, 1.0};
  r.mean_iou = 0.625;
  r.loss = 0.125;
  write_metrics_csv(path, {r}, 4);

  std::ifstream in(path);
  std::string header, row;
  REQUIRE(std::getline(in, header));
  CHECK(header ==
        "variant,fold,seed,epoch,pass,class_0_iou,class_1_iou,class_2_iou,class_3_iou,"
        "mean_iou,loss");
  REQUIRE(std::getline(in, row));
  CHECK(row == "self,2,9,4,second,0.25,0.5,0.75,1,0.625,0.125");
  fs::remove_all(dir);
}
