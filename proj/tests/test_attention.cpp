#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "attention_oracle.hpp"
#include "fbseg/attention.hpp"
#include "fbseg/optim.hpp"

using namespace fbseg;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, T lo = T(-1), T hi = T(1),
                        bool requires_grad = false) {
  Tensor<T> t(s, requires_grad);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// Knocks every parameter off its default so the comparison exercises bn
// affine terms and the residual scale, not just the conv kernels.
template <typename T>
void perturb_params(Connector<T>& conn, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-0.6, 0.6);
  for (auto& p : conn.params().all())
    for (auto& v : p.tensor.data()) v += static_cast<T>(dist(rng));
}

template <typename T>
void set_scale(Connector<T>& conn, T value) {
  conn.params().at("conn.scale").tensor.data()[0] = value;
}

std::vector<Variant> all_parameterized_variants() {
  return {Variant::SourceTarget, Variant::Self, Variant::Add, Variant::Conv1x1,
          Variant::SE, Variant::Light};
}

}  // namespace

TEST_CASE("attention matches nested-loop reference") {
  for (Variant variant : {Variant::SourceTarget, Variant::Self}) {
    CAPTURE(to_string(variant));
    int case_id = 0;
    for (Shape s : {Shape{1, 8, 2, 2}, Shape{2, 16, 4, 4}}) {
      AttentionConfig cfg;
      cfg.variant = variant;
      Connector<double> conn(cfg, s[1], 11 + case_id);
      perturb_params(conn, 101 + case_id);
      Tensor<double> f = random_tensor<double>(s, 7 + case_id);
      Tensor<double> o = random_tensor<double>(s, 8 + case_id);

      Tensor<double> got = conn.apply(f, o, Mode::Eval).a;
      Tensor<double> want = fbseg_test::feedback_attention_oracle(conn, f, o);
      REQUIRE(got.shape() == s);
      double max_err = 0.0;
      for (size_t i = 0; i < got.data().size(); ++i)
        max_err = std::max(max_err, std::abs(got.data()[i] - want.data()[i]));
      CHECK(max_err < 1e-6);
      ++case_id;
    }
  }
}

TEST_CASE("every connector is a bit-exact identity at initialization") {
  const Shape s{2, 16, 4, 4};
  Tensor<float> f = random_tensor<float>(s, 21);
  Tensor<float> o = random_tensor<float>(s, 22);
  for (Variant variant : all_parameterized_variants()) {
    CAPTURE(to_string(variant));
    AttentionConfig cfg;
    cfg.variant = variant;
    Connector<float> conn(cfg, s[1], 5);
    Tensor<float> a = conn.apply(f, o, Mode::Eval).a;
    REQUIRE(a.data().size() == f.data().size());
    for (size_t i = 0; i < f.data().size(); ++i) REQUIRE(a.data()[i] == f.data()[i]);
  }
}

TEST_CASE("attention rows are stochastic") {
  const Shape s{2, 8, 4, 4};
  for (Variant variant : {Variant::SourceTarget, Variant::Self}) {
    CAPTURE(to_string(variant));
    AttentionConfig cfg;
    cfg.variant = variant;
    Connector<float> conn(cfg, s[1], 31);
    perturb_params(conn, 32);
    Tensor<float> f = random_tensor<float>(s, 33);
    Tensor<float> o = random_tensor<float>(s, 34);
    auto res = conn.apply(f, o, Mode::Eval, true, /*want_attn=*/true);
    REQUIRE(res.attn.has_value());
    const int hw = res.attn->h * res.attn->w;
    REQUIRE(res.attn->per_batch.size() == 2);
    for (const auto& mat : res.attn->per_batch) {
      REQUIRE(mat.size() == static_cast<size_t>(hw) * hw);
      for (int i = 0; i < hw; ++i) {
        double row = 0.0;
        for (int j = 0; j < hw; ++j) {
          const double w = mat[static_cast<size_t>(i) * hw + j];
          REQUIRE(w >= 0.0);
          row += w;
        }
        CHECK(std::abs(row - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("position-wise connectors commute with spatial permutation") {
  // Reversing the flattened spatial order of both inputs must reverse the
  // output; true for everything except the 3x3 light gate.
  const Shape s{1, 8, 2, 4};
  const int hw = s[2] * s[3];
  auto reversed = [&](const Tensor<double>& t) {
    Tensor<double> r(s);
    for (int c = 0; c < s[1]; ++c)
      for (int i = 0; i < hw; ++i)
        r.data()[static_cast<size_t>(c) * hw + (hw - 1 - i)] =
            t.data()[static_cast<size_t>(c) * hw + i];
    return r;
  };
  Tensor<double> f = random_tensor<double>(s, 41);
  Tensor<double> o = random_tensor<double>(s, 42);
  for (Variant variant : {Variant::SourceTarget, Variant::Self, Variant::Add,
                          Variant::Conv1x1, Variant::SE}) {
    CAPTURE(to_string(variant));
    AttentionConfig cfg;
    cfg.variant = variant;
    Connector<double> conn(cfg, s[1], 43);
    perturb_params(conn, 44);
    Tensor<double> a = conn.apply(f, o, Mode::Eval).a;
    Tensor<double> a_perm = conn.apply(reversed(f), reversed(o), Mode::Eval).a;
    Tensor<double> want = reversed(a);
    for (size_t i = 0; i < want.data().size(); ++i)
      CHECK(a_perm.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("squeeze-excite gates each channel into (0, 1)") {
  const Shape s{1, 16, 4, 4};
  AttentionConfig cfg;
  cfg.variant = Variant::SE;
  Connector<double> conn(cfg, s[1], 51);
  perturb_params(conn, 52);
  set_scale(conn, 1.0);
  Tensor<double> f = Tensor<double>::zeros(s);
  Tensor<double> o = random_tensor<double>(s, 53, 0.5, 1.5);  // keep o away from 0
  Tensor<double> a = conn.apply(f, o, Mode::Eval).a;
  for (size_t i = 0; i < a.data().size(); ++i) {
    const double ratio = a.data()[i] / o.data()[i];
    CHECK(ratio > 0.0);
    CHECK(ratio < 1.0);
  }
}

TEST_CASE("additive connector with unit scale and zero F returns O") {
  const Shape s{2, 8, 3, 3};
  AttentionConfig cfg;
  cfg.variant = Variant::Add;
  Connector<float> conn(cfg, s[1], 61);
  set_scale(conn, 1.0f);
  Tensor<float> f = Tensor<float>::zeros(s);
  Tensor<float> o = random_tensor<float>(s, 62);
  Tensor<float> a = conn.apply(f, o, Mode::Eval).a;
  for (size_t i = 0; i < o.data().size(); ++i)
    CHECK(a.data()[i] == doctest::Approx(o.data()[i]).epsilon(1e-6));
}

TEST_CASE("connector gradients match central differences") {
  const Shape s{1, 8, 2, 2};
  for (Variant variant : all_parameterized_variants()) {
    CAPTURE(to_string(variant));
    AttentionConfig cfg;
    cfg.variant = variant;
    Connector<double> conn(cfg, s[1], 71);
    perturb_params(conn, 72);
    set_scale(conn, 0.5);  // nonzero so gradients reach the branch parameters
    Tensor<double> f = random_tensor<double>(s, 73);
    Tensor<double> o = random_tensor<double>(s, 74);
    Tensor<double> probe = random_tensor<double>(s, 75);
    auto loss = [&]() {
      Tensor<double> a = conn.apply(f, o, Mode::Train, /*update_running=*/false).a;
      return sum(mul(a, probe));
    };
    for (const auto& rep : grad_check<double>(loss, conn.params())) {
      CAPTURE(rep.name);
      CHECK(rep.max_rel_err < 1e-3);
    }
  }
}

TEST_CASE("oversized attention matrices are rejected") {
  AttentionConfig cfg;
  cfg.variant = Variant::Self;
  cfg.position_budget = 8;
  Connector<float> conn(cfg, 8, 81);
  Tensor<float> f = random_tensor<float>({1, 8, 4, 4}, 82);  // 16 positions > 8
  Tensor<float> o = random_tensor<float>({1, 8, 4, 4}, 83);
  CHECK_THROWS_AS(conn.apply(f, o, Mode::Eval), ConfigError);
}

TEST_CASE("attention channel count must be divisible by 8") {
  AttentionConfig cfg;
  cfg.variant = Variant::SourceTarget;
  CHECK_THROWS_AS(Connector<float>(cfg, 12, 91), ConfigError);
}
