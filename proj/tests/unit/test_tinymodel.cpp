#include <doctest.h>

#include <cmath>
#include <numbers>

#include "finemine/error.hpp"
#include "finemine/mining.hpp"
#include "finemine/synth_data.hpp"
#include "finemine/tinymodel.hpp"
#include "helpers.hpp"

using namespace finemine;
using namespace finemine::nn;

namespace {

// Direct-loop reference forward: per-image channel centring scaled by 4,
// two zero-padded 3x3 stride-2 convs with ReLU, global average pool, head.
std::vector<long double> reference_logits(const Classifier& m, const Image& img) {
  const int r0 = img.height;
  std::vector<long double> x(3 * r0 * r0);
  for (int c = 0; c < 3; ++c) {
    long double mean = 0;
    for (int y = 0; y < r0; ++y)
      for (int xx = 0; xx < r0; ++xx) mean += img.at(y, xx, c);
    mean /= r0 * r0;
    for (int y = 0; y < r0; ++y)
      for (int xx = 0; xx < r0; ++xx) x[(c * r0 + y) * r0 + xx] = (img.at(y, xx, c) - mean) * 4;
  }
  auto conv = [](const std::vector<long double>& in, int cin, int rin, std::span<const float> w,
                 std::span<const float> b, int cout) {
    const int rout = (rin - 1) / 2 + 1;
    std::vector<long double> out(cout * rout * rout);
    for (int o = 0; o < cout; ++o)
      for (int oy = 0; oy < rout; ++oy)
        for (int ox = 0; ox < rout; ++ox) {
          long double s = b[o];
          for (int c = 0; c < cin; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = 2 * oy + ky - 1, ix = 2 * ox + kx - 1;
                if (iy < 0 || ix < 0 || iy >= rin || ix >= rin) continue;
                s += w[((o * cin + c) * 3 + ky) * 3 + kx] * in[(c * rin + iy) * rin + ix];
              }
          out[(o * rout + oy) * rout + ox] = s > 0 ? s : 0;
        }
    return out;
  };
  const int r1 = (r0 - 1) / 2 + 1, r2 = (r1 - 1) / 2 + 1;
  const auto a1 = conv(x, 3, r0, m.param(0), m.param(1), 8);
  const auto a2 = conv(a1, 8, r1, m.param(2), m.param(3), 16);
  std::vector<long double> logits(m.num_classes());
  for (int k = 0; k < m.num_classes(); ++k) {
    long double z = m.head_bias()[k];
    for (int c = 0; c < 16; ++c) {
      long double pooled = 0;
      for (int i = 0; i < r2 * r2; ++i) pooled += a2[c * r2 * r2 + i];
      z += m.head_weight()[k * 16 + c] * pooled / (r2 * r2);
    }
    logits[k] = z;
  }
  return logits;
}

std::vector<TrainItem> tiny_items(int n, int classes, std::uint64_t seed) {
  std::vector<TrainItem> items;
  for (int i = 0; i < n; ++i)
    items.push_back({testutil::random_image(16, 16, seed + i), smooth_targets(i % classes, classes, 0.1)});
  return items;
}

}  // namespace

TEST_CASE("init: Glorot bounds, zero biases, determinism") {
  const auto a = init(5, 42);
  CHECK(a == init(5, 42));
  CHECK_FALSE(a == init(5, 43));
  for (std::size_t idx : {1u, 3u, 5u})
    for (float v : a.param(idx)) CHECK(v == 0.0f);
  const double bound[] = {std::sqrt(6.0 / (27 + 72)), 0, std::sqrt(6.0 / (72 + 144)), 0, std::sqrt(6.0 / (16 + 5))};
  for (std::size_t idx : {0u, 2u, 4u}) {
    double peak = 0;
    for (float v : a.param(idx)) peak = std::max(peak, std::abs(static_cast<double>(v)));
    CHECK(peak <= bound[idx]);
    CHECK(peak > 0.8 * bound[idx]);
  }
  CHECK_THROWS_AS(init(1, 0), ValidationError);
}

TEST_CASE("parameter layout") {
  const Classifier m(7);
  CHECK(m.layout().size() == 6);
  CHECK(m.layout()[4].dims == std::vector<std::uint32_t>{7, 16});
  CHECK(m.params().size() == Classifier::conv_param_count() + 7 * 17);
  CHECK(m.conv_params().size() == 8 * 27 + 8 + 16 * 72 + 16);
}

TEST_CASE("forward matches the direct-loop reference") {
  for (int trial = 0; trial < 5; ++trial) {
    const auto m = init(4, 100 + trial);
    const auto img = testutil::random_image(13 + trial, 13 + trial, 200 + trial);
    for (int r : {8, 16, 21}) {
      const auto got = forward(m, img, r).logits;
      const auto want = reference_logits(m, resize_bilinear(img, r, r));
      for (int k = 0; k < 4; ++k) CHECK(got[k] == doctest::Approx(static_cast<double>(want[k])).epsilon(1e-12));
    }
  }
}

TEST_CASE("forward: zero model, bias shift, head width independent of resolution") {
  const Classifier zero(3);
  const auto img = testutil::random_image(20, 20, 1);
  for (double z : forward(zero, img, 16).logits) CHECK(z == 0.0);

  auto m = init(3, 9);
  const auto before = forward(m, img, 16).logits;
  for (float& b : m.head_bias()) b += 2.5f;
  const auto after = forward(m, img, 16).logits;
  for (int k = 0; k < 3; ++k) CHECK(after[k] - before[k] == doctest::Approx(2.5).epsilon(1e-12));

  const auto f32 = forward(m, img, 32);
  const auto f64 = forward(m, img, 64);
  CHECK(f32.features.channels == 16);
  CHECK(f32.features.height == 8);
  CHECK(f64.features.height == 16);
  CHECK(f32.logits.size() == f64.logits.size());
  CHECK(f32.logits != f64.logits);
  CHECK(pooled_features(m, img, 32).size() == 16);
  CHECK_THROWS_AS(forward(m, img, 7), ValidationError);
}

TEST_CASE("attention: zero model gives zero map, otherwise peak 1") {
  const auto img = testutil::random_image(16, 16, 2);
  const auto z = attention(Classifier(2), img, 16);
  CHECK(z.height == 4);
  for (double v : z.values) CHECK(v == 0.0);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto a = attention(init(2, s), testutil::random_image(16, 16, 50 + s), 16);
    double peak = 0;
    for (double v : a.values) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      peak = std::max(peak, v);
    }
    CHECK((peak == 1.0 || peak == 0.0));
  }
}

TEST_CASE("softmax and argmax") {
  const std::vector<double> z{1.0, 3.0, -2.0};
  const auto p = softmax(z);
  double s = 0;
  for (double v : p) s += v;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-15));
  std::vector<double> shifted = z;
  for (double& v : shifted) v += 123.0;
  const auto q = softmax(shifted);
  for (int i = 0; i < 3; ++i) CHECK(q[i] == doctest::Approx(p[i]).epsilon(1e-12));
  CHECK(argmax(z) == 1);
  CHECK(argmax(std::vector<double>{2.0, 2.0}) == 0);
}

TEST_CASE("smooth_targets") {
  const auto t = smooth_targets(0, 5, 0.2);
  const double want[] = {0.84, 0.04, 0.04, 0.04, 0.04};
  for (int i = 0; i < 5; ++i) CHECK(t[i] == doctest::Approx(want[i]).epsilon(1e-15));
  const auto one_hot = smooth_targets(2, 4, 0.0);
  CHECK(one_hot == std::vector<double>{0, 0, 1, 0});
  const auto u = smooth_targets(1, 2, 0.3);
  CHECK(u[0] == doctest::Approx(0.15));
  CHECK(u[1] == doctest::Approx(0.85));
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = static_cast<int>(rng.uniform_int(2, 20));
    const double eps = rng.uniform(1e-6, 0.99);
    const auto v = smooth_targets(static_cast<int>(rng.uniform_int(0, c - 1)), c, eps);
    double s = 0;
    for (double x : v) {
      CHECK(x > 0.0);
      s += x;
    }
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  CHECK_THROWS_AS(smooth_targets(0, 3, 1.0), ValidationError);
  CHECK_THROWS_AS(smooth_targets(0, 3, -0.1), ValidationError);
}

TEST_CASE("loss: uniform logits, stabilisation, extended-precision oracle") {
  const std::vector<double> flat(6, 0.7);
  CHECK(loss(flat, smooth_targets(2, 6, 0.3)) == doctest::Approx(std::log(6.0)).epsilon(1e-14));
  const double big = loss(std::vector<double>{1000.0, 0.0}, std::vector<double>{1.0, 0.0});
  CHECK(std::isfinite(big));
  CHECK(big < 1e-300);

  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = static_cast<int>(rng.uniform_int(2, 12));
    std::vector<double> z(c);
    for (double& v : z) v = rng.uniform(-30.0, 30.0);
    const auto t = smooth_targets(static_cast<int>(rng.uniform_int(0, c - 1)), c, rng.uniform(0.0, 0.5));
    long double sum = 0;
    for (double v : z) sum += std::exp(static_cast<long double>(v));
    long double want = 0;
    for (int i = 0; i < c; ++i) want -= t[i] * (z[i] - std::log(sum));
    CHECK(loss(z, t) == doctest::Approx(static_cast<double>(want)).epsilon(1e-6));
  }
  CHECK_THROWS_AS(loss(std::vector<double>{1, 2}, std::vector<double>{1}), ValidationError);
}

TEST_CASE("lr_at: warmup, boundary, cosine") {
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.warmup_epochs = 5;
  cfg.base_lr = 0.025;
  const long per_epoch = 10, total = 500, warm = 50;
  CHECK(lr_at(0, total, cfg) == doctest::Approx(0.025 / warm));
  CHECK(lr_at(warm - 1, total, cfg) == doctest::Approx(0.025));
  CHECK(lr_at(warm, total, cfg) == 0.025);
  CHECK(lr_at(total - 1, total, cfg) < 0.025 * std::numbers::pi / (total - warm));
  // Step 275 is halfway through the decay: cos(pi/2) = 0 so lr = base/2.
  CHECK(lr_at(275, total, cfg) == doctest::Approx(0.0125).epsilon(1e-12));
  // Step 162: phase = 112/450.
  CHECK(lr_at(162, total, cfg) ==
        doctest::Approx(0.5 * 0.025 * (1.0 + std::cos(std::numbers::pi * 112.0 / 450.0))).epsilon(1e-12));
  for (long s = 0; s < total; ++s) CHECK(lr_at(s, total, cfg) >= 0.0);
  (void)per_epoch;
  CHECK_THROWS_AS(lr_at(total, total, cfg), ValidationError);
}

TEST_CASE("gradient: closed form at zero parameters") {
  const Classifier zero(4);
  const auto target = smooth_targets(1, 4, 0.2);
  const auto g = gradient(zero, testutil::random_image(16, 16, 5), target, 16);
  const auto& info = zero.layout()[5];
  for (int k = 0; k < 4; ++k) CHECK(g[info.offset + k] == 0.25 - target[k]);
}

TEST_CASE("gradient: head-only path matches the closed form to 1e-8") {
  // Conv weights zeroed and conv2 biases set: the pooled features are exactly
  // those biases, so logits are affine in the head.
  Classifier m = init(3, 8);
  for (float& v : m.param(0)) v = 0;
  for (float& v : m.param(2)) v = 0;
  Rng rng(2);
  std::vector<double> feat(16);
  for (int c = 0; c < 16; ++c) feat[c] = m.param(3)[c] = static_cast<float>(rng.uniform(0.1, 1.0));
  const auto target = smooth_targets(0, 3, 0.2);
  const auto img = testutil::random_image(16, 16, 9);
  const auto g = gradient(m, img, target, 16);
  std::vector<double> z(3);
  for (int k = 0; k < 3; ++k) {
    z[k] = m.head_bias()[k];
    for (int c = 0; c < 16; ++c) z[k] += m.head_weight()[k * 16 + c] * feat[c];
  }
  const auto p = softmax(z);
  const std::size_t wh = m.layout()[4].offset;
  for (int k = 0; k < 3; ++k)
    for (int c = 0; c < 16; ++c) CHECK(std::abs(g[wh + k * 16 + c] - (p[k] - target[k]) * feat[c]) < 1e-8);
  CHECK(grad_check(m, img, target, 1e-4) < 1e-8);
}

TEST_CASE("grad_check on random models") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto m = init(3, 1000 + s);
    const auto img = testutil::random_image(16, 16, 2000 + s);
    CHECK(grad_check(m, img, smooth_targets(static_cast<int>(s % 3), 3, 0.2), 1e-4) < 1e-4);
  }
}

TEST_CASE("train: lr 0 is the identity, input is not mutated, deterministic") {
  const auto items = tiny_items(12, 3, 1);
  const auto m = init(3, 4);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.base_lr = 0.0;
  cfg.batch_size = 4;
  cfg.crop_size = 16;
  auto r = train(m, items, cfg);
  CHECK(std::equal(r.model.params().begin(), r.model.params().end(), m.params().begin()));
  CHECK(r.model.input_resolution == 16);

  cfg.epochs = 3;
  cfg.base_lr = 0.1;
  cfg.augment.flip = true;
  const auto copy = m;
  const auto a = train(m, items, cfg);
  const auto b = train(m, items, cfg);
  CHECK(m == copy);
  CHECK(a.model == b.model);
  CHECK(a.epoch_losses == b.epoch_losses);
  CHECK(a.epoch_losses.size() == 3);
  CHECK_FALSE(a.model == m);
}

TEST_CASE("train: loss decreases on the synthetic train split") {
  auto spec = testutil::tiny_spec(21);
  spec.counts.labeled_train = 120;
  const auto bundle = synth::generate(spec);
  const auto items = mining::training_items(bundle, {}, 0.2);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 16;
  cfg.base_lr = 0.5;
  cfg.warmup_epochs = 1;
  cfg.crop_size = 16;
  cfg.seed = 3;
  const auto r = train(init(4, 3), items, cfg);
  CHECK(r.epoch_losses.back() < r.epoch_losses.front());
}

TEST_CASE("train: argument errors") {
  TrainConfig cfg;
  cfg.crop_size = 16;
  CHECK_THROWS_AS(train(init(3, 0), {}, cfg), ValidationError);
  auto items = tiny_items(2, 3, 0);
  items[1].target.pop_back();
  CHECK_THROWS_AS(train(init(3, 0), items, cfg), ValidationError);
  cfg.epochs = 0;
  CHECK_THROWS_AS(validate(cfg), ValidationError);
  cfg = {};
  cfg.augment.scale_min = 1.5;
  CHECK_THROWS_AS(validate(cfg), ValidationError);
  cfg = {};
  cfg.augment.rcm = true;
  cfg.augment.rcm_grid = 4;
  cfg.augment.rcm_k = 4;
  CHECK_THROWS_AS(validate(cfg), ValidationError);
}

TEST_CASE("every augmentation path trains without error") {
  const auto items = tiny_items(8, 2, 30);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.base_lr = 0.05;
  cfg.crop_size = 16;
  cfg.augment = {true, 0.2, true, 4, 1, true, true, 0.3};
  const auto r = train(init(2, 1), items, cfg);
  for (float v : r.model.params()) CHECK(std::isfinite(v));
}

TEST_CASE("random_view with scale_min covers a sub-square") {
  const auto img = testutil::random_image(32, 32, 8);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto v = random_view(img, 24, s, 0.25);
    CHECK(v.height == 24);
    CHECK(v.width == 24);
  }
  // scale_min = 1 always takes the whole (square) image.
  CHECK(random_view(img, 24, 3, 1.0) == resize_bilinear(img, 24, 24));
  CHECK(random_view(img, 24, 5, 0.0) == random_view(img, 24, 5));
}

TEST_CASE("fix_finetune freezes convs and raises the resolution") {
  const auto items = tiny_items(10, 2, 60);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.base_lr = 0.1;
  cfg.crop_size = 16;
  auto base = train(init(2, 2), items, cfg).model;
  const auto fixed = fix_finetune(base, items, 32, cfg);
  CHECK(fixed.input_resolution == 32);
  CHECK(std::equal(fixed.conv_params().begin(), fixed.conv_params().end(), base.conv_params().begin()));
  CHECK_FALSE(std::equal(fixed.head_weight().begin(), fixed.head_weight().end(), base.head_weight().begin()));

  cfg.epochs = 1;
  cfg.base_lr = 0.0;
  const auto still = fix_finetune(base, items, 32, cfg);
  auto expect = base;
  expect.input_resolution = 32;
  CHECK(still == expect);
  CHECK_THROWS_AS(fix_finetune(base, items, 16, cfg), ValidationError);
  CHECK_THROWS_AS(fix_finetune(base, items, 12, cfg), ValidationError);
}

TEST_CASE("with_new_head keeps convs and replaces the head") {
  auto m = init(5, 1);
  m.input_resolution = 32;
  const auto h = with_new_head(m, 3, 2);
  CHECK(h.num_classes() == 3);
  CHECK(h.input_resolution == 32);
  CHECK(std::equal(h.conv_params().begin(), h.conv_params().end(), m.conv_params().begin()));
}

TEST_CASE("checkpoint round-trip and corruption") {
  testutil::TempDir dir("ckpt");
  auto m = init(6, 77);
  m.input_resolution = 40;
  save_checkpoint(m, dir.path() / "m");
  CHECK(load_checkpoint(dir.path() / "m") == m);
  CHECK(std::filesystem::exists(dir.path() / "m" / "model.json"));
  write_file(dir.path() / "m" / "conv2.bias.fmt1", encode_fmt1({{3}, {0, 0, 0}}));
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "m"), IntegrityError);
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing"), IoError);
}
