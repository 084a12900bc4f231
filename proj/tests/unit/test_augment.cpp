#include <doctest.h>

#include <algorithm>
#include <set>

#include "finemine/augment.hpp"
#include "finemine/error.hpp"
#include "helpers.hpp"

using namespace finemine;
using namespace finemine::augment;

namespace {

nn::AttentionMap map_4x4(std::initializer_list<double> v) {
  nn::AttentionMap m;
  m.height = m.width = 4;
  m.values = v;
  return m;
}

nn::AttentionMap single_peak(int cell) {
  nn::AttentionMap m;
  m.height = m.width = 4;
  m.values.assign(16, 0.0);
  m.values[cell] = 1.0;
  return m;
}

std::vector<float> sorted_pixels(const Image& img) {
  auto p = img.pixels;
  std::sort(p.begin(), p.end());
  return p;
}

}  // namespace

TEST_CASE("cutmix degenerate lambdas") {
  const auto a = testutil::random_image(10, 10, 1);
  const auto b = testutil::random_image(10, 10, 2);
  const std::vector<double> ta{1, 0}, tb{0, 1};
  const auto keep = cutmix_at_lambda(a, ta, b, tb, 1.0, 4);
  CHECK(keep.image == a);
  CHECK(keep.target == ta);
  CHECK(keep.lam == 1.0);
  const auto swap = cutmix_at_lambda(a, ta, b, tb, 0.0, 4);
  CHECK(swap.image == b);
  CHECK(swap.target == tb);
  CHECK(swap.lam == 0.0);
}

TEST_CASE("paste_box with a 5x5 box on 10x10") {
  const auto a = testutil::random_image(10, 10, 1);
  const auto b = testutil::random_image(10, 10, 2);
  const std::vector<double> ta{1, 0, 0}, tb{0, 0, 1};
  const auto m = paste_box(a, ta, b, tb, {2, 3, 5, 5});
  CHECK(m.lam == 0.75);
  CHECK(m.target == std::vector<double>{0.75, 0.0, 0.25});
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) {
      const bool in = y >= 2 && y < 7 && x >= 3 && x < 8;
      CHECK(m.image.at(y, x, 1) == (in ? b : a).at(y, x, 1));
    }
}

TEST_CASE("cutmix label algebra holds on 500 draws, clipped boxes included") {
  Rng rng(5);
  int clipped = 0;
  for (int i = 0; i < 500; ++i) {
    const int h = static_cast<int>(rng.uniform_int(4, 20)), w = static_cast<int>(rng.uniform_int(4, 20));
    const auto a = testutil::random_image(h, w, 10 + i);
    const auto b = testutil::random_image(h, w, 2000 + i);
    const std::vector<double> ta = nn::smooth_targets(0, 4, 0.1), tb = nn::smooth_targets(3, 4, 0.2);
    const auto m = cutmix(a, ta, b, tb, 1.0, 100 + i);
    // Count pasted pixels directly: the oracle for the clipped box area.
    long from_b = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        bool is_b = true, is_a = true;
        for (int c = 0; c < 3; ++c) {
          is_b &= m.image.at(y, x, c) == b.at(y, x, c);
          is_a &= m.image.at(y, x, c) == a.at(y, x, c);
        }
        REQUIRE((is_a || is_b));
        if (is_b && !is_a) ++from_b;
      }
    CHECK(std::abs(m.lam - (1.0 - static_cast<double>(from_b) / (h * w))) < 1e-9);
    for (int k = 0; k < 4; ++k) CHECK(std::abs(m.target[k] - (m.lam * ta[k] + (1 - m.lam) * tb[k])) < 1e-9);
    Rng probe(100 + i);
    const double lam0 = probe.beta(1.0, 1.0);
    const Box box = cutmix_box(h, w, lam0, probe);
    if (box.area() < std::lround((1 - lam0) * h * w) - 1) ++clipped;
  }
  CHECK(clipped > 0);
}

TEST_CASE("cutmix rejects mismatched inputs") {
  const auto a = testutil::random_image(8, 8, 1);
  const auto b = testutil::random_image(8, 9, 2);
  CHECK_THROWS_AS(cutmix(a, std::vector<double>{1, 0}, b, std::vector<double>{0, 1}, 1.0, 0), ValidationError);
  CHECK_THROWS_AS(cutmix(a, std::vector<double>{1, 0}, a, std::vector<double>{0, 0, 1}, 1.0, 0), ValidationError);
}

TEST_CASE("mixup") {
  Image a(8, 8, 3, 0.2f), b(8, 8, 3, 0.6f);
  const auto half = mixup_at_lambda(a, std::vector<double>{1, 0}, b, std::vector<double>{0, 1}, 0.5);
  for (float p : half.image.pixels) CHECK(p == doctest::Approx(0.4));
  CHECK(half.target == std::vector<double>{0.5, 0.5});
  const auto x = testutil::random_image(8, 8, 3), y = testutil::random_image(8, 8, 4);
  CHECK(mixup_at_lambda(x, std::vector<double>{1, 0}, y, std::vector<double>{0, 1}, 1.0).image == x);
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto m = mixup(x, std::vector<double>{1, 0}, y, std::vector<double>{0, 1}, 0.4, s);
    CHECK(m.target[0] == doctest::Approx(m.lam));
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
      CHECK(m.image.pixels[i] >= std::min(x.pixels[i], y.pixels[i]) - 1e-6f);
      CHECK(m.image.pixels[i] <= std::max(x.pixels[i], y.pixels[i]) + 1e-6f);
    }
  }
}

TEST_CASE("rcm_permutation invariants over 1000 seeds") {
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto p = rcm_permutation(4, 1, s);
    CHECK(satisfies_rcm_invariants(p));
    std::vector<int> sorted = p.mapping;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 16; ++i) CHECK(sorted[i] == i);
    for (int d = 0; d < 16; ++d) {
      CHECK(std::abs(d / 4 - p.mapping[d] / 4) <= 2);
      CHECK(std::abs(d % 4 - p.mapping[d] % 4) <= 2);
    }
  }
  std::set<std::vector<int>> distinct;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto p = rcm_permutation(2, 1, s);
    CHECK(satisfies_rcm_invariants(p));
    distinct.insert(p.mapping);
  }
  CHECK(distinct.size() > 1);
  const auto id = rcm_permutation(5, 0, 9);
  for (int i = 0; i < 25; ++i) CHECK(id.mapping[i] == i);
  CHECK_THROWS_AS(rcm_permutation(3, 3, 0), ValidationError);
  CHECK_THROWS_AS(rcm_permutation(0, 0, 0), ValidationError);
}

TEST_CASE("satisfies_rcm_invariants rejects bad mappings") {
  RegionPermutation p{3, {0, 1, 2, 3, 4, 5, 6, 7, 7}, 1};
  CHECK_FALSE(satisfies_rcm_invariants(p));
  RegionPermutation far{4, {}, 0};
  for (int i = 0; i < 16; ++i) far.mapping.push_back(i);
  std::swap(far.mapping[0], far.mapping[1]);
  CHECK_FALSE(satisfies_rcm_invariants(far));
}

TEST_CASE("rcm_destruct: identity, hand-computed 2x2 swap, conservation") {
  const auto img = testutil::random_image(4, 4, 7);
  const auto id = rcm_destruct(img, rcm_permutation(2, 0, 0));
  CHECK(id.image == img);
  for (int i = 0; i < 4; ++i) CHECK(id.alignment_targets[i] == TileCoord{i / 2, i % 2});

  // Swap columns: destination tile (r, c) shows source (r, 1 - c).
  const RegionPermutation swap{2, {1, 0, 3, 2}, 1};
  const auto d = rcm_destruct(img, swap);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) CHECK(d.image.at(y, x, 0) == img.at(y, (x + 2) % 4, 0));
  CHECK(d.alignment_targets[0] == TileCoord{0, 1});
  CHECK(d.alignment_targets[3] == TileCoord{1, 0});
  CHECK(rcm_restore(d.image, swap) == img);

  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto big = testutil::random_image(16, 16, 300 + s);
    const auto p = rcm_permutation(4, 1 + static_cast<int>(s % 3), s);
    const auto out = rcm_destruct(big, p);
    CHECK(sorted_pixels(out.image) == sorted_pixels(big));
    CHECK(rcm_restore(out.image, p) == big);
  }
  CHECK_THROWS_AS(rcm_destruct(testutil::random_image(10, 10, 1), rcm_permutation(4, 1, 0)), ValidationError);
}

TEST_CASE("upscale_attention is nearest-neighbour") {
  const auto m = single_peak(5);  // row 1, col 1
  const auto up = upscale_attention(m, 32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) CHECK(up[y * 32 + x] == ((y / 8 == 1 && x / 8 == 1) ? 1.0 : 0.0));
}

TEST_CASE("attention_crop") {
  const auto img = testutil::random_image(32, 32, 11);
  nn::AttentionMap uniform = map_4x4({1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1});
  CHECK(attention_box(img, uniform, 0.5) == Box{0, 0, 32, 32});
  CHECK(attention_crop(img, uniform, 0.5, 32) == img);
  CHECK(attention_crop(img, map_4x4({0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}), 0.5, 16) ==
        resize_bilinear(img, 16, 16));
  // Peak at cell (1, 2) covers rows 8..15, cols 16..23; a 10% margin of the
  // 8-pixel box adds round(0.8) = 1 pixel per side.
  const Box box = attention_box(img, single_peak(6), 0.5);
  CHECK(box == Box{7, 15, 10, 10});
  CHECK(attention_crop(img, single_peak(6), 0.5, 10) == crop(img, 7, 15, 10, 10));
  // Corner peak: the margin is clipped at the border.
  CHECK(attention_box(img, single_peak(0), 0.5) == Box{0, 0, 9, 9});
}

TEST_CASE("attention_drop") {
  const auto img = testutil::random_image(32, 32, 12);
  CHECK(attention_drop(img, map_4x4({0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}), 0.5) == img);
  const auto gone = attention_drop(img, map_4x4({1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1}), 0.5);
  for (float p : gone.pixels) CHECK(p == 0.0f);
  const auto one = attention_drop(img, single_peak(9), 0.5);  // row 2, col 1
  int zeroed = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const bool in = y >= 16 && y < 24 && x >= 8 && x < 16;
      for (int c = 0; c < 3; ++c) CHECK(one.at(y, x, c) == (in ? 0.0f : img.at(y, x, c)));
      zeroed += in;
    }
  CHECK(zeroed == 64);
}

TEST_CASE("tta_three") {
  const auto img = testutil::random_image(32, 40, 13);
  const auto v = tta_three(img, 36, 32, 5);
  REQUIRE(v.views.size() == 3);
  CHECK(v.descriptions.size() == 3);
  for (const auto& x : v.views) {
    CHECK(x.height == 32);
    CHECK(x.width == 32);
  }
  CHECK(v.views[0] == center_crop(resize_shorter_side(img, 36), 32));
  const auto again = tta_three(img, 36, 32, 5);
  CHECK(again.views == v.views);
  CHECK(again.descriptions == v.descriptions);
  // View 3 is view 2's crop recipe plus a flip only when their crops coincide;
  // with the same random crop offsets it is always a mirror of some crop.
  CHECK_THROWS_AS(tta_three(img, 30, 32, 0), ValidationError);
}

TEST_CASE("tta_three on a mirror-symmetric image: view 1 is its centre crop") {
  Image sym(32, 32);
  Rng rng(1);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) sym.at(y, x, c) = sym.at(y, 31 - x, c) = static_cast<float>(rng.uniform());
  const auto v = tta_three(sym, 32, 24, 9);
  CHECK(v.views[0] == center_crop(sym, 24));
  CHECK(flip_horizontal(v.views[0]) == v.views[0]);
}

TEST_CASE("crops_144: count, shape, mirror pairs, square inputs") {
  const auto img = testutil::random_image(32, 44, 14);
  const auto v = crops_144(img, {36, 40, 44, 48}, 32);
  REQUIRE(v.views.size() == 144);
  CHECK(v.descriptions.size() == 144);
  std::set<std::string> names(v.descriptions.begin(), v.descriptions.end());
  CHECK(names.size() == 144);
  for (std::size_t i = 0; i < 144; i += 2) {
    CHECK(v.views[i].height == 32);
    CHECK(v.views[i].width == 32);
    CHECK(v.views[i + 1] == flip_horizontal(v.views[i]));
  }
  // Square input: the three squares per scale coincide.
  const auto sq = crops_144(testutil::random_image(32, 32, 15), {36, 40, 44, 48}, 32);
  REQUIRE(sq.views.size() == 144);
  for (int scale = 0; scale < 4; ++scale)
    for (int k = 0; k < 12; ++k) {
      const auto& first = sq.views[scale * 36 + k];
      CHECK(sq.views[scale * 36 + 12 + k] == first);
      CHECK(sq.views[scale * 36 + 24 + k] == first);
    }
  CHECK(crops_144(img, {36, 40, 44, 48}, 32).views == v.views);
  CHECK_THROWS_AS(crops_144(img, {30, 40, 44, 48}, 32), ValidationError);
}
