#include "finemine/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "finemine/error.hpp"

namespace finemine::augment {

namespace {

void check_pair(const Image& a, std::span<const double> ta, const Image& b, std::span<const double> tb) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels)
    throw ValidationError("mix: images must have identical dimensions");
  if (ta.size() != tb.size()) throw ValidationError("mix: targets must have identical lengths");
}

std::vector<double> mix_targets(std::span<const double> ta, std::span<const double> tb, double lam) {
  std::vector<double> t(ta.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = lam * ta[i] + (1.0 - lam) * tb[i];
  return t;
}

// [lo, hi) of a cut of length `cut` centred at `c`, clipped to [0, n).
std::pair<int, int> cut_axis(int c, int cut, int n) {
  if (cut >= n) return {0, n};
  const int lo = c - cut / 2;
  return {std::clamp(lo, 0, n), std::clamp(lo + cut, 0, n)};
}

void check_theta(double theta, const char* what) {
  if (!(theta > 0.0 && theta <= 1.0)) throw ValidationError(std::string(what) + ": threshold must be in (0, 1]");
}

double peak(const nn::AttentionMap& attn) {
  if (attn.values.empty()) return 0.0;
  return *std::max_element(attn.values.begin(), attn.values.end());
}

}  // namespace

Box cutmix_box(int height, int width, double lam, Rng& rng) {
  const double ratio = std::sqrt(std::clamp(1.0 - lam, 0.0, 1.0));
  const int cut_h = static_cast<int>(height * ratio);
  const int cut_w = static_cast<int>(width * ratio);
  const int cy = static_cast<int>(rng.uniform_int(0, height - 1));
  const int cx = static_cast<int>(rng.uniform_int(0, width - 1));
  const auto [y0, y1] = cut_axis(cy, cut_h, height);
  const auto [x0, x1] = cut_axis(cx, cut_w, width);
  return Box{y0, x0, y1 - y0, x1 - x0};
}

MixedSample paste_box(const Image& a, std::span<const double> target_a, const Image& b,
                      std::span<const double> target_b, const Box& box) {
  check_pair(a, target_a, b, target_b);
  if (box.top < 0 || box.left < 0 || box.height < 0 || box.width < 0 || box.top + box.height > a.height ||
      box.left + box.width > a.width)
    throw ValidationError("paste_box: box outside the image");
  MixedSample out;
  out.image = a;
  for (int y = box.top; y < box.top + box.height; ++y)
    for (int x = box.left; x < box.left + box.width; ++x)
      for (int c = 0; c < a.channels; ++c) out.image.at(y, x, c) = b.at(y, x, c);
  out.lam = 1.0 - static_cast<double>(box.area()) / (static_cast<double>(a.height) * a.width);
  out.target = mix_targets(target_a, target_b, out.lam);
  return out;
}

MixedSample cutmix_at_lambda(const Image& a, std::span<const double> target_a, const Image& b,
                             std::span<const double> target_b, double lam, std::uint64_t seed) {
  check_pair(a, target_a, b, target_b);
  Rng rng(seed);
  return paste_box(a, target_a, b, target_b, cutmix_box(a.height, a.width, lam, rng));
}

MixedSample cutmix(const Image& a, std::span<const double> target_a, const Image& b, std::span<const double> target_b,
                   double alpha, std::uint64_t seed) {
  check_pair(a, target_a, b, target_b);
  if (!(alpha > 0.0)) throw ValidationError("cutmix: alpha must be > 0");
  Rng rng(seed);
  const double lam = rng.beta(alpha, alpha);
  return paste_box(a, target_a, b, target_b, cutmix_box(a.height, a.width, lam, rng));
}

MixedSample mixup_at_lambda(const Image& a, std::span<const double> target_a, const Image& b,
                            std::span<const double> target_b, double lam) {
  check_pair(a, target_a, b, target_b);
  if (!(lam >= 0.0 && lam <= 1.0)) throw ValidationError("mixup: lambda must be in [0, 1]");
  MixedSample out;
  out.image = a;
  for (std::size_t i = 0; i < a.pixels.size(); ++i)
    out.image.pixels[i] = static_cast<float>(lam * a.pixels[i] + (1.0 - lam) * b.pixels[i]);
  out.lam = lam;
  out.target = mix_targets(target_a, target_b, lam);
  return out;
}

MixedSample mixup(const Image& a, std::span<const double> target_a, const Image& b, std::span<const double> target_b,
                  double alpha, std::uint64_t seed) {
  if (!(alpha > 0.0)) throw ValidationError("mixup: alpha must be > 0");
  Rng rng(seed);
  return mixup_at_lambda(a, target_a, b, target_b, rng.beta(alpha, alpha));
}

RegionPermutation rcm_permutation(int grid_n, int jitter_k, std::uint64_t seed) {
  if (grid_n < 1) throw ValidationError("rcm_permutation: grid_n must be >= 1");
  if (jitter_k < 0 || jitter_k >= grid_n) throw ValidationError("rcm_permutation: jitter_k must be in [0, grid_n)");
  const int n = grid_n;
  Rng rng(seed);
  std::vector<int> grid(static_cast<std::size_t>(n) * n);
  std::iota(grid.begin(), grid.end(), 0);

  auto jittered_order = [&] {
    std::vector<double> key(n);
    for (int j = 0; j < n; ++j) key[j] = j + rng.uniform(-jitter_k, jitter_k);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return key[x] < key[y]; });
    return order;
  };

  std::vector<int> next(grid.size());
  for (int r = 0; r < n; ++r) {
    const auto order = jittered_order();
    for (int p = 0; p < n; ++p) next[r * n + p] = grid[r * n + order[p]];
  }
  grid.swap(next);
  for (int c = 0; c < n; ++c) {
    const auto order = jittered_order();
    for (int p = 0; p < n; ++p) next[p * n + c] = grid[order[p] * n + c];
  }
  return RegionPermutation{grid_n, std::move(next), jitter_k};
}

bool satisfies_rcm_invariants(const RegionPermutation& perm) {
  const int n = perm.grid_n;
  if (n < 1 || perm.mapping.size() != static_cast<std::size_t>(n) * n) return false;
  std::vector<bool> seen(perm.mapping.size(), false);
  for (std::size_t dest = 0; dest < perm.mapping.size(); ++dest) {
    const int src = perm.mapping[dest];
    if (src < 0 || src >= n * n || seen[src]) return false;
    seen[src] = true;
    const int dr = static_cast<int>(dest) / n - src / n;
    const int dc = static_cast<int>(dest) % n - src % n;
    if (std::abs(dr) > 2 * perm.jitter_k || std::abs(dc) > 2 * perm.jitter_k) return false;
  }
  return true;
}

namespace {

void copy_tile(const Image& from, int from_row, int from_col, Image& to, int to_row, int to_col, int th, int tw) {
  for (int y = 0; y < th; ++y) {
    const auto* src = &from.pixels[(static_cast<std::size_t>(from_row * th + y) * from.width + from_col * tw) *
                                   from.channels];
    auto* dst = &to.pixels[(static_cast<std::size_t>(to_row * th + y) * to.width + to_col * tw) * to.channels];
    std::copy(src, src + static_cast<std::size_t>(tw) * from.channels, dst);
  }
}

void check_tiling(const Image& image, const RegionPermutation& perm) {
  if (perm.grid_n < 1 || image.height % perm.grid_n != 0 || image.width % perm.grid_n != 0)
    throw ValidationError("rcm: image dims must be divisible by grid_n");
  const std::size_t cells = static_cast<std::size_t>(perm.grid_n) * perm.grid_n;
  if (perm.mapping.size() != cells) throw ValidationError("rcm: mapping size does not match grid");
  std::vector<bool> seen(cells, false);
  for (int src : perm.mapping) {
    if (src < 0 || static_cast<std::size_t>(src) >= cells || seen[src])
      throw ValidationError("rcm: mapping is not a bijection");
    seen[src] = true;
  }
}

}  // namespace

Destructed rcm_destruct(const Image& image, const RegionPermutation& perm) {
  check_tiling(image, perm);
  const int n = perm.grid_n;
  const int th = image.height / n;
  const int tw = image.width / n;
  Destructed out{Image(image.height, image.width, image.channels), {}};
  out.alignment_targets.resize(perm.mapping.size());
  for (int dest = 0; dest < n * n; ++dest) {
    const int src = perm.mapping[dest];
    copy_tile(image, src / n, src % n, out.image, dest / n, dest % n, th, tw);
    out.alignment_targets[dest] = {src / n, src % n};
  }
  return out;
}

Image rcm_restore(const Image& shuffled, const RegionPermutation& perm) {
  check_tiling(shuffled, perm);
  const int n = perm.grid_n;
  const int th = shuffled.height / n;
  const int tw = shuffled.width / n;
  Image out(shuffled.height, shuffled.width, shuffled.channels);
  for (int dest = 0; dest < n * n; ++dest) {
    const int src = perm.mapping[dest];
    copy_tile(shuffled, dest / n, dest % n, out, src / n, src % n, th, tw);
  }
  return out;
}

std::vector<double> upscale_attention(const nn::AttentionMap& attn, int height, int width) {
  if (attn.height < 1 || attn.width < 1) throw ValidationError("attention map is empty");
  std::vector<double> up(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    const int ay = static_cast<int>(static_cast<long>(y) * attn.height / height);
    for (int x = 0; x < width; ++x) {
      const int ax = static_cast<int>(static_cast<long>(x) * attn.width / width);
      up[static_cast<std::size_t>(y) * width + x] = attn.at(ay, ax);
    }
  }
  return up;
}

Box attention_box(const Image& image, const nn::AttentionMap& attn, double theta_c) {
  check_theta(theta_c, "attention_crop");
  const Box whole{0, 0, image.height, image.width};
  const double top = peak(attn);
  if (!(top > 0.0)) return whole;
  const auto up = upscale_attention(attn, image.height, image.width);
  const double cut = theta_c * top;
  int y0 = image.height, y1 = -1, x0 = image.width, x1 = -1;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      if (up[static_cast<std::size_t>(y) * image.width + x] >= cut) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y1 < 0) return whole;
  const int my = static_cast<int>(std::lround(0.1 * (y1 - y0 + 1)));
  const int mx = static_cast<int>(std::lround(0.1 * (x1 - x0 + 1)));
  y0 = std::max(0, y0 - my);
  x0 = std::max(0, x0 - mx);
  y1 = std::min(image.height - 1, y1 + my);
  x1 = std::min(image.width - 1, x1 + mx);
  return Box{y0, x0, y1 - y0 + 1, x1 - x0 + 1};
}

Image attention_crop(const Image& image, const nn::AttentionMap& attn, double theta_c, int out_size) {
  if (out_size < 1) throw ValidationError("attention_crop: out_size must be positive");
  const Box box = attention_box(image, attn, theta_c);
  return resize_bilinear(crop(image, box.top, box.left, box.height, box.width), out_size, out_size);
}

Image attention_drop(const Image& image, const nn::AttentionMap& attn, double theta_d) {
  check_theta(theta_d, "attention_drop");
  const double top = peak(attn);
  if (!(top > 0.0)) return image;
  const auto up = upscale_attention(attn, image.height, image.width);
  const double cut = theta_d * top;
  Image out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      if (up[static_cast<std::size_t>(y) * image.width + x] >= cut)
        for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = 0.0f;
  return out;
}

ViewSet tta_three(const Image& image, int resize_to, int crop_size, std::uint64_t seed) {
  if (crop_size > resize_to) throw ValidationError("tta_three: crop must not exceed resize_to");
  if (crop_size < 1) throw ValidationError("tta_three: crop must be positive");
  const Image big = resize_shorter_side(image, resize_to);
  Rng rng(seed);
  auto random_crop = [&](int& top, int& left) {
    top = static_cast<int>(rng.uniform_int(0, big.height - crop_size));
    left = static_cast<int>(rng.uniform_int(0, big.width - crop_size));
    return crop(big, top, left, crop_size, crop_size);
  };
  const std::string resize = "resize(" + std::to_string(resize_to) + ")";
  ViewSet out;
  out.views.push_back(center_crop(big, crop_size));
  out.descriptions.push_back(resize + "+center_crop(" + std::to_string(crop_size) + ")");
  int top = 0, left = 0;
  out.views.push_back(random_crop(top, left));
  out.descriptions.push_back(resize + "+random_crop(" + std::to_string(crop_size) + "@" + std::to_string(top) + "," +
                             std::to_string(left) + ")");
  out.views.push_back(flip_horizontal(random_crop(top, left)));
  out.descriptions.push_back(resize + "+random_crop(" + std::to_string(crop_size) + "@" + std::to_string(top) + "," +
                             std::to_string(left) + ")+hflip");
  return out;
}

ViewSet crops_144(const Image& image, const std::array<int, 4>& scales, int crop_size) {
  if (crop_size < 1) throw ValidationError("crops_144: crop must be positive");
  if (crop_size > *std::min_element(scales.begin(), scales.end()))
    throw ValidationError("crops_144: crop must not exceed the smallest scale");
  ViewSet out;
  out.views.reserve(144);
  out.descriptions.reserve(144);
  for (int s : scales) {
    const Image big = resize_shorter_side(image, s);
    const bool wide = big.width >= big.height;
    const int longer = wide ? big.width : big.height;
    const int positions[3] = {0, (longer - s) / 2, longer - s};
    for (int q = 0; q < 3; ++q) {
      const Image square = wide ? crop(big, 0, positions[q], s, s) : crop(big, positions[q], 0, s, s);
      const int far = s - crop_size;
      const std::pair<const char*, Image> crops[6] = {
          {"tl", crop(square, 0, 0, crop_size, crop_size)},
          {"tr", crop(square, 0, far, crop_size, crop_size)},
          {"bl", crop(square, far, 0, crop_size, crop_size)},
          {"br", crop(square, far, far, crop_size, crop_size)},
          {"center", center_crop(square, crop_size)},
          {"full", resize_bilinear(square, crop_size, crop_size)},
      };
      for (const auto& [name, view] : crops) {
        const std::string desc = "scale(" + std::to_string(s) + ")/square" + std::to_string(q) + "/" + name;
        out.views.push_back(view);
        out.descriptions.push_back(desc);
        out.views.push_back(flip_horizontal(view));
        out.descriptions.push_back(desc + "+hflip");
      }
    }
  }
  return out;
}

}  // namespace finemine::augment
