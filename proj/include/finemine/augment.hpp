#pragma once

// Image-space augmentation and test-time view generation.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "finemine/image.hpp"
#include "finemine/rng.hpp"
#include "finemine/tinymodel.hpp"

namespace finemine::augment {

struct MixedSample {
  Image image;
  std::vector<double> target;
  double lam = 1.0;  // weight of the first sample's target
};

// Half-open pixel box.
struct Box {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  long area() const { return static_cast<long>(height) * width; }
  bool operator==(const Box&) const = default;
};

// Box with side fractions sqrt(1 - lam) around a uniform centre, clipped to
// the image. A side that spans the whole axis covers it entirely.
Box cutmix_box(int height, int width, double lam, Rng& rng);

// Pastes b into a inside `box`; lam = 1 - box_area / total_area.
MixedSample paste_box(const Image& a, std::span<const double> target_a, const Image& b,
                      std::span<const double> target_b, const Box& box);

MixedSample cutmix(const Image& a, std::span<const double> target_a, const Image& b, std::span<const double> target_b,
                   double alpha, std::uint64_t seed);
// Skips the Beta draw; the box centre is still seeded.
MixedSample cutmix_at_lambda(const Image& a, std::span<const double> target_a, const Image& b,
                             std::span<const double> target_b, double lam, std::uint64_t seed);

MixedSample mixup(const Image& a, std::span<const double> target_a, const Image& b, std::span<const double> target_b,
                  double alpha, std::uint64_t seed);
MixedSample mixup_at_lambda(const Image& a, std::span<const double> target_a, const Image& b,
                            std::span<const double> target_b, double lam);

// Region Confusion Mechanism permutation over an N x N tile grid.
struct RegionPermutation {
  int grid_n = 1;
  std::vector<int> mapping;  // mapping[dest] = source tile index (row-major)
  int jitter_k = 0;

  bool operator==(const RegionPermutation&) const = default;
};

RegionPermutation rcm_permutation(int grid_n, int jitter_k, std::uint64_t seed);
// Bijective and every tile within 2k of its source on both axes.
bool satisfies_rcm_invariants(const RegionPermutation& perm);

struct TileCoord {
  int row = 0;
  int col = 0;
  bool operator==(const TileCoord&) const = default;
};

struct Destructed {
  Image image;
  std::vector<TileCoord> alignment_targets;  // per destination tile: its source coordinates
};

Destructed rcm_destruct(const Image& image, const RegionPermutation& perm);
// Inverse of rcm_destruct.
Image rcm_restore(const Image& shuffled, const RegionPermutation& perm);

// Nearest-neighbour upsampling of the map onto the image grid: cell of pixel
// (y, x) is (y * h / H, x * w / W).
std::vector<double> upscale_attention(const nn::AttentionMap& attn, int height, int width);

// Bounding box of pixels with attention >= theta * max, grown by a 10% margin
// per side and clipped. Whole image when the map is all zero.
Box attention_box(const Image& image, const nn::AttentionMap& attn, double theta_c);
Image attention_crop(const Image& image, const nn::AttentionMap& attn, double theta_c, int out_size);
Image attention_drop(const Image& image, const nn::AttentionMap& attn, double theta_d);

struct ViewSet {
  std::vector<Image> views;
  std::vector<std::string> descriptions;
};

ViewSet tta_three(const Image& image, int resize_to, int crop, std::uint64_t seed);
// 4 scales x 3 squares x 6 crops x 2 mirrors; view 2i+1 mirrors view 2i.
ViewSet crops_144(const Image& image, const std::array<int, 4>& scales, int crop);

}  // namespace finemine::augment
