#pragma once

#include <vector>

#include "finemine/tensor_io.hpp"

namespace finemine {

// H x W x C grid of values in [0,1], row-major with interleaved channels.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c = 3, float fill = 0.0f);

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

  bool operator==(const Image&) const = default;
};

// Dataset-level invariants: dims >= 8, pixel count matches, values finite in [0,1].
void validate_image(const Image& img);

// Half-pixel-centred bilinear resampling; same-size resize is the identity.
Image resize_bilinear(const Image& img, int out_h, int out_w);
// Scales so the shorter side equals `target`, preserving aspect ratio.
Image resize_shorter_side(const Image& img, int target);
Image crop(const Image& img, int top, int left, int h, int w);
Image center_crop(const Image& img, int size);
Image flip_horizontal(const Image& img);

Tensor image_to_tensor(const Image& img);
Image image_from_tensor(const Tensor& t, const std::string& source);

}  // namespace finemine
