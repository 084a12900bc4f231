#include "finemine/image.hpp"

#include <algorithm>
#include <cmath>

#include "finemine/error.hpp"

namespace finemine {

Image::Image(int h, int w, int c, float fill)
    : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

void validate_image(const Image& img) {
  if (img.height < 8 || img.width < 8)
    throw ValidationError("image: height and width must be >= 8, got " + std::to_string(img.height) + "x" +
                          std::to_string(img.width));
  if (img.channels < 1) throw ValidationError("image: channels must be >= 1");
  if (img.pixels.size() != static_cast<std::size_t>(img.height) * img.width * img.channels)
    throw ValidationError("image: pixel count does not match dims");
  for (float v : img.pixels)
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) throw ValidationError("image: pixel outside [0,1]");
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ValidationError("resize: output dims must be positive");
  if (out_h == img.height && out_w == img.width) return img;
  Image out(out_h, out_w, img.channels);
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;

  struct Tap {
    int i0, i1;
    double t;
  };
  auto taps = [](int n_out, int n_in, double scale) {
    std::vector<Tap> v(n_out);
    for (int o = 0; o < n_out; ++o) {
      double src = (o + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, n_in - 1);
      v[o] = {i0, i1, src - i0};
    }
    return v;
  };
  const auto ty = taps(out_h, img.height, sy);
  const auto tx = taps(out_w, img.width, sx);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        const double top = img.at(ty[y].i0, tx[x].i0, c) * (1.0 - tx[x].t) + img.at(ty[y].i0, tx[x].i1, c) * tx[x].t;
        const double bot = img.at(ty[y].i1, tx[x].i0, c) * (1.0 - tx[x].t) + img.at(ty[y].i1, tx[x].i1, c) * tx[x].t;
        out.at(y, x, c) = static_cast<float>(top * (1.0 - ty[y].t) + bot * ty[y].t);
      }
    }
  }
  return out;
}

Image resize_shorter_side(const Image& img, int target) {
  if (img.height <= img.width) {
    const int w = static_cast<int>(std::lround(static_cast<double>(img.width) * target / img.height));
    return resize_bilinear(img, target, std::max(w, target));
  }
  const int h = static_cast<int>(std::lround(static_cast<double>(img.height) * target / img.width));
  return resize_bilinear(img, std::max(h, target), target);
}

Image crop(const Image& img, int top, int left, int h, int w) {
  if (top < 0 || left < 0 || h < 1 || w < 1 || top + h > img.height || left + w > img.width)
    throw ValidationError("crop: window out of bounds");
  Image out(h, w, img.channels);
  for (int y = 0; y < h; ++y) {
    const auto* src = &img.pixels[(static_cast<std::size_t>(top + y) * img.width + left) * img.channels];
    std::copy(src, src + static_cast<std::size_t>(w) * img.channels,
              &out.pixels[static_cast<std::size_t>(y) * w * img.channels]);
  }
  return out;
}

Image center_crop(const Image& img, int size) {
  if (size > img.height || size > img.width) throw ValidationError("center_crop: crop larger than image");
  return crop(img, (img.height - size) / 2, (img.width - size) / 2, size, size);
}

Image flip_horizontal(const Image& img) {
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, img.width - 1 - x, c) = img.at(y, x, c);
  return out;
}

Tensor image_to_tensor(const Image& img) {
  return Tensor{{static_cast<std::uint32_t>(img.height), static_cast<std::uint32_t>(img.width),
                 static_cast<std::uint32_t>(img.channels)},
                img.pixels};
}

Image image_from_tensor(const Tensor& t, const std::string& source) {
  if (t.dims.size() != 3) throw IntegrityError(source + ": image tensor must have rank 3");
  Image img;
  img.height = static_cast<int>(t.dims[0]);
  img.width = static_cast<int>(t.dims[1]);
  img.channels = static_cast<int>(t.dims[2]);
  img.pixels = t.data;
  return img;
}

}  // namespace finemine
