#pragma once

#include <filesystem>
#include <string>

#include "finemine/image.hpp"
#include "finemine/rng.hpp"
#include "finemine/synth_data.hpp"

namespace testutil {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("finemine_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline finemine::Image random_image(int h, int w, std::uint64_t seed) {
  finemine::Rng rng(seed);
  finemine::Image img(h, w);
  for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
  return img;
}

// Small bundle for tests that need real data but not many examples.
inline finemine::synth::GenSpec tiny_spec(std::uint64_t seed = 3) {
  finemine::synth::GenSpec s;
  s.num_inclass_classes = 4;
  s.num_outclass_classes = 3;
  s.image_size = 16;
  s.counts = {24, 8, 12, 12, 8};
  s.seed = seed;
  return s;
}

}  // namespace testutil
