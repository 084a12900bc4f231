#pragma once

// Seeded synthetic fine-grained datasets: cluttered scenes, each holding one
// striped motif whose stripe period and orientation encode the class.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "finemine/image.hpp"

namespace finemine::synth {

enum class Shot { Long, Medium, Close };

std::string_view to_string(Shot shot);
Shot shot_from_string(std::string_view name);

// Closed interval of motif-box area ratios allowed for a shot.
struct AreaBand {
  double lo;
  double hi;
  bool contains(double r) const { return r >= lo && r <= hi; }
};
AreaBand shot_band(Shot shot);

struct SplitCounts {
  int labeled_train = 300;
  int validation = 200;
  int inclass_unlabeled = 2000;
  int outclass_unlabeled = 4000;
  int test = 500;

  bool operator==(const SplitCounts&) const = default;
};

struct GenSpec {
  int num_inclass_classes = 10;
  int num_outclass_classes = 20;
  int image_size = 32;
  SplitCounts counts;
  double imbalance_exponent = 1.5;
  std::array<double, 3> shot_mix{0.3, 0.4, 0.3};  // Long, Medium, Close
  std::uint64_t seed = 0;

  bool operator==(const GenSpec&) const = default;
};

// Throws ValidationError naming the offending field.
void validate(const GenSpec& spec);

struct Example {
  std::string id;
  Image image;
  std::optional<int> label;
  // Ground truth. Training code reads only `label`; hidden_label on unlabeled
  // splits is for explicitly marked evaluation paths.
  int hidden_label = 0;
  Shot shot = Shot::Medium;
  double target_area_ratio = 0.0;

  bool operator==(const Example&) const = default;
};

inline constexpr std::array<std::string_view, 5> kSplitNames{"labeled_train", "validation", "inclass_unlabeled",
                                                              "outclass_unlabeled", "test"};

struct DatasetBundle {
  GenSpec spec;
  std::vector<Example> labeled_train;
  std::vector<Example> validation;
  std::vector<Example> inclass_unlabeled;
  std::vector<Example> outclass_unlabeled;
  std::vector<Example> test;
  int num_inclass_classes = 0;
  int num_outclass_classes = 0;

  std::vector<Example>& split(std::string_view name);
  const std::vector<Example>& split(std::string_view name) const;

  bool operator==(const DatasetBundle&) const = default;
};

// Per-class labeled_train counts: proportional to (c + 1)^-exponent,
// largest-remainder rounded to `total`, at least one per class.
std::vector<int> imbalanced_counts(int num_classes, int total, double exponent);

// Class signature. The orientation is an unsigned tilt from vertical; each
// image draws its sign, so horizontal mirroring never changes the class.
struct StripeStyle {
  double period = 4.0;       // pixels
  double orientation = 0.0;  // radians
};
// Valid for in-class ids [0, C) and out-of-class ids [C, C + O).
StripeStyle stripe_style(const GenSpec& spec, int class_id);

struct MotifPlacement {
  int top = 0;
  int left = 0;
  int height = 1;
  int width = 1;
  bool mirrored = false;  // negates the class tilt
  double jitter = 0.0;    // radians added to the tilt
  double phase = 0.0;
};

// Renders one scene with background drawn from `background_seed`.
Image render_image(const GenSpec& spec, int class_id, const MotifPlacement& motif, std::uint64_t background_seed);

DatasetBundle generate(const GenSpec& spec);

// Throws IntegrityError describing the first violated bundle invariant.
void check_bundle(const DatasetBundle& bundle);

// manifest.json plus images/<id>.fmt1 per example.
void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir);
DatasetBundle load_bundle(const std::filesystem::path& dir);

}  // namespace finemine::synth
