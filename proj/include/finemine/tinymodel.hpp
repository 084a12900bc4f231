#pragma once

// Small from-scratch classifier: two 3x3/stride-2 conv+ReLU stages (8 and 16
// channels), global average pooling, linear head. Parameters are stored as
// float32 so checkpoints round-trip exactly; all arithmetic runs in double.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "finemine/image.hpp"

namespace finemine::nn {

struct AugmentFlags {
  bool cutmix = false;
  double cutmix_alpha = 0.2;
  bool rcm = false;
  int rcm_grid = 4;
  int rcm_k = 1;
  bool attention_aug = false;
  bool flip = false;
  // When > 0, training views are random squares covering [scale_min, 1] of
  // the image area instead of fixed-scale crops.
  double scale_min = 0.0;

  bool operator==(const AugmentFlags&) const = default;
};

struct TrainConfig {
  int epochs = 50;
  int batch_size = 128;
  double base_lr = 0.025;
  int warmup_epochs = 5;
  double label_smooth_eps = 0.2;
  int crop_size = 32;
  AugmentFlags augment;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

// Throws ValidationError naming the offending field. base_lr = 0 is accepted
// as a no-op schedule.
void validate(const TrainConfig& cfg);

struct ParamInfo {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::size_t offset;
  std::size_t size;

  bool operator==(const ParamInfo&) const = default;
};

class Classifier {
 public:
  static constexpr int kInChannels = 3;
  static constexpr int kStage1 = 8;
  static constexpr int kStage2 = 16;
  static constexpr int kTaps = 9;

  // All-zero parameters.
  explicit Classifier(int num_classes = 2);

  int num_classes() const { return num_classes_; }

  std::span<float> params() { return params_; }
  std::span<const float> params() const { return params_; }

  // conv1.weight, conv1.bias, conv2.weight, conv2.bias, head.weight, head.bias
  const std::vector<ParamInfo>& layout() const { return layout_; }
  std::span<float> param(std::size_t index);
  std::span<const float> param(std::size_t index) const;

  // Everything before the head; fix_finetune never touches this range.
  std::span<const float> conv_params() const;
  std::span<float> head_weight() { return param(4); }
  std::span<float> head_bias() { return param(5); }
  std::span<const float> head_weight() const { return param(4); }
  std::span<const float> head_bias() const { return param(5); }

  static constexpr std::size_t conv_param_count() {
    return kStage1 * kInChannels * kTaps + kStage1 + kStage2 * kStage1 * kTaps + kStage2;
  }

  // Resolution the model was last trained at; 0 until trained.
  int input_resolution = 0;

  bool operator==(const Classifier&) const = default;

 private:
  int num_classes_;
  std::vector<float> params_;
  std::vector<ParamInfo> layout_;
};

struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;  // CHW
};

// Max-normalized to a peak of 1, or identically zero.
struct AttentionMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

struct ForwardResult {
  std::vector<double> logits;
  FeatureMap features;
};

Classifier init(int num_classes, std::uint64_t seed);
// Copies the conv stages and draws a fresh head for `num_classes`.
Classifier with_new_head(const Classifier& model, int num_classes, std::uint64_t seed);

// Resizes the image to resolution x resolution; logits are pre-softmax.
ForwardResult forward(const Classifier& model, const Image& image, int resolution);
AttentionMap attention(const Classifier& model, const Image& image, int resolution);
// Globally pooled last-stage features (the head's input).
std::vector<double> pooled_features(const Classifier& model, const Image& image, int resolution);

std::vector<double> softmax(std::span<const double> logits);
int argmax(std::span<const double> values);

std::vector<double> smooth_targets(int label, int num_classes, double eps);
// Cross-entropy against a probability target, max-logit stabilised.
double loss(std::span<const double> logits, std::span<const double> target);
double lr_at(long step, long total_steps, const TrainConfig& cfg);

// Evaluation preprocessing: resize to R + R/8, centre crop R.
Image center_view(const Image& image, int resolution);
// Training counterpart with a uniformly drawn crop offset. With scale_min > 0
// a random square of area fraction in [scale_min, 1] is resized instead.
Image random_view(const Image& image, int resolution, std::uint64_t seed, double scale_min = 0.0);
// Logits of the centre view at the model's input resolution.
std::vector<double> predict(const Classifier& model, const Image& image);

// Loss gradient w.r.t. every parameter, same flat layout as params().
std::vector<double> gradient(const Classifier& model, const Image& image, std::span<const double> target,
                             int resolution);

// Central differences (extended precision) against gradient(); returns the
// max over parameters of |a - n| / max(1e-8, |a| + |n|). When a ReLU changes
// state inside [theta - h, theta + h] the step is shrunk tenfold (down to
// 1e-10) so the difference never straddles a kink.
double grad_check(const Classifier& model, const Image& image, std::span<const double> target, double epsilon);

struct TrainItem {
  Image image;
  std::vector<double> target;
};

struct TrainResult {
  Classifier model;
  std::vector<double> epoch_losses;
};

TrainResult train(const Classifier& model, std::span<const TrainItem> data, const TrainConfig& cfg);

// Freezes the conv stages and retrains the head at `high_resolution` on
// centre views.
Classifier fix_finetune(const Classifier& model, std::span<const TrainItem> data, int high_resolution,
                        const TrainConfig& cfg);

void save_checkpoint(const Classifier& model, const std::filesystem::path& dir);
Classifier load_checkpoint(const std::filesystem::path& dir);

}  // namespace finemine::nn
