#pragma once

// Pre-softmax logit fusion, TTA aggregation and shot-routed blending of a
// generic and a fine-grained model.

#include <array>
#include <span>
#include <vector>

#include "finemine/synth_data.hpp"
#include "finemine/tinymodel.hpp"

namespace finemine::fusion {

using ShotType = synth::Shot;

struct RouteWeights {
  double generic = 0.5;
  double finegrained = 0.5;

  bool operator==(const RouteWeights&) const = default;
};

struct FusionPlan {
  std::vector<double> model_weights;  // empty: derived from accuracy at run time
  // Indexed by ShotType: Long, Medium, Close.
  std::array<RouteWeights, 3> routing{{{0.7, 0.3}, {0.3, 0.7}, {0.6, 0.4}}};
  double t_long = 0.1;
  double t_close = 0.6;
  double attention_binarize = 0.5;

  const RouteWeights& route(ShotType shot) const { return routing[static_cast<int>(shot)]; }
  bool operator==(const FusionPlan&) const = default;
};

// Throws ValidationError naming the offending field.
void validate(const FusionPlan& plan);

std::vector<double> weights_from_accuracy(std::span<const double> accuracies);
// Element-wise sum of weights[i] * logits[i]; weights must sum to 1.
std::vector<double> fuse(std::span<const std::vector<double>> logits, std::span<const double> weights);
std::vector<double> tta_aggregate(std::span<const std::vector<double>> view_logits);

double attention_area_ratio(const nn::AttentionMap& attn, double binarize);
ShotType classify_shot(double area_ratio, const FusionPlan& plan);
std::vector<double> routed_fuse(std::span<const double> z_generic, std::span<const double> z_finegrained,
                                ShotType shot, const FusionPlan& plan);

}  // namespace finemine::fusion
