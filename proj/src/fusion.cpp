#include "finemine/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "finemine/error.hpp"

namespace finemine::fusion {

namespace {

constexpr double kNormTol = 1e-9;

void check_pair(const RouteWeights& w, const char* name) {
  const std::string field = std::string("fusion.routing.") + name;
  if (!(w.generic >= 0.0) || !(w.finegrained >= 0.0)) throw ValidationError(field + ": weights must be >= 0");
  if (std::abs(w.generic + w.finegrained - 1.0) > kNormTol) throw ValidationError(field + ": weights must sum to 1");
}

}  // namespace

void validate(const FusionPlan& plan) {
  if (!plan.model_weights.empty()) {
    double sum = 0.0;
    for (double w : plan.model_weights) {
      if (!(w >= 0.0)) throw ValidationError("fusion.model_weights: weights must be >= 0");
      sum += w;
    }
    if (std::abs(sum - 1.0) > kNormTol) throw ValidationError("fusion.model_weights: weights must sum to 1");
  }
  check_pair(plan.routing[0], "long");
  check_pair(plan.routing[1], "medium");
  check_pair(plan.routing[2], "close");
  if (!(plan.t_long > 0.0 && plan.t_long < plan.t_close && plan.t_close < 1.0))
    throw ValidationError("fusion.area_thresholds: need 0 < t_long < t_close < 1");
  if (!(plan.attention_binarize > 0.0 && plan.attention_binarize <= 1.0))
    throw ValidationError("fusion.attention_binarize must lie in (0, 1]");
}

std::vector<double> weights_from_accuracy(std::span<const double> accuracies) {
  if (accuracies.empty()) throw ValidationError("weights_from_accuracy: no accuracies");
  double sum = 0.0;
  for (double a : accuracies) {
    if (!(a >= 0.0) || !std::isfinite(a)) throw ValidationError("weights_from_accuracy: accuracies must be >= 0");
    sum += a;
  }
  if (sum <= 0.0) throw ValidationError("weights_from_accuracy: accuracies are all zero");
  std::vector<double> w(accuracies.size());
  std::transform(accuracies.begin(), accuracies.end(), w.begin(), [sum](double a) { return a / sum; });
  return w;
}

std::vector<double> fuse(std::span<const std::vector<double>> logits, std::span<const double> weights) {
  if (logits.empty()) throw ValidationError("fuse: no logit vectors");
  if (logits.size() != weights.size()) throw ValidationError("fuse: logits and weights differ in length");
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (std::abs(sum - 1.0) > kNormTol) throw ValidationError("fuse: weights must be normalised");
  const std::size_t n = logits.front().size();
  std::vector<double> out(n, 0.0);
  for (std::size_t m = 0; m < logits.size(); ++m) {
    if (logits[m].size() != n) throw ValidationError("fuse: logit vectors differ in length");
    if (weights[m] < 0.0) throw ValidationError("fuse: negative weight");
    for (std::size_t i = 0; i < n; ++i) out[i] += weights[m] * logits[m][i];
  }
  return out;
}

std::vector<double> tta_aggregate(std::span<const std::vector<double>> view_logits) {
  if (view_logits.empty()) throw ValidationError("tta_aggregate: no views");
  const std::size_t n = view_logits.front().size();
  std::vector<double> out(n, 0.0);
  for (const auto& v : view_logits) {
    if (v.size() != n) throw ValidationError("tta_aggregate: views differ in length");
    for (std::size_t i = 0; i < n; ++i) out[i] += v[i];
  }
  for (double& v : out) v /= static_cast<double>(view_logits.size());
  return out;
}

double attention_area_ratio(const nn::AttentionMap& attn, double binarize) {
  if (!(binarize > 0.0 && binarize <= 1.0)) throw ValidationError("attention_area_ratio: binarize must lie in (0, 1]");
  if (attn.values.empty()) return 0.0;
  const double peak = *std::max_element(attn.values.begin(), attn.values.end());
  if (peak <= 0.0) return 0.0;
  const auto hits = std::count_if(attn.values.begin(), attn.values.end(),
                                  [&](double v) { return v >= binarize * peak; });
  return static_cast<double>(hits) / static_cast<double>(attn.values.size());
}

ShotType classify_shot(double area_ratio, const FusionPlan& plan) {
  if (area_ratio < plan.t_long) return ShotType::Long;
  if (area_ratio >= plan.t_close) return ShotType::Close;
  return ShotType::Medium;
}

std::vector<double> routed_fuse(std::span<const double> z_generic, std::span<const double> z_finegrained,
                                ShotType shot, const FusionPlan& plan) {
  if (z_generic.size() != z_finegrained.size()) throw ValidationError("routed_fuse: logit vectors differ in length");
  const RouteWeights& w = plan.route(shot);
  std::vector<double> out(z_generic.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w.generic * z_generic[i] + w.finegrained * z_finegrained[i];
  return out;
}

}  // namespace finemine::fusion
