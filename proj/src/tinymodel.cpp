#include "finemine/tinymodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "finemine/augment.hpp"
#include "finemine/error.hpp"
#include "finemine/parallel.hpp"
#include "finemine/rng.hpp"

namespace finemine::nn {

namespace {

constexpr int kC0 = Classifier::kInChannels;
constexpr int kC1 = Classifier::kStage1;
constexpr int kC2 = Classifier::kStage2;
constexpr int kT = Classifier::kTaps;
constexpr int kK1 = kC0 * kT;  // im2col rows, stage 1
constexpr int kK2 = kC1 * kT;  // im2col rows, stage 2

// Input standardisation applied before the first conv: each channel is
// centred on its own image mean, so flat scene colour carries no signal
// into the pooled features.
constexpr double kPixelScale = 4.0;

constexpr std::size_t kOffW1 = 0;
constexpr std::size_t kOffB1 = kOffW1 + kC1 * kK1;
constexpr std::size_t kOffW2 = kOffB1 + kC1;
constexpr std::size_t kOffB2 = kOffW2 + kC2 * kK2;
constexpr std::size_t kOffWh = kOffB2 + kC2;

constexpr int conv_out(int r) { return (r - 1) / 2 + 1; }

std::size_t param_count(int num_classes) { return kOffWh + static_cast<std::size_t>(num_classes) * (kC2 + 1); }

template <class S>
void im2col(const S* in, int channels, int r_in, int r_out, S* col) {
  const int p = r_out * r_out;
  for (int c = 0; c < channels; ++c) {
    const S* plane = in + static_cast<std::size_t>(c) * r_in * r_in;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        S* row = col + (static_cast<std::size_t>(c) * kT + ky * 3 + kx) * p;
        for (int oy = 0; oy < r_out; ++oy) {
          const int iy = 2 * oy + ky - 1;
          S* dst = row + oy * r_out;
          if (iy < 0 || iy >= r_in) {
            std::fill(dst, dst + r_out, S(0));
            continue;
          }
          for (int ox = 0; ox < r_out; ++ox) {
            const int ix = 2 * ox + kx - 1;
            dst[ox] = (ix >= 0 && ix < r_in) ? plane[iy * r_in + ix] : S(0);
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int channels, int r_in, int r_out, double* out) {
  const int p = r_out * r_out;
  for (int c = 0; c < channels; ++c) {
    double* plane = out + static_cast<std::size_t>(c) * r_in * r_in;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = col + (static_cast<std::size_t>(c) * kT + ky * 3 + kx) * p;
        for (int oy = 0; oy < r_out; ++oy) {
          const int iy = 2 * oy + ky - 1;
          if (iy < 0 || iy >= r_in) continue;
          for (int ox = 0; ox < r_out; ++ox) {
            const int ix = 2 * ox + kx - 1;
            if (ix >= 0 && ix < r_in) plane[iy * r_in + ix] += row[oy * r_out + ox];
          }
        }
      }
    }
  }
}

template <class S>
void conv_forward(const S* weight, const S* bias, int out_ch, int k, const S* col, int p, S* pre, S* act) {
  for (int oc = 0; oc < out_ch; ++oc) {
    S* o = pre + static_cast<std::size_t>(oc) * p;
    std::fill(o, o + p, bias[oc]);
    for (int kk = 0; kk < k; ++kk) {
      const S w = weight[oc * k + kk];
      const S* c = col + static_cast<std::size_t>(kk) * p;
      for (int i = 0; i < p; ++i) o[i] += w * c[i];
    }
    S* a = act + static_cast<std::size_t>(oc) * p;
    for (int i = 0; i < p; ++i) a[i] = o[i] > S(0) ? o[i] : S(0);
  }
}

// Activations of one forward pass, kept for backprop.
template <class S>
struct Pass {
  int r0 = 0, r1 = 0, r2 = 0;
  std::vector<S> x0, col1, pre1, a1, col2, pre2, a2, pooled, logits;
};

template <class S>
void run_forward(const S* w, int num_classes, const Image& img, Pass<S>& pass) {
  if (img.channels != kC0) throw ValidationError("forward: expected a 3-channel image");
  const int r0 = img.height;
  const int r1 = conv_out(r0);
  const int r2 = conv_out(r1);
  const int p0 = r0 * r0, p1 = r1 * r1, p2 = r2 * r2;
  pass.r0 = r0;
  pass.r1 = r1;
  pass.r2 = r2;
  pass.x0.resize(static_cast<std::size_t>(kC0) * p0);
  S mean[kC0] = {};
  for (int y = 0; y < r0; ++y)
    for (int x = 0; x < r0; ++x)
      for (int c = 0; c < kC0; ++c) mean[c] += static_cast<S>(img.at(y, x, c));
  for (S& m : mean) m /= S(p0);
  for (int y = 0; y < r0; ++y)
    for (int x = 0; x < r0; ++x)
      for (int c = 0; c < kC0; ++c)
        pass.x0[static_cast<std::size_t>(c) * p0 + y * r0 + x] =
            (static_cast<S>(img.at(y, x, c)) - mean[c]) * S(kPixelScale);

  pass.col1.resize(static_cast<std::size_t>(kK1) * p1);
  pass.pre1.resize(static_cast<std::size_t>(kC1) * p1);
  pass.a1.resize(pass.pre1.size());
  im2col(pass.x0.data(), kC0, r0, r1, pass.col1.data());
  conv_forward(w + kOffW1, w + kOffB1, kC1, kK1, pass.col1.data(), p1, pass.pre1.data(), pass.a1.data());

  pass.col2.resize(static_cast<std::size_t>(kK2) * p2);
  pass.pre2.resize(static_cast<std::size_t>(kC2) * p2);
  pass.a2.resize(pass.pre2.size());
  im2col(pass.a1.data(), kC1, r1, r2, pass.col2.data());
  conv_forward(w + kOffW2, w + kOffB2, kC2, kK2, pass.col2.data(), p2, pass.pre2.data(), pass.a2.data());

  pass.pooled.assign(kC2, S(0));
  for (int c = 0; c < kC2; ++c) {
    S s = 0;
    const S* a = pass.a2.data() + static_cast<std::size_t>(c) * p2;
    for (int i = 0; i < p2; ++i) s += a[i];
    pass.pooled[c] = s / static_cast<S>(p2);
  }
  const S* wh = w + kOffWh;
  const S* bh = wh + static_cast<std::size_t>(num_classes) * kC2;
  pass.logits.resize(num_classes);
  for (int k = 0; k < num_classes; ++k) {
    S z = bh[k];
    for (int c = 0; c < kC2; ++c) z += wh[k * kC2 + c] * pass.pooled[c];
    pass.logits[k] = z;
  }
}

template <class S>
S loss_impl(std::span<const S> logits, std::span<const double> target) {
  const S m = *std::max_element(logits.begin(), logits.end());
  S sum = 0;
  for (S z : logits) sum += std::exp(z - m);
  const S lse = std::log(sum);
  S l = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) l -= static_cast<S>(target[i]) * (logits[i] - m - lse);
  return l;
}

// Gradient of the loss for a completed pass; writes (not accumulates) `grad`.
void run_backward(const double* w, int num_classes, const Pass<double>& pass, std::span<const double> target,
                  double* grad) {
  const int p1 = pass.r1 * pass.r1;
  const int p2 = pass.r2 * pass.r2;
  std::fill(grad, grad + param_count(num_classes), 0.0);

  std::vector<double> dz = softmax(pass.logits);
  for (int k = 0; k < num_classes; ++k) dz[k] -= target[k];

  const double* wh = w + kOffWh;
  double* gwh = grad + kOffWh;
  double* gbh = gwh + static_cast<std::size_t>(num_classes) * kC2;
  std::vector<double> dpooled(kC2, 0.0);
  for (int k = 0; k < num_classes; ++k) {
    gbh[k] = dz[k];
    for (int c = 0; c < kC2; ++c) {
      gwh[k * kC2 + c] = dz[k] * pass.pooled[c];
      dpooled[c] += wh[k * kC2 + c] * dz[k];
    }
  }

  std::vector<double> dpre2(static_cast<std::size_t>(kC2) * p2);
  for (int c = 0; c < kC2; ++c) {
    const double g = dpooled[c] / p2;
    for (int i = 0; i < p2; ++i) {
      const std::size_t j = static_cast<std::size_t>(c) * p2 + i;
      dpre2[j] = pass.pre2[j] > 0.0 ? g : 0.0;
    }
  }

  std::vector<double> dcol2(static_cast<std::size_t>(kK2) * p2, 0.0);
  for (int oc = 0; oc < kC2; ++oc) {
    const double* d = dpre2.data() + static_cast<std::size_t>(oc) * p2;
    double gb = 0.0;
    for (int i = 0; i < p2; ++i) gb += d[i];
    grad[kOffB2 + oc] = gb;
    for (int kk = 0; kk < kK2; ++kk) {
      const double* c = pass.col2.data() + static_cast<std::size_t>(kk) * p2;
      double* dc = dcol2.data() + static_cast<std::size_t>(kk) * p2;
      const double wv = w[kOffW2 + oc * kK2 + kk];
      double gw = 0.0;
      for (int i = 0; i < p2; ++i) {
        gw += d[i] * c[i];
        dc[i] += wv * d[i];
      }
      grad[kOffW2 + oc * kK2 + kk] = gw;
    }
  }

  std::vector<double> dpre1(static_cast<std::size_t>(kC1) * p1, 0.0);
  col2im_add(dcol2.data(), kC1, pass.r1, pass.r2, dpre1.data());
  for (std::size_t j = 0; j < dpre1.size(); ++j)
    if (!(pass.pre1[j] > 0.0)) dpre1[j] = 0.0;

  for (int oc = 0; oc < kC1; ++oc) {
    const double* d = dpre1.data() + static_cast<std::size_t>(oc) * p1;
    double gb = 0.0;
    for (int i = 0; i < p1; ++i) gb += d[i];
    grad[kOffB1 + oc] = gb;
    for (int kk = 0; kk < kK1; ++kk) {
      const double* c = pass.col1.data() + static_cast<std::size_t>(kk) * p1;
      double gw = 0.0;
      for (int i = 0; i < p1; ++i) gw += d[i] * c[i];
      grad[kOffW1 + oc * kK1 + kk] = gw;
    }
  }
}

std::vector<double> to_double(std::span<const float> p) { return {p.begin(), p.end()}; }

Image resized_square(const Image& image, int resolution) {
  if (resolution < 8) throw ValidationError("forward: resolution must be >= 8");
  return resize_bilinear(image, resolution, resolution);
}

AttentionMap attention_from_pass(const Pass<double>& pass) {
  AttentionMap map;
  map.height = pass.r2;
  map.width = pass.r2;
  const int p2 = pass.r2 * pass.r2;
  map.values.assign(p2, 0.0);
  // Per-channel deviation from the spatial mean: flat scene colour cancels,
  // textured regions stand out.
  for (int c = 0; c < kC2; ++c) {
    const double* a = pass.a2.data() + static_cast<std::size_t>(c) * p2;
    double mean = 0.0;
    for (int i = 0; i < p2; ++i) mean += a[i];
    mean /= p2;
    for (int i = 0; i < p2; ++i) map.values[i] += std::abs(a[i] - mean);
  }
  double peak = 0.0;
  for (double& v : map.values) {
    v /= kC2;
    peak = std::max(peak, v);
  }
  if (peak > 0.0)
    for (double& v : map.values) v /= peak;
  return map;
}

AttentionMap attention_with(const double* w, int num_classes, const Image& view) {
  Pass<double> pass;
  run_forward(w, num_classes, view, pass);
  return attention_from_pass(pass);
}

void check_targets(std::span<const TrainItem> data, int num_classes) {
  if (data.empty()) throw ValidationError("train: data is empty");
  for (const auto& item : data)
    if (static_cast<int>(item.target.size()) != num_classes)
      throw ValidationError("train: target length does not match num_classes");
}

std::vector<float> round_to_float(const std::vector<double>& w) { return {w.begin(), w.end()}; }

int effective_warmup_epochs(const TrainConfig& cfg) { return std::min(cfg.warmup_epochs, cfg.epochs - 1); }

// Training-time view of one item (crop, flip, attention crop/drop, RCM).
Image augmented_view(const Image& source, const TrainConfig& cfg, const double* w, int num_classes,
                     std::uint64_t seed) {
  Rng rng(seed);
  Image view = random_view(source, cfg.crop_size, rng.engine()(), cfg.augment.scale_min);
  const auto& aug = cfg.augment;
  if (aug.flip && rng.uniform() < 0.5) view = flip_horizontal(view);
  if (aug.attention_aug) {
    const auto mode = rng.uniform_int(0, 2);
    if (mode != 0) {
      const AttentionMap attn = attention_with(w, num_classes, view);
      view = mode == 1 ? augment::attention_crop(view, attn, 0.5, cfg.crop_size)
                       : augment::attention_drop(view, attn, 0.5);
    }
  }
  if (aug.rcm && rng.uniform() < 0.5) {
    const auto perm = augment::rcm_permutation(aug.rcm_grid, aug.rcm_k, rng.engine()());
    view = augment::rcm_destruct(view, perm).image;
  }
  return view;
}

}  // namespace

void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ValidationError("train.epochs must be >= 1");
  if (cfg.batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
  if (!(cfg.base_lr >= 0.0) || !std::isfinite(cfg.base_lr)) throw ValidationError("train.base_lr must be >= 0");
  if (cfg.warmup_epochs < 0) throw ValidationError("train.warmup_epochs must be >= 0");
  if (!(cfg.label_smooth_eps >= 0.0 && cfg.label_smooth_eps < 1.0))
    throw ValidationError("train.label_smooth_eps must be in [0, 1)");
  if (cfg.crop_size < 8) throw ValidationError("train.crop_size must be >= 8");
  if (cfg.augment.cutmix && !(cfg.augment.cutmix_alpha > 0.0))
    throw ValidationError("train.augment.cutmix_alpha must be > 0");
  if (!(cfg.augment.scale_min >= 0.0 && cfg.augment.scale_min <= 1.0))
    throw ValidationError("train.augment.scale_min must be in [0, 1]");
  if (cfg.augment.rcm) {
    if (cfg.augment.rcm_grid < 1) throw ValidationError("train.augment.rcm_grid must be >= 1");
    if (cfg.augment.rcm_k < 0 || cfg.augment.rcm_k >= cfg.augment.rcm_grid)
      throw ValidationError("train.augment.rcm_k must be in [0, rcm_grid)");
    if (cfg.crop_size % cfg.augment.rcm_grid != 0)
      throw ValidationError("train.augment.rcm_grid must divide train.crop_size");
  }
}

Classifier::Classifier(int num_classes) : num_classes_(num_classes) {
  if (num_classes < 1) throw ValidationError("classifier: num_classes must be >= 1");
  params_.assign(param_count(num_classes), 0.0f);
  const auto nc = static_cast<std::uint32_t>(num_classes);
  layout_ = {
      {"conv1.weight", {kC1, kC0, 3, 3}, kOffW1, kOffB1 - kOffW1},
      {"conv1.bias", {kC1}, kOffB1, kC1},
      {"conv2.weight", {kC2, kC1, 3, 3}, kOffW2, kOffB2 - kOffW2},
      {"conv2.bias", {kC2}, kOffB2, kC2},
      {"head.weight", {nc, kC2}, kOffWh, static_cast<std::size_t>(num_classes) * kC2},
      {"head.bias", {nc}, kOffWh + static_cast<std::size_t>(num_classes) * kC2, static_cast<std::size_t>(num_classes)},
  };
}

std::span<float> Classifier::param(std::size_t index) {
  const auto& info = layout_.at(index);
  return std::span<float>(params_).subspan(info.offset, info.size);
}

std::span<const float> Classifier::param(std::size_t index) const {
  const auto& info = layout_.at(index);
  return std::span<const float>(params_).subspan(info.offset, info.size);
}

std::span<const float> Classifier::conv_params() const {
  return std::span<const float>(params_).first(conv_param_count());
}

Classifier init(int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ValidationError("init: num_classes must be >= 2");
  Classifier model(num_classes);
  Rng rng(seed);
  auto fill = [&](std::span<float> w, int fan_in, int fan_out) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (float& v : w) v = static_cast<float>(rng.uniform(-a, a));
  };
  fill(model.param(0), kC0 * kT, kC1 * kT);
  fill(model.param(2), kC1 * kT, kC2 * kT);
  fill(model.param(4), kC2, num_classes);
  return model;
}

Classifier with_new_head(const Classifier& model, int num_classes, std::uint64_t seed) {
  Classifier fresh = init(num_classes, seed);
  std::copy(model.conv_params().begin(), model.conv_params().end(), fresh.params().begin());
  fresh.input_resolution = model.input_resolution;
  return fresh;
}

ForwardResult forward(const Classifier& model, const Image& image, int resolution) {
  const Image view = resized_square(image, resolution);
  const auto w = to_double(model.params());
  Pass<double> pass;
  run_forward(w.data(), model.num_classes(), view, pass);
  ForwardResult out;
  out.logits = pass.logits;
  out.features = {kC2, pass.r2, pass.r2, pass.a2};
  return out;
}

AttentionMap attention(const Classifier& model, const Image& image, int resolution) {
  const auto w = to_double(model.params());
  return attention_with(w.data(), model.num_classes(), resized_square(image, resolution));
}

std::vector<double> pooled_features(const Classifier& model, const Image& image, int resolution) {
  const auto w = to_double(model.params());
  Pass<double> pass;
  run_forward(w.data(), model.num_classes(), resized_square(image, resolution), pass);
  return pass.pooled;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double m = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

int argmax(std::span<const double> values) {
  if (values.empty()) throw ValidationError("argmax: empty vector");
  return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::vector<double> smooth_targets(int label, int num_classes, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw ValidationError("smooth_targets: eps must be in [0, 1)");
  if (num_classes < 1 || label < 0 || label >= num_classes) throw ValidationError("smooth_targets: label out of range");
  std::vector<double> t(num_classes, eps / num_classes);
  t[label] += 1.0 - eps;
  return t;
}

double loss(std::span<const double> logits, std::span<const double> target) {
  if (logits.size() != target.size()) throw ValidationError("loss: logits and target lengths differ");
  if (logits.empty()) throw ValidationError("loss: empty logits");
  return loss_impl<double>(logits, target);
}

double lr_at(long step, long total_steps, const TrainConfig& cfg) {
  if (total_steps < 1 || step < 0 || step >= total_steps) throw ValidationError("lr_at: step out of range");
  const long per_epoch = std::max<long>(1, total_steps / cfg.epochs);
  const long warmup = std::min<long>(static_cast<long>(effective_warmup_epochs(cfg)) * per_epoch, total_steps - 1);
  if (step < warmup) return cfg.base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double phase = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return 0.5 * cfg.base_lr * (1.0 + std::cos(std::numbers::pi * phase));
}

Image center_view(const Image& image, int resolution) {
  return center_crop(resize_shorter_side(image, resolution + resolution / 8), resolution);
}

Image random_view(const Image& image, int resolution, std::uint64_t seed, double scale_min) {
  Rng rng(seed);
  if (scale_min > 0.0) {
    const int full = std::min(image.height, image.width);
    const double area = rng.uniform(scale_min, 1.0);
    const int side = std::clamp(static_cast<int>(std::lround(std::sqrt(area) * full)), 1, full);
    const int top = static_cast<int>(rng.uniform_int(0, image.height - side));
    const int left = static_cast<int>(rng.uniform_int(0, image.width - side));
    return resize_bilinear(crop(image, top, left, side, side), resolution, resolution);
  }
  const Image big = resize_shorter_side(image, resolution + resolution / 8);
  const int top = static_cast<int>(rng.uniform_int(0, big.height - resolution));
  const int left = static_cast<int>(rng.uniform_int(0, big.width - resolution));
  return crop(big, top, left, resolution, resolution);
}

std::vector<double> predict(const Classifier& model, const Image& image) {
  if (model.input_resolution < 8) throw ValidationError("predict: model has no input resolution (untrained)");
  return forward(model, center_view(image, model.input_resolution), model.input_resolution).logits;
}

std::vector<double> gradient(const Classifier& model, const Image& image, std::span<const double> target,
                             int resolution) {
  if (static_cast<int>(target.size()) != model.num_classes())
    throw ValidationError("gradient: target length does not match num_classes");
  const auto w = to_double(model.params());
  Pass<double> pass;
  run_forward(w.data(), model.num_classes(), resized_square(image, resolution), pass);
  std::vector<double> grad(w.size());
  run_backward(w.data(), model.num_classes(), pass, target, grad.data());
  return grad;
}

double grad_check(const Classifier& model, const Image& image, std::span<const double> target, double epsilon) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-2)) throw ValidationError("grad_check: epsilon must be in [1e-6, 1e-2]");
  const int resolution = image.height;
  const auto analytic = gradient(model, image, target, resolution);
  const Image view = resized_square(image, resolution);
  const int nc = model.num_classes();

  std::vector<long double> w(model.params().begin(), model.params().end());
  auto relu_pattern = [](const Pass<long double>& p) {
    std::vector<bool> mask;
    mask.reserve(p.pre1.size() + p.pre2.size());
    for (auto v : p.pre1) mask.push_back(v > 0);
    for (auto v : p.pre2) mask.push_back(v > 0);
    return mask;
  };
  Pass<long double> pass;
  run_forward(w.data(), nc, view, pass);
  const auto base_mask = relu_pattern(pass);

  double worst = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const long double theta = w[i];
    long double h = epsilon;
    long double numeric = 0;
    for (;;) {
      w[i] = theta + h;
      run_forward(w.data(), nc, view, pass);
      const long double up = loss_impl<long double>(pass.logits, target);
      const bool up_same = relu_pattern(pass) == base_mask;
      w[i] = theta - h;
      run_forward(w.data(), nc, view, pass);
      const long double down = loss_impl<long double>(pass.logits, target);
      const bool down_same = relu_pattern(pass) == base_mask;
      numeric = (up - down) / (2 * h);
      if ((up_same && down_same) || h < 1e-10L) break;
      h /= 10;
    }
    w[i] = theta;
    const double a = analytic[i];
    const double n = static_cast<double>(numeric);
    worst = std::max(worst, std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n)));
  }
  return worst;
}

TrainResult train(const Classifier& model, std::span<const TrainItem> data, const TrainConfig& cfg) {
  validate(cfg);
  const int nc = model.num_classes();
  check_targets(data, nc);

  std::vector<double> w(model.params().begin(), model.params().end());
  const std::size_t np = w.size();
  const long n = static_cast<long>(data.size());
  const long batch = cfg.batch_size;
  const long per_epoch = (n + batch - 1) / batch;
  const long total = per_epoch * cfg.epochs;

  std::vector<std::vector<double>> grads(batch, std::vector<double>(np));
  std::vector<double> losses(batch);
  std::vector<Image> views(batch);
  std::vector<std::vector<double>> targets(batch);
  TrainResult result{model, {}};

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<long> order(n);
    std::iota(order.begin(), order.end(), 0L);
    Rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch))).shuffle(order);
    double epoch_loss = 0.0;

    for (long start = 0; start < n; start += batch, ++step) {
      const long count = std::min(batch, n - start);
      const std::uint64_t step_seed = mix_seed(cfg.seed ^ 0x5eed5eedULL, static_cast<std::uint64_t>(step));

      parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
        const auto& item = data[order[start + static_cast<long>(i)]];
        views[i] = augmented_view(item.image, cfg, w.data(), nc, mix_seed(step_seed, i));
        targets[i] = item.target;
      });

      if (cfg.augment.cutmix && count > 1) {
        std::vector<std::size_t> partner(count);
        std::iota(partner.begin(), partner.end(), std::size_t{0});
        Rng(mix_seed(step_seed, 0xc0ffeeULL)).shuffle(partner);
        std::vector<augment::MixedSample> mixed(count);
        parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
          const std::size_t j = partner[i];
          mixed[i] = augment::cutmix(views[i], targets[i], views[j], targets[j], cfg.augment.cutmix_alpha,
                                     mix_seed(step_seed, 0x10000ULL + i));
        });
        for (long i = 0; i < count; ++i) {
          views[i] = std::move(mixed[i].image);
          targets[i] = std::move(mixed[i].target);
        }
      }

      parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
        Pass<double> pass;
        run_forward(w.data(), nc, views[i], pass);
        losses[i] = loss_impl<double>(pass.logits, targets[i]);
        run_backward(w.data(), nc, pass, targets[i], grads[i].data());
      });

      const double lr = lr_at(step, total, cfg);
      std::vector<double> sum(np, 0.0);
      for (long i = 0; i < count; ++i) {
        if (!std::isfinite(losses[i]))
          throw TrainingError("training aborted: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step));
        epoch_loss += losses[i];
        for (std::size_t k = 0; k < np; ++k) sum[k] += grads[i][k];
      }
      const double scale = lr / static_cast<double>(count);
      for (std::size_t k = 0; k < np; ++k) w[k] -= scale * sum[k];
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(n));
  }

  auto rounded = round_to_float(w);
  std::copy(rounded.begin(), rounded.end(), result.model.params().begin());
  result.model.input_resolution = cfg.crop_size;
  return result;
}

Classifier fix_finetune(const Classifier& model, std::span<const TrainItem> data, int high_resolution,
                        const TrainConfig& cfg) {
  validate(cfg);
  if (high_resolution <= model.input_resolution)
    throw ValidationError("fix_finetune: high_resolution must exceed the model's input resolution (" +
                          std::to_string(model.input_resolution) + ")");
  if (high_resolution < 8) throw ValidationError("fix_finetune: high_resolution must be >= 8");
  const int nc = model.num_classes();
  check_targets(data, nc);

  const auto w_all = to_double(model.params());
  const long n = static_cast<long>(data.size());
  std::vector<std::vector<double>> feats(n);
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    Pass<double> pass;
    run_forward(w_all.data(), nc, center_view(data[i].image, high_resolution), pass);
    feats[i] = pass.pooled;
  });

  std::vector<double> wh(w_all.begin() + kOffWh, w_all.end());  // weights then biases
  const std::size_t nb = static_cast<std::size_t>(nc) * kC2;
  const long batch = cfg.batch_size;
  const long per_epoch = (n + batch - 1) / batch;
  const long total = per_epoch * cfg.epochs;
  long step = 0;
  std::vector<double> sum(wh.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<long> order(n);
    std::iota(order.begin(), order.end(), 0L);
    Rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch))).shuffle(order);
    for (long start = 0; start < n; start += batch, ++step) {
      const long count = std::min(batch, n - start);
      std::fill(sum.begin(), sum.end(), 0.0);
      for (long b = 0; b < count; ++b) {
        const long idx = order[start + b];
        const auto& g = feats[idx];
        std::vector<double> z(nc);
        for (int k = 0; k < nc; ++k) {
          double v = wh[nb + k];
          for (int c = 0; c < kC2; ++c) v += wh[k * kC2 + c] * g[c];
          z[k] = v;
        }
        const double l = loss_impl<double>(std::span<const double>(z), data[idx].target);
        if (!std::isfinite(l))
          throw TrainingError("fix_finetune aborted: non-finite loss at epoch " + std::to_string(epoch));
        auto p = softmax(z);
        for (int k = 0; k < nc; ++k) {
          const double dz = p[k] - data[idx].target[k];
          sum[nb + k] += dz;
          for (int c = 0; c < kC2; ++c) sum[k * kC2 + c] += dz * g[c];
        }
      }
      const double scale = lr_at(step, total, cfg) / static_cast<double>(count);
      for (std::size_t k = 0; k < wh.size(); ++k) wh[k] -= scale * sum[k];
    }
  }

  Classifier out = model;
  std::transform(wh.begin(), wh.end(), out.params().begin() + kOffWh, [](double v) { return static_cast<float>(v); });
  out.input_resolution = high_resolution;
  return out;
}

void save_checkpoint(const Classifier& model, const std::filesystem::path& dir) {
  nlohmann::json meta;
  meta["num_classes"] = model.num_classes();
  meta["input_resolution"] = model.input_resolution;
  meta["params"] = nlohmann::json::array();
  for (std::size_t i = 0; i < model.layout().size(); ++i) {
    const auto& info = model.layout()[i];
    const std::string file = info.name + ".fmt1";
    auto values = model.param(i);
    write_fmt1(dir / file, Tensor{info.dims, {values.begin(), values.end()}});
    meta["params"].push_back({{"name", info.name}, {"dims", info.dims}, {"file", file}});
  }
  write_file(dir / "model.json", meta.dump(2) + "\n");
}

Classifier load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(dir / "model.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError((dir / "model.json").string() + ": " + e.what());
  }
  try {
    Classifier model(meta.at("num_classes").get<int>());
    model.input_resolution = meta.at("input_resolution").get<int>();
    const auto& params = meta.at("params");
    if (params.size() != model.layout().size()) throw IntegrityError((dir / "model.json").string() + ": wrong parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& info = model.layout()[i];
      if (params[i].at("name").get<std::string>() != info.name)
        throw IntegrityError((dir / "model.json").string() + ": unexpected parameter " +
                             params[i].at("name").get<std::string>());
      const auto path = dir / params[i].at("file").get<std::string>();
      Tensor t = read_fmt1(path);
      if (t.dims != info.dims) throw IntegrityError(path.string() + ": shape mismatch for " + info.name);
      for (float v : t.data)
        if (!std::isfinite(v)) throw IntegrityError(path.string() + ": non-finite parameter");
      std::copy(t.data.begin(), t.data.end(), model.param(i).begin());
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError((dir / "model.json").string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw IntegrityError((dir / "model.json").string() + ": " + e.what());
  }
}

}  // namespace finemine::nn
