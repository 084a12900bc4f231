#include "finemine/json_io.hpp"

#include <algorithm>

#include "finemine/error.hpp"

namespace finemine::json_io {

namespace {

std::string field(std::string_view path, std::string_view key) {
  return path.empty() ? std::string(key) : std::string(path) + "." + std::string(key);
}

const json* find(const json& j, std::string_view key) {
  auto it = j.find(std::string(key));
  return it == j.end() ? nullptr : &*it;
}

void require_object(const json& j, std::string_view path) {
  if (!j.is_object()) throw ValidationError(std::string(path) + ": expected a JSON object");
}

}  // namespace

void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view path) {
  require_object(j, path);
  for (const auto& [key, value] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ValidationError("unknown config key '" + field(path, key) + "'");
}

bool read_bool(const json& j, std::string_view key, std::string_view path, bool fallback) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_boolean()) throw ValidationError(field(path, key) + ": expected a boolean");
  return v->get<bool>();
}

long long read_int(const json& j, std::string_view key, std::string_view path, long long fallback) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_number_integer()) throw ValidationError(field(path, key) + ": expected an integer");
  return v->get<long long>();
}

std::uint64_t read_seed(const json& j, std::string_view key, std::string_view path, std::uint64_t fallback) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (v->is_number_unsigned()) return v->get<std::uint64_t>();
  if (v->is_number_integer() && v->get<long long>() >= 0) return static_cast<std::uint64_t>(v->get<long long>());
  throw ValidationError(field(path, key) + ": expected a non-negative integer");
}

double read_real(const json& j, std::string_view key, std::string_view path, double fallback) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_number()) throw ValidationError(field(path, key) + ": expected a number");
  return v->get<double>();
}

std::string read_string(const json& j, std::string_view key, std::string_view path, const std::string& fallback) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_string()) throw ValidationError(field(path, key) + ": expected a string");
  return v->get<std::string>();
}

json to_json(const synth::GenSpec& spec) {
  return {{"num_inclass_classes", spec.num_inclass_classes},
          {"num_outclass_classes", spec.num_outclass_classes},
          {"image_size", spec.image_size},
          {"counts",
           {{"labeled_train", spec.counts.labeled_train},
            {"validation", spec.counts.validation},
            {"inclass_unlabeled", spec.counts.inclass_unlabeled},
            {"outclass_unlabeled", spec.counts.outclass_unlabeled},
            {"test", spec.counts.test}}},
          {"imbalance_exponent", spec.imbalance_exponent},
          {"shot_mix", {{"long", spec.shot_mix[0]}, {"medium", spec.shot_mix[1]}, {"close", spec.shot_mix[2]}}},
          {"seed", spec.seed}};
}

synth::GenSpec gen_spec_from_json(const json& j, std::string_view path, const synth::GenSpec& defaults) {
  reject_unknown_keys(j,
                      {"num_inclass_classes", "num_outclass_classes", "image_size", "counts", "imbalance_exponent",
                       "shot_mix", "seed"},
                      path);
  synth::GenSpec s = defaults;
  s.num_inclass_classes = static_cast<int>(read_int(j, "num_inclass_classes", path, s.num_inclass_classes));
  s.num_outclass_classes = static_cast<int>(read_int(j, "num_outclass_classes", path, s.num_outclass_classes));
  s.image_size = static_cast<int>(read_int(j, "image_size", path, s.image_size));
  if (const json* c = find(j, "counts")) {
    const std::string p = field(path, "counts");
    reject_unknown_keys(*c, {"labeled_train", "validation", "inclass_unlabeled", "outclass_unlabeled", "test"}, p);
    s.counts.labeled_train = static_cast<int>(read_int(*c, "labeled_train", p, s.counts.labeled_train));
    s.counts.validation = static_cast<int>(read_int(*c, "validation", p, s.counts.validation));
    s.counts.inclass_unlabeled = static_cast<int>(read_int(*c, "inclass_unlabeled", p, s.counts.inclass_unlabeled));
    s.counts.outclass_unlabeled =
        static_cast<int>(read_int(*c, "outclass_unlabeled", p, s.counts.outclass_unlabeled));
    s.counts.test = static_cast<int>(read_int(*c, "test", p, s.counts.test));
  }
  s.imbalance_exponent = read_real(j, "imbalance_exponent", path, s.imbalance_exponent);
  if (const json* m = find(j, "shot_mix")) {
    const std::string p = field(path, "shot_mix");
    reject_unknown_keys(*m, {"long", "medium", "close"}, p);
    s.shot_mix[0] = read_real(*m, "long", p, s.shot_mix[0]);
    s.shot_mix[1] = read_real(*m, "medium", p, s.shot_mix[1]);
    s.shot_mix[2] = read_real(*m, "close", p, s.shot_mix[2]);
  }
  s.seed = read_seed(j, "seed", path, s.seed);
  return s;
}

json to_json(const nn::AugmentFlags& f) {
  return {{"cutmix", f.cutmix},       {"cutmix_alpha", f.cutmix_alpha},   {"rcm", f.rcm}, {"rcm_grid", f.rcm_grid},
          {"rcm_k", f.rcm_k},         {"attention_aug", f.attention_aug}, {"flip", f.flip},
          {"scale_min", f.scale_min}};
}

nn::AugmentFlags augment_from_json(const json& j, std::string_view path, const nn::AugmentFlags& defaults) {
  reject_unknown_keys(j, {"cutmix", "cutmix_alpha", "rcm", "rcm_grid", "rcm_k", "attention_aug", "flip", "scale_min"},
                      path);
  nn::AugmentFlags f = defaults;
  f.cutmix = read_bool(j, "cutmix", path, f.cutmix);
  f.cutmix_alpha = read_real(j, "cutmix_alpha", path, f.cutmix_alpha);
  f.rcm = read_bool(j, "rcm", path, f.rcm);
  f.rcm_grid = static_cast<int>(read_int(j, "rcm_grid", path, f.rcm_grid));
  f.rcm_k = static_cast<int>(read_int(j, "rcm_k", path, f.rcm_k));
  f.attention_aug = read_bool(j, "attention_aug", path, f.attention_aug);
  f.flip = read_bool(j, "flip", path, f.flip);
  f.scale_min = read_real(j, "scale_min", path, f.scale_min);
  return f;
}

json to_json(const nn::TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"base_lr", cfg.base_lr},
          {"warmup_epochs", cfg.warmup_epochs},
          {"label_smooth_eps", cfg.label_smooth_eps},
          {"crop_size", cfg.crop_size},
          {"augment", to_json(cfg.augment)},
          {"seed", cfg.seed}};
}

nn::TrainConfig train_config_from_json(const json& j, std::string_view path, const nn::TrainConfig& defaults) {
  reject_unknown_keys(
      j, {"epochs", "batch_size", "base_lr", "warmup_epochs", "label_smooth_eps", "crop_size", "augment", "seed"},
      path);
  nn::TrainConfig c = defaults;
  c.epochs = static_cast<int>(read_int(j, "epochs", path, c.epochs));
  c.batch_size = static_cast<int>(read_int(j, "batch_size", path, c.batch_size));
  c.base_lr = read_real(j, "base_lr", path, c.base_lr);
  c.warmup_epochs = static_cast<int>(read_int(j, "warmup_epochs", path, c.warmup_epochs));
  c.label_smooth_eps = read_real(j, "label_smooth_eps", path, c.label_smooth_eps);
  c.crop_size = static_cast<int>(read_int(j, "crop_size", path, c.crop_size));
  if (const json* a = find(j, "augment")) c.augment = augment_from_json(*a, field(path, "augment"), c.augment);
  c.seed = read_seed(j, "seed", path, c.seed);
  return c;
}

}  // namespace finemine::json_io
