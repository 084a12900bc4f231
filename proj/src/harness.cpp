#include "finemine/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <numeric>

#include "finemine/augment.hpp"
#include "finemine/error.hpp"
#include "finemine/parallel.hpp"
#include "finemine/rng.hpp"
#include "finemine/tensor_io.hpp"

namespace finemine::harness {

namespace fs = std::filesystem;
using json_io::json;

std::string_view to_string(Role role) { return role == Role::Generic ? "generic" : "finegrained"; }

Role role_from_string(std::string_view name) {
  if (name == "generic") return Role::Generic;
  if (name == "finegrained") return Role::Finegrained;
  throw ValidationError("unknown model role '" + std::string(name) + "' (expected generic or finegrained)");
}

std::string_view to_string(TtaMode mode) {
  switch (mode) {
    case TtaMode::None: return "none";
    case TtaMode::Three: return "three";
    case TtaMode::Crops144: return "144";
  }
  return "none";
}

TtaMode tta_mode_from_string(std::string_view name) {
  if (name == "none") return TtaMode::None;
  if (name == "three") return TtaMode::Three;
  if (name == "144") return TtaMode::Crops144;
  throw ValidationError("unknown tta.mode '" + std::string(name) + "' (expected none, three or 144)");
}

Profile builtin_profile(std::string_view name) {
  Profile p;
  p.name = std::string(name);
  if (name == "plain") return p;
  if (name == "generic") {
    p.augment.flip = true;
    return p;
  }
  if (name == "finegrained") {
    p.crop_size = 40;
    p.augment.flip = true;
    p.augment.rcm = true;
    return p;
  }
  if (name == "fixres") {
    p.augment.flip = true;
    p.augment.scale_min = 0.25;
    return p;
  }
  if (name == "cutmix") {
    p.augment.flip = true;
    p.augment.cutmix = true;
    return p;
  }
  if (name == "wsdan") {
    p.crop_size = 40;
    p.augment.flip = true;
    p.augment.attention_aug = true;
    return p;
  }
  throw ValidationError("unknown profile '" + std::string(name) +
                        "' (expected plain, generic, finegrained, fixres, cutmix or wsdan)");
}

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.train.epochs = 30;
  cfg.train.batch_size = 16;
  cfg.train.base_lr = 0.8;
  cfg.train.warmup_epochs = 3;
  cfg.train.seed = 0;

  cfg.cluster.pretrain = cfg.train;
  cfg.cluster.pretrain.epochs = 10;
  cfg.cluster.pretrain.base_lr = 0.2;
  cfg.cluster.pretrain.warmup_epochs = 1;

  cfg.model_roles = {{1, Role::Generic, builtin_profile("generic")},
                     {2, Role::Generic, builtin_profile("generic")},
                     {3, Role::Finegrained, builtin_profile("finegrained")}};
  return cfg;
}

void validate(const RunConfig& cfg) {
  synth::validate(cfg.gen);
  nn::validate(cfg.train);
  fusion::validate(cfg.fusion);
  if (cfg.model_roles.empty()) throw ValidationError("model_roles: need at least one model");
  for (Role r : {Role::Generic, Role::Finegrained}) {
    const bool any = std::any_of(cfg.model_roles.begin(), cfg.model_roles.end(),
                                 [r](const ModelRole& m) { return m.role == r; });
    if (!any) throw ValidationError("model_roles: fusion needs at least one " + std::string(to_string(r)) + " model");
  }
  int max_crop = 0;
  for (std::size_t i = 0; i < cfg.model_roles.size(); ++i) {
    const auto& p = cfg.model_roles[i].profile;
    if (p.crop_size < 8) throw ValidationError("model_roles[" + std::to_string(i) + "].profile.crop_size must be >= 8");
    nn::validate(role_train_config(cfg, cfg.model_roles[i]));
    max_crop = std::max(max_crop, p.crop_size);
  }

  const auto& m = cfg.mining;
  if (m.max_rounds < 1) throw ValidationError("mining.max_rounds must be >= 1");
  if (!(m.converge_tol >= 0.0) || !std::isfinite(m.converge_tol))
    throw ValidationError("mining.converge_tol must be finite and >= 0");
  if (!(m.thresholds.min_confidence >= 0.0) || !std::isfinite(m.thresholds.min_confidence))
    throw ValidationError("mining.min_confidence must be finite and >= 0");
  if (m.thresholds.min_agreement &&
      (*m.thresholds.min_agreement < 1 || *m.thresholds.min_agreement > static_cast<int>(cfg.model_roles.size())))
    throw ValidationError("mining.min_agreement must lie in [1, number of models]");

  if (cfg.cluster.enabled) {
    if (cfg.cluster.k < 2) throw ValidationError("cluster.k must be >= 2");
    if (cfg.cluster.k > cfg.gen.counts.outclass_unlabeled)
      throw ValidationError("cluster.k must not exceed gen.counts.outclass_unlabeled");
    if (cfg.cluster.max_iters < 1) throw ValidationError("cluster.max_iters must be >= 1");
    nn::validate(cfg.cluster.pretrain);
  }

  if (cfg.fix.enabled) {
    if (cfg.fix.high_resolution <= max_crop)
      throw ValidationError("fix.high_resolution must exceed every profile crop_size (" + std::to_string(max_crop) + ")");
    if (cfg.fix.epochs < 1) throw ValidationError("fix.epochs must be >= 1");
    if (!(cfg.fix.base_lr >= 0.0) || !std::isfinite(cfg.fix.base_lr))
      throw ValidationError("fix.base_lr must be finite and >= 0");
  }

  if (!(cfg.tta.resize_factor >= 1.0) || !std::isfinite(cfg.tta.resize_factor))
    throw ValidationError("tta.resize_factor must be >= 1");
  for (double s : cfg.tta.scales)
    if (!(s >= 1.0) || !std::isfinite(s)) throw ValidationError("tta.scales must all be >= 1");

  if (!cfg.fusion.model_weights.empty() && cfg.fusion.model_weights.size() != 2)
    throw ValidationError("fusion.model_weights: need one weight per final model (generic, finegrained)");
  if (cfg.output_dir.empty()) throw ValidationError("output_dir must not be empty");
}

nn::TrainConfig role_train_config(const RunConfig& cfg, const ModelRole& role) {
  nn::TrainConfig t = cfg.train;
  t.crop_size = role.profile.crop_size;
  t.augment = role.profile.augment;
  t.seed = role.seed;
  return t;
}

namespace {

json profile_to_json(const Profile& p) {
  return {{"name", p.name}, {"crop_size", p.crop_size}, {"augment", json_io::to_json(p.augment)}};
}

Profile profile_from_json(const json& j, const std::string& path) {
  if (j.is_string()) return builtin_profile(j.get<std::string>());
  json_io::reject_unknown_keys(j, {"name", "crop_size", "augment"}, path);
  const std::string name = json_io::read_string(j, "name", path, "plain");
  Profile p;
  try {
    p = builtin_profile(name);
  } catch (const ValidationError&) {
    p.name = name;  // custom profile starting from plain
  }
  p.crop_size = static_cast<int>(json_io::read_int(j, "crop_size", path, p.crop_size));
  if (j.contains("augment")) p.augment = json_io::augment_from_json(j["augment"], path + ".augment", p.augment);
  return p;
}

json plan_to_json(const fusion::FusionPlan& p) {
  auto pair = [](const fusion::RouteWeights& w) { return json{{"generic", w.generic}, {"finegrained", w.finegrained}}; };
  return {{"model_weights", p.model_weights},
          {"routing", {{"long", pair(p.routing[0])}, {"medium", pair(p.routing[1])}, {"close", pair(p.routing[2])}}},
          {"area_thresholds", {{"long", p.t_long}, {"close", p.t_close}}},
          {"attention_binarize", p.attention_binarize}};
}

fusion::FusionPlan plan_from_json(const json& j, const fusion::FusionPlan& defaults) {
  const std::string path = "fusion";
  json_io::reject_unknown_keys(j, {"model_weights", "routing", "area_thresholds", "attention_binarize"}, path);
  fusion::FusionPlan p = defaults;
  if (j.contains("model_weights")) {
    const auto& w = j["model_weights"];
    if (!w.is_array()) throw ValidationError("fusion.model_weights: expected an array of numbers");
    p.model_weights.clear();
    for (const auto& v : w) {
      if (!v.is_number()) throw ValidationError("fusion.model_weights: expected an array of numbers");
      p.model_weights.push_back(v.get<double>());
    }
  }
  if (j.contains("routing")) {
    const auto& r = j["routing"];
    const std::string rp = path + ".routing";
    json_io::reject_unknown_keys(r, {"long", "medium", "close"}, rp);
    const char* names[] = {"long", "medium", "close"};
    for (int s = 0; s < 3; ++s) {
      if (!r.contains(names[s])) continue;
      const std::string sp = rp + "." + names[s];
      json_io::reject_unknown_keys(r[names[s]], {"generic", "finegrained"}, sp);
      p.routing[s].generic = json_io::read_real(r[names[s]], "generic", sp, p.routing[s].generic);
      p.routing[s].finegrained = json_io::read_real(r[names[s]], "finegrained", sp, p.routing[s].finegrained);
    }
  }
  if (j.contains("area_thresholds")) {
    const std::string ap = path + ".area_thresholds";
    json_io::reject_unknown_keys(j["area_thresholds"], {"long", "close"}, ap);
    p.t_long = json_io::read_real(j["area_thresholds"], "long", ap, p.t_long);
    p.t_close = json_io::read_real(j["area_thresholds"], "close", ap, p.t_close);
  }
  p.attention_binarize = json_io::read_real(j, "attention_binarize", path, p.attention_binarize);
  return p;
}

}  // namespace

json to_json(const RunConfig& cfg) {
  json roles = json::array();
  for (const auto& r : cfg.model_roles)
    roles.push_back({{"seed", r.seed}, {"role", std::string(to_string(r.role))}, {"profile", profile_to_json(r.profile)}});
  json mining_j{{"min_agreement", cfg.mining.thresholds.min_agreement ? json(*cfg.mining.thresholds.min_agreement)
                                                                      : json(nullptr)},
                {"min_confidence", cfg.mining.thresholds.min_confidence},
                {"max_rounds", cfg.mining.max_rounds},
                {"converge_tol", cfg.mining.converge_tol}};
  return {{"gen", json_io::to_json(cfg.gen)},
          {"train", json_io::to_json(cfg.train)},
          {"mining", mining_j},
          {"cluster",
           {{"enabled", cfg.cluster.enabled},
            {"k", cfg.cluster.k},
            {"max_iters", cfg.cluster.max_iters},
            {"pretrain", json_io::to_json(cfg.cluster.pretrain)}}},
          {"fix",
           {{"enabled", cfg.fix.enabled},
            {"high_resolution", cfg.fix.high_resolution},
            {"epochs", cfg.fix.epochs},
            {"base_lr", cfg.fix.base_lr}}},
          {"tta",
           {{"mode", std::string(to_string(cfg.tta.mode))},
            {"resize_factor", cfg.tta.resize_factor},
            {"scales", cfg.tta.scales},
            {"seed", cfg.tta.seed}}},
          {"fusion", plan_to_json(cfg.fusion)},
          {"model_roles", roles},
          {"output_dir", cfg.output_dir.generic_string()}};
}

RunConfig run_config_from_json(const json& j) {
  json_io::reject_unknown_keys(j, {"gen", "train", "mining", "cluster", "fix", "tta", "fusion", "model_roles", "output_dir"},
                               "");
  RunConfig cfg = default_run_config();
  if (j.contains("gen")) cfg.gen = json_io::gen_spec_from_json(j["gen"], "gen", cfg.gen);
  if (j.contains("train")) cfg.train = json_io::train_config_from_json(j["train"], "train", cfg.train);

  if (j.contains("mining")) {
    const auto& m = j["mining"];
    json_io::reject_unknown_keys(m, {"min_agreement", "min_confidence", "max_rounds", "converge_tol"}, "mining");
    if (m.contains("min_agreement")) {
      if (m["min_agreement"].is_null())
        cfg.mining.thresholds.min_agreement.reset();
      else
        cfg.mining.thresholds.min_agreement = static_cast<int>(json_io::read_int(m, "min_agreement", "mining", 0));
    }
    cfg.mining.thresholds.min_confidence =
        json_io::read_real(m, "min_confidence", "mining", cfg.mining.thresholds.min_confidence);
    cfg.mining.max_rounds = static_cast<int>(json_io::read_int(m, "max_rounds", "mining", cfg.mining.max_rounds));
    cfg.mining.converge_tol = json_io::read_real(m, "converge_tol", "mining", cfg.mining.converge_tol);
  }

  if (j.contains("cluster")) {
    const auto& c = j["cluster"];
    json_io::reject_unknown_keys(c, {"enabled", "k", "max_iters", "pretrain"}, "cluster");
    cfg.cluster.enabled = json_io::read_bool(c, "enabled", "cluster", cfg.cluster.enabled);
    cfg.cluster.k = static_cast<int>(json_io::read_int(c, "k", "cluster", cfg.cluster.k));
    cfg.cluster.max_iters = static_cast<int>(json_io::read_int(c, "max_iters", "cluster", cfg.cluster.max_iters));
    if (c.contains("pretrain"))
      cfg.cluster.pretrain = json_io::train_config_from_json(c["pretrain"], "cluster.pretrain", cfg.cluster.pretrain);
  }

  if (j.contains("fix")) {
    const auto& f = j["fix"];
    json_io::reject_unknown_keys(f, {"enabled", "high_resolution", "epochs", "base_lr"}, "fix");
    cfg.fix.enabled = json_io::read_bool(f, "enabled", "fix", cfg.fix.enabled);
    cfg.fix.high_resolution = static_cast<int>(json_io::read_int(f, "high_resolution", "fix", cfg.fix.high_resolution));
    cfg.fix.epochs = static_cast<int>(json_io::read_int(f, "epochs", "fix", cfg.fix.epochs));
    cfg.fix.base_lr = json_io::read_real(f, "base_lr", "fix", cfg.fix.base_lr);
  }

  if (j.contains("tta")) {
    const auto& t = j["tta"];
    json_io::reject_unknown_keys(t, {"mode", "resize_factor", "scales", "seed"}, "tta");
    cfg.tta.mode = tta_mode_from_string(json_io::read_string(t, "mode", "tta", std::string(to_string(cfg.tta.mode))));
    cfg.tta.resize_factor = json_io::read_real(t, "resize_factor", "tta", cfg.tta.resize_factor);
    if (t.contains("scales")) {
      const auto& s = t["scales"];
      if (!s.is_array() || s.size() != 4) throw ValidationError("tta.scales: expected 4 numbers");
      for (std::size_t i = 0; i < 4; ++i) {
        if (!s[i].is_number()) throw ValidationError("tta.scales: expected 4 numbers");
        cfg.tta.scales[i] = s[i].get<double>();
      }
    }
    cfg.tta.seed = json_io::read_seed(t, "seed", "tta", cfg.tta.seed);
  }

  if (j.contains("fusion")) cfg.fusion = plan_from_json(j["fusion"], cfg.fusion);

  if (j.contains("model_roles")) {
    const auto& roles = j["model_roles"];
    if (!roles.is_array()) throw ValidationError("model_roles: expected an array");
    cfg.model_roles.clear();
    for (std::size_t i = 0; i < roles.size(); ++i) {
      const std::string p = "model_roles[" + std::to_string(i) + "]";
      json_io::reject_unknown_keys(roles[i], {"seed", "role", "profile"}, p);
      ModelRole r;
      r.seed = json_io::read_seed(roles[i], "seed", p, i + 1);
      r.role = role_from_string(json_io::read_string(roles[i], "role", p, "generic"));
      r.profile = roles[i].contains("profile") ? profile_from_json(roles[i]["profile"], p + ".profile")
                                               : builtin_profile(to_string(r.role));
      cfg.model_roles.push_back(r);
    }
  }
  cfg.output_dir = json_io::read_string(j, "output_dir", "", cfg.output_dir.generic_string());
  validate(cfg);
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void override_seeds(RunConfig& cfg, std::uint64_t seed) {
  cfg.gen.seed = seed;
  cfg.train.seed = seed;
  cfg.cluster.pretrain.seed = seed;
  cfg.tta.seed = seed;
  for (std::size_t i = 0; i < cfg.model_roles.size(); ++i) cfg.model_roles[i].seed = seed + i;
}

void apply_env_seed(RunConfig& cfg) {
  const char* v = std::getenv("FINEMINE_SEED");
  if (!v) return;
  const std::string_view s(v);
  std::uint64_t seed = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), seed);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size())
    throw ValidationError("FINEMINE_SEED must be a non-negative integer, got '" + std::string(s) + "'");
  override_seeds(cfg, seed);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

constexpr std::uint64_t kRetrainStream = 0x7e7a;
constexpr std::uint64_t kFinetuneStream = 0xf17e;
constexpr std::uint64_t kFixStream = 0xf1c5;

struct FinalPair {
  nn::Classifier generic;
  nn::Classifier finegrained;
  ModelRole generic_role;
  ModelRole finegrained_role;
};

struct State {
  synth::DatasetBundle bundle;
  std::vector<nn::Classifier> role_models;
  mining::PseudoLabelSet mined;
  std::vector<mining::RoundRecord> rounds;
  mining::PseudoLabelSet cluster_mined;
  json cluster_summary;
  mining::PseudoLabelSet final_set;
  FinalPair retrained;
  std::vector<double> retrained_val;  // generic, finegrained
  std::optional<FinalPair> fixed;
};

std::string model_dir(std::size_t i) { return "model_" + std::to_string(i); }

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw IntegrityError(path.string() + ": " + e.what());
  }
}

// Rethrows with the stage name prefixed, keeping the exception category.
[[noreturn]] void rethrow_in_stage(std::string_view stage) {
  const std::string prefix = "stage " + std::string(stage) + ": ";
  try {
    throw;
  } catch (const IntegrityError& e) {
    throw IntegrityError(prefix + e.what());
  } catch (const IoError& e) {
    throw IoError(prefix + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(prefix + e.what());
  } catch (const TrainingError& e) {
    throw TrainingError(prefix + e.what());
  } catch (const fs::filesystem_error& e) {
    throw IoError(prefix + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(prefix + e.what());
  }
}

const ModelRole& first_of(const RunConfig& cfg, Role role) {
  return *std::find_if(cfg.model_roles.begin(), cfg.model_roles.end(),
                       [role](const ModelRole& m) { return m.role == role; });
}

json rounds_to_json(const std::vector<mining::RoundRecord>& rounds) {
  json a = json::array();
  for (const auto& r : rounds)
    a.push_back({{"round", r.round},
                 {"pseudo_count", r.pseudo_count},
                 {"mined", r.mined},
                 {"val_accuracy", r.val_accuracy},
                 {"member_val_accuracy", r.member_val_accuracy}});
  return a;
}

std::vector<mining::RoundRecord> rounds_from_json(const json& a) {
  std::vector<mining::RoundRecord> out;
  try {
    for (const auto& r : a) {
      mining::RoundRecord rec;
      rec.round = r.at("round").get<int>();
      rec.pseudo_count = r.at("pseudo_count").get<std::size_t>();
      rec.mined = r.at("mined").get<std::size_t>();
      rec.val_accuracy = r.at("val_accuracy").get<double>();
      rec.member_val_accuracy = r.at("member_val_accuracy").get<std::vector<double>>();
      out.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("rounds.json: ") + e.what());
  }
  return out;
}

void save_pair(const FinalPair& p, const fs::path& dir) {
  nn::save_checkpoint(p.generic, dir / "generic");
  nn::save_checkpoint(p.finegrained, dir / "finegrained");
}

void load_pair(FinalPair& p, const fs::path& dir) {
  p.generic = nn::load_checkpoint(dir / "generic");
  p.finegrained = nn::load_checkpoint(dir / "finegrained");
}

std::vector<double> tta_logits(const nn::Classifier& model, const synth::Example& ex, std::size_t index,
                               const TtaConfig& tta) {
  const int r = model.input_resolution;
  if (tta.mode == TtaMode::None) return nn::predict(model, ex.image);
  augment::ViewSet views;
  if (tta.mode == TtaMode::Three) {
    const int resize = static_cast<int>(std::lround(r * tta.resize_factor));
    views = augment::tta_three(ex.image, resize, r, mix_seed(tta.seed, index));
  } else {
    std::array<int, 4> scales{};
    for (int i = 0; i < 4; ++i) scales[i] = static_cast<int>(std::lround(r * tta.scales[i]));
    views = augment::crops_144(ex.image, scales, r);
  }
  std::vector<std::vector<double>> z;
  z.reserve(views.views.size());
  for (const auto& v : views.views) z.push_back(nn::forward(model, v, r).logits);
  return fusion::tta_aggregate(z);
}

Tensor logits_tensor(const std::vector<std::vector<double>>& z) {
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(z.size()), static_cast<std::uint32_t>(z.empty() ? 0 : z.front().size())};
  for (const auto& row : z)
    for (double v : row) t.data.push_back(static_cast<float>(v));
  return t;
}

double error_of(const std::vector<std::vector<double>>& z, std::span<const int> truth) {
  std::vector<int> pred(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) pred[i] = nn::argmax(z[i]);
  return top1_error(pred, truth);
}

std::vector<std::vector<double>> center_logits(const nn::Classifier& model, std::span<const synth::Example> ex) {
  std::vector<std::vector<double>> z(ex.size());
  parallel_for(ex.size(), [&](std::size_t i) { z[i] = nn::predict(model, ex[i].image); });
  return z;
}

}  // namespace

MetricsReport run_pipeline(const RunConfig& cfg, const PipelineOptions& options) {
  validate(cfg);
  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };
  const fs::path root = cfg.output_dir;
  try {
    fs::create_directories(root);
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create output directory " + root.string() + ": " + e.what());
  }
  const std::string cfg_text = to_json(cfg).dump(2) + "\n";
  if (options.resume && fs::exists(root / "config.json") && read_file(root / "config.json") != cfg_text)
    throw ValidationError("--resume: config differs from " + (root / "config.json").string());
  write_file(root / "config.json", cfg_text);

  State st;
  const int nc = cfg.gen.num_inclass_classes;

  auto stage = [&](std::size_t index, auto&& run, auto&& load) {
    const std::string_view name = kStages[index];
    const fs::path dir = root / name;
    try {
      if (options.resume && fs::exists(dir / "DONE")) {
        log("stage " + std::string(name) + ": reusing artifacts");
        load(dir);
        return;
      }
      log("stage " + std::string(name));
      fs::create_directories(dir);
      fs::remove(dir / "DONE");
      run(dir);
      write_file(dir / "DONE", "");
    } catch (...) {
      rethrow_in_stage(name);
    }
  };

  // (1) data
  stage(
      0, [&](const fs::path& dir) {
        st.bundle = synth::generate(cfg.gen);
        synth::save_bundle(st.bundle, dir);
      },
      [&](const fs::path& dir) { st.bundle = synth::load_bundle(dir); });

  std::vector<nn::TrainConfig> members;
  for (const auto& r : cfg.model_roles) members.push_back(role_train_config(cfg, r));

  // (2) per-role models on labeled_train
  stage(
      1, [&](const fs::path& dir) {
        const auto items = mining::training_items(st.bundle, {}, cfg.train.label_smooth_eps);
        for (std::size_t i = 0; i < members.size(); ++i) {
          st.role_models.push_back(nn::train(nn::init(nc, members[i].seed), items, members[i]).model);
          nn::save_checkpoint(st.role_models.back(), dir / model_dir(i));
        }
      },
      [&](const fs::path& dir) {
        for (std::size_t i = 0; i < members.size(); ++i) st.role_models.push_back(nn::load_checkpoint(dir / model_dir(i)));
      });

  // (3) iterative mining from random init
  stage(
      2, [&](const fs::path& dir) {
        const mining::MiningOptions opts{cfg.mining.thresholds, cfg.mining.max_rounds, cfg.mining.converge_tol};
        auto res = mining::iterative_mining(st.bundle, members, opts, &st.role_models);
        st.mined = std::move(res.labels);
        st.rounds = std::move(res.rounds);
        mining::save_pseudo_labels(st.mined, dir / "pseudo_labels.csv");
        write_json(dir / "rounds.json", rounds_to_json(st.rounds));
        for (std::size_t i = 0; i < res.final_models.size(); ++i)
          nn::save_checkpoint(res.final_models[i], dir / "final" / model_dir(i));
      },
      [&](const fs::path& dir) {
        st.mined = mining::load_pseudo_labels(dir / "pseudo_labels.csv");
        st.rounds = rounds_from_json(read_json(dir / "rounds.json"));
      });

  // (4) cluster pretraining on out-of-class data, finetune, mine in-class
  stage(
      3, [&](const fs::path& dir) {
        if (!cfg.cluster.enabled) {
          st.cluster_summary = {{"enabled", false}};
          write_json(dir / "summary.json", st.cluster_summary);
          return;
        }
        const auto cp = mining::cluster_pretrain(st.bundle.outclass_unlabeled, cfg.cluster.k, cfg.cluster.pretrain,
                                                 cfg.cluster.max_iters);
        nn::save_checkpoint(cp.model, dir / "pretrain");
        std::string assign = "id,cluster\n";
        for (std::size_t i = 0; i < cp.clusters.assignments.size(); ++i)
          assign += st.bundle.outclass_unlabeled[i].id + "," + std::to_string(cp.clusters.assignments[i]) + "\n";
        write_file(dir / "assignments.csv", assign);

        const auto items = mining::training_items(st.bundle, {}, cfg.train.label_smooth_eps);
        std::vector<nn::Classifier> tuned;
        std::vector<double> tuned_acc;
        for (std::size_t i = 0; i < members.size(); ++i) {
          const auto start = nn::with_new_head(cp.model, nc, mix_seed(members[i].seed, kFinetuneStream));
          tuned.push_back(nn::train(start, items, members[i]).model);
          tuned_acc.push_back(mining::accuracy(tuned.back(), st.bundle.validation));
          nn::save_checkpoint(tuned.back(), dir / "finetuned" / model_dir(i));
        }
        st.cluster_mined = mining::mine_round(tuned, st.bundle.inclass_unlabeled, cfg.mining.thresholds, 1);
        mining::save_pseudo_labels(st.cluster_mined, dir / "pseudo_labels.csv");
        st.cluster_summary = {{"enabled", true},
                              {"k", cfg.cluster.k},
                              {"inertia", cp.clusters.model.inertia},
                              {"restart", cp.clusters.restart},
                              {"holdout_size", cp.holdout.size()},
                              {"holdout_accuracy", cp.holdout_accuracy},
                              {"finetune_val_accuracy", tuned_acc}};
        write_json(dir / "summary.json", st.cluster_summary);
      },
      [&](const fs::path& dir) {
        st.cluster_summary = read_json(dir / "summary.json");
        if (cfg.cluster.enabled) st.cluster_mined = mining::load_pseudo_labels(dir / "pseudo_labels.csv");
      });

  // (5) intersection of the two mined sets
  stage(
      4, [&](const fs::path& dir) {
        st.final_set = cfg.cluster.enabled ? mining::intersect(st.mined, st.cluster_mined) : st.mined;
        mining::save_pseudo_labels(st.final_set, dir / "final_set.csv");
      },
      [&](const fs::path& dir) { st.final_set = mining::load_pseudo_labels(dir / "final_set.csv"); });

  // (6) one generic and one finegrained model on labeled + final set
  st.retrained.generic_role = first_of(cfg, Role::Generic);
  st.retrained.finegrained_role = first_of(cfg, Role::Finegrained);
  stage(
      5, [&](const fs::path& dir) {
        const auto items = mining::training_items(st.bundle, st.final_set, cfg.train.label_smooth_eps);
        auto fit = [&](const ModelRole& role) {
          auto t = role_train_config(cfg, role);
          t.seed = mix_seed(role.seed, kRetrainStream);
          return nn::train(nn::init(nc, t.seed), items, t).model;
        };
        st.retrained.generic = fit(st.retrained.generic_role);
        st.retrained.finegrained = fit(st.retrained.finegrained_role);
        st.retrained_val = {mining::accuracy(st.retrained.generic, st.bundle.validation),
                            mining::accuracy(st.retrained.finegrained, st.bundle.validation)};
        save_pair(st.retrained, dir);
        write_json(dir / "summary.json", {{"val_accuracy", st.retrained_val}});
      },
      [&](const fs::path& dir) {
        load_pair(st.retrained, dir);
        try {
          st.retrained_val = read_json(dir / "summary.json").at("val_accuracy").get<std::vector<double>>();
        } catch (const json::exception& e) {
          throw IntegrityError((dir / "summary.json").string() + ": " + e.what());
        }
      });

  // (7) head-only finetune at the higher resolution on labeled_train + validation
  stage(
      6, [&](const fs::path& dir) {
        if (!cfg.fix.enabled) {
          write_json(dir / "summary.json", {{"enabled", false}});
          return;
        }
        std::vector<nn::TrainItem> items = mining::training_items(st.bundle, {}, cfg.train.label_smooth_eps);
        for (const auto& ex : st.bundle.validation)
          items.push_back({ex.image, nn::smooth_targets(*ex.label, nc, cfg.train.label_smooth_eps)});
        FinalPair fixed = st.retrained;
        auto fix = [&](const nn::Classifier& m, const ModelRole& role) {
          nn::TrainConfig t = role_train_config(cfg, role);
          t.epochs = cfg.fix.epochs;
          t.base_lr = cfg.fix.base_lr;
          t.seed = mix_seed(role.seed, kFixStream);
          return nn::fix_finetune(m, items, cfg.fix.high_resolution, t);
        };
        fixed.generic = fix(st.retrained.generic, st.retrained.generic_role);
        fixed.finegrained = fix(st.retrained.finegrained, st.retrained.finegrained_role);
        save_pair(fixed, dir);
        write_json(dir / "summary.json", {{"enabled", true}, {"high_resolution", cfg.fix.high_resolution}});
        st.fixed = std::move(fixed);
      },
      [&](const fs::path& dir) {
        if (!cfg.fix.enabled) return;
        FinalPair fixed = st.retrained;
        load_pair(fixed, dir);
        st.fixed = std::move(fixed);
      });

  // (8)-(10) TTA, fusion, routing, test evaluation, report
  MetricsReport report;
  stage(
      7, [&](const fs::path& dir) {
        const auto& test = st.bundle.test;
        // The test split is unlabeled; its hidden labels feed only the error
        // columns below.
        std::vector<int> truth(test.size());
        for (std::size_t i = 0; i < test.size(); ++i) truth[i] = test[i].hidden_label;
        {
          Tensor t{{static_cast<std::uint32_t>(truth.size())}, {}};
          for (int v : truth) t.data.push_back(static_cast<float>(v));
          write_fmt1(dir / "test_truth.fmt1", t);
        }

        for (std::size_t i = 0; i < st.role_models.size(); ++i) {
          const auto& role = cfg.model_roles[i];
          const int r = st.role_models[i].input_resolution;
          report.models.push_back({"round1-" + std::string(to_string(role.role)) + "-s" + std::to_string(role.seed), r,
                                   r, error_of(center_logits(st.role_models[i], test), truth)});
        }

        const FinalPair& fin = st.fixed ? *st.fixed : st.retrained;
        auto eval_tta = [&](const nn::Classifier& m) {
          std::vector<std::vector<double>> z(test.size());
          parallel_for(test.size(), [&](std::size_t i) { z[i] = tta_logits(m, test[i], i, cfg.tta); });
          return z;
        };
        const auto zg = eval_tta(fin.generic);
        const auto zf = eval_tta(fin.finegrained);
        write_fmt1(dir / "test_logits_generic.fmt1", logits_tensor(zg));
        write_fmt1(dir / "test_logits_finegrained.fmt1", logits_tensor(zf));
        const double err_g = error_of(zg, truth);
        const double err_f = error_of(zf, truth);
        report.models.push_back({"final-generic", st.retrained.generic.input_resolution, fin.generic.input_resolution, err_g});
        report.models.push_back(
            {"final-finegrained", st.retrained.finegrained.input_resolution, fin.finegrained.input_resolution, err_f});

        // Accuracy weights come from the pre-fix validation scores: the fixed
        // heads have seen the validation split.
        std::vector<double> weights = cfg.fusion.model_weights;
        if (weights.empty()) {
          weights = std::all_of(st.retrained_val.begin(), st.retrained_val.end(), [](double a) { return a <= 0.0; })
                        ? std::vector<double>{0.5, 0.5}
                        : fusion::weights_from_accuracy(st.retrained_val);
        }
        std::vector<std::vector<double>> z_fused(test.size()), z_routed(test.size());
        std::vector<synth::Shot> shots(test.size());
        // Shots are read off the fine-grained model's attention.
        const auto& router = st.retrained.finegrained;
        parallel_for(test.size(), [&](std::size_t i) {
          const std::vector<std::vector<double>> pair{zg[i], zf[i]};
          z_fused[i] = fusion::fuse(pair, weights);
          const int r = router.input_resolution;
          const auto attn = nn::attention(router, nn::center_view(test[i].image, r), r);
          shots[i] = fusion::classify_shot(fusion::attention_area_ratio(attn, cfg.fusion.attention_binarize), cfg.fusion);
          z_routed[i] = fusion::routed_fuse(zg[i], zf[i], shots[i], cfg.fusion);
        });
        write_fmt1(dir / "test_logits_fused.fmt1", logits_tensor(z_fused));
        write_fmt1(dir / "test_logits_routed.fmt1", logits_tensor(z_routed));
        std::string shot_csv = "id,shot\n";
        for (std::size_t i = 0; i < test.size(); ++i) shot_csv += test[i].id + "," + std::string(synth::to_string(shots[i])) + "\n";
        write_file(dir / "shots.csv", shot_csv);

        const int rg = fin.generic.input_resolution;
        const int rf = fin.finegrained.input_resolution;
        report.fused.push_back({"fused-accuracy-weights", st.retrained.generic.input_resolution, std::max(rg, rf),
                                error_of(z_fused, truth)});
        report.fused.push_back({"fused-routed", st.retrained.generic.input_resolution, std::max(rg, rf),
                                error_of(z_routed, truth)});

        // Supervised-only baseline against the retrained pair, both fused on
        // validation with centre views.
        const std::size_t ig = static_cast<std::size_t>(&first_of(cfg, Role::Generic) - cfg.model_roles.data());
        const std::size_t ifg = static_cast<std::size_t>(&first_of(cfg, Role::Finegrained) - cfg.model_roles.data());
        const std::vector<nn::Classifier> base_pair{st.role_models[ig], st.role_models[ifg]};
        const std::vector<double> base_acc{st.rounds.front().member_val_accuracy[ig],
                                           st.rounds.front().member_val_accuracy[ifg]};
        const std::vector<nn::Classifier> final_pair{st.retrained.generic, st.retrained.finegrained};
        auto& m = report.metrics;
        m["baseline_val_accuracy"] = 100.0 * mining::fused_accuracy(base_pair, base_acc, st.bundle.validation);
        m["pipeline_val_accuracy"] = 100.0 * mining::fused_accuracy(final_pair, st.retrained_val, st.bundle.validation);
        m["random_init_val_accuracy"] =
            100.0 * std::accumulate(st.rounds.front().member_val_accuracy.begin(),
                                    st.rounds.front().member_val_accuracy.end(), 0.0) /
            static_cast<double>(st.rounds.front().member_val_accuracy.size());
        if (cfg.cluster.enabled) {
          m["cluster_holdout_accuracy"] = 100.0 * st.cluster_summary.at("holdout_accuracy").get<double>();
          const auto tuned = st.cluster_summary.at("finetune_val_accuracy").get<std::vector<double>>();
          m["cluster_finetune_val_accuracy"] =
              100.0 * std::accumulate(tuned.begin(), tuned.end(), 0.0) / static_cast<double>(tuned.size());
          m["cluster_pseudo_count"] = static_cast<double>(st.cluster_mined.size());
        }
        m["mining_pseudo_count"] = static_cast<double>(st.mined.size());
        m["final_set_size"] = static_cast<double>(st.final_set.size());
        m["mining_rounds"] = static_cast<double>(st.rounds.size());

        // Evaluation-only block: hidden labels and hidden shot tags are read
        // here and nowhere upstream.
        {
          for (const auto& rec : st.rounds) {
            mining::PseudoLabelSet upto;
            for (const auto& [id, e] : st.mined.entries)
              if (e.round <= rec.round) upto.add(e);
            auto prec = mining::eval::precision(upto, st.bundle.inclass_unlabeled);
            report.mining.push_back({rec.round, rec.pseudo_count,
                                     prec ? std::optional<double>(100.0 * *prec) : std::nullopt,
                                     100.0 * rec.val_accuracy});
          }
          if (!report.mining.empty() && report.mining.front().precision)
            m["round1_precision"] = *report.mining.front().precision;
          if (auto p = mining::eval::precision(st.final_set, st.bundle.inclass_unlabeled)) m["final_set_precision"] = 100.0 * *p;
          if (cfg.cluster.enabled)
            if (auto p = mining::eval::precision(st.cluster_mined, st.bundle.inclass_unlabeled))
              m["cluster_precision"] = 100.0 * *p;
          std::size_t agree = 0;
          for (std::size_t i = 0; i < test.size(); ++i) agree += shots[i] == test[i].shot ? 1 : 0;
          m["shot_agreement"] = 100.0 * static_cast<double>(agree) / static_cast<double>(test.size());
        }

        write_json(root / "report.json", to_json(report));
        emit_report(report, ReportFormat::Csv, root / "report.csv");
        emit_report(report, ReportFormat::Table, root / "report.txt");
      },
      [&](const fs::path&) { report = report_from_json(read_json(root / "report.json")); });
  return report;
}

}  // namespace finemine::harness
