#pragma once

// Run configuration, the end-to-end pipeline, metrics and reports.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "finemine/fusion.hpp"
#include "finemine/json_io.hpp"
#include "finemine/mining.hpp"
#include "finemine/synth_data.hpp"
#include "finemine/tinymodel.hpp"

namespace finemine::harness {

enum class Role { Generic, Finegrained };

std::string_view to_string(Role role);
Role role_from_string(std::string_view name);

// Training-time view settings of one model.
struct Profile {
  std::string name = "generic";
  int crop_size = 32;
  nn::AugmentFlags augment;

  bool operator==(const Profile&) const = default;
};

// Built-in profiles: "plain", "generic", "finegrained", "fixres", "cutmix",
// "wsdan".
// Throws ValidationError for any other name.
Profile builtin_profile(std::string_view name);

struct ModelRole {
  std::uint64_t seed = 0;
  Role role = Role::Generic;
  Profile profile;

  bool operator==(const ModelRole&) const = default;
};

struct MiningConfig {
  mining::Thresholds thresholds;
  int max_rounds = 3;
  double converge_tol = 0.5;

  bool operator==(const MiningConfig&) const = default;
};

struct ClusterConfig {
  bool enabled = true;
  int k = 40;
  int max_iters = 100;
  nn::TrainConfig pretrain;  // K-way training on cluster ids

  bool operator==(const ClusterConfig&) const = default;
};

struct FixConfig {
  bool enabled = false;
  int high_resolution = 48;
  int epochs = 30;
  double base_lr = 2.0;

  bool operator==(const FixConfig&) const = default;
};

enum class TtaMode { None, Three, Crops144 };

std::string_view to_string(TtaMode mode);
TtaMode tta_mode_from_string(std::string_view name);

struct TtaConfig {
  TtaMode mode = TtaMode::Three;
  // Scales are multiples of the model resolution R: resize for tta_three is
  // round(R * resize_factor); crops_144 uses round(R * s) for each s.
  double resize_factor = 1.125;
  std::array<double, 4> scales{1.125, 1.25, 1.375, 1.5};
  std::uint64_t seed = 0;

  bool operator==(const TtaConfig&) const = default;
};

struct RunConfig {
  synth::GenSpec gen;
  nn::TrainConfig train;  // shared recipe; profile and seed come from the role
  MiningConfig mining;
  ClusterConfig cluster;
  FixConfig fix;
  TtaConfig tta;
  fusion::FusionPlan fusion;
  std::vector<ModelRole> model_roles;
  std::filesystem::path output_dir = "runs/default";

  bool operator==(const RunConfig&) const = default;
};

// Desk-scale defaults: three generic and three finegrained models.
RunConfig default_run_config();

// Throws ValidationError naming the offending field.
void validate(const RunConfig& cfg);

json_io::json to_json(const RunConfig& cfg);
// Missing keys keep their default_run_config() value; unknown keys throw.
RunConfig run_config_from_json(const json_io::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Scalar seeds become `seed`; the i-th model role gets seed + i.
void override_seeds(RunConfig& cfg, std::uint64_t seed);
// Applies FINEMINE_SEED when set; ValidationError if it is not an integer.
void apply_env_seed(RunConfig& cfg);

// TrainConfig of one role: shared recipe with the role's profile and seed.
nn::TrainConfig role_train_config(const RunConfig& cfg, const ModelRole& role);

double top1_error(std::span<const int> predictions, std::span<const int> truths);

struct GridCell {
  double lr = 0.0;
  int batch_size = 0;
  double val_accuracy = 0.0;

  bool operator==(const GridCell&) const = default;
};

struct GridResult {
  double best_lr = 0.0;
  int best_batch = 0;
  std::vector<GridCell> table;  // lr-major, in grid order
};

// Validation accuracy of one candidate recipe.
using Evaluator = std::function<double(const nn::TrainConfig&)>;

// Ties go to the lower lr, then the lower batch size.
GridResult grid_search(std::span<const double> lr_grid, std::span<const int> batch_grid, const Evaluator& evaluate,
                       const nn::TrainConfig& base_cfg);
// Trains a fresh model per cell on labeled_train, scores it on validation.
GridResult grid_search(std::span<const double> lr_grid, std::span<const int> batch_grid,
                       const synth::DatasetBundle& bundle, const nn::TrainConfig& base_cfg);

struct ModelRow {
  std::string name;
  int train_resolution = 0;
  int test_resolution = 0;
  double top1_error = 0.0;  // percent

  bool operator==(const ModelRow&) const = default;
};

struct MiningRow {
  int round = 0;
  std::size_t pseudo_count = 0;
  std::optional<double> precision;  // percent; empty when nothing was mined
  double val_accuracy = 0.0;        // percent

  bool operator==(const MiningRow&) const = default;
};

struct MetricsReport {
  std::vector<ModelRow> models;
  std::vector<ModelRow> fused;
  std::vector<MiningRow> mining;
  // Named scalar measurements (accuracies in percent) that do not fit the
  // table shape; kept in report.json only.
  std::map<std::string, double> metrics;

  bool operator==(const MetricsReport&) const = default;
};

enum class ReportFormat { Table, Csv };

ReportFormat report_format_from_string(std::string_view name);
std::string format_report(const MetricsReport& report, ReportFormat format);
void emit_report(const MetricsReport& report, ReportFormat format, const std::filesystem::path& path);
// Inverse of format_report(.., Csv); `metrics` is left empty.
MetricsReport parse_report_csv(std::string_view text);

json_io::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const json_io::json& j);

inline constexpr std::array<std::string_view, 8> kStages{"01_data",      "02_roles",   "03_mining", "04_cluster",
                                                         "05_intersect", "06_retrain", "07_fix",    "08_evaluate"};

struct PipelineOptions {
  bool resume = false;  // reuse stages whose DONE marker exists
  std::function<void(const std::string&)> log;
};

// Writes every stage under cfg.output_dir/<stage>/ and the report files
// (report.json, report.csv, report.txt) under cfg.output_dir. A failing stage
// is rethrown with its name prefixed; finished stages stay on disk.
MetricsReport run_pipeline(const RunConfig& cfg, const PipelineOptions& options = {});

}  // namespace finemine::harness
