#pragma once

// Pseudo-label mining: ensemble top-1 voting, confidence filtering, the
// iterate-until-converged loop, k-means on out-of-class data, cluster
// pretraining, and intersection of two mined sets.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "finemine/synth_data.hpp"
#include "finemine/tinymodel.hpp"

namespace finemine::mining {

struct PseudoLabel {
  std::string example_id;
  int label = 0;
  double confidence = 0.0;
  int agreement = 1;
  int round = 1;

  bool operator==(const PseudoLabel&) const = default;
};

struct PseudoLabelSet {
  std::map<std::string, PseudoLabel> entries;

  // Inserts unless the id is already present (first label sticks). Throws
  // ValidationError on an entry that breaks the PseudoLabel invariants.
  bool add(const PseudoLabel& entry);
  // Adds every entry of `other` not yet present; returns the number added.
  std::size_t extend(const PseudoLabelSet& other);
  bool contains(const std::string& id) const { return entries.count(id) != 0; }
  std::size_t size() const { return entries.size(); }

  bool operator==(const PseudoLabelSet&) const = default;
};

// `id,label,conf,agree,round` with a header line, sorted by id.
void save_pseudo_labels(const PseudoLabelSet& set, const std::filesystem::path& path);
PseudoLabelSet load_pseudo_labels(const std::filesystem::path& path);

struct Vote {
  int label = 0;
  double confidence = 0.0;
};

struct VoteResult {
  int label = 0;
  int agreement = 0;
  double mean_confidence = 0.0;

  bool operator==(const VoteResult&) const = default;
};

// Plurality; ties go to the larger summed confidence, then the smaller id.
VoteResult vote_top1(std::span<const Vote> votes);

struct ExampleVote {
  std::string example_id;
  VoteResult vote;
};

PseudoLabelSet select_confident(std::span<const ExampleVote> votes, int min_agreement, double min_confidence,
                                int round);

struct Thresholds {
  std::optional<int> min_agreement;  // unset: every model must agree
  double min_confidence = 0.6;

  bool operator==(const Thresholds&) const = default;
};

// Centre-view top-1 of every model on every example, in example order.
std::vector<ExampleVote> collect_votes(std::span<const nn::Classifier> models, std::span<const synth::Example> examples);

PseudoLabelSet mine_round(std::span<const nn::Classifier> models, std::span<const synth::Example> unlabeled,
                          const Thresholds& thresholds, int round);

// Training items for labeled_train plus every pseudo-labeled in-class example
// (ids in `labels` order), with smoothed targets.
std::vector<nn::TrainItem> training_items(const synth::DatasetBundle& bundle, const PseudoLabelSet& labels,
                                          double label_smooth_eps);

// Top-1 accuracy on a labeled split.
double accuracy(const nn::Classifier& model, std::span<const synth::Example> examples);
// Accuracy of the accuracy-weighted logit fusion of `models`, weights taken
// from `member_accuracy` (uniform when all are zero).
double fused_accuracy(std::span<const nn::Classifier> models, std::span<const double> member_accuracy,
                      std::span<const synth::Example> examples);

struct MiningOptions {
  Thresholds thresholds;
  int max_rounds = 3;
  double converge_tol = 0.5;  // percentage points of validation accuracy

  bool operator==(const MiningOptions&) const = default;
};

struct RoundRecord {
  int round = 0;
  std::size_t pseudo_count = 0;  // set size after this round's mining
  std::size_t mined = 0;         // entries added this round
  double val_accuracy = 0.0;     // fused, in [0, 1]
  std::vector<double> member_val_accuracy;
};

struct MiningResult {
  PseudoLabelSet labels;
  std::vector<RoundRecord> rounds;
  std::vector<nn::Classifier> round1_models;
  std::vector<nn::Classifier> final_models;
};

// True once the gain of the latest round is below tol or the cap is reached.
// `accuracies` are in percent; the first round never converges.
bool should_stop(std::span<const double> accuracies, int max_rounds, double converge_tol);

// One model per member config (seed included) each round. `round1_models`, if
// given, must equal what round 1 would train and skips that training.
MiningResult iterative_mining(const synth::DatasetBundle& bundle, std::span<const nn::TrainConfig> members,
                              const MiningOptions& options,
                              const std::vector<nn::Classifier>* round1_models = nullptr);
// Same recipe for every model, one per seed.
MiningResult iterative_mining(const synth::DatasetBundle& bundle, std::span<const std::uint64_t> model_seeds,
                              const nn::TrainConfig& cfg, const MiningOptions& options);

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
};

struct ClusterModel {
  Matrix centroids;  // K x D
  double inertia = 0.0;

  std::size_t k() const { return centroids.rows; }
};

struct KMeansResult {
  std::vector<int> assignments;
  ClusterModel model;
  std::vector<double> inertia_history;  // of the kept restart, one per assignment step
  int restart = 0;
};

double squared_distance(std::span<const double> a, std::span<const double> b);

// One seeded k-means++ initialisation followed by Lloyd iterations.
KMeansResult lloyd(const Matrix& points, int k, int max_iters, std::uint64_t seed);
// Best of `restarts` runs of lloyd(); ties keep the lowest restart index.
KMeansResult kmeans(const Matrix& points, int k, int max_iters, std::uint64_t seed, int restarts = 5);

// 8x8 per-channel average pooling, channel-major (D = 64 * channels).
Matrix features_for_clustering(std::span<const synth::Example> examples);

struct ClusterPretrainResult {
  nn::Classifier model;  // K-way
  double holdout_accuracy = 0.0;
  KMeansResult clusters;
  std::vector<std::size_t> holdout;  // indices into the input examples
};

ClusterPretrainResult cluster_pretrain(std::span<const synth::Example> outclass, int k, const nn::TrainConfig& cfg,
                                       int max_iters = 100);

// Ids in both sets with matching labels; min confidence, summed agreement,
// max round.
PseudoLabelSet intersect(const PseudoLabelSet& a, const PseudoLabelSet& b);

// Evaluation only: reads hidden labels. Never feed the result back into
// training or selection.
namespace eval {
// Fraction of entries whose label matches the hidden label; nullopt when empty.
std::optional<double> precision(const PseudoLabelSet& set, std::span<const synth::Example> unlabeled);
}  // namespace eval

}  // namespace finemine::mining
