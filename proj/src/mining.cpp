#include "finemine/mining.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "finemine/error.hpp"
#include "finemine/fusion.hpp"
#include "finemine/parallel.hpp"
#include "finemine/rng.hpp"
#include "finemine/tensor_io.hpp"

namespace finemine::mining {

namespace {

constexpr std::string_view kCsvHeader = "id,label,conf,agree,round";

void check_entry(const PseudoLabel& e) {
  if (e.example_id.empty()) throw ValidationError("pseudo-label: empty example id");
  if (!(e.confidence >= 0.0 && e.confidence <= 1.0)) throw ValidationError("pseudo-label: confidence outside [0, 1]");
  if (e.agreement < 1) throw ValidationError("pseudo-label: agreement must be >= 1");
  if (e.label < 0) throw ValidationError("pseudo-label: negative class id");
}

template <class T>
T parse_number(std::string_view text, const std::string& where) {
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw IntegrityError(where + ": cannot parse '" + std::string(text) + "'");
  return value;
}

std::vector<double> logits_at_center(const nn::Classifier& model, const synth::Example& ex) {
  return nn::predict(model, ex.image);
}

nn::Classifier train_member(const synth::DatasetBundle& bundle, const PseudoLabelSet& labels,
                            const nn::TrainConfig& cfg) {
  const auto items = training_items(bundle, labels, cfg.label_smooth_eps);
  return nn::train(nn::init(bundle.num_inclass_classes, cfg.seed), items, cfg).model;
}

std::vector<int> assign(const Matrix& points, const Matrix& centroids, std::vector<double>* dist = nullptr) {
  std::vector<int> a(points.rows);
  if (dist) dist->assign(points.rows, 0.0);
  for (std::size_t i = 0; i < points.rows; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t c = 0; c < centroids.rows; ++c) {
      const double d = squared_distance(points.row(i), centroids.row(c));
      if (d < best) {
        best = d;
        arg = static_cast<int>(c);
      }
    }
    a[i] = arg;
    if (dist) (*dist)[i] = best;
  }
  return a;
}

double inertia_of(const Matrix& points, const Matrix& centroids, const std::vector<int>& a) {
  double total = 0.0;
  for (std::size_t i = 0; i < points.rows; ++i) total += squared_distance(points.row(i), centroids.row(a[i]));
  return total;
}

Matrix kmeanspp(const Matrix& points, int k, Rng& rng) {
  const std::size_t n = points.rows;
  Matrix c{static_cast<std::size_t>(k), points.cols, std::vector<double>(static_cast<std::size_t>(k) * points.cols)};
  std::vector<bool> chosen(n, false);
  auto take = [&](std::size_t row, std::size_t i) {
    std::copy(points.row(i).begin(), points.row(i).end(), c.row(row).begin());
    chosen[i] = true;
  };
  take(0, static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1)));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(points.row(i), c.row(0));
  for (int j = 1; j < k; ++j) {
    double total = 0.0;
    for (double d : d2) total += d;
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (d2[i] > 0.0 && acc > target) {
          pick = i;
          break;
        }
      }
      if (pick == n)  // rounding at the top end
        for (std::size_t i = n; i-- > 0;)
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
    } else {
      // Every point coincides with a centre already; any unused one will do.
      std::vector<std::size_t> unused;
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) unused.push_back(i);
      pick = unused[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(unused.size()) - 1))];
    }
    take(static_cast<std::size_t>(j), pick);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(points.row(i), c.row(j)));
  }
  return c;
}

}  // namespace

bool PseudoLabelSet::add(const PseudoLabel& entry) {
  check_entry(entry);
  return entries.emplace(entry.example_id, entry).second;
}

std::size_t PseudoLabelSet::extend(const PseudoLabelSet& other) {
  std::size_t added = 0;
  for (const auto& [id, e] : other.entries) added += add(e) ? 1 : 0;
  return added;
}

void save_pseudo_labels(const PseudoLabelSet& set, const std::filesystem::path& path) {
  std::string out(kCsvHeader);
  out += '\n';
  char conf[40];
  for (const auto& [id, e] : set.entries) {
    std::snprintf(conf, sizeof conf, "%.17g", e.confidence);
    out += id + "," + std::to_string(e.label) + "," + conf + "," + std::to_string(e.agreement) + "," +
           std::to_string(e.round) + "\n";
  }
  write_file(path, out);
}

PseudoLabelSet load_pseudo_labels(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader)
    throw IntegrityError(path.string() + ": missing header '" + std::string(kCsvHeader) + "'");
  PseudoLabelSet set;
  std::string prev;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw IntegrityError(where + ": expected 5 fields");
    PseudoLabel e{f[0], parse_number<int>(f[1], where), parse_number<double>(f[2], where), parse_number<int>(f[3], where),
                  parse_number<int>(f[4], where)};
    if (!prev.empty() && !(prev < e.example_id)) throw IntegrityError(where + ": ids not strictly sorted");
    prev = e.example_id;
    try {
      set.add(e);
    } catch (const ValidationError& err) {
      throw IntegrityError(where + ": " + err.what());
    }
  }
  return set;
}

VoteResult vote_top1(std::span<const Vote> votes) {
  if (votes.empty()) throw ValidationError("vote_top1: no votes");
  std::map<int, std::vector<double>> by_label;
  for (const auto& v : votes) by_label[v.label].push_back(v.confidence);
  VoteResult best;
  double best_sum = -1.0;
  for (auto& [label, confs] : by_label) {
    // Summing in sorted order keeps the result independent of input order.
    std::sort(confs.begin(), confs.end());
    double sum = 0.0;
    for (double c : confs) sum += c;
    const int count = static_cast<int>(confs.size());
    if (count > best.agreement || (count == best.agreement && sum > best_sum)) {
      best = {label, count, sum / count};
      best_sum = sum;
    }
  }
  return best;
}

PseudoLabelSet select_confident(std::span<const ExampleVote> votes, int min_agreement, double min_confidence,
                                int round) {
  PseudoLabelSet out;
  for (const auto& v : votes)
    if (v.vote.agreement >= min_agreement && v.vote.mean_confidence >= min_confidence)
      out.add({v.example_id, v.vote.label, v.vote.mean_confidence, v.vote.agreement, round});
  return out;
}

std::vector<ExampleVote> collect_votes(std::span<const nn::Classifier> models,
                                       std::span<const synth::Example> examples) {
  if (models.empty()) throw ValidationError("mine_round: need at least one model");
  std::vector<ExampleVote> out(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    std::vector<Vote> votes;
    votes.reserve(models.size());
    for (const auto& m : models) {
      const auto p = nn::softmax(logits_at_center(m, examples[i]));
      const int top = nn::argmax(p);
      votes.push_back({top, p[top]});
    }
    out[i] = {examples[i].id, vote_top1(votes)};
  });
  return out;
}

PseudoLabelSet mine_round(std::span<const nn::Classifier> models, std::span<const synth::Example> unlabeled,
                          const Thresholds& thresholds, int round) {
  const auto votes = collect_votes(models, unlabeled);
  const int agreement = thresholds.min_agreement.value_or(static_cast<int>(models.size()));
  return select_confident(votes, agreement, thresholds.min_confidence, round);
}

std::vector<nn::TrainItem> training_items(const synth::DatasetBundle& bundle, const PseudoLabelSet& labels,
                                          double label_smooth_eps) {
  const int c = bundle.num_inclass_classes;
  std::vector<nn::TrainItem> items;
  items.reserve(bundle.labeled_train.size() + labels.size());
  for (const auto& ex : bundle.labeled_train) items.push_back({ex.image, nn::smooth_targets(*ex.label, c, label_smooth_eps)});
  if (labels.size() == 0) return items;
  std::unordered_map<std::string, const synth::Example*> by_id;
  for (const auto& ex : bundle.inclass_unlabeled) by_id.emplace(ex.id, &ex);
  for (const auto& [id, e] : labels.entries) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("pseudo-label for unknown in-class example '" + id + "'");
    if (e.label >= c) throw ValidationError("pseudo-label class out of range for '" + id + "'");
    items.push_back({it->second->image, nn::smooth_targets(e.label, c, label_smooth_eps)});
  }
  return items;
}

double accuracy(const nn::Classifier& model, std::span<const synth::Example> examples) {
  if (examples.empty()) throw ValidationError("accuracy: no examples");
  std::vector<char> hit(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    hit[i] = nn::argmax(logits_at_center(model, examples[i])) == *examples[i].label;
  });
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(examples.size());
}

double fused_accuracy(std::span<const nn::Classifier> models, std::span<const double> member_accuracy,
                      std::span<const synth::Example> examples) {
  if (examples.empty()) throw ValidationError("fused_accuracy: no examples");
  const bool any = std::any_of(member_accuracy.begin(), member_accuracy.end(), [](double a) { return a > 0.0; });
  const auto weights = any ? fusion::weights_from_accuracy(member_accuracy)
                           : std::vector<double>(models.size(), 1.0 / static_cast<double>(models.size()));
  std::vector<char> hit(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    std::vector<std::vector<double>> z;
    for (const auto& m : models) z.push_back(logits_at_center(m, examples[i]));
    hit[i] = nn::argmax(fusion::fuse(z, weights)) == *examples[i].label;
  });
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(examples.size());
}

bool should_stop(std::span<const double> accuracies, int max_rounds, double converge_tol) {
  const auto r = static_cast<int>(accuracies.size());
  if (r >= max_rounds) return true;
  if (r < 2) return false;
  return accuracies[r - 1] - accuracies[r - 2] < converge_tol;
}

MiningResult iterative_mining(const synth::DatasetBundle& bundle, std::span<const nn::TrainConfig> members,
                              const MiningOptions& options, const std::vector<nn::Classifier>* round1_models) {
  if (options.max_rounds < 1) throw ValidationError("mining.max_rounds must be >= 1");
  if (members.empty()) throw ValidationError("iterative_mining: need at least one model");
  if (round1_models && round1_models->size() != members.size())
    throw ValidationError("iterative_mining: round-1 models do not match the member list");
  MiningResult result;
  std::vector<double> history;
  for (int round = 1;; ++round) {
    std::vector<nn::Classifier> models;
    if (round == 1 && round1_models) {
      models = *round1_models;
    } else {
      for (const auto& cfg : members) models.push_back(train_member(bundle, result.labels, cfg));
    }
    RoundRecord rec;
    rec.round = round;
    for (const auto& m : models) rec.member_val_accuracy.push_back(accuracy(m, bundle.validation));
    rec.val_accuracy = fused_accuracy(models, rec.member_val_accuracy, bundle.validation);
    rec.mined = result.labels.extend(mine_round(models, bundle.inclass_unlabeled, options.thresholds, round));
    rec.pseudo_count = result.labels.size();
    history.push_back(100.0 * rec.val_accuracy);
    result.rounds.push_back(std::move(rec));
    if (round == 1) result.round1_models = models;
    if (should_stop(history, options.max_rounds, options.converge_tol)) {
      result.final_models = std::move(models);
      break;
    }
  }
  return result;
}

MiningResult iterative_mining(const synth::DatasetBundle& bundle, std::span<const std::uint64_t> model_seeds,
                              const nn::TrainConfig& cfg, const MiningOptions& options) {
  std::vector<nn::TrainConfig> members;
  for (auto s : model_seeds) {
    members.push_back(cfg);
    members.back().seed = s;
  }
  return iterative_mining(bundle, members, options);
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

KMeansResult lloyd(const Matrix& points, int k, int max_iters, std::uint64_t seed) {
  if (k < 1) throw ValidationError("kmeans: K must be >= 1");
  if (static_cast<std::size_t>(k) > points.rows) throw ValidationError("kmeans: K exceeds the number of points");
  if (max_iters < 1) throw ValidationError("kmeans: max_iters must be >= 1");
  Rng rng(seed);
  KMeansResult r;
  Matrix& c = r.model.centroids;
  c = kmeanspp(points, k, rng);
  std::vector<double> dist;
  r.assignments = assign(points, c, &dist);
  r.inertia_history.push_back(inertia_of(points, c, r.assignments));
  for (int it = 0; it < max_iters; ++it) {
    std::vector<double> sums(c.data.size(), 0.0);
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < points.rows; ++i) {
      const auto a = static_cast<std::size_t>(r.assignments[i]);
      ++counts[a];
      for (std::size_t d = 0; d < points.cols; ++d) sums[a * points.cols + d] += points.row(i)[d];
    }
    std::vector<bool> reseeded(points.rows, false);
    for (std::size_t j = 0; j < counts.size(); ++j) {
      if (counts[j] > 0) {
        for (std::size_t d = 0; d < points.cols; ++d)
          c.data[j * points.cols + d] = sums[j * points.cols + d] / static_cast<double>(counts[j]);
        continue;
      }
      // Empty cluster: move it onto the point worst served by its centre.
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < points.rows; ++i)
        if (!reseeded[i] && dist[i] > far_d) {
          far_d = dist[i];
          far = i;
        }
      reseeded[far] = true;
      std::copy(points.row(far).begin(), points.row(far).end(), c.row(j).begin());
    }
    auto next = assign(points, c, &dist);
    r.inertia_history.push_back(inertia_of(points, c, next));
    const bool same = next == r.assignments;
    r.assignments = std::move(next);
    if (same) break;
  }
  r.model.inertia = r.inertia_history.back();
  return r;
}

KMeansResult kmeans(const Matrix& points, int k, int max_iters, std::uint64_t seed, int restarts) {
  if (restarts < 1) throw ValidationError("kmeans: restarts must be >= 1");
  if (static_cast<std::size_t>(k) > points.rows) throw ValidationError("kmeans: K exceeds the number of points");
  std::vector<KMeansResult> runs(static_cast<std::size_t>(restarts));
  parallel_for(runs.size(), [&](std::size_t i) { runs[i] = lloyd(points, k, max_iters, mix_seed(seed, i)); });
  std::size_t best = 0;
  for (std::size_t i = 1; i < runs.size(); ++i)
    if (runs[i].model.inertia < runs[best].model.inertia) best = i;
  runs[best].restart = static_cast<int>(best);
  return std::move(runs[best]);
}

Matrix features_for_clustering(std::span<const synth::Example> examples) {
  if (examples.empty()) throw ValidationError("features_for_clustering: no examples");
  constexpr int kGrid = 8;
  const int channels = examples.front().image.channels;
  Matrix m{examples.size(), static_cast<std::size_t>(channels * kGrid * kGrid), {}};
  m.data.assign(m.rows * m.cols, 0.0);
  parallel_for(examples.size(), [&](std::size_t n) {
    const Image& img = examples[n].image;
    if (img.channels != channels) throw ValidationError("features_for_clustering: mixed channel counts");
    auto row = m.row(n);
    for (int gy = 0; gy < kGrid; ++gy) {
      const int y0 = gy * img.height / kGrid, y1 = std::max(y0 + 1, (gy + 1) * img.height / kGrid);
      for (int gx = 0; gx < kGrid; ++gx) {
        const int x0 = gx * img.width / kGrid, x1 = std::max(x0 + 1, (gx + 1) * img.width / kGrid);
        for (int c = 0; c < channels; ++c) {
          double s = 0.0;
          for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) s += img.at(y, x, c);
          row[static_cast<std::size_t>(c) * kGrid * kGrid + gy * kGrid + gx] = s / ((y1 - y0) * (x1 - x0));
        }
      }
    }
  });
  return m;
}

ClusterPretrainResult cluster_pretrain(std::span<const synth::Example> outclass, int k, const nn::TrainConfig& cfg,
                                       int max_iters) {
  if (k < 2) throw ValidationError("cluster_pretrain: K must be >= 2");
  ClusterPretrainResult r;
  r.clusters = kmeans(features_for_clustering(outclass), k, max_iters, cfg.seed);

  std::vector<std::size_t> order(outclass.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(cfg.seed, 0x401dULL));
  rng.shuffle(order);
  const auto n_hold = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.1 * order.size())));
  if (n_hold >= order.size()) throw ValidationError("cluster_pretrain: too few examples for a holdout");
  r.holdout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::sort(r.holdout.begin(), r.holdout.end());
  std::vector<bool> held(outclass.size(), false);
  for (auto i : r.holdout) held[i] = true;

  std::vector<nn::TrainItem> items;
  for (std::size_t i = 0; i < outclass.size(); ++i)
    if (!held[i]) items.push_back({outclass[i].image, nn::smooth_targets(r.clusters.assignments[i], k, cfg.label_smooth_eps)});
  r.model = nn::train(nn::init(k, cfg.seed), items, cfg).model;

  std::vector<char> hit(r.holdout.size());
  parallel_for(r.holdout.size(), [&](std::size_t j) {
    const auto i = r.holdout[j];
    hit[j] = nn::argmax(nn::predict(r.model, outclass[i].image)) == r.clusters.assignments[i];
  });
  r.holdout_accuracy = static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(hit.size());
  return r;
}

PseudoLabelSet intersect(const PseudoLabelSet& a, const PseudoLabelSet& b) {
  PseudoLabelSet out;
  for (const auto& [id, ea] : a.entries) {
    auto it = b.entries.find(id);
    if (it == b.entries.end() || it->second.label != ea.label) continue;
    const auto& eb = it->second;
    out.add({id, ea.label, std::min(ea.confidence, eb.confidence), ea.agreement + eb.agreement,
             std::max(ea.round, eb.round)});
  }
  return out;
}

namespace eval {

std::optional<double> precision(const PseudoLabelSet& set, std::span<const synth::Example> unlabeled) {
  if (set.size() == 0) return std::nullopt;
  std::unordered_map<std::string, int> truth;
  for (const auto& ex : unlabeled) truth.emplace(ex.id, ex.hidden_label);
  std::size_t hits = 0;
  for (const auto& [id, e] : set.entries) {
    auto it = truth.find(id);
    if (it == truth.end()) throw ValidationError("precision: unknown example '" + id + "'");
    hits += it->second == e.label ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(set.size());
}

}  // namespace eval

}  // namespace finemine::mining
