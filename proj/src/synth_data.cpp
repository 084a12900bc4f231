#include "finemine/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "finemine/error.hpp"
#include "finemine/json_io.hpp"
#include "finemine/rng.hpp"
#include "finemine/tensor_io.hpp"

namespace finemine::synth {

namespace {

constexpr int kTilts = 5;  // tilt steps of 22.5 degrees from vertical to horizontal
constexpr double kTiltStep = std::numbers::pi / 8;
constexpr double kStripeAmplitude = 0.3;
constexpr double kClutterContrast = 0.12;
constexpr double kNoiseSigma = 0.05;
constexpr double kMaxJitter = std::numbers::pi / 36;  // 5 degrees
constexpr int kPaletteLevels = 4;

constexpr std::array<std::string_view, 5> kIdPrefix{"train", "val", "inu", "outu", "test"};

std::string make_id(std::size_t split, int index) {
  std::string num = std::to_string(index);
  return std::string(kIdPrefix[split]) + "-" + std::string(num.size() < 6 ? 6 - num.size() : 0, '0') + num;
}

Shot draw_shot(const GenSpec& spec, Rng& rng) {
  const double u = rng.uniform();
  if (u < spec.shot_mix[0]) return Shot::Long;
  if (u < spec.shot_mix[0] + spec.shot_mix[1]) return Shot::Medium;
  return Shot::Close;
}

// Integer box whose area ratio lies in the shot band.
std::pair<int, int> draw_box_size(int size, Shot shot, Rng& rng) {
  const AreaBand band = shot_band(shot);
  const double total = static_cast<double>(size) * size;
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double ratio = rng.uniform(band.lo, band.hi);
    const double aspect = rng.uniform(0.75, 4.0 / 3.0);
    const int w = std::clamp(static_cast<int>(std::lround(std::sqrt(ratio * total * aspect))), 1, size);
    const int h = std::clamp(static_cast<int>(std::lround(ratio * total / w)), 1, size);
    if (band.contains(w * h / total)) return {h, w};
  }
  const double want = 0.5 * (band.lo + band.hi);
  std::pair<int, int> best{0, 0};
  double best_gap = 2.0;
  for (int h = 1; h <= size; ++h)
    for (int w = 1; w <= size; ++w) {
      const double r = w * h / total;
      if (band.contains(r) && std::abs(r - want) < best_gap) {
        best_gap = std::abs(r - want);
        best = {h, w};
      }
    }
  if (best.first == 0) throw ValidationError("gen.image_size: too small to realise the shot bands");
  return best;
}

MotifPlacement draw_placement(int size, Shot shot, Rng& rng) {
  const auto [h, w] = draw_box_size(size, shot, rng);
  MotifPlacement m;
  m.height = h;
  m.width = w;
  m.top = static_cast<int>(rng.uniform_int(0, size - h));
  m.left = static_cast<int>(rng.uniform_int(0, size - w));
  m.mirrored = rng.uniform() < 0.5;
  m.jitter = rng.uniform(-kMaxJitter, kMaxJitter);
  m.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return m;
}

Example make_example(const GenSpec& spec, std::size_t split, int index, int class_id, Shot shot, bool labeled) {
  Rng rng(mix_seed(spec.seed, (static_cast<std::uint64_t>(split) << 32) | static_cast<std::uint64_t>(index)));
  const MotifPlacement m = draw_placement(spec.image_size, shot, rng);
  Example ex;
  ex.id = make_id(split, index);
  ex.image = render_image(spec, class_id, m, rng.engine()());
  if (labeled) ex.label = class_id;
  ex.hidden_label = class_id;
  ex.shot = shot;
  ex.target_area_ratio = static_cast<double>(m.height) * m.width / (static_cast<double>(spec.image_size) * spec.image_size);
  return ex;
}

}  // namespace

std::string_view to_string(Shot shot) {
  switch (shot) {
    case Shot::Long: return "long";
    case Shot::Medium: return "medium";
    case Shot::Close: return "close";
  }
  return "medium";
}

Shot shot_from_string(std::string_view name) {
  if (name == "long") return Shot::Long;
  if (name == "medium") return Shot::Medium;
  if (name == "close") return Shot::Close;
  throw ValidationError("unknown shot type '" + std::string(name) + "'");
}

AreaBand shot_band(Shot shot) {
  switch (shot) {
    case Shot::Long: return {0.01, 0.06};
    case Shot::Medium: return {0.10, 0.40};
    case Shot::Close: return {0.55, 0.90};
  }
  return {0.10, 0.40};
}

void validate(const GenSpec& spec) {
  if (spec.num_inclass_classes < 2) throw ValidationError("gen.num_inclass_classes must be >= 2");
  if (spec.num_outclass_classes < 1) throw ValidationError("gen.num_outclass_classes must be >= 1");
  if (spec.image_size < 8) throw ValidationError("gen.image_size must be >= 8");
  const auto& c = spec.counts;
  if (c.labeled_train <= 0) throw ValidationError("gen.counts.labeled_train must be > 0");
  if (c.validation <= 0) throw ValidationError("gen.counts.validation must be > 0");
  if (c.inclass_unlabeled <= 0) throw ValidationError("gen.counts.inclass_unlabeled must be > 0");
  if (c.outclass_unlabeled <= 0) throw ValidationError("gen.counts.outclass_unlabeled must be > 0");
  if (c.test <= 0) throw ValidationError("gen.counts.test must be > 0");
  if (c.validation % spec.num_inclass_classes != 0)
    throw ValidationError("gen.counts.validation must be a multiple of num_inclass_classes (balanced split)");
  if (c.labeled_train < spec.num_inclass_classes)
    throw ValidationError("gen.counts.labeled_train must be >= num_inclass_classes");
  double sum = 0.0;
  for (double p : spec.shot_mix) {
    if (!(p >= 0.0)) throw ValidationError("gen.shot_mix entries must be >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("gen.shot_mix must sum to 1");
  if (!std::isfinite(spec.imbalance_exponent) || spec.imbalance_exponent < 0.0)
    throw ValidationError("gen.imbalance_exponent must be finite and >= 0");
  const auto counts = imbalanced_counts(spec.num_inclass_classes, c.labeled_train, spec.imbalance_exponent);
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  if (*hi < 3 * *lo) throw ValidationError("gen.imbalance_exponent too small: labeled_train must be imbalanced (max >= 3x min)");
}

std::vector<Example>& DatasetBundle::split(std::string_view name) {
  return const_cast<std::vector<Example>&>(static_cast<const DatasetBundle&>(*this).split(name));
}

const std::vector<Example>& DatasetBundle::split(std::string_view name) const {
  if (name == "labeled_train") return labeled_train;
  if (name == "validation") return validation;
  if (name == "inclass_unlabeled") return inclass_unlabeled;
  if (name == "outclass_unlabeled") return outclass_unlabeled;
  if (name == "test") return test;
  throw ValidationError("unknown split '" + std::string(name) + "'");
}

std::vector<int> imbalanced_counts(int num_classes, int total, double exponent) {
  if (num_classes < 1 || total < num_classes) throw ValidationError("imbalanced_counts: need total >= num_classes");
  std::vector<double> weight(num_classes);
  for (int c = 0; c < num_classes; ++c) weight[c] = std::pow(static_cast<double>(c + 1), -exponent);
  const double wsum = std::accumulate(weight.begin(), weight.end(), 0.0);
  // One guaranteed example per class; the rest is split proportionally.
  const int spare = total - num_classes;
  std::vector<int> counts(num_classes, 1);
  std::vector<std::pair<double, int>> remainder;
  int assigned = 0;
  for (int c = 0; c < num_classes; ++c) {
    const double share = spare * weight[c] / wsum;
    const int whole = static_cast<int>(std::floor(share));
    counts[c] += whole;
    assigned += whole;
    remainder.emplace_back(share - whole, c);
  }
  std::stable_sort(remainder.begin(), remainder.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int i = 0; i < spare - assigned; ++i) ++counts[remainder[i].second];
  return counts;
}

StripeStyle stripe_style(const GenSpec& spec, int class_id) {
  const double scale = spec.image_size / 32.0;
  const int c = spec.num_inclass_classes;
  if (class_id < 0 || class_id >= c + spec.num_outclass_classes)
    throw ValidationError("stripe_style: class id " + std::to_string(class_id) + " out of range");
  // In-class ids walk tilts first, then periods 3, 5, 7, ... px. Out-of-class
  // ids sit half a step off on both axes (periods 4, 6, ...).
  if (class_id < c) return {(3.0 + 2.0 * (class_id / kTilts)) * scale, (class_id % kTilts) * kTiltStep};
  const int j = class_id - c;
  return {(4.0 + 2.0 * (j / kTilts)) * scale, ((j % kTilts) + 0.5) * kTiltStep};
}

Image render_image(const GenSpec& spec, int class_id, const MotifPlacement& motif, std::uint64_t background_seed) {
  const int size = spec.image_size;
  Rng rng(background_seed);
  std::array<double, 3> base{};
  for (double& b : base) b = (1.0 + static_cast<double>(rng.uniform_int(0, kPaletteLevels - 1))) / (kPaletteLevels + 1);

  std::vector<double> px(static_cast<std::size_t>(size) * size * 3);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = base[i % 3];

  const int blobs = static_cast<int>(rng.uniform_int(5, 12));
  for (int b = 0; b < blobs; ++b) {
    const double cy = rng.uniform(0.0, size), cx = rng.uniform(0.0, size);
    const double ry = rng.uniform(0.08, 0.3) * size, rx = rng.uniform(0.08, 0.3) * size;
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double opacity = rng.uniform(0.5, 1.0);
    const double soft = rng.uniform(0.2, 0.6);
    std::array<double, 3> color{};
    for (int c = 0; c < 3; ++c) color[c] = base[c] + rng.uniform(-kClutterContrast, kClutterContrast);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        const double u = (dx * ca + dy * sa) / rx, v = (-dx * sa + dy * ca) / ry;
        const double d = std::sqrt(u * u + v * v);
        const double alpha = opacity * std::clamp((1.0 - d) / soft, 0.0, 1.0);
        if (alpha <= 0.0) continue;
        for (int c = 0; c < 3; ++c) {
          double& p = px[(static_cast<std::size_t>(y) * size + x) * 3 + c];
          p = (1.0 - alpha) * p + alpha * color[c];
        }
      }
  }

  const StripeStyle style = stripe_style(spec, class_id);
  const double tilt = (motif.mirrored ? -style.orientation : style.orientation) + motif.jitter;
  const double co = std::cos(tilt), so = std::sin(tilt);
  for (int y = motif.top; y < motif.top + motif.height && y < size; ++y)
    for (int x = motif.left; x < motif.left + motif.width && x < size; ++x) {
      const double along = (x - motif.left) * co + (y - motif.top) * so;
      const double s = kStripeAmplitude * std::cos(2.0 * std::numbers::pi * along / style.period + motif.phase);
      for (int c = 0; c < 3; ++c) px[(static_cast<std::size_t>(y) * size + x) * 3 + c] = base[c] + s;
    }

  Image img(size, size, 3);
  for (std::size_t i = 0; i < px.size(); ++i)
    img.pixels[i] = static_cast<float>(std::clamp(px[i] + rng.normal(0.0, kNoiseSigma), 0.0, 1.0));
  return img;
}

DatasetBundle generate(const GenSpec& spec) {
  validate(spec);
  DatasetBundle bundle;
  bundle.spec = spec;
  bundle.num_inclass_classes = spec.num_inclass_classes;
  bundle.num_outclass_classes = spec.num_outclass_classes;
  const int c = spec.num_inclass_classes;
  Rng rng(mix_seed(spec.seed, 0xda7aULL));

  auto fill = [&](std::size_t split, std::vector<int> classes, bool labeled) {
    rng.shuffle(classes);
    std::vector<Shot> shots(classes.size());
    for (auto& s : shots) s = draw_shot(spec, rng);
    auto& out = bundle.split(kSplitNames[split]);
    out.reserve(classes.size());
    for (std::size_t i = 0; i < classes.size(); ++i)
      out.push_back(make_example(spec, split, static_cast<int>(i), classes[i], shots[i], labeled));
  };

  std::vector<int> train_classes;
  const auto per_class = imbalanced_counts(c, spec.counts.labeled_train, spec.imbalance_exponent);
  for (int k = 0; k < c; ++k) train_classes.insert(train_classes.end(), per_class[k], k);
  fill(0, train_classes, true);

  std::vector<int> val_classes;
  for (int i = 0; i < spec.counts.validation; ++i) val_classes.push_back(i % c);
  fill(1, val_classes, true);

  auto uniform_classes = [&](int count, int first, int n) {
    std::vector<int> v(count);
    for (int& k : v) k = first + static_cast<int>(rng.uniform_int(0, n - 1));
    return v;
  };
  fill(2, uniform_classes(spec.counts.inclass_unlabeled, 0, c), false);
  fill(3, uniform_classes(spec.counts.outclass_unlabeled, c, spec.num_outclass_classes), false);
  fill(4, uniform_classes(spec.counts.test, 0, c), false);
  return bundle;
}

void check_bundle(const DatasetBundle& bundle) {
  const int c = bundle.num_inclass_classes;
  const int total_classes = c + bundle.num_outclass_classes;
  if (c < 2 || bundle.num_outclass_classes < 1) throw IntegrityError("bundle: invalid class counts");
  std::set<std::string> ids;
  for (auto name : kSplitNames) {
    const bool labeled = name == "labeled_train" || name == "validation";
    const bool outclass = name == "outclass_unlabeled";
    for (const auto& ex : bundle.split(name)) {
      if (!ids.insert(ex.id).second) throw IntegrityError("bundle: duplicate id '" + ex.id + "'");
      if (ex.id.empty() || ex.id.find_first_of(",\n\r\"") != std::string::npos)
        throw IntegrityError("bundle: malformed id '" + ex.id + "'");
      try {
        validate_image(ex.image);
      } catch (const ValidationError& e) {
        throw IntegrityError("bundle: example '" + ex.id + "': " + e.what());
      }
      if (outclass ? (ex.hidden_label < c || ex.hidden_label >= total_classes) : (ex.hidden_label < 0 || ex.hidden_label >= c))
        throw IntegrityError("bundle: example '" + ex.id + "' has hidden_label outside its split's class range");
      if (labeled && ex.label != ex.hidden_label)
        throw IntegrityError("bundle: labeled example '" + ex.id + "' label differs from ground truth");
      if (!labeled && ex.label.has_value())
        throw IntegrityError("bundle: unlabeled example '" + ex.id + "' carries a label");
      if (!shot_band(ex.shot).contains(ex.target_area_ratio))
        throw IntegrityError("bundle: example '" + ex.id + "' target_area_ratio outside its shot band");
    }
  }
  std::vector<int> val_counts(c, 0), train_counts(c, 0);
  for (const auto& ex : bundle.validation) ++val_counts[ex.hidden_label];
  if (std::adjacent_find(val_counts.begin(), val_counts.end(), std::not_equal_to<>()) != val_counts.end())
    throw IntegrityError("bundle: validation split is not balanced");
  for (const auto& ex : bundle.labeled_train) ++train_counts[ex.hidden_label];
  const auto [lo, hi] = std::minmax_element(train_counts.begin(), train_counts.end());
  if (*hi < 3 * *lo) throw IntegrityError("bundle: labeled_train is not imbalanced (max < 3x min)");
}

void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create directory " + (dir / "images").string() + ": " + ec.message());
  json_io::json manifest;
  manifest["version"] = 1;
  manifest["gen_spec"] = json_io::to_json(bundle.spec);
  manifest["num_inclass_classes"] = bundle.num_inclass_classes;
  manifest["num_outclass_classes"] = bundle.num_outclass_classes;
  auto& splits = manifest["splits"] = json_io::json::object();
  for (auto name : kSplitNames) {
    auto& entries = splits[std::string(name)] = json_io::json::array();
    for (const auto& ex : bundle.split(name)) {
      const std::string file = "images/" + ex.id + ".fmt1";
      write_fmt1(dir / file, image_to_tensor(ex.image));
      entries.push_back({{"id", ex.id},
                         {"file", file},
                         {"label", ex.label ? json_io::json(*ex.label) : json_io::json(nullptr)},
                         {"hidden_label", ex.hidden_label},
                         {"shot", std::string(to_string(ex.shot))},
                         {"target_area_ratio", ex.target_area_ratio}});
    }
  }
  write_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

DatasetBundle load_bundle(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  json_io::json manifest;
  try {
    manifest = json_io::json::parse(read_file(manifest_path));
  } catch (const json_io::json::exception& e) {
    throw IntegrityError(manifest_path.string() + ": " + e.what());
  }
  DatasetBundle bundle;
  try {
    if (manifest.at("version").get<int>() != 1) throw IntegrityError(manifest_path.string() + ": unsupported version");
    bundle.spec = json_io::gen_spec_from_json(manifest.at("gen_spec"), "gen_spec");
    bundle.num_inclass_classes = manifest.at("num_inclass_classes").get<int>();
    bundle.num_outclass_classes = manifest.at("num_outclass_classes").get<int>();
    const auto& splits = manifest.at("splits");
    for (auto name : kSplitNames) {
      auto& out = bundle.split(name);
      for (const auto& e : splits.at(std::string(name))) {
        Example ex;
        ex.id = e.at("id").get<std::string>();
        const auto path = dir / e.at("file").get<std::string>();
        ex.image = image_from_tensor(read_fmt1(path), path.string());
        if (!e.at("label").is_null()) ex.label = e.at("label").get<int>();
        ex.hidden_label = e.at("hidden_label").get<int>();
        ex.shot = shot_from_string(e.at("shot").get<std::string>());
        ex.target_area_ratio = e.at("target_area_ratio").get<double>();
        out.push_back(std::move(ex));
      }
    }
  } catch (const json_io::json::exception& e) {
    throw IntegrityError(manifest_path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw IntegrityError(manifest_path.string() + ": " + e.what());
  }
  check_bundle(bundle);
  return bundle;
}

}  // namespace finemine::synth
