#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

#include "finemine/error.hpp"
#include "finemine/synth_data.hpp"
#include "finemine/tensor_io.hpp"
#include "helpers.hpp"

using namespace finemine;
using namespace finemine::synth;
namespace fs = std::filesystem;

namespace {

const DatasetBundle& default_bundle() {
  static const DatasetBundle b = [] {
    GenSpec s;
    s.seed = 11;
    return generate(s);
  }();
  return b;
}

double pixel_distance(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("validation split is exactly balanced") {
  const auto& b = default_bundle();
  std::map<int, int> per_class;
  for (const auto& e : b.validation) ++per_class[*e.label];
  CHECK(per_class.size() == 10);
  for (const auto& [c, n] : per_class) CHECK(n == 20);
}

TEST_CASE("labeled_train is imbalanced and follows the power law") {
  const auto& b = default_bundle();
  std::vector<int> counts(10, 0);
  for (const auto& e : b.labeled_train) ++counts[*e.label];
  CHECK(*std::max_element(counts.begin(), counts.end()) >= 3 * *std::min_element(counts.begin(), counts.end()));
  CHECK(counts == imbalanced_counts(10, 300, 1.5));
}

TEST_CASE("imbalanced_counts matches a largest-remainder oracle") {
  // Oracle: one example per class, then the spare total split by Hamilton's
  // method (floors, then the largest fractional parts get one more).
  for (double e : {0.0, 0.7, 1.5, 2.5}) {
    for (int total : {6, 10, 37, 300}) {
      const int c = 6;
      std::vector<double> share(c);
      double z = 0.0;
      for (int i = 0; i < c; ++i) z += std::pow(i + 1.0, -e);
      for (int i = 0; i < c; ++i) share[i] = (total - c) * std::pow(i + 1.0, -e) / z;
      std::vector<int> want(c);
      int left = total - c;
      for (int i = 0; i < c; ++i) {
        want[i] = 1 + static_cast<int>(share[i]);
        left -= static_cast<int>(share[i]);
      }
      std::vector<int> idx(c);
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return share[a] - std::floor(share[a]) > share[b] - std::floor(share[b]);
      });
      for (int i = 0; i < left; ++i) ++want[idx[i]];
      const auto got = imbalanced_counts(c, total, e);
      CHECK(got == want);
      CHECK(std::accumulate(got.begin(), got.end(), 0) == total);
      for (int i = 1; i < c; ++i) CHECK(got[i] <= got[i - 1]);
    }
  }
  CHECK_THROWS_AS(imbalanced_counts(4, 3, 1.0), ValidationError);
}

TEST_CASE("bundle invariants") {
  const auto& b = default_bundle();
  CHECK_NOTHROW(check_bundle(b));
  std::set<std::string> ids;
  for (auto name : kSplitNames)
    for (const auto& e : b.split(name)) {
      CHECK(ids.insert(e.id).second);
      CHECK(shot_band(e.shot).contains(e.target_area_ratio));
    }
  for (const auto& e : b.outclass_unlabeled) {
    CHECK(e.hidden_label >= b.num_inclass_classes);
    CHECK_FALSE(e.label.has_value());
  }
  for (const auto& e : b.inclass_unlabeled) CHECK(e.hidden_label < b.num_inclass_classes);
  CHECK(b.labeled_train.size() == 300);
  CHECK(b.inclass_unlabeled.size() == 2000);
  CHECK(b.outclass_unlabeled.size() == 4000);
  CHECK(b.test.size() == 500);
}

TEST_CASE("shot bands") {
  CHECK(shot_band(Shot::Long).lo == 0.01);
  CHECK(shot_band(Shot::Long).hi == 0.06);
  CHECK(shot_band(Shot::Medium).lo == 0.10);
  CHECK(shot_band(Shot::Medium).hi == 0.40);
  CHECK(shot_band(Shot::Close).lo == 0.55);
  CHECK(shot_band(Shot::Close).hi == 0.90);
}

TEST_CASE("generate is deterministic and seed-sensitive") {
  const auto spec = testutil::tiny_spec(5);
  CHECK(generate(spec) == generate(spec));
  auto other = spec;
  other.seed = 6;
  CHECK_FALSE(generate(spec) == generate(other));
}

TEST_CASE("classes differ subtly relative to background variation") {
  // Same placement and shot, different backgrounds: the class signal is small
  // next to the clutter, so different-class and same-class pairs sit at
  // similar pixel distances.
  GenSpec spec;
  Rng rng(99);
  double same = 0.0, diff = 0.0;
  const int pairs = 100;
  for (int i = 0; i < pairs; ++i) {
    MotifPlacement m;
    m.height = m.width = 14;
    m.top = static_cast<int>(rng.uniform_int(0, spec.image_size - m.height));
    m.left = static_cast<int>(rng.uniform_int(0, spec.image_size - m.width));
    m.phase = rng.uniform(0.0, 6.28);
    const int c = static_cast<int>(rng.uniform_int(0, 9));
    const int d = (c + 1 + static_cast<int>(rng.uniform_int(0, 8))) % 10;
    const auto a = render_image(spec, c, m, 1000 + i);
    same += pixel_distance(a, render_image(spec, c, m, 5000 + i));
    diff += pixel_distance(a, render_image(spec, d, m, 5000 + i));
  }
  CHECK(std::abs(diff - same) / same < 0.20);
}

TEST_CASE("stripe styles are distinct per class") {
  GenSpec spec;
  std::set<std::pair<double, double>> seen;
  for (int c = 0; c < spec.num_inclass_classes + spec.num_outclass_classes; ++c) {
    const auto s = stripe_style(spec, c);
    CHECK(s.period > 0.0);
    CHECK(seen.insert({s.period, s.orientation}).second);
  }
  CHECK_THROWS_AS(stripe_style(spec, 30), ValidationError);
  CHECK_THROWS_AS(stripe_style(spec, -1), ValidationError);
}

TEST_CASE("invalid specs name the field") {
  auto s = testutil::tiny_spec();
  s.counts.test = 0;
  CHECK_THROWS_WITH_AS(validate(s), doctest::Contains("counts.test"), ValidationError);
  s = testutil::tiny_spec();
  s.shot_mix = {0.5, 0.5, 0.1};
  CHECK_THROWS_WITH_AS(validate(s), doctest::Contains("shot_mix"), ValidationError);
  s = testutil::tiny_spec();
  s.counts.validation = 7;
  CHECK_THROWS_WITH_AS(validate(s), doctest::Contains("validation"), ValidationError);
  s = testutil::tiny_spec();
  s.imbalance_exponent = 0.0;
  CHECK_THROWS_AS(generate(s), ValidationError);
}

TEST_CASE("save and load round-trip") {
  testutil::TempDir dir("bundle");
  const auto b = generate(testutil::tiny_spec());
  save_bundle(b, dir.path() / "b");
  CHECK(load_bundle(dir.path() / "b") == b);
}

TEST_CASE("manifest lists one entry per example with split tags") {
  testutil::TempDir dir("manifest");
  auto spec = testutil::tiny_spec();
  const auto b = generate(spec);
  save_bundle(b, dir.path());
  const auto m = nlohmann::json::parse(read_file(dir.path() / "manifest.json"));
  CHECK(m.at("version") == 1);
  std::size_t total = 0;
  for (auto name : kSplitNames) {
    const auto& entries = m.at("splits").at(std::string(name));
    CHECK(entries.size() == b.split(name).size());
    total += entries.size();
    for (const auto& e : entries) {
      CHECK(e.contains("id"));
      CHECK(e.contains("file"));
      CHECK(e.contains("hidden_label"));
      CHECK(e.contains("shot"));
      CHECK(e.contains("target_area_ratio"));
    }
  }
  CHECK(total == 64);
}

TEST_CASE("load rejects truncated tensors and duplicate ids") {
  testutil::TempDir dir("corrupt");
  const auto b = generate(testutil::tiny_spec());
  save_bundle(b, dir.path());
  const auto victim = dir.path() / "images" / (b.test.front().id + ".fmt1");
  {
    auto bytes = read_file(victim);
    bytes.resize(bytes.size() - 5);
    write_file(victim, bytes);
  }
  CHECK_THROWS_WITH_AS(load_bundle(dir.path()), doctest::Contains(b.test.front().id.c_str()), IntegrityError);

  save_bundle(b, dir.path());
  auto m = nlohmann::ordered_json::parse(read_file(dir.path() / "manifest.json"));
  m["splits"]["test"][1]["id"] = m["splits"]["test"][0]["id"];
  write_file(dir.path() / "manifest.json", m.dump());
  CHECK_THROWS_AS(load_bundle(dir.path()), IntegrityError);
}

TEST_CASE("load of a missing directory is an I/O error with the path") {
  CHECK_THROWS_WITH_AS(load_bundle("/nonexistent/finemine/bundle"), doctest::Contains("/nonexistent/finemine/bundle"),
                       IoError);
}

TEST_CASE("save into an unwritable location reports the path") {
  const auto b = generate(testutil::tiny_spec());
  testutil::TempDir dir("blocked");
  write_file(dir.path() / "file", "x");
  CHECK_THROWS_WITH_AS(save_bundle(b, dir.path() / "file" / "sub"), doctest::Contains("file"), IoError);
}
