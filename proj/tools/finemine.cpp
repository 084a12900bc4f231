// finemine command-line entry point. Exit codes: 0 success, 1 validation
// error, 2 I/O error.

#include <charconv>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "finemine/error.hpp"
#include "finemine/harness.hpp"
#include "finemine/mining.hpp"
#include "finemine/parallel.hpp"
#include "finemine/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace finemine;

namespace {

harness::RunConfig config_from(const std::string& path) {
  auto cfg = path.empty() ? harness::default_run_config() : harness::load_run_config(path);
  harness::apply_env_seed(cfg);
  harness::validate(cfg);
  return cfg;
}

std::vector<double> parse_weights(const std::string& path) {
  const std::string text = read_file(path);
  std::vector<double> w;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t end = text.find_first_of(",\n\r \t", i);
    const std::string tok = text.substr(i, end == std::string::npos ? std::string::npos : end - i);
    if (!tok.empty()) {
      double v = 0.0;
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || p != tok.data() + tok.size())
        throw ValidationError(path + ": bad weight '" + tok + "'");
      w.push_back(v);
    }
    if (end == std::string::npos) break;
    i = end + 1;
  }
  return w;
}

// Class ids from either an N x C logits tensor or a rank-1 id tensor.
std::vector<int> class_ids(const Tensor& t, const std::string& source) {
  std::vector<int> ids;
  if (t.dims.size() == 1) {
    for (float v : t.data) {
      if (v < 0.0f || v != static_cast<float>(static_cast<int>(v)))
        throw ValidationError(source + ": class ids must be non-negative integers");
      ids.push_back(static_cast<int>(v));
    }
    return ids;
  }
  if (t.dims.size() != 2 || t.dims[1] == 0) throw ValidationError(source + ": expected N x C logits or N class ids");
  for (std::uint32_t r = 0; r < t.dims[0]; ++r) {
    std::vector<double> row(t.data.begin() + r * t.dims[1], t.data.begin() + (r + 1) * t.dims[1]);
    ids.push_back(nn::argmax(row));
  }
  return ids;
}

std::vector<std::vector<double>> logit_rows(const Tensor& t, const std::string& source) {
  if (t.dims.size() != 2) throw ValidationError(source + ": logits must be an N x C tensor");
  std::vector<std::vector<double>> rows(t.dims[0]);
  for (std::uint32_t r = 0; r < t.dims[0]; ++r)
    rows[r].assign(t.data.begin() + r * t.dims[1], t.data.begin() + (r + 1) * t.dims[1]);
  return rows;
}

std::string role_name(const harness::ModelRole& r, std::size_t i) {
  return std::string(harness::to_string(r.role)) + "-" + std::to_string(i);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"finemine: pseudo-label mining, fusion and evaluation on synthetic fine-grained data"};
  app.require_subcommand(1);
  bool single_thread = false;
  app.add_flag("--single-thread", single_thread, "Run every stage on one thread");

  std::string config, out, data, run_dir, format = "table", pred, truth, weights;
  std::vector<std::string> models, logits;
  bool resume = false;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset bundle");
  gen->add_option("--config", config, "Run config JSON (gen section is used)");
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train one model per configured role on labeled_train");
  train->add_option("--data", data, "Bundle directory")->required();
  train->add_option("--config", config, "Run config JSON");
  train->add_option("--out", out, "Output directory")->required();

  auto* mine = app.add_subcommand("mine", "Mine pseudo-labels on in-class unlabeled data");
  mine->add_option("--data", data, "Bundle directory")->required();
  mine->add_option("--models", models, "Checkpoint directories")->required();
  mine->add_option("--config", config, "Run config JSON (mining thresholds)");
  mine->add_option("--out", out, "Pseudo-label CSV")->required();

  auto* cluster = app.add_subcommand("cluster-pretrain", "K-means on out-of-class data, then train on cluster ids");
  cluster->add_option("--data", data, "Bundle directory")->required();
  cluster->add_option("--config", config, "Run config JSON (cluster section)");
  cluster->add_option("--out", out, "Output directory")->required();

  auto* fuse = app.add_subcommand("fuse", "Weighted sum of N x C logit tensors");
  fuse->add_option("--logits", logits, "Logit tensors (FMT1)")->required();
  fuse->add_option("--weights", weights, "Weights file, comma or newline separated")->required();
  fuse->add_option("--out", out, "Output tensor")->required();

  auto* eval = app.add_subcommand("eval", "Top-1 error of predictions against truths");
  eval->add_option("--pred", pred, "Logits (N x C) or class ids (N)")->required();
  eval->add_option("--truth", truth, "Class ids (N)")->required();

  auto* pipeline = app.add_subcommand("pipeline", "Run the full mining, fusion and evaluation pipeline");
  pipeline->add_option("--config", config, "Run config JSON")->required();
  pipeline->add_flag("--single-thread", single_thread, "Bit-exact single-threaded mode");
  pipeline->add_flag("--resume", resume, "Reuse finished stages");

  auto* report = app.add_subcommand("report", "Print the report of a finished run");
  report->add_option("--run", run_dir, "Run directory")->required();
  report->add_option("--format", format, "csv or table")->check(CLI::IsMember({"csv", "table"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  if (single_thread) set_num_threads(1);

  try {
    if (*gen) {
      const auto cfg = config_from(config);
      synth::save_bundle(synth::generate(cfg.gen), out);
      std::cout << "wrote bundle to " << out << "\n";
    } else if (*train) {
      const auto cfg = config_from(config);
      const auto bundle = synth::load_bundle(data);
      const auto items = mining::training_items(bundle, {}, cfg.train.label_smooth_eps);
      for (std::size_t i = 0; i < cfg.model_roles.size(); ++i) {
        const auto t = harness::role_train_config(cfg, cfg.model_roles[i]);
        const auto model = nn::train(nn::init(bundle.num_inclass_classes, t.seed), items, t).model;
        const auto dir = fs::path(out) / role_name(cfg.model_roles[i], i);
        nn::save_checkpoint(model, dir);
        std::printf("%s val_accuracy %.4f -> %s\n", role_name(cfg.model_roles[i], i).c_str(),
                    mining::accuracy(model, bundle.validation), dir.string().c_str());
      }
    } else if (*mine) {
      const auto cfg = config_from(config);
      const auto bundle = synth::load_bundle(data);
      std::vector<nn::Classifier> loaded;
      for (const auto& m : models) loaded.push_back(nn::load_checkpoint(m));
      const auto set = mining::mine_round(loaded, bundle.inclass_unlabeled, cfg.mining.thresholds, 1);
      mining::save_pseudo_labels(set, out);
      std::printf("mined %zu pseudo-labels -> %s\n", set.size(), out.c_str());
    } else if (*cluster) {
      const auto cfg = config_from(config);
      const auto bundle = synth::load_bundle(data);
      const auto r = mining::cluster_pretrain(bundle.outclass_unlabeled, cfg.cluster.k, cfg.cluster.pretrain,
                                              cfg.cluster.max_iters);
      nn::save_checkpoint(r.model, fs::path(out) / "pretrain");
      std::string csv = "id,cluster\n";
      for (std::size_t i = 0; i < r.clusters.assignments.size(); ++i)
        csv += bundle.outclass_unlabeled[i].id + "," + std::to_string(r.clusters.assignments[i]) + "\n";
      write_file(fs::path(out) / "assignments.csv", csv);
      std::printf("K=%d inertia %.6g holdout_accuracy %.4f\n", cfg.cluster.k, r.clusters.model.inertia,
                  r.holdout_accuracy);
    } else if (*fuse) {
      const auto w = parse_weights(weights);
      std::vector<std::vector<std::vector<double>>> all;
      for (const auto& f : logits) all.push_back(logit_rows(read_fmt1(f), f));
      if (w.size() != all.size()) throw ValidationError("fuse: need one weight per logits file");
      for (const auto& a : all)
        if (a.size() != all.front().size()) throw ValidationError("fuse: logits files differ in row count");
      Tensor t;
      t.dims = {static_cast<std::uint32_t>(all.front().size()),
                static_cast<std::uint32_t>(all.front().empty() ? 0 : all.front().front().size())};
      for (std::size_t r = 0; r < all.front().size(); ++r) {
        std::vector<std::vector<double>> rows;
        for (const auto& a : all) rows.push_back(a[r]);
        for (double v : fusion::fuse(rows, w)) t.data.push_back(static_cast<float>(v));
      }
      write_fmt1(out, t);
    } else if (*eval) {
      const auto p = class_ids(read_fmt1(pred), pred);
      const auto t = class_ids(read_fmt1(truth), truth);
      std::printf("top1_error %.1f\n", harness::top1_error(p, t));
    } else if (*pipeline) {
      const auto cfg = config_from(config);
      harness::PipelineOptions opts;
      opts.resume = resume;
      opts.log = [](const std::string& msg) { std::cerr << msg << "\n"; };
      const auto rep = harness::run_pipeline(cfg, opts);
      std::cout << harness::format_report(rep, harness::ReportFormat::Table);
    } else if (*report) {
      const auto path = fs::path(run_dir) / "report.json";
      nlohmann::ordered_json j;
      try {
        j = nlohmann::ordered_json::parse(read_file(path));
      } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(path.string() + ": " + e.what());
      }
      std::cout << harness::format_report(harness::report_from_json(j), harness::report_format_from_string(format));
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
