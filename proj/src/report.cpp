#include <algorithm>
#include <charconv>
#include <cstdio>
#include <sstream>

#include "finemine/error.hpp"
#include "finemine/harness.hpp"
#include "finemine/tensor_io.hpp"

namespace finemine::harness {

namespace {

constexpr std::string_view kModelHeader = "Model,Training resolution,Test resolution,Error(%)";
constexpr std::string_view kMiningHeader = "Round,Pseudo count,Precision(%),Validation accuracy(%)";
constexpr std::string_view kFusedMarker = "[fused]";
constexpr std::string_view kMiningMarker = "[mining]";

// Shortest representation that parses back to the same double.
std::string exact(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string one_decimal(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

template <class T>
T parse_field(std::string_view text, std::size_t line) {
  T v{};
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size())
    throw ValidationError("report CSV line " + std::to_string(line) + ": bad number '" + std::string(text) + "'");
  return v;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) return out;
    start = pos + 1;
  }
}

void check_name(const std::string& name) {
  if (name.empty() || name.find_first_of(",\n\r") != std::string::npos || name.front() == '[')
    throw ValidationError("report: model name '" + name + "' cannot be written as a CSV field");
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

void table_rows(std::ostringstream& out, const std::vector<ModelRow>& rows, std::size_t name_w) {
  for (const auto& r : rows)
    out << pad(r.name, name_w) << " | " << pad(std::to_string(r.train_resolution), 19) << " | "
        << pad(std::to_string(r.test_resolution), 15) << " | " << one_decimal(r.top1_error) << "\n";
}

json_io::json rows_to_json(const std::vector<ModelRow>& rows) {
  auto a = json_io::json::array();
  for (const auto& r : rows)
    a.push_back({{"name", r.name},
                 {"train_resolution", r.train_resolution},
                 {"test_resolution", r.test_resolution},
                 {"top1_error", r.top1_error}});
  return a;
}

std::vector<ModelRow> rows_from_json(const json_io::json& j, const std::string& path) {
  if (!j.is_array()) throw ValidationError(path + ": expected an array");
  std::vector<ModelRow> rows;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    json_io::reject_unknown_keys(j[i], {"name", "train_resolution", "test_resolution", "top1_error"}, p);
    rows.push_back({json_io::read_string(j[i], "name", p, ""),
                    static_cast<int>(json_io::read_int(j[i], "train_resolution", p, 0)),
                    static_cast<int>(json_io::read_int(j[i], "test_resolution", p, 0)),
                    json_io::read_real(j[i], "top1_error", p, 0.0)});
  }
  return rows;
}

}  // namespace

double top1_error(std::span<const int> predictions, std::span<const int> truths) {
  if (predictions.size() != truths.size()) throw ValidationError("top1_error: predictions and truths differ in length");
  if (predictions.empty()) throw ValidationError("top1_error: no predictions");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == truths[i] ? 1 : 0;
  return 100.0 * (1.0 - static_cast<double>(hits) / static_cast<double>(predictions.size()));
}

GridResult grid_search(std::span<const double> lr_grid, std::span<const int> batch_grid, const Evaluator& evaluate,
                       const nn::TrainConfig& base_cfg) {
  if (lr_grid.empty() || batch_grid.empty()) throw ValidationError("grid_search: grids must be non-empty");
  GridResult out;
  for (double lr : lr_grid)
    for (int batch : batch_grid) {
      nn::TrainConfig cfg = base_cfg;
      cfg.base_lr = lr;
      cfg.batch_size = batch;
      out.table.push_back({lr, batch, evaluate(cfg)});
    }
  const GridCell* best = nullptr;
  for (const auto& cell : out.table) {
    const bool better = !best || cell.val_accuracy > best->val_accuracy ||
                        (cell.val_accuracy == best->val_accuracy &&
                         (cell.lr < best->lr || (cell.lr == best->lr && cell.batch_size < best->batch_size)));
    if (better) best = &cell;
  }
  out.best_lr = best->lr;
  out.best_batch = best->batch_size;
  return out;
}

GridResult grid_search(std::span<const double> lr_grid, std::span<const int> batch_grid,
                       const synth::DatasetBundle& bundle, const nn::TrainConfig& base_cfg) {
  const auto items = mining::training_items(bundle, {}, base_cfg.label_smooth_eps);
  return grid_search(
      lr_grid, batch_grid,
      [&](const nn::TrainConfig& cfg) {
        const auto model = nn::train(nn::init(bundle.num_inclass_classes, cfg.seed), items, cfg).model;
        return mining::accuracy(model, bundle.validation);
      },
      base_cfg);
}

ReportFormat report_format_from_string(std::string_view name) {
  if (name == "table") return ReportFormat::Table;
  if (name == "csv") return ReportFormat::Csv;
  throw ValidationError("unknown report format '" + std::string(name) + "' (expected csv or table)");
}

std::string format_report(const MetricsReport& report, ReportFormat format) {
  std::ostringstream out;
  if (format == ReportFormat::Csv) {
    out << kModelHeader << "\n";
    auto rows = [&](const std::vector<ModelRow>& v) {
      for (const auto& r : v) {
        check_name(r.name);
        out << r.name << "," << r.train_resolution << "," << r.test_resolution << "," << exact(r.top1_error) << "\n";
      }
    };
    rows(report.models);
    if (!report.fused.empty()) {
      out << kFusedMarker << "\n";
      rows(report.fused);
    }
    if (!report.mining.empty()) {
      out << kMiningMarker << "\n" << kMiningHeader << "\n";
      for (const auto& m : report.mining)
        out << m.round << "," << m.pseudo_count << "," << (m.precision ? exact(*m.precision) : "") << ","
            << exact(m.val_accuracy) << "\n";
    }
    return out.str();
  }

  std::size_t name_w = 5;
  for (const auto* v : {&report.models, &report.fused})
    for (const auto& r : *v) name_w = std::max(name_w, r.name.size());
  const std::string rule = std::string(name_w + 1, '-') + "+" + std::string(21, '-') + "+" + std::string(17, '-') +
                           "+" + std::string(10, '-');
  out << pad("Model", name_w) << " | Training resolution | Test resolution | Error(%)\n" << rule << "\n";
  table_rows(out, report.models, name_w);
  if (!report.fused.empty()) {
    out << rule << "\n";
    table_rows(out, report.fused, name_w);
  }
  if (!report.mining.empty()) {
    out << "\nRound | Pseudo count | Precision(%) | Validation accuracy(%)\n"
        << "------+--------------+--------------+-----------------------\n";
    for (const auto& m : report.mining)
      out << pad(std::to_string(m.round), 5) << " | " << pad(std::to_string(m.pseudo_count), 12) << " | "
          << pad(m.precision ? one_decimal(*m.precision) : "-", 12) << " | " << one_decimal(m.val_accuracy) << "\n";
  }
  return out.str();
}

void emit_report(const MetricsReport& report, ReportFormat format, const std::filesystem::path& path) {
  write_file(path, format_report(report, format));
}

MetricsReport parse_report_csv(std::string_view text) {
  MetricsReport r;
  enum { Models, Fused, MiningHead, Mining } section = Models;
  std::size_t line_no = 0;
  bool saw_header = false;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!saw_header) {
      if (line != kModelHeader) throw ValidationError("report CSV: missing header");
      saw_header = true;
      continue;
    }
    if (line.empty()) continue;
    if (line == kFusedMarker) {
      section = Fused;
      continue;
    }
    if (line == kMiningMarker) {
      section = MiningHead;
      continue;
    }
    if (section == MiningHead) {
      if (line != kMiningHeader) throw ValidationError("report CSV: missing mining header");
      section = Mining;
      continue;
    }
    const auto f = split_commas(line);
    if (f.size() != 4)
      throw ValidationError("report CSV line " + std::to_string(line_no) + ": expected 4 fields");
    if (section == Mining) {
      MiningRow m;
      m.round = parse_field<int>(f[0], line_no);
      m.pseudo_count = parse_field<std::size_t>(f[1], line_no);
      if (!f[2].empty()) m.precision = parse_field<double>(f[2], line_no);
      m.val_accuracy = parse_field<double>(f[3], line_no);
      r.mining.push_back(m);
    } else {
      ModelRow row{std::string(f[0]), parse_field<int>(f[1], line_no), parse_field<int>(f[2], line_no),
                   parse_field<double>(f[3], line_no)};
      (section == Models ? r.models : r.fused).push_back(std::move(row));
    }
  }
  if (!saw_header) throw ValidationError("report CSV: missing header");
  return r;
}

json_io::json to_json(const MetricsReport& report) {
  json_io::json j;
  j["models"] = rows_to_json(report.models);
  j["fused"] = rows_to_json(report.fused);
  j["mining"] = json_io::json::array();
  for (const auto& m : report.mining) {
    json_io::json row{{"round", m.round}, {"pseudo_count", m.pseudo_count}};
    row["precision"] = m.precision ? json_io::json(*m.precision) : json_io::json(nullptr);
    row["val_accuracy"] = m.val_accuracy;
    j["mining"].push_back(row);
  }
  j["metrics"] = json_io::json::object();
  for (const auto& [k, v] : report.metrics) j["metrics"][k] = v;
  return j;
}

MetricsReport report_from_json(const json_io::json& j) {
  json_io::reject_unknown_keys(j, {"models", "fused", "mining", "metrics"}, "report");
  MetricsReport r;
  if (j.contains("models")) r.models = rows_from_json(j["models"], "report.models");
  if (j.contains("fused")) r.fused = rows_from_json(j["fused"], "report.fused");
  if (j.contains("mining")) {
    if (!j["mining"].is_array()) throw ValidationError("report.mining: expected an array");
    for (std::size_t i = 0; i < j["mining"].size(); ++i) {
      const auto& m = j["mining"][i];
      const std::string p = "report.mining[" + std::to_string(i) + "]";
      json_io::reject_unknown_keys(m, {"round", "pseudo_count", "precision", "val_accuracy"}, p);
      MiningRow row;
      row.round = static_cast<int>(json_io::read_int(m, "round", p, 0));
      row.pseudo_count = static_cast<std::size_t>(json_io::read_int(m, "pseudo_count", p, 0));
      if (m.contains("precision") && !m["precision"].is_null()) row.precision = json_io::read_real(m, "precision", p, 0.0);
      row.val_accuracy = json_io::read_real(m, "val_accuracy", p, 0.0);
      r.mining.push_back(row);
    }
  }
  if (j.contains("metrics")) {
    const auto& m = j["metrics"];
    if (!m.is_object()) throw ValidationError("report.metrics: expected an object");
    for (const auto& [k, v] : m.items()) r.metrics[k] = json_io::read_real(m, k, "report.metrics", 0.0);
  }
  return r;
}

}  // namespace finemine::harness
