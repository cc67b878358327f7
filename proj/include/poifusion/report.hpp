#pragma once

// Run reports: SVG line charts of the training loss, per-iteration center
// error, and corruption sweeps, plus a summary JSON. Output depends only on
// the files in the run directory.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poifusion/dataset.hpp"
#include "poifusion/train.hpp"

namespace poifusion {

inline constexpr const char* kSummarySchema = "poifusion.summary/1";
inline constexpr const char* kEvalReportName = "eval_report.json";

struct Series {
  std::string name;
  std::vector<double> x, y;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

/// Self-contained SVG line chart with axes, min/max tick labels and a legend.
inline std::string svg_line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                  const std::vector<Series>& series) {
  using detail::fmt;
  constexpr double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const Series& s : series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
    }
  if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
     << detail::xml_escape(title) << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  auto text = [&](double x, double y, const std::string& s, const char* anchor, const char* extra = "") {
    os << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" text-anchor=\"" << anchor
       << "\" font-family=\"sans-serif\" font-size=\"11\"" << extra << ">" << detail::xml_escape(s) << "</text>\n";
  };
  text(L, H - B + 16, fmt(x0), "start");
  text(W - R, H - B + 16, fmt(x1), "end");
  text(L - 6, H - B, fmt(y0), "end");
  text(L - 6, T + 8, fmt(y1), "end");
  text((L + W - R) / 2, H - 12, xlabel, "middle");
  os << "<text transform=\"translate(16," << fmt((T + H - B) / 2)
     << ") rotate(-90)\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
     << detail::xml_escape(ylabel) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& s = series[k];
    const char* color = colors[k % std::size(colors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) os << fmt(px(s.x[i])) << ',' << fmt(py(s.y[i])) << ' ';
    os << "\"/>\n";
    if (s.x.size() <= 20)
      for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
        if (std::isfinite(s.x[i]) && std::isfinite(s.y[i]))
          os << "<circle cx=\"" << fmt(px(s.x[i])) << "\" cy=\"" << fmt(py(s.y[i])) << "\" r=\"2.5\" fill=\"" << color
             << "\"/>\n";
    const double ly = T + 4 + 16.0 * static_cast<double>(k);
    os << "<rect x=\"" << W - R - 150 << "\" y=\"" << fmt(ly) << "\" width=\"10\" height=\"10\" fill=\"" << color
       << "\"/>\n";
    text(W - R - 135, ly + 9, s.name, "start");
  }
  os << "</svg>\n";
  return os.str();
}

/// Parsed train_log.csv.
inline std::vector<StepRecord> read_train_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "step,epoch,total,cls,reg,lr") throw FormatError("unexpected train log header in " + path.string());
  std::vector<StepRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 6) throw FormatError("malformed train log row: " + line);
    try {
      out.push_back({std::stol(f[0]), std::stoi(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]),
                     std::stod(f[5])});
    } catch (const std::exception&) {
      throw FormatError("malformed train log row: " + line);
    }
  }
  return out;
}

struct ReportFiles {
  std::vector<std::string> written;
  nlohmann::json summary;
};

/// Reads train_log.csv and/or eval_report.json from `run_dir`; writes SVGs
/// and summary.json next to them.
inline ReportFiles write_report(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  ReportFiles rf;
  nlohmann::json summary = {{"schema", kSummarySchema}};
  const fs::path log_path = run_dir / kTrainLogName, eval_path = run_dir / kEvalReportName;
  const bool have_log = fs::exists(log_path), have_eval = fs::exists(eval_path);
  if (!have_log && !have_eval) throw FormatError("no " + std::string(kTrainLogName) + " or " + kEvalReportName +
                                                 " in " + run_dir.string());
  auto emit = [&](const std::string& name, const std::string& svg) {
    write_file(run_dir / name, svg);
    rf.written.push_back(name);
  };
  if (have_log) {
    const auto log = read_train_log(log_path);
    Series total{"total", {}, {}}, cls{"classification", {}, {}}, reg{"regression", {}, {}};
    double best = INFINITY;
    for (const StepRecord& r : log) {
      total.x.push_back(static_cast<double>(r.step));
      total.y.push_back(r.total);
      cls.x.push_back(static_cast<double>(r.step));
      cls.y.push_back(r.cls);
      reg.x.push_back(static_cast<double>(r.step));
      reg.y.push_back(r.reg);
      best = std::min(best, r.total);
    }
    emit("loss.svg", svg_line_chart("Training loss", "step", "loss", {total, cls, reg}));
    summary["train"] = {{"steps", log.size()},
                        {"epochs", log.empty() ? 0 : log.back().epoch + 1},
                        {"final_loss", log.empty() ? nlohmann::json() : nlohmann::json(log.back().total)},
                        {"best_step_loss", log.empty() ? nlohmann::json() : nlohmann::json(best)}};
  }
  if (have_eval) {
    nlohmann::json rep;
    try {
      rep = nlohmann::json::parse(read_file(eval_path));
      const auto& clean = rep.at("clean");
      Series ce{"clean", {}, {}};
      const auto errs = clean.at("center_error_per_iteration").get<std::vector<double>>();
      for (std::size_t i = 0; i < errs.size(); ++i) {
        ce.x.push_back(static_cast<double>(i + 1));
        ce.y.push_back(errs[i]);
      }
      emit("center_error.svg", svg_line_chart("Mean center error per decoder iteration", "iteration", "meters", {ce}));
      nlohmann::json rows = nlohmann::json::array();
      Series sweep{"mAP", {}, {}};
      for (const auto& row : rep.at("corruptions")) {
        const std::string label = row.at("label").get<std::string>();
        rows.push_back({{"label", label}, {"map", row.at("map")}, {"delta_map", row.at("delta_map")}});
        if (label.rfind("calib:", 0) == 0) {
          sweep.x.push_back(std::stod(label.substr(6)));
          sweep.y.push_back(row.at("map").get<double>());
        }
      }
      if (!sweep.x.empty())
        emit("corruption.svg", svg_line_chart("mAP under calibration offsets", "max offset (m)", "mAP", {sweep}));
      summary["eval"] = {{"map", clean.at("map")},
                         {"center_error_per_iteration", errs},
                         {"config_hash", rep.at("config_hash")},
                         {"num_scenes", rep.at("num_scenes")},
                         {"corruptions", rows}};
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed " + eval_path.string() + ": " + e.what());
    }
  }
  summary["plots"] = rf.written;
  write_file(run_dir / "summary.json", summary.dump(1) + "\n");
  rf.written.push_back("summary.json");
  rf.summary = summary;
  return rf;
}

}  // namespace poifusion
