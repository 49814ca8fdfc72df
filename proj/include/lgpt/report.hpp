#pragma once

// Ablation tables: grouping of per-seed runs into arms, mean/std of test
// accuracy, relative delta against the mean-pooling/no-fusion arm, and
// CSV / markdown rendering. Rendering is a pure function of its inputs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "lgpt/trainer.hpp"

namespace lgpt {

/// Runs sharing a config (seed aside).
struct ArmSummary {
  RunConfig config;  // seed zeroed
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;  // successful runs, seed order of input
  std::vector<std::string> errors;
  double mean = 0.0;
  double stddev = 0.0;               // sample std; 0 with a single run
  std::optional<double> delta_pct;   // (mean / baseline - 1) * 100

  std::size_t runs() const { return accuracies.size(); }
  bool is_baseline() const { return config.readout == Readout::mean && config.fusion == Fusion::none; }
};

struct ReportTable {
  TaskKind task = TaskKind::attribute_lookup;
  std::vector<ArmSummary> arms;
};

enum class ReportFormat { md, csv };

inline ReportFormat report_format_from_string(std::string_view s) {
  if (s == "md" || s == "markdown") return ReportFormat::md;
  if (s == "csv") return ReportFormat::csv;
  throw ConfigError("unknown report format '" + std::string(s) + "' (expected md|csv)");
}

namespace detail {

inline RunConfig arm_key(RunConfig c) {
  c = c.normalized();
  c.seed = 0;
  return c;
}

// readout mean before lgpt; fusion none, late, early, early_late; n ascending;
// remaining settings by their JSON echo.
inline auto arm_order(const RunConfig& c) {
  return std::make_tuple(static_cast<int>(c.readout), static_cast<int>(c.fusion), c.n_tokens, to_json(c).dump());
}

inline std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string signed_pct(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[64];
  // -0.00 and +0.00 print the same
  const double x = std::abs(*v) < 0.005 ? 0.0 : *v;
  std::snprintf(buf, sizeof buf, "%+.2f%%", x);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

/// Groups runs into arms. Every run must share one task (ValidationError
/// otherwise). Failed runs count toward the arm but not its statistics.
inline ReportTable summarize(const std::vector<ArmResult>& results) {
  if (results.empty()) throw ValidationError("report: no runs");
  ReportTable table;
  table.task = results.front().config.task;
  for (const auto& r : results) {
    if (r.config.task != table.task) {
      throw ValidationError("report: mixed tasks (" + to_string(table.task) + " and " + to_string(r.config.task) +
                            ")");
    }
    const RunConfig key = detail::arm_key(r.config);
    auto it = std::find_if(table.arms.begin(), table.arms.end(), [&](const ArmSummary& a) { return a.config == key; });
    if (it == table.arms.end()) {
      ArmSummary fresh;
      fresh.config = key;
      table.arms.push_back(std::move(fresh));
      it = std::prev(table.arms.end());
    }
    it->seeds.push_back(r.config.seed);
    if (r.report && r.report->test_accuracy) {
      it->accuracies.push_back(*r.report->test_accuracy);
    } else {
      it->errors.push_back(r.error.empty() ? "no test accuracy" : r.error);
    }
  }
  std::stable_sort(table.arms.begin(), table.arms.end(), [](const ArmSummary& a, const ArmSummary& b) {
    return detail::arm_order(a.config) < detail::arm_order(b.config);
  });
  for (auto& a : table.arms) {
    const auto n = a.accuracies.size();
    if (n == 0) continue;
    double sum = 0.0;
    for (double x : a.accuracies) sum += x;
    a.mean = sum / static_cast<double>(n);
    if (n > 1) {
      double ss = 0.0;
      for (double x : a.accuracies) ss += (x - a.mean) * (x - a.mean);
      a.stddev = std::sqrt(ss / static_cast<double>(n - 1));
    }
  }
  // first baseline arm in canonical order is the reference
  const auto base = std::find_if(table.arms.begin(), table.arms.end(),
                                 [](const ArmSummary& a) { return a.is_baseline() && a.runs() > 0; });
  if (base != table.arms.end() && base->mean > 0.0) {
    const double b = base->mean;
    for (auto& a : table.arms) {
      if (a.runs() > 0) a.delta_pct = (a.mean / b - 1.0) * 100.0;
    }
  } else if (base != table.arms.end()) {
    base->delta_pct = 0.0;  // zero baseline: relative change undefined elsewhere
  }
  return table;
}

inline ReportTable summarize(const std::vector<RunReport>& reports) {
  std::vector<ArmResult> results;
  for (const auto& r : reports) results.push_back(ArmResult{r.config, r, {}});
  return summarize(results);
}

/// Accuracies are printed as percentages with two decimals.
inline std::string render_csv(const ReportTable& t) {
  std::string out = "task,arm,readout,fusion,n_tokens,seeds,runs,failed,mean_test_acc,std_test_acc,delta_vs_mean_none\n";
  for (const auto& a : t.arms) {
    std::string seeds;
    for (auto s : a.seeds) seeds += (seeds.empty() ? "" : ";") + std::to_string(s);
    out += to_string(t.task) + ",";
    out += detail::csv_field(a.config.arm_label()) + ",";
    out += std::string(to_string(a.config.readout)) + "," + to_string(a.config.fusion) + ",";
    out += std::to_string(a.config.n_tokens) + "," + seeds + ",";
    out += std::to_string(a.runs()) + "," + std::to_string(a.errors.size()) + ",";
    if (a.runs() > 0) {
      out += detail::fixed2(100.0 * a.mean) + "," + detail::fixed2(100.0 * a.stddev) + ",";
    } else {
      out += "n/a,n/a,";
    }
    out += detail::signed_pct(a.delta_pct) + "\n";
  }
  return out;
}

inline std::string render_markdown(const ReportTable& t) {
  std::string out = "Task: " + to_string(t.task) + "\n\n";
  out += "| Readout | Fusion | # of Prompt Tokens | Seeds | Test accuracy (%) | Δ mean/none |\n";
  out += "|---|---|---:|---:|---:|---:|\n";
  for (const auto& a : t.arms) {
    std::string acc = a.runs() > 0 ? detail::fixed2(100.0 * a.mean) + " ± " + detail::fixed2(100.0 * a.stddev) : "n/a";
    if (!a.errors.empty()) acc += " (" + std::to_string(a.errors.size()) + " failed)";
    out += "| " + std::string(to_string(a.config.readout)) + " | " + to_string(a.config.fusion) + " | " +
           std::to_string(a.config.n_tokens) + " | " + std::to_string(a.seeds.size()) + " | " + acc + " | " +
           detail::signed_pct(a.delta_pct) + " |\n";
  }
  return out;
}

inline std::string render(const ReportTable& t, ReportFormat f) {
  return f == ReportFormat::md ? render_markdown(t) : render_csv(t);
}

// ---------------------------------------------------------------------------
// Ablation result files: {"arms": [{"config", "report" | "error"}]}.

inline nlohmann::json ablation_to_json(const std::vector<ArmResult>& results) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json a{{"config", to_json(r.config)}};
    if (r.report) a["report"] = to_json(*r.report);
    if (!r.error.empty()) a["error"] = r.error;
    arms.push_back(std::move(a));
  }
  return {{"arms", arms}};
}

/// Accepts an ablation file or a single run report.
inline std::vector<ArmResult> results_from_json(const nlohmann::json& j) {
  std::vector<ArmResult> out;
  try {
    if (j.contains("arms")) {
      for (const auto& a : j.at("arms")) {
        ArmResult r;
        r.config = run_config_from_json(a.at("config"));
        if (a.contains("report")) r.report = run_report_from_json(a["report"]);
        r.error = a.value("error", std::string());
        out.push_back(std::move(r));
      }
    } else {
      RunReport rep = run_report_from_json(j);
      out.push_back(ArmResult{rep.config, rep, {}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("report input: ") + e.what());
  } catch (const ConfigError& e) {
    throw ValidationError(std::string("report input: ") + e.what());
  }
  return out;
}

}  // namespace lgpt
