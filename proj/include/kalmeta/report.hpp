#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "kalmeta/adapt.hpp"
#include "kalmeta/experiment.hpp"
#include "kalmeta/fileio.hpp"
#include "kalmeta/metrics.hpp"

namespace kalmeta {

inline constexpr const char* kMetricsFormat = "kalmeta-metrics-v1";

inline nlohmann::json metric_json(const MetricValue& m) {
  return {{"value", m.value}, {"ci_lo", m.ci.lo}, {"ci_hi", m.ci.hi}};
}

inline nlohmann::json metrics_json(const MetricsReport& r,
                                   const std::string& config_hash = "") {
  nlohmann::json j;
  j["format"] = kMetricsFormat;
  j["config_hash"] = config_hash;
  j["agents"] = r.agents;
  j["ade"] = metric_json(r.ade);
  j["fde"] = metric_json(r.fde);
  j["min_ade_5"] = metric_json(r.min_ade_5);
  j["min_ade_10"] = metric_json(r.min_ade_10);
  j["nll"] = metric_json(r.nll);
  j["ece"] = r.ece;
  j["calibration_points"] = r.calibration_points;
  nlohmann::json curve = nlohmann::json::array();
  for (const CalibrationPoint& p : r.curve)
    curve.push_back({{"level", p.level}, {"coverage", p.coverage}});
  j["calibration"] = std::move(curve);
  return j;
}

// Calibration curve as CSV, one row per level. The config hash rides in a
// comment header so the file stays a plain two-column table.
inline std::string calibration_csv(const MetricsReport& r,
                                   const std::string& config_hash = "") {
  std::string out = "# config_hash=" + config_hash + "\nlevel,coverage\n";
  for (const CalibrationPoint& p : r.curve)
    out += exact_double(p.level) + "," + exact_double(p.coverage) + "\n";
  return out;
}

// Offline metric-vs-updates curve as CSV, one row per update budget.
inline std::string curve_csv(const std::vector<CurvePoint>& curve,
                             const std::string& config_hash = "") {
  std::string out = "# config_hash=" + config_hash +
                    "\nupdates,ade,ade_lo,ade_hi,fde,fde_lo,fde_hi,nll,nll_lo,"
                    "nll_hi,ece,agents\n";
  for (const CurvePoint& cp : curve) {
    const MetricsReport& r = cp.report;
    out += std::to_string(cp.updates) + "," + exact_double(r.ade.value) + "," +
           exact_double(r.ade.ci.lo) + "," + exact_double(r.ade.ci.hi) + "," +
           exact_double(r.fde.value) + "," + exact_double(r.fde.ci.lo) + "," +
           exact_double(r.fde.ci.hi) + "," + exact_double(r.nll.value) + "," +
           exact_double(r.nll.ci.lo) + "," + exact_double(r.nll.ci.hi) + "," +
           exact_double(r.ece) + "," + std::to_string(r.agents) + "\n";
  }
  return out;
}

// Online metric-vs-updates curve as CSV.
inline std::string online_csv(const std::vector<OnlinePoint>& curve,
                              const std::string& config_hash = "") {
  std::string out = "# config_hash=" + config_hash + "\nupdates,ade,fde,nll,agents\n";
  for (const OnlinePoint& p : curve)
    out += std::to_string(p.updates) + "," + exact_double(p.ade) + "," +
           exact_double(p.fde) + "," + exact_double(p.nll) + "," +
           std::to_string(p.agents) + "\n";
  return out;
}

// Adaptation trace as JSON lines, one structured record per update.
inline std::string trace_jsonl(const std::vector<UpdateTrace>& trace,
                               const std::string& config_hash = "") {
  std::string out;
  nlohmann::json head = {{"config_hash", config_hash},
                         {"records", trace.size()}};
  out += head.dump() + "\n";
  for (const UpdateTrace& t : trace) {
    nlohmann::json j = {{"step", t.step},
                        {"innovation_norm", t.innovation_norm},
                        {"nll_before", t.nll_before},
                        {"nll_after", t.nll_after},
                        {"exact", t.exact}};
    out += j.dump() + "\n";
  }
  return out;
}

// Per-epoch training log as JSON lines.
inline std::string training_log_jsonl(const std::vector<EpochRecord>& log,
                                      const std::string& config_hash = "") {
  std::string out;
  nlohmann::json head = {{"config_hash", config_hash}, {"records", log.size()}};
  out += head.dump() + "\n";
  for (const EpochRecord& e : log) {
    nlohmann::json j = {{"epoch", e.epoch},
                        {"train_loss", e.train_loss},
                        {"val_loss", e.val_loss},
                        {"grad_norm", e.grad_norm}};
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace kalmeta
