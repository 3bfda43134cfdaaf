#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "kalmeta/adapt.hpp"
#include "kalmeta/config.hpp"
#include "kalmeta/fileio.hpp"
#include "kalmeta/train.hpp"

namespace kalmeta {

inline constexpr const char* kCheckpointFormat = "kalmeta-checkpoint-v1";
inline constexpr const char* kBeliefFormat = "kalmeta-beliefs-v1";

namespace detail {

inline nlohmann::json mat_json(const Mat& m) {
  nlohmann::json data = nlohmann::json::array();
  for (long r = 0; r < m.rows(); ++r)
    for (long c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

inline Mat mat_from_json(const nlohmann::json& j, const std::string& where) {
  const long rows = j.at("rows").get<long>();
  const long cols = j.at("cols").get<long>();
  const auto& data = j.at("data");
  if (rows < 0 || cols < 0 ||
      static_cast<long>(data.size()) != rows * cols)
    throw IoError(where + ": shape does not match data length");
  Mat m(rows, cols);
  long k = 0;
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) m(r, c) = data[k++].get<double>();
  return m;
}

}  // namespace detail

struct Checkpoint {
  TrainState state;
  std::string config_hash;  // hash of the producing run's resolved config
};

// One JSON file holding the architecture, every parameter tensor, the
// optimizer moments, and the epoch counter, so a resumed run retraces the
// original bit for bit. Numbers serialize in shortest round-trip form; the
// write goes through a temp file and rename.
inline void save_checkpoint(const std::string& path, const TrainState& st,
                            const std::string& config_hash = "") {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["config_hash"] = config_hash;
  j["model"] = st.params.cfg;
  j["epochs_done"] = st.epochs_done;

  nlohmann::json params = nlohmann::json::array();
  for (std::size_t k = 0; k < st.params.layout.size(); ++k) {
    nlohmann::json p = detail::mat_json(st.params.values[k]);
    p["name"] = st.params.layout[k].name;
    p["group"] = st.params.layout[k].group;
    params.push_back(std::move(p));
  }
  j["params"] = std::move(params);

  nlohmann::json adam;
  adam["step"] = st.adam.step;
  nlohmann::json ms = nlohmann::json::array(), vs = nlohmann::json::array();
  for (const Mat& m : st.adam.m) ms.push_back(detail::mat_json(m));
  for (const Mat& v : st.adam.v) vs.push_back(detail::mat_json(v));
  adam["m"] = std::move(ms);
  adam["v"] = std::move(vs);
  j["adam"] = std::move(adam);

  atomic_write_text(path, j.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + path + ": " + e.what());
  }
  if (j.value("format", "") != std::string(kCheckpointFormat))
    throw IoError("checkpoint " + path + ": unrecognized format tag");

  Checkpoint ck;
  ck.config_hash = j.value("config_hash", "");
  ModelConfig cfg = j.at("model").get<ModelConfig>();

  // rebuild the parameter table from the architecture, then overwrite every
  // tensor from the file; names and shapes must line up exactly
  TrainState st = TrainState::init(cfg, RandomStream(0));
  const auto& params = j.at("params");
  if (params.size() != st.params.layout.size())
    throw IoError("checkpoint " + path + ": parameter count mismatch");
  for (std::size_t k = 0; k < st.params.layout.size(); ++k) {
    const auto& p = params[k];
    const std::string name = p.at("name").get<std::string>();
    if (name != st.params.layout[k].name)
      throw IoError("checkpoint " + path + ": parameter order mismatch at '" +
                    name + "'");
    Mat m = detail::mat_from_json(p, "checkpoint " + path + ": " + name);
    if (m.rows() != st.params.values[k].rows() ||
        m.cols() != st.params.values[k].cols())
      throw IoError("checkpoint " + path + ": shape mismatch for '" + name +
                    "'");
    st.params.values[k] = std::move(m);
  }

  st.epochs_done = j.at("epochs_done").get<int>();
  const auto& adam = j.at("adam");
  st.adam.step = adam.at("step").get<long>();
  const auto& ms = adam.at("m");
  const auto& vs = adam.at("v");
  if (ms.size() != st.params.values.size() ||
      vs.size() != st.params.values.size())
    throw IoError("checkpoint " + path + ": optimizer slot count mismatch");
  for (std::size_t k = 0; k < ms.size(); ++k) {
    st.adam.m[k] = detail::mat_from_json(ms[k], "checkpoint adam.m");
    st.adam.v[k] = detail::mat_from_json(vs[k], "checkpoint adam.v");
  }

  ck.state = std::move(st);
  return ck;
}

// Adapted beliefs travel in their own sidecar: one record per output
// dimension with the dimensionality, covariance mode, mean, and covariance
// (dense row-major or the diagonal, per mode).
inline void save_beliefs(const std::string& path,
                         const std::vector<LastLayerBelief>& beliefs,
                         const std::string& config_hash = "") {
  nlohmann::json j;
  j["format"] = kBeliefFormat;
  j["config_hash"] = config_hash;
  nlohmann::json arr = nlohmann::json::array();
  for (const LastLayerBelief& b : beliefs) {
    nlohmann::json r;
    r["p"] = b.dim();
    r["mode"] = b.mode == CovMode::Full ? "full" : "diagonal";
    r["step_index"] = b.step_index;
    nlohmann::json mean = nlohmann::json::array();
    for (long i = 0; i < b.mean.size(); ++i) mean.push_back(b.mean(i));
    r["mean"] = std::move(mean);
    nlohmann::json cov = nlohmann::json::array();
    if (b.mode == CovMode::Full) {
      for (long a = 0; a < b.cov.rows(); ++a)
        for (long c = 0; c < b.cov.cols(); ++c) cov.push_back(b.cov(a, c));
    } else {
      for (long i = 0; i < b.cov_diag.size(); ++i) cov.push_back(b.cov_diag(i));
    }
    r["cov"] = std::move(cov);
    arr.push_back(std::move(r));
  }
  j["beliefs"] = std::move(arr);
  atomic_write_text(path, j.dump(2) + "\n");
}

inline std::vector<LastLayerBelief> load_beliefs(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("beliefs " + path + ": " + e.what());
  }
  if (j.value("format", "") != std::string(kBeliefFormat))
    throw IoError("beliefs " + path + ": unrecognized format tag");

  std::vector<LastLayerBelief> out;
  for (const auto& r : j.at("beliefs")) {
    const long p = r.at("p").get<long>();
    const std::string mode = r.at("mode").get<std::string>();
    const auto& mean = r.at("mean");
    const auto& cov = r.at("cov");
    if (static_cast<long>(mean.size()) != p)
      throw IoError("beliefs " + path + ": mean length does not match p");
    Vec mu(p);
    for (long i = 0; i < p; ++i) mu(i) = mean[i].get<double>();
    LastLayerBelief b;
    if (mode == "full") {
      if (static_cast<long>(cov.size()) != p * p)
        throw IoError("beliefs " + path + ": covariance size mismatch");
      Mat c(p, p);
      long k = 0;
      for (long a = 0; a < p; ++a)
        for (long cc = 0; cc < p; ++cc) c(a, cc) = cov[k++].get<double>();
      b = LastLayerBelief::full(std::move(mu), std::move(c));
    } else if (mode == "diagonal") {
      if (static_cast<long>(cov.size()) != p)
        throw IoError("beliefs " + path + ": diagonal size mismatch");
      Vec d(p);
      for (long i = 0; i < p; ++i) d(i) = cov[i].get<double>();
      b = LastLayerBelief::diagonal(std::move(mu), std::move(d));
    } else {
      throw IoError("beliefs " + path + ": unknown covariance mode '" + mode +
                    "'");
    }
    b.step_index = r.value("step_index", 0);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace kalmeta
