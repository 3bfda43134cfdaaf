#pragma once

#include <string>

#include "json.hpp"
#include "kalmeta/data.hpp"
#include "kalmeta/fileio.hpp"

namespace kalmeta {

// A saved dataset is two files: <prefix>.txt with one record per line
// (scene_id agent_id frame x y) and <prefix>.manifest.json carrying dt,
// units, provenance, and a hash of the records file. Velocities are not
// stored; they are backward differences of the positions, so the loader
// reconstructs them exactly.
inline void save_dataset(const std::string& prefix, const TrajectoryDataset& ds,
                         const std::string& config_hash = "") {
  ds.validate();
  std::string records = "# scene_id agent_id frame x y\n";
  for (const AgentTrack& tr : ds.tracks)
    for (std::size_t k = 0; k < tr.states.size(); ++k)
      records += std::to_string(tr.scene_id) + " " +
                 std::to_string(tr.agent_id) + " " +
                 std::to_string(tr.frame_at(k)) + " " +
                 exact_double(tr.states[k].position.x()) + " " +
                 exact_double(tr.states[k].position.y()) + "\n";
  atomic_write_text(prefix + ".txt", records);

  nlohmann::json m;
  m["format"] = "kalmeta-dataset-v1";
  m["dt"] = ds.dt;
  m["units"] = "meters";
  m["provenance"] = ds.provenance;
  m["records_fnv1a"] = fnv1a64_hex(records);
  if (!config_hash.empty()) m["config_hash"] = config_hash;
  atomic_write_text(prefix + ".manifest.json", m.dump(2) + "\n");
}

inline TrajectoryDataset load_dataset(const std::string& prefix) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_text_file(prefix + ".manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_dataset: bad manifest for " + prefix + ": " + e.what());
  }
  if (m.value("format", "") != "kalmeta-dataset-v1")
    throw IoError("load_dataset: unrecognized manifest format for " + prefix);

  const std::string records = read_text_file(prefix + ".txt");
  const std::string want = m.value("records_fnv1a", "");
  if (!want.empty() && want != fnv1a64_hex(records))
    throw IoError("load_dataset: records hash mismatch for " + prefix);

  TrajectoryDataset ds = ingest(prefix + ".txt", m.at("dt").get<double>());
  ds.provenance = m.value("provenance", ds.provenance);
  return ds;
}

}  // namespace kalmeta
