#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kalmeta/common.hpp"
#include "kalmeta/random.hpp"
#include "kalmeta/seq_model.hpp"

namespace kalmeta {

// A synthetic environment. Agents walk toward sampled goals at a nominal
// speed, optionally curving (turn_bias) and repelling each other inside
// interaction_radius. speed_scale multiplies the whole velocity field, so in
// noise-free mode recorded speeds scale by exactly that factor.
struct DomainSpec {
  std::string name = "default";
  double dt = 0.4;
  int steps = 24;
  double speed_scale = 1.0;
  double nominal_speed = 1.4;
  double turn_bias = 0.0;  // rad/s of systematic curvature
  double interaction_radius = 2.0;
  double interaction_gain = 0.0;
  double goal_distance = 8.0;   // mean straight-line trip length
  double goal_spread = 2.0;     // radial spread of trip lengths
  double area = 6.0;            // half-width of the start box
  int min_agents = 1;
  int max_agents = 4;
  double accel_noise = 0.0;     // per-step velocity perturbation
  double position_noise = 0.0;  // recording jitter on positions
  std::uint64_t seed = 0;

  void check() const {
    require(dt > 0.0, "DomainSpec: dt must be positive");
    require(steps >= 2, "DomainSpec: need at least two frames");
    require(speed_scale >= 0.0 && nominal_speed >= 0.0,
            "DomainSpec: speeds must be nonnegative");
    require(interaction_radius >= 0.0 && interaction_gain >= 0.0,
            "DomainSpec: interaction scales must be nonnegative");
    require(goal_distance >= 0.0 && goal_spread >= 0.0 && area >= 0.0,
            "DomainSpec: geometry scales must be nonnegative");
    require(min_agents >= 1 && max_agents >= min_agents,
            "DomainSpec: bad agent count range");
    require(accel_noise >= 0.0 && position_noise >= 0.0,
            "DomainSpec: noise scales must be nonnegative");
  }
};

// One agent's uniformly spaced track. The k-th state sits at frame
// start_frame + k * frame_step, i.e. at time (start_frame + k * frame_step)
// * (dt / frame_step) seconds... frames are an integer grid; consecutive
// states are dt seconds apart by dataset invariant.
struct AgentTrack {
  long scene_id = 0;
  long agent_id = 0;
  long start_frame = 0;
  long frame_step = 1;
  std::vector<AgentState> states;
  bool single_frame = false;

  long frame_at(std::size_t k) const {
    return start_frame + static_cast<long>(k) * frame_step;
  }
  // Index of the state at an absolute frame, or -1 when absent.
  long index_of(long frame) const {
    if (frame < start_frame || frame_step <= 0) return -1;
    long d = frame - start_frame;
    if (d % frame_step != 0) return -1;
    long k = d / frame_step;
    return k < static_cast<long>(states.size()) ? k : -1;
  }
};

struct TrajectoryDataset {
  std::vector<AgentTrack> tracks;
  double dt = 0.4;
  std::string provenance;

  void validate() const {
    require(dt > 0.0, "TrajectoryDataset: dt must be positive");
    for (const AgentTrack& tr : tracks) {
      require(!tr.states.empty(), "TrajectoryDataset: empty track");
      require(tr.frame_step >= 1, "TrajectoryDataset: bad frame step");
      require(tr.single_frame == (tr.states.size() == 1),
              "TrajectoryDataset: single-frame flag out of sync");
      for (const AgentState& s : tr.states)
        require(std::isfinite(s.position.x()) && std::isfinite(s.position.y()) &&
                    std::isfinite(s.velocity.x()) && std::isfinite(s.velocity.y()),
                "TrajectoryDataset: non-finite state");
    }
  }
};

namespace detail {

inline Vec2 rotate(const Vec2& v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return Vec2(c * v.x() - s * v.y(), s * v.x() + c * v.y());
}

// Velocities from backward position differences; the first state copies the
// first difference. Singletons get zero velocity and the degenerate flag.
inline void finite_difference_velocities(AgentTrack& tr, double dt) {
  if (tr.states.size() < 2) {
    if (!tr.states.empty()) tr.states[0].velocity = Vec2::Zero();
    tr.single_frame = tr.states.size() == 1;
    return;
  }
  tr.single_frame = false;
  for (std::size_t k = tr.states.size(); k-- > 1;)
    tr.states[k].velocity =
        (tr.states[k].position - tr.states[k - 1].position) / dt;
  tr.states[0].velocity = tr.states[1].velocity;
}

}  // namespace detail

// Social-force-style rollout of one environment. Scene counts, starts, goals
// and noise all come from keyed substreams of rng, so any one agent's draws
// do not depend on how many others exist.
inline TrajectoryDataset generate(const DomainSpec& spec, int scenes,
                                  RandomStream rng) {
  spec.check();
  require(scenes >= 1, "generate: need at least one scene");
  TrajectoryDataset ds;
  ds.dt = spec.dt;
  ds.provenance = "synthetic:" + spec.name + ":seed=" + std::to_string(spec.seed);

  for (int sc = 0; sc < scenes; ++sc) {
    RandomStream scene_rng = rng.child(0x5C, static_cast<std::uint64_t>(sc));
    const int span = spec.max_agents - spec.min_agents + 1;
    const int n_agents = spec.min_agents + scene_rng.child(0x01).uniform_int(span);

    struct Sim {
      Vec2 pos, goal;
      std::vector<Vec2> path;
    };
    std::vector<Sim> sims(n_agents);
    for (int a = 0; a < n_agents; ++a) {
      RandomStream ar = scene_rng.child(0x0A, static_cast<std::uint64_t>(a));
      Sim& s = sims[a];
      s.pos = Vec2(ar.uniform(-spec.area, spec.area),
                   ar.uniform(-spec.area, spec.area));
      const double heading = ar.uniform(0.0, 2.0 * kPi);
      const double trip = std::max(
          0.0, spec.goal_distance + spec.goal_spread * (2.0 * ar.uniform() - 1.0));
      s.goal = s.pos + trip * Vec2(std::cos(heading), std::sin(heading));
      s.path.push_back(s.pos);
    }

    for (int step = 1; step < spec.steps; ++step) {
      const double elapsed = spec.dt * static_cast<double>(step - 1);
      std::vector<Vec2> vel(n_agents);
      for (int a = 0; a < n_agents; ++a) {
        const Sim& s = sims[a];
        Vec2 to_goal = s.goal - s.pos;
        Vec2 dir = to_goal.norm() > 1e-12 ? Vec2(to_goal / to_goal.norm())
                                          : Vec2(1.0, 0.0);
        Vec2 v = spec.nominal_speed *
                 detail::rotate(dir, spec.turn_bias * elapsed);
        for (int b = 0; b < n_agents; ++b) {
          if (b == a) continue;
          Vec2 away = s.pos - sims[b].pos;
          const double dist = away.norm();
          if (dist < spec.interaction_radius && dist > 1e-9)
            v += spec.interaction_gain * (1.0 - dist / spec.interaction_radius) *
                 (away / dist);
        }
        vel[a] = spec.speed_scale * v;
        if (spec.accel_noise > 0.0) {
          RandomStream nr = scene_rng.child(0x0E, static_cast<std::uint64_t>(a))
                                .child(static_cast<std::uint64_t>(step));
          vel[a] += spec.accel_noise * Vec2(nr.normal(), nr.normal());
        }
      }
      for (int a = 0; a < n_agents; ++a) {
        sims[a].pos += spec.dt * vel[a];
        sims[a].path.push_back(sims[a].pos);
      }
    }

    for (int a = 0; a < n_agents; ++a) {
      AgentTrack tr;
      tr.scene_id = sc;
      tr.agent_id = a;
      tr.start_frame = 0;
      tr.frame_step = 1;
      for (int k = 0; k < spec.steps; ++k) {
        AgentState st;
        st.position = sims[a].path[k];
        if (spec.position_noise > 0.0) {
          RandomStream jr = scene_rng.child(0x0F, static_cast<std::uint64_t>(a))
                                .child(static_cast<std::uint64_t>(k));
          st.position += spec.position_noise * Vec2(jr.normal(), jr.normal());
        }
        tr.states.push_back(st);
      }
      detail::finite_difference_velocities(tr, spec.dt);
      ds.tracks.push_back(std::move(tr));
    }
  }
  ds.validate();
  return ds;
}

inline TrajectoryDataset generate(const DomainSpec& spec, int scenes) {
  return generate(spec, scenes, RandomStream(spec.seed));
}

// Source/target pairs for the shift experiments. The target differs from the
// source in exactly one respect and draws fresh trajectories (offset seed).
struct TransferPreset {
  DomainSpec source;
  DomainSpec target;
};

inline TransferPreset transfer_preset(const std::string& name,
                                      std::uint64_t seed = 7) {
  DomainSpec base;
  base.seed = seed;
  base.min_agents = 2;
  base.max_agents = 4;
  base.interaction_gain = 0.3;
  base.accel_noise = 0.03;
  base.position_noise = 0.01;

  TransferPreset p;
  p.source = base;
  p.target = base;
  p.target.seed = seed + 1;
  if (name == "speed") {
    p.source.name = "walk";
    p.target.name = "walk-fast";
    p.target.speed_scale = 1.5;
  } else if (name == "turn") {
    p.source.name = "straight";
    p.target.name = "curved";
    p.target.turn_bias = 0.35;
  } else if (name == "frequency") {
    p.source.name = "slow-clock";
    p.source.dt = 0.5;
    p.target.name = "fast-clock";
    p.target.dt = 0.1;
    p.target.steps = 5 * base.steps;  // same wall-clock span per scene
  } else if (name == "interaction") {
    p.source.name = "loose";
    p.target.name = "crowded";
    p.target.interaction_gain = 1.2;
    p.target.interaction_radius = 3.0;
  } else {
    throw InvalidInput("transfer_preset: unknown preset '" + name + "'");
  }
  return p;
}

// Linear resampling of every track onto a new uniform grid. Velocities are
// rebuilt from the resampled positions. Singleton tracks pass through.
inline TrajectoryDataset resample(const TrajectoryDataset& ds, double target_dt) {
  require(target_dt > 0.0, "resample: target dt must be positive");
  ds.validate();
  TrajectoryDataset out;
  out.dt = target_dt;
  out.provenance = ds.provenance + ":resampled";

  for (const AgentTrack& tr : ds.tracks) {
    if (tr.single_frame) {
      out.tracks.push_back(tr);
      continue;
    }
    const double span = ds.dt * static_cast<double>(tr.states.size() - 1);
    require(target_dt <= span + 1e-12,
            "resample: target dt exceeds the span of agent " +
                std::to_string(tr.agent_id));
    AgentTrack nt;
    nt.scene_id = tr.scene_id;
    nt.agent_id = tr.agent_id;
    nt.start_frame = 0;
    nt.frame_step = 1;
    for (long m = 0;; ++m) {
      const double t = target_dt * static_cast<double>(m);
      if (t > span + 1e-9 * ds.dt) break;
      double u = t / ds.dt;
      long k = static_cast<long>(std::floor(u));
      double frac = u - static_cast<double>(k);
      if (k >= static_cast<long>(tr.states.size()) - 1) {
        k = static_cast<long>(tr.states.size()) - 2;
        frac = 1.0;
      }
      if (frac < 1e-9) frac = 0.0;  // snap to grid points
      if (frac > 1.0 - 1e-9) {
        k += 1;
        frac = 0.0;
      }
      AgentState st;
      st.position = frac == 0.0
                        ? tr.states[k].position
                        : Vec2((1.0 - frac) * tr.states[k].position +
                               frac * tr.states[k + 1].position);
      nt.states.push_back(st);
    }
    detail::finite_difference_velocities(nt, target_dt);
    out.tracks.push_back(std::move(nt));
  }
  out.validate();
  return out;
}

namespace detail {

inline std::vector<std::string> record_tokens(const std::string& line) {
  std::string s = line;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream is(s);
  std::vector<std::string> toks;
  std::string t;
  while (is >> t) toks.push_back(t);
  return toks;
}

inline bool parse_long(const std::string& s, long& out) {
  try {
    std::size_t used = 0;
    out = std::stol(s, &used);
    return used == s.size();
  } catch (...) {
    return false;
  }
}

inline bool parse_double(const std::string& s, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size() && std::isfinite(out);
  } catch (...) {
    return false;
  }
}

// Column index for a recognized header name, or -1.
inline int record_column(const std::string& name) {
  std::string n;
  for (char c : name) n += static_cast<char>(std::tolower(c));
  if (n == "scene_id" || n == "scene") return 0;
  if (n == "agent_id" || n == "agent" || n == "ped_id" || n == "id") return 1;
  if (n == "frame" || n == "frame_id" || n == "t") return 2;
  if (n == "x" || n == "pos_x") return 3;
  if (n == "y" || n == "pos_y") return 4;
  return -1;
}

}  // namespace detail

// Reads trajectory records from a text file. Accepted layouts:
//   frame agent_id x y             (4 columns, scene 0)
//   scene_id agent_id frame x y    (5 columns)
// separated by whitespace or commas, with an optional header line naming the
// columns. The caller supplies the time between consecutive records; frame
// numbers only fix ordering and co-presence, so frames 0,10,20 with dt=0.4
// are 0.4 s apart. Velocities come from backward position differences.
inline TrajectoryDataset ingest(const std::string& path, double dt) {
  require(dt > 0.0, "ingest: dt must be positive");
  std::ifstream in(path);
  if (!in) throw IoError("ingest: cannot open " + path);

  TrajectoryDataset ds;
  ds.dt = dt;
  ds.provenance = "file:" + path;

  // column order: scene, agent, frame, x, y; -1 means absent
  int col[5] = {-1, -1, -1, -1, -1};
  bool layout_known = false;

  struct Rec {
    long frame;
    Vec2 pos;
    long line;
  };
  std::map<std::pair<long, long>, std::vector<Rec>> groups;

  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::vector<std::string> toks = detail::record_tokens(line);
    if (toks.empty() || toks[0][0] == '#') continue;

    if (!layout_known) {
      double d;
      if (!detail::parse_double(toks[0], d)) {
        // header line: every token must name a known column, and agent,
        // frame, x, y must all be present
        for (std::size_t i = 0; i < toks.size(); ++i) {
          const int c = detail::record_column(toks[i]);
          if (c < 0)
            throw IoError(path + ":" + std::to_string(line_no) +
                          ": unknown column '" + toks[i] + "'");
          col[c] = static_cast<int>(i);
        }
        if (col[1] < 0 || col[2] < 0 || col[3] < 0 || col[4] < 0)
          throw IoError(path + ":" + std::to_string(line_no) +
                        ": header is missing a required column");
        layout_known = true;
        continue;
      }
      if (toks.size() == 4) {
        col[2] = 0; col[1] = 1; col[3] = 2; col[4] = 3;
      } else if (toks.size() == 5) {
        col[0] = 0; col[1] = 1; col[2] = 2; col[3] = 3; col[4] = 4;
      } else {
        throw IoError(path + ":" + std::to_string(line_no) +
                      ": expected 4 or 5 columns, got " +
                      std::to_string(toks.size()));
      }
      layout_known = true;
    }

    const std::size_t want =
        static_cast<std::size_t>(1 + *std::max_element(col, col + 5));
    if (toks.size() != want)
      throw IoError(path + ":" + std::to_string(line_no) + ": expected " +
                    std::to_string(want) + " columns, got " +
                    std::to_string(toks.size()));

    long scene = 0, agent = 0;
    Rec r{0, Vec2::Zero(), line_no};
    bool ok = (col[0] < 0 || detail::parse_long(toks[col[0]], scene)) &&
              detail::parse_long(toks[col[1]], agent) &&
              detail::parse_long(toks[col[2]], r.frame) &&
              detail::parse_double(toks[col[3]], r.pos.x()) &&
              detail::parse_double(toks[col[4]], r.pos.y());
    if (!ok)
      throw IoError(path + ":" + std::to_string(line_no) +
                    ": malformed record '" + line + "'");
    groups[{scene, agent}].push_back(r);
  }

  for (auto& [key, recs] : groups) {
    std::sort(recs.begin(), recs.end(),
              [](const Rec& a, const Rec& b) { return a.frame < b.frame; });
    const std::string who = "agent " + std::to_string(key.second) +
                            " in scene " + std::to_string(key.first);
    AgentTrack tr;
    tr.scene_id = key.first;
    tr.agent_id = key.second;
    tr.start_frame = recs.front().frame;
    if (recs.size() >= 2) {
      tr.frame_step = recs[1].frame - recs[0].frame;
      if (tr.frame_step <= 0)
        throw IoError("ingest: duplicate frame " +
                      std::to_string(recs[0].frame) + " for " + who);
      for (std::size_t k = 1; k < recs.size(); ++k) {
        const long delta = recs[k].frame - recs[k - 1].frame;
        if (delta == 0)
          throw IoError("ingest: duplicate frame " +
                        std::to_string(recs[k].frame) + " for " + who);
        if (delta != tr.frame_step)
          throw IoError("ingest: non-uniform frame spacing for " + who +
                        " at frame " + std::to_string(recs[k].frame));
      }
    }
    for (const Rec& r : recs) {
      AgentState st;
      st.position = r.pos;
      tr.states.push_back(st);
    }
    detail::finite_difference_velocities(tr, dt);
    ds.tracks.push_back(std::move(tr));
  }
  ds.validate();
  return ds;
}

// Sliding windows per agent with co-present neighbors attached. A full window
// conditions on history_len + 1 states (the current one plus history_len
// back); anchors with less history still emit from two states up, flagged
// short. Futures are always exactly horizon states, copied verbatim from the
// source track.
inline std::vector<SceneWindow> extract_windows(const TrajectoryDataset& ds,
                                                int history_len, int horizon) {
  require(history_len >= 0, "extract_windows: negative history");
  require(horizon >= 1, "extract_windows: horizon must be positive");
  ds.validate();

  std::map<long, std::vector<const AgentTrack*>> scenes;
  for (const AgentTrack& tr : ds.tracks) scenes[tr.scene_id].push_back(&tr);

  std::vector<SceneWindow> out;
  for (const auto& [scene_id, tracks] : scenes) {
    for (const AgentTrack* ego : tracks) {
      const long n = static_cast<long>(ego->states.size());
      for (long i = 1; i + horizon < n; ++i) {
        const long hist_start = std::max<long>(0, i - history_len);
        SceneWindow w;
        w.dt = ds.dt;
        w.short_history = (i - hist_start) < history_len;
        for (long k = hist_start; k <= i; ++k)
          w.ego_history.push_back(ego->states[k]);
        for (long k = i + 1; k <= i + horizon; ++k)
          w.future.push_back(ego->states[k]);

        const long anchor_frame = ego->frame_at(i);
        for (const AgentTrack* nb : tracks) {
          if (nb == ego) continue;
          const long at = nb->index_of(anchor_frame);
          if (at < 0) continue;
          std::vector<AgentState> nh;
          for (long k = hist_start; k <= i; ++k) {
            const long idx = nb->index_of(ego->frame_at(k));
            if (idx >= 0) nh.push_back(nb->states[idx]);
          }
          if (!nh.empty()) w.neighbor_histories.push_back(std::move(nh));
        }
        out.push_back(std::move(w));
      }
    }
  }
  return out;
}

}  // namespace kalmeta
