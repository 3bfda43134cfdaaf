#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "kalmeta/adapt.hpp"
#include "kalmeta/data.hpp"
#include "kalmeta/metrics.hpp"
#include "kalmeta/train.hpp"

namespace kalmeta {

// Evaluation protocol knobs shared by the offline and online loops.
struct EvalConfig {
  int history_len = 6;
  int horizon = 8;
  int particles = 64;
  std::vector<long> update_counts = {0, 100, 200};
  std::vector<double> levels = default_levels();
  int rank_samples = 512;
  int resamples = 1000;

  void check() const {
    require(history_len >= 1, "EvalConfig: history must cover a transition");
    require(horizon >= 1, "EvalConfig: horizon must be positive");
    require(particles >= 1, "EvalConfig: need at least one particle");
    require(!update_counts.empty(), "EvalConfig: no update counts");
    long prev = -1;
    for (long u : update_counts) {
      require(u > prev, "EvalConfig: update counts must increase strictly");
      prev = u;
    }
    check_levels(levels);
    require(rank_samples >= 1 && resamples >= 1,
            "EvalConfig: sampling budgets must be positive");
  }
};

// Windows of one ego agent, in anchor order.
struct AgentWindows {
  long scene_id = 0;
  long agent_id = 0;
  std::vector<SceneWindow> windows;
};

// Same enumeration as extract_windows, grouped by ego track.
inline std::vector<AgentWindows> extract_agent_windows(
    const TrajectoryDataset& ds, int history_len, int horizon) {
  std::map<std::pair<long, long>, std::vector<SceneWindow>> by_agent;
  // tag windows by walking tracks in the same order extract_windows does
  std::map<long, std::vector<const AgentTrack*>> scenes;
  for (const AgentTrack& tr : ds.tracks) scenes[tr.scene_id].push_back(&tr);

  TrajectoryDataset one;
  one.dt = ds.dt;
  std::vector<AgentWindows> out;
  for (const auto& [scene_id, tracks] : scenes) {
    for (const AgentTrack* ego : tracks) {
      TrajectoryDataset scene_ds;
      scene_ds.dt = ds.dt;
      scene_ds.tracks.push_back(*ego);
      for (const AgentTrack* other : tracks)
        if (other != ego) scene_ds.tracks.push_back(*other);
      // windows for the first track only: the ego sits first, neighbors are
      // identical to the full-scene extraction because co-presence only needs
      // the other tracks to be in the dataset
      std::vector<SceneWindow> ws =
          extract_windows(scene_ds, history_len, horizon);
      AgentWindows aw;
      aw.scene_id = scene_id;
      aw.agent_id = ego->agent_id;
      const long n = static_cast<long>(ego->states.size());
      long own = std::max<long>(0, n - 1 - horizon);  // anchors 1..n-1-horizon
      aw.windows.assign(ws.begin(), ws.begin() + std::min<long>(own, ws.size()));
      if (!aw.windows.empty()) out.push_back(std::move(aw));
    }
  }
  return out;
}

// Episode set for meta-training: every window whose future covers both the
// filtering segment and the anchored rollout becomes one episode.
inline std::vector<Episode> training_episodes(const std::vector<SceneWindow>& ws,
                                              int segment_len, int anchor,
                                              const EpisodeOptions& opts) {
  require(segment_len >= 1, "training_episodes: empty segment");
  const int horizon = opts.lambda_kde != 0.0 ? opts.rollout.horizon : 0;
  const int need = std::max(segment_len, anchor + horizon);
  std::vector<Episode> out;
  for (const SceneWindow& w : ws)
    if (static_cast<int>(w.future.size()) >= need)
      out.push_back(episode_from_window(w, segment_len, anchor, horizon));
  require(!out.empty(), "training_episodes: no window covers the segment");
  return out;
}

// One agent's evaluation sample from one conditioning window: deterministic
// mean forecast, a sampled set, and the ground truth over the horizon.
inline AgentEval eval_window(const BoundModel<Eager>& bm,
                             const std::vector<LastLayerBelief>& beliefs,
                             const std::vector<Vec>& q, const SceneWindow& w,
                             int horizon, int particles, RandomStream rng) {
  require(static_cast<int>(w.future.size()) >= horizon,
          "eval_window: future shorter than the horizon");
  AgentAdapterState a = init_adapter(bm, beliefs, w);
  std::vector<DimBelief<Eager>> db = dim_beliefs(beliefs);
  std::vector<Mat> qm = q_mats(q);

  AgentEval ev;
  ev.mean_traj = positions_of(
      mean_rollout(bm, db, qm, a.h, w.current(), w.dt, horizon));
  RolloutOptions ro;
  ro.particles = particles;
  ro.horizon = horizon;
  ev.set = predict_set(bm, db, qm, a.h, w.current(), w.dt, ro, rng);
  for (int t = 0; t < horizon; ++t) ev.truth.push_back(w.future[t].position);
  return ev;
}

// Scores one window per agent (the last full-history one, falling back to the
// last short one) under a fixed shared belief.
inline std::vector<AgentEval> agent_evals(
    const BoundModel<Eager>& bm, const std::vector<LastLayerBelief>& beliefs,
    const std::vector<Vec>& q, const std::vector<AgentWindows>& agents,
    const EvalConfig& ec, RandomStream rng) {
  std::vector<AgentEval> out;
  for (std::size_t i = 0; i < agents.size(); ++i) {
    const AgentWindows& aw = agents[i];
    const SceneWindow* pick = nullptr;
    for (const SceneWindow& w : aw.windows) {
      if (static_cast<int>(w.future.size()) < ec.horizon) continue;
      if (pick == nullptr || !w.short_history || pick->short_history) pick = &w;
    }
    if (pick == nullptr) continue;
    out.push_back(eval_window(bm, beliefs, q, *pick, ec.horizon, ec.particles,
                              rng.child(0xE7, static_cast<std::uint64_t>(i))));
  }
  return out;
}

struct CurvePoint {
  long updates = 0;
  MetricsReport report;
};

// Offline protocol: fold the adaptation split into one shared belief at each
// update budget, then evaluate every agent of the held-out split under it.
// Budget 0 scores the meta-learned prior untouched.
inline std::vector<CurvePoint> offline_curve(
    const ModelParameters& mp, const std::vector<SceneWindow>& adapt_split,
    const std::vector<AgentWindows>& eval_split, const EvalConfig& ec,
    RandomStream rng) {
  ec.check();
  require(ec.particles >= 10,
          "offline_curve: the best-of-10 metric needs at least 10 particles");
  Eager::Ctx ctx;
  auto bm = BoundModel<Eager>::bind(ctx, mp);
  std::vector<LastLayerBelief> prior = prior_beliefs(mp);
  std::vector<Vec> q = process_noise_diag(mp);

  std::vector<CurvePoint> out;
  for (std::size_t i = 0; i < ec.update_counts.size(); ++i) {
    const long budget = ec.update_counts[i];
    std::vector<LastLayerBelief> beliefs = prior;
    if (budget > 0) {
      OfflineResult res = adapt_offline(bm, prior, q, adapt_split, budget);
      beliefs = res.beliefs;
    }
    std::vector<AgentEval> evals = agent_evals(
        bm, beliefs, q, eval_split, ec, rng.child(0xEC, i));
    require(!evals.empty(), "offline_curve: no evaluable agents");
    CurvePoint cp;
    cp.updates = budget;
    cp.report = evaluate_agents(evals, ec.levels, rng.child(0xEB, i),
                                ec.rank_samples, ec.resamples);
    out.push_back(std::move(cp));
  }
  return out;
}

// One agent's streaming run: condition on the first history_len + 1 states,
// then alternate forecasting and observing. The forecast made after u updates
// is anchored at state history_len + u and scored against the states the
// adapter has not seen yet; the adapter only ever consumes states up to its
// anchor, so the trace after u updates is a function of the first
// history_len + u + 1 states alone.
struct OnlineRun {
  std::vector<UpdateTrace> trace;
  std::map<long, AgentEval> evals;  // keyed by update count
};

inline OnlineRun online_agent_run(const BoundModel<Eager>& bm,
                                  const std::vector<LastLayerBelief>& prior,
                                  const std::vector<Vec>& q,
                                  const AgentTrack& track, double dt,
                                  const EvalConfig& ec, RandomStream rng,
                                  bool frozen = false) {
  ec.check();
  const long H = ec.history_len;
  const long max_u = ec.update_counts.back();
  require(static_cast<long>(track.states.size()) >= H + 1 + max_u + ec.horizon,
          "online_agent_run: track too short for the protocol");

  SceneWindow w0;
  w0.dt = dt;
  for (long k = 0; k <= H; ++k) w0.ego_history.push_back(track.states[k]);
  AgentAdapterState a = init_adapter(bm, prior, w0, track.agent_id, frozen);

  OnlineRun run;
  std::vector<Mat> qm = q_mats(q);
  for (long u = 0; u <= max_u; ++u) {
    if (std::find(ec.update_counts.begin(), ec.update_counts.end(), u) !=
        ec.update_counts.end()) {
      AgentEval ev;
      std::vector<DimBelief<Eager>> db = dim_beliefs(a.beliefs);
      ev.mean_traj = positions_of(
          mean_rollout(bm, db, qm, a.h, a.last_state, dt, ec.horizon));
      RolloutOptions ro;
      ro.particles = ec.particles;
      ro.horizon = ec.horizon;
      ev.set = predict_set(bm, db, qm, a.h, a.last_state, dt, ro,
                           rng.child(0xED, static_cast<std::uint64_t>(u)));
      for (long t = 1; t <= ec.horizon; ++t)
        ev.truth.push_back(track.states[H + u + t].position);
      run.evals[u] = std::move(ev);
    }
    if (u == max_u) break;
    run.trace.push_back(observe_online(a, bm, q, track.states[H + u + 1]));
  }
  return run;
}

struct OnlinePoint {
  long updates = 0;
  double ade = 0.0;
  double fde = 0.0;
  double nll = 0.0;
  long agents = 0;
};

// Online protocol: streaming runs over every sufficiently long track, with
// error versus the number of observed updates averaged across agents.
inline std::vector<OnlinePoint> online_curve(const ModelParameters& mp,
                                             const TrajectoryDataset& ds,
                                             const EvalConfig& ec,
                                             RandomStream rng,
                                             bool frozen = false) {
  ec.check();
  Eager::Ctx ctx;
  auto bm = BoundModel<Eager>::bind(ctx, mp);
  std::vector<LastLayerBelief> prior = prior_beliefs(mp);
  std::vector<Vec> q = process_noise_diag(mp);
  const long need = ec.history_len + 1 + ec.update_counts.back() + ec.horizon;

  std::map<long, OnlinePoint> agg;
  for (long u : ec.update_counts) agg[u].updates = u;
  long used = 0;
  for (std::size_t i = 0; i < ds.tracks.size(); ++i) {
    const AgentTrack& tr = ds.tracks[i];
    if (static_cast<long>(tr.states.size()) < need) continue;
    OnlineRun run = online_agent_run(bm, prior, q, tr, ds.dt, ec,
                                     rng.child(0xEA, i), frozen);
    ++used;
    for (const auto& [u, ev] : run.evals) {
      OnlinePoint& pt = agg[u];
      pt.ade += ade(ev.mean_traj, ev.truth);
      pt.fde += fde(ev.mean_traj, ev.truth);
      pt.nll += traj_nll(ev.set, ev.truth);
      pt.agents += 1;
    }
  }
  require(used > 0, "online_curve: no track long enough for the protocol");

  std::vector<OnlinePoint> out;
  for (auto& [u, pt] : agg) {
    pt.ade /= static_cast<double>(pt.agents);
    pt.fde /= static_cast<double>(pt.agents);
    pt.nll /= static_cast<double>(pt.agents);
    out.push_back(pt);
  }
  return out;
}

// Bundled source/target experiment setups.
struct ExperimentPreset {
  std::string name;
  TransferPreset domains;
  std::string eval_mode;  // protocol the preset is meant for
};

inline ExperimentPreset experiment_preset(const std::string& name,
                                          std::uint64_t seed = 7) {
  ExperimentPreset p;
  p.name = name;
  if (name == "peds-transfer") {
    p.domains = transfer_preset("speed", seed);
    p.eval_mode = "offline";
  } else if (name == "freq-transfer") {
    p.domains = transfer_preset("frequency", seed);
    p.eval_mode = "online";
  } else if (name == "oracle") {
    // trains directly on the target distribution: source shares the target's
    // dynamics but draws fresh trajectories
    p.domains = transfer_preset("speed", seed);
    p.domains.source = p.domains.target;
    p.domains.source.seed = seed + 2;
    p.eval_mode = "offline";
  } else {
    throw InvalidInput("experiment_preset: unknown preset '" + name + "'");
  }
  return p;
}

}  // namespace kalmeta
