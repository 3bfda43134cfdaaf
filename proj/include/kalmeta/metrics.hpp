#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "kalmeta/common.hpp"
#include "kalmeta/random.hpp"
#include "kalmeta/rollout.hpp"

namespace kalmeta {

inline std::vector<Vec2> positions_of(const std::vector<AgentState>& states) {
  std::vector<Vec2> out;
  out.reserve(states.size());
  for (const AgentState& s : states) out.push_back(s.position);
  return out;
}

// Mean over steps of the Euclidean gap between prediction and truth.
inline double ade(const std::vector<Vec2>& pred, const std::vector<Vec2>& truth) {
  require(!pred.empty(), "ade: empty trajectory");
  require(pred.size() == truth.size(), "ade: horizon mismatch");
  double total = 0.0;
  for (std::size_t t = 0; t < pred.size(); ++t)
    total += (pred[t] - truth[t]).norm();
  return total / static_cast<double>(pred.size());
}

inline double fde(const std::vector<Vec2>& pred, const std::vector<Vec2>& truth) {
  require(!pred.empty(), "fde: empty trajectory");
  require(pred.size() == truth.size(), "fde: horizon mismatch");
  return (pred.back() - truth.back()).norm();
}

// Best ADE over the first k sampled futures, in their seeded draw order.
inline double min_ade_k(const PredictionSet& set, const std::vector<Vec2>& truth,
                        int k) {
  require(k >= 1, "min_ade_k: k must be positive");
  require(static_cast<int>(set.particles.size()) >= k,
          "min_ade_k: fewer particles than k");
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < k; ++i)
    best = std::min(best, ade(positions_of(set.particles[i].states), truth));
  return best;
}

// Mean NLL of the truth under the sampled mixture; identical to the training
// objective's data-level form, evaluated at whatever particle count the set
// carries.
inline double traj_nll(const PredictionSet& set, const std::vector<Vec2>& truth) {
  return kde_loss(set, truth);
}

// Degenerate mixture components are evaluated at this variance.
inline constexpr double kEvalVarFloor = 1e-12;

// log of the equally-weighted Gaussian mixture over particles at step tau.
inline double mixture_log_density(const PredictionSet& set, std::size_t tau,
                                  const Vec2& x) {
  require(!set.particles.empty(), "mixture: empty prediction set");
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> logs(set.particles.size());
  for (std::size_t i = 0; i < set.particles.size(); ++i) {
    const Particle& pc = set.particles[i];
    require(tau < pc.states.size(), "mixture: step outside horizon");
    Vec2 diff = pc.states[tau].position - x;
    Vec2 v = pc.integrated_variance[tau].cwiseMax(kEvalVarFloor);
    logs[i] = -0.5 * (2.0 * std::log(2.0 * kPi) + std::log(v.x()) +
                      std::log(v.y()) + diff.x() * diff.x() / v.x() +
                      diff.y() * diff.y() / v.y());
    best = std::max(best, logs[i]);
  }
  double acc = 0.0;
  for (double l : logs) acc += std::exp(l - best);
  return best + std::log(acc) -
         std::log(static_cast<double>(set.particles.size()));
}

inline Vec2 sample_mixture(const PredictionSet& set, std::size_t tau,
                           RandomStream& rng) {
  const Particle& pc =
      set.particles[rng.uniform_int(static_cast<int>(set.particles.size()))];
  require(tau < pc.states.size(), "mixture: step outside horizon");
  Vec2 v = pc.integrated_variance[tau].cwiseMax(kEvalVarFloor);
  return pc.states[tau].position +
         Vec2(std::sqrt(v.x()) * rng.normal(), std::sqrt(v.y()) * rng.normal());
}

// Monte Carlo highest-density rank: the fraction of fresh mixture samples
// whose density strictly exceeds the density at gt. A point at the mode ranks
// 0; the rank of a point drawn from the mixture itself is uniform, which is
// what calibration measures against.
inline double hpd_rank(const PredictionSet& set, std::size_t tau,
                       const Vec2& gt, RandomStream rng, int rank_samples) {
  require(rank_samples >= 1, "hpd_rank: need at least one sample");
  const double ld = mixture_log_density(set, tau, gt);
  long above = 0;
  for (int r = 0; r < rank_samples; ++r) {
    Vec2 x = sample_mixture(set, tau, rng);
    if (mixture_log_density(set, tau, x) > ld) above += 1;
  }
  return static_cast<double>(above) / static_cast<double>(rank_samples);
}

struct CalibrationPoint {
  double level = 0.0;
  double coverage = 0.0;
};

struct CalibrationResult {
  std::vector<CalibrationPoint> curve;
  double ece = 0.0;
  long points = 0;  // (agent, step) evaluations behind the curve
};

inline void check_levels(const std::vector<double>& levels) {
  require(!levels.empty(), "calibration: no levels");
  double prev = 0.0;
  for (double l : levels) {
    require(l > 0.0 && l < 1.0, "calibration: levels must lie in (0,1)");
    require(l > prev, "calibration: levels must increase strictly");
    prev = l;
  }
}

// Coverage curve over nominal probability levels. A ground-truth point counts
// as covered at level l when its highest-density rank falls below l. The ECE
// is the mean absolute gap to the diagonal. Each (agent, step) pair ranks
// with its own keyed substream, so agent order and count never reshuffle
// another agent's draws.
inline CalibrationResult calibration(
    const std::vector<PredictionSet>& preds,
    const std::vector<std::vector<Vec2>>& truths,
    const std::vector<double>& levels, RandomStream rng,
    int rank_samples = 512) {
  require(!preds.empty(), "calibration: no predictions");
  require(preds.size() == truths.size(),
          "calibration: prediction and truth counts differ");
  check_levels(levels);

  std::vector<double> ranks;
  for (std::size_t a = 0; a < preds.size(); ++a) {
    require(!preds[a].particles.empty(), "calibration: empty prediction set");
    const std::size_t horizon = preds[a].particles.front().states.size();
    require(truths[a].size() == horizon,
            "calibration: truth length does not match prediction horizon");
    for (std::size_t tau = 0; tau < horizon; ++tau)
      ranks.push_back(hpd_rank(preds[a], tau, truths[a][tau],
                               rng.child(a, tau), rank_samples));
  }

  CalibrationResult res;
  res.points = static_cast<long>(ranks.size());
  for (double level : levels) {
    long covered = 0;
    for (double r : ranks)
      if (r < level) covered += 1;
    double cov = static_cast<double>(covered) / static_cast<double>(ranks.size());
    res.curve.push_back({level, cov});
    res.ece += std::abs(cov - level);
  }
  res.ece /= static_cast<double>(levels.size());
  return res;
}

struct CI {
  double lo = 0.0;
  double hi = 0.0;
};

inline double stat_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double stat_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace detail {
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = static_cast<std::size_t>(std::ceil(pos));
  const double frac = pos - static_cast<double>(lo);
  return (1.0 - frac) * sorted[lo] + frac * sorted[hi];
}
}  // namespace detail

// Percentile bootstrap over per-agent values for an arbitrary statistic.
inline CI bootstrap_ci(const std::vector<double>& per_agent, RandomStream rng,
                       const std::function<double(const std::vector<double>&)>&
                           stat = stat_mean,
                       int resamples = 1000, double confidence = 0.95) {
  require(!per_agent.empty(), "bootstrap: no values");
  require(resamples >= 1, "bootstrap: resample count must be positive");
  require(confidence > 0.0 && confidence < 1.0, "bootstrap: bad confidence");
  const int n = static_cast<int>(per_agent.size());
  std::vector<double> stats(resamples);
  std::vector<double> draw(per_agent.size());
  for (int b = 0; b < resamples; ++b) {
    for (int i = 0; i < n; ++i) draw[i] = per_agent[rng.uniform_int(n)];
    stats[b] = stat(draw);
  }
  std::sort(stats.begin(), stats.end());
  const double alpha = 1.0 - confidence;
  return {detail::quantile_sorted(stats, alpha / 2.0),
          detail::quantile_sorted(stats, 1.0 - alpha / 2.0)};
}

struct MetricValue {
  double value = 0.0;
  CI ci;
};

struct MetricsReport {
  MetricValue ade, fde, min_ade_5, min_ade_10, nll;
  double ece = 0.0;
  std::vector<CalibrationPoint> curve;
  long agents = 0;
  long calibration_points = 0;
};

// One evaluated agent: the deterministic trajectory scored by ADE/FDE is the
// noise-free mean rollout; the sampled set carries the probabilistic metrics.
struct AgentEval {
  std::vector<Vec2> mean_traj;
  PredictionSet set;
  std::vector<Vec2> truth;
};

inline MetricsReport evaluate_agents(const std::vector<AgentEval>& agents,
                                     const std::vector<double>& levels,
                                     RandomStream rng, int rank_samples = 512,
                                     int resamples = 1000) {
  require(!agents.empty(), "evaluate_agents: nothing to evaluate");
  std::vector<double> v_ade, v_fde, v_m5, v_m10, v_nll;
  std::vector<PredictionSet> sets;
  std::vector<std::vector<Vec2>> truths;
  for (const AgentEval& a : agents) {
    v_ade.push_back(ade(a.mean_traj, a.truth));
    v_fde.push_back(fde(a.mean_traj, a.truth));
    v_m5.push_back(min_ade_k(a.set, a.truth, 5));
    v_m10.push_back(min_ade_k(a.set, a.truth, 10));
    v_nll.push_back(traj_nll(a.set, a.truth));
    sets.push_back(a.set);
    truths.push_back(a.truth);
  }

  auto summarize = [&](const std::vector<double>& v, std::uint64_t lane) {
    MetricValue mv;
    mv.value = stat_mean(v);
    mv.ci = bootstrap_ci(v, rng.child(0xB0, lane), stat_mean, resamples);
    return mv;
  };

  MetricsReport rep;
  rep.ade = summarize(v_ade, 1);
  rep.fde = summarize(v_fde, 2);
  rep.min_ade_5 = summarize(v_m5, 3);
  rep.min_ade_10 = summarize(v_m10, 4);
  rep.nll = summarize(v_nll, 5);
  CalibrationResult cal =
      calibration(sets, truths, levels, rng.child(0xCA), rank_samples);
  rep.ece = cal.ece;
  rep.curve = cal.curve;
  rep.agents = static_cast<long>(agents.size());
  rep.calibration_points = cal.points;
  return rep;
}

inline std::vector<double> default_levels() {
  std::vector<double> out;
  for (int i = 1; i <= 9; ++i) out.push_back(0.1 * i);
  return out;
}

}  // namespace kalmeta
