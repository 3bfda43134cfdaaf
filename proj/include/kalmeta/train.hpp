#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "kalmeta/episode.hpp"
#include "kalmeta/model.hpp"
#include "kalmeta/random.hpp"
#include "kalmeta/tape.hpp"

namespace kalmeta {

// Scalar episode loss without a tape. Used for validation and finite
// differences; shares every code path with the differentiable version.
inline double episode_loss_value(const ModelParameters& mp, const Episode& ep,
                                 const EpisodeOptions& opts, RandomStream rng) {
  Eager::Ctx ctx;
  auto bm = BoundModel<Eager>::bind(ctx, mp);
  return episode_loss<Eager>(ctx, bm, ep, opts, rng)(0, 0);
}

// Loss plus gradients for every parameter, in layout order.
inline std::pair<double, std::vector<Mat>> episode_loss_grad(
    const ModelParameters& mp, const Episode& ep, const EpisodeOptions& opts,
    RandomStream rng) {
  ad::Tape tape;
  Rev::Ctx ctx{&tape};
  auto bm = BoundModel<Rev>::bind(ctx, mp);
  ad::Var loss = episode_loss<Rev>(ctx, bm, ep, opts, rng);
  tape.backward(loss);
  return {tape.val(loss)(0, 0), collect_gradients(tape, bm)};
}

struct AdamState {
  std::vector<Mat> m, v;
  long step = 0;

  static AdamState init(const ModelParameters& mp) {
    AdamState st;
    st.m.reserve(mp.values.size());
    st.v.reserve(mp.values.size());
    for (const Mat& w : mp.values) {
      st.m.push_back(Mat::Zero(w.rows(), w.cols()));
      st.v.push_back(Mat::Zero(w.rows(), w.cols()));
    }
    return st;
  }
};

struct TrainConfig {
  int epochs = 10;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 10.0;
  EpisodeOptions episode;
  std::uint64_t seed = 0;
  // Parameter groups excluded from updates. Their Adam slots stay untouched.
  std::set<std::string> frozen_groups;
  // When non-empty, ONLY these groups update; everything else is implicitly
  // frozen. Used by fine-tuning to restrict adaptation to the prior.
  std::set<std::string> scope_groups;
  // A loss beyond this magnitude, or any non-finite loss or gradient, aborts
  // the run and restores the state from the start of the failing epoch.
  double divergence_threshold = 1e8;
};

struct TrainState {
  ModelParameters params;
  AdamState adam;
  int epochs_done = 0;

  static TrainState init(const ModelConfig& cfg, RandomStream rng) {
    TrainState st;
    st.params = ModelParameters::init(cfg, rng);
    st.adam = AdamState::init(st.params);
    return st;
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double grad_norm = 0.0;  // mean pre-clip global norm over the epoch
};

struct TrainResult {
  TrainState state;
  ModelParameters best_params;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::vector<EpochRecord> log;
  bool diverged = false;
};

namespace detail {

// Substream labels. Keys depend only on (seed, epoch, episode id), never on
// iteration order, so shuffling cannot change what any one episode samples.
inline constexpr std::uint64_t kShuffleLane = 0xA1;
inline constexpr std::uint64_t kTrainLane = 0xA2;
inline constexpr std::uint64_t kValLane = 0xA3;

inline bool updatable(const ParamSpec& spec, const TrainConfig& cfg) {
  if (cfg.frozen_groups.count(spec.group)) return false;
  if (!cfg.scope_groups.empty() && !cfg.scope_groups.count(spec.group))
    return false;
  return true;
}

inline bool grads_finite(const std::vector<Mat>& grads) {
  for (const Mat& g : grads)
    if (!all_finite(g)) return false;
  return true;
}

// Global norm over the gradients that will actually be applied.
inline double applied_norm(const std::vector<Mat>& grads,
                           const ModelParameters& mp, const TrainConfig& cfg) {
  double sq = 0.0;
  for (std::size_t k = 0; k < grads.size(); ++k)
    if (updatable(mp.layout[k], cfg)) sq += grads[k].squaredNorm();
  return std::sqrt(sq);
}

inline void adam_update(ModelParameters& mp, AdamState& adam,
                        const std::vector<Mat>& grads, const TrainConfig& cfg,
                        double scale) {
  adam.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));
  for (std::size_t k = 0; k < grads.size(); ++k) {
    if (!updatable(mp.layout[k], cfg)) continue;
    const Mat g = grads[k] * scale;
    adam.m[k] = cfg.beta1 * adam.m[k] + (1.0 - cfg.beta1) * g;
    adam.v[k] = cfg.beta2 * adam.v[k] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const Mat mhat = adam.m[k] / c1;
    const Mat vhat = adam.v[k] / c2;
    mp.values[k] -=
        cfg.lr * (mhat.array() / (vhat.array().sqrt() + cfg.adam_eps)).matrix();
  }
}

inline std::vector<int> shuffled_order(int n, RandomStream rng) {
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  for (int i = n - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_int(i + 1)]);
  return order;
}

}  // namespace detail

// Mean loss over a set of episodes with per-episode fixed sampling keys, so
// repeated evaluations of the same set are directly comparable.
inline double mean_episode_loss(const ModelParameters& mp,
                                const std::vector<Episode>& eps,
                                const EpisodeOptions& opts, RandomStream root,
                                std::uint64_t lane) {
  if (eps.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i)
    total += episode_loss_value(mp, eps[i], opts,
                                root.child(lane, static_cast<std::uint64_t>(i)));
  return total / static_cast<double>(eps.size());
}

// Pure observation hook: (optimizer step number, epoch, episode index, loss
// before the update). Never influences the run.
using StepObserver = std::function<void(long, int, int, double)>;

// One optimizer pass per episode per epoch. Episodes shuffle each epoch with
// a key derived from (seed, epoch), so a run resumed from a saved TrainState
// retraces the original run bit for bit: epoch numbering is absolute and no
// random state survives outside TrainState and the config seed.
inline TrainResult train(TrainState st, const std::vector<Episode>& train_eps,
                         const std::vector<Episode>& val_eps,
                         const TrainConfig& cfg,
                         const StepObserver& on_step = {}) {
  require(!train_eps.empty(), "train: no training episodes");
  require(cfg.epochs >= st.epochs_done, "train: epochs already completed");
  RandomStream root(cfg.seed);
  TrainResult res;

  auto score = [&](const ModelParameters& mp, double fallback) {
    if (val_eps.empty()) return fallback;
    return mean_episode_loss(mp, val_eps, cfg.episode, root, detail::kValLane);
  };

  for (int epoch = st.epochs_done; epoch < cfg.epochs; ++epoch) {
    const TrainState epoch_start = st;
    const auto e = static_cast<std::uint64_t>(epoch);
    auto order = detail::shuffled_order(
        static_cast<int>(train_eps.size()),
        root.child(detail::kShuffleLane, e));

    double loss_sum = 0.0;
    double norm_sum = 0.0;
    bool bad = false;
    for (int idx : order) {
      auto rng = root.child(detail::kTrainLane, e)
                     .child(static_cast<std::uint64_t>(idx));
      auto [loss, grads] = episode_loss_grad(st.params, train_eps[idx],
                                             cfg.episode, rng);
      if (!std::isfinite(loss) || std::abs(loss) > cfg.divergence_threshold ||
          !detail::grads_finite(grads)) {
        bad = true;
        break;
      }
      loss_sum += loss;
      const double norm = detail::applied_norm(grads, st.params, cfg);
      norm_sum += norm;
      const double scale =
          (norm > cfg.clip_norm && norm > 0.0) ? cfg.clip_norm / norm : 1.0;
      detail::adam_update(st.params, st.adam, grads, cfg, scale);
      if (on_step) on_step(st.adam.step, epoch, idx, loss);
    }
    if (bad) {
      st = epoch_start;
      res.diverged = true;
      break;
    }
    st.epochs_done = epoch + 1;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_eps.size());
    rec.grad_norm = norm_sum / static_cast<double>(train_eps.size());
    rec.val_loss = score(st.params, rec.train_loss);
    res.log.push_back(rec);

    if (rec.val_loss < res.best_val) {
      res.best_val = rec.val_loss;
      res.best_epoch = epoch;
      res.best_params = st.params;
    }
  }

  if (res.best_epoch < 0) res.best_params = st.params;
  res.state = std::move(st);
  return res;
}

// Adaptation-time refinement: same loop as train(), restricted to the given
// parameter groups. Every parameter outside the scope is bit-identical on
// return. A diverged run returns the starting parameters unchanged.
inline TrainResult finetune(const ModelParameters& start,
                            const std::vector<Episode>& eps,
                            const std::set<std::string>& scope_groups,
                            TrainConfig cfg, const StepObserver& on_step = {}) {
  require(!scope_groups.empty(), "finetune: empty scope");
  cfg.scope_groups = scope_groups;
  TrainState st;
  st.params = start;
  st.adam = AdamState::init(st.params);
  TrainResult res = train(std::move(st), eps, {}, cfg, on_step);
  if (res.diverged) {
    res.state.params = start;
    res.best_params = start;
  }
  return res;
}

struct GradCheckEntry {
  std::string name;
  std::string group;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
  std::string worst_name;
};

// Central-difference audit of the episode-loss gradient. The same stream key
// is replayed for every evaluation, so sampled rollouts act as a fixed
// deterministic function of the parameters and finite differences see the
// exact reparameterized objective. Probes per parameter are capped; entries
// are chosen deterministically from the parameter's own name hash.
inline GradCheckReport gradient_check(const ModelParameters& mp,
                                      const Episode& ep,
                                      const EpisodeOptions& opts,
                                      RandomStream rng, double fd_step = 1e-5,
                                      int max_probes_per_param = 4) {
  auto [loss, grads] = episode_loss_grad(mp, ep, opts, rng);
  require(std::isfinite(loss), "gradient_check: non-finite loss");

  GradCheckReport report;
  ModelParameters probe = mp;
  for (std::size_t k = 0; k < mp.layout.size(); ++k) {
    const ParamSpec& spec = mp.layout[k];
    const long n = mp.values[k].size();
    RandomStream pick = rng.child(0xFD, static_cast<std::uint64_t>(k));
    std::vector<long> idx;
    if (n <= max_probes_per_param) {
      for (long i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (int i = 0; i < max_probes_per_param; ++i)
        idx.push_back(pick.uniform_int(static_cast<int>(n)));
    }

    GradCheckEntry entry{spec.name, spec.group, 0.0};
    for (long i : idx) {
      double* w = probe.values[k].data() + i;
      const double saved = *w;
      *w = saved + fd_step;
      const double up = episode_loss_value(probe, ep, opts, rng);
      *w = saved - fd_step;
      const double dn = episode_loss_value(probe, ep, opts, rng);
      *w = saved;
      const double fd = (up - dn) / (2.0 * fd_step);
      const double g = grads[k].data()[i];
      const double rel =
          std::abs(fd - g) / std::max({1.0, std::abs(fd), std::abs(g)});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    if (entry.max_rel_err > report.worst) {
      report.worst = entry.max_rel_err;
      report.worst_name = spec.name;
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace kalmeta
