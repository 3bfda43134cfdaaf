#pragma once

#include <string>
#include <utility>
#include <vector>

#include "kalmeta/belief.hpp"
#include "kalmeta/rollout.hpp"
#include "kalmeta/seq_model.hpp"
#include "kalmeta/train.hpp"

namespace kalmeta {

enum class AdaptMode { online, offline, k0, finetune, hybrid };

struct AdaptationConfig {
  AdaptMode mode = AdaptMode::online;
  // Hybrid: number of transitions handled by exact inference before the first
  // gradient step.
  int switch_count = 100;
  double finetune_lr = 1e-4;  // convention: a tenth of the training rate
  bool last_layer_only = true;
  int finetune_epochs = 1;
  std::uint64_t seed = 0;
  EpisodeOptions episode;  // objective for the gradient phase

  void check() const {
    require(switch_count >= 0, "AdaptationConfig: switch count negative");
    require(finetune_lr > 0.0, "AdaptationConfig: rate must be positive");
    require(finetune_epochs >= 0, "AdaptationConfig: negative epochs");
  }
};

// Parameter groups the gradient phase may touch. The narrow scope is the
// belief parameterization itself; everything else stays bit-identical.
inline std::set<std::string> finetune_scope(const AdaptationConfig& cfg) {
  if (cfg.last_layer_only) return {"prior", "process_noise"};
  return {"encoder",      "interaction",   "decoder", "feature_head",
          "noise_head",   "prior",         "process_noise"};
}

// One record per belief update. Exact entries come from the filter; gradient
// entries (exact == false) log the optimizer step's pre-update loss in both
// NLL slots and carry no innovation.
struct UpdateTrace {
  long step = 0;
  double innovation_norm = 0.0;
  double nll_before = 0.0;
  double nll_after = 0.0;
  bool exact = true;
};

// Per-agent deployment state: one belief per output dimension, the decoder
// state, and the last state actually observed. Frozen adapters never change
// their beliefs; their predictions are the prior model's.
struct AgentAdapterState {
  long agent_id = 0;
  std::vector<LastLayerBelief> beliefs;
  Mat h;
  AgentState last_state;
  double dt = 0.4;
  long steps = 0;
  bool frozen = false;
};

// The learned deployment prior: one diagonal belief per output dimension.
inline std::vector<LastLayerBelief> prior_beliefs(const ModelParameters& mp) {
  std::vector<LastLayerBelief> out;
  for (int j = 0; j < mp.cfg.out_dim; ++j) {
    std::string sfx = std::to_string(j);
    out.push_back(LastLayerBelief::diagonal(
        Vec(mp.at("prior_mean_" + sfx)),
        Vec(mp.at("prior_rho_" + sfx).array().exp().matrix())));
  }
  return out;
}

inline std::vector<Vec> process_noise_diag(const ModelParameters& mp) {
  std::vector<Vec> out;
  for (int j = 0; j < mp.cfg.out_dim; ++j)
    out.push_back(Vec(mp.at("q_rho_" + std::to_string(j)).array().exp().matrix()));
  return out;
}

// Lifts the adapter's beliefs into the sampler's per-dimension form,
// densifying diagonal storage.
inline std::vector<DimBelief<Eager>> dim_beliefs(
    const std::vector<LastLayerBelief>& bs) {
  std::vector<DimBelief<Eager>> out;
  for (const auto& b : bs) {
    Mat cov = b.mode == CovMode::Full ? b.cov : Mat(b.cov_diag.asDiagonal());
    out.push_back({Mat(b.mean), cov});
  }
  return out;
}

inline std::vector<Mat> q_mats(const std::vector<Vec>& q) {
  std::vector<Mat> out;
  for (const Vec& v : q) out.push_back(Mat(v));
  return out;
}

// Starts an adapter from a conditioning window and a prior (typically the
// learned one, or the output of offline adaptation).
inline AgentAdapterState init_adapter(const BoundModel<Eager>& bm,
                                      const std::vector<LastLayerBelief>& prior,
                                      const SceneWindow& w, long agent_id = 0,
                                      bool frozen = false) {
  require(static_cast<int>(prior.size()) == bm.cfg->out_dim,
          "init_adapter: need one belief per output dimension");
  w.validate(*bm.cfg);
  AgentAdapterState a;
  a.agent_id = agent_id;
  a.beliefs = prior;
  Eager::Ctx ctx;
  auto v = encode<Eager>(ctx, bm, w);
  a.h = decoder_init<Eager>(bm, v);
  a.last_state = w.current();
  a.dt = w.dt;
  a.frozen = frozen;
  return a;
}

namespace detail {

// Shared predict -> score -> correct cycle on one observed transition.
// Returns the trace entry; beliefs and the NLL are per output dimension,
// summed. Frozen states skip both filter passes but still score.
inline UpdateTrace filter_observation(std::vector<LastLayerBelief>& beliefs,
                                      const std::vector<Vec>& q, const Mat& phi_row,
                                      const Mat& s2, const Vec2& label,
                                      long step, bool frozen) {
  const long p = phi_row.cols();
  UpdateTrace tr;
  tr.step = step;
  double inn_sq = 0.0;
  for (std::size_t j = 0; j < beliefs.size(); ++j) {
    if (!frozen)
      beliefs[j] = predict_step(
          beliefs[j], ParamDynamics::identity(static_cast<int>(p), q[j]));
    Mat noise = Mat::Constant(1, 1, s2(static_cast<long>(j), 0));
    Gaussian g = predictive_distribution(beliefs[j], phi_row, noise);
    const double e = label[static_cast<long>(j)] - g.mean(0);
    inn_sq += e * e;
    tr.nll_before += gaussian_nll_scalar(g.mean(0), g.cov(0, 0), label[j]);
    if (!frozen) {
      beliefs[j] = correct_step(beliefs[j], phi_row, noise,
                                Vec::Constant(1, label[j]))
                       .first;
      Gaussian after = predictive_distribution(beliefs[j], phi_row, noise);
      tr.nll_after +=
          gaussian_nll_scalar(after.mean(0), after.cov(0, 0), label[j]);
    }
  }
  if (frozen) tr.nll_after = tr.nll_before;
  tr.innovation_norm = std::sqrt(inn_sq);
  return tr;
}

}  // namespace detail

// One exact streaming update from a newly observed state. The regression
// label is the inverse-dynamics action (position difference over dt); the
// decoder advances on the observed transition, never on a prediction. One
// predict_step runs per observed frame whatever the frame spacing.
inline UpdateTrace observe_online(AgentAdapterState& a,
                                  const BoundModel<Eager>& bm,
                                  const std::vector<Vec>& q,
                                  const AgentState& next) {
  require(a.h.size() > 0, "observe_online: adapter not initialized");
  require(static_cast<int>(q.size()) == bm.cfg->out_dim,
          "observe_online: process noise dimension mismatch");
  Eager::Ctx ctx;
  Mat phi_row = features<Eager>(ctx, bm, a.h).transpose();
  Mat s2 = noise_cov<Eager>(bm, a.h);
  Vec2 label = (next.position - a.last_state.position) / a.dt;

  UpdateTrace tr = detail::filter_observation(a.beliefs, q, phi_row, s2, label,
                                              a.steps, a.frozen);
  Mat x = state_delta_input(a.last_state, next);
  a.h = decoder_step<Eager>(bm, x, a.h);
  a.last_state = next;
  a.steps += 1;
  return tr;
}

// A dropped frame: the belief widens by the process noise, nothing corrects,
// and the decoder holds since there is no observed state to feed it.
inline void observe_missing(AgentAdapterState& a, const std::vector<Vec>& q) {
  require(a.h.size() > 0, "observe_missing: adapter not initialized");
  if (!a.frozen) {
    const int p = static_cast<int>(a.beliefs.front().dim());
    for (std::size_t j = 0; j < a.beliefs.size(); ++j)
      a.beliefs[j] = predict_step(a.beliefs[j], ParamDynamics::identity(p, q[j]));
  }
  a.steps += 1;
}

struct OfflineResult {
  std::vector<LastLayerBelief> beliefs;
  std::vector<UpdateTrace> trace;
  long transitions_used = 0;
};

// Folds every one-step transition of the dataset into a single shared belief,
// in the dataset's own temporal order: windows in sequence, each window's
// transitions in time order. Each window runs its own decoder thread; the
// belief is common. Stops early after max_transitions when that is >= 0.
inline OfflineResult adapt_offline(const BoundModel<Eager>& bm,
                                   const std::vector<LastLayerBelief>& prior,
                                   const std::vector<Vec>& q,
                                   const std::vector<SceneWindow>& data,
                                   long max_transitions = -1) {
  require(!data.empty(), "adapt_offline: empty dataset");
  OfflineResult res;
  res.beliefs = prior;
  Eager::Ctx ctx;
  for (std::size_t wi = 0; wi < data.size(); ++wi) {
    const SceneWindow& w = data[wi];
    w.validate(*bm.cfg);
    auto v = encode<Eager>(ctx, bm, w);
    Mat h = decoder_init<Eager>(bm, v);
    AgentState prev = w.current();
    for (std::size_t t = 0; t < w.future.size(); ++t) {
      if (max_transitions >= 0 && res.transitions_used >= max_transitions)
        return res;
      const AgentState& cur = w.future[t];
      Mat phi_row = features<Eager>(ctx, bm, h).transpose();
      Mat s2 = noise_cov<Eager>(bm, h);
      Vec2 label = (cur.position - prev.position) / w.dt;
      try {
        res.trace.push_back(detail::filter_observation(
            res.beliefs, q, phi_row, s2, label, res.transitions_used, false));
      } catch (const NumericalError& e) {
        throw NumericalError("adapt_offline: window " + std::to_string(wi) +
                             ", transition " + std::to_string(t) + ": " +
                             e.what());
      }
      h = decoder_step<Eager>(bm, state_delta_input(prev, cur), h);
      prev = cur;
      res.transitions_used += 1;
    }
  }
  return res;
}

// Episodes for the gradient phase: each window contributes its whole future
// as filtered transitions; a rollout term is added only when the objective
// weights it.
inline std::vector<Episode> adaptation_episodes(const std::vector<SceneWindow>& data,
                                                const EpisodeOptions& opts) {
  std::vector<Episode> out;
  for (const SceneWindow& w : data) {
    const int n = static_cast<int>(w.future.size());
    if (n < 1) continue;
    if (opts.lambda_kde != 0.0 && n > opts.rollout.horizon) {
      const int anchor = n - opts.rollout.horizon;
      out.push_back(episode_from_window(w, n, anchor, opts.rollout.horizon));
    } else {
      out.push_back(episode_from_window(w, n, n, 0));
    }
  }
  require(!out.empty(), "adaptation_episodes: no usable windows");
  return out;
}

// Gradient-phase refinement on a small target-domain dataset. Deterministic
// under cfg.seed; a diverged run returns the starting parameters.
inline TrainResult adapt_finetune(const ModelParameters& params,
                                  const std::vector<SceneWindow>& data,
                                  const AdaptationConfig& cfg,
                                  const StepObserver& on_step = {}) {
  cfg.check();
  TrainConfig tc;
  tc.epochs = cfg.finetune_epochs;
  tc.lr = cfg.finetune_lr;
  tc.seed = cfg.seed;
  tc.episode = cfg.episode;
  return finetune(params, adaptation_episodes(data, cfg.episode),
                  finetune_scope(cfg), tc, on_step);
}

struct HybridResult {
  ModelParameters params;
  std::vector<LastLayerBelief> beliefs;
  std::vector<UpdateTrace> trace;
  bool diverged = false;
};

// Exact inference first, gradients second: the first switch_count transitions
// fold into the shared belief; the windows wholly past that boundary are
// finetuned on. A boundary inside a window ends the exact phase there and
// leaves that window's tail unused.
inline HybridResult adapt_hybrid(const ModelParameters& params,
                                 const std::vector<SceneWindow>& data,
                                 const AdaptationConfig& cfg) {
  cfg.check();
  Eager::Ctx ctx;
  auto bm = BoundModel<Eager>::bind(ctx, params);
  HybridResult res;
  res.params = params;

  OfflineResult offline =
      adapt_offline(bm, prior_beliefs(params), process_noise_diag(params),
                    data, cfg.switch_count);
  res.beliefs = offline.beliefs;
  res.trace = std::move(offline.trace);

  std::vector<SceneWindow> rest;
  long seen = 0;
  for (const SceneWindow& w : data) {
    if (seen >= cfg.switch_count) rest.push_back(w);
    seen += static_cast<long>(w.future.size());
  }
  if (rest.empty() || cfg.finetune_epochs == 0) return res;

  std::vector<UpdateTrace> grad_trace;
  TrainResult ft = adapt_finetune(
      res.params, rest, cfg,
      [&grad_trace](long step, int, int, double loss) {
        UpdateTrace tr;
        tr.step = step;
        tr.nll_before = loss;
        tr.nll_after = loss;
        tr.exact = false;
        grad_trace.push_back(tr);
      });
  res.diverged = ft.diverged;
  if (!ft.diverged) {
    res.params = ft.state.params;
    for (const UpdateTrace& tr : grad_trace) res.trace.push_back(tr);
  }
  return res;
}

}  // namespace kalmeta
