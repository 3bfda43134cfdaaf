#pragma once

#include <vector>

#include "kalmeta/backend.hpp"
#include "kalmeta/common.hpp"
#include "kalmeta/model.hpp"
#include "kalmeta/random.hpp"
#include "kalmeta/rollout.hpp"
#include "kalmeta/seq_model.hpp"

namespace kalmeta {

// One training sample: a conditioning window, L observed transitions past it,
// and the ground-truth positions for a rollout anchored part way through.
// segment[0] equals the window's current state; anchor counts how many
// transitions are filtered before the rollout launches.
struct Episode {
  SceneWindow start_window;
  std::vector<AgentState> segment;
  std::vector<Vec2> rollout_truth;
  int anchor = 0;
  double dt = 0.4;

  int transitions() const { return static_cast<int>(segment.size()) - 1; }

  void validate() const {
    require(segment.size() >= 2, "Episode: need at least one transition");
    require(dt > 0.0, "Episode: dt must be positive");
    require(anchor >= 0 && anchor <= transitions(),
            "Episode: anchor outside the segment");
    const Vec2 d =
        segment.front().position - start_window.current().position;
    require(d.norm() == 0.0,
            "Episode: segment must start at the window's current state");
  }
};

// Builds an episode from a window whose future covers the segment and the
// rollout truth.
inline Episode episode_from_window(const SceneWindow& w, int segment_len,
                                   int anchor, int horizon) {
  require(segment_len >= 1, "episode_from_window: empty segment");
  require(anchor >= 0 && anchor <= segment_len,
          "episode_from_window: anchor outside segment");
  require(static_cast<int>(w.future.size()) >= segment_len,
          "episode_from_window: window future shorter than the segment");
  require(static_cast<int>(w.future.size()) >= anchor + horizon,
          "episode_from_window: window future too short for the rollout");
  Episode ep;
  ep.start_window = w;
  ep.dt = w.dt;
  ep.anchor = anchor;
  ep.segment.push_back(w.current());
  for (int t = 0; t < segment_len; ++t) ep.segment.push_back(w.future[t]);
  for (int t = 0; t < horizon; ++t)
    ep.rollout_truth.push_back(w.future[anchor + t].position);
  ep.validate();
  return ep;
}

struct EpisodeOptions {
  double lambda_filter = 1.0;
  double lambda_kde = 1.0;
  RolloutOptions rollout;
};

// Differentiable filter state for one output dimension.
template <class B>
struct FilterState {
  typename B::M mean;  // p x 1
  typename B::M cov;   // p x p
};

// One predict + NLL + correct cycle for a scalar observation. Returns the
// prior-predictive NLL of y under the post-predict belief; state is advanced
// in place. phi is p x 1, phi_t its transpose, sigma2 and y are 1 x 1.
template <class B>
typename B::M filter_scalar_step(FilterState<B>& fs, const typename B::M& phi,
                                 const typename B::M& phi_t,
                                 const typename B::M& q_diag,
                                 const typename B::M& sigma2,
                                 const typename B::M& y) {
  fs.cov = B::add(fs.cov, B::diag_embed(q_diag));
  auto sphi = B::matmul(fs.cov, phi);
  auto pvar = B::add(B::matmul(phi_t, sphi), sigma2);
  auto mu = B::matmul(phi_t, fs.mean);
  auto e = B::sub(y, mu);
  auto nll = B::scale(
      B::shift(B::add(B::log(pvar), B::div_scalar(B::square(e), pvar)),
               std::log(2.0 * kPi)),
      0.5);
  auto gain = B::div_scalar(sphi, pvar);
  fs.mean = B::add(fs.mean, B::mul_scalar(gain, e));
  fs.cov = B::symmetrize(B::sub(fs.cov, B::matmul(gain, B::transpose(sphi))));
  return nll;
}

// Meta-training objective for one episode:
//   lambda_filter * sum_t sum_j NLL(a_tj | post-predict belief at t)
// + lambda_kde * mixture loss of one rollout anchored after `anchor`
//   observed transitions.
// The filter runs per output dimension with a shared belief start taken from
// the learned prior. Randomness (rollout sampling) comes only from rng.
template <class B>
typename B::M episode_loss(typename B::Ctx& ctx, const BoundModel<B>& bm,
                           const Episode& ep, const EpisodeOptions& opts,
                           RandomStream rng) {
  ep.validate();
  const ModelConfig& cfg = *bm.cfg;
  const int d = cfg.out_dim;
  const int L = ep.transitions();
  const bool want_kde = opts.lambda_kde != 0.0 && !ep.rollout_truth.empty();
  if (want_kde)
    require(static_cast<int>(ep.rollout_truth.size()) == opts.rollout.horizon,
            "episode_loss: rollout truth length must equal the horizon");

  std::vector<FilterState<B>> fs(d);
  std::vector<typename B::M> q(d);
  for (int j = 0; j < d; ++j) {
    fs[j].mean = bm.prior_mean[j];
    fs[j].cov = B::diag_embed(B::exp(bm.prior_rho[j]));
    q[j] = B::exp(bm.q_rho[j]);
  }

  auto v = encode<B>(ctx, bm, ep.start_window);
  auto h = decoder_init<B>(bm, v);

  typename B::M h_anchor;
  std::vector<DimBelief<B>> anchor_beliefs;
  auto capture = [&]() {
    h_anchor = h;
    anchor_beliefs.clear();
    for (int j = 0; j < d; ++j)
      anchor_beliefs.push_back({fs[j].mean, fs[j].cov});
  };

  typename B::M nll_sum = B::constant(ctx, 0.0);
  for (int t = 0; t < L; ++t) {
    if (want_kde && t == ep.anchor) capture();
    auto phi = features<B>(ctx, bm, h);
    auto phi_t = B::transpose(phi);
    auto s2 = noise_cov<B>(bm, h);
    Vec2 label =
        (ep.segment[t + 1].position - ep.segment[t].position) / ep.dt;
    for (int j = 0; j < d; ++j) {
      auto y = B::constant(ctx, label[j]);
      auto nll = filter_scalar_step<B>(fs[j], phi, phi_t, q[j],
                                       B::rows(s2, j, 1), y);
      nll_sum = B::add(nll_sum, nll);
    }
    auto x = B::constant(ctx, state_delta_input(ep.segment[t], ep.segment[t + 1]));
    h = decoder_step<B>(bm, x, h);
  }
  if (want_kde && ep.anchor == L) capture();

  auto loss = B::scale(nll_sum, opts.lambda_filter);
  if (want_kde) {
    auto tracks = rollout<B>(ctx, bm, anchor_beliefs, q, h_anchor,
                             ep.segment[ep.anchor], ep.dt, opts.rollout, rng);
    auto kde = kde_loss_tracks<B>(ctx, tracks, ep.rollout_truth);
    loss = B::add(loss, B::scale(kde, opts.lambda_kde));
  }
  return loss;
}

}  // namespace kalmeta
