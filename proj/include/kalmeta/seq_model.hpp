#pragma once

#include <vector>

#include "kalmeta/backend.hpp"
#include "kalmeta/common.hpp"
#include "kalmeta/model.hpp"

namespace kalmeta {

struct AgentState {
  Vec2 position{0.0, 0.0};
  Vec2 velocity{0.0, 0.0};
  Vec2 acceleration{0.0, 0.0};
  double heading = 0.0;
};

// One conditioning sample: the ego agent's recent trajectory, time-aligned
// neighbor trajectories, and optionally the true future (for training and
// evaluation). Histories end at the current step; neighbor histories may be
// shorter than the ego's but not longer.
struct SceneWindow {
  std::vector<AgentState> ego_history;
  std::vector<std::vector<AgentState>> neighbor_histories;
  std::vector<AgentState> future;
  Vec context;  // empty when the model runs without context input
  double dt = 0.4;
  bool short_history = false;

  const AgentState& current() const { return ego_history.back(); }

  void validate(const ModelConfig& cfg) const {
    require(!ego_history.empty(), "SceneWindow: empty ego history");
    require(dt > 0.0, "SceneWindow: dt must be positive");
    for (const auto& nh : neighbor_histories) {
      require(!nh.empty(), "SceneWindow: empty neighbor history");
      require(nh.size() <= ego_history.size(),
              "SceneWindow: neighbor history longer than ego history");
    }
    require(static_cast<int>(context.size()) == cfg.context_dim,
            "SceneWindow: context length does not match model config");
    auto finite = [](const AgentState& s) {
      return std::isfinite(s.position.x()) && std::isfinite(s.position.y()) &&
             std::isfinite(s.velocity.x()) && std::isfinite(s.velocity.y());
    };
    for (const auto& s : ego_history)
      require(finite(s), "SceneWindow: non-finite ego state");
    for (const auto& nh : neighbor_histories)
      for (const auto& s : nh)
        require(finite(s), "SceneWindow: non-finite neighbor state");
    for (const auto& s : future)
      require(finite(s), "SceneWindow: non-finite future state");
  }
};

// Net input for one state, in the frame anchored at `origin`.
inline Mat state_input(const AgentState& s, const Vec2& origin) {
  Mat x(kStateFeatDim, 1);
  x(0, 0) = s.position.x() - origin.x();
  x(1, 0) = s.position.y() - origin.y();
  x(2, 0) = s.velocity.x();
  x(3, 0) = s.velocity.y();
  return x;
}

// Decoder input for one observed transition: step displacement plus the new
// velocity. Rolled-out futures build the same quantity from the sampled
// action (displacement = action * dt), so observed and imagined advancement
// feed the decoder identically.
inline Mat state_delta_input(const AgentState& prev, const AgentState& cur) {
  Mat x(kStateFeatDim, 1);
  x(0, 0) = cur.position.x() - prev.position.x();
  x(1, 0) = cur.position.y() - prev.position.y();
  x(2, 0) = cur.velocity.x();
  x(3, 0) = cur.velocity.y();
  return x;
}

namespace detail {

template <class B>
typename B::M affine(const typename B::M& w, const typename B::M& x,
                     const typename B::M& b) {
  return B::add(B::matmul(w, x), b);
}

}  // namespace detail

// One GRU cell update. The reset gate modulates the hidden contribution of
// the candidate state.
template <class B>
typename B::M gru_step(const typename B::M& x, const typename B::M& h,
                       const typename B::M& wxz, const typename B::M& whz,
                       const typename B::M& bz, const typename B::M& wxr,
                       const typename B::M& whr, const typename B::M& br,
                       const typename B::M& wxn, const typename B::M& whn,
                       const typename B::M& bn) {
  auto z = B::sigmoid(B::add(detail::affine<B>(wxz, x, bz), B::matmul(whz, h)));
  auto r = B::sigmoid(B::add(detail::affine<B>(wxr, x, br), B::matmul(whr, h)));
  auto n = B::tanh(B::add(detail::affine<B>(wxn, x, bn),
                          B::hadamard(r, B::matmul(whn, h))));
  auto keep = B::hadamard(B::shift(B::neg(z), 1.0), h);
  return B::add(keep, B::hadamard(z, n));
}

template <class B>
typename B::M ego_gru(const BoundModel<B>& bm, const typename B::M& x,
                      const typename B::M& h) {
  return gru_step<B>(x, h, bm.ego_wxz, bm.ego_whz, bm.ego_bz, bm.ego_wxr,
                     bm.ego_whr, bm.ego_br, bm.ego_wxn, bm.ego_whn, bm.ego_bn);
}

template <class B>
typename B::M nbr_gru(const BoundModel<B>& bm, const typename B::M& x,
                      const typename B::M& h) {
  return gru_step<B>(x, h, bm.nbr_wxz, bm.nbr_whz, bm.nbr_bz, bm.nbr_wxr,
                     bm.nbr_whr, bm.nbr_br, bm.nbr_wxn, bm.nbr_whn, bm.nbr_bn);
}

// Advances the decoder hidden state with a 4-vector state input.
template <class B>
typename B::M decoder_step(const BoundModel<B>& bm, const typename B::M& x,
                           const typename B::M& h) {
  return gru_step<B>(x, h, bm.dec_wxz, bm.dec_whz, bm.dec_bz, bm.dec_wxr,
                     bm.dec_whr, bm.dec_br, bm.dec_wxn, bm.dec_whn, bm.dec_bn);
}

// Scene embedding: ego GRU over the history, a shared neighbor GRU per
// neighbor, additive attention pooling keyed on the ego encoding, and a
// linear projection. Neighbor pooling is permutation invariant by
// construction. All positions are taken relative to the ego's current
// position, which makes the embedding translation invariant.
template <class B>
typename B::M encode(typename B::Ctx& ctx, const BoundModel<B>& bm,
                     const SceneWindow& window) {
  const ModelConfig& cfg = *bm.cfg;
  window.validate(cfg);
  const Vec2 origin = window.current().position;

  auto h_ego = B::constant(ctx, Mat::Zero(cfg.enc_hidden, 1));
  for (const AgentState& s : window.ego_history) {
    auto x = B::constant(ctx, state_input(s, origin));
    h_ego = ego_gru<B>(bm, x, h_ego);
  }

  auto pooled = B::constant(ctx, Mat::Zero(cfg.enc_hidden, 1));
  if (!window.neighbor_histories.empty()) {
    std::vector<typename B::M> encodings;
    std::vector<typename B::M> scores;
    auto key = B::matmul(bm.att_we, h_ego);
    for (const auto& nh : window.neighbor_histories) {
      auto h_n = B::constant(ctx, Mat::Zero(cfg.enc_hidden, 1));
      for (const AgentState& s : nh) {
        auto x = B::constant(ctx, state_input(s, origin));
        h_n = nbr_gru<B>(bm, x, h_n);
      }
      auto act = B::tanh(
          B::add(B::add(key, B::matmul(bm.att_wn, h_n)), bm.att_b));
      scores.push_back(B::matmul(B::transpose(bm.att_u), act));
      encodings.push_back(h_n);
    }
    auto lse = B::logsumexp(B::vcat(ctx, scores));
    for (std::size_t k = 0; k < encodings.size(); ++k) {
      auto w = B::exp(B::sub(scores[k], lse));
      pooled = B::add(pooled, B::mul_scalar(encodings[k], w));
    }
  }

  auto v = B::add(B::add(B::matmul(bm.v_we, h_ego), B::matmul(bm.v_wp, pooled)),
                  bm.v_b);
  if (cfg.context_dim > 0) {
    auto c = B::constant(ctx, Mat(window.context));
    v = B::add(v, B::matmul(bm.v_wc, c));
  }
  return v;
}

template <class B>
typename B::M decoder_init(const BoundModel<B>& bm, const typename B::M& v) {
  return B::tanh(detail::affine<B>(bm.di_w, v, bm.di_b));
}

// Feature row of the linear readout: learned nonlinear features plus a
// constant 1, so the readout always carries a bias term.
template <class B>
typename B::M features(typename B::Ctx& ctx, const BoundModel<B>& bm,
                       const typename B::M& h) {
  auto learned = B::tanh(detail::affine<B>(bm.f_w, h, bm.f_b));
  return B::vstack(learned, B::constant(ctx, Mat::Ones(1, 1)));
}

// Per-dimension observation-noise variances, squashed into
// [sigma2_floor, sigma2_ceil].
template <class B>
typename B::M noise_cov(const BoundModel<B>& bm, const typename B::M& h) {
  const ModelConfig& cfg = *bm.cfg;
  auto z = B::sigmoid(detail::affine<B>(bm.n_w, h, bm.n_b));
  return B::shift(B::scale(z, cfg.sigma2_ceil - cfg.sigma2_floor),
                  cfg.sigma2_floor);
}

// Single-integrator state transition: the action is a commanded velocity held
// for one step of length dt.
inline AgentState dynamics_step(const AgentState& s, const Vec2& action,
                                double dt) {
  require(dt > 0.0, "dynamics_step: dt must be positive");
  AgentState out;
  out.position = s.position + dt * action;
  out.velocity = action;
  out.acceleration = (action - s.velocity) / dt;
  out.heading = action.norm() > 1e-12 ? std::atan2(action.y(), action.x())
                                      : s.heading;
  return out;
}

}  // namespace kalmeta
