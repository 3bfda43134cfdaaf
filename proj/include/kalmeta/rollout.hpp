#pragma once

#include <algorithm>
#include <utility>
#include <vector>

#include "kalmeta/backend.hpp"
#include "kalmeta/belief.hpp"
#include "kalmeta/common.hpp"
#include "kalmeta/model.hpp"
#include "kalmeta/random.hpp"
#include "kalmeta/seq_model.hpp"

namespace kalmeta {

// Belief over one output dimension's readout coefficients, lifted into a
// backend. cov is dense p x p.
template <class B>
struct DimBelief {
  typename B::M mean;
  typename B::M cov;
};

struct RolloutOptions {
  int particles = 8;
  int horizon = 12;
  // Zeroes every sampling source: theta draw, action noise, theta diffusion.
  bool noise_free = false;
  // Keeps the theta-diffusion increments out of the gradient graph.
  bool detach_diffusion = false;
};

// One sampled future. Entries are per step after the anchor state.
template <class B>
struct ParticleTrack {
  std::vector<typename B::M> pos;     // 2 x 1 positions
  std::vector<typename B::M> action;  // d x 1 commanded velocities
  std::vector<typename B::M> sigma2;  // d x 1 step noise variances
  std::vector<typename B::M> vint;    // d x 1 integrated variance, position units
  std::vector<std::vector<Mat>> theta;  // per step, per dim: sampled readout
};

// Samples futures by alternating the linear readout under the current belief
// with the decoder recurrence. Per particle: draw theta once from the belief,
// then per step predict an action distribution, sample an action, integrate
// the dynamics, advance the decoder with the new state, and diffuse theta by
// the process noise. The per-step action variances accumulate into V, the
// position-space variance of the particle's endpoint distribution.
//
// Randomness comes only from `rng`; a fixed seed reproduces the rollout
// bit for bit. Each particle uses a keyed child stream, so the draw sequence
// of particle i does not depend on how many particles run.
template <class B>
std::vector<ParticleTrack<B>> rollout(typename B::Ctx& ctx,
                                      const BoundModel<B>& bm,
                                      const std::vector<DimBelief<B>>& beliefs,
                                      const std::vector<typename B::M>& q,
                                      const typename B::M& h_anchor,
                                      const AgentState& s0, double dt,
                                      const RolloutOptions& opts,
                                      RandomStream rng) {
  const ModelConfig& cfg = *bm.cfg;
  const int d = cfg.out_dim;
  const int p = cfg.feat_dim;
  require(static_cast<int>(beliefs.size()) == d,
          "rollout: need one belief per output dimension");
  require(static_cast<int>(q.size()) == d,
          "rollout: need one process-noise vector per output dimension");
  require(opts.particles >= 1 && opts.horizon >= 1,
          "rollout: particles and horizon must be positive");
  require(dt > 0.0, "rollout: dt must be positive");
  require(d == 2, "rollout: the single-integrator dynamics expect out_dim 2");

  // Shared across particles: Cholesky factors of the belief covariances and
  // the diffusion standard deviations. An exactly zero covariance short
  // circuits to a degenerate draw so the sample equals the mean exactly.
  std::vector<typename B::M> chol(d);
  std::vector<bool> zero_cov(d);
  std::vector<typename B::M> diff_sd(d);
  for (int j = 0; j < d; ++j) {
    zero_cov[j] = B::value(beliefs[j].cov).cwiseAbs().maxCoeff() == 0.0;
    if (!zero_cov[j] && !opts.noise_free)
      chol[j] = B::cholesky_lower(B::symmetrize(beliefs[j].cov));
    diff_sd[j] = B::sqrt(q[j]);
  }

  const double dt2 = dt * dt;

  std::vector<ParticleTrack<B>> out;
  out.reserve(opts.particles);
  for (int i = 0; i < opts.particles; ++i) {
    RandomStream prng = rng.child(static_cast<std::uint64_t>(i));
    ParticleTrack<B> track;
    track.pos.reserve(opts.horizon);
    track.action.reserve(opts.horizon);
    track.sigma2.reserve(opts.horizon);
    track.vint.reserve(opts.horizon);
    track.theta.reserve(opts.horizon + 1);

    std::vector<typename B::M> theta(d);
    for (int j = 0; j < d; ++j) {
      if (opts.noise_free || zero_cov[j]) {
        theta[j] = beliefs[j].mean;
      } else {
        Mat z = prng.normal_mat(p, 1);
        theta[j] = B::add(beliefs[j].mean,
                          B::matmul(chol[j], B::constant(ctx, z)));
      }
    }
    auto snap_theta = [&]() {
      std::vector<Mat> snap(d);
      for (int j = 0; j < d; ++j) snap[j] = B::value(theta[j]);
      track.theta.push_back(std::move(snap));
    };
    snap_theta();

    auto h = h_anchor;
    auto pos = B::constant(ctx, Mat(Vec2(s0.position)));
    typename B::M vacc;
    for (int tau = 0; tau < opts.horizon; ++tau) {
      auto phi = features<B>(ctx, bm, h);
      auto phi_t = B::transpose(phi);
      auto s2 = noise_cov<B>(bm, h);

      std::vector<typename B::M> comps(d);
      for (int j = 0; j < d; ++j) {
        auto mu = B::matmul(phi_t, theta[j]);
        if (opts.noise_free) {
          comps[j] = mu;
        } else {
          auto sd = B::sqrt(B::rows(s2, j, 1));
          comps[j] = B::add(mu, B::scale(sd, prng.normal()));
        }
      }
      auto a = B::vcat(ctx, comps);

      vacc = (tau == 0) ? B::scale(s2, dt2)
                        : B::add(vacc, B::scale(s2, dt2));
      pos = B::add(pos, B::scale(a, dt));

      track.pos.push_back(pos);
      track.action.push_back(a);
      track.sigma2.push_back(s2);
      track.vint.push_back(vacc);

      auto x = B::vstack(B::scale(a, dt), a);
      h = decoder_step<B>(bm, x, h);

      if (!opts.noise_free) {
        for (int j = 0; j < d; ++j) {
          Mat z = prng.normal_mat(p, 1);
          if (opts.detach_diffusion) {
            Mat inc = B::value(diff_sd[j]).cwiseProduct(z);
            theta[j] = B::add(theta[j], B::constant(ctx, inc));
          } else {
            theta[j] = B::add(
                theta[j], B::hadamard(diff_sd[j], B::constant(ctx, z)));
          }
        }
      }
      snap_theta();
    }
    out.push_back(std::move(track));
  }
  return out;
}

// Negative mean (over steps) log density of the truth under the particle
// mixture. Each particle contributes an axis-aligned Gaussian centered at its
// position with the accumulated variance V.
template <class B>
typename B::M kde_loss_tracks(typename B::Ctx& ctx,
                              const std::vector<ParticleTrack<B>>& tracks,
                              const std::vector<Vec2>& truth) {
  require(!tracks.empty(), "kde_loss: no particles");
  const std::size_t horizon = tracks.front().pos.size();
  require(truth.size() == horizon,
          "kde_loss: truth length does not match rollout horizon");
  const double logn = std::log(static_cast<double>(tracks.size()));

  typename B::M total;
  for (std::size_t tau = 0; tau < horizon; ++tau) {
    std::vector<typename B::M> logs;
    logs.reserve(tracks.size());
    for (const auto& tr : tracks) {
      auto diff = B::sub(tr.pos[tau], B::constant(ctx, Mat(truth[tau])));
      const auto& v = tr.vint[tau];
      auto quad = B::sum(B::cdiv(B::square(diff), v));
      auto logdet = B::sum(B::log(v));
      auto inner = B::shift(B::add(logdet, quad), 2.0 * std::log(2.0 * kPi));
      logs.push_back(B::scale(inner, -0.5));
    }
    auto step = B::shift(B::logsumexp(B::vcat(ctx, logs)), -logn);
    total = (tau == 0) ? step : B::add(total, step);
  }
  return B::scale(total, -1.0 / static_cast<double>(horizon));
}

// Eager container mirroring one sampled future at the data level.
struct Particle {
  std::vector<AgentState> states;
  std::vector<Vec2> actions;
  std::vector<Vec2> step_noise;           // diagonal of Sigma(h_tau)
  std::vector<Vec2> integrated_variance;  // V_tau
  std::vector<Mat> last_layer_path;       // per step, p x d
};

struct PredictionSet {
  std::vector<Particle> particles;
  double dt = 0.4;
};

// V_tau = dt^2 * sum_{k <= tau} Sigma_k, elementwise on the diagonals.
inline std::vector<Vec2> integrated_variance(const std::vector<Vec2>& step_noise,
                                             double dt) {
  require(dt > 0.0, "integrated_variance: dt must be positive");
  std::vector<Vec2> out;
  out.reserve(step_noise.size());
  Vec2 acc(0.0, 0.0);
  for (const Vec2& s : step_noise) {
    require(s.x() >= 0.0 && s.y() >= 0.0,
            "integrated_variance: negative step variance");
    acc += dt * dt * s;
    out.push_back(acc);
  }
  return out;
}

// Eager rollout packaged with full agent states. States are rebuilt through
// the single-integrator transition so heading and acceleration stay
// consistent with the commanded actions.
inline PredictionSet predict_set(const BoundModel<Eager>& bm,
                                 const std::vector<DimBelief<Eager>>& beliefs,
                                 const std::vector<Mat>& q, const Mat& h_anchor,
                                 const AgentState& s0, double dt,
                                 const RolloutOptions& opts, RandomStream rng) {
  Eager::Ctx ctx;
  auto tracks = rollout<Eager>(ctx, bm, beliefs, q, h_anchor, s0, dt, opts, rng);
  PredictionSet set;
  set.dt = dt;
  set.particles.reserve(tracks.size());
  for (auto& tr : tracks) {
    Particle pc;
    AgentState s = s0;
    for (std::size_t tau = 0; tau < tr.action.size(); ++tau) {
      Vec2 a(tr.action[tau](0, 0), tr.action[tau](1, 0));
      s = dynamics_step(s, a, dt);
      pc.states.push_back(s);
      pc.actions.push_back(a);
      pc.step_noise.push_back(Vec2(tr.sigma2[tau](0, 0), tr.sigma2[tau](1, 0)));
      pc.integrated_variance.push_back(
          Vec2(tr.vint[tau](0, 0), tr.vint[tau](1, 0)));
    }
    for (auto& snap : tr.theta) {
      Mat th(snap.front().rows(), snap.size());
      for (std::size_t j = 0; j < snap.size(); ++j) th.col(j) = snap[j];
      pc.last_layer_path.push_back(th);
    }
    set.particles.push_back(std::move(pc));
  }
  return set;
}

// Deterministic mean future: every sampling source zeroed.
inline std::vector<AgentState> mean_rollout(
    const BoundModel<Eager>& bm, const std::vector<DimBelief<Eager>>& beliefs,
    const std::vector<Mat>& q, const Mat& h_anchor, const AgentState& s0,
    double dt, int horizon) {
  RolloutOptions opts;
  opts.particles = 1;
  opts.horizon = horizon;
  opts.noise_free = true;
  PredictionSet set =
      predict_set(bm, beliefs, q, h_anchor, s0, dt, opts, RandomStream(0));
  return set.particles.front().states;
}

// Data-level mixture loss over a prediction set. Degenerate variances are
// evaluated at a 1e-12 floor so a collapsed mixture still scores.
inline double kde_loss(const PredictionSet& set,
                       const std::vector<Vec2>& truth) {
  require(!set.particles.empty(), "kde_loss: empty prediction set");
  const std::size_t horizon = set.particles.front().states.size();
  require(truth.size() == horizon,
          "kde_loss: truth length does not match prediction horizon");
  const double logn = std::log(static_cast<double>(set.particles.size()));
  constexpr double kVarFloor = 1e-12;

  double total = 0.0;
  std::vector<double> logs(set.particles.size());
  for (std::size_t tau = 0; tau < horizon; ++tau) {
    for (std::size_t i = 0; i < set.particles.size(); ++i) {
      const Particle& pc = set.particles[i];
      require(pc.states.size() == horizon,
              "kde_loss: ragged particle horizons");
      Vec2 diff = pc.states[tau].position - truth[tau];
      Vec2 v = pc.integrated_variance[tau].cwiseMax(kVarFloor);
      logs[i] = -0.5 * (2.0 * std::log(2.0 * kPi) + std::log(v.x()) +
                        std::log(v.y()) + diff.x() * diff.x() / v.x() +
                        diff.y() * diff.y() / v.y());
    }
    double m = *std::max_element(logs.begin(), logs.end());
    double s = 0.0;
    for (double l : logs) s += std::exp(l - m);
    total += m + std::log(s) - logn;
  }
  return -total / static_cast<double>(horizon);
}

}  // namespace kalmeta
