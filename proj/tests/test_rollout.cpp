#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "kalmeta/random.hpp"
#include "kalmeta/rollout.hpp"

using namespace kalmeta;

namespace {

ModelConfig tiny_config(double floor_v = 1e-4, double ceil_v = 4.0) {
  ModelConfig cfg;
  cfg.enc_hidden = 5;
  cfg.dec_hidden = 5;
  cfg.embed_dim = 4;
  cfg.att_dim = 3;
  cfg.feat_dim = 4;
  cfg.out_dim = 2;
  cfg.context_dim = 0;
  cfg.sigma2_floor = floor_v;
  cfg.sigma2_ceil = ceil_v;
  return cfg;
}

SceneWindow small_window(RandomStream& rs) {
  SceneWindow w;
  w.dt = 0.4;
  double x = 0, y = 0;
  for (int t = 0; t < 3; ++t) {
    double vx = rs.uniform(-1, 1), vy = rs.uniform(-1, 1);
    x += 0.4 * vx;
    y += 0.4 * vy;
    AgentState s;
    s.position = Vec2(x, y);
    s.velocity = Vec2(vx, vy);
    w.ego_history.push_back(s);
  }
  return w;
}

Mat rand_spd(RandomStream& rs, long n, double scale) {
  Mat a(n, n);
  for (long j = 0; j < n; ++j)
    for (long i = 0; i < n; ++i) a(i, j) = rs.uniform(-1, 1);
  Mat s = scale * (a * a.transpose());
  s.diagonal().array() += scale * 0.3 * n;
  return s;
}

struct RolloutFixture {
  ModelConfig cfg = tiny_config();
  ModelParameters mp;
  SceneWindow window;
  std::vector<Mat> means, covs, qs;
  std::vector<Vec2> truth;
  RolloutOptions opts;

  explicit RolloutFixture(std::uint64_t seed) : mp(make_params(seed)) {
    RandomStream rs(seed);
    RandomStream wr = rs.child(2);
    window = small_window(wr);
    for (int j = 0; j < cfg.out_dim; ++j) {
      RandomStream br = rs.child(3, j);
      Mat m(cfg.feat_dim, 1);
      for (int i = 0; i < cfg.feat_dim; ++i) m(i, 0) = br.uniform(-0.5, 0.5);
      means.push_back(m);
      covs.push_back(rand_spd(br, cfg.feat_dim, 0.2));
      Mat q(cfg.feat_dim, 1);
      for (int i = 0; i < cfg.feat_dim; ++i) q(i, 0) = 0.01 + 0.02 * br.uniform();
      qs.push_back(q);
    }
    RandomStream tr = rs.child(4);
    Vec2 at = window.current().position;
    for (int t = 0; t < 4; ++t) {
      at += Vec2(tr.uniform(-0.5, 0.5), tr.uniform(-0.5, 0.5));
      truth.push_back(at);
    }
    opts.particles = 3;
    opts.horizon = 4;
  }

  static ModelParameters make_params(std::uint64_t seed) {
    return ModelParameters::init(tiny_config(), RandomStream(seed).child(1));
  }

  template <class B>
  typename B::M loss(typename B::Ctx& ctx, const BoundModel<B>& bm,
                     const RolloutOptions& o) const {
    auto v = encode<B>(ctx, bm, window);
    auto h0 = decoder_init<B>(bm, v);
    std::vector<DimBelief<B>> beliefs;
    std::vector<typename B::M> qv;
    for (int j = 0; j < cfg.out_dim; ++j) {
      beliefs.push_back({B::constant(ctx, means[j]), B::constant(ctx, covs[j])});
      qv.push_back(B::constant(ctx, qs[j]));
    }
    auto tracks = rollout<B>(ctx, bm, beliefs, qv, h0, window.current(),
                             window.dt, o, RandomStream(77));
    return kde_loss_tracks<B>(ctx, tracks, truth);
  }

  double eval(const ModelParameters& params) const {
    Eager::Ctx ctx;
    auto bm = BoundModel<Eager>::bind(ctx, params);
    return loss<Eager>(ctx, bm, opts)(0, 0);
  }
};

}  // namespace

TEST_CASE("rollout with all noise zeroed collapses onto the mean trajectory") {
  ModelConfig cfg = tiny_config(0.0, 0.0);  // noise head pinned to zero
  ModelParameters mp = ModelParameters::init(cfg, RandomStream(31));
  RandomStream rs(32);
  SceneWindow w = small_window(rs);

  Eager::Ctx ctx;
  auto bm = BoundModel<Eager>::bind(ctx, mp);
  Mat h0 = decoder_init<Eager>(bm, encode<Eager>(ctx, bm, w));

  std::vector<DimBelief<Eager>> beliefs;
  std::vector<Mat> q;
  for (int j = 0; j < cfg.out_dim; ++j) {
    Mat m(cfg.feat_dim, 1);
    for (int i = 0; i < cfg.feat_dim; ++i) m(i, 0) = rs.uniform(-0.5, 0.5);
    beliefs.push_back({m, Mat::Zero(cfg.feat_dim, cfg.feat_dim)});
    q.push_back(Mat::Zero(cfg.feat_dim, 1));
  }

  RolloutOptions opts;
  opts.particles = 5;
  opts.horizon = 6;
  opts.noise_free = false;  // noise paths exist but every variance is zero
  PredictionSet set =
      predict_set(bm, beliefs, q, h0, w.current(), w.dt, opts, RandomStream(5));
  std::vector<AgentState> mean =
      mean_rollout(bm, beliefs, q, h0, w.current(), w.dt, opts.horizon);

  for (const Particle& pc : set.particles) {
    REQUIRE(pc.states.size() == mean.size());
    for (std::size_t t = 0; t < mean.size(); ++t) {
      CHECK(pc.states[t].position.x() == mean[t].position.x());
      CHECK(pc.states[t].position.y() == mean[t].position.y());
      CHECK(pc.step_noise[t].norm() == 0.0);
      CHECK(pc.integrated_variance[t].norm() == 0.0);
    }
    // Theta never moves: zero belief covariance and zero diffusion.
    for (const Mat& th : pc.last_layer_path)
      CHECK((th - pc.last_layer_path.front()).norm() == 0.0);
  }
  // The degenerate mixture still evaluates through the variance floor.
  std::vector<Vec2> truth(opts.horizon, w.current().position);
  CHECK(std::isfinite(kde_loss(set, truth)));
}

TEST_CASE("integrated variance is the prefix sum of step noise") {
  RolloutFixture fx(40);
  Eager::Ctx ctx;
  auto bm = BoundModel<Eager>::bind(ctx, fx.mp);
  Mat h0 = decoder_init<Eager>(bm, encode<Eager>(ctx, bm, fx.window));
  std::vector<DimBelief<Eager>> beliefs;
  for (int j = 0; j < fx.cfg.out_dim; ++j)
    beliefs.push_back({fx.means[j], fx.covs[j]});
  RolloutOptions opts;
  opts.particles = 2;
  opts.horizon = 5;
  PredictionSet set = predict_set(bm, beliefs, fx.qs, h0, fx.window.current(),
                                  fx.window.dt, opts, RandomStream(9));
  for (const Particle& pc : set.particles) {
    std::vector<Vec2> expect = integrated_variance(pc.step_noise, set.dt);
    for (std::size_t t = 0; t < expect.size(); ++t) {
      CHECK(pc.integrated_variance[t].x() == Catch::Approx(expect[t].x()).epsilon(1e-14));
      CHECK(pc.integrated_variance[t].y() == Catch::Approx(expect[t].y()).epsilon(1e-14));
    }
    // Monotone nondecreasing by construction.
    for (std::size_t t = 1; t < expect.size(); ++t) {
      CHECK(pc.integrated_variance[t].x() >= pc.integrated_variance[t - 1].x());
      CHECK(pc.integrated_variance[t].y() >= pc.integrated_variance[t - 1].y());
    }
  }
}

TEST_CASE("mixture loss matches a direct density computation") {
  RandomStream rs(41);
  for (int rep = 0; rep < 5; ++rep) {
    RandomStream r = rs.child(rep);
    const int n = 1 + r.uniform_int(6);
    const int horizon = 1 + r.uniform_int(5);
    PredictionSet set;
    set.dt = 0.4;
    std::vector<Vec2> truth;
    for (int t = 0; t < horizon; ++t)
      truth.push_back(Vec2(r.uniform(-2, 2), r.uniform(-2, 2)));
    for (int i = 0; i < n; ++i) {
      Particle pc;
      for (int t = 0; t < horizon; ++t) {
        AgentState s;
        s.position = Vec2(r.uniform(-2, 2), r.uniform(-2, 2));
        pc.states.push_back(s);
        pc.step_noise.push_back(Vec2(0.1, 0.1));
        pc.integrated_variance.push_back(
            Vec2(0.05 + r.uniform(), 0.05 + r.uniform()));
      }
      set.particles.push_back(pc);
    }

    // Oracle: average the two-dimensional Gaussian densities directly.
    double total = 0.0;
    for (int t = 0; t < horizon; ++t) {
      double mix = 0.0;
      for (const Particle& pc : set.particles) {
        Vec2 d = pc.states[t].position - truth[t];
        Vec2 v = pc.integrated_variance[t];
        double density = std::exp(-0.5 * (d.x() * d.x() / v.x() +
                                          d.y() * d.y() / v.y())) /
                         (2.0 * kPi * std::sqrt(v.x() * v.y()));
        mix += density;
      }
      total += std::log(mix / n);
    }
    double oracle = -total / horizon;
    CHECK(kde_loss(set, truth) == Catch::Approx(oracle).epsilon(1e-12));
  }
}

TEST_CASE("prediction sets and raw tracks agree on the mixture loss") {
  RolloutFixture fx(42);
  Eager::Ctx ctx;
  auto bm = BoundModel<Eager>::bind(ctx, fx.mp);
  Mat h0 = decoder_init<Eager>(bm, encode<Eager>(ctx, bm, fx.window));
  std::vector<DimBelief<Eager>> beliefs;
  for (int j = 0; j < fx.cfg.out_dim; ++j)
    beliefs.push_back({fx.means[j], fx.covs[j]});

  auto tracks = rollout<Eager>(ctx, bm, beliefs, fx.qs, h0, fx.window.current(),
                               fx.window.dt, fx.opts, RandomStream(77));
  Mat from_tracks = kde_loss_tracks<Eager>(ctx, tracks, fx.truth);

  PredictionSet set = predict_set(bm, beliefs, fx.qs, h0, fx.window.current(),
                                  fx.window.dt, fx.opts, RandomStream(77));
  CHECK(from_tracks(0, 0) == Catch::Approx(kde_loss(set, fx.truth)).epsilon(1e-12));
}

TEST_CASE("rollouts are seed deterministic and particles are distinct") {
  RolloutFixture fx(43);
  double a = fx.eval(fx.mp);
  double b = fx.eval(fx.mp);
  CHECK(a == b);

  Eager::Ctx ctx;
  auto bm = BoundModel<Eager>::bind(ctx, fx.mp);
  Mat h0 = decoder_init<Eager>(bm, encode<Eager>(ctx, bm, fx.window));
  std::vector<DimBelief<Eager>> beliefs;
  for (int j = 0; j < fx.cfg.out_dim; ++j)
    beliefs.push_back({fx.means[j], fx.covs[j]});
  PredictionSet set = predict_set(bm, beliefs, fx.qs, h0, fx.window.current(),
                                  fx.window.dt, fx.opts, RandomStream(6));
  REQUIRE(set.particles.size() >= 2);
  double gap = (set.particles[0].states.back().position -
                set.particles[1].states.back().position)
                   .norm();
  CHECK(gap > 1e-8);

  // Particle count does not perturb the draws of earlier particles.
  RolloutOptions more = fx.opts;
  more.particles = fx.opts.particles + 3;
  PredictionSet bigger = predict_set(bm, beliefs, fx.qs, h0, fx.window.current(),
                                     fx.window.dt, more, RandomStream(6));
  for (int i = 0; i < fx.opts.particles; ++i) {
    CHECK((bigger.particles[i].states.back().position -
           set.particles[i].states.back().position)
              .norm() == 0.0);
  }
}

TEST_CASE("eager and taped rollouts produce identical values") {
  RolloutFixture fx(44);
  double eager_val = fx.eval(fx.mp);

  ad::Tape tape;
  Rev::Ctx rctx{&tape};
  auto bm = BoundModel<Rev>::bind(rctx, fx.mp);
  auto loss = fx.loss<Rev>(rctx, bm, fx.opts);
  CHECK(eager_val == Catch::Approx(tape.val(loss)(0, 0)).epsilon(1e-14));
}

TEST_CASE("rollout and mixture loss gradients match finite differences") {
  RolloutFixture fx(45);

  ad::Tape tape;
  Rev::Ctx rctx{&tape};
  auto bm = BoundModel<Rev>::bind(rctx, fx.mp);

  // Rebuild the loss with belief parameters as tape leaves so their
  // gradients are observable as well.
  auto v = encode<Rev>(rctx, bm, fx.window);
  auto h0 = decoder_init<Rev>(bm, v);
  std::vector<DimBelief<Rev>> beliefs;
  std::vector<ad::Var> qv;
  for (int j = 0; j < fx.cfg.out_dim; ++j) {
    beliefs.push_back({Rev::constant(rctx, fx.means[j]),
                       Rev::constant(rctx, fx.covs[j])});
    qv.push_back(Rev::constant(rctx, fx.qs[j]));
  }
  auto tracks = rollout<Rev>(rctx, bm, beliefs, qv, h0, fx.window.current(),
                             fx.window.dt, fx.opts, RandomStream(77));
  auto loss = kde_loss_tracks<Rev>(rctx, tracks, fx.truth);
  tape.backward(loss);
  std::vector<Mat> wgrads = collect_gradients(tape, bm);

  const double step = 1e-5;
  double worst = 0.0;
  auto probe = [&](auto eval_fn, double analytic, auto&& bump) {
    bump(step);
    double up = eval_fn();
    bump(-2 * step);
    double dn = eval_fn();
    bump(step);  // restore
    double fd = (up - dn) / (2 * step);
    worst = std::max(worst, std::abs(fd - analytic) /
                                std::max({1.0, std::abs(fd), std::abs(analytic)}));
  };

  // Belief means, covariances, and process noise.
  RolloutFixture work = fx;
  auto eval_beliefs = [&]() {
    Eager::Ctx ctx;
    auto ebm = BoundModel<Eager>::bind(ctx, work.mp);
    auto ev = encode<Eager>(ctx, ebm, work.window);
    Mat eh0 = decoder_init<Eager>(ebm, ev);
    std::vector<DimBelief<Eager>> bl;
    for (int j = 0; j < work.cfg.out_dim; ++j)
      bl.push_back({work.means[j], work.covs[j]});
    auto tr = rollout<Eager>(ctx, ebm, bl, work.qs, eh0,
                             work.window.current(), work.window.dt, work.opts,
                             RandomStream(77));
    return kde_loss_tracks<Eager>(ctx, tr, work.truth)(0, 0);
  };

  for (int j = 0; j < fx.cfg.out_dim; ++j) {
    Mat gmean = tape.grad(beliefs[j].mean);
    Mat gcov = tape.grad(beliefs[j].cov);
    Mat gq = tape.grad(qv[j]);
    for (int i = 0; i < fx.cfg.feat_dim; ++i) {
      probe(eval_beliefs, gmean(i, 0),
            [&](double d) { work.means[j](i, 0) += d; });
      probe(eval_beliefs, gq(i, 0), [&](double d) { work.qs[j](i, 0) += d; });
      probe(eval_beliefs, gcov(i, i),
            [&](double d) { work.covs[j](i, i) += d; });
    }
    probe(eval_beliefs, gcov(1, 0), [&](double d) { work.covs[j](1, 0) += d; });
    probe(eval_beliefs, gcov(0, 2), [&](double d) { work.covs[j](0, 2) += d; });
  }

  // A sample of network weights along every stage of the pipeline.
  RandomStream pr(450);
  for (std::size_t k = 0; k < fx.mp.layout.size(); ++k) {
    const long n = fx.mp.values[k].size();
    for (int rep = 0; rep < std::min<long>(2, n); ++rep) {
      long idx = pr.uniform_int(static_cast<int>(n));
      probe([&]() { return work.eval(work.mp); }, wgrads[k].data()[idx],
            [&](double d) { work.mp.values[k].data()[idx] += d; });
    }
  }
  CHECK(worst < 2e-6);
}

TEST_CASE("detached diffusion removes the process-noise gradient path") {
  RolloutFixture fx(46);
  for (bool detach : {false, true}) {
    ad::Tape tape;
    Rev::Ctx rctx{&tape};
    auto bm = BoundModel<Rev>::bind(rctx, fx.mp);
    auto v = encode<Rev>(rctx, bm, fx.window);
    auto h0 = decoder_init<Rev>(bm, v);
    std::vector<DimBelief<Rev>> beliefs;
    std::vector<ad::Var> qv;
    for (int j = 0; j < fx.cfg.out_dim; ++j) {
      beliefs.push_back({Rev::constant(rctx, fx.means[j]),
                         Rev::constant(rctx, fx.covs[j])});
      qv.push_back(Rev::constant(rctx, fx.qs[j]));
    }
    RolloutOptions opts = fx.opts;
    opts.detach_diffusion = detach;
    auto tracks = rollout<Rev>(rctx, bm, beliefs, qv, h0, fx.window.current(),
                               fx.window.dt, opts, RandomStream(77));
    auto loss = kde_loss_tracks<Rev>(rctx, tracks, fx.truth);
    tape.backward(loss);
    double qgrad = 0.0;
    for (const auto& q : qv) qgrad += tape.grad(q).cwiseAbs().sum();
    if (detach)
      CHECK(qgrad == 0.0);
    else
      CHECK(qgrad > 0.0);
  }
}

TEST_CASE("rollout validates its inputs") {
  RolloutFixture fx(47);
  Eager::Ctx ctx;
  auto bm = BoundModel<Eager>::bind(ctx, fx.mp);
  Mat h0 = decoder_init<Eager>(bm, encode<Eager>(ctx, bm, fx.window));
  std::vector<DimBelief<Eager>> beliefs;
  for (int j = 0; j < fx.cfg.out_dim; ++j)
    beliefs.push_back({fx.means[j], fx.covs[j]});

  std::vector<DimBelief<Eager>> missing(beliefs.begin(), beliefs.begin() + 1);
  RolloutOptions opts;
  CHECK_THROWS_AS(rollout<Eager>(ctx, bm, missing, fx.qs, h0,
                                 fx.window.current(), fx.window.dt, opts,
                                 RandomStream(1)),
                  InvalidInput);
  CHECK_THROWS_AS(rollout<Eager>(ctx, bm, beliefs, fx.qs, h0,
                                 fx.window.current(), 0.0, opts,
                                 RandomStream(1)),
                  InvalidInput);
  RolloutOptions zero;
  zero.particles = 0;
  CHECK_THROWS_AS(rollout<Eager>(ctx, bm, beliefs, fx.qs, h0,
                                 fx.window.current(), fx.window.dt, zero,
                                 RandomStream(1)),
                  InvalidInput);

  std::vector<Vec2> short_truth(2);
  PredictionSet set = predict_set(bm, beliefs, fx.qs, h0, fx.window.current(),
                                  fx.window.dt, fx.opts, RandomStream(1));
  CHECK_THROWS_AS(kde_loss(set, short_truth), InvalidInput);
}
