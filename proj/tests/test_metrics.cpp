#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "kalmeta/metrics.hpp"
#include "kalmeta/random.hpp"

using namespace kalmeta;

namespace {

std::vector<Vec2> rand_traj(RandomStream& rs, int n) {
  std::vector<Vec2> out;
  Vec2 p(rs.uniform(-1, 1), rs.uniform(-1, 1));
  for (int i = 0; i < n; ++i) {
    p += Vec2(rs.uniform(-0.5, 0.5), rs.uniform(-0.5, 0.5));
    out.push_back(p);
  }
  return out;
}

// A prediction set assembled directly from positions and variances; no model
// involved.
PredictionSet make_set(const std::vector<std::vector<Vec2>>& particle_pos,
                       const std::vector<std::vector<Vec2>>& particle_var) {
  PredictionSet set;
  for (std::size_t i = 0; i < particle_pos.size(); ++i) {
    Particle pc;
    for (std::size_t t = 0; t < particle_pos[i].size(); ++t) {
      AgentState s;
      s.position = particle_pos[i][t];
      s.velocity = Vec2::Zero();
      pc.states.push_back(s);
      pc.integrated_variance.push_back(particle_var[i][t]);
      pc.step_noise.push_back(particle_var[i][t]);
      pc.actions.push_back(Vec2::Zero());
    }
    set.particles.push_back(pc);
  }
  return set;
}

PredictionSet rand_set(RandomStream& rs, int particles, int horizon) {
  std::vector<std::vector<Vec2>> pos(particles), var(particles);
  for (int i = 0; i < particles; ++i) {
    std::vector<Vec2> traj = rand_traj(rs, horizon);
    for (int t = 0; t < horizon; ++t) {
      pos[i].push_back(traj[t]);
      var[i].push_back(Vec2(0.05 + 0.3 * rs.uniform(), 0.05 + 0.3 * rs.uniform()));
    }
  }
  return make_set(pos, var);
}

}  // namespace

TEST_CASE("displacement errors behave on hand-checkable cases") {
  std::vector<Vec2> a = {Vec2(0, 0), Vec2(1, 0), Vec2(1, 1)};

  SECTION("identical trajectories score zero") {
    REQUIRE(ade(a, a) == 0.0);
    REQUIRE(fde(a, a) == 0.0);
  }

  SECTION("a constant offset scores its own norm") {
    Vec2 d(0.3, -0.4);  // norm 0.5
    std::vector<Vec2> shifted;
    for (const Vec2& p : a) shifted.push_back(p + d);
    REQUIRE(ade(a, shifted) == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(fde(a, shifted) == Catch::Approx(0.5).margin(1e-15));
  }

  SECTION("an offset only at the last step leaves ADE a third of it") {
    std::vector<Vec2> b = a;
    b[2] += Vec2(0, 0.6);
    REQUIRE(fde(a, b) == Catch::Approx(0.6).margin(1e-15));
    REQUIRE(ade(a, b) == Catch::Approx(0.2).margin(1e-15));
  }

  SECTION("hand-worked pair") {
    // gaps: (3,4) -> 5; (0,0) -> 0; (5,12) -> 13. ADE 6, FDE 13.
    std::vector<Vec2> p = {Vec2(0, 0), Vec2(1, 1), Vec2(2, 2)};
    std::vector<Vec2> q = {Vec2(3, 4), Vec2(1, 1), Vec2(7, 14)};
    REQUIRE(ade(p, q) == Catch::Approx(6.0).margin(1e-12));
    REQUIRE(fde(p, q) == Catch::Approx(13.0).margin(1e-12));
  }

  SECTION("horizon mismatch is rejected") {
    std::vector<Vec2> shorter = {Vec2(0, 0)};
    REQUIRE_THROWS_AS(ade(a, shorter), InvalidInput);
    REQUIRE_THROWS_AS(fde(shorter, a), InvalidInput);
    REQUIRE_THROWS_AS(ade({}, {}), InvalidInput);
  }
}

TEST_CASE("displacement errors survive rigid motions applied to both tracks") {
  RandomStream rs(401);
  std::vector<Vec2> p = rand_traj(rs, 6);
  std::vector<Vec2> q = rand_traj(rs, 6);
  const double th = 1.13;
  Eigen::Matrix2d rot;
  rot << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
  Vec2 shift(4.0, -2.5);

  std::vector<Vec2> pm, qm;
  for (const Vec2& x : p) pm.push_back(rot * x + shift);
  for (const Vec2& x : q) qm.push_back(rot * x + shift);

  REQUIRE(ade(pm, qm) == Catch::Approx(ade(p, q)).margin(1e-12));
  REQUIRE(fde(pm, qm) == Catch::Approx(fde(p, q)).margin(1e-12));
}

TEST_CASE("best-of-k error takes the exhaustive minimum over the prefix") {
  RandomStream rs(402);
  PredictionSet set = rand_set(rs, 5, 4);
  std::vector<Vec2> truth = rand_traj(rs, 4);

  std::vector<double> per_particle;
  for (const Particle& pc : set.particles)
    per_particle.push_back(ade(positions_of(pc.states), truth));

  REQUIRE(min_ade_k(set, truth, 1) == per_particle[0]);
  for (int k = 1; k <= 5; ++k) {
    double expect = *std::min_element(per_particle.begin(),
                                      per_particle.begin() + k);
    REQUIRE(min_ade_k(set, truth, k) == expect);
  }
  for (int k = 2; k <= 5; ++k)
    REQUIRE(min_ade_k(set, truth, k) <= min_ade_k(set, truth, k - 1));

  SECTION("a particle equal to the truth zeroes the minimum") {
    for (std::size_t t = 0; t < truth.size(); ++t)
      set.particles[2].states[t].position = truth[t];
    REQUIRE(min_ade_k(set, truth, 5) == 0.0);
    REQUIRE(min_ade_k(set, truth, 2) > 0.0);  // not in the prefix yet
  }

  SECTION("asking for more samples than drawn is an error") {
    REQUIRE_THROWS_AS(min_ade_k(set, truth, 6), InvalidInput);
    REQUIRE_THROWS_AS(min_ade_k(set, truth, 0), InvalidInput);
  }
}

TEST_CASE("trajectory likelihood is the mixture loss and matches a direct sum") {
  RandomStream rs(403);
  PredictionSet set = rand_set(rs, 4, 3);
  std::vector<Vec2> truth = rand_traj(rs, 3);

  REQUIRE(traj_nll(set, truth) == kde_loss(set, truth));

  double direct = 0.0;
  for (std::size_t tau = 0; tau < truth.size(); ++tau) {
    double dens = 0.0;
    for (const Particle& pc : set.particles) {
      Vec2 d = pc.states[tau].position - truth[tau];
      Vec2 v = pc.integrated_variance[tau];
      dens += std::exp(-0.5 * (d.x() * d.x() / v.x() + d.y() * d.y() / v.y())) /
              (2.0 * kPi * std::sqrt(v.x() * v.y()));
    }
    direct += std::log(dens / static_cast<double>(set.particles.size()));
  }
  direct = -direct / static_cast<double>(truth.size());
  REQUIRE(traj_nll(set, truth) == Catch::Approx(direct).epsilon(1e-10));
}

TEST_CASE("highest-density rank agrees with the Gaussian closed form") {
  // One axis-aligned Gaussian component: a point at Mahalanobis distance m
  // has analytic rank 1 - exp(-m^2 / 2) in two dimensions.
  Vec2 center(0.4, -0.7);
  Vec2 var(0.09, 0.25);
  PredictionSet set = make_set({{center}}, {{var}});

  for (double m2 : {0.25, 1.0, 2.3, 4.0}) {
    Vec2 gt = center + Vec2(std::sqrt(m2 * var.x() / 2.0),
                            std::sqrt(m2 * var.y() / 2.0));
    double analytic = 1.0 - std::exp(-m2 / 2.0);
    double mc = hpd_rank(set, 0, gt, RandomStream(404), 20000);
    REQUIRE(mc == Catch::Approx(analytic).margin(0.015));
  }
}

TEST_CASE("a point-mass prediction at the truth is covered at every level") {
  std::vector<PredictionSet> preds;
  std::vector<std::vector<Vec2>> truths;
  RandomStream rs(405);
  for (int a = 0; a < 4; ++a) {
    std::vector<Vec2> truth = rand_traj(rs, 3);
    std::vector<std::vector<Vec2>> pos(3), var(3);
    for (int i = 0; i < 3; ++i)
      for (int t = 0; t < 3; ++t) {
        pos[i].push_back(truth[t]);
        var[i].push_back(Vec2::Zero());  // floored internally
      }
    preds.push_back(make_set(pos, var));
    truths.push_back(truth);
  }

  std::vector<double> levels = default_levels();
  CalibrationResult cal =
      calibration(preds, truths, levels, RandomStream(406), 64);
  double expect_ece = 0.0;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    REQUIRE(cal.curve[i].coverage == 1.0);
    expect_ece += 1.0 - levels[i];
  }
  expect_ece /= static_cast<double>(levels.size());
  REQUIRE(cal.ece == Catch::Approx(expect_ece).margin(1e-12));
  REQUIRE(cal.points == 12);
}

TEST_CASE("self-drawn truths calibrate close to the diagonal") {
  // Truths sampled from the very mixture being evaluated: coverage must track
  // the nominal level. Budget kept small here; the strict threshold runs in
  // the acceptance harness.
  RandomStream rs(407);
  std::vector<PredictionSet> preds;
  std::vector<std::vector<Vec2>> truths;
  for (int a = 0; a < 200; ++a) {
    PredictionSet set = rand_set(rs, 4, 3);
    RandomStream draw = rs.child(1000 + a);
    std::vector<Vec2> truth;
    for (int t = 0; t < 3; ++t) truth.push_back(sample_mixture(set, t, draw));
    preds.push_back(set);
    truths.push_back(truth);
  }
  CalibrationResult cal = calibration(preds, truths, default_levels(),
                                      RandomStream(408), 128);
  REQUIRE(cal.points == 600);
  REQUIRE(cal.ece < 0.06);
  for (const CalibrationPoint& pt : cal.curve) {
    REQUIRE(pt.coverage >= 0.0);
    REQUIRE(pt.coverage <= 1.0);
  }
}

TEST_CASE("calibration is deterministic and validates its levels") {
  RandomStream rs(409);
  std::vector<PredictionSet> preds = {rand_set(rs, 3, 2)};
  std::vector<std::vector<Vec2>> truths = {rand_traj(rs, 2)};

  CalibrationResult a =
      calibration(preds, truths, default_levels(), RandomStream(410), 64);
  CalibrationResult b =
      calibration(preds, truths, default_levels(), RandomStream(410), 64);
  REQUIRE(a.ece == b.ece);
  for (std::size_t i = 0; i < a.curve.size(); ++i)
    REQUIRE(a.curve[i].coverage == b.curve[i].coverage);

  REQUIRE_THROWS_AS(
      calibration(preds, truths, {0.5, 0.5}, RandomStream(1), 8), InvalidInput);
  REQUIRE_THROWS_AS(
      calibration(preds, truths, {0.2, 1.2}, RandomStream(1), 8), InvalidInput);
  REQUIRE_THROWS_AS(
      calibration(preds, truths, {}, RandomStream(1), 8), InvalidInput);
}

TEST_CASE("bootstrap intervals bracket the statistic sensibly") {
  SECTION("constant data collapses the interval") {
    std::vector<double> v(20, 3.25);
    CI ci = bootstrap_ci(v, RandomStream(411));
    REQUIRE(ci.lo == 3.25);
    REQUIRE(ci.hi == 3.25);
  }

  SECTION("the interval contains the point estimate and is ordered") {
    RandomStream rs(412);
    std::vector<double> v;
    for (int i = 0; i < 150; ++i) v.push_back(rs.normal() + 2.0);
    CI mean_ci = bootstrap_ci(v, RandomStream(413), stat_mean, 1000);
    REQUIRE(mean_ci.lo <= stat_mean(v));
    REQUIRE(stat_mean(v) <= mean_ci.hi);
    REQUIRE(mean_ci.hi - mean_ci.lo < 1.0);

    CI med_ci = bootstrap_ci(v, RandomStream(414), stat_median, 1000);
    REQUIRE(med_ci.lo <= stat_median(v));
    REQUIRE(stat_median(v) <= med_ci.hi);
  }

  SECTION("same seed, same interval") {
    std::vector<double> v = {1.0, 2.0, 4.0, 8.0, 16.0};
    CI a = bootstrap_ci(v, RandomStream(415));
    CI b = bootstrap_ci(v, RandomStream(415));
    REQUIRE(a.lo == b.lo);
    REQUIRE(a.hi == b.hi);
  }
}

TEST_CASE("the aggregate report wires every metric consistently") {
  RandomStream rs(416);
  std::vector<AgentEval> agents;
  for (int a = 0; a < 6; ++a) {
    AgentEval ev;
    ev.set = rand_set(rs, 10, 3);
    ev.truth = rand_traj(rs, 3);
    ev.mean_traj = positions_of(ev.set.particles[0].states);
    agents.push_back(ev);
  }

  MetricsReport rep =
      evaluate_agents(agents, default_levels(), RandomStream(417), 32, 200);
  REQUIRE(rep.agents == 6);
  REQUIRE(rep.calibration_points == 18);
  REQUIRE(rep.curve.size() == default_levels().size());

  std::vector<double> v_ade;
  for (const AgentEval& a : agents) v_ade.push_back(ade(a.mean_traj, a.truth));
  REQUIRE(rep.ade.value == Catch::Approx(stat_mean(v_ade)).margin(1e-15));
  REQUIRE(rep.ade.ci.lo <= rep.ade.value);
  REQUIRE(rep.ade.value <= rep.ade.ci.hi);
  REQUIRE(rep.min_ade_10.value <= rep.min_ade_5.value);
  REQUIRE(rep.ece >= 0.0);
  REQUIRE(rep.ece <= 1.0);

  MetricsReport rep2 =
      evaluate_agents(agents, default_levels(), RandomStream(417), 32, 200);
  REQUIRE(rep2.ade.ci.lo == rep.ade.ci.lo);
  REQUIRE(rep2.ece == rep.ece);
}
