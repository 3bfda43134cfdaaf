#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <vector>

#include "kalmeta/belief.hpp"
#include "kalmeta/random.hpp"

using namespace kalmeta;

namespace {

Mat rand_mat(RandomStream& rs, long r, long c) {
  Mat m(r, c);
  for (long j = 0; j < c; ++j)
    for (long i = 0; i < r; ++i) m(i, j) = rs.uniform(-1.0, 1.0);
  return m;
}

Vec rand_vec(RandomStream& rs, long n) { return rand_mat(rs, n, 1); }

Mat rand_spd(RandomStream& rs, long n) {
  Mat a = rand_mat(rs, n, n);
  Mat s = a * a.transpose();
  s.diagonal().array() += 0.3 * n;
  return s;
}

}  // namespace

TEST_CASE("scalar predict step matches hand-worked values") {
  // N(2, 1) through theta' = 0.5 theta + 1 with process noise 0.1:
  // mean 0.5*2 + 1 = 2.0, variance 0.25*1 + 0.1 = 0.35.
  ParamDynamics dyn;
  dyn.transition = Mat::Constant(1, 1, 0.5);
  dyn.offset = Vec::Constant(1, 1.0);
  dyn.process_noise = Vec::Constant(1, 0.1);

  auto full = predict_step(LastLayerBelief::full(Vec::Constant(1, 2.0),
                                                 Mat::Constant(1, 1, 1.0)),
                           dyn);
  CHECK(full.mean(0) == Catch::Approx(2.0).margin(1e-15));
  CHECK(full.cov(0, 0) == Catch::Approx(0.35).margin(1e-15));
  CHECK(full.step_index == 1);

  auto diag = predict_step(LastLayerBelief::diagonal(Vec::Constant(1, 2.0),
                                                     Vec::Constant(1, 1.0)),
                           dyn);
  CHECK(diag.mode == CovMode::Diagonal);
  CHECK(diag.mean(0) == Catch::Approx(2.0).margin(1e-15));
  CHECK(diag.cov_diag(0) == Catch::Approx(0.35).margin(1e-15));
}

TEST_CASE("scalar correct step matches the conjugate posterior") {
  // Prior N(0,1), phi = 1, noise 1, y = 2: posterior N(1.0, 0.5).
  auto b = LastLayerBelief::full(Vec::Zero(1), Mat::Identity(1, 1));
  auto [post, trace] =
      correct_step(b, Mat::Identity(1, 1), Mat::Identity(1, 1),
                   Vec::Constant(1, 2.0));
  CHECK(post.mean(0) == Catch::Approx(1.0).margin(1e-12));
  CHECK(post.cov(0, 0) == Catch::Approx(0.5).margin(1e-12));
  CHECK(post.step_index == 0);
  CHECK(trace.innovation(0) == Catch::Approx(2.0));
  CHECK(trace.gain(0, 0) == Catch::Approx(0.5));
  // Predictive before correction is N(0, 2).
  CHECK(trace.predictive.mean(0) == Catch::Approx(0.0));
  CHECK(trace.predictive.cov(0, 0) == Catch::Approx(2.0));
  CHECK(trace.predictive_nll ==
        Catch::Approx(0.5 * (std::log(2.0 * kPi * 2.0) + 4.0 / 2.0)));
}

TEST_CASE("predictive distribution matches hand-worked values") {
  // theta ~ N(1, 2), phi = 3, noise 0.5: y ~ N(3, 9*2 + 0.5) = N(3, 18.5).
  auto b = LastLayerBelief::full(Vec::Constant(1, 1.0), Mat::Constant(1, 1, 2.0));
  Gaussian g = predictive_distribution(b, Mat::Constant(1, 1, 3.0),
                                       Mat::Constant(1, 1, 0.5));
  CHECK(g.mean(0) == Catch::Approx(3.0));
  CHECK(g.cov(0, 0) == Catch::Approx(18.5));
}

TEST_CASE("sequential corrections equal the batch regression posterior") {
  RandomStream rs(100);
  for (int rep = 0; rep < 5; ++rep) {
    RandomStream r = rs.child(rep);
    const int p = 2 + r.uniform_int(5);
    const int d = 1 + r.uniform_int(3);
    const int k = 3 + r.uniform_int(6);

    Vec m0 = rand_vec(r, p);
    Mat s0 = rand_spd(r, p);
    auto belief = LastLayerBelief::full(m0, s0);
    ParamDynamics dyn = ParamDynamics::identity(p, 0.0);

    Mat lambda = s0.llt().solve(Mat::Identity(p, p));
    Vec eta = lambda * m0;

    for (int t = 0; t < k; ++t) {
      Mat phi = rand_mat(r, d, p);
      Mat noise = rand_spd(r, d);
      Vec y = rand_vec(r, d);
      belief = predict_step(belief, dyn);
      belief = correct_step(belief, phi, noise, y).first;

      Mat ninv = noise.llt().solve(Mat::Identity(d, d));
      lambda += phi.transpose() * ninv * phi;
      eta += phi.transpose() * ninv * y;
    }

    Mat s_batch = lambda.llt().solve(Mat::Identity(p, p));
    Vec m_batch = s_batch * eta;
    CHECK((belief.mean - m_batch).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((belief.cov_dense() - s_batch).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(belief.step_index == k);
  }
}

TEST_CASE("posterior is invariant to observation order with static dynamics") {
  RandomStream rs(101);
  const int p = 5, k = 6;
  Vec m0 = rand_vec(rs, p);
  Mat s0 = rand_spd(rs, p);

  std::vector<Mat> phis;
  std::vector<Mat> noises;
  std::vector<Vec> ys;
  for (int t = 0; t < k; ++t) {
    phis.push_back(rand_mat(rs, 1, p));
    noises.push_back(Mat::Constant(1, 1, 0.2 + rs.uniform()));
    ys.push_back(rand_vec(rs, 1));
  }

  auto run = [&](const std::vector<int>& order) {
    auto b = LastLayerBelief::full(m0, s0);
    for (int i : order) b = correct_step(b, phis[i], noises[i], ys[i]).first;
    return b;
  };

  std::vector<int> fwd(k);
  std::iota(fwd.begin(), fwd.end(), 0);
  std::vector<int> rev = fwd;
  std::reverse(rev.begin(), rev.end());
  std::vector<int> shuffled{3, 0, 5, 1, 4, 2};

  auto a = run(fwd);
  auto b = run(rev);
  auto c = run(shuffled);
  CHECK((a.mean - b.mean).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((a.cov - b.cov).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((a.mean - c.mean).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((a.cov - c.cov).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("corrections never inflate the covariance") {
  RandomStream rs(102);
  for (int rep = 0; rep < 20; ++rep) {
    RandomStream r = rs.child(rep);
    const int p = 2 + r.uniform_int(8);
    const int d = 1 + r.uniform_int(3);
    auto b = LastLayerBelief::full(rand_vec(r, p), rand_spd(r, p));
    Mat phi = rand_mat(r, d, p);
    Mat noise = rand_spd(r, d);
    Vec y = rand_vec(r, d);
    auto post = correct_step(b, phi, noise, y).first;
    Eigen::SelfAdjointEigenSolver<Mat> es(b.cov - post.cov);
    CHECK(es.eigenvalues().minCoeff() >= -1e-10);
    post.validate();
  }
}

TEST_CASE("independent per-dimension filters equal the block-diagonal joint filter") {
  RandomStream rs(103);
  const int p = 4, d = 3, steps = 5;

  std::vector<Vec> means, qs;
  std::vector<Vec> vars;
  Vec sigma2(d);
  for (int j = 0; j < d; ++j) {
    means.push_back(rand_vec(rs, p));
    Vec v = rand_vec(rs, p);
    vars.push_back((v.array().abs() + 0.2).matrix());
    Vec q = rand_vec(rs, p);
    qs.push_back((q.array().abs() * 0.05).matrix());
    sigma2(j) = 0.3 + rs.uniform();
  }

  // Joint state stacks the d coefficient vectors.
  Vec jm(p * d), jvar(p * d), jq(p * d);
  for (int j = 0; j < d; ++j) {
    jm.segment(j * p, p) = means[j];
    jvar.segment(j * p, p) = vars[j];
    jq.segment(j * p, p) = qs[j];
  }
  auto joint = LastLayerBelief::full(jm, Mat(jvar.asDiagonal()));
  ParamDynamics jdyn = ParamDynamics::identity(p * d, jq);

  std::vector<LastLayerBelief> per;
  std::vector<ParamDynamics> pdyn;
  for (int j = 0; j < d; ++j) {
    per.push_back(LastLayerBelief::diagonal(means[j], vars[j]));
    pdyn.push_back(ParamDynamics::identity(p, qs[j]));
  }

  for (int t = 0; t < steps; ++t) {
    Vec phi = rand_vec(rs, p);
    Vec y = rand_vec(rs, d);

    Mat jphi = Mat::Zero(d, p * d);
    for (int j = 0; j < d; ++j) jphi.block(j, j * p, 1, p) = phi.transpose();
    joint = predict_step(joint, jdyn);
    joint = correct_step(joint, jphi, Mat(sigma2.asDiagonal()), y).first;

    for (int j = 0; j < d; ++j) {
      per[j] = predict_step(per[j], pdyn[j]);
      per[j] = correct_step(per[j], phi.transpose(),
                            Mat::Constant(1, 1, sigma2(j)),
                            Vec::Constant(1, y(j)))
                   .first;
    }
  }

  for (int j = 0; j < d; ++j) {
    CHECK((joint.mean.segment(j * p, p) - per[j].mean).cwiseAbs().maxCoeff() <
          1e-10);
    CHECK((joint.cov.block(j * p, j * p, p, p) - per[j].cov_dense())
              .cwiseAbs()
              .maxCoeff() < 1e-10);
    // Cross blocks stay zero: the dimensions never couple.
    for (int i = 0; i < d; ++i) {
      if (i == j) continue;
      CHECK(joint.cov.block(i * p, j * p, p, p).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("joseph form agrees with the standard update and stays PSD") {
  RandomStream rs(104);
  for (int rep = 0; rep < 10; ++rep) {
    RandomStream r = rs.child(rep);
    const int p = 3 + r.uniform_int(5);
    auto b = LastLayerBelief::full(rand_vec(r, p), rand_spd(r, p));
    Mat phi = rand_mat(r, 2, p);
    Mat noise = rand_spd(r, 2);
    Vec y = rand_vec(r, 2);
    auto std_form = correct_step(b, phi, noise, y, {.joseph = false}).first;
    auto joseph = correct_step(b, phi, noise, y, {.joseph = true}).first;
    CHECK((std_form.mean - joseph.mean).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((std_form.cov - joseph.cov).cwiseAbs().maxCoeff() < 1e-9);
    joseph.validate();
  }
}

TEST_CASE("diagonal-mode correction densifies") {
  RandomStream rs(105);
  const int p = 4;
  auto b = LastLayerBelief::diagonal(rand_vec(rs, p),
                                     Vec::Constant(p, 0.5));
  auto post = correct_step(b, rand_mat(rs, 1, p), Mat::Constant(1, 1, 0.4),
                           Vec::Constant(1, 0.3))
                  .first;
  CHECK(post.mode == CovMode::Full);
  // Off-diagonal structure appears because the feature row couples entries.
  Mat off = post.cov;
  off.diagonal().setZero();
  CHECK(off.cwiseAbs().maxCoeff() > 0.0);
  post.validate();
}

TEST_CASE("zero covariance sampling returns the mean exactly") {
  RandomStream rs(106);
  const int p = 6;
  Vec mean = rand_vec(rs, p);
  auto full = LastLayerBelief::full(mean, Mat::Zero(p, p));
  auto diag = LastLayerBelief::diagonal(mean, Vec::Zero(p));
  RandomStream r1(9), r2(9);
  CHECK((sample_last_layer(full, r1) - mean).cwiseAbs().maxCoeff() == 0.0);
  CHECK((sample_last_layer(diag, r2) - mean).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sampling is seed deterministic and matches the first moments") {
  RandomStream rs(107);
  const int p = 3;
  Vec mean = rand_vec(rs, p);
  Mat cov = rand_spd(rs, p);
  auto b = LastLayerBelief::full(mean, cov);

  RandomStream a(55), c(55);
  CHECK((sample_last_layer(b, a) - sample_last_layer(b, c)).norm() == 0.0);

  RandomStream r(77);
  const int n = 20000;
  Vec acc = Vec::Zero(p);
  Mat acc2 = Mat::Zero(p, p);
  for (int i = 0; i < n; ++i) {
    Vec s = sample_last_layer(b, r);
    acc += s;
    acc2 += (s - mean) * (s - mean).transpose();
  }
  CHECK((acc / n - mean).cwiseAbs().maxCoeff() < 0.05);
  CHECK((acc2 / n - cov).cwiseAbs().maxCoeff() < 0.15);
}

TEST_CASE("belief records round trip exactly") {
  RandomStream rs(108);
  auto full = LastLayerBelief::full(rand_vec(rs, 5), rand_spd(rs, 5));
  full.step_index = 7;
  auto back = LastLayerBelief::from_record(full.to_record());
  CHECK(back.mode == CovMode::Full);
  CHECK(back.step_index == 7);
  CHECK((back.mean - full.mean).norm() == 0.0);
  CHECK((back.cov - full.cov).norm() == 0.0);

  auto diag = LastLayerBelief::diagonal(rand_vec(rs, 4), Vec::Constant(4, 0.25));
  auto dback = LastLayerBelief::from_record(diag.to_record());
  CHECK(dback.mode == CovMode::Diagonal);
  CHECK((dback.cov_diag - diag.cov_diag).norm() == 0.0);
}

TEST_CASE("belief operations reject malformed input") {
  auto b = LastLayerBelief::full(Vec::Zero(3), Mat::Identity(3, 3));

  // Feature width mismatch.
  CHECK_THROWS_AS(
      correct_step(b, Mat::Ones(1, 4), Mat::Identity(1, 1), Vec::Ones(1)),
      InvalidInput);
  // Observation length mismatch.
  CHECK_THROWS_AS(
      correct_step(b, Mat::Ones(2, 3), Mat::Identity(2, 2), Vec::Ones(1)),
      InvalidInput);
  // Noise negative enough to make the innovation covariance indefinite.
  Mat bad = -4.0 * Mat::Identity(1, 1);
  CHECK_THROWS_AS(correct_step(b, Mat::Ones(1, 3), bad, Vec::Ones(1)),
                  NumericalError);

  // Diagonal-mode prediction demands a diagonal transition.
  auto d = LastLayerBelief::diagonal(Vec::Zero(2), Vec::Ones(2));
  ParamDynamics dyn = ParamDynamics::identity(2, 0.0);
  dyn.transition(0, 1) = 0.5;
  dyn.is_identity = false;
  CHECK_THROWS_AS(predict_step(d, dyn), ConfigError);

  // Dimension mismatch between belief and dynamics.
  CHECK_THROWS_AS(predict_step(b, ParamDynamics::identity(2, 0.0)),
                  InvalidInput);
}

TEST_CASE("validate flags asymmetric and indefinite covariances") {
  auto good = LastLayerBelief::full(Vec::Zero(2), Mat::Identity(2, 2));
  CHECK_NOTHROW(good.validate());

  auto asym = good;
  asym.cov(0, 1) = 0.3;
  CHECK_THROWS_AS(asym.validate(), InvalidInput);

  auto indef = good;
  indef.cov(0, 0) = -1.0;
  CHECK_THROWS_AS(indef.validate(), InvalidInput);
}
