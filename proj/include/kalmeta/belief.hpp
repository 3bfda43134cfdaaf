#pragma once

#include <utility>
#include <vector>

#include "kalmeta/common.hpp"
#include "kalmeta/random.hpp"

namespace kalmeta {

// Gaussian belief over the regression coefficients of a linear readout,
// maintained by Kalman predict/correct steps. The belief may store its
// covariance dense (Full) or as a diagonal (Diagonal). Corrections couple
// coordinates through the feature vector, so a correction always produces a
// Full belief; Diagonal survives prediction only.
enum class CovMode { Full, Diagonal };

struct Gaussian {
  Vec mean;
  Mat cov;
};

// -log N(y; g.mean, g.cov). Cholesky based; the covariance must be PD.
inline double gaussian_nll(const Gaussian& g, const Vec& y) {
  const long d = g.mean.size();
  require(y.size() == d, "gaussian_nll: dimension mismatch");
  Mat c = 0.5 * (g.cov + g.cov.transpose());
  Eigen::LLT<Mat> llt(c);
  if (llt.info() != Eigen::Success) {
    c.diagonal().array() += 1e-9;
    llt.compute(c);
    if (llt.info() != Eigen::Success)
      throw NumericalError("gaussian_nll: covariance is not positive definite");
  }
  Vec e = y - g.mean;
  Vec w = llt.matrixL().solve(e);
  double logdet = 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
  return 0.5 * (d * std::log(2.0 * kPi) + logdet + w.squaredNorm());
}

inline double gaussian_nll_scalar(double mean, double var, double y) {
  if (!(var > 0.0))
    throw NumericalError("gaussian_nll_scalar: variance must be positive");
  double e = y - mean;
  return 0.5 * (std::log(2.0 * kPi * var) + e * e / var);
}

// Flat form for checkpoint embedding.
struct BeliefRecord {
  int p = 0;
  CovMode mode = CovMode::Full;
  std::vector<double> mean;
  std::vector<double> cov;  // p*p entries (Full) or p entries (Diagonal)
  int step_index = 0;
};

struct LastLayerBelief {
  Vec mean;
  CovMode mode = CovMode::Full;
  Mat cov;       // used when mode == Full
  Vec cov_diag;  // used when mode == Diagonal
  int step_index = 0;

  int dim() const { return static_cast<int>(mean.size()); }

  Mat cov_dense() const {
    if (mode == CovMode::Full) return cov;
    return Mat(cov_diag.asDiagonal());
  }

  static LastLayerBelief full(Vec mean, Mat cov) {
    LastLayerBelief b;
    b.mean = std::move(mean);
    b.cov = std::move(cov);
    b.mode = CovMode::Full;
    b.check_shapes();
    return b;
  }

  static LastLayerBelief diagonal(Vec mean, Vec cov_diag) {
    LastLayerBelief b;
    b.mean = std::move(mean);
    b.cov_diag = std::move(cov_diag);
    b.mode = CovMode::Diagonal;
    b.check_shapes();
    return b;
  }

  void check_shapes() const {
    const long p = mean.size();
    require(p > 0, "belief: empty mean");
    if (mode == CovMode::Full)
      require(cov.rows() == p && cov.cols() == p,
              "belief: covariance shape does not match mean");
    else
      require(cov_diag.size() == p,
              "belief: diagonal covariance length does not match mean");
  }

  // Symmetry within 1e-10 (relative), non-negative variances, finite entries.
  void validate() const {
    check_shapes();
    require(all_finite(mean), "belief: non-finite mean");
    if (mode == CovMode::Diagonal) {
      require(all_finite(cov_diag), "belief: non-finite covariance");
      require((cov_diag.array() >= -1e-10).all(),
              "belief: negative variance in diagonal covariance");
      return;
    }
    require(all_finite(cov), "belief: non-finite covariance");
    double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
    require((cov - cov.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * scale,
            "belief: covariance is not symmetric");
    Eigen::SelfAdjointEigenSolver<Mat> es(cov);
    require(es.eigenvalues().minCoeff() >= -1e-10 * scale,
            "belief: covariance is not positive semidefinite");
  }

  BeliefRecord to_record() const {
    BeliefRecord r;
    r.p = dim();
    r.mode = mode;
    r.step_index = step_index;
    r.mean.assign(mean.data(), mean.data() + mean.size());
    if (mode == CovMode::Full)
      r.cov.assign(cov.data(), cov.data() + cov.size());
    else
      r.cov.assign(cov_diag.data(), cov_diag.data() + cov_diag.size());
    return r;
  }

  static LastLayerBelief from_record(const BeliefRecord& r) {
    LastLayerBelief b;
    b.mode = r.mode;
    b.step_index = r.step_index;
    require(static_cast<int>(r.mean.size()) == r.p, "belief record: bad mean length");
    b.mean = Eigen::Map<const Vec>(r.mean.data(), r.p);
    if (r.mode == CovMode::Full) {
      require(static_cast<int>(r.cov.size()) == r.p * r.p,
              "belief record: bad covariance length");
      b.cov = Eigen::Map<const Mat>(r.cov.data(), r.p, r.p);
    } else {
      require(static_cast<int>(r.cov.size()) == r.p,
              "belief record: bad covariance length");
      b.cov_diag = Eigen::Map<const Vec>(r.cov.data(), r.p);
    }
    b.check_shapes();
    return b;
  }
};

// Linear-Gaussian dynamics of the readout coefficients between time steps:
// theta' = transition * theta + offset + w, w ~ N(0, diag(process_noise)).
struct ParamDynamics {
  Mat transition;
  Vec offset;
  Vec process_noise;
  bool is_identity = false;

  static ParamDynamics identity(int p, const Vec& q) {
    require(q.size() == p, "ParamDynamics: process noise length mismatch");
    require((q.array() >= 0.0).all(), "ParamDynamics: negative process noise");
    ParamDynamics d;
    d.transition = Mat::Identity(p, p);
    d.offset = Vec::Zero(p);
    d.process_noise = q;
    d.is_identity = true;
    return d;
  }

  static ParamDynamics identity(int p, double q) {
    return identity(p, Vec::Constant(p, q));
  }

  bool transition_is_diagonal() const {
    Mat off = transition;
    off.diagonal().setZero();
    return off.cwiseAbs().maxCoeff() == 0.0;
  }

  void check(int p) const {
    require(transition.rows() == p && transition.cols() == p,
            "ParamDynamics: transition shape mismatch");
    require(offset.size() == p, "ParamDynamics: offset length mismatch");
    require(process_noise.size() == p,
            "ParamDynamics: process noise length mismatch");
    require((process_noise.array() >= 0.0).all(),
            "ParamDynamics: negative process noise");
  }
};

// Time update. Diagonal beliefs stay diagonal, which requires a diagonal
// transition; a dense transition in diagonal mode is a configuration error.
inline LastLayerBelief predict_step(const LastLayerBelief& b,
                                    const ParamDynamics& dyn) {
  b.check_shapes();
  dyn.check(b.dim());
  LastLayerBelief out = b;
  out.step_index = b.step_index + 1;
  if (b.mode == CovMode::Diagonal) {
    if (!dyn.transition_is_diagonal())
      throw ConfigError(
          "predict_step: diagonal belief requires a diagonal transition");
    Vec a = dyn.transition.diagonal();
    out.mean = a.cwiseProduct(b.mean) + dyn.offset;
    out.cov_diag = a.array().square().matrix().cwiseProduct(b.cov_diag) +
                   dyn.process_noise;
    return out;
  }
  if (dyn.is_identity) {
    out.mean = b.mean + dyn.offset;
    out.cov = b.cov;
  } else {
    out.mean = dyn.transition * b.mean + dyn.offset;
    out.cov = dyn.transition * b.cov * dyn.transition.transpose();
  }
  out.cov.diagonal() += dyn.process_noise;
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  return out;
}

struct CorrectionOptions {
  bool joseph = false;  // Joseph-stabilized covariance update
};

struct CorrectionTrace {
  Vec innovation;       // y - phi * mean, under the pre-correction belief
  Mat gain;             // p x d Kalman gain
  Gaussian predictive;  // observation-space predictive before correction
  double predictive_nll = 0.0;
};

// Observation-space predictive N(phi * mean, phi S phi' + noise).
inline Gaussian predictive_distribution(const LastLayerBelief& b,
                                        const Mat& phi, const Mat& noise) {
  b.check_shapes();
  const long p = b.dim();
  const long d = phi.rows();
  require(phi.cols() == p, "predictive: feature width does not match belief");
  require(noise.rows() == d && noise.cols() == d,
          "predictive: noise shape mismatch");
  Gaussian g;
  g.mean = phi * b.mean;
  Mat phis = b.mode == CovMode::Full
                 ? Mat(phi * b.cov)
                 : Mat(phi * b.cov_diag.asDiagonal());
  g.cov = phis * phi.transpose() + noise;
  g.cov = 0.5 * (g.cov + g.cov.transpose());
  return g;
}

// Measurement update with observation y = phi * theta + v, v ~ N(0, noise).
// The innovation covariance is factorized rather than inverted; a failed
// factorization is retried once with 1e-9 jitter, then raises. The term
// phi * S is formed once and reused by both the gain and the covariance
// downdate.
inline std::pair<LastLayerBelief, CorrectionTrace> correct_step(
    const LastLayerBelief& b, const Mat& phi, const Mat& noise, const Vec& y,
    const CorrectionOptions& opts = {}) {
  b.check_shapes();
  const long p = b.dim();
  const long d = phi.rows();
  require(phi.cols() == p, "correct_step: feature width does not match belief");
  require(noise.rows() == d && noise.cols() == d,
          "correct_step: noise shape mismatch");
  require(y.size() == d, "correct_step: observation length mismatch");
  require(all_finite(phi) && all_finite(noise) && all_finite(y),
          "correct_step: non-finite input");

  Mat s = b.cov_dense();
  Mat phis = phi * s;  // d x p
  Mat pmat = phis * phi.transpose() + noise;
  pmat = 0.5 * (pmat + pmat.transpose());

  Eigen::LLT<Mat> llt(pmat);
  if (llt.info() != Eigen::Success) {
    pmat.diagonal().array() += 1e-9;
    llt.compute(pmat);
    if (llt.info() != Eigen::Success)
      throw NumericalError(
          "correct_step: innovation covariance is not positive definite");
  }

  Mat gain = llt.solve(phis).transpose();  // p x d
  Vec innovation = y - phi * b.mean;

  LastLayerBelief out;
  out.mode = CovMode::Full;
  out.step_index = b.step_index;
  out.mean = b.mean + gain * innovation;
  if (opts.joseph) {
    Mat ikh = Mat::Identity(p, p) - gain * phi;
    out.cov = ikh * s * ikh.transpose() + gain * noise * gain.transpose();
  } else {
    out.cov = s - gain * phis;
  }
  out.cov = 0.5 * (out.cov + out.cov.transpose());

  CorrectionTrace trace;
  trace.innovation = innovation;
  trace.gain = gain;
  trace.predictive.mean = phi * b.mean;
  trace.predictive.cov = pmat;
  Vec w = llt.matrixL().solve(innovation);
  double logdet = 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
  trace.predictive_nll =
      0.5 * (d * std::log(2.0 * kPi) + logdet + w.squaredNorm());
  return {out, trace};
}

// Draws theta ~ N(mean, cov) with the reparameterized form mean + L z.
// A zero covariance returns the mean exactly; a semidefinite covariance
// falls back to an eigenvalue square root with negative values (above the
// -1e-10 tolerance) clamped to zero.
inline Vec sample_last_layer(const LastLayerBelief& b, RandomStream& rng) {
  b.check_shapes();
  const long p = b.dim();
  Vec z = rng.normal_vec(static_cast<int>(p));
  if (b.mode == CovMode::Diagonal) {
    require((b.cov_diag.array() >= -1e-10).all(),
            "sample_last_layer: negative variance");
    return b.mean + b.cov_diag.cwiseMax(0.0).cwiseSqrt().cwiseProduct(z);
  }
  if (b.cov.cwiseAbs().maxCoeff() == 0.0) return b.mean;
  Eigen::LLT<Mat> llt(b.cov);
  if (llt.info() == Eigen::Success) return b.mean + Mat(llt.matrixL()) * z;
  Eigen::SelfAdjointEigenSolver<Mat> es(b.cov);
  double scale = std::max(1.0, b.cov.cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-10 * scale)
    throw NumericalError("sample_last_layer: covariance is not PSD");
  Mat root = es.eigenvectors() *
             es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  return b.mean + root * z;
}

}  // namespace kalmeta
