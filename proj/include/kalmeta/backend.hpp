#pragma once

#include <vector>

#include "kalmeta/common.hpp"
#include "kalmeta/tape.hpp"

namespace kalmeta {

// Two interchangeable evaluation backends share one op vocabulary so the
// model, filter, and loss code is written once. Eager computes values
// directly (inference and finite differencing); Rev records onto a tape for
// reverse-mode gradients. B::value() is for control flow and result
// extraction only; it must never feed back into recorded math.

struct Eager {
  struct Ctx {};
  using M = Mat;

  static M constant(Ctx&, const Mat& v) { return v; }
  static M constant(Ctx&, double x) { return Mat::Constant(1, 1, x); }
  static Mat value(const M& v) { return v; }
  static double scalar(const M& v) { return v(0, 0); }

  static M matmul(const M& a, const M& b) { return a * b; }
  static M add(const M& a, const M& b) { return a + b; }
  static M sub(const M& a, const M& b) { return a - b; }
  static M neg(const M& a) { return -a; }
  static M scale(const M& a, double c) { return c * a; }
  static M shift(const M& a, double c) { return (a.array() + c).matrix(); }
  static M hadamard(const M& a, const M& b) { return a.cwiseProduct(b); }
  static M cdiv(const M& a, const M& b) { return a.cwiseQuotient(b); }
  static M tanh(const M& a) { return a.array().tanh().matrix(); }
  static M sigmoid(const M& a) {
    return (1.0 / (1.0 + (-a.array()).exp())).matrix();
  }
  static M exp(const M& a) { return a.array().exp().matrix(); }
  static M log(const M& a) { return a.array().log().matrix(); }
  static M sqrt(const M& a) { return a.array().sqrt().matrix(); }
  static M square(const M& a) { return a.array().square().matrix(); }
  static M sum(const M& a) { return Mat::Constant(1, 1, a.sum()); }
  static M transpose(const M& a) { return a.transpose(); }
  static M vstack(const M& a, const M& b) {
    Mat v(a.rows() + b.rows(), a.cols());
    v << a, b;
    return v;
  }
  static M vcat(Ctx&, const std::vector<M>& parts) {
    long rows = 0;
    for (const M& p : parts) rows += p.rows();
    Mat v(rows, parts.front().cols());
    long at = 0;
    for (const M& p : parts) {
      v.middleRows(at, p.rows()) = p;
      at += p.rows();
    }
    return v;
  }
  static M rows(const M& a, long i, long r) {
    if (i < 0 || r <= 0 || i + r > a.rows())
      throw InvalidInput("rows: slice out of range");
    return a.middleRows(i, r);
  }
  static M mul_scalar(const M& a, const M& s) { return a * s(0, 0); }
  static M div_scalar(const M& a, const M& s) { return a / s(0, 0); }
  static M logsumexp(const M& a) {
    double m = a.maxCoeff();
    return Mat::Constant(1, 1, m + std::log((a.array() - m).exp().sum()));
  }
  static M symmetrize(const M& a) { return 0.5 * (a + a.transpose()); }
  static M diag_embed(const M& a) { return Mat(Vec(a.col(0)).asDiagonal()); }
  static M diag_part(const M& a) { return a.diagonal(); }
  static M cholesky_lower(const M& a) {
    Mat s = 0.5 * (a + a.transpose());
    Eigen::LLT<Mat> llt(s);
    if (llt.info() != Eigen::Success) {
      s.diagonal().array() += 1e-9;
      llt.compute(s);
      if (llt.info() != Eigen::Success)
        throw NumericalError("cholesky_lower: matrix is not positive definite");
    }
    return llt.matrixL();
  }
};

struct Rev {
  struct Ctx {
    ad::Tape* tape = nullptr;
  };
  using M = ad::Var;

  static M constant(Ctx& c, const Mat& v) { return ad::constant(*c.tape, v); }
  static M constant(Ctx& c, double x) { return ad::constant(*c.tape, x); }
  static Mat value(const M& v) { return v.tape->val(v); }
  static double scalar(const M& v) { return v.tape->val(v)(0, 0); }

  static M matmul(const M& a, const M& b) { return ad::matmul(a, b); }
  static M add(const M& a, const M& b) { return ad::add(a, b); }
  static M sub(const M& a, const M& b) { return ad::sub(a, b); }
  static M neg(const M& a) { return ad::neg(a); }
  static M scale(const M& a, double c) { return ad::scale(a, c); }
  static M shift(const M& a, double c) { return ad::shift(a, c); }
  static M hadamard(const M& a, const M& b) { return ad::hadamard(a, b); }
  static M cdiv(const M& a, const M& b) { return ad::cdiv(a, b); }
  static M tanh(const M& a) { return ad::tanh_(a); }
  static M sigmoid(const M& a) { return ad::sigmoid_(a); }
  static M exp(const M& a) { return ad::exp_(a); }
  static M log(const M& a) { return ad::log_(a); }
  static M sqrt(const M& a) { return ad::sqrt_(a); }
  static M square(const M& a) { return ad::square_(a); }
  static M sum(const M& a) { return ad::sum(a); }
  static M transpose(const M& a) { return ad::transpose_(a); }
  static M vstack(const M& a, const M& b) { return ad::vstack(a, b); }
  static M vcat(Ctx& c, const std::vector<M>& parts) {
    return ad::vcat(*c.tape, parts);
  }
  static M rows(const M& a, long i, long r) { return ad::rows(a, i, r); }
  static M mul_scalar(const M& a, const M& s) { return ad::mul_scalar(a, s); }
  static M div_scalar(const M& a, const M& s) { return ad::div_scalar(a, s); }
  static M logsumexp(const M& a) { return ad::logsumexp(a); }
  static M symmetrize(const M& a) { return ad::symmetrize(a); }
  static M diag_embed(const M& a) { return ad::diag_embed(a); }
  static M diag_part(const M& a) { return ad::diag_part(a); }
  static M cholesky_lower(const M& a) { return ad::cholesky_lower(a); }
};

}  // namespace kalmeta
