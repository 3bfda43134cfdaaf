#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "kalmeta/common.hpp"

namespace kalmeta::ad {

// Reverse-mode tape over dense matrices. Nodes are recorded in evaluation
// order; backward() walks the tape in reverse, so creation order is the
// topological order. Handles are (tape, index) pairs; node values live in the
// tape and stay valid for the tape's lifetime.
class Tape;

struct Var {
  Tape* tape = nullptr;
  int idx = -1;
  bool valid() const { return tape != nullptr && idx >= 0; }
};

class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;
    bool has_grad = false;
    std::function<void()> backward;  // empty for leaves/constants
  };

  Tape() { nodes_.reserve(1 << 14); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var record(Mat value, std::function<void()> backward = {}) {
    nodes_.push_back(Node{std::move(value), Mat(), false, std::move(backward)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& val(const Var& v) const { return nodes_[v.idx].value; }
  const Mat& val(int idx) const { return nodes_[idx].value; }

  // Only meaningful inside backward closures, where the node has been seeded.
  const Mat& grad_ref(int idx) const { return nodes_[idx].grad; }
  Node& node(int idx) { return nodes_[idx]; }

  void accum(int idx, const Mat& g) {
    Node& n = nodes_[idx];
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  bool has_grad(const Var& v) const { return nodes_[v.idx].has_grad; }

  // Gradient of the last backward() target with respect to v; zero if v does
  // not influence it.
  Mat grad(const Var& v) const {
    const Node& n = nodes_[v.idx];
    if (!n.has_grad) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Seeds d(loss)/d(loss) = 1 and propagates. loss must be 1x1.
  void backward(const Var& loss) {
    if (val(loss).size() != 1)
      throw InvalidInput("backward: loss must be a 1x1 value");
    for (auto& n : nodes_) n.has_grad = false;
    accum(loss.idx, Mat::Ones(1, 1));
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward();
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

inline Var constant(Tape& t, const Mat& v) { return t.record(v); }
inline Var constant(Tape& t, double x) {
  return t.record(Mat::Constant(1, 1, x));
}

namespace detail {
inline void check_same(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw InvalidInput("tape: operands from different tapes");
}
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::check_same(a, b);
  Tape& t = *a.tape;
  if (t.val(a).cols() != t.val(b).rows())
    throw InvalidInput("matmul: inner dimensions disagree");
  Var out = t.record(t.val(a) * t.val(b));
  int ai = a.idx, bi = b.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, bi, oi]() {
    const Mat& g = t.grad_ref(oi);
    t.accum(ai, g * t.val(bi).transpose());
    t.accum(bi, t.val(ai).transpose() * g);
  };
  return out;
}

inline Var add(const Var& a, const Var& b) {
  detail::check_same(a, b);
  Tape& t = *a.tape;
  Var out = t.record(t.val(a) + t.val(b));
  int ai = a.idx, bi = b.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, bi, oi]() {
    const Mat& g = t.grad_ref(oi);
    t.accum(ai, g);
    t.accum(bi, g);
  };
  return out;
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same(a, b);
  Tape& t = *a.tape;
  Var out = t.record(t.val(a) - t.val(b));
  int ai = a.idx, bi = b.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, bi, oi]() {
    const Mat& g = t.grad_ref(oi);
    t.accum(ai, g);
    t.accum(bi, -g);
  };
  return out;
}

inline Var neg(const Var& a) {
  Tape& t = *a.tape;
  Var out = t.record(-t.val(a));
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() { t.accum(ai, -t.grad_ref(oi)); };
  return out;
}

inline Var scale(const Var& a, double c) {
  Tape& t = *a.tape;
  Var out = t.record(c * t.val(a));
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi, c]() { t.accum(ai, c * t.grad_ref(oi)); };
  return out;
}

inline Var shift(const Var& a, double c) {
  Tape& t = *a.tape;
  Var out = t.record((t.val(a).array() + c).matrix());
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() { t.accum(ai, t.grad_ref(oi)); };
  return out;
}

inline Var hadamard(const Var& a, const Var& b) {
  detail::check_same(a, b);
  Tape& t = *a.tape;
  Var out = t.record(t.val(a).cwiseProduct(t.val(b)));
  int ai = a.idx, bi = b.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, bi, oi]() {
    const Mat& g = t.grad_ref(oi);
    t.accum(ai, g.cwiseProduct(t.val(bi)));
    t.accum(bi, g.cwiseProduct(t.val(ai)));
  };
  return out;
}

inline Var cdiv(const Var& a, const Var& b) {
  detail::check_same(a, b);
  Tape& t = *a.tape;
  Var out = t.record(t.val(a).cwiseQuotient(t.val(b)));
  int ai = a.idx, bi = b.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, bi, oi]() {
    const Mat& g = t.grad_ref(oi);
    t.accum(ai, g.cwiseQuotient(t.val(bi)));
    t.accum(bi, -g.cwiseProduct(t.val(oi)).cwiseQuotient(t.val(bi)));
  };
  return out;
}

inline Var tanh_(const Var& a) {
  Tape& t = *a.tape;
  Var out = t.record(t.val(a).array().tanh().matrix());
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() {
    const Mat& y = t.val(oi);
    t.accum(ai, t.grad_ref(oi).cwiseProduct((1.0 - y.array().square()).matrix()));
  };
  return out;
}

inline Var sigmoid_(const Var& a) {
  Tape& t = *a.tape;
  Var out = t.record((1.0 / (1.0 + (-t.val(a).array()).exp())).matrix());
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() {
    const Mat& y = t.val(oi);
    t.accum(ai, t.grad_ref(oi).cwiseProduct(
                    y.cwiseProduct((1.0 - y.array()).matrix())));
  };
  return out;
}

inline Var exp_(const Var& a) {
  Tape& t = *a.tape;
  Var out = t.record(t.val(a).array().exp().matrix());
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() {
    t.accum(ai, t.grad_ref(oi).cwiseProduct(t.val(oi)));
  };
  return out;
}

inline Var log_(const Var& a) {
  Tape& t = *a.tape;
  Var out = t.record(t.val(a).array().log().matrix());
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() {
    t.accum(ai, t.grad_ref(oi).cwiseQuotient(t.val(ai)));
  };
  return out;
}

inline Var sqrt_(const Var& a) {
  Tape& t = *a.tape;
  Var out = t.record(t.val(a).array().sqrt().matrix());
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() {
    t.accum(ai, (0.5 * t.grad_ref(oi).array() / t.val(oi).array()).matrix());
  };
  return out;
}

inline Var square_(const Var& a) {
  Tape& t = *a.tape;
  Var out = t.record(t.val(a).array().square().matrix());
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() {
    t.accum(ai, 2.0 * t.grad_ref(oi).cwiseProduct(t.val(ai)));
  };
  return out;
}

inline Var sum(const Var& a) {
  Tape& t = *a.tape;
  Var out = t.record(Mat::Constant(1, 1, t.val(a).sum()));
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() {
    double g = t.grad_ref(oi)(0, 0);
    t.accum(ai, Mat::Constant(t.val(ai).rows(), t.val(ai).cols(), g));
  };
  return out;
}

inline Var transpose_(const Var& a) {
  Tape& t = *a.tape;
  Var out = t.record(t.val(a).transpose());
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() {
    t.accum(ai, t.grad_ref(oi).transpose());
  };
  return out;
}

inline Var vstack(const Var& a, const Var& b) {
  detail::check_same(a, b);
  Tape& t = *a.tape;
  const Mat& va = t.val(a);
  const Mat& vb = t.val(b);
  if (va.cols() != vb.cols()) throw InvalidInput("vstack: column counts differ");
  Mat v(va.rows() + vb.rows(), va.cols());
  v << va, vb;
  long ra = va.rows(), rb = vb.rows();
  int ai = a.idx, bi = b.idx;
  Var out = t.record(std::move(v));
  int oi = out.idx;
  t.node(oi).backward = [&t, ai, bi, oi, ra, rb]() {
    const Mat& g = t.grad_ref(oi);
    t.accum(ai, g.topRows(ra));
    t.accum(bi, g.bottomRows(rb));
  };
  return out;
}

// Stacks row blocks (usually 1x1 scalars) into one column-aligned matrix.
inline Var vcat(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidInput("vcat: no parts");
  long rows = 0;
  long cols = t.val(parts[0]).cols();
  for (const Var& p : parts) {
    detail::check_same(parts[0], p);
    if (t.val(p).cols() != cols) throw InvalidInput("vcat: column counts differ");
    rows += t.val(p).rows();
  }
  Mat v(rows, cols);
  std::vector<int> idxs(parts.size());
  std::vector<long> offs(parts.size());
  long at = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    long r = t.val(parts[k]).rows();
    v.middleRows(at, r) = t.val(parts[k]);
    idxs[k] = parts[k].idx;
    offs[k] = at;
    at += r;
  }
  Var out = t.record(std::move(v));
  int oi = out.idx;
  t.node(oi).backward = [&t, idxs, offs, oi]() {
    const Mat& g = t.grad_ref(oi);
    for (std::size_t k = 0; k < idxs.size(); ++k) {
      long r = t.val(idxs[k]).rows();
      t.accum(idxs[k], g.middleRows(offs[k], r));
    }
  };
  return out;
}

// Row slice [i, i+r).
inline Var rows(const Var& a, long i, long r) {
  Tape& t = *a.tape;
  if (i < 0 || r <= 0 || i + r > t.val(a).rows())
    throw InvalidInput("rows: slice out of range");
  Var out = t.record(t.val(a).middleRows(i, r));
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi, i, r]() {
    const Mat& va = t.val(ai);
    Mat g = Mat::Zero(va.rows(), va.cols());
    g.middleRows(i, r) = t.grad_ref(oi);
    t.accum(ai, g);
  };
  return out;
}

// a * s with s a 1x1 node.
inline Var mul_scalar(const Var& a, const Var& s) {
  detail::check_same(a, s);
  Tape& t = *a.tape;
  if (t.val(s).size() != 1) throw InvalidInput("mul_scalar: s must be 1x1");
  Var out = t.record(t.val(a) * t.val(s)(0, 0));
  int ai = a.idx, si = s.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, si, oi]() {
    const Mat& g = t.grad_ref(oi);
    t.accum(ai, g * t.val(si)(0, 0));
    t.accum(si, Mat::Constant(1, 1, g.cwiseProduct(t.val(ai)).sum()));
  };
  return out;
}

inline Var div_scalar(const Var& a, const Var& s) {
  detail::check_same(a, s);
  Tape& t = *a.tape;
  if (t.val(s).size() != 1) throw InvalidInput("div_scalar: s must be 1x1");
  Var out = t.record(t.val(a) / t.val(s)(0, 0));
  int ai = a.idx, si = s.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, si, oi]() {
    const Mat& g = t.grad_ref(oi);
    double sv = t.val(si)(0, 0);
    t.accum(ai, g / sv);
    t.accum(si, Mat::Constant(1, 1, -g.cwiseProduct(t.val(oi)).sum() / sv));
  };
  return out;
}

// log(sum(exp(a))) over all entries, stabilized by an eager max shift. The
// shift is a constant, so the gradient (softmax of a) is unaffected.
inline Var logsumexp(const Var& a) {
  Tape& t = *a.tape;
  double m = t.val(a).maxCoeff();
  double s = (t.val(a).array() - m).exp().sum();
  Var out = t.record(Mat::Constant(1, 1, m + std::log(s)));
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi, m, s]() {
    double g = t.grad_ref(oi)(0, 0);
    t.accum(ai, (g * (t.val(ai).array() - m).exp() / s).matrix());
  };
  return out;
}

inline Var symmetrize(const Var& a) {
  Tape& t = *a.tape;
  Var out = t.record(0.5 * (t.val(a) + t.val(a).transpose()));
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() {
    const Mat& g = t.grad_ref(oi);
    t.accum(ai, (0.5 * (g + g.transpose())).eval());
  };
  return out;
}

inline Var diag_embed(const Var& a) {
  Tape& t = *a.tape;
  if (t.val(a).cols() != 1)
    throw InvalidInput("diag_embed: expects a column vector");
  Mat v = Vec(t.val(a).col(0)).asDiagonal();
  int ai = a.idx;
  Var out = t.record(std::move(v));
  int oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() {
    t.accum(ai, t.grad_ref(oi).diagonal());
  };
  return out;
}

inline Var diag_part(const Var& a) {
  Tape& t = *a.tape;
  Var out = t.record(t.val(a).diagonal());
  int ai = a.idx, oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() {
    const Mat& va = t.val(ai);
    Mat g = Mat::Zero(va.rows(), va.cols());
    g.diagonal() = t.grad_ref(oi).col(0);
    t.accum(ai, g);
  };
  return out;
}

// Lower Cholesky factor of a symmetric PD matrix. A single 1e-9 jitter retry
// is attempted before raising. Reverse rule: with P the lower triangle of
// L^T Lbar (diagonal halved), Sbar = sym(L^-T P L^-1).
inline Var cholesky_lower(const Var& a) {
  Tape& t = *a.tape;
  Mat s = 0.5 * (t.val(a) + t.val(a).transpose());
  Eigen::LLT<Mat> llt(s);
  if (llt.info() != Eigen::Success) {
    s.diagonal().array() += 1e-9;
    llt.compute(s);
    if (llt.info() != Eigen::Success)
      throw NumericalError("cholesky_lower: matrix is not positive definite");
  }
  Mat l = llt.matrixL();
  int ai = a.idx;
  Var out = t.record(std::move(l));
  int oi = out.idx;
  t.node(oi).backward = [&t, ai, oi]() {
    const Mat& L = t.val(oi);
    const Mat& lbar = t.grad_ref(oi);
    Mat p = L.transpose() * lbar;
    Mat phi = p.triangularView<Eigen::StrictlyLower>();
    phi.diagonal() = 0.5 * p.diagonal();
    Mat tmp = L.transpose().triangularView<Eigen::Upper>().solve(phi);
    Mat sbar = L.transpose()
                   .triangularView<Eigen::Upper>()
                   .solve(tmp.transpose())
                   .transpose();
    t.accum(ai, (0.5 * (sbar + sbar.transpose())).eval());
  };
  return out;
}

}  // namespace kalmeta::ad
