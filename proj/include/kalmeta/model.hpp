#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kalmeta/backend.hpp"
#include "kalmeta/common.hpp"
#include "kalmeta/random.hpp"

namespace kalmeta {

// Architecture hyperparameters. feat_dim counts the constant bias feature, so
// the learned part of the feature map has feat_dim - 1 outputs.
struct ModelConfig {
  int enc_hidden = 32;
  int dec_hidden = 32;
  int embed_dim = 32;
  int att_dim = 16;
  int feat_dim = 32;
  int out_dim = 2;
  int context_dim = 0;
  double sigma2_floor = 1e-6;
  double sigma2_ceil = 1e3;

  void check() const {
    require(enc_hidden > 0 && dec_hidden > 0 && embed_dim > 0 && att_dim > 0,
            "ModelConfig: hidden sizes must be positive");
    require(feat_dim >= 2, "ModelConfig: feat_dim must be at least 2");
    require(out_dim >= 1, "ModelConfig: out_dim must be at least 1");
    require(context_dim >= 0, "ModelConfig: negative context_dim");
    // Equal floor and ceiling pin the noise head to a constant.
    require(sigma2_floor >= 0.0 && sigma2_ceil >= sigma2_floor,
            "ModelConfig: need 0 <= sigma2_floor <= sigma2_ceil");
  }

  bool operator==(const ModelConfig&) const = default;
};

// State inputs to the recurrent nets are 4-vectors: relative position and
// velocity.
inline constexpr int kStateFeatDim = 4;

struct ParamSpec {
  std::string name;
  std::string group;
  long rows = 0;
  long cols = 0;
};

// Stable enumeration of every learnable tensor. Checkpoints, gradient
// collection, and the optimizer all index parameters through this order.
inline std::vector<ParamSpec> param_layout(const ModelConfig& cfg) {
  cfg.check();
  std::vector<ParamSpec> out;
  const long he = cfg.enc_hidden, hd = cfg.dec_hidden, e = cfg.embed_dim;
  const long a = cfg.att_dim, p = cfg.feat_dim, d = cfg.out_dim;
  const long x = kStateFeatDim;

  auto gru = [&out, x](const std::string& prefix, const std::string& group,
                       long h) {
    out.push_back({prefix + "_wxz", group, h, x});
    out.push_back({prefix + "_whz", group, h, h});
    out.push_back({prefix + "_bz", group, h, 1});
    out.push_back({prefix + "_wxr", group, h, x});
    out.push_back({prefix + "_whr", group, h, h});
    out.push_back({prefix + "_br", group, h, 1});
    out.push_back({prefix + "_wxn", group, h, x});
    out.push_back({prefix + "_whn", group, h, h});
    out.push_back({prefix + "_bn", group, h, 1});
  };

  gru("ego", "encoder", he);
  gru("nbr", "interaction", he);
  out.push_back({"att_we", "interaction", a, he});
  out.push_back({"att_wn", "interaction", a, he});
  out.push_back({"att_b", "interaction", a, 1});
  out.push_back({"att_u", "interaction", a, 1});
  out.push_back({"v_we", "encoder", e, he});
  out.push_back({"v_wp", "encoder", e, he});
  if (cfg.context_dim > 0)
    out.push_back({"v_wc", "encoder", e, cfg.context_dim});
  out.push_back({"v_b", "encoder", e, 1});
  out.push_back({"di_w", "decoder", hd, e});
  out.push_back({"di_b", "decoder", hd, 1});
  gru("dec", "decoder", hd);
  out.push_back({"f_w", "feature_head", p - 1, hd});
  out.push_back({"f_b", "feature_head", p - 1, 1});
  out.push_back({"n_w", "noise_head", d, hd});
  out.push_back({"n_b", "noise_head", d, 1});
  for (long j = 0; j < d; ++j) {
    std::string sfx = std::to_string(j);
    out.push_back({"prior_mean_" + sfx, "prior", p, 1});
    out.push_back({"prior_rho_" + sfx, "prior", p, 1});
  }
  for (long j = 0; j < d; ++j)
    out.push_back({"q_rho_" + std::to_string(j), "process_noise", p, 1});
  return out;
}

struct ModelParameters {
  ModelConfig cfg;
  std::vector<ParamSpec> layout;
  std::vector<Mat> values;
  std::map<std::string, int> index;

  static ModelParameters init(const ModelConfig& cfg, RandomStream rng) {
    ModelParameters mp;
    mp.cfg = cfg;
    mp.layout = param_layout(cfg);
    mp.values.reserve(mp.layout.size());
    int k = 0;
    for (const ParamSpec& spec : mp.layout) {
      mp.index[spec.name] = k++;
      mp.values.push_back(init_value(spec, rng.child(hash_name(spec.name))));
    }
    return mp;
  }

  const Mat& at(const std::string& name) const {
    auto it = index.find(name);
    require(it != index.end(), "ModelParameters: unknown parameter " + name);
    return values[it->second];
  }
  Mat& at(const std::string& name) {
    auto it = index.find(name);
    require(it != index.end(), "ModelParameters: unknown parameter " + name);
    return values[it->second];
  }

  long total_scalars() const {
    long n = 0;
    for (const Mat& m : values) n += m.size();
    return n;
  }

 private:
  static std::uint64_t hash_name(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

  static Mat init_value(const ParamSpec& spec, RandomStream rng) {
    // Biases start at zero. The prior mean starts at zero (predict no
    // motion), prior log-variances at 0 (unit variance), and the process
    // noise small. Weight matrices use uniform fan-based scaling.
    if (spec.cols == 1) {
      if (spec.name.rfind("prior_rho_", 0) == 0) return Mat::Zero(spec.rows, 1);
      if (spec.name.rfind("q_rho_", 0) == 0)
        return Mat::Constant(spec.rows, 1, std::log(1e-4));
      return Mat::Zero(spec.rows, 1);
    }
    double r = std::sqrt(6.0 / static_cast<double>(spec.rows + spec.cols));
    Mat m(spec.rows, spec.cols);
    for (long j = 0; j < spec.cols; ++j)
      for (long i = 0; i < spec.rows; ++i) m(i, j) = rng.uniform(-r, r);
    return m;
  }
};

// Parameters lifted into a backend. Binding happens once per tape (or once
// per evaluation session); the members are then reused across many ops.
template <class B>
struct BoundModel {
  using M = typename B::M;
  const ModelConfig* cfg = nullptr;

  M ego_wxz, ego_whz, ego_bz, ego_wxr, ego_whr, ego_br, ego_wxn, ego_whn, ego_bn;
  M nbr_wxz, nbr_whz, nbr_bz, nbr_wxr, nbr_whr, nbr_br, nbr_wxn, nbr_whn, nbr_bn;
  M att_we, att_wn, att_b, att_u;
  M v_we, v_wp, v_wc, v_b;
  M di_w, di_b;
  M dec_wxz, dec_whz, dec_bz, dec_wxr, dec_whr, dec_br, dec_wxn, dec_whn, dec_bn;
  M f_w, f_b;
  M n_w, n_b;
  std::vector<M> prior_mean, prior_rho, q_rho;

  // Kept in layout order for gradient collection.
  std::vector<M> all;

  static BoundModel bind(typename B::Ctx& ctx, const ModelParameters& mp) {
    BoundModel bm;
    bm.cfg = &mp.cfg;
    std::map<std::string, M> by_name;
    bm.all.reserve(mp.layout.size());
    for (std::size_t k = 0; k < mp.layout.size(); ++k) {
      M v = B::constant(ctx, mp.values[k]);
      by_name.emplace(mp.layout[k].name, v);
      bm.all.push_back(v);
    }
    auto g = [&by_name](const std::string& n) { return by_name.at(n); };
    bm.ego_wxz = g("ego_wxz"); bm.ego_whz = g("ego_whz"); bm.ego_bz = g("ego_bz");
    bm.ego_wxr = g("ego_wxr"); bm.ego_whr = g("ego_whr"); bm.ego_br = g("ego_br");
    bm.ego_wxn = g("ego_wxn"); bm.ego_whn = g("ego_whn"); bm.ego_bn = g("ego_bn");
    bm.nbr_wxz = g("nbr_wxz"); bm.nbr_whz = g("nbr_whz"); bm.nbr_bz = g("nbr_bz");
    bm.nbr_wxr = g("nbr_wxr"); bm.nbr_whr = g("nbr_whr"); bm.nbr_br = g("nbr_br");
    bm.nbr_wxn = g("nbr_wxn"); bm.nbr_whn = g("nbr_whn"); bm.nbr_bn = g("nbr_bn");
    bm.att_we = g("att_we"); bm.att_wn = g("att_wn");
    bm.att_b = g("att_b"); bm.att_u = g("att_u");
    bm.v_we = g("v_we"); bm.v_wp = g("v_wp"); bm.v_b = g("v_b");
    if (mp.cfg.context_dim > 0) bm.v_wc = g("v_wc");
    bm.di_w = g("di_w"); bm.di_b = g("di_b");
    bm.dec_wxz = g("dec_wxz"); bm.dec_whz = g("dec_whz"); bm.dec_bz = g("dec_bz");
    bm.dec_wxr = g("dec_wxr"); bm.dec_whr = g("dec_whr"); bm.dec_br = g("dec_br");
    bm.dec_wxn = g("dec_wxn"); bm.dec_whn = g("dec_whn"); bm.dec_bn = g("dec_bn");
    bm.f_w = g("f_w"); bm.f_b = g("f_b");
    bm.n_w = g("n_w"); bm.n_b = g("n_b");
    for (int j = 0; j < mp.cfg.out_dim; ++j) {
      std::string sfx = std::to_string(j);
      bm.prior_mean.push_back(g("prior_mean_" + sfx));
      bm.prior_rho.push_back(g("prior_rho_" + sfx));
      bm.q_rho.push_back(g("q_rho_" + sfx));
    }
    return bm;
  }
};

// Gradients of every parameter after a backward pass, in layout order.
// Parameters the loss never touched get zero matrices.
inline std::vector<Mat> collect_gradients(const ad::Tape& tape,
                                          const BoundModel<Rev>& bm) {
  std::vector<Mat> out;
  out.reserve(bm.all.size());
  for (const ad::Var& v : bm.all) out.push_back(tape.grad(v));
  return out;
}

}  // namespace kalmeta
