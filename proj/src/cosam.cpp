#include "coseg/cosam.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <memory>
#include <cmath>
#include <stdexcept>

namespace coseg {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

const CosamConfig& checked(const CosamConfig& cfg) {
  cfg.validate();
  return cfg;
}

Tensor he_normal(Rng& rng, Shape shape, std::size_t fan_in) {
  return rng.normal_tensor(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)));
}

// Column statistics of a [D, M] descriptor matrix (one descriptor per
// column): centered values, sigma, and u = centered / ((sigma+eps) sqrt(D)).
struct Normalized {
  RowMat centered;
  RowMat u;
  std::vector<double> sigma;
};

Normalized normalize_columns(const double* data, std::size_t d, std::size_t m, double eps) {
  Normalized out;
  const ConstMatMap x(data, static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(m));
  out.centered = x.rowwise() - x.colwise().mean();
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    if ((x.col(j).array() == x(0, j)).all()) out.centered.col(j).setZero();
  out.u.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(m));
  out.sigma.resize(m);
  const double sqrt_d = std::sqrt(static_cast<double>(d));
  for (std::size_t j = 0; j < m; ++j) {
    const auto col = out.centered.col(static_cast<Eigen::Index>(j));
    const double sigma = std::sqrt(col.squaredNorm() / static_cast<double>(d));
    out.sigma[j] = sigma;
    out.u.col(static_cast<Eigen::Index>(j)) = col / ((sigma + eps) * sqrt_d);
  }
  return out;
}

// Pulls d(loss)/du back to d(loss)/dx for u = normalize_columns(x).
void normalize_backward(const Normalized& n, const RowMat& du, double eps, double* gx) {
  const auto d = static_cast<std::size_t>(n.u.rows());
  const auto m = static_cast<std::size_t>(n.u.cols());
  MatMap g(gx, static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(m));
  const double dd = static_cast<double>(d);
  const double sqrt_d = std::sqrt(dd);
  for (std::size_t j = 0; j < m; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    const double a = n.sigma[j] + eps;
    const auto gu = du.col(jj);
    const double gmean = gu.mean();
    g.col(jj).array() += (gu.array() - gmean) / (a * sqrt_d);
    if (n.sigma[j] > 0.0) {
      const double proj = gu.dot(n.centered.col(jj));
      g.col(jj) -= n.centered.col(jj) * (proj / (a * a * sqrt_d * dd * n.sigma[j]));
    }
  }
}

}  // namespace

void CosamConfig::validate() const {
  if (channels == 0) throw std::invalid_argument("CosamConfig: channels must be positive");
  if (reduced < 2 || reduced >= channels)
    throw std::invalid_argument("CosamConfig: need 2 <= reduced (" + std::to_string(reduced) + ") < channels (" +
                                std::to_string(channels) + ")");
  if (refs < 1) throw std::invalid_argument("CosamConfig: need at least one reference frame");
  if (hidden() < 1) throw std::invalid_argument("CosamConfig: mlp_hidden must be positive");
  if (height == 0 || width == 0) throw std::invalid_argument("CosamConfig: feature geometry must be set");
  if (!(ncc_eps >= 0.0)) throw std::invalid_argument("CosamConfig: ncc_eps must be non-negative");
}

void CosamConfig::validate_for(std::size_t frames) const {
  validate();
  if (frames < 2 || refs > frames - 1)
    throw std::invalid_argument("CosamConfig: K=" + std::to_string(refs) + " needs at least K+1 frames, snippet has " +
                                std::to_string(frames));
}

double ncc(std::span<const double> p, std::span<const double> q, double eps) {
  if (p.size() != q.size()) throw std::invalid_argument("ncc: descriptor lengths differ");
  if (p.empty()) throw std::invalid_argument("ncc: empty descriptors");
  const double d = static_cast<double>(p.size());
  double mp = 0, mq = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    mp += p[k];
    mq += q[k];
  }
  mp /= d;
  mq /= d;
  // a constant vector can round its mean away from its value
  if (std::ranges::all_of(p, [&](double x) { return x == p[0]; })) mp = p[0];
  if (std::ranges::all_of(q, [&](double x) { return x == q[0]; })) mq = q[0];
  double cross = 0, vp = 0, vq = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    cross += (p[k] - mp) * (q[k] - mq);
    vp += (p[k] - mp) * (p[k] - mp);
    vq += (q[k] - mq) * (q[k] - mq);
  }
  const double sp = std::sqrt(vp / d) + eps;
  const double sq = std::sqrt(vq / d) + eps;
  if (sp == 0.0 || sq == 0.0) return 0.0;
  return cross / (d * sp * sq);
}

Var ncc(Var p, Var q, double eps) {
  const Tensor& pv = p.value();
  const Tensor& qv = q.value();
  if (pv.rank() != 1 || qv.rank() != 1) throw std::invalid_argument("ncc: descriptors must be 1-D");
  const std::size_t d = pv.numel();
  const double value = ncc(pv.data(), qv.data(), eps);
  return p.tape->record(Tensor({1}, value), {p, q}, [d, eps](BackwardCtx& ctx) {
    const Normalized np = normalize_columns(ctx.in_value(0).data().data(), d, 1, eps);
    const Normalized nq = normalize_columns(ctx.in_value(1).data().data(), d, 1, eps);
    const double g = ctx.out_grad()[0];
    if (Tensor* gp = ctx.in_grad(0)) normalize_backward(np, nq.u * g, eps, gp->data().data());
    if (Tensor* gq = ctx.in_grad(1)) normalize_backward(nq, np.u * g, eps, gq->data().data());
  });
}

std::vector<std::size_t> select_references(std::size_t n, std::size_t frames, std::size_t k) {
  if (n >= frames) throw std::invalid_argument("select_references: frame index out of range");
  if (k == 0 || k > frames - 1)
    throw std::invalid_argument("select_references: K=" + std::to_string(k) + " must lie in [1, " +
                                std::to_string(frames - 1) + "]");
  std::vector<std::size_t> others;
  for (std::size_t t = 0; t < frames; ++t)
    if (t != n) others.push_back(t);
  auto dist = [n](std::size_t t) { return t > n ? t - n : n - t; };
  std::stable_sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) { return dist(a) < dist(b); });
  others.resize(k);
  return others;
}

CostVolume build_cost_volume(Var f_reduced, std::size_t refs, double eps, std::size_t snippet_len) {
  const Tensor& fv = f_reduced.value();
  if (fv.rank() != 4) throw std::invalid_argument("build_cost_volume: expected [B*N, D_R, H, W], got " + shape_str(fv.shape()));
  const std::size_t total = fv.dim(0), d = fv.dim(1), h = fv.dim(2), w = fv.dim(3), hw = h * w;
  if (snippet_len == 0) snippet_len = total;
  if (snippet_len < 2) throw std::invalid_argument("build_cost_volume: need at least 2 frames per snippet");
  if (total % snippet_len != 0)
    throw std::invalid_argument("build_cost_volume: " + std::to_string(total) + " frames is not a multiple of snippet length " +
                                std::to_string(snippet_len));
  if (d < 1) throw std::invalid_argument("build_cost_volume: descriptors need at least 1 channel");

  CostVolume cv;
  for (std::size_t n = 0; n < snippet_len; ++n) cv.frame_refs.push_back(select_references(n, snippet_len, refs));

  auto norms = std::make_shared<std::vector<Normalized>>();
  norms->reserve(total);
  for (std::size_t g = 0; g < total; ++g) norms->push_back(normalize_columns(fv.data().data() + g * d * hw, d, hw, eps));

  Tensor out({total, refs * hw, h, w});
  for (std::size_t g = 0; g < total; ++g) {
    const std::size_t base = g - g % snippet_len;
    const auto& local = cv.frame_refs[g % snippet_len];
    for (std::size_t k = 0; k < refs; ++k) {
      const auto& ref = (*norms)[base + local[k]];
      MatMap block(out.data().data() + (g * refs + k) * hw * hw, static_cast<Eigen::Index>(hw),
                   static_cast<Eigen::Index>(hw));
      block.noalias() = ref.u.transpose() * (*norms)[g].u;
    }
  }

  auto frame_refs = cv.frame_refs;
  cv.values = f_reduced.tape->record(
      std::move(out), {f_reduced}, [=, norms = std::move(norms), frame_refs = std::move(frame_refs)](BackwardCtx& ctx) {
        Tensor* gx = ctx.in_grad(0);
        const Tensor& gout = ctx.out_grad();
        std::vector<RowMat> du(total, RowMat::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(hw)));
        for (std::size_t g = 0; g < total; ++g) {
          const std::size_t base = g - g % snippet_len;
          const auto& local = frame_refs[g % snippet_len];
          for (std::size_t k = 0; k < refs; ++k) {
            const std::size_t r = base + local[k];
            const ConstMatMap gb(gout.data().data() + (g * refs + k) * hw * hw, static_cast<Eigen::Index>(hw),
                                 static_cast<Eigen::Index>(hw));
            du[r].noalias() += (*norms)[g].u * gb.transpose();
            du[g].noalias() += (*norms)[r].u * gb;
          }
        }
        for (std::size_t g = 0; g < total; ++g) normalize_backward((*norms)[g], du[g], eps, gx->data().data() + g * d * hw);
      });
  return cv;
}

Cosam::Cosam(ParameterSet& params, const std::string& prefix, CosamConfig cfg, Rng& rng)
    : reduce_weight(params.add(prefix + ".reduce.weight",
                               he_normal(rng, {checked(cfg).reduced, cfg.channels}, cfg.channels))),
      reduce_bias(params.add(prefix + ".reduce.bias", Tensor::zeros({cfg.reduced}))),
      bn_gamma(params.add(prefix + ".reduce_bn.gamma", Tensor::ones({cfg.reduced}))),
      bn_beta(params.add(prefix + ".reduce_bn.beta", Tensor::zeros({cfg.reduced}))),
      bn_mean(params.add(prefix + ".reduce_bn.running_mean", Tensor::zeros({cfg.reduced}), false)),
      bn_var(params.add(prefix + ".reduce_bn.running_var", Tensor::ones({cfg.reduced}), false)),
      // zero init: the mask starts at a neutral 0.5
      summary_weight(params.add(prefix + ".summary.weight", Tensor::zeros({1, cfg.refs * cfg.height * cfg.width}))),
      summary_bias(params.add(prefix + ".summary.bias", Tensor::zeros({1}))),
      mlp1_weight(params.add(prefix + ".mlp1.weight", he_normal(rng, {cfg.hidden(), cfg.channels}, cfg.channels))),
      mlp1_bias(params.add(prefix + ".mlp1.bias", Tensor::zeros({cfg.hidden()}))),
      mlp2_weight(params.add(prefix + ".mlp2.weight",
                             rng.normal_tensor({cfg.channels, cfg.hidden()}, 1.0 / std::sqrt(static_cast<double>(cfg.hidden()))))),
      mlp2_bias(params.add(prefix + ".mlp2.bias", Tensor::zeros({cfg.channels}))),
      cfg_(cfg) {}

Cosam::Spatial Cosam::spatial_attention(Tape& tape, Var f, std::size_t snippet_len, Mode mode) const {
  const Shape& s = f.shape();
  if (s.size() != 4 || s[1] != cfg_.channels || s[2] != cfg_.height || s[3] != cfg_.width)
    throw std::invalid_argument("cosam: input " + shape_str(s) + " does not match configured [*, " +
                                std::to_string(cfg_.channels) + ", " + std::to_string(cfg_.height) + ", " +
                                std::to_string(cfg_.width) + "]");
  cfg_.validate_for(snippet_len);
  Var r = conv1x1(f, tape.param(reduce_weight), tape.param(reduce_bias));
  r = batch_norm2d(r, tape.param(bn_gamma), tape.param(bn_beta), bn_mean.value, bn_var.value, mode);
  r = relu(r);
  CostVolume cv = build_cost_volume(r, cfg_.refs, cfg_.ncc_eps, snippet_len);
  Var mask = sigmoid(conv1x1(cv.values, tape.param(summary_weight), tape.param(summary_bias)));
  return {broadcast_mul(f, mask), mask};
}

Cosam::Channel Cosam::channel_attention(Tape& tape, Var f_spat, std::size_t snippet_len) const {
  const Shape s = f_spat.shape();
  if (s.size() != 4 || s[1] != cfg_.channels)
    throw std::invalid_argument("cosam channel attention: bad input " + shape_str(s));
  if (snippet_len == 0 || s[0] % snippet_len != 0)
    throw std::invalid_argument("cosam channel attention: frame count not a multiple of snippet length");
  const std::size_t batch = s[0] / snippet_len, d = s[1], hw = s[2] * s[3];
  Var pooled = global_avg_pool(f_spat);
  Var hidden = relu(linear(pooled, tape.param(mlp1_weight), tape.param(mlp1_bias)));
  Var per_frame = sigmoid(linear(hidden, tape.param(mlp2_weight), tape.param(mlp2_bias)));
  Var weights = mean_axis(reshape(per_frame, {batch, snippet_len, d}), 1);
  Var gated = broadcast_mul(reshape(f_spat, {batch, snippet_len, d, hw}), reshape(weights, {batch, 1, d, 1}));
  return {reshape(gated, s), weights};
}

Cosam::Output Cosam::forward(Tape& tape, Var f, std::size_t snippet_len, Mode mode) const {
  Output out{f, {}, {}};
  if (cfg_.spatial) {
    auto sp = spatial_attention(tape, f, snippet_len, mode);
    out.features = sp.features;
    out.mask = sp.mask;
  }
  if (cfg_.channel) {
    auto ch = channel_attention(tape, out.features, snippet_len);
    out.features = ch.features;
    out.weights = ch.weights;
  }
  return out;
}

}  // namespace coseg
