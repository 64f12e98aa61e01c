#include "coseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace coseg {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

[[noreturn]] void shape_error(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

void require_rank(const std::string& op, const Tensor& t, std::size_t rank, const char* name) {
  if (t.rank() != rank)
    shape_error(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " +
                        shape_str(t.shape()));
}

ConstMatMap cmat(const Tensor& t, std::size_t offset, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.data().data() + offset, static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
}

MatMap mmat(Tensor& t, std::size_t offset, std::size_t rows, std::size_t cols) {
  return MatMap(t.data().data() + offset, static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

template <typename F>
Var unary(Var x, F forward, double (*deriv)(double in, double out)) {
  const Tensor& xv = x.value();
  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = forward(xv[i]);
  return x.tape->record(std::move(out), {x}, [deriv](BackwardCtx& ctx) {
    Tensor* gx = ctx.in_grad(0);
    const Tensor& in = ctx.in_value(0);
    const Tensor& out = ctx.out_value();
    const Tensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * deriv(in[i], out[i]);
  });
}

void im2col3x3(const double* x, std::size_t ci, std::size_t h, std::size_t w, int stride, std::size_t ho,
               std::size_t wo, double* cols) {
  for (std::size_t c = 0; c < ci; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        double* row = cols + ((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy) * stride + ky - 1;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox) * stride + kx - 1;
            row[oy * wo + ox] = (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w))
                                    ? 0.0
                                    : x[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
          }
        }
      }
}

void col2im3x3(const double* cols, std::size_t ci, std::size_t h, std::size_t w, int stride, std::size_t ho,
               std::size_t wo, double* x) {
  for (std::size_t c = 0; c < ci; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = cols + ((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy) * stride + ky - 1;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox) * stride + kx - 1;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            x[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace

Var conv1x1(Var x, Var weight, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  require_rank("conv1x1", xv, 4, "x");
  require_rank("conv1x1", wv, 2, "weight");
  require_rank("conv1x1", bv, 1, "bias");
  const std::size_t n = xv.dim(0), ci = xv.dim(1), hw = xv.dim(2) * xv.dim(3), co = wv.dim(0);
  if (wv.dim(1) != ci || bv.dim(0) != co)
    shape_error("conv1x1", "x " + shape_str(xv.shape()) + " incompatible with weight " + shape_str(wv.shape()) +
                               " and bias " + shape_str(bv.shape()));

  Tensor out({n, co, xv.dim(2), xv.dim(3)});
  const auto w = cmat(wv, 0, co, ci);
  for (std::size_t b = 0; b < n; ++b) {
    auto y = mmat(out, b * co * hw, co, hw);
    y.noalias() = w * cmat(xv, b * ci * hw, ci, hw);
    y.colwise() += ConstVecMap(bv.data().data(), static_cast<Eigen::Index>(co));
  }
  return x.tape->record(std::move(out), {x, weight, bias}, [n, ci, co, hw](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& xv = ctx.in_value(0);
    const auto w = cmat(ctx.in_value(1), 0, co, ci);
    Tensor* gx = ctx.in_grad(0);
    Tensor* gw = ctx.in_grad(1);
    Tensor* gb = ctx.in_grad(2);
    for (std::size_t b = 0; b < n; ++b) {
      const auto gy = cmat(g, b * co * hw, co, hw);
      if (gx) mmat(*gx, b * ci * hw, ci, hw).noalias() += w.transpose() * gy;
      if (gw) mmat(*gw, 0, co, ci).noalias() += gy * cmat(xv, b * ci * hw, ci, hw).transpose();
      if (gb) VecMap(gb->data().data(), static_cast<Eigen::Index>(co)) += gy.rowwise().sum();
    }
  });
}

Var conv3x3(Var x, Var weight, Var bias, int stride) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  require_rank("conv3x3", xv, 4, "x");
  require_rank("conv3x3", wv, 4, "weight");
  require_rank("conv3x3", bv, 1, "bias");
  if (stride != 1 && stride != 2) shape_error("conv3x3", "stride must be 1 or 2");
  const std::size_t n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), w = xv.dim(3), co = wv.dim(0);
  if (wv.dim(1) != ci || wv.dim(2) != 3 || wv.dim(3) != 3 || bv.dim(0) != co)
    shape_error("conv3x3", "x " + shape_str(xv.shape()) + " incompatible with weight " + shape_str(wv.shape()));
  const auto s = static_cast<std::size_t>(stride);
  if (h % s != 0 || w % s != 0)
    shape_error("conv3x3", "spatial size " + shape_str(xv.shape()) + " not divisible by stride");
  const std::size_t ho = h / s, wo = w / s, k = ci * 9;

  Tensor out({n, co, ho, wo});
  std::vector<double> cols(k * ho * wo);
  const auto wm = cmat(wv, 0, co, k);
  for (std::size_t b = 0; b < n; ++b) {
    im2col3x3(xv.data().data() + b * ci * h * w, ci, h, w, stride, ho, wo, cols.data());
    auto y = mmat(out, b * co * ho * wo, co, ho * wo);
    y.noalias() = wm * ConstMatMap(cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(ho * wo));
    y.colwise() += ConstVecMap(bv.data().data(), static_cast<Eigen::Index>(co));
  }
  return x.tape->record(std::move(out), {x, weight, bias}, [=](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& xv = ctx.in_value(0);
    const auto wm = cmat(ctx.in_value(1), 0, co, k);
    Tensor* gx = ctx.in_grad(0);
    Tensor* gw = ctx.in_grad(1);
    Tensor* gb = ctx.in_grad(2);
    std::vector<double> cols(k * ho * wo);
    RowMat dcols;
    for (std::size_t b = 0; b < n; ++b) {
      const auto gy = cmat(g, b * co * ho * wo, co, ho * wo);
      if (gw) {
        im2col3x3(xv.data().data() + b * ci * h * w, ci, h, w, stride, ho, wo, cols.data());
        mmat(*gw, 0, co, k).noalias() +=
            gy * ConstMatMap(cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(ho * wo)).transpose();
      }
      if (gx) {
        dcols.noalias() = wm.transpose() * gy;
        col2im3x3(dcols.data(), ci, h, w, stride, ho, wo, gx->data().data() + b * ci * h * w);
      }
      if (gb) VecMap(gb->data().data(), static_cast<Eigen::Index>(co)) += gy.rowwise().sum();
    }
  });
}

Var batch_norm2d(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, Mode mode,
                 BatchNormConfig cfg) {
  const Tensor& xv = x.value();
  require_rank("batch_norm2d", xv, 4, "x");
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  const Shape cshape{c};
  if (gamma.shape() != cshape || beta.shape() != cshape || running_mean.shape() != cshape ||
      running_var.shape() != cshape)
    shape_error("batch_norm2d", "per-channel tensors must have shape " + shape_str(cshape));
  const std::size_t m = n * hw;

  std::vector<double> mu(c), invstd(c);
  if (mode == Mode::train) {
    if (m < 2) shape_error("batch_norm2d", "train mode needs at least 2 values per channel");
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) s += xv[(b * c + ch) * hw + i];
      const double mean = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = xv[(b * c + ch) * hw + i] - mean;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(m);
      mu[ch] = mean;
      invstd[ch] = 1.0 / std::sqrt(var + cfg.eps);
      running_mean[ch] = (1.0 - cfg.momentum) * running_mean[ch] + cfg.momentum * mean;
      running_var[ch] = (1.0 - cfg.momentum) * running_var[ch] +
                        cfg.momentum * ss / static_cast<double>(m - 1);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean[ch];
      invstd[ch] = 1.0 / std::sqrt(running_var[ch] + cfg.eps);
    }
  }

  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        out[idx] = gv[ch] * (xv[idx] - mu[ch]) * invstd[ch] + bv[ch];
      }

  const bool train = mode == Mode::train;
  return x.tape->record(std::move(out), {x, gamma, beta}, [=](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& xv = ctx.in_value(0);
    const Tensor& gv = ctx.in_value(1);
    Tensor* gx = ctx.in_grad(0);
    Tensor* ggamma = ctx.in_grad(1);
    Tensor* gbeta = ctx.in_grad(2);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_g = 0.0, sum_gxhat = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const std::size_t idx = (b * c + ch) * hw + i;
          const double xhat = (xv[idx] - mu[ch]) * invstd[ch];
          sum_g += g[idx];
          sum_gxhat += g[idx] * xhat;
        }
      if (ggamma) (*ggamma)[ch] += sum_gxhat;
      if (gbeta) (*gbeta)[ch] += sum_g;
      if (!gx) continue;
      const double md = static_cast<double>(m);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const std::size_t idx = (b * c + ch) * hw + i;
          if (train) {
            const double xhat = (xv[idx] - mu[ch]) * invstd[ch];
            (*gx)[idx] += gv[ch] * invstd[ch] * (g[idx] - sum_g / md - xhat * sum_gxhat / md);
          } else {
            (*gx)[idx] += gv[ch] * invstd[ch] * g[idx];
          }
        }
    }
  });
}

Var linear(Var x, Var weight, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  require_rank("linear", xv, 2, "x");
  require_rank("linear", wv, 2, "weight");
  require_rank("linear", bv, 1, "bias");
  const std::size_t bsz = xv.dim(0), in = xv.dim(1), o = wv.dim(0);
  if (wv.dim(1) != in || bv.dim(0) != o)
    shape_error("linear", "x " + shape_str(xv.shape()) + " incompatible with weight " + shape_str(wv.shape()) +
                              " and bias " + shape_str(bv.shape()));
  Tensor out({bsz, o});
  auto y = mmat(out, 0, bsz, o);
  y.noalias() = cmat(xv, 0, bsz, in) * cmat(wv, 0, o, in).transpose();
  y.rowwise() += ConstVecMap(bv.data().data(), static_cast<Eigen::Index>(o)).transpose();
  return x.tape->record(std::move(out), {x, weight, bias}, [bsz, in, o](BackwardCtx& ctx) {
    const auto gy = cmat(ctx.out_grad(), 0, bsz, o);
    if (Tensor* gx = ctx.in_grad(0)) mmat(*gx, 0, bsz, in).noalias() += gy * cmat(ctx.in_value(1), 0, o, in);
    if (Tensor* gw = ctx.in_grad(1))
      mmat(*gw, 0, o, in).noalias() += gy.transpose() * cmat(ctx.in_value(0), 0, bsz, in);
    if (Tensor* gb = ctx.in_grad(2))
      VecMap(gb->data().data(), static_cast<Eigen::Index>(o)) += gy.colwise().sum().transpose();
  });
}

Var relu(Var x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double out) { return out * (1.0 - out); });
}

Var softmax(Var x, int axis) {
  const Tensor& xv = x.value();
  const int rank = static_cast<int>(xv.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    shape_error("softmax", "axis " + std::to_string(axis) + " invalid for shape " + shape_str(xv.shape()));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= xv.dim(static_cast<std::size_t>(i));
  for (int i = axis + 1; i < rank; ++i) inner *= xv.dim(static_cast<std::size_t>(i));
  const std::size_t len = xv.dim(static_cast<std::size_t>(axis));

  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= s;
    }
  return x.tape->record(std::move(out), {x}, [outer, inner, len](BackwardCtx& ctx) {
    const Tensor& y = ctx.out_value();
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.in_grad(0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t idx = base + k * inner;
          (*gx)[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

Var softmax_rows_masked(Var x, const std::vector<std::uint8_t>* allowed) {
  const Tensor& xv = x.value();
  require_rank("softmax_rows_masked", xv, 2, "x");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (allowed && allowed->size() != rows * cols)
    shape_error("softmax_rows_masked", "mask size does not match " + shape_str(xv.shape()));
  std::vector<std::uint8_t> mask = allowed ? *allowed : std::vector<std::uint8_t>(rows * cols, 1);

  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (mask[r * cols + c]) mx = std::max(mx, xv[r * cols + c]);
    if (!std::isfinite(mx)) shape_error("softmax_rows_masked", "row " + std::to_string(r) + " has no allowed entry");
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c)
      if (mask[r * cols + c]) {
        const double e = std::exp(xv[r * cols + c] - mx);
        out[r * cols + c] = e;
        s += e;
      }
    for (std::size_t c = 0; c < cols; ++c)
      if (mask[r * cols + c]) out[r * cols + c] /= s;
  }
  return x.tape->record(std::move(out), {x}, [rows, cols](BackwardCtx& ctx) {
    const Tensor& y = ctx.out_value();
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.in_grad(0);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) (*gx)[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
    }
  });
}

Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  require_rank("global_avg_pool", xv, 4, "x");
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < hw; ++k) s += xv[i * hw + k];
    out[i] = s / static_cast<double>(hw);
  }
  return x.tape->record(std::move(out), {x}, [n, c, hw](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.in_grad(0);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < n * c; ++i)
      for (std::size_t k = 0; k < hw; ++k) (*gx)[i * hw + k] += g[i] * inv;
  });
}

Var l2_normalize_rows(Var x, double eps) {
  const Tensor& xv = x.value();
  require_rank("l2_normalize_rows", xv, 2, "x");
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor out({r, c});
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = eps;
    for (std::size_t j = 0; j < c; ++j) s += xv[i * c + j] * xv[i * c + j];
    norms[i] = std::sqrt(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] / norms[i];
  }
  return x.tape->record(std::move(out), {x}, [r, c, norms](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& y = ctx.out_value();
    Tensor* gx = ctx.in_grad(0);
    for (std::size_t i = 0; i < r; ++i) {
      double gy = 0.0;
      for (std::size_t j = 0; j < c; ++j) gy += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += (g[i * c + j] - y[i * c + j] * gy) / norms[i];
    }
  });
}

Var add(Var a, Var b) {
  if (a.shape() != b.shape()) shape_error("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  out.add_(b.value());
  return a.tape->record(std::move(out), {a, b}, [](BackwardCtx& ctx) {
    if (Tensor* ga = ctx.in_grad(0)) ga->add_(ctx.out_grad());
    if (Tensor* gb = ctx.in_grad(1)) gb->add_(ctx.out_grad());
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  if (a.shape() != b.shape()) shape_error("mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return broadcast_mul(a, b);
}

Var scale(Var x, double s) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= s;
  return x.tape->record(std::move(out), {x}, [s](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += s * g[i];
  });
}

Var broadcast_mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != bv.rank()) shape_error("broadcast_mul", "rank mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  const std::size_t rank = av.rank();
  for (std::size_t i = 0; i < rank; ++i)
    if (bv.dim(i) != 1 && bv.dim(i) != av.dim(i))
      shape_error("broadcast_mul", shape_str(bv.shape()) + " does not broadcast to " + shape_str(av.shape()));

  // index of b for every element of a
  std::vector<std::size_t> bidx(av.numel());
  {
    std::vector<std::size_t> coord(rank, 0);
    for (std::size_t i = 0; i < av.numel(); ++i) {
      std::size_t off = 0;
      for (std::size_t d = 0; d < rank; ++d) off = off * bv.dim(d) + (bv.dim(d) == 1 ? 0 : coord[d]);
      bidx[i] = off;
      for (std::size_t d = rank; d-- > 0;) {
        if (++coord[d] < av.dim(d)) break;
        coord[d] = 0;
      }
    }
  }
  Tensor out = Tensor::zeros_like(av);
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[bidx[i]];
  return a.tape->record(std::move(out), {a, b}, [bidx = std::move(bidx)](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& av = ctx.in_value(0);
    const Tensor& bv = ctx.in_value(1);
    if (Tensor* ga = ctx.in_grad(0))
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv[bidx[i]];
    if (Tensor* gb = ctx.in_grad(1))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[bidx[i]] += g[i] * av[i];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(Tensor({1}, s), {x}, [](BackwardCtx& ctx) {
    const double g = ctx.out_grad()[0];
    Tensor* gx = ctx.in_grad(0);
    for (auto& v : gx->data()) v += g;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

Var mean_axis(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) shape_error("mean_axis", "axis out of range for " + shape_str(xv.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  const std::size_t len = xv.dim(axis);
  Shape shape;
  for (std::size_t i = 0; i < xv.rank(); ++i)
    if (i != axis) shape.push_back(xv.dim(i));
  if (shape.empty()) shape.push_back(1);
  Tensor out(shape);
  const double inv = 1.0 / static_cast<double>(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t in = 0; in < inner; ++in) out[o * inner + in] += xv[(o * len + k) * inner + in] * inv;
  return x.tape->record(std::move(out), {x}, [outer, inner, len, inv](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.in_grad(0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t in = 0; in < inner; ++in) (*gx)[(o * len + k) * inner + in] += g[o * inner + in] * inv;
  });
}

Var batched_matmul(Var a, Var b, bool trans_a, bool trans_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank("batched_matmul", av, 3, "a");
  require_rank("batched_matmul", bv, 3, "b");
  const std::size_t batch = av.dim(0);
  const std::size_t ar = av.dim(1), ac = av.dim(2), br = bv.dim(1), bc = bv.dim(2);
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br, n = trans_b ? br : bc;
  if (bv.dim(0) != batch || k != kb)
    shape_error("batched_matmul", shape_str(av.shape()) + (trans_a ? "^T" : "") + " x " + shape_str(bv.shape()) +
                                      (trans_b ? "^T" : ""));
  Tensor out({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    const auto am = cmat(av, i * ar * ac, ar, ac);
    const auto bm = cmat(bv, i * br * bc, br, bc);
    auto y = mmat(out, i * m * n, m, n);
    if (trans_a && trans_b) y.noalias() = am.transpose() * bm.transpose();
    else if (trans_a) y.noalias() = am.transpose() * bm;
    else if (trans_b) y.noalias() = am * bm.transpose();
    else y.noalias() = am * bm;
  }
  return a.tape->record(std::move(out), {a, b}, [=](BackwardCtx& ctx) {
    const Tensor& av = ctx.in_value(0);
    const Tensor& bv = ctx.in_value(1);
    Tensor* ga = ctx.in_grad(0);
    Tensor* gb = ctx.in_grad(1);
    for (std::size_t i = 0; i < batch; ++i) {
      const auto gy = cmat(ctx.out_grad(), i * m * n, m, n);
      const auto am = cmat(av, i * ar * ac, ar, ac);
      const auto bm = cmat(bv, i * br * bc, br, bc);
      // op(A) = A or A^T with shape [m,k]; op(B) shape [k,n]; Y = op(A) op(B)
      if (ga) {
        auto gam = mmat(*ga, i * ar * ac, ar, ac);
        // dL/dop(A) = gy * op(B)^T  ([m,k])
        if (!trans_a && !trans_b) gam.noalias() += gy * bm.transpose();
        else if (!trans_a && trans_b) gam.noalias() += gy * bm;
        else if (trans_a && !trans_b) gam.noalias() += bm * gy.transpose();
        else gam.noalias() += bm.transpose() * gy.transpose();
      }
      if (gb) {
        auto gbm = mmat(*gb, i * br * bc, br, bc);
        // dL/dop(B) = op(A)^T * gy  ([k,n])
        if (!trans_a && !trans_b) gbm.noalias() += am.transpose() * gy;
        else if (trans_a && !trans_b) gbm.noalias() += am * gy;
        else if (!trans_a && trans_b) gbm.noalias() += gy.transpose() * am;
        else gbm.noalias() += gy.transpose() * am.transpose();
      }
    }
  });
}

Var matmul(Var a, Var b, bool trans_a, bool trans_b) {
  if (a.value().rank() != 2 || b.value().rank() != 2)
    shape_error("matmul", "operands must be 2-D, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Var a3 = reshape(a, {1, a.shape()[0], a.shape()[1]});
  Var b3 = reshape(b, {1, b.shape()[0], b.shape()[1]});
  Var y = batched_matmul(a3, b3, trans_a, trans_b);
  return reshape(y, {y.shape()[1], y.shape()[2]});
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  require_rank("slice_cols", xv, 2, "x");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (count == 0 || start + count > cols) shape_error("slice_cols", "slice out of range for " + shape_str(xv.shape()));
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = xv[r * cols + start + c];
  return x.tape->record(std::move(out), {x}, [rows, cols, start, count](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.in_grad(0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) (*gx)[r * cols + start + c] += g[r * count + c];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) shape_error("concat_cols", "no inputs");
  const std::size_t rows = parts.front().shape().at(0);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_rank("concat_cols", p.value(), 2, "part");
    if (p.shape()[0] != rows) shape_error("concat_cols", "row count mismatch");
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  Tensor out({rows, total});
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& pv = parts[i].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[i]; ++c) out[r * total + off + c] = pv[r * widths[i] + c];
    off += widths[i];
  }
  return parts.front().tape->record(std::move(out), parts, [rows, total, widths](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    std::size_t off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (Tensor* gp = ctx.in_grad(i))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[i]; ++c) (*gp)[r * widths[i] + c] += g[r * total + off + c];
      off += widths[i];
    }
  });
}

}  // namespace coseg
