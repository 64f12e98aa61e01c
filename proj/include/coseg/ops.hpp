#pragma once

#include <cstdint>
#include <vector>

#include "coseg/autograd.hpp"

// Differentiable operations recorded on a Tape. Every function validates
// shapes and throws std::invalid_argument with the offending shapes.
namespace coseg {

enum class Mode { train, eval };

// x[N,Ci,H,W], weight[Co,Ci], bias[Co] -> [N,Co,H,W]
Var conv1x1(Var x, Var weight, Var bias);
// 3x3 convolution with zero padding 1; stride 1 or 2.
// x[N,Ci,H,W], weight[Co,Ci,3,3], bias[Co] -> [N,Co,H/stride,W/stride]
Var conv3x3(Var x, Var weight, Var bias, int stride);

struct BatchNormConfig {
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel normalization over (N,H,W). Train mode normalizes with batch
// statistics and updates the running buffers; eval mode reads them.
Var batch_norm2d(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, Mode mode,
                 BatchNormConfig cfg = {});

// x[B,I], weight[O,I], bias[O] -> [B,O]
Var linear(Var x, Var weight, Var bias);

Var relu(Var x);
Var sigmoid(Var x);
Var softmax(Var x, int axis);
// Row softmax over x[R,C]; entries with allowed[r*C+c] == 0 get weight 0
// and each row renormalizes over its allowed set. Every row needs at least
// one allowed entry. A null mask allows everything.
Var softmax_rows_masked(Var x, const std::vector<std::uint8_t>* allowed);

// [N,C,H,W] -> [N,C]
Var global_avg_pool(Var x);

// Each row of x[R,C] divided by sqrt(sum of squares + eps).
Var l2_normalize_rows(Var x, double eps = 1e-12);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
// a * b where b broadcasts to a (equal rank, each dim of b is 1 or equal).
Var broadcast_mul(Var a, Var b);
Var reshape(Var x, Shape shape);
Var sum(Var x);
Var mean(Var x);
// Mean over one axis, removing it.
Var mean_axis(Var x, std::size_t axis);

// Batched matrix product over 3-D operands: a[B,m,k] (or [B,k,m] when
// trans_a) times b[B,k,n] (or [B,n,k] when trans_b) -> [B,m,n].
Var batched_matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
// 2-D convenience wrapper.
Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);

// Column slice / concatenation on the last axis of 2-D tensors.
Var slice_cols(Var x, std::size_t start, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);

}  // namespace coseg
