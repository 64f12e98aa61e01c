#pragma once

#include <functional>
#include <span>
#include <vector>

#include "coseg/autograd.hpp"

namespace coseg {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;
};

// One bias-corrected Adam update of every parameter from its .grad.
// State is lazily sized to the parameter list on the first call.
void adam_step(std::span<Parameter* const> params, AdamState& state, const AdamConfig& cfg);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
// dominating with round-off.
double relative_error(double analytic, double numeric, double floor = 1e-6);

using InputFn = std::function<Var(Tape&, const std::vector<Var>&)>;
using ParamFn = std::function<Var(Tape&)>;

// Central finite differences against reverse-mode gradients of the scalar
// f w.r.t. every element of every input.
GradCheckResult grad_check(const InputFn& f, std::vector<Tensor> inputs, double eps = 1e-5);
// Same, for the gradients f accumulates into the given parameters.
GradCheckResult grad_check_params(const ParamFn& f, std::span<Parameter* const> params, double eps = 1e-5);

}  // namespace coseg
