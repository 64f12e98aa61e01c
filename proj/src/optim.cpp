#include "coseg/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace coseg {

void adam_step(std::span<Parameter* const> params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.empty() && state.step == 0) {
    for (const Parameter* p : params) {
      state.m.push_back(Tensor::zeros_like(p->value));
      state.v.push_back(Tensor::zeros_like(p->value));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state holds a different parameter count");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    if (p.grad.shape() != p.value.shape() || m.shape() != p.value.shape())
      throw std::invalid_argument("adam_step: shape mismatch for parameter " + p.name);
    for (std::size_t k = 0; k < p.value.numel(); ++k) {
      const double g = p.grad[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
      p.value[k] -= cfg.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.eps);
    }
  }
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double eval_inputs(const InputFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  Var out = f(tape, vars);
  if (out.value().numel() != 1) throw std::invalid_argument("grad_check: function must be scalar");
  return out.value()[0];
}

void consider(GradCheckResult& r, std::size_t input, std::size_t idx, double a, double n) {
  const double e = relative_error(a, n);
  if (e > r.max_rel_error) {
    r.max_rel_error = e;
    r.worst_input = input;
    r.worst_index = idx;
    r.analytic = a;
    r.numeric = n;
  }
}

}  // namespace

GradCheckResult grad_check(const InputFn& f, std::vector<Tensor> inputs, double eps) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    Var out = f(tape, vars);
    tape.backward(out);
    for (std::size_t i = 0; i < vars.size(); ++i) {
      // inputs the function never touched have no recorded gradient
      try {
        analytic.push_back(tape.grad(vars[i]));
      } catch (const std::logic_error&) {
        analytic.push_back(Tensor::zeros_like(inputs[i]));
      }
    }
  }
  GradCheckResult r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].numel(); ++k) {
      const double orig = inputs[i][k];
      inputs[i][k] = orig + eps;
      const double fp = eval_inputs(f, inputs);
      inputs[i][k] = orig - eps;
      const double fm = eval_inputs(f, inputs);
      inputs[i][k] = orig;
      consider(r, i, k, analytic[i][k], (fp - fm) / (2.0 * eps));
    }
  }
  return r;
}

GradCheckResult grad_check_params(const ParamFn& f, std::span<Parameter* const> params, double eps) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var out = f(tape);
    tape.backward(out);
  }
  std::vector<Tensor> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);

  auto eval = [&]() {
    Tape tape;
    Var out = f(tape);
    return out.value()[0];
  };
  GradCheckResult r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& v = params[i]->value;
    for (std::size_t k = 0; k < v.numel(); ++k) {
      const double orig = v[k];
      v[k] = orig + eps;
      const double fp = eval();
      v[k] = orig - eps;
      const double fm = eval();
      v[k] = orig;
      consider(r, i, k, analytic[i][k], (fp - fm) / (2.0 * eps));
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return r;
}

}  // namespace coseg
