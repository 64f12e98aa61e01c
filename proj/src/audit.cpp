#include "coseg/audit.hpp"

#include <cmath>
#include <functional>

#include "coseg/cosam.hpp"
#include "coseg/model.hpp"
#include "coseg/objectives.hpp"
#include "coseg/ops.hpp"
#include "coseg/optim.hpp"
#include "coseg/random.hpp"
#include "coseg/srim.hpp"

namespace coseg {

namespace {

Var probe(Tape& tape, Var y, std::uint64_t seed) {
  Rng rng(seed * 7919 + 99);
  return sum(mul(y, tape.constant(rng.uniform_tensor(y.shape(), -1.0, 1.0))));
}

// Zero-initialized tensors get random values so every path carries gradient.
void wake(ParameterSet& ps, Rng& rng) {
  for (Parameter* p : ps.trainable()) {
    bool all_zero = true;
    for (double v : p->value.data()) all_zero &= v == 0.0;
    if (all_zero) p->value = rng.uniform_tensor(p->value.shape(), -0.3, 0.3);
  }
}

CosamConfig toy_cosam() {
  CosamConfig c;
  c.channels = 6;
  c.reduced = 3;
  c.refs = 2;
  c.height = 3;
  c.width = 3;
  return c;
}

ModelConfig toy_model(std::set<std::size_t> cosam_after, std::set<std::size_t> srim_after) {
  ModelConfig c;
  c.backbone.blocks = {{8, 2}, {8, 1}};
  c.backbone.cosam_after = std::move(cosam_after);
  c.backbone.srim_after = std::move(srim_after);
  c.height = 8;
  c.width = 8;
  c.num_classes = 3;
  c.cosam.refs = 2;
  // near-constant post-ReLU descriptors make NCC at eps 1e-4 too stiff for
  // differences through a whole network; the op and blocks use 1e-4 above
  c.cosam.ncc_eps = 1e-2;
  c.srim.heads = 2;
  c.srim.objects = 2;
  c.normalize = true;
  return c;
}

// A conv bias feeding train-mode batch norm has an identically zero
// gradient; those are checked analytically instead of by differences.
double check_params(ParameterSet& ps, const ParamFn& f) {
  std::vector<Parameter*> live, inert;
  for (Parameter* p : ps.trainable()) (p->name.ends_with(".conv.bias") ? inert : live).push_back(p);
  double err = grad_check_params(f, live).max_rel_error;
  ps.zero_grad();
  Tape tape;
  tape.backward(f(tape));
  for (Parameter* p : inert)
    for (double g : p->grad.data())
      if (std::abs(g) > 1e-12) err = std::max(err, 1.0);
  return err;
}

using Check = std::function<double(std::uint64_t seed)>;

std::vector<std::pair<std::string, Check>> checks() {
  std::vector<std::pair<std::string, Check>> c;
  auto input_check = [](std::function<Var(Tape&, const std::vector<Var>&)> f,
                        std::function<std::vector<Tensor>(Rng&)> make) -> Check {
    return [f, make](std::uint64_t seed) {
      Rng rng(seed);
      return grad_check([&](Tape& t, const std::vector<Var>& in) { return probe(t, f(t, in), seed); }, make(rng))
          .max_rel_error;
    };
  };
  auto u = [](Rng& r, Shape s, double lo = -1, double hi = 1) { return r.uniform_tensor(s, lo, hi); };

  c.emplace_back("conv1x1", input_check([](Tape&, auto& in) { return conv1x1(in[0], in[1], in[2]); },
                                        [&](Rng& r) { return std::vector{u(r, {2, 3, 2, 2}), u(r, {4, 3}), u(r, {4})}; }));
  for (int stride : {1, 2})
    c.emplace_back("conv3x3/s" + std::to_string(stride),
                   input_check([stride](Tape&, auto& in) { return conv3x3(in[0], in[1], in[2], stride); },
                               [&](Rng& r) { return std::vector{u(r, {2, 2, 4, 4}), u(r, {3, 2, 3, 3}), u(r, {3})}; }));
  c.emplace_back("batch_norm2d", input_check(
                                     [](Tape&, auto& in) {
                                       Tensor m = Tensor::zeros({3}), v = Tensor::ones({3});
                                       return batch_norm2d(in[0], in[1], in[2], m, v, Mode::train);
                                     },
                                     [&](Rng& r) { return std::vector{u(r, {2, 3, 2, 2}), u(r, {3}, 0.5, 1.5), u(r, {3})}; }));
  c.emplace_back("linear", input_check([](Tape&, auto& in) { return linear(in[0], in[1], in[2]); },
                                       [&](Rng& r) { return std::vector{u(r, {3, 4}), u(r, {2, 4}), u(r, {2})}; }));
  c.emplace_back("relu", input_check([](Tape&, auto& in) { return relu(in[0]); }, [&](Rng& r) {
                   Tensor x = u(r, {4, 5}, 0.1, 1.0);
                   for (std::size_t i = 0; i < x.numel(); i += 2) x[i] = -x[i];
                   return std::vector{x};
                 }));
  c.emplace_back("sigmoid", input_check([](Tape&, auto& in) { return sigmoid(in[0]); },
                                        [&](Rng& r) { return std::vector{u(r, {4, 5}, -3, 3)}; }));
  for (int axis : {0, 1})
    c.emplace_back("softmax/axis" + std::to_string(axis),
                   input_check([axis](Tape&, auto& in) { return softmax(in[0], axis); },
                               [&](Rng& r) { return std::vector{u(r, {4, 5}, -2, 2)}; }));
  c.emplace_back("softmax_rows_masked", input_check(
                                            [](Tape&, auto& in) {
                                              static const std::vector<std::uint8_t> allowed{1, 0, 1, 1, 1, 1, 0, 0, 1};
                                              return softmax_rows_masked(in[0], &allowed);
                                            },
                                            [&](Rng& r) { return std::vector{u(r, {3, 3}, -2, 2)}; }));
  c.emplace_back("global_avg_pool", input_check([](Tape&, auto& in) { return global_avg_pool(in[0]); },
                                                [&](Rng& r) { return std::vector{u(r, {2, 3, 2, 3})}; }));
  c.emplace_back("l2_normalize_rows", input_check([](Tape&, auto& in) { return l2_normalize_rows(in[0]); },
                                                  [&](Rng& r) { return std::vector{u(r, {3, 6})}; }));
  c.emplace_back("elementwise", input_check(
                                    [](Tape&, auto& in) { return scale(mul(add(in[0], in[1]), sub(in[0], in[1])), 1.5); },
                                    [&](Rng& r) { return std::vector{u(r, {3, 4}), u(r, {3, 4})}; }));
  c.emplace_back("broadcast_mul", input_check([](Tape&, auto& in) { return broadcast_mul(in[0], in[1]); },
                                              [&](Rng& r) { return std::vector{u(r, {2, 3, 2, 2}), u(r, {2, 1, 2, 2})}; }));
  c.emplace_back("reshape/mean", input_check(
                                     [](Tape&, auto& in) { return mean_axis(reshape(in[0], {2, 3, 4}), 1); },
                                     [&](Rng& r) { return std::vector{u(r, {6, 4})}; }));
  c.emplace_back("batched_matmul", input_check(
                                       [](Tape&, auto& in) {
                                         return add(batched_matmul(in[0], in[1]), batched_matmul(in[0], in[2], true, true));
                                       },
                                       [&](Rng& r) { return std::vector{u(r, {2, 3, 3}), u(r, {2, 3, 2}), u(r, {2, 2, 3})}; }));
  c.emplace_back("slice/concat", input_check(
                                     [](Tape&, auto& in) {
                                       return concat_cols({slice_cols(in[0], 1, 2), matmul(in[0], in[1]), in[0]});
                                     },
                                     [&](Rng& r) { return std::vector{u(r, {3, 4}), u(r, {4, 2})}; }));
  c.emplace_back("ncc", input_check([](Tape&, auto& in) { return ncc(in[0], in[1], 1e-4); },
                                    [&](Rng& r) { return std::vector{u(r, {6}), u(r, {6})}; }));
  c.emplace_back("cost_volume", input_check([](Tape&, auto& in) { return build_cost_volume(in[0], 2, 1e-4, 3).values; },
                                            [&](Rng& r) { return std::vector{u(r, {3, 4, 2, 3})}; }));

  auto cosam_check = [](std::function<Var(const Cosam&, Tape&, Var)> f) -> Check {
    return [f](std::uint64_t seed) {
      Rng rng(seed);
      ParameterSet ps;
      Cosam m(ps, "cosam", toy_cosam(), rng);
      wake(ps, rng);
      const Tensor x = rng.uniform_tensor({3, 6, 3, 3}, -1, 1);
      const double ei =
          grad_check([&](Tape& t, const std::vector<Var>& in) { return probe(t, f(m, t, in[0]), seed); }, {x}).max_rel_error;
      const double ep =
          grad_check_params([&](Tape& t) { return probe(t, f(m, t, t.constant(x)), seed); }, ps.trainable()).max_rel_error;
      return std::max(ei, ep);
    };
  };
  c.emplace_back("spatial_attention", cosam_check([](const Cosam& m, Tape& t, Var x) {
                   return m.spatial_attention(t, x, 3, Mode::train).features;
                 }));
  c.emplace_back("channel_attention",
                 cosam_check([](const Cosam& m, Tape& t, Var x) { return m.channel_attention(t, x, 3).features; }));
  c.emplace_back("cosam_forward",
                 cosam_check([](const Cosam& m, Tape& t, Var x) { return m.forward(t, x, 3, Mode::train).features; }));

  c.emplace_back("object_association",
                 input_check([](Tape&, auto& in) { return object_association(in[0], in[1], in[2]); },
                             [&](Rng& r) { return std::vector{u(r, {2, 4, 3, 3}), u(r, {2, 4}), u(r, {2})}; }));
  c.emplace_back("weighted_avg_pool", input_check([](Tape&, auto& in) { return weighted_avg_pool(in[0], in[1]); },
                                                  [&](Rng& r) { return std::vector{u(r, {2, 4, 2, 2}), u(r, {2, 3, 2, 2}, 0, 1)}; }));
  c.emplace_back("masked_mhsa", input_check(
                                    [](Tape&, auto& in) {
                                      AttentionWeights w{in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8]};
                                      return masked_mhsa(in[0], w, 2, 1, 3).output;
                                    },
                                    [&](Rng& r) {
                                      std::vector<Tensor> v{u(r, {3, 2, 4})};
                                      for (int i = 0; i < 4; ++i) {
                                        v.push_back(u(r, {4, 4}, -0.7, 0.7));
                                        v.push_back(u(r, {4}, -0.2, 0.2));
                                      }
                                      return v;
                                    }));
  c.emplace_back("redistribute", input_check([](Tape&, auto& in) { return redistribute(in[0], in[1], in[2], in[3]); },
                                             [&](Rng& r) {
                                               return std::vector{u(r, {2, 3, 4}), u(r, {2, 3, 2, 2}, 0, 1), u(r, {6, 4}),
                                                                  u(r, {6})};
                                             }));
  c.emplace_back("srim_forward", [](std::uint64_t seed) {
    Rng rng(seed);
    ParameterSet ps;
    SrimConfig cfg;
    cfg.channels = 8;
    cfg.reduced = 4;
    cfg.objects = 2;
    cfg.heads = 2;
    Srim m(ps, "srim", cfg, rng);
    wake(ps, rng);
    const Tensor x = rng.uniform_tensor({3, 8, 3, 3}, -1, 1);
    const double ei =
        grad_check([&](Tape& t, const std::vector<Var>& in) { return probe(t, m.forward(t, in[0], 3), seed); }, {x}).max_rel_error;
    const double ep =
        grad_check_params([&](Tape& t) { return probe(t, m.forward(t, t.constant(x), 3), seed); }, ps.trainable()).max_rel_error;
    return std::max(ei, ep);
  });
  c.emplace_back("temporal_attention",
                 input_check([](Tape&, auto& in) { return temporal_aggregate(in[0], 3, TemporalMode::attention, in[1], in[2]); },
                             [&](Rng& r) { return std::vector{u(r, {6, 4}), u(r, {1, 4}), u(r, {1})}; }));
  c.emplace_back("reid_forward", [](std::uint64_t seed) {
    Rng rng(seed);
    ParameterSet ps;
    ModelConfig cfg = toy_model({1, 2}, {2});
    cfg.temporal = TemporalMode::attention;
    ReidModel m(ps, "m", cfg, rng);
    wake(ps, rng);
    const Tensor x = rng.uniform_tensor({6, 3, 8, 8}, 0, 1);
    auto out = [&](Tape& t, Var in) {
      auto o = m.forward(t, in, 3, Mode::train);
      return add(probe(t, o.embedding, seed), probe(t, o.logits, seed + 1));
    };
    const double ep = check_params(ps, [&](Tape& t) { return out(t, t.constant(x)); });
    const double ei = grad_check([&](Tape& t, const std::vector<Var>& in) { return out(t, in[0]); }, {x}).max_rel_error;
    return std::max(ei, ep);
  });

  c.emplace_back("cross_entropy", [](std::uint64_t seed) {
    Rng rng(seed);
    return grad_check([](Tape&, const std::vector<Var>& in) { return cross_entropy(in[0], {0, 2, 1, 2}); },
                      {rng.uniform_tensor({4, 3}, -2, 2)})
        .max_rel_error;
  });
  c.emplace_back("batch_hard_triplet", [](std::uint64_t seed) {
    Rng rng(seed);
    return grad_check(
               [](Tape&, const std::vector<Var>& in) {
                 return batch_hard_triplet(TripletBatch{in[0], {0, 0, 1, 1, 2, 2}}, 0.3);
               },
               {rng.uniform_tensor({6, 4}, -1, 1)})
        .max_rel_error;
  });
  c.emplace_back("kl_divergence", [](std::uint64_t seed) {
    Rng rng(seed);
    return grad_check(
               [](Tape&, const std::vector<Var>& in) { return kl_divergence(softmax(in[0], 1), softmax(in[1], 1)); },
               {rng.uniform_tensor({3, 4}, -2, 2), rng.uniform_tensor({3, 4}, -2, 2)})
        .max_rel_error;
  });
  c.emplace_back("reid_loss", [](std::uint64_t seed) {
    Rng rng(seed);
    return grad_check(
               [](Tape&, const std::vector<Var>& in) {
                 return reid_loss(in[0], {0, 0, 1, 1}, TripletBatch{in[1], {0, 0, 1, 1}}, 0.3, 0.7).total;
               },
               {rng.uniform_tensor({4, 3}, -2, 2), rng.uniform_tensor({4, 5}, -1, 1)})
        .max_rel_error;
  });
  c.emplace_back("distill_loss", [](std::uint64_t seed) {
    TwoBranchModel model(toy_model({}, {}), toy_model({2}, {2}), seed);
    Rng rng(seed + 1000);
    wake(model.params(), rng);
    const Tensor x = rng.uniform_tensor({6, 3, 8, 8}, 0, 1);
    const std::vector<std::size_t> y{1, 2};
    return check_params(model.params(), [&](Tape& tape) {
      auto o = model.forward(tape, tape.constant(x), 3, Mode::train);
      return distill_loss(o.p, o.q, cross_entropy(o.logits_p, y), cross_entropy(o.logits_q, y), 2.0, 4.0);
    });
  });
  return c;
}

}  // namespace

std::vector<AuditCheck> gradient_audit(const std::vector<std::uint64_t>& seeds, double tol) {
  std::vector<AuditCheck> out;
  for (const auto& [name, check] : checks())
    for (std::uint64_t seed : seeds) {
      const double e = check(seed);
      out.push_back({name, seed, e, std::isfinite(e) && e < tol});
    }
  return out;
}

}  // namespace coseg
