#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "coseg/cosam.hpp"
#include "coseg/optim.hpp"
#include "test_helpers.hpp"

using namespace coseg;
using coseg::testing::kGradTol;
using coseg::testing::probe;

namespace {

// NCC written out with scalar loops, independent of the library.
double ncc_oracle(const std::vector<double>& p, const std::vector<double>& q, double eps) {
  const double d = static_cast<double>(p.size());
  double mp = 0, mq = 0;
  for (std::size_t k = 0; k < p.size(); ++k) mp += p[k] / d, mq += q[k] / d;
  double sp = 0, sq = 0, num = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    sp += (p[k] - mp) * (p[k] - mp) / d;
    sq += (q[k] - mq) * (q[k] - mq) / d;
    num += (p[k] - mp) * (q[k] - mq);
  }
  return num / d / ((std::sqrt(sp) + eps) * (std::sqrt(sq) + eps));
}

std::vector<std::size_t> nearest_oracle(std::size_t n, std::size_t frames, std::size_t k) {
  std::vector<std::pair<std::size_t, std::size_t>> cand;  // (distance, index)
  for (std::size_t t = 0; t < frames; ++t)
    if (t != n) cand.emplace_back(t > n ? t - n : n - t, t);
  std::sort(cand.begin(), cand.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(cand[i].second);
  return out;
}

std::vector<double> descriptor(const Tensor& f, std::size_t n, std::size_t i, std::size_t j) {
  std::vector<double> v;
  for (std::size_t c = 0; c < f.dim(1); ++c) v.push_back(f.at({n, c, i, j}));
  return v;
}

CosamConfig toy_config(std::size_t d, std::size_t dr, std::size_t k, std::size_t h, std::size_t w) {
  CosamConfig c;
  c.channels = d;
  c.reduced = dr;
  c.refs = k;
  c.height = h;
  c.width = w;
  return c;
}

void randomize(Parameter& p, Rng& rng, double scale) {
  p.value = rng.uniform_tensor(p.value.shape(), -scale, scale);
}

void randomize_all(Cosam& m, Rng& rng) {
  randomize(m.summary_weight, rng, 0.5);
  randomize(m.summary_bias, rng, 0.5);
  randomize(m.reduce_bias, rng, 0.2);
  randomize(m.bn_beta, rng, 0.3);
  randomize(m.mlp1_bias, rng, 0.2);
  randomize(m.mlp2_bias, rng, 0.2);
}

}  // namespace

TEST(Ncc, SelfCorrelationAndAntisymmetry) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor p = rng.uniform_tensor({16}, -1, 1);
    std::vector<double> neg(p.data().begin(), p.data().end());
    for (auto& v : neg) v = -v;
    EXPECT_NEAR(ncc(p.data(), p.data(), 1e-4), 1.0, 1e-3);
    EXPECT_NEAR(ncc(p.data(), neg, 1e-4), -1.0, 1e-3);
  }
}

TEST(Ncc, ConstantDescriptorGivesExactlyZero) {
  Rng rng(2);
  std::vector<double> c(8, 3.25);
  Tensor q = rng.uniform_tensor({8}, -1, 1);
  EXPECT_EQ(ncc(c, q.data(), 1e-4), 0.0);
  EXPECT_EQ(ncc(q.data(), c, 1e-4), 0.0);
  EXPECT_EQ(ncc(c, c, 0.0), 0.0);
  // constants whose mean does not round back to themselves
  for (int i = 0; i < 200; ++i) {
    const std::size_t d = 2 + rng.below(15);
    const std::vector<double> k(d, rng.uniform(-3, 3));
    const Tensor r = rng.uniform_tensor({d}, -1, 1);
    EXPECT_EQ(ncc(k, r.data(), 1e-4), 0.0);
    EXPECT_EQ(ncc(r.data(), k, 1e-4), 0.0);
  }
  Tensor f = rng.uniform_tensor({2, 7, 1, 1}, -1, 1);
  for (std::size_t ch = 0; ch < 7; ++ch) f.at({0, ch, 0, 0}) = 0.1;
  Tape tape;
  const Tensor& v = build_cost_volume(tape.constant(f), 1, 1e-4, 2).values.value();
  EXPECT_EQ(v[0], 0.0);
  EXPECT_EQ(v[1], 0.0);
}

TEST(Ncc, PositiveAffineInvariance) {
  Rng rng(3);
  int checked = 0;
  while (checked < 200) {
    Tensor p = rng.uniform_tensor({12}, -1, 1), q = rng.uniform_tensor({12}, -1, 1);
    if (ncc_oracle({p.data().begin(), p.data().end()}, {p.data().begin(), p.data().end()}, 0.0) < 0.5) continue;
    auto sigma = [](const Tensor& t) {
      double m = 0, s = 0;
      for (double v : t.data()) m += v / t.numel();
      for (double v : t.data()) s += (v - m) * (v - m) / t.numel();
      return std::sqrt(s);
    };
    if (sigma(p) < 0.1 || sigma(q) < 0.1) continue;
    const double a = rng.uniform(0.5, 2.0), b = rng.uniform(-1, 1), c = rng.uniform(0.5, 2.0), d = rng.uniform(-1, 1);
    std::vector<double> pa, qc;
    for (double v : p.data()) pa.push_back(a * v + b);
    for (double v : q.data()) qc.push_back(c * v + d);
    EXPECT_NEAR(ncc(pa, qc, 1e-4), ncc(p.data(), q.data(), 1e-4), 2e-3);
    ++checked;
  }
}

TEST(Ncc, BoundedByOne) {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t d = 2 + rng.below(10);
    Tensor p = rng.normal_tensor({d}, rng.uniform(0.001, 100)), q = rng.normal_tensor({d}, rng.uniform(0.001, 100));
    const double v = ncc(p.data(), q.data(), 1e-4);
    EXPECT_LE(std::abs(v), 1.0);
  }
}

TEST(Ncc, RejectsLengthMismatch) {
  std::vector<double> a{1, 2, 3}, b{1, 2};
  EXPECT_THROW(ncc(a, b, 1e-4), std::invalid_argument);
}

TEST(Ncc, DifferentiableFormMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    auto r = grad_check([](Tape&, const std::vector<Var>& in) { return ncc(in[0], in[1], 1e-4); },
                        {rng.uniform_tensor({6}, -1, 1), rng.uniform_tensor({6}, -1, 1)});
    EXPECT_LT(r.max_rel_error, kGradTol);
  }
}

TEST(SelectReferences, NearestInTimeWithEarlierFirstTieBreak) {
  EXPECT_EQ(select_references(1, 4, 3), (std::vector<std::size_t>{0, 2, 3}));
  EXPECT_EQ(select_references(0, 8, 3), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(select_references(4, 8, 3), (std::vector<std::size_t>{3, 5, 2}));
  EXPECT_THROW(select_references(0, 4, 4), std::invalid_argument);
  EXPECT_THROW(select_references(0, 4, 0), std::invalid_argument);
  for (std::size_t frames = 2; frames <= 9; ++frames)
    for (std::size_t k = 1; k < frames; ++k)
      for (std::size_t n = 0; n < frames; ++n) EXPECT_EQ(select_references(n, frames, k), nearest_oracle(n, frames, k));
}

TEST(CostVolume, FullScaleGeometryShape) {
  Rng rng(5);
  Tape tape;
  auto cv = build_cost_volume(tape.constant(rng.uniform_tensor({4, 256, 16, 8}, -1, 1)), 3, 1e-4, 4);
  EXPECT_EQ(cv.values.shape(), (Shape{4, 384, 16, 8}));
}

TEST(CostVolume, IdenticalFramesCorrelatePerfectlyAtSameLocation) {
  Rng rng(6);
  Tensor frame = rng.uniform_tensor({1, 5, 3, 2}, -1, 1);
  Tensor f({4, 5, 3, 2});
  for (std::size_t n = 0; n < 4; ++n)
    std::copy(frame.data().begin(), frame.data().end(), f.data().begin() + n * frame.numel());
  Tape tape;
  auto cv = build_cost_volume(tape.constant(f), 3, 1e-4, 4);
  const std::size_t hw = 6;
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j)
          EXPECT_NEAR(cv.values.value().at({n, k * hw + i * 2 + j, i, j}), 1.0, 1e-3);
}

TEST(CostVolume, MatchesScalarOracleOnAllSmallGeometries) {
  double worst = 0.0;
  std::size_t cases = 0;
  for (std::size_t frames = 2; frames <= 4; ++frames)
    for (std::size_t h = 1; h <= 4; ++h)
      for (std::size_t w = 1; w <= 4; ++w)
        for (std::size_t d = 2; d <= 8; ++d)
          for (std::size_t k = 1; k < frames; ++k) {
            Rng rng(1000 * frames + 100 * h + 10 * w + d + k);
            Tensor f = rng.uniform_tensor({frames, d, h, w}, -1, 1);
            Tape tape;
            auto cv = build_cost_volume(tape.constant(f), k, 1e-4, frames);
            const Tensor& v = cv.values.value();
            ASSERT_EQ(v.shape(), (Shape{frames, k * h * w, h, w}));
            for (std::size_t n = 0; n < frames; ++n) {
              const auto refs = nearest_oracle(n, frames, k);
              ASSERT_EQ(cv.frame_refs[n], refs);
              for (std::size_t kk = 0; kk < k; ++kk)
                for (std::size_t rh = 0; rh < h; ++rh)
                  for (std::size_t rw = 0; rw < w; ++rw)
                    for (std::size_t i = 0; i < h; ++i)
                      for (std::size_t j = 0; j < w; ++j) {
                        const double expect =
                            ncc_oracle(descriptor(f, n, i, j), descriptor(f, refs[kk], rh, rw), 1e-4);
                        worst = std::max(worst, std::abs(v.at({n, kk * h * w + rh * w + rw, i, j}) - expect));
                      }
            }
            ++cases;
          }
  EXPECT_LT(worst, 1e-12);
  EXPECT_EQ(cases, 4u * 4 * 7 * (1 + 2 + 3));
}

TEST(CostVolume, BatchedSnippetsDoNotMix) {
  Rng rng(7);
  Tensor a = rng.uniform_tensor({3, 4, 2, 2}, -1, 1), b = rng.uniform_tensor({3, 4, 2, 2}, -1, 1);
  Tensor both({6, 4, 2, 2});
  std::copy(a.data().begin(), a.data().end(), both.data().begin());
  std::copy(b.data().begin(), b.data().end(), both.data().begin() + a.numel());
  Tape tape;
  const Tensor& joint = build_cost_volume(tape.constant(both), 2, 1e-4, 3).values.value();
  const Tensor& va = build_cost_volume(tape.constant(a), 2, 1e-4, 3).values.value();
  const Tensor& vb = build_cost_volume(tape.constant(b), 2, 1e-4, 3).values.value();
  EXPECT_TRUE(std::equal(va.data().begin(), va.data().end(), joint.data().begin()));
  EXPECT_TRUE(std::equal(vb.data().begin(), vb.data().end(), joint.data().begin() + va.numel()));
  EXPECT_THROW(build_cost_volume(tape.constant(both), 2, 1e-4, 4), std::invalid_argument);
  EXPECT_THROW(build_cost_volume(tape.constant(a.reshaped({1, 4, 2, 6})), 1, 1e-4, 1), std::invalid_argument);
}

TEST(CostVolume, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    auto r = grad_check(
        [](Tape& t, const std::vector<Var>& in) { return probe(t, build_cost_volume(in[0], 2, 1e-4, 3).values); },
        {rng.uniform_tensor({3, 4, 2, 3}, -1, 1)});
    EXPECT_LT(r.max_rel_error, kGradTol) << "seed " << seed;
  }
}

TEST(CosamConfig, RejectsInvalidSettings) {
  EXPECT_THROW(toy_config(8, 8, 2, 4, 4).validate(), std::invalid_argument);
  EXPECT_THROW(toy_config(8, 4, 0, 4, 4).validate(), std::invalid_argument);
  EXPECT_THROW(toy_config(8, 4, 3, 4, 4).validate_for(3), std::invalid_argument);
  EXPECT_NO_THROW(toy_config(8, 4, 2, 4, 4).validate_for(3));
}

TEST(SpatialAttention, ZeroSummaryGivesNeutralMask) {
  Rng rng(8);
  ParameterSet ps;
  Cosam m(ps, "c", toy_config(8, 4, 2, 4, 4), rng);
  Tape tape;
  Tensor x = rng.uniform_tensor({3, 8, 4, 4}, -1, 1);
  auto out = m.spatial_attention(tape, tape.constant(x), 3, Mode::train);
  for (double v : out.mask.value().data()) EXPECT_EQ(v, 0.5);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out.features.value()[i], 0.5 * x[i]);
  EXPECT_EQ(out.features.shape(), x.shape());
}

TEST(SpatialAttention, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    ParameterSet ps;
    Cosam m(ps, "c", toy_config(8, 4, 2, 4, 4), rng);
    randomize_all(m, rng);
    Tensor x = rng.uniform_tensor({3, 8, 4, 4}, -1, 1);
    auto rx = grad_check(
        [&](Tape& t, const std::vector<Var>& in) {
          return probe(t, m.spatial_attention(t, in[0], 3, Mode::train).features);
        },
        {x});
    EXPECT_LT(rx.max_rel_error, kGradTol) << "input, seed " << seed;
    auto rp = grad_check_params(
        [&](Tape& t) { return probe(t, m.spatial_attention(t, t.constant(x), 3, Mode::train).features); },
        ps.trainable());
    EXPECT_LT(rp.max_rel_error, kGradTol) << "params, seed " << seed;
  }
}

TEST(ChannelAttention, ZeroedOutputLayerGivesHalfWeights) {
  Rng rng(9);
  ParameterSet ps;
  Cosam m(ps, "c", toy_config(8, 4, 2, 4, 4), rng);
  m.mlp2_weight.value.fill(0.0);
  Tape tape;
  Tensor x = rng.uniform_tensor({3, 8, 4, 4}, -1, 1);
  auto out = m.channel_attention(tape, tape.constant(x), 3);
  EXPECT_EQ(out.weights.shape(), (Shape{1, 8}));
  for (double v : out.weights.value().data()) EXPECT_EQ(v, 0.5);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out.features.value()[i], 0.5 * x[i]);
}

TEST(ChannelAttention, WeightsIgnoreFrameOrder) {
  Rng rng(10);
  ParameterSet ps;
  Cosam m(ps, "c", toy_config(8, 4, 2, 4, 4), rng);
  randomize_all(m, rng);
  Tensor x = rng.uniform_tensor({3, 8, 4, 4}, -1, 1);
  Tensor perm = Tensor::zeros_like(x);
  const std::size_t frame = 8 * 16;
  const std::size_t order[3] = {2, 0, 1};
  for (std::size_t n = 0; n < 3; ++n)
    std::copy_n(x.data().begin() + order[n] * frame, frame, perm.data().begin() + n * frame);
  Tape tape;
  const Tensor w1 = m.channel_attention(tape, tape.constant(x), 3).weights.value();
  const Tensor w2 = m.channel_attention(tape, tape.constant(perm), 3).weights.value();
  EXPECT_LT(max_abs_diff(w1, w2), 1e-15);
}

TEST(ChannelAttention, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    Rng rng(seed);
    ParameterSet ps;
    Cosam m(ps, "c", toy_config(8, 4, 2, 4, 4), rng);
    randomize_all(m, rng);
    Tensor x = rng.uniform_tensor({3, 8, 4, 4}, -1, 1);
    EXPECT_LT(grad_check([&](Tape& t, const std::vector<Var>& in) { return probe(t, m.channel_attention(t, in[0], 3).features); },
                         {x})
                  .max_rel_error,
              kGradTol);
    std::vector<Parameter*> mlp{&m.mlp1_weight, &m.mlp1_bias, &m.mlp2_weight, &m.mlp2_bias};
    EXPECT_LT(grad_check_params([&](Tape& t) { return probe(t, m.channel_attention(t, t.constant(x), 3).features); }, mlp)
                  .max_rel_error,
              kGradTol);
  }
}

TEST(CosamForward, PreservesFullScaleGeometry) {
  Rng rng(12);
  ParameterSet ps;
  Cosam m(ps, "c", toy_config(2048, 256, 3, 16, 8), rng);
  Tape tape;
  auto out = m.forward(tape, tape.constant(rng.uniform_tensor({4, 2048, 16, 8}, -1, 1)), 4, Mode::train);
  EXPECT_EQ(out.features.shape(), (Shape{4, 2048, 16, 8}));
  EXPECT_EQ(out.mask.shape(), (Shape{4, 1, 16, 8}));
  EXPECT_EQ(out.weights.shape(), (Shape{1, 2048}));
}

TEST(CosamForward, GatesShrinkPositiveInputsAndStayInUnitInterval) {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    Rng rng(seed);
    ParameterSet ps;
    Cosam m(ps, "c", toy_config(8, 4, 3, 3, 5), rng);
    randomize(m.summary_weight, rng, 3.0);
    Tape tape;
    Tensor x = rng.uniform_tensor({4, 8, 3, 5}, 0.0, 5.0);
    auto out = m.forward(tape, tape.constant(x), 4, Mode::train);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_LE(std::abs(out.features.value()[i]), std::abs(x[i]));
    for (double v : out.mask.value().data()) EXPECT_TRUE(v > 0.0 && v < 1.0);
    for (double v : out.weights.value().data()) EXPECT_TRUE(v > 0.0 && v < 1.0);
  }
}

TEST(CosamForward, EndToEndGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {31u, 32u, 33u}) {
    Rng rng(seed);
    ParameterSet ps;
    Cosam m(ps, "c", toy_config(6, 3, 2, 3, 3), rng);
    randomize_all(m, rng);
    Tensor x = rng.uniform_tensor({3, 6, 3, 3}, -1, 1);
    EXPECT_LT(grad_check([&](Tape& t, const std::vector<Var>& in) {
                return probe(t, m.forward(t, in[0], 3, Mode::train).features);
              },
                         {x})
                  .max_rel_error,
              kGradTol);
    EXPECT_LT(grad_check_params([&](Tape& t) { return probe(t, m.forward(t, t.constant(x), 3, Mode::train).features); },
                                ps.trainable())
                  .max_rel_error,
              kGradTol);
  }
}

TEST(CosamForward, EquivariantToFramePermutationWhenAllFramesAreReferences) {
  // Holds when the summary conv treats every reference slot alike, which is
  // the case at initialization and for any k-tiled weight.
  Rng rng(40);
  ParameterSet ps;
  const std::size_t hw = 6;
  Cosam m(ps, "c", toy_config(6, 3, 3, 2, 3), rng);
  Tensor tile = rng.uniform_tensor({hw}, -2, 2);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < hw; ++i) m.summary_weight.value[k * hw + i] = tile[i];
  Tensor x = rng.uniform_tensor({4, 6, 2, 3}, -1, 1);
  const std::size_t frame = 6 * hw;
  const std::size_t order[4] = {3, 1, 0, 2};
  Tensor px = Tensor::zeros_like(x);
  for (std::size_t n = 0; n < 4; ++n) std::copy_n(x.data().begin() + order[n] * frame, frame, px.data().begin() + n * frame);
  Tape tape;
  auto a = m.forward(tape, tape.constant(x), 4, Mode::eval);
  auto b = m.forward(tape, tape.constant(px), 4, Mode::eval);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t i = 0; i < frame; ++i)
      EXPECT_NEAR(b.features.value()[n * frame + i], a.features.value()[order[n] * frame + i], 1e-12);
}

TEST(CosamForward, AblatedVariantsRun) {
  Rng rng(41);
  Tensor x = rng.uniform_tensor({4, 8, 2, 2}, -1, 1);
  for (auto [sp, ch] : {std::pair{true, false}, std::pair{false, true}, std::pair{false, false}}) {
    ParameterSet ps;
    CosamConfig c = toy_config(8, 4, 3, 2, 2);
    c.spatial = sp;
    c.channel = ch;
    Cosam m(ps, "c", c, rng);
    Tape tape;
    auto out = m.forward(tape, tape.constant(x), 4, Mode::train);
    EXPECT_EQ(out.features.shape(), x.shape());
    EXPECT_EQ(out.mask.tape != nullptr, sp);
    EXPECT_EQ(out.weights.tape != nullptr, ch);
    if (!sp && !ch) EXPECT_EQ(out.features.value(), x);
  }
}
