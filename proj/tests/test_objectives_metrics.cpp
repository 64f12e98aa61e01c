#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "coseg/metrics.hpp"
#include "coseg/objectives.hpp"
#include "coseg/ops.hpp"
#include "coseg/optim.hpp"
#include "coseg/random.hpp"
#include "test_helpers.hpp"

using namespace coseg;
using coseg::testing::kGradTol;

namespace {

double triplet_oracle(const Tensor& e, const std::vector<int>& labels, double margin) {
  const std::size_t b = e.dim(0), d = e.dim(1);
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += (e[i * d + k] - e[j * d + k]) * (e[i * d + k] - e[j * d + k]);
    return std::sqrt(s);
  };
  double total = 0;
  int anchors = 0;
  for (std::size_t a = 0; a < b; ++a) {
    double best = -1e300;
    bool any = false;
    for (std::size_t p = 0; p < b; ++p)
      for (std::size_t n = 0; n < b; ++n) {
        if (p == a || labels[p] != labels[a] || labels[n] == labels[a]) continue;
        best = std::max(best, dist(a, p) - dist(a, n) + margin);
        any = true;
      }
    if (!any) continue;
    ++anchors;
    total += std::max(best, 0.0);
  }
  return total / anchors;
}

// Rank of gallery j for a query row: one plus the number of items ordered
// before it (smaller distance, or equal distance and lower index).
std::size_t rank_of(const std::vector<double>& row, std::size_t j) {
  std::size_t r = 1;
  for (std::size_t i = 0; i < row.size(); ++i)
    if (row[i] < row[j] || (row[i] == row[j] && i < j)) ++r;
  return r;
}

struct OracleMetrics {
  std::vector<double> cmc;
  double map;
};

OracleMetrics metrics_oracle(const RetrievalResult& r, const std::vector<std::size_t>& ks) {
  const std::size_t nq = r.query_labels.size(), ng = r.gallery_labels.size();
  std::vector<std::size_t> first(nq, ng + 1);
  double map = 0;
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<double> row(r.distances.data().begin() + q * ng, r.distances.data().begin() + (q + 1) * ng);
    double ap = 0;
    int rel = 0;
    for (std::size_t j = 0; j < ng; ++j) {
      if (r.gallery_labels[j] != r.query_labels[q]) continue;
      ++rel;
      const std::size_t rj = rank_of(row, j);
      first[q] = std::min(first[q], rj);
      int rel_before = 0;
      for (std::size_t i = 0; i < ng; ++i)
        if (r.gallery_labels[i] == r.query_labels[q] && rank_of(row, i) <= rj) ++rel_before;
      ap += static_cast<double>(rel_before) / static_cast<double>(rj);
    }
    map += ap / rel;
  }
  OracleMetrics out;
  for (auto k : ks) {
    std::size_t c = 0;
    for (auto f : first) c += f <= k;
    out.cmc.push_back(static_cast<double>(c) / nq);
  }
  out.map = map / nq;
  return out;
}

RetrievalResult random_instance(Rng& rng, std::size_t nq, std::size_t ng, int ids, bool integer_distances) {
  RetrievalResult r;
  r.distances = Tensor({nq, ng});
  for (auto& v : r.distances.data()) v = integer_distances ? static_cast<double>(rng.below(4)) : rng.uniform(0, 5);
  for (std::size_t j = 0; j < ng; ++j) r.gallery_labels.push_back(static_cast<int>(rng.below(ids)));
  for (std::size_t q = 0; q < nq; ++q) r.query_labels.push_back(r.gallery_labels[rng.below(ng)]);
  return r;
}

}  // namespace

TEST(CrossEntropy, HandValues) {
  Tape tape;
  EXPECT_NEAR(cross_entropy(tape.constant(Tensor({1, 4}, 0.0)), {2}).value()[0], std::log(4.0), 1e-15);
  EXPECT_NEAR(cross_entropy(tape.constant(Tensor({1, 2}, {2.0, 0.0})), {0}).value()[0],
              -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0)), 1e-15);
  EXPECT_NEAR(cross_entropy(tape.constant(Tensor({1, 2}, {2.0, 0.0})), {0}).value()[0], 0.1269, 1e-4);
  double prev = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    const double v = cross_entropy(tape.constant(Tensor({1, 3}, {margin, 0.0, 0.0})), {0}).value()[0];
    EXPECT_LT(v, prev);
    prev = v;
  }
  EXPECT_LT(prev, 1e-20);
  EXPECT_THROW(cross_entropy(tape.constant(Tensor({1, 2}, 0.0)), {2}), std::invalid_argument);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    auto r = grad_check([](Tape&, const std::vector<Var>& in) { return cross_entropy(in[0], {0, 3, 1}); },
                        {rng.uniform_tensor({3, 4}, -2, 2)});
    EXPECT_LT(r.max_rel_error, kGradTol);
  }
}

TEST(Triplet, HandCases) {
  Tape tape;
  // anchor at 0, positive at +dp, negative at -dn; label-1 point has no positive and is skipped.
  // The positive's own term sees distances dp and dp + dn.
  auto loss = [&](double dp, double dn) {
    return batch_hard_triplet({tape.constant(Tensor({3, 1}, {0.0, dp, -dn})), {0, 0, 1}}, 0.3).value()[0];
  };
  EXPECT_DOUBLE_EQ(loss(0.2, 1.0), 0.0);
  EXPECT_NEAR(loss(1.0, 0.2), (1.1 + 0.1) / 2.0, 1e-12);

  TripletBatch b{tape.constant(Tensor({4, 1}, {0.0, 1.0, 10.0, -0.2})), {0, 0, 1, 2}};
  EXPECT_NEAR(batch_hard_triplet(b, 0.3).value()[0], (1.1 + 0.1) / 2.0, 1e-12);
}

TEST(Triplet, MatchesExhaustiveOracle) {
  Tape tape;
  Tensor e({4, 1}, {0.0, 0.5, 0.9, 2.0});
  std::vector<int> labels{7, 7, 3, 3};
  TripletBatch b{tape.constant(e), labels};
  EXPECT_DOUBLE_EQ(batch_hard_triplet(b, 0.3).value()[0], triplet_oracle(e, labels, 0.3));
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::size_t n = 4 + rng.below(6);
    std::vector<int> ls;
    for (std::size_t i = 0; i < n; ++i) ls.push_back(static_cast<int>(i % 3));
    Tensor x = rng.uniform_tensor({n, 3}, -1, 1);
    TripletBatch tb{tape.constant(x), ls};
    const double v = batch_hard_triplet(tb, 0.3).value()[0];
    EXPECT_NEAR(v, triplet_oracle(x, ls, 0.3), 1e-12);
    EXPECT_GE(v, 0.0);
  }
}

TEST(Triplet, ZeroExactlyWhenEveryAnchorSatisfiesMargin) {
  Tape tape;
  Tensor tight({4, 2}, {0, 0, 0.1, 0, 5, 5, 5.1, 5});
  EXPECT_EQ(batch_hard_triplet({tape.constant(tight), {0, 0, 1, 1}}, 0.3).value()[0], 0.0);
  Tensor loose({4, 2}, {0, 0, 6, 0, 5, 5, 5.1, 5});
  EXPECT_GT(batch_hard_triplet({tape.constant(loose), {0, 0, 1, 1}}, 0.3).value()[0], 0.0);
}

TEST(Triplet, ErrorsWhenNoAnchorUsable) {
  Tape tape;
  EXPECT_THROW(batch_hard_triplet({tape.constant(Tensor({2, 1}, {0.0, 1.0})), {0, 1}}, 0.3), std::invalid_argument);
  TripletBatch single{tape.constant(Tensor({2, 1}, {0.0, 1.0})), {0, 0}};
  EXPECT_THROW(single.validate(), std::invalid_argument);
}

TEST(Triplet, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {4u, 5u, 6u}) {
    Rng rng(seed);
    auto r = grad_check(
        [](Tape&, const std::vector<Var>& in) { return batch_hard_triplet({in[0], {0, 0, 1, 1, 2, 2}}, 1.0); },
        {rng.uniform_tensor({6, 3}, -1, 1)});
    EXPECT_LT(r.max_rel_error, kGradTol);
  }
}

TEST(Kl, HandValuesAndGibbsInequality) {
  Tape tape;
  Var p = tape.constant(Tensor({2}, {1.0, 0.0}));
  EXPECT_NEAR(kl_divergence(p, tape.constant(Tensor({2}, {0.5, 0.5}))).value()[0], std::log(2.0), 1e-15);
  EXPECT_EQ(kl_divergence(p, p).value()[0], 0.0);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Var a = softmax(tape.constant(rng.uniform_tensor({5}, -3, 3)), 0);
    Var b = softmax(tape.constant(rng.uniform_tensor({5}, -3, 3)), 0);
    EXPECT_GE(kl_divergence(a, b).value()[0], 0.0);
    EXPECT_LT(std::abs(kl_divergence(a, a).value()[0]), 1e-9);
  }
  EXPECT_THROW(kl_divergence(tape.constant(Tensor({2}, {0.7, 0.7})), tape.constant(Tensor({2}, 0.5))),
               std::invalid_argument);
  EXPECT_THROW(kl_divergence(tape.constant(Tensor({2}, {0.5, 0.5})), tape.constant(Tensor({2}, {1.0, 0.0}))),
               std::invalid_argument);
}

TEST(Kl, GradientThroughLogitsMatchesFiniteDifferences) {
  for (std::uint64_t seed : {7u, 8u, 9u}) {
    Rng rng(seed);
    auto r = grad_check(
        [](Tape&, const std::vector<Var>& in) { return kl_divergence(softmax(in[0], 1), softmax(in[1], 1)); },
        {rng.uniform_tensor({2, 4}, -2, 2), rng.uniform_tensor({2, 4}, -2, 2)});
    EXPECT_LT(r.max_rel_error, kGradTol);
  }
}

TEST(ReidLoss, CombinesComponents) {
  Rng rng(10);
  Tape tape;
  Var logits = tape.constant(rng.uniform_tensor({4, 3}, -1, 1));
  TripletBatch b{tape.constant(rng.uniform_tensor({4, 2}, -1, 1)), {0, 0, 1, 1}};
  auto zero = reid_loss(logits, {0, 0, 1, 1}, b, 0.3, 0.0);
  EXPECT_EQ(zero.total.value()[0], cross_entropy(logits, {0, 0, 1, 1}).value()[0]);
  auto one = reid_loss(logits, {0, 0, 1, 1}, b, 0.3, 1.0);
  EXPECT_DOUBLE_EQ(one.total.value()[0], one.ce.value()[0] + one.triplet.value()[0]);
  Var sum = add(tape.constant(Tensor({1}, 0.5)), scale(tape.constant(Tensor({1}, 0.2)), 1.0));
  EXPECT_NEAR(sum.value()[0], 0.7, 1e-15);
}

TEST(ReidLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    auto r = grad_check(
        [](Tape&, const std::vector<Var>& in) {
          Var emb = linear(in[0], in[1], in[2]);
          return reid_loss(emb, {0, 0, 1, 1, 2, 2}, {emb, {0, 0, 1, 1, 2, 2}}, 0.5, 1.0).total;
        },
        {rng.uniform_tensor({6, 4}, -1, 1), rng.uniform_tensor({3, 4}, -1, 1), rng.uniform_tensor({3}, -1, 1)});
    EXPECT_LT(r.max_rel_error, kGradTol);
  }
}

TEST(DistillLoss, HandCompositions) {
  Rng rng(14);
  Tape tape;
  Var zp = tape.constant(rng.uniform_tensor({2, 3}, -1, 1));
  Var zq = tape.constant(rng.uniform_tensor({2, 3}, -1, 1));
  Var p = softmax(zp, 1), q = softmax(zq, 1);
  Var cep = cross_entropy(zp, {0, 2}), ceq = cross_entropy(zq, {0, 2});
  EXPECT_EQ(distill_loss(p, q, cep, ceq, 0.0, 0.0).value()[0], cep.value()[0]);
  EXPECT_NEAR(distill_loss(p, p, cep, cep, 2.0, 4.0).value()[0], 3.0 * cep.value()[0], 1e-15);
  const double expect = cep.value()[0] + 2.0 * ceq.value()[0] + 4.0 * kl_divergence(p, q).value()[0];
  EXPECT_NEAR(distill_loss(p, q, cep, ceq, 2.0, 4.0).value()[0], expect, 1e-15);
  auto r = grad_check(
      [](Tape&, const std::vector<Var>& in) {
        Var pp = softmax(in[0], 1), qq = softmax(in[1], 1);
        return distill_loss(pp, qq, cross_entropy(in[0], {1, 0}), cross_entropy(in[1], {1, 0}), 2.0, 4.0);
      },
      {zp.value(), zq.value()});
  EXPECT_LT(r.max_rel_error, kGradTol);
}

TEST(Cmc, HandCaseAndMonotonicity) {
  // three queries whose first correct matches sit at ranks 1, 2 and 5
  RetrievalResult r;
  r.distances = Tensor({3, 5}, {0, 1, 2, 3, 4,  //
                                0, 1, 2, 3, 4,  //
                                0, 1, 2, 3, 4});
  r.gallery_labels = {0, 1, 2, 3, 4};
  r.query_labels = {0, 1, 4};
  auto c = cmc(r, {1, 2, 5});
  EXPECT_DOUBLE_EQ(c[0], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(c[1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(c[2], 1.0);
  auto all = cmc(r, {1, 2, 3, 4, 5});
  EXPECT_TRUE(std::is_sorted(all.begin(), all.end()));
  r.query_labels = {0, 1, 9};
  EXPECT_THROW(cmc(r, {1}), std::invalid_argument);
}

TEST(MeanAp, HandCaseAndPerfectRanking) {
  RetrievalResult r;
  r.distances = Tensor({1, 5}, {0.1, 0.2, 0.3, 0.4, 0.5});
  r.gallery_labels = {3, 1, 3, 2, 4};
  r.query_labels = {3};
  EXPECT_NEAR(mean_ap(r), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_NEAR(mean_ap(r), 0.8333, 5e-5);
  r.gallery_labels = {3, 3, 1, 2, 4};
  EXPECT_DOUBLE_EQ(mean_ap(r), 1.0);
  EXPECT_DOUBLE_EQ(cmc(r, {1})[0], 1.0);
}

TEST(Metrics, MatchDefinitionalOraclesOnAllSmallInstances) {
  const std::vector<std::size_t> ks{1, 2, 3, 5, 8};
  for (std::size_t nq = 1; nq <= 5; ++nq)
    for (std::size_t ng = 1; ng <= 8; ++ng)
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed * 100 + nq * 10 + ng);
        auto r = random_instance(rng, nq, ng, 3, seed % 2 == 0);
        auto o = metrics_oracle(r, ks);
        EXPECT_EQ(cmc(r, ks), o.cmc);
        EXPECT_NEAR(mean_ap(r), o.map, 1e-12) << nq << "x" << ng << " seed " << seed;
      }
}

TEST(Metrics, MatchOracleOnLargerRandomPermutation) {
  Rng rng(77);
  RetrievalResult r;
  r.distances = Tensor({10, 20});
  std::vector<double> pool;
  for (int i = 0; i < 200; ++i) pool.push_back(i);
  rng.shuffle(pool);
  std::copy(pool.begin(), pool.end(), r.distances.data().begin());
  for (int j = 0; j < 20; ++j) r.gallery_labels.push_back(j % 5);
  for (int q = 0; q < 10; ++q) r.query_labels.push_back(q % 5);
  auto o = metrics_oracle(r, {1, 5, 10});
  EXPECT_NEAR(mean_ap(r), o.map, 1e-12);
  EXPECT_EQ(cmc(r, {1, 5, 10}), o.cmc);
}

TEST(Metrics, InvariantToRelabelingAndDistanceScale) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    auto r = random_instance(rng, 4, 7, 3, false);
    const double base_map = mean_ap(r);
    const auto base_cmc = cmc(r, {1, 3, 7});
    RetrievalResult relabeled = r;
    std::map<int, int> bij{{0, 42}, {1, -5}, {2, 7}};
    for (auto& l : relabeled.query_labels) l = bij[l];
    for (auto& l : relabeled.gallery_labels) l = bij[l];
    EXPECT_EQ(mean_ap(relabeled), base_map);
    EXPECT_EQ(cmc(relabeled, {1, 3, 7}), base_cmc);
    RetrievalResult scaled = r;
    for (auto& d : scaled.distances.data()) d *= 3.7;
    EXPECT_EQ(mean_ap(scaled), base_map);
    EXPECT_EQ(cmc(scaled, {1, 3, 7}), base_cmc);
  }
}

TEST(Metrics, PermutationBaselineMatchesUninformativeExpectation) {
  // one relevant item among G: expected AP under a random ranking is H_G / G
  RetrievalResult r;
  r.distances = Tensor({1, 4}, {0.1, 0.2, 0.3, 0.4});
  r.gallery_labels = {1, 0, 0, 0};
  r.query_labels = {1};
  const double expected = (1.0 + 1.0 / 2 + 1.0 / 3 + 1.0 / 4) / 4.0;
  EXPECT_NEAR(permutation_baseline_map(r, 20000, 3), expected, 0.01);
}

TEST(Coverage, UniformSupportedAndHandCases) {
  Tensor gt({1, 1, 4, 4}, 0.0);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 4; ++x) gt.at({0, 0, y, x}) = 1.0;  // top half at full resolution
  Tensor uniform({1, 1, 2, 2}, 0.3);
  EXPECT_NEAR(attention_coverage(uniform, gt), area_fraction(downsample_mask(gt, 2, 2)), 1e-15);
  EXPECT_DOUBLE_EQ(area_fraction(downsample_mask(gt, 2, 2)), 0.5);

  Tensor inside({1, 1, 2, 2}, {0.9, 0.4, 0.0, 0.0});
  EXPECT_DOUBLE_EQ(attention_coverage(inside, gt), 1.0);

  Tensor hand({1, 1, 2, 2}, {0.6, 0.2, 0.1, 0.1});
  EXPECT_NEAR(attention_coverage(hand, gt), (0.6 + 0.2) / (0.6 + 0.2 + 0.1 + 0.1), 1e-15);

  EXPECT_THROW(attention_coverage(hand, Tensor({1, 1, 4, 4}, 0.0)), std::invalid_argument);
}

TEST(Coverage, AreaThresholdAtHalf) {
  Tensor gt({1, 1, 2, 2}, {1, 1, 0, 0});
  EXPECT_EQ(downsample_mask(gt, 1, 1)[0], 1.0);
  Tensor less({1, 1, 2, 2}, {1, 0, 0, 0});
  EXPECT_EQ(downsample_mask(less, 1, 1)[0], 0.0);
  EXPECT_THROW(downsample_mask(gt, 3, 1), std::invalid_argument);
}
