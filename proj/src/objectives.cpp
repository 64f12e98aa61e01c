#include "coseg/objectives.hpp"

#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>

#include "coseg/ops.hpp"

namespace coseg {

Var cross_entropy(Var logits, const std::vector<std::size_t>& targets) {
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be [B,C], got " + shape_str(z.shape()));
  const std::size_t b = z.dim(0), c = z.dim(1);
  if (targets.size() != b) throw std::invalid_argument("cross_entropy: target count does not match batch");
  for (auto t : targets)
    if (t >= c) throw std::invalid_argument("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(c) + ")");

  Tensor prob({b, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, z[i * c + k]);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(z[i * c + k] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < c; ++k) prob[i * c + k] = std::exp(z[i * c + k] - lse);
    loss += lse - z[i * c + targets[i]];
  }
  loss /= static_cast<double>(b);
  return logits.tape->record(Tensor({1}, loss), {logits}, [prob = std::move(prob), targets, b, c](BackwardCtx& ctx) {
    const double g = ctx.out_grad()[0] / static_cast<double>(b);
    Tensor* gz = ctx.in_grad(0);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < c; ++k) (*gz)[i * c + k] += g * (prob[i * c + k] - (k == targets[i] ? 1.0 : 0.0));
  });
}

void TripletBatch::validate() const {
  const Tensor& e = embeddings.value();
  if (e.rank() != 2) throw std::invalid_argument("TripletBatch: embeddings must be [B,D]");
  if (labels.size() != e.dim(0)) throw std::invalid_argument("TripletBatch: label count does not match batch");
  std::set<int> ids(labels.begin(), labels.end());
  if (ids.size() < 2) throw std::invalid_argument("TripletBatch: needs at least two identities");
  if (ids.size() == labels.size()) throw std::invalid_argument("TripletBatch: needs an identity with two samples");
}

Var batch_hard_triplet(const TripletBatch& batch, double margin) {
  const Tensor& e = batch.embeddings.value();
  if (e.rank() != 2 || batch.labels.size() != e.dim(0))
    throw std::invalid_argument("batch_hard_triplet: embeddings and labels do not conform");
  const std::size_t b = e.dim(0), d = e.dim(1);
  std::vector<double> dist(b * b, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = i + 1; j < b; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = e[i * d + k] - e[j * d + k];
        s += diff * diff;
      }
      dist[i * b + j] = dist[j * b + i] = std::sqrt(s);
    }

  struct Term {
    std::size_t anchor, pos, neg;
  };
  std::vector<Term> active;
  std::size_t used = 0;
  double loss = 0.0;
  for (std::size_t a = 0; a < b; ++a) {
    std::size_t pos = b, neg = b;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == a) continue;
      if (batch.labels[j] == batch.labels[a]) {
        if (pos == b || dist[a * b + j] > dist[a * b + pos]) pos = j;
      } else if (neg == b || dist[a * b + j] < dist[a * b + neg]) {
        neg = j;
      }
    }
    if (pos == b || neg == b) continue;
    ++used;
    const double h = dist[a * b + pos] - dist[a * b + neg] + margin;
    if (h > 0.0) {
      loss += h;
      active.push_back({a, pos, neg});
    }
  }
  if (used == 0) throw std::invalid_argument("batch_hard_triplet: no anchor has both a positive and a negative");
  const double scale = 1.0 / static_cast<double>(used);
  return batch.embeddings.tape->record(
      Tensor({1}, loss * scale), {batch.embeddings},
      [active = std::move(active), dist = std::move(dist), b, d, scale](BackwardCtx& ctx) {
        const Tensor& e = ctx.in_value(0);
        Tensor* ge = ctx.in_grad(0);
        const double g = ctx.out_grad()[0] * scale;
        // d||x_i - x_j|| / dx_i = (x_i - x_j) / ||x_i - x_j||, taken as 0 at coincident points
        auto push = [&](std::size_t i, std::size_t j, double w) {
          const double len = dist[i * b + j];
          if (len == 0.0) return;
          for (std::size_t k = 0; k < d; ++k) {
            const double u = (e[i * d + k] - e[j * d + k]) / len;
            (*ge)[i * d + k] += w * u;
            (*ge)[j * d + k] -= w * u;
          }
        };
        for (const auto& t : active) {
          push(t.anchor, t.pos, g);
          push(t.anchor, t.neg, -g);
        }
      });
}

Var kl_divergence(Var p, Var q) {
  const Tensor& pv = p.value();
  const Tensor& qv = q.value();
  if (pv.shape() != qv.shape() || pv.rank() < 1 || pv.rank() > 2)
    throw std::invalid_argument("kl_divergence: P " + shape_str(pv.shape()) + " and Q " + shape_str(qv.shape()) +
                                " must be matching [C] or [B,C]");
  const std::size_t c = pv.shape().back();
  const std::size_t rows = pv.numel() / c;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double sp = 0.0, sq = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double a = pv[r * c + k], b = qv[r * c + k];
      if (a < 0.0 || b < 0.0) throw std::invalid_argument("kl_divergence: negative probability");
      if (a > 0.0 && b <= 0.0) throw std::invalid_argument("kl_divergence: Q has zero mass where P does not");
      sp += a;
      sq += b;
      if (a > 0.0) total += a * std::log(a / b);
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
      throw std::invalid_argument("kl_divergence: rows must sum to 1");
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return p.tape->record(Tensor({1}, total * inv_rows), {p, q}, [inv_rows](BackwardCtx& ctx) {
    const Tensor& pv = ctx.in_value(0);
    const Tensor& qv = ctx.in_value(1);
    const double g = ctx.out_grad()[0] * inv_rows;
    Tensor* gp = ctx.in_grad(0);
    Tensor* gq = ctx.in_grad(1);
    for (std::size_t i = 0; i < pv.numel(); ++i) {
      if (pv[i] <= 0.0) continue;
      if (gp) (*gp)[i] += g * (std::log(pv[i] / qv[i]) + 1.0);
      if (gq) (*gq)[i] -= g * pv[i] / qv[i];
    }
  });
}

ReidLoss reid_loss(Var logits, const std::vector<std::size_t>& targets, const TripletBatch& batch, double margin,
                   double lambda) {
  batch.validate();
  ReidLoss out;
  out.ce = cross_entropy(logits, targets);
  out.triplet = batch_hard_triplet(batch, margin);
  out.total = lambda == 0.0 ? out.ce : add(out.ce, scale(out.triplet, lambda));
  return out;
}

Var distill_loss(Var p, Var q, Var ce_p, Var ce_q, double lambda, double lambda_kl) {
  Var total = add(ce_p, scale(ce_q, lambda));
  return add(total, scale(kl_divergence(p, q), lambda_kl));
}

}  // namespace coseg
