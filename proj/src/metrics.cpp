#include "coseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "coseg/random.hpp"

namespace coseg {

void RetrievalResult::validate() const {
  if (distances.rank() != 2 || distances.dim(0) != query_labels.size() || distances.dim(1) != gallery_labels.size())
    throw std::invalid_argument("RetrievalResult: distance matrix does not match label lists");
  for (double d : distances.data())
    if (!(d >= 0.0)) throw std::invalid_argument("RetrievalResult: distances must be non-negative");
  for (std::size_t q = 0; q < query_labels.size(); ++q)
    if (std::find(gallery_labels.begin(), gallery_labels.end(), query_labels[q]) == gallery_labels.end())
      throw std::invalid_argument("RetrievalResult: query " + std::to_string(q) + " has no gallery match");
}

RetrievalResult make_retrieval(const Tensor& query, const Tensor& gallery, std::vector<int> query_labels,
                               std::vector<int> gallery_labels) {
  if (query.rank() != 2 || gallery.rank() != 2 || query.dim(1) != gallery.dim(1))
    throw std::invalid_argument("make_retrieval: embeddings must be [Q,D] and [G,D]");
  const std::size_t nq = query.dim(0), ng = gallery.dim(0), d = query.dim(1);
  Tensor dist({nq, ng});
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < ng; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = query[i * d + k] - gallery[j * d + k];
        s += diff * diff;
      }
      dist[i * ng + j] = std::sqrt(s);
    }
  RetrievalResult r{std::move(dist), std::move(query_labels), std::move(gallery_labels)};
  r.validate();
  return r;
}

std::vector<std::size_t> rank_gallery(const RetrievalResult& r, std::size_t query) {
  const std::size_t ng = r.gallery_labels.size();
  std::vector<std::size_t> order(ng);
  std::iota(order.begin(), order.end(), 0);
  const double* row = r.distances.data().data() + query * ng;
  std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
  return order;
}

std::vector<double> cmc(const RetrievalResult& r, const std::vector<std::size_t>& ranks) {
  r.validate();
  std::vector<std::size_t> first_hit;
  for (std::size_t q = 0; q < r.query_labels.size(); ++q) {
    const auto order = rank_gallery(r, q);
    for (std::size_t i = 0; i < order.size(); ++i)
      if (r.gallery_labels[order[i]] == r.query_labels[q]) {
        first_hit.push_back(i + 1);
        break;
      }
  }
  std::vector<double> out;
  for (auto k : ranks) {
    const auto hits = std::count_if(first_hit.begin(), first_hit.end(), [k](std::size_t h) { return h <= k; });
    out.push_back(static_cast<double>(hits) / static_cast<double>(first_hit.size()));
  }
  return out;
}

double mean_ap(const RetrievalResult& r) {
  r.validate();
  double total = 0.0;
  for (std::size_t q = 0; q < r.query_labels.size(); ++q) {
    const auto order = rank_gallery(r, q);
    std::size_t hits = 0;
    double ap = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i)
      if (r.gallery_labels[order[i]] == r.query_labels[q]) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(i + 1);
      }
    total += ap / static_cast<double>(hits);
  }
  return total / static_cast<double>(r.query_labels.size());
}

double permutation_baseline_map(const RetrievalResult& r, std::size_t trials, std::uint64_t seed) {
  Rng rng(seed);
  RetrievalResult shuffled = r;
  double total = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    rng.shuffle(shuffled.gallery_labels);
    total += mean_ap(shuffled);
  }
  return total / static_cast<double>(trials);
}

Tensor downsample_mask(const Tensor& gt, std::size_t h, std::size_t w) {
  if (gt.rank() != 4 || gt.dim(1) != 1) throw std::invalid_argument("downsample_mask: expected [N,1,H,W]");
  const std::size_t n = gt.dim(0), big_h = gt.dim(2), big_w = gt.dim(3);
  if (h == 0 || w == 0 || big_h % h != 0 || big_w % w != 0)
    throw std::invalid_argument("downsample_mask: " + shape_str(gt.shape()) + " is not an integer multiple of " +
                                std::to_string(h) + "x" + std::to_string(w));
  const std::size_t fy = big_h / h, fx = big_w / w;
  Tensor out({n, 1, h, w});
  for (std::size_t f = 0; f < n; ++f)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < fy; ++dy)
          for (std::size_t dx = 0; dx < fx; ++dx) s += gt.at({f, 0, y * fy + dy, x * fx + dx});
        out.at({f, 0, y, x}) = s / static_cast<double>(fy * fx) >= 0.5 ? 1.0 : 0.0;
      }
  return out;
}

double area_fraction(const Tensor& binary) {
  if (binary.rank() != 4) throw std::invalid_argument("area_fraction: expected [N,1,h,w]");
  double s = 0.0;
  for (double v : binary.data()) s += v;
  return s / static_cast<double>(binary.numel());
}

double attention_coverage(const Tensor& mask, const Tensor& gt) {
  if (mask.rank() != 4 || mask.dim(1) != 1) throw std::invalid_argument("attention_coverage: mask must be [N,1,h,w]");
  if (gt.rank() != 4 || gt.dim(0) != mask.dim(0))
    throw std::invalid_argument("attention_coverage: gt frame count does not match mask");
  const Tensor small = downsample_mask(gt, mask.dim(2), mask.dim(3));
  const std::size_t n = mask.dim(0), hw = mask.dim(2) * mask.dim(3);
  double total = 0.0;
  for (std::size_t f = 0; f < n; ++f) {
    double inside = 0.0, mass = 0.0, area = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      inside += mask[f * hw + i] * small[f * hw + i];
      mass += mask[f * hw + i];
      area += small[f * hw + i];
    }
    if (area == 0.0) throw std::invalid_argument("attention_coverage: frame " + std::to_string(f) + " has an empty gt region");
    if (mass <= 0.0) throw std::invalid_argument("attention_coverage: mask has no mass");
    total += inside / mass;
  }
  return total / static_cast<double>(n);
}

}  // namespace coseg
