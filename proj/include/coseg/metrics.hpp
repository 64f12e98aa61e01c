#pragma once

#include <cstdint>
#include <vector>

#include "coseg/tensor.hpp"

namespace coseg {

struct RetrievalResult {
  Tensor distances;  // [Q, G], non-negative
  std::vector<int> query_labels;
  std::vector<int> gallery_labels;

  void validate() const;
};

// Euclidean distances between query [Q,D] and gallery [G,D] embeddings.
RetrievalResult make_retrieval(const Tensor& query, const Tensor& gallery, std::vector<int> query_labels,
                               std::vector<int> gallery_labels);

// Gallery order for one query: ascending distance, ties by gallery index.
std::vector<std::size_t> rank_gallery(const RetrievalResult& r, std::size_t query);

// Fraction of queries whose first correct match is within rank k (1-based),
// one value per requested k.
std::vector<double> cmc(const RetrievalResult& r, const std::vector<std::size_t>& ranks);
double mean_ap(const RetrievalResult& r);
// Expected mAP of an uninformative ranking, estimated by shuffling the
// gallery labels `trials` times.
double permutation_baseline_map(const RetrievalResult& r, std::size_t trials, std::uint64_t seed);

// gt[N,1,H,W] binary at image resolution -> [N,1,h,w] by area averaging
// over (H/h x W/w) cells, then thresholding at 0.5.
Tensor downsample_mask(const Tensor& gt, std::size_t h, std::size_t w);
// Fraction of positive cells in a binary mask, averaged over frames.
double area_fraction(const Tensor& binary);
// Per frame sum(mask * gt) / sum(mask), averaged over frames; gt is
// downsampled to the mask's resolution first.
double attention_coverage(const Tensor& mask, const Tensor& gt);

}  // namespace coseg
