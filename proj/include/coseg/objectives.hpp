#pragma once

#include <vector>

#include "coseg/autograd.hpp"

namespace coseg {

// Mean over rows of -log softmax(logits)[target].
Var cross_entropy(Var logits, const std::vector<std::size_t>& targets);

struct TripletBatch {
  Var embeddings;           // [B, D]
  std::vector<int> labels;  // B identity ids
  // Needs two identities and at least one identity seen twice.
  void validate() const;
};

// Batch-hard triplet loss with Euclidean distances: each anchor takes its
// farthest positive and nearest negative; anchors lacking either are
// skipped and the rest averaged.
Var batch_hard_triplet(const TripletBatch& batch, double margin);

// Row-wise sum P log(P/Q) averaged over rows ([C] or [B,C] inputs); 0 log 0
// counts as 0.
Var kl_divergence(Var p, Var q);

struct ReidLoss {
  Var total;
  Var ce;
  Var triplet;
};
// cross entropy + lambda * batch-hard triplet
ReidLoss reid_loss(Var logits, const std::vector<std::size_t>& targets, const TripletBatch& batch, double margin,
                   double lambda = 1.0);

// ce_p + lambda * ce_q + lambda_kl * KL(P || Q)
Var distill_loss(Var p, Var q, Var ce_p, Var ce_q, double lambda, double lambda_kl);

}  // namespace coseg
