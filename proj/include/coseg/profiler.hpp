#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coseg/cosam.hpp"

namespace coseg {

// Input feature geometry: N frames of D x H x W.
struct Geometry {
  std::size_t n = 4, d = 2048, h = 16, w = 8;
};

struct CostTerm {
  std::string name;
  std::uint64_t macs = 0;
  bool layer = false;  // learned projection (conv / linear) vs. interaction
};

// FLOPs are 2 per multiply-accumulate. `flops` covers the learned layers
// (1x1 convs and linear maps); `interaction_flops` covers correlation,
// statistics, affinity, aggregation and gating products.
struct CostModel {
  std::string module;
  Geometry geom;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::uint64_t interaction_flops = 0;
  std::vector<CostTerm> terms;
  std::uint64_t total_flops() const { return flops + interaction_flops; }
  std::uint64_t term_macs(const std::string& name) const;
};

extern const char* const kFlopConvention;

CostModel count_cosam(const Geometry& g, CosamConfig cfg);

enum class NlmVariant { gaussian, embedded_gaussian, concat, dot_product };
NlmVariant parse_nlm_variant(const std::string& s);
const char* nlm_variant_name(NlmVariant v);
CostModel count_nlm(const Geometry& g, NlmVariant v);

struct ComparisonRow {
  Geometry geom;
  CostModel cosam;
  std::vector<CostModel> nlm;  // gaussian, embedded_gaussian, concat, dot_product
  double param_ratio = 0;      // embedded-gaussian NLM / COSAM
  double flop_ratio = 0;
};

// D_R and the MLP width are capped at D/2 per geometry, as in the model.
std::vector<ComparisonRow> compare(const std::vector<Geometry>& geoms, const CosamConfig& cfg);

std::string format_cost_table(const std::vector<ComparisonRow>& rows);
std::string format_cost_keyvalues(const std::vector<ComparisonRow>& rows);

}  // namespace coseg
