#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "coseg/autograd.hpp"
#include "coseg/ops.hpp"
#include "coseg/random.hpp"

namespace coseg {

struct CosamConfig {
  std::size_t channels = 0;    // D
  std::size_t reduced = 256;   // D_R
  std::size_t refs = 3;        // K reference frames per frame
  double ncc_eps = 1e-4;
  std::size_t mlp_hidden = 0;  // 0 means "same as reduced"
  // Feature-map geometry; the summary conv reads K*H*W cost channels.
  std::size_t height = 0;
  std::size_t width = 0;
  bool spatial = true;
  bool channel = true;

  std::size_t hidden() const { return mlp_hidden ? mlp_hidden : reduced; }
  // Throws std::invalid_argument on a bad configuration.
  void validate() const;
  // Also checks 1 <= K <= N-1 for snippets of `frames` frames.
  void validate_for(std::size_t frames) const;
};

// Normalized cross-correlation of two descriptors, with population
// standard deviations and eps added to each sigma. Zero-variance inputs
// give exactly 0.
double ncc(std::span<const double> p, std::span<const double> q, double eps);
// Differentiable form over 1-D tensors.
Var ncc(Var p, Var q, double eps);

// The K temporally nearest frames to n (excluding n), nearest first,
// earlier frame first on equal distance.
std::vector<std::size_t> select_references(std::size_t n, std::size_t frames, std::size_t k);

struct CostVolume {
  // [B*N, K*H*W, H, W]; channel index k*H*W + h*W + w holds the NCC
  // between the frame's descriptor at (i,j) and reference k's at (h,w).
  Var values;
  // Per frame within a snippet: its reference frame indices (snippet-local).
  std::vector<std::vector<std::size_t>> frame_refs;
};

// f_reduced is [B*N, D_R, H, W] holding B consecutive snippets of
// `snippet_len` frames; references never cross snippet boundaries.
CostVolume build_cost_volume(Var f_reduced, std::size_t refs, double eps, std::size_t snippet_len);

// Co-segmentation activation block: NCC-driven spatial attention followed
// by snippet-averaged channel attention. Parameters live in a
// ParameterSet under `prefix`.
class Cosam {
 public:
  Cosam(ParameterSet& params, const std::string& prefix, CosamConfig cfg, Rng& rng);

  const CosamConfig& config() const { return cfg_; }

  struct Spatial {
    Var features;  // [B*N, D, H, W]
    Var mask;      // [B*N, 1, H, W]
  };
  struct Channel {
    Var features;  // [B*N, D, H, W]
    Var weights;   // [B, D], one vector per snippet
  };
  struct Output {
    Var features;
    Var mask;     // unset (tape == nullptr) when spatial attention is disabled
    Var weights;  // unset when channel attention is disabled
  };

  Spatial spatial_attention(Tape& tape, Var f, std::size_t snippet_len, Mode mode) const;
  Channel channel_attention(Tape& tape, Var f_spat, std::size_t snippet_len) const;
  Output forward(Tape& tape, Var f, std::size_t snippet_len, Mode mode) const;

  // Parameter handles, exposed for tests and mask export.
  Parameter& reduce_weight;
  Parameter& reduce_bias;
  Parameter& bn_gamma;
  Parameter& bn_beta;
  Parameter& bn_mean;
  Parameter& bn_var;
  Parameter& summary_weight;
  Parameter& summary_bias;
  Parameter& mlp1_weight;
  Parameter& mlp1_bias;
  Parameter& mlp2_weight;
  Parameter& mlp2_bias;

 private:
  CosamConfig cfg_;
};

}  // namespace coseg
