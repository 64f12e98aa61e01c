#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "coseg/autograd.hpp"
#include "coseg/ops.hpp"
#include "coseg/random.hpp"

namespace coseg {

struct SrimConfig {
  std::size_t channels = 0;   // C_L
  std::size_t reduced = 512;  // C_R
  std::size_t objects = 5;    // N_o
  std::size_t heads = 8;
  int window = 1;             // temporal interaction radius

  void validate() const;
};

// conv1x1(C_R -> N_o) followed by a softmax over each object's spatial map.
// f_red[T,C_R,H,W] -> [T,N_o,H,W], each (t,o) map sums to 1.
Var object_association(Var f_red, Var weight, Var bias);

// values[t,o,c] = sum_{h,w} assoc[t,o,h,w] * f_red[t,c,h,w]
Var weighted_avg_pool(Var f_red, Var assoc);

struct AttentionWeights {
  Var query, query_bias, key, key_bias, value, value_bias, out, out_bias;
};

struct MhsaResult {
  Var output;                   // [T, N_o, C_R]
  std::vector<Var> attention;   // per head, [T*N_o, T*N_o]
};

// Allowed-token mask for tokens (t,o) laid out t-major; token pairs attend
// when they share a snippet and |t - t'| <= window (any distance when
// window is empty).
std::vector<std::uint8_t> temporal_mask(std::size_t frames, std::size_t objects, std::size_t snippet_len,
                                        std::optional<int> window);

// Multi-head self-attention over the T*N_o object tokens.
MhsaResult masked_mhsa(Var obj, const AttentionWeights& w, std::size_t heads, std::optional<int> window,
                       std::size_t snippet_len);

// pixel[t,c,h,w] = sum_o assoc[t,o,h,w] * attended[t,o,c]  -> [T,C_R,H,W]
Var reverse_map(Var attended, Var assoc);
// reverse_map followed by the conv1x1(C_R -> C_L) expansion.
Var redistribute(Var attended, Var assoc, Var weight, Var bias);

// Salient-region interaction block with a residual connection. The
// expansion conv starts at zero, so a fresh block is the identity.
class Srim {
 public:
  Srim(ParameterSet& params, const std::string& prefix, SrimConfig cfg, Rng& rng);

  const SrimConfig& config() const { return cfg_; }

  struct Trace {
    Var output;       // [T,C_L,H,W]
    Var association;  // [T,N_o,H,W]
    Var objects;      // [T,N_o,C_R]
    MhsaResult attended;
  };
  Trace trace(Tape& tape, Var f, std::size_t snippet_len) const;
  Var forward(Tape& tape, Var f, std::size_t snippet_len) const { return trace(tape, f, snippet_len).output; }

  AttentionWeights attention(Tape& tape) const;

  Parameter& reduce_weight;
  Parameter& reduce_bias;
  Parameter& assoc_weight;
  Parameter& assoc_bias;
  Parameter& wq;
  Parameter& bq;
  Parameter& wk;
  Parameter& bk;
  Parameter& wv;
  Parameter& bv;
  Parameter& wo;
  Parameter& bo;
  Parameter& expand_weight;
  Parameter& expand_bias;

 private:
  SrimConfig cfg_;
};

}  // namespace coseg
