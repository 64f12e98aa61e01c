#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "coseg/cosam.hpp"
#include "coseg/srim.hpp"

namespace coseg {

struct BlockSpec {
  std::size_t channels = 16;
  int stride = 2;
};

struct BackboneConfig {
  std::vector<BlockSpec> blocks{{16, 2}, {32, 2}, {64, 2}, {128, 2}};
  // 1-based block indices; a module runs on the output of that block.
  std::set<std::size_t> cosam_after{3, 4};
  std::set<std::size_t> srim_after;
  void validate() const;
  std::size_t total_stride() const;
};

enum class TemporalMode { avg, attention };
TemporalMode parse_temporal_mode(const std::string& s);
const char* temporal_mode_name(TemporalMode m);

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t in_channels = 3;
  std::size_t height = 64;
  std::size_t width = 32;
  std::size_t num_classes = 8;
  TemporalMode temporal = TemporalMode::avg;
  // Unit-length embeddings (the classifier reads the normalized vector).
  bool normalize = false;
  // Templates: channels and geometry are filled per insertion point, and
  // the reduced widths are capped at half the block width.
  CosamConfig cosam;
  SrimConfig srim;
  void validate() const;
  // Concrete module configs at a 1-based block boundary.
  CosamConfig cosam_at(std::size_t block) const;
  SrimConfig srim_at(std::size_t block) const;
  std::size_t embedding_dim() const { return backbone.blocks.back().channels; }
};

// feats[B*N, D] -> [B, D]. avg: frame mean. attention: softmax over the
// snippet's frames of a linear score w.f + b, then the weighted mean.
Var temporal_aggregate(Var feats, std::size_t snippet_len, TemporalMode mode, Var score_weight = {},
                       Var score_bias = {});

class ReidModel {
 public:
  // Registers parameters in `params` under `prefix`.
  ReidModel(ParameterSet& params, const std::string& prefix, ModelConfig cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }

  struct Output {
    Var feature_map;     // backbone output [B*N, D, h, w]
    Var frame_features;  // [B*N, D]
    Var embedding;       // [B, D]
    Var logits;          // [B, num_classes]
    std::vector<Var> masks;  // spatial masks, one per COSAM in block order
    std::vector<std::size_t> mask_blocks;
  };

  Var backbone_forward(Tape& tape, Var frames, std::size_t snippet_len, Mode mode,
                       std::vector<Var>* masks = nullptr) const;
  Output forward(Tape& tape, Var frames, std::size_t snippet_len, Mode mode) const;

 private:
  struct Block {
    Parameter* weight;
    Parameter* bias;
    Parameter* gamma;
    Parameter* beta;
    Parameter* mean;
    Parameter* var;
    std::unique_ptr<Cosam> cosam;
    std::unique_ptr<Srim> srim;
  };
  ModelConfig cfg_;
  std::vector<Block> blocks_;
  Parameter* ta_weight_ = nullptr;
  Parameter* ta_bias_ = nullptr;
  Parameter* cls_weight_;
  Parameter* cls_bias_;
};

// Global branch plus a COSAM+SRIM branch classifying the same snippets.
// Tied mode reuses the global branch for both outputs.
class TwoBranchModel {
 public:
  TwoBranchModel(ModelConfig global_cfg, ModelConfig cosb_cfg, std::uint64_t seed, bool tied = false);

  ParameterSet& params() { return params_; }

  struct Output {
    Var logits_p, logits_q;
    Var p, q;  // row-wise softmax distributions [B, C]
  };
  Output forward(Tape& tape, Var frames, std::size_t snippet_len, Mode mode) const;

 private:
  ParameterSet params_;
  std::unique_ptr<ReidModel> global_;
  std::unique_ptr<ReidModel> cosb_;
};

// Checkpoint file: "COSAMCKPT1" line, "params <count>", one line per
// parameter "<name> <trainable> <offset> <rank> <dims...>", a "payload"
// line, then a single CTF1 f64 tensor holding every value back to back.
void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params);
// Loads into an existing set; names, order and shapes must match.
void load_checkpoint(const std::filesystem::path& path, ParameterSet& params);

}  // namespace coseg
