#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "coseg/model.hpp"
#include "coseg/optim.hpp"
#include "coseg/synthdata.hpp"

namespace coseg {

struct RunConfig {
  DatasetConfig data;
  std::string data_dir;  // load this dataset instead of generating one

  std::size_t frames = 4;  // N per snippet
  FrameSelect frame_select = FrameSelect::sequential;

  bool cosam = true;
  std::set<std::size_t> cosam_after{3, 4};
  std::size_t refs = 3;
  std::size_t reduced = 256;
  bool spatial = true;
  bool channel = true;

  bool srim = false;
  std::set<std::size_t> srim_after{4};
  std::size_t srim_reduced = 512;
  std::size_t srim_objects = 5;
  std::size_t srim_heads = 8;
  int srim_window = 1;

  TemporalMode temporal = TemporalMode::avg;
  bool normalize = true;

  std::string objective = "reid";  // reid | distill
  double margin = 0.3;
  double lambda = 1.0;      // triplet weight, or CoSB CE weight when distilling
  double lambda_kl = 1.0;

  AdamConfig adam;
  std::size_t steps = 2000;
  std::size_t decay_every = 0;  // 0: a quarter of the steps
  double decay_factor = 0.1;
  std::size_t batch_ids = 4;
  std::size_t batch_snippets = 2;
  std::size_t log_every = 50;
  std::size_t eval_chunk = 8;

  std::uint64_t seed = 0;
  std::string output_dir;

  // Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
  ModelConfig model_config(std::size_t num_classes, bool with_modules = true) const;
  double lr_at(std::size_t step) const;
  std::size_t train_classes() const;
  // Stable "key=value" lines covering every field, and its FNV-1a hash.
  std::string canonical() const;
  std::string hash() const;
};

struct Network {
  ParameterSet params;
  std::unique_ptr<ReidModel> model;  // evaluated branch
  std::unique_ptr<ReidModel> cosb;   // second branch, distill objective only
};

std::unique_ptr<Network> build_network(const RunConfig& cfg, std::size_t num_classes);
Dataset obtain_dataset(const RunConfig& cfg);

struct StepLog {
  std::size_t step = 0;
  double lr = 0, total = 0, ce = 0, triplet = 0, kl = 0;
};

// Single-threaded, fully seeded training. Writes one line per logged step
// to `log` when given.
std::vector<StepLog> train(const RunConfig& cfg, const Dataset& ds, Network& net, std::ostream* log = nullptr);

struct MaskCoverage {
  std::size_t block = 0;
  double coverage = 0;
  double gt_area = 0;
  std::size_t frames = 0;  // frames whose object survives downsampling
};

struct EvalReport {
  std::vector<std::size_t> ranks{1, 5, 20};
  std::vector<double> cmc;
  double map = 0;
  double chance_map = 0;
  bool has_mask = false;
  std::vector<MaskCoverage> masks;
  // means over every (mask, frame) pair in `masks`
  double coverage = 0;
  double gt_area = 0;
  std::size_t coverage_frames = 0;
  std::size_t queries = 0, gallery = 0;
};

struct SnippetOutputs {
  Tensor embeddings;               // [S, D]
  std::vector<Tensor> masks;       // per spatial COSAM: [S*N,1,h,w]
  std::vector<std::size_t> mask_blocks;
  Tensor gt;                       // [S*N,1,H,W]
};

// Eval-mode forward over whole snippets using frames [0, N).
SnippetOutputs run_snippets(const RunConfig& cfg, const Dataset& ds, const Network& net,
                            const std::vector<std::size_t>& snippets);

EvalReport evaluate(const RunConfig& cfg, const Dataset& ds, const Network& net);

// "key=value" lines for the report.
std::string format_report(const EvalReport& r);

}  // namespace coseg
