#include "coseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "coseg/io.hpp"

namespace coseg {

void BackboneConfig::validate() const {
  if (blocks.empty()) throw std::invalid_argument("backbone: need at least one block");
  for (const auto& b : blocks) {
    if (b.channels == 0) throw std::invalid_argument("backbone: block with zero channels");
    if (b.stride != 1 && b.stride != 2) throw std::invalid_argument("backbone: stride must be 1 or 2");
  }
  for (auto i : cosam_after)
    if (i < 1 || i > blocks.size())
      throw std::invalid_argument("backbone: COSAM insertion index " + std::to_string(i) + " outside 1.." +
                                  std::to_string(blocks.size()));
  for (auto i : srim_after)
    if (i < 1 || i > blocks.size())
      throw std::invalid_argument("backbone: SRIM insertion index " + std::to_string(i) + " outside 1.." +
                                  std::to_string(blocks.size()));
}

std::size_t BackboneConfig::total_stride() const {
  std::size_t s = 1;
  for (const auto& b : blocks) s *= static_cast<std::size_t>(b.stride);
  return s;
}

TemporalMode parse_temporal_mode(const std::string& s) {
  if (s == "avg" || s == "tp_avg") return TemporalMode::avg;
  if (s == "attention" || s == "ta") return TemporalMode::attention;
  throw std::invalid_argument("unknown temporal aggregation '" + s + "'");
}

const char* temporal_mode_name(TemporalMode m) { return m == TemporalMode::avg ? "avg" : "attention"; }

namespace {

// spatial size after the first `blocks` blocks
std::pair<std::size_t, std::size_t> geometry_after(const ModelConfig& cfg, std::size_t blocks) {
  std::size_t h = cfg.height, w = cfg.width;
  for (std::size_t i = 0; i < blocks; ++i) {
    h /= cfg.backbone.blocks[i].stride;
    w /= cfg.backbone.blocks[i].stride;
  }
  return {h, w};
}

Tensor he_normal(Rng& rng, Shape shape, std::size_t fan_in) {
  return rng.normal_tensor(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace

void ModelConfig::validate() const {
  backbone.validate();
  if (in_channels == 0) throw std::invalid_argument("model: in_channels must be positive");
  if (num_classes < 2) throw std::invalid_argument("model: need at least 2 classes");
  const std::size_t s = backbone.total_stride();
  if (height % s != 0 || width % s != 0)
    throw std::invalid_argument("model: input " + std::to_string(height) + "x" + std::to_string(width) +
                                " not divisible by total stride " + std::to_string(s));
  for (auto b : backbone.cosam_after) cosam_at(b).validate();
  for (auto b : backbone.srim_after) srim_at(b).validate();
}

CosamConfig ModelConfig::cosam_at(std::size_t block) const {
  CosamConfig c = cosam;
  c.channels = backbone.blocks.at(block - 1).channels;
  c.reduced = std::min(c.reduced, c.channels / 2);
  if (c.mlp_hidden) c.mlp_hidden = std::min(c.mlp_hidden, c.channels / 2);
  auto [h, w] = geometry_after(*this, block);
  c.height = h;
  c.width = w;
  return c;
}

SrimConfig ModelConfig::srim_at(std::size_t block) const {
  SrimConfig c = srim;
  c.channels = backbone.blocks.at(block - 1).channels;
  c.reduced = std::min(c.reduced, c.channels / 2);
  return c;
}

Var temporal_aggregate(Var feats, std::size_t snippet_len, TemporalMode mode, Var score_weight, Var score_bias) {
  const Shape& s = feats.shape();
  if (s.size() != 2) throw std::invalid_argument("temporal_aggregate: expected [B*N, D], got " + shape_str(s));
  if (snippet_len == 0 || s[0] % snippet_len != 0)
    throw std::invalid_argument("temporal_aggregate: " + std::to_string(s[0]) + " frames do not split into snippets of " +
                                std::to_string(snippet_len));
  const std::size_t b = s[0] / snippet_len, d = s[1];
  Var grouped = reshape(feats, {b, snippet_len, d});
  switch (mode) {
    case TemporalMode::avg: return mean_axis(grouped, 1);
    case TemporalMode::attention: {
      if (!score_weight.tape || !score_bias.tape)
        throw std::invalid_argument("temporal_aggregate: attention mode needs score parameters");
      Var scores = reshape(linear(feats, score_weight, score_bias), {b, snippet_len});
      Var weights = reshape(softmax(scores, 1), {b, 1, snippet_len});
      return reshape(batched_matmul(weights, grouped), {b, d});
    }
  }
  throw std::invalid_argument("temporal_aggregate: unknown mode");
}

ReidModel::ReidModel(ParameterSet& params, const std::string& prefix, ModelConfig cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  std::size_t in = cfg_.in_channels;
  for (std::size_t i = 0; i < cfg_.backbone.blocks.size(); ++i) {
    const std::size_t out = cfg_.backbone.blocks[i].channels;
    const std::string p = prefix + ".block" + std::to_string(i + 1);
    Block b;
    b.weight = &params.add(p + ".conv.weight", he_normal(rng, {out, in, 3, 3}, in * 9));
    b.bias = &params.add(p + ".conv.bias", Tensor::zeros({out}));
    b.gamma = &params.add(p + ".bn.gamma", Tensor::ones({out}));
    b.beta = &params.add(p + ".bn.beta", Tensor::zeros({out}));
    b.mean = &params.add(p + ".bn.running_mean", Tensor::zeros({out}), false);
    b.var = &params.add(p + ".bn.running_var", Tensor::ones({out}), false);
    if (cfg_.backbone.cosam_after.count(i + 1))
      b.cosam = std::make_unique<Cosam>(params, prefix + ".cosam" + std::to_string(i + 1), cfg_.cosam_at(i + 1), rng);
    if (cfg_.backbone.srim_after.count(i + 1))
      b.srim = std::make_unique<Srim>(params, prefix + ".srim" + std::to_string(i + 1), cfg_.srim_at(i + 1), rng);
    blocks_.push_back(std::move(b));
    in = out;
  }
  const std::size_t d = cfg_.embedding_dim();
  if (cfg_.temporal == TemporalMode::attention) {
    ta_weight_ = &params.add(prefix + ".temporal.weight", rng.normal_tensor({1, d}, 1.0 / std::sqrt(double(d))));
    ta_bias_ = &params.add(prefix + ".temporal.bias", Tensor::zeros({1}));
  }
  cls_weight_ = &params.add(prefix + ".classifier.weight",
                            rng.normal_tensor({cfg_.num_classes, d}, 1.0 / std::sqrt(static_cast<double>(d))));
  cls_bias_ = &params.add(prefix + ".classifier.bias", Tensor::zeros({cfg_.num_classes}));
}

Var ReidModel::backbone_forward(Tape& tape, Var x, std::size_t snippet_len, Mode mode,
                                std::vector<Var>* masks) const {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.height || s[3] != cfg_.width)
    throw std::invalid_argument("backbone: input " + shape_str(s) + " does not match configured [*, " +
                                std::to_string(cfg_.in_channels) + ", " + std::to_string(cfg_.height) + ", " +
                                std::to_string(cfg_.width) + "]");
  if (snippet_len == 0 || s[0] % snippet_len != 0)
    throw std::invalid_argument("backbone: batch of " + std::to_string(s[0]) + " frames is not a whole number of snippets");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& b = blocks_[i];
    x = conv3x3(x, tape.param(*b.weight), tape.param(*b.bias), cfg_.backbone.blocks[i].stride);
    x = batch_norm2d(x, tape.param(*b.gamma), tape.param(*b.beta), b.mean->value, b.var->value, mode);
    x = relu(x);
    if (b.cosam) {
      auto out = b.cosam->forward(tape, x, snippet_len, mode);
      x = out.features;
      if (masks && out.mask.tape) masks->push_back(out.mask);
    }
    if (b.srim) x = b.srim->forward(tape, x, snippet_len);
  }
  return x;
}

ReidModel::Output ReidModel::forward(Tape& tape, Var frames, std::size_t snippet_len, Mode mode) const {
  Output o;
  o.feature_map = backbone_forward(tape, frames, snippet_len, mode, &o.masks);
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    if (blocks_[i].cosam && blocks_[i].cosam->config().spatial) o.mask_blocks.push_back(i + 1);
  o.frame_features = global_avg_pool(o.feature_map);
  if (cfg_.temporal == TemporalMode::attention)
    o.embedding = temporal_aggregate(o.frame_features, snippet_len, cfg_.temporal, tape.param(*ta_weight_),
                                     tape.param(*ta_bias_));
  else
    o.embedding = temporal_aggregate(o.frame_features, snippet_len, cfg_.temporal);
  if (cfg_.normalize) o.embedding = l2_normalize_rows(o.embedding);
  o.logits = linear(o.embedding, tape.param(*cls_weight_), tape.param(*cls_bias_));
  return o;
}

TwoBranchModel::TwoBranchModel(ModelConfig global_cfg, ModelConfig cosb_cfg, std::uint64_t seed, bool tied) {
  Rng rng(seed);
  global_ = std::make_unique<ReidModel>(params_, "global", global_cfg, rng);
  if (!tied) {
    if (cosb_cfg.num_classes != global_cfg.num_classes)
      throw std::invalid_argument("two-branch: branches must share the class count");
    cosb_ = std::make_unique<ReidModel>(params_, "cosb", cosb_cfg, rng);
  }
}

TwoBranchModel::Output TwoBranchModel::forward(Tape& tape, Var frames, std::size_t snippet_len, Mode mode) const {
  Output o;
  o.logits_p = global_->forward(tape, frames, snippet_len, mode).logits;
  o.logits_q = cosb_ ? cosb_->forward(tape, frames, snippet_len, mode).logits : o.logits_p;
  o.p = softmax(o.logits_p, 1);
  o.q = softmax(o.logits_q, 1);
  return o;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params) {
  std::ostringstream header;
  header << "COSAMCKPT1\nparams " << params.size() << "\n";
  std::vector<double> payload;
  for (const Parameter* p : params.all()) {
    header << p->name << ' ' << (p->trainable ? 1 : 0) << ' ' << payload.size() << ' ' << p->value.rank();
    for (auto d : p->value.shape()) header << ' ' << d;
    header << '\n';
    payload.insert(payload.end(), p->value.data().begin(), p->value.data().end());
  }
  header << "payload\n";
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os << header.str();
  const std::size_t n = payload.size();
  write_ctf(os, Tensor({std::max<std::size_t>(n, 1)}, n ? std::move(payload) : std::vector<double>{0.0}));
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, ParameterSet& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "COSAMCKPT1") throw std::runtime_error(path.string() + " is not a COSAMCKPT1 checkpoint");
  std::getline(is, line);
  std::istringstream cl(line);
  std::string word;
  std::size_t count = 0;
  if (!(cl >> word >> count) || word != "params") throw std::runtime_error("checkpoint: bad parameter count line");
  if (count != params.size())
    throw std::runtime_error("checkpoint has " + std::to_string(count) + " parameters, model has " +
                             std::to_string(params.size()));
  struct Entry {
    Parameter* p;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  auto all = params.all();
  for (std::size_t i = 0; i < count; ++i) {
    std::getline(is, line);
    std::istringstream ls(line);
    std::string name;
    int trainable = 0;
    std::size_t offset = 0, rank = 0;
    ls >> name >> trainable >> offset >> rank;
    Shape shape(rank);
    for (auto& d : shape) ls >> d;
    if (!ls) throw std::runtime_error("checkpoint: bad manifest line '" + line + "'");
    if (name != all[i]->name) throw std::runtime_error("checkpoint: expected " + all[i]->name + ", found " + name);
    if (shape != all[i]->value.shape())
      throw std::runtime_error("checkpoint: " + name + " has shape " + shape_str(shape) + ", model expects " +
                               shape_str(all[i]->value.shape()));
    entries.push_back({all[i], offset});
  }
  std::getline(is, line);
  if (line != "payload") throw std::runtime_error("checkpoint: missing payload marker");
  Tensor payload = read_ctf(is);
  for (const auto& e : entries) {
    const std::size_t n = e.p->value.numel();
    if (e.offset + n > payload.numel()) throw std::runtime_error("checkpoint: payload too short for " + e.p->name);
    std::copy_n(payload.data().begin() + e.offset, n, e.p->value.data().begin());
  }
}

}  // namespace coseg
