#include "coseg/srim.hpp"

#include <cmath>
#include <stdexcept>

namespace coseg {
namespace {

const SrimConfig& checked(const SrimConfig& cfg) {
  cfg.validate();
  return cfg;
}

Tensor scaled_normal(Rng& rng, Shape shape, std::size_t fan_in, double gain = 1.0) {
  return rng.normal_tensor(std::move(shape), gain / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace

void SrimConfig::validate() const {
  if (reduced == 0 || reduced >= channels)
    throw std::invalid_argument("SrimConfig: need 0 < reduced (" + std::to_string(reduced) + ") < channels (" +
                                std::to_string(channels) + ")");
  if (objects == 0) throw std::invalid_argument("SrimConfig: objects must be positive");
  if (heads == 0 || reduced % heads != 0)
    throw std::invalid_argument("SrimConfig: heads (" + std::to_string(heads) + ") must divide reduced (" +
                                std::to_string(reduced) + ")");
  if (window < 0) throw std::invalid_argument("SrimConfig: window must be non-negative");
}

Var object_association(Var f_red, Var weight, Var bias) {
  if (f_red.shape().size() != 4) throw std::invalid_argument("object_association: expected [T,C_R,H,W]");
  const Shape s = f_red.shape();
  Var logits = conv1x1(f_red, weight, bias);
  const std::size_t objects = logits.shape()[1];
  Var flat = reshape(logits, {s[0] * objects, s[2] * s[3]});
  return reshape(softmax(flat, 1), {s[0], objects, s[2], s[3]});
}

Var weighted_avg_pool(Var f_red, Var assoc) {
  const Shape& f = f_red.shape();
  const Shape& a = assoc.shape();
  if (f.size() != 4 || a.size() != 4 || f[0] != a[0] || f[2] != a[2] || f[3] != a[3])
    throw std::invalid_argument("weighted_avg_pool: features " + shape_str(f) + " and association " + shape_str(a) +
                                " do not conform");
  const std::size_t hw = f[2] * f[3];
  return batched_matmul(reshape(assoc, {a[0], a[1], hw}), reshape(f_red, {f[0], f[1], hw}), false, true);
}

std::vector<std::uint8_t> temporal_mask(std::size_t frames, std::size_t objects, std::size_t snippet_len,
                                        std::optional<int> window) {
  if (window && *window < 0) throw std::invalid_argument("temporal_mask: window must be non-negative");
  if (snippet_len == 0 || frames % snippet_len != 0)
    throw std::invalid_argument("temporal_mask: frame count not a multiple of snippet length");
  const std::size_t tokens = frames * objects;
  std::vector<std::uint8_t> mask(tokens * tokens, 0);
  for (std::size_t i = 0; i < tokens; ++i)
    for (std::size_t j = 0; j < tokens; ++j) {
      const std::size_t ti = i / objects, tj = j / objects;
      if (ti / snippet_len != tj / snippet_len) continue;
      const std::size_t dist = ti > tj ? ti - tj : tj - ti;
      mask[i * tokens + j] = (!window || dist <= static_cast<std::size_t>(*window)) ? 1 : 0;
    }
  return mask;
}

MhsaResult masked_mhsa(Var obj, const AttentionWeights& w, std::size_t heads, std::optional<int> window,
                       std::size_t snippet_len) {
  const Shape& s = obj.shape();
  if (s.size() != 3) throw std::invalid_argument("masked_mhsa: expected [T,N_o,C_R], got " + shape_str(s));
  if (window && *window < 0) throw std::invalid_argument("masked_mhsa: window must be non-negative");
  const std::size_t frames = s[0], objects = s[1], dim = s[2];
  if (heads == 0 || dim % heads != 0) throw std::invalid_argument("masked_mhsa: heads must divide the feature width");
  const std::size_t head_dim = dim / heads;
  const auto mask = temporal_mask(frames, objects, snippet_len, window);

  Var tokens = reshape(obj, {frames * objects, dim});
  Var q = linear(tokens, w.query, w.query_bias);
  Var k = linear(tokens, w.key, w.key_bias);
  Var v = linear(tokens, w.value, w.value_bias);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  MhsaResult result;
  std::vector<Var> head_out;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * head_dim, head_dim);
    Var kh = slice_cols(k, h * head_dim, head_dim);
    Var vh = slice_cols(v, h * head_dim, head_dim);
    Var att = softmax_rows_masked(scale(matmul(qh, kh, false, true), inv_sqrt), &mask);
    result.attention.push_back(att);
    head_out.push_back(matmul(att, vh));
  }
  Var merged = heads == 1 ? head_out.front() : concat_cols(head_out);
  result.output = reshape(linear(merged, w.out, w.out_bias), s);
  return result;
}

Var reverse_map(Var attended, Var assoc) {
  const Shape& o = attended.shape();
  const Shape& a = assoc.shape();
  if (o.size() != 3 || a.size() != 4 || o[0] != a[0] || o[1] != a[1])
    throw std::invalid_argument("redistribute: object features " + shape_str(o) + " and association " + shape_str(a) +
                                " do not conform");
  Var pix = batched_matmul(attended, reshape(assoc, {a[0], a[1], a[2] * a[3]}), true, false);
  return reshape(pix, {a[0], o[2], a[2], a[3]});
}

Var redistribute(Var attended, Var assoc, Var weight, Var bias) {
  return conv1x1(reverse_map(attended, assoc), weight, bias);
}

Srim::Srim(ParameterSet& params, const std::string& prefix, SrimConfig cfg, Rng& rng)
    : reduce_weight(params.add(prefix + ".reduce.weight",
                               scaled_normal(rng, {checked(cfg).reduced, cfg.channels}, cfg.channels, std::sqrt(2.0)))),
      reduce_bias(params.add(prefix + ".reduce.bias", Tensor::zeros({cfg.reduced}))),
      assoc_weight(params.add(prefix + ".assoc.weight", scaled_normal(rng, {cfg.objects, cfg.reduced}, cfg.reduced))),
      assoc_bias(params.add(prefix + ".assoc.bias", Tensor::zeros({cfg.objects}))),
      wq(params.add(prefix + ".attn.query.weight", scaled_normal(rng, {cfg.reduced, cfg.reduced}, cfg.reduced))),
      bq(params.add(prefix + ".attn.query.bias", Tensor::zeros({cfg.reduced}))),
      wk(params.add(prefix + ".attn.key.weight", scaled_normal(rng, {cfg.reduced, cfg.reduced}, cfg.reduced))),
      bk(params.add(prefix + ".attn.key.bias", Tensor::zeros({cfg.reduced}))),
      wv(params.add(prefix + ".attn.value.weight", scaled_normal(rng, {cfg.reduced, cfg.reduced}, cfg.reduced))),
      bv(params.add(prefix + ".attn.value.bias", Tensor::zeros({cfg.reduced}))),
      wo(params.add(prefix + ".attn.out.weight", scaled_normal(rng, {cfg.reduced, cfg.reduced}, cfg.reduced))),
      bo(params.add(prefix + ".attn.out.bias", Tensor::zeros({cfg.reduced}))),
      expand_weight(params.add(prefix + ".expand.weight", Tensor::zeros({cfg.channels, cfg.reduced}))),
      expand_bias(params.add(prefix + ".expand.bias", Tensor::zeros({cfg.channels}))),
      cfg_(cfg) {}

AttentionWeights Srim::attention(Tape& tape) const {
  return {tape.param(wq), tape.param(bq), tape.param(wk), tape.param(bk),
          tape.param(wv), tape.param(bv), tape.param(wo), tape.param(bo)};
}

Srim::Trace Srim::trace(Tape& tape, Var f, std::size_t snippet_len) const {
  const Shape s = f.shape();
  if (s.size() != 4 || s[1] != cfg_.channels)
    throw std::invalid_argument("srim: input " + shape_str(s) + " does not have " + std::to_string(cfg_.channels) +
                                " channels");
  Trace t;
  Var reduced = conv1x1(f, tape.param(reduce_weight), tape.param(reduce_bias));
  t.association = object_association(reduced, tape.param(assoc_weight), tape.param(assoc_bias));
  t.objects = weighted_avg_pool(reduced, t.association);
  t.attended = masked_mhsa(t.objects, attention(tape), cfg_.heads, cfg_.window, snippet_len);
  Var back = redistribute(t.attended.output, t.association, tape.param(expand_weight), tape.param(expand_bias));
  t.output = add(f, back);
  return t;
}

}  // namespace coseg
