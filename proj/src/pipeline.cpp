#include "coseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "coseg/metrics.hpp"
#include "coseg/objectives.hpp"

namespace coseg {

namespace {

std::string join(const std::set<std::size_t>& s) {
  std::string out;
  for (auto v : s) out += (out.empty() ? "" : ",") + std::to_string(v);
  return out;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

void RunConfig::validate() const {
  data.validate();
  require(frames >= 2, "frames must be at least 2");
  require(frames <= data.track_len, "frames (" + std::to_string(frames) + ") exceeds track_len (" +
                                        std::to_string(data.track_len) + ")");
  require(refs >= 1, "refs must be at least 1");
  require(refs <= frames - 1, "refs K=" + std::to_string(refs) + " exceeds N-1=" + std::to_string(frames - 1));
  require(objective == "reid" || objective == "distill", "objective must be reid or distill");
  require(margin >= 0, "margin must be non-negative");
  require(lambda >= 0 && lambda_kl >= 0, "loss weights must be non-negative");
  require(adam.lr > 0, "lr must be positive");
  require(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1, "betas must lie in [0,1)");
  require(adam.eps > 0, "adam eps must be positive");
  require(decay_factor > 0 && decay_factor <= 1, "decay_factor must lie in (0,1]");
  require(batch_ids >= 2, "batch_ids must be at least 2");
  require(batch_ids <= train_classes(), "batch_ids exceeds the number of training identities (" +
                                            std::to_string(train_classes()) + ")");
  const std::size_t third = std::max<std::size_t>(1, data.snippets_per_id / 3);
  const std::size_t train_snippets =
      data.protocol == Protocol::shared ? data.snippets_per_id - 1 - third : data.snippets_per_id;
  require(batch_snippets >= 1 && batch_snippets <= train_snippets,
          "batch_snippets outside 1.." + std::to_string(train_snippets) + " (training snippets per identity)");
  require(objective != "reid" || lambda == 0 || batch_snippets >= 2, "triplet loss needs batch_snippets >= 2");
  require(log_every >= 1 && eval_chunk >= 1, "log_every and eval_chunk must be positive");
  require(!cosam || !cosam_after.empty(), "cosam enabled with no insertion points");
  require(!cosam || spatial || channel, "cosam needs spatial or channel attention");
  require(!srim || !srim_after.empty(), "srim enabled with no insertion points");
  model_config(train_classes()).validate();
}

ModelConfig RunConfig::model_config(std::size_t num_classes, bool with_modules) const {
  ModelConfig m;
  m.height = data.height;
  m.width = data.width;
  m.num_classes = num_classes;
  m.temporal = temporal;
  m.normalize = normalize;
  m.cosam.reduced = reduced;
  m.cosam.refs = refs;
  m.cosam.spatial = spatial;
  m.cosam.channel = channel;
  m.srim.reduced = srim_reduced;
  m.srim.objects = srim_objects;
  m.srim.heads = srim_heads;
  m.srim.window = srim_window;
  m.backbone.cosam_after = with_modules && cosam ? cosam_after : std::set<std::size_t>{};
  m.backbone.srim_after = with_modules && srim ? srim_after : std::set<std::size_t>{};
  return m;
}

std::size_t RunConfig::train_classes() const {
  return data.protocol == Protocol::shared ? data.num_ids : data.num_ids / 2;
}

double RunConfig::lr_at(std::size_t step) const {
  const std::size_t every = decay_every ? decay_every : std::max<std::size_t>(1, steps / 4);
  return adam.lr * std::pow(decay_factor, static_cast<double>(step / every));
}

std::string RunConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "data.num_ids=" << data.num_ids << "\ndata.snippets_per_id=" << data.snippets_per_id
     << "\ndata.track_len=" << data.track_len << "\ndata.height=" << data.height << "\ndata.width=" << data.width
     << "\ndata.seed=" << data.seed << "\ndata.occluder_prob=" << data.occluder_prob
     << "\ndata.clutter_items=" << data.clutter_items << "\ndata.distractors=" << data.distractors
     << "\ndata.center_jitter=" << data.center_jitter
     << "\ndata.protocol=" << protocol_name(data.protocol) << "\ndata.dir=" << data_dir << "\nframes=" << frames
     << "\nframe_select=" << (frame_select == FrameSelect::sequential ? "sequential" : "random")
     << "\ncosam.enable=" << cosam << "\ncosam.after=" << join(cosam_after) << "\ncosam.refs=" << refs
     << "\ncosam.reduced=" << reduced << "\ncosam.spatial=" << spatial << "\ncosam.channel=" << channel
     << "\nsrim.enable=" << srim << "\nsrim.after=" << join(srim_after) << "\nsrim.reduced=" << srim_reduced
     << "\nsrim.objects=" << srim_objects << "\nsrim.heads=" << srim_heads << "\nsrim.window=" << srim_window
     << "\ntemporal=" << temporal_mode_name(temporal) << "\nnormalize=" << normalize << "\nloss.objective=" << objective
     << "\nloss.margin=" << margin << "\nloss.lambda=" << lambda << "\nloss.lambda_kl=" << lambda_kl
     << "\noptim.lr=" << adam.lr << "\noptim.beta1=" << adam.beta1 << "\noptim.beta2=" << adam.beta2
     << "\noptim.eps=" << adam.eps << "\noptim.steps=" << steps << "\noptim.decay_every=" << decay_every
     << "\noptim.decay_factor=" << decay_factor << "\noptim.batch_ids=" << batch_ids
     << "\noptim.batch_snippets=" << batch_snippets << "\nseed=" << seed << "\n";
  return os.str();
}

std::string RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::unique_ptr<Network> build_network(const RunConfig& cfg, std::size_t num_classes) {
  auto net = std::make_unique<Network>();
  Rng rng(derive_seed(cfg.seed, 10));
  if (cfg.objective == "distill") {
    net->model = std::make_unique<ReidModel>(net->params, "global", cfg.model_config(num_classes, false), rng);
    net->cosb = std::make_unique<ReidModel>(net->params, "cosb", cfg.model_config(num_classes, true), rng);
  } else {
    net->model = std::make_unique<ReidModel>(net->params, "model", cfg.model_config(num_classes, true), rng);
  }
  return net;
}

Dataset obtain_dataset(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) return make_dataset(cfg.data);
  Dataset ds = load_dataset(cfg.data_dir);
  if (ds.config.height != cfg.data.height || ds.config.width != cfg.data.width)
    throw std::invalid_argument("dataset geometry " + std::to_string(ds.config.height) + "x" +
                                std::to_string(ds.config.width) + " differs from the configured one");
  if (ds.config.track_len < cfg.frames) throw std::invalid_argument("dataset tracks shorter than frames");
  return ds;
}

std::vector<StepLog> train(const RunConfig& cfg, const Dataset& ds, Network& net, std::ostream* log) {
  std::map<int, std::size_t> cls;
  for (int id : ds.train_identities()) cls.emplace(id, cls.size());
  if (cls.size() != net.model->config().num_classes)
    throw std::invalid_argument("train: dataset has " + std::to_string(cls.size()) + " training identities, model " +
                                std::to_string(net.model->config().num_classes) + " classes");
  Rng rng(derive_seed(cfg.seed, 20));
  AdamState state;
  auto trainable = net.params.trainable();
  std::vector<StepLog> history;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Batch batch = sample_batch(ds, Split::train, cfg.batch_ids, cfg.batch_snippets, cfg.frame_select, cfg.frames, rng);
    std::vector<std::size_t> targets;
    for (int id : batch.identities) targets.push_back(cls.at(id));
    Tape tape;
    Var x = tape.constant(batch.frames);
    StepLog row;
    row.step = step;
    row.lr = cfg.lr_at(step);
    Var total;
    if (cfg.objective == "distill") {
      auto a = net.model->forward(tape, x, cfg.frames, Mode::train);
      auto b = net.cosb->forward(tape, x, cfg.frames, Mode::train);
      Var p = softmax(a.logits, 1), q = softmax(b.logits, 1);
      Var cep = cross_entropy(a.logits, targets), ceq = cross_entropy(b.logits, targets);
      total = distill_loss(p, q, cep, ceq, cfg.lambda, cfg.lambda_kl);
      row.ce = cep.value()[0];
      row.kl = kl_divergence(p, q).value()[0];
    } else {
      auto out = net.model->forward(tape, x, cfg.frames, Mode::train);
      auto l = reid_loss(out.logits, targets, {out.embedding, batch.identities}, cfg.margin, cfg.lambda);
      total = l.total;
      row.ce = l.ce.value()[0];
      row.triplet = l.triplet.value()[0];
    }
    row.total = total.value()[0];
    if (!std::isfinite(row.total)) throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
    net.params.zero_grad();
    tape.backward(total);
    AdamConfig a = cfg.adam;
    a.lr = row.lr;
    adam_step(trainable, state, a);
    if (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
      history.push_back(row);
      if (log) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "step=%zu lr=%.6g total=%.9g ce=%.9g triplet=%.9g kl=%.9g\n", row.step, row.lr,
                      row.total, row.ce, row.triplet, row.kl);
        *log << buf << std::flush;
      }
    }
  }
  return history;
}

SnippetOutputs run_snippets(const RunConfig& cfg, const Dataset& ds, const Network& net,
                            const std::vector<std::size_t>& snippets) {
  SnippetOutputs out;
  const std::size_t d = net.model->config().embedding_dim();
  const std::size_t n = cfg.frames, h = ds.config.height, w = ds.config.width;
  out.embeddings = Tensor({std::max<std::size_t>(snippets.size(), 1), d});
  out.gt = Tensor({std::max<std::size_t>(snippets.size() * n, 1), 1, h, w});
  std::vector<std::size_t> window(n);
  for (std::size_t i = 0; i < n; ++i) window[i] = i;
  for (std::size_t start = 0; start < snippets.size(); start += cfg.eval_chunk) {
    const std::size_t stop = std::min(snippets.size(), start + cfg.eval_chunk);
    std::vector<std::size_t> chunk(snippets.begin() + start, snippets.begin() + stop);
    Batch b = gather_batch(ds, chunk, std::vector<std::vector<std::size_t>>(chunk.size(), window));
    Tape tape;
    auto o = net.model->forward(tape, tape.constant(b.frames), n, Mode::eval);
    std::copy(o.embedding.value().data().begin(), o.embedding.value().data().end(),
              out.embeddings.data().begin() + start * d);
    std::copy(b.gt_masks.data().begin(), b.gt_masks.data().end(), out.gt.data().begin() + start * n * h * w);
    if (start == 0) {
      out.mask_blocks = o.mask_blocks;
      for (const Var& m : o.masks)
        out.masks.emplace_back(Shape{snippets.size() * n, 1, m.shape()[2], m.shape()[3]});
    }
    for (std::size_t k = 0; k < o.masks.size(); ++k) {
      const auto& v = o.masks[k].value();
      std::copy(v.data().begin(), v.data().end(), out.masks[k].data().begin() + start * n * v.numel() / (chunk.size() * n));
    }
  }
  return out;
}

EvalReport evaluate(const RunConfig& cfg, const Dataset& ds, const Network& net) {
  const auto qi = ds.indices(Split::query), gi = ds.indices(Split::gallery);
  if (qi.empty() || gi.empty()) throw std::invalid_argument("evaluate: empty query or gallery split");
  auto q = run_snippets(cfg, ds, net, qi);
  auto g = run_snippets(cfg, ds, net, gi);
  std::vector<int> ql, gl;
  for (auto i : qi) ql.push_back(ds.snippets[i].identity);
  for (auto i : gi) gl.push_back(ds.snippets[i].identity);
  EvalReport r;
  r.queries = qi.size();
  r.gallery = gi.size();
  auto retrieval = make_retrieval(q.embeddings, g.embeddings, ql, gl);
  r.cmc = cmc(retrieval, r.ranks);
  r.map = mean_ap(retrieval);
  r.chance_map = permutation_baseline_map(retrieval, 200, derive_seed(cfg.seed, 30));
  r.has_mask = !q.masks.empty();
  const std::size_t hw = ds.config.height * ds.config.width;
  for (std::size_t k = 0; k < q.masks.size(); ++k) {
    const std::size_t mh = q.masks[k].dim(2), mw = q.masks[k].dim(3), mhw = mh * mw;
    MaskCoverage mc;
    mc.block = q.mask_blocks[k];
    // frames whose object survives downsampling to the mask grid
    std::vector<double> mask_vals, gt_vals;
    auto collect = [&](const Tensor& m, const Tensor& gt) {
      const Tensor small = downsample_mask(gt, mh, mw);
      for (std::size_t f = 0; f < m.dim(0); ++f) {
        bool any = false;
        for (std::size_t i = 0; i < mhw; ++i) any |= small[f * mhw + i] > 0;
        if (!any) continue;
        mask_vals.insert(mask_vals.end(), m.data().begin() + f * mhw, m.data().begin() + (f + 1) * mhw);
        gt_vals.insert(gt_vals.end(), gt.data().begin() + f * hw, gt.data().begin() + (f + 1) * hw);
        ++mc.frames;
      }
    };
    collect(q.masks[k], q.gt);
    collect(g.masks[k], g.gt);
    if (mc.frames > 0) {
      Tensor m({mc.frames, 1, mh, mw}, std::move(mask_vals));
      Tensor gt({mc.frames, 1, ds.config.height, ds.config.width}, std::move(gt_vals));
      mc.coverage = attention_coverage(m, gt);
      mc.gt_area = area_fraction(downsample_mask(gt, mh, mw));
    }
    r.masks.push_back(mc);
    r.coverage += mc.coverage * static_cast<double>(mc.frames);
    r.gt_area += mc.gt_area * static_cast<double>(mc.frames);
    r.coverage_frames += mc.frames;
  }
  if (r.coverage_frames > 0) {
    r.coverage /= static_cast<double>(r.coverage_frames);
    r.gt_area /= static_cast<double>(r.coverage_frames);
  }
  return r;
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os.precision(9);
  os << "queries=" << r.queries << "\ngallery=" << r.gallery << "\n";
  for (std::size_t i = 0; i < r.ranks.size(); ++i) os << "cmc@" << r.ranks[i] << "=" << r.cmc[i] << "\n";
  os << "map=" << r.map << "\nchance_map=" << r.chance_map << "\n";
  if (r.has_mask) {
    for (const auto& m : r.masks)
      os << "cosam" << m.block << ".coverage=" << m.coverage << "\ncosam" << m.block << ".gt_area=" << m.gt_area
         << "\ncosam" << m.block << ".frames=" << m.frames << "\n";
    os << "coverage=" << r.coverage << "\ngt_area=" << r.gt_area
       << "\ncoverage_ratio=" << (r.gt_area > 0 ? r.coverage / r.gt_area : 0.0)
       << "\ncoverage_frames=" << r.coverage_frames << "\n";
  }
  return os.str();
}

}  // namespace coseg
