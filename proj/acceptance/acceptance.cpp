// Acceptance checks; one PASS/FAIL line per criterion.
// Usage: acceptance [criterion...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "coseg/audit.hpp"
#include "coseg/cli.hpp"
#include "coseg/cosam.hpp"
#include "coseg/metrics.hpp"
#include "coseg/pipeline.hpp"
#include "coseg/profiler.hpp"
#include "coseg/srim.hpp"

using namespace coseg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1. gradient audit
Outcome gradient_audit_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = gradient_audit({1, 2, 3}, 1e-4);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string failed;
  std::vector<std::string> names;
  for (const auto& c : checks) {
    worst = std::max(worst, c.max_rel_error);
    if (!c.passed) failed += " " + c.name + "/" + std::to_string(c.seed);
    if (std::find(names.begin(), names.end(), c.name) == names.end()) names.push_back(c.name);
  }
  return {failed.empty() && secs < 120,
          fmt("%zu checks over %zu ops/blocks x 3 seeds, worst rel err %.2e (tol 1e-4), %.1f s (limit 120)%s%s",
              checks.size(), names.size(), worst, secs, failed.empty() ? "" : ", failed:", failed.c_str())};
}

// scalar NCC straight from the definition: population sigmas, eps on each
double ncc_scalar(const std::vector<double>& p, const std::vector<double>& q, double eps) {
  const double d = static_cast<double>(p.size());
  double mp = 0, mq = 0;
  for (std::size_t k = 0; k < p.size(); ++k) mp += p[k] / d, mq += q[k] / d;
  double sp = 0, sq = 0, num = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    sp += (p[k] - mp) * (p[k] - mp) / d;
    sq += (q[k] - mq) * (q[k] - mq) / d;
    num += (p[k] - mp) * (q[k] - mq);
  }
  return num / d / ((std::sqrt(sp) + eps) * (std::sqrt(sq) + eps));
}

// 2. cost volume against triple loops
Outcome cost_volume_check() {
  double worst = 0;
  std::size_t geometries = 0, refs_ok = 0;
  for (std::size_t n = 2; n <= 4; ++n)
    for (std::size_t k = 1; k < n; ++k)
      for (std::size_t h = 1; h <= 4; ++h)
        for (std::size_t w = 1; w <= 4; ++w)
          for (std::size_t d = 1; d <= 8; ++d) {
            Rng rng(derive_seed(n * 1000 + k * 100 + h * 10 + w, d));
            const Tensor f = rng.uniform_tensor({n, d, h, w}, -1, 1);
            Tape tape;
            const CostVolume cv = build_cost_volume(tape.constant(f), k, 1e-4, n);
            const Tensor& v = cv.values.value();
            ++geometries;
            bool refs_match = true;
            for (std::size_t t = 0; t < n; ++t) {
              // K nearest frames in time, earlier first on ties
              std::vector<std::size_t> order;
              for (std::size_t u = 0; u < n; ++u)
                if (u != t) order.push_back(u);
              std::stable_sort(order.begin(), order.end(), [t](std::size_t a, std::size_t b) {
                auto dist = [t](std::size_t x) { return x > t ? x - t : t - x; };
                return dist(a) < dist(b);
              });
              order.resize(k);
              refs_match &= cv.frame_refs[t] == order;
              for (std::size_t r = 0; r < k; ++r)
                for (std::size_t rh = 0; rh < h; ++rh)
                  for (std::size_t rw = 0; rw < w; ++rw)
                    for (std::size_t i = 0; i < h; ++i)
                      for (std::size_t j = 0; j < w; ++j) {
                        std::vector<double> p(d), q(d);
                        for (std::size_t c = 0; c < d; ++c) {
                          p[c] = f.at({t, c, i, j});
                          q[c] = f.at({order[r], c, rh, rw});
                        }
                        const double got = v.at({t, r * h * w + rh * w + rw, i, j});
                        worst = std::max(worst, std::abs(got - ncc_scalar(p, q, 1e-4)));
                      }
            }
            refs_ok += refs_match;
          }
  return {worst < 1e-12 && refs_ok == geometries,
          fmt("%zu geometries (N<=4, K<N, H,W<=4, D_R<=8), max |diff| %.2e (tol 1e-12), reference sets %zu/%zu",
              geometries, worst, refs_ok, geometries)};
}

double sigma(const std::vector<double>& v) {
  double m = 0, s = 0;
  for (double x : v) m += x / v.size();
  for (double x : v) s += (x - m) * (x - m) / v.size();
  return std::sqrt(s);
}

// 3. NCC algebra
Outcome ncc_algebra_check() {
  Rng rng(3);
  double self_err = 0, anti_err = 0, affine_err = 0;
  bool zero_exact = true;
  std::size_t affine_cases = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t d = 2 + rng.below(15);
    std::vector<double> p(d), q(d);
    for (auto& x : p) x = rng.uniform(-1, 1);
    for (auto& x : q) x = rng.uniform(-1, 1);
    std::vector<double> neg(d);
    for (std::size_t i = 0; i < d; ++i) neg[i] = -p[i];
    // self and antisymmetry want sigma >> eps; the eps bias is about 2 eps / sigma
    if (sigma(p) >= 0.5) {
      self_err = std::max(self_err, std::abs(ncc(p, p, 1e-4) - 1.0));
      anti_err = std::max(anti_err, std::abs(ncc(p, neg, 1e-4) + 1.0));
    }
    const std::vector<double> flat(d, rng.uniform(-3, 3));
    zero_exact &= ncc(flat, q, 1e-4) == 0.0 && ncc(p, flat, 1e-4) == 0.0 && ncc(flat, flat, 1e-4) == 0.0;
    if (sigma(p) >= 0.1 && sigma(q) >= 0.1) {
      const double a = rng.uniform(0.5, 2.0), b = rng.uniform(-1, 1), c = rng.uniform(0.5, 2.0), e = rng.uniform(-1, 1);
      std::vector<double> pa(d), qc(d);
      for (std::size_t i = 0; i < d; ++i) pa[i] = a * p[i] + b, qc[i] = c * q[i] + e;
      affine_err = std::max(affine_err, std::abs(ncc(pa, qc, 1e-4) - ncc(p, q, 1e-4)));
      ++affine_cases;
    }
  }
  return {self_err < 1e-3 && anti_err < 1e-3 && zero_exact && affine_err < 2e-3,
          fmt("self |err| %.1e, antisym |err| %.1e (sigma >= 0.5, tol 1e-3), zero-variance exact 0: %s, affine |diff| %.1e over %zu "
              "cases (sigma >= 0.1, tol 2e-3)",
              self_err, anti_err, zero_exact ? "yes" : "no", affine_err, affine_cases)};
}

// 4. analytic costs at 4x2048x16x8
Outcome cost_check() {
  CosamConfig c;
  c.reduced = 256;
  c.refs = 3;
  c.mlp_hidden = 256;
  const auto row = compare({Geometry{4, 2048, 16, 8}}, c).front();
  const CostModel& cosam = row.cosam;
  const CostModel& nlm = row.nlm[1];
  auto rel = [](double a, double b) { return std::abs(a - b) / b; };
  const bool ok = cosam.params == 1576321 && rel(cosam.params, 1.6e6) <= 0.03 && rel(nlm.params, 8.39e6) <= 0.02 &&
                  rel(nlm.flops, 8.59e9) <= 0.02 && rel(cosam.flops, 0.57e9) <= 0.25 && row.param_ratio >= 4 &&
                  row.flop_ratio >= 10;
  return {ok, fmt("COSAM params %llu (%.1f%% from 1.6M), flops %.3fG (%.1f%% from 0.57G); NLM params %llu (%.2f%% "
                  "from 8.39M), flops %.3fG (%.2f%% from 8.59G); ratios %.2fx params, %.2fx flops; convention: 2 FLOPs "
                  "per MAC of learned layers",
                  static_cast<unsigned long long>(cosam.params), 100 * rel(cosam.params, 1.6e6), cosam.flops / 1e9,
                  100 * rel(cosam.flops, 0.57e9), static_cast<unsigned long long>(nlm.params),
                  100 * rel(nlm.params, 8.39e6), nlm.flops / 1e9, 100 * rel(nlm.flops, 8.59e9), row.param_ratio,
                  row.flop_ratio)};
}

// 5. fresh SRIM is the identity
Outcome srim_identity_check() {
  std::size_t cases = 0, exact = 0;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Rng rng(seed);
    SrimConfig cfg;
    cfg.channels = 64 + 64 * (seed % 2);
    cfg.reduced = 32;
    cfg.objects = 5;
    cfg.heads = 8;
    cfg.window = static_cast<int>(seed % 3);
    ParameterSet ps;
    Srim m(ps, "srim", cfg, rng);
    const Tensor x = rng.normal_tensor({8, cfg.channels, 6, 4}, 1.0);
    Tape tape;
    const Tensor y = m.forward(tape, tape.constant(x), 4).value();
    ++cases;
    exact += y == x;
  }
  return {exact == cases, fmt("%zu/%zu random inputs reproduced bit-exactly", exact, cases)};
}

// 6. retrieval metrics against the definitions
std::size_t rank_of(const std::vector<double>& row, std::size_t j) {
  std::size_t r = 1;
  for (std::size_t i = 0; i < row.size(); ++i)
    if (row[i] < row[j] || (row[i] == row[j] && i < j)) ++r;
  return r;
}

Outcome metric_check() {
  const std::vector<std::size_t> ks{1, 2, 3, 4, 5, 6, 7, 8};
  std::size_t instances = 0, cmc_exact = 0;
  double map_diff = 0;
  for (std::size_t nq = 1; nq <= 5; ++nq)
    for (std::size_t ng = 1; ng <= 8; ++ng)
      for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(derive_seed(nq * 10 + ng, seed));
        RetrievalResult r;
        r.distances = Tensor({nq, ng});
        for (auto& v : r.distances.data()) v = seed % 2 ? rng.uniform(0, 5) : static_cast<double>(rng.below(3));
        for (std::size_t j = 0; j < ng; ++j) r.gallery_labels.push_back(static_cast<int>(rng.below(3)));
        for (std::size_t q = 0; q < nq; ++q) r.query_labels.push_back(r.gallery_labels[rng.below(ng)]);
        // AP as an exact fraction per query: sum over hits of hits-so-far / rank
        std::vector<std::size_t> first(nq, ng + 1);
        long double map = 0;
        for (std::size_t q = 0; q < nq; ++q) {
          std::vector<double> row(r.distances.data().begin() + q * ng, r.distances.data().begin() + (q + 1) * ng);
          std::vector<std::size_t> hit_ranks;
          for (std::size_t j = 0; j < ng; ++j)
            if (r.gallery_labels[j] == r.query_labels[q]) hit_ranks.push_back(rank_of(row, j));
          std::sort(hit_ranks.begin(), hit_ranks.end());
          first[q] = hit_ranks.front();
          long double ap = 0;
          for (std::size_t i = 0; i < hit_ranks.size(); ++i) ap += static_cast<long double>(i + 1) / hit_ranks[i];
          map += ap / hit_ranks.size();
        }
        map /= nq;
        std::vector<double> want;
        for (auto k : ks) {
          std::size_t c = 0;
          for (auto f : first) c += f <= k;
          want.push_back(static_cast<double>(c) / nq);
        }
        ++instances;
        cmc_exact += cmc(r, ks) == want;
        map_diff = std::max(map_diff, static_cast<double>(std::abs(mean_ap(r) - map)));
      }
  RetrievalResult hand;
  hand.distances = Tensor({1, 5}, {0.1, 0.2, 0.3, 0.4, 0.5});
  hand.gallery_labels = {3, 1, 3, 2, 4};
  hand.query_labels = {3};
  const double ap = mean_ap(hand);
  const bool hand_ok = std::abs(ap - 0.8333) < 5e-5;
  return {cmc_exact == instances && map_diff <= 1e-12 && hand_ok,
          fmt("%zu instances (Q<=5, G<=8, with ties): CMC identical %zu/%zu, max |mAP diff| %.1e (rounding allowance "
              "1e-12); hand AP %.4f",
              instances, cmc_exact, instances, map_diff, ap)};
}

// 7. synthetic end-to-end
RunConfig end_to_end_config(bool cosam) {
  RunConfig c;
  c.data.seed = 0;
  c.data.num_ids = 16;
  c.data.snippets_per_id = 6;
  c.data.height = 64;
  c.data.width = 32;
  c.data.distractors = 2;
  c.data.center_jitter = 0.3;
  c.data.protocol = Protocol::shared;
  c.normalize = true;
  c.frames = 4;
  c.steps = 2000;
  c.adam.lr = 1e-3;
  c.cosam = cosam;
  c.cosam_after = {3, 4};
  return c;
}

Outcome end_to_end_check() {
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport reports[2];
  for (int with : {0, 1}) {
    const RunConfig cfg = end_to_end_config(with);
    cfg.validate();
    const Dataset ds = obtain_dataset(cfg);
    auto net = build_network(cfg, ds.train_identities().size());
    train(cfg, ds, *net);
    reports[with] = evaluate(cfg, ds, *net);
  }
  const double secs = seconds_since(t0);
  const EvalReport& base = reports[0];
  const EvalReport& co = reports[1];
  const double ratio = co.has_mask ? co.coverage / co.gt_area : 0.0;
  const bool a = co.map > base.map, b = ratio >= 1.5;
  std::string per_block;
  for (const auto& m : co.masks)
    per_block += fmt("%s block %zu %.2fx/%zu frames", per_block.empty() ? "" : ",", m.block,
                     m.gt_area > 0 ? m.coverage / m.gt_area : 0.0, m.frames);
  return {a && b && secs < 1800,
          fmt("(a) mAP COSAM %.4f vs baseline %.4f: %s; (b) coverage %.4f vs gt area %.4f = %.2fx (need 1.5x, %zu "
              "mask-frames;%s): %s; chance mAP %.4f; %.0f s",
              co.map, base.map, a ? "pass" : "fail", co.coverage, co.gt_area, ratio, co.coverage_frames, per_block.c_str(),
              b ? "pass" : "fail", co.chance_map, secs)};
}

// 8. ablation axes all run
Outcome ablation_check() {
  struct Variant {
    std::string name;
    std::function<void(RunConfig&)> set;
  };
  const std::vector<Variant> variants{
      {"spatial-only", [](RunConfig& c) { c.channel = false; }},
      {"channel-only", [](RunConfig& c) { c.spatial = false; }},
      {"spatial+channel", [](RunConfig&) {}},
      {"sequential", [](RunConfig& c) { c.frame_select = FrameSelect::sequential; }},
      {"random", [](RunConfig& c) { c.frame_select = FrameSelect::random; }},
      {"N=2", [](RunConfig& c) { c.frames = 2; c.refs = 1; }},
      {"N=4", [](RunConfig& c) { c.frames = 4; }},
      {"N=8", [](RunConfig& c) { c.frames = 8; }},
  };
  std::string detail;
  bool ok = true;
  for (const auto& v : variants) {
    RunConfig c = end_to_end_config(true);
    c.steps = 30;
    v.set(c);
    try {
      c.validate();
      const Dataset ds = obtain_dataset(c);
      auto net = build_network(c, ds.train_identities().size());
      const auto log = train(c, ds, *net);
      const EvalReport r = evaluate(c, ds, *net);
      const bool finite = std::isfinite(log.back().total) && std::isfinite(r.map);
      ok &= finite;
      detail += fmt("%s%s mAP=%.3f", detail.empty() ? "" : "; ", v.name.c_str(), r.map);
    } catch (const std::exception& e) {
      ok = false;
      detail += fmt("%s%s error: %s", detail.empty() ? "" : "; ", v.name.c_str(), e.what());
    }
  }
  return {ok, detail + " (30 steps each)"};
}

// 9. identical config and seed give identical artifacts
std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome determinism_check() {
  const fs::path root = fs::temp_directory_path() / "coseg_acceptance_determinism";
  fs::remove_all(root);
  std::ostringstream sink;
  for (const char* run : {"a", "b"}) {
    const int rc = cli::main({"coseg", "train", "--steps", "40", "--lr", "1e-3", "--output_dir", (root / run).string()},
                             sink, sink);
    if (rc != 0) return {false, "train exited with " + std::to_string(rc) + ": " + sink.str()};
  }
  const std::string ca = slurp(root / "a" / "model.ckpt"), cb = slurp(root / "b" / "model.ckpt");
  const std::string ra = slurp(root / "a" / "report.txt"), rb = slurp(root / "b" / "report.txt");
  const std::string la = slurp(root / "a" / "train.log"), lb = slurp(root / "b" / "train.log");
  const bool ok = !ca.empty() && ca == cb && !ra.empty() && ra == rb && la == lb;
  fs::remove_all(root);
  return {ok, fmt("two 40-step runs: checkpoints %s (%zu bytes), reports %s, loss logs %s",
                  ca == cb ? "identical" : "differ", ca.size(), ra == rb ? "identical" : "differ",
                  la == lb ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient audit", gradient_audit_check},
      {"cost-volume oracle", cost_volume_check},
      {"NCC algebra", ncc_algebra_check},
      {"analytic cost reproduction", cost_check},
      {"SRIM identity at init", srim_identity_check},
      {"metric oracles", metric_check},
      {"synthetic end-to-end", end_to_end_check},
      {"ablation harness", ablation_check},
      {"determinism", determinism_check},
  };
  std::vector<std::size_t> chosen;
  for (int i = 1; i < argc; ++i) {
    const int k = std::atoi(argv[i]);
    if (k < 1 || k > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "unknown criterion %s\n", argv[i]);
      return 1;
    }
    chosen.push_back(static_cast<std::size_t>(k));
  }
  if (chosen.empty())
    for (std::size_t k = 1; k <= criteria.size(); ++k) chosen.push_back(k);
  int failures = 0;
  for (std::size_t k : chosen) {
    Outcome o;
    try {
      o = criteria[k - 1].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("criterion %zu %s: %s | %s\n", k, criteria[k - 1].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures ? 1 : 0;
}
