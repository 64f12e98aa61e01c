#include "coseg/profiler.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace coseg {

const char* const kFlopConvention =
    "flops = 2 x multiply-accumulates of learned layers (1x1 convs, linear maps); "
    "interaction = 2 x MACs of correlation/affinity, aggregation, statistics and gating";

std::uint64_t CostModel::term_macs(const std::string& name) const {
  for (const auto& t : terms)
    if (t.name == name) return t.macs;
  throw std::invalid_argument(module + " has no cost term '" + name + "'");
}

namespace {

void finish(CostModel& m) {
  for (const auto& t : m.terms) (t.layer ? m.flops : m.interaction_flops) += 2 * t.macs;
}

void check_geometry(const Geometry& g) {
  if (g.n == 0 || g.d == 0 || g.h == 0 || g.w == 0) throw std::invalid_argument("geometry dimensions must be positive");
}

}  // namespace

CostModel count_cosam(const Geometry& g, CosamConfig cfg) {
  check_geometry(g);
  cfg.channels = g.d;
  cfg.height = g.h;
  cfg.width = g.w;
  cfg.validate();
  const std::uint64_t n = g.n, d = g.d, hw = g.h * g.w, dr = cfg.reduced, k = cfg.refs, h = cfg.hidden();
  CostModel m;
  m.module = "COSAM";
  m.geom = g;
  m.params = d * dr + dr + 2 * dr + k * hw + 1 + (d * h + h) + (h * d + d);
  m.terms = {
      {"reduce_conv", n * hw * d * dr, true},
      {"summary_conv", n * hw * k * hw, true},
      {"channel_mlp", n * (d * h + h * d), true},
      {"ncc", n * hw * k * hw * dr, false},
      {"ncc_statistics", 3 * n * hw * dr, false},
      {"gating", 2 * n * d * hw, false},
  };
  finish(m);
  return m;
}

NlmVariant parse_nlm_variant(const std::string& s) {
  if (s == "gaussian") return NlmVariant::gaussian;
  if (s == "embedded_gaussian") return NlmVariant::embedded_gaussian;
  if (s == "concat") return NlmVariant::concat;
  if (s == "dot_product") return NlmVariant::dot_product;
  throw std::invalid_argument("unknown non-local variant '" + s + "'");
}

const char* nlm_variant_name(NlmVariant v) {
  switch (v) {
    case NlmVariant::gaussian: return "gaussian";
    case NlmVariant::embedded_gaussian: return "embedded_gaussian";
    case NlmVariant::concat: return "concat";
    case NlmVariant::dot_product: return "dot_product";
  }
  return "?";
}

CostModel count_nlm(const Geometry& g, NlmVariant v) {
  check_geometry(g);
  if (g.d < 2) throw std::invalid_argument("non-local block needs D >= 2");
  const std::uint64_t p = g.n * g.h * g.w, d = g.d, b = g.d / 2;
  const std::uint64_t proj = d * b + b;  // one 1x1 projection with bias
  CostModel m;
  m.module = std::string("NLM/") + nlm_variant_name(v);
  m.geom = g;
  // Gaussian compares raw features: only g and the output projection.
  const std::uint64_t projections = v == NlmVariant::gaussian ? 2 : 4;
  m.params = projections * proj;
  const std::uint64_t pair_dim = v == NlmVariant::gaussian ? d : b;
  if (v != NlmVariant::gaussian) {
    m.terms.push_back({"theta", p * d * b, true});
    m.terms.push_back({"phi", p * d * b, true});
  }
  m.terms.push_back({"g", p * d * b, true});
  m.terms.push_back({"output", p * b * d, true});
  if (v == NlmVariant::concat) {
    m.params += 2 * b + 1;
    m.terms.push_back({"concat_projection", p * p * 2 * b, true});
  } else {
    m.terms.push_back({"affinity", p * p * pair_dim, false});
  }
  m.terms.push_back({"aggregation", p * p * b, false});
  finish(m);
  return m;
}

std::vector<ComparisonRow> compare(const std::vector<Geometry>& geoms, const CosamConfig& cfg) {
  if (geoms.empty()) throw std::invalid_argument("compare: no geometries");
  std::vector<ComparisonRow> rows;
  for (const auto& g : geoms) {
    ComparisonRow r;
    r.geom = g;
    CosamConfig c = cfg;
    c.reduced = std::min(c.reduced, g.d / 2);
    c.mlp_hidden = std::min(c.hidden(), g.d / 2);
    r.cosam = count_cosam(g, c);
    for (auto v : {NlmVariant::gaussian, NlmVariant::embedded_gaussian, NlmVariant::concat, NlmVariant::dot_product})
      r.nlm.push_back(count_nlm(g, v));
    r.param_ratio = static_cast<double>(r.nlm[1].params) / static_cast<double>(r.cosam.params);
    r.flop_ratio = static_cast<double>(r.nlm[1].flops) / static_cast<double>(r.cosam.flops);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

std::string geom_str(const Geometry& g) {
  return std::to_string(g.n) + "x" + std::to_string(g.d) + "x" + std::to_string(g.h) + "x" + std::to_string(g.w);
}

}  // namespace

std::string format_cost_table(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-16s %-24s %12s %12s %14s %12s\n", "input", "module", "params", "GFLOPs",
                "interaction", "total");
  os << buf;
  for (const auto& r : rows) {
    std::vector<const CostModel*> all{&r.cosam};
    for (const auto& m : r.nlm) all.push_back(&m);
    for (const CostModel* m : all) {
      std::snprintf(buf, sizeof buf, "%-16s %-24s %12llu %12.4f %14.4f %12.4f\n", geom_str(r.geom).c_str(),
                    m->module.c_str(), static_cast<unsigned long long>(m->params), m->flops / 1e9,
                    m->interaction_flops / 1e9, m->total_flops() / 1e9);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "%-16s embedded-gaussian NLM / COSAM: params %.2fx, flops %.2fx\n",
                  geom_str(r.geom).c_str(), r.param_ratio, r.flop_ratio);
    os << buf;
  }
  os << "convention: " << kFlopConvention << "\n";
  return os.str();
}

std::string format_cost_keyvalues(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const std::string pre = "row" + std::to_string(i) + ".";
    os << pre << "input=" << geom_str(r.geom) << "\n";
    auto emit = [&](const std::string& key, const CostModel& m) {
      os << pre << key << ".params=" << m.params << "\n"
         << pre << key << ".flops=" << m.flops << "\n"
         << pre << key << ".interaction_flops=" << m.interaction_flops << "\n";
    };
    emit("cosam", r.cosam);
    for (const auto& m : r.nlm) emit("nlm." + m.module.substr(4), m);
    os << pre << "param_ratio=" << r.param_ratio << "\n" << pre << "flop_ratio=" << r.flop_ratio << "\n";
  }
  os << "convention=" << kFlopConvention << "\n";
  return os.str();
}

}  // namespace coseg
