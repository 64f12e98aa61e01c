#include "coseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "coseg/io.hpp"

namespace coseg {

namespace {

constexpr double kMaxBase = 0.75;
constexpr double kOccluderGray = 0.5;

double quantize(double v) { return static_cast<double>(static_cast<float>(v)); }

struct Texture {
  double fu, fv, pu, pv, phase;
};

Texture texture_of(const IdentitySpec& id) {
  Rng r(id.texture_seed);
  Texture t;
  t.fu = r.uniform(1.0, 3.0);
  t.fv = r.uniform(1.0, 3.0);
  t.pu = r.uniform(0, 2 * std::numbers::pi);
  t.pv = r.uniform(0, 2 * std::numbers::pi);
  t.phase = r.uniform(0, 2 * std::numbers::pi);
  return t;
}

void check_identity(const IdentitySpec& id) {
  if (!(id.size >= 0.1 && id.size <= 0.4)) throw std::invalid_argument("identity size must lie in [0.1, 0.4]");
}

// Draws the object into img [3,H,W]; marks its pixels in gt when given.
void paint_object(const IdentitySpec& id, std::size_t height, std::size_t width, double cx, double cy, double* img,
                  double* gt) {
  const auto ext = object_extent(id, height, width);
  const Texture tex = texture_of(id);
  const std::size_t hw = height * width;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      if (!inside_object(id, height, width, cx, cy, x, y)) continue;
      const double u = (x + 0.5 - cx) / ext[0], v = (y + 0.5 - cy) / ext[1];
      const double pattern = 0.5 + 0.5 * std::sin(tex.fu * std::numbers::pi * u + tex.pu) *
                                       std::cos(tex.fv * std::numbers::pi * v + tex.pv);
      const double shade = 0.55 + 0.45 * pattern;
      for (std::size_t c = 0; c < 3; ++c) img[c * hw + y * width + x] = kMaxBase * id.hue[c] * shade;
      if (gt) gt[y * width + x] = 1.0;
    }
}

}  // namespace

std::vector<IdentitySpec> gen_identities(std::size_t count, std::uint64_t seed) {
  if (count < 2) throw std::invalid_argument("gen_identities: need at least 2 identities");
  Rng rng(seed);
  std::vector<IdentitySpec> out;
  std::set<std::uint64_t> used;
  for (std::size_t i = 0; i < count; ++i) {
    IdentitySpec s;
    s.shape = static_cast<ShapeKind>(rng.below(3));
    do s.texture_seed = rng.next();
    while (!used.insert(s.texture_seed).second);
    for (auto& c : s.hue) c = rng.uniform(0.15, 1.0);
    s.size = rng.uniform(0.2, 0.32);
    out.push_back(s);
  }
  return out;
}

std::array<double, 2> object_extent(const IdentitySpec& id, std::size_t height, std::size_t width) {
  const double m = static_cast<double>(std::min(height, width));
  switch (id.shape) {
    case ShapeKind::disk: return {id.size * m, id.size * m};
    case ShapeKind::bar: return {0.5 * id.size * width, 0.8 * id.size * height};
    case ShapeKind::blob: return {1.25 * id.size * m, 1.25 * id.size * m};
  }
  throw std::logic_error("unknown shape");
}

bool inside_object(const IdentitySpec& id, std::size_t height, std::size_t width, double cx, double cy,
                   std::size_t x, std::size_t y) {
  const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
  const double m = static_cast<double>(std::min(height, width));
  switch (id.shape) {
    case ShapeKind::disk: {
      const double r = id.size * m;
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::bar: {
      auto e = object_extent(id, height, width);
      return std::abs(dx) <= e[0] && std::abs(dy) <= e[1];
    }
    case ShapeKind::blob: {
      const double r = id.size * m * (1.0 + 0.25 * std::sin(3.0 * std::atan2(dy, dx) + texture_of(id).phase));
      return dx * dx + dy * dy <= r * r;
    }
  }
  return false;
}

SnippetSample render_snippet(const IdentitySpec& id, const Nuisance& nz, std::size_t frames, std::size_t height,
                             std::size_t width) {
  if (frames < 2) throw std::invalid_argument("render_snippet: need at least 2 frames");
  if (height == 0 || width == 0) throw std::invalid_argument("render_snippet: empty frame");
  check_identity(id);
  if (!(nz.gain > 0.0)) throw std::invalid_argument("render_snippet: gain must be positive");
  const auto ext = object_extent(id, height, width);
  const std::size_t hw = height * width;

  SnippetSample s;
  s.frames = Tensor({frames, 3, height, width});
  s.gt_masks = Tensor({frames, 1, height, width});
  for (std::size_t t = 0; t < frames; ++t) {
    const double cx = nz.trajectory.x0 + nz.trajectory.vx * t;
    const double cy = nz.trajectory.y0 + nz.trajectory.vy * t;
    if (cx - ext[0] < 0 || cx + ext[0] > width || cy - ext[1] < 0 || cy + ext[1] > height)
      throw std::invalid_argument("render_snippet: object leaves the frame at t=" + std::to_string(t));

    double* img = s.frames.data().data() + t * 3 * hw;
    double* gt = s.gt_masks.data().data() + t * hw;

    // background: flat base, clutter rectangles and pixel noise, fresh every frame
    Rng bg(derive_seed(nz.clutter_seed, t));
    for (std::size_t c = 0; c < 3; ++c) {
      const double base = bg.uniform(0.2, 0.45);
      std::fill(img + c * hw, img + (c + 1) * hw, base);
    }
    for (std::size_t k = 0; k < nz.clutter_items; ++k) {
      const double rw = bg.uniform(2.0, 0.5 * width), rh = bg.uniform(2.0, 0.35 * height);
      const double rx = bg.uniform(-rw / 2, width - rw / 2), ry = bg.uniform(-rh / 2, height - rh / 2);
      std::array<double, 3> col;
      for (auto& c : col) c = bg.uniform(0.05, kMaxBase);
      const double stripe = bg.uniform(0.5, 1.5);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double px = x + 0.5, py = y + 0.5;
          if (px < rx || px >= rx + rw || py < ry || py >= ry + rh) continue;
          const double shade = 0.75 + 0.25 * std::sin(stripe * (px + py));
          for (std::size_t c = 0; c < 3; ++c) img[c * hw + y * width + x] = col[c] * shade;
        }
    }
    for (std::size_t i = 0; i < 3 * hw; ++i) img[i] = std::clamp(img[i] + 0.03 * bg.normal(), 0.0, kMaxBase);

    for (std::size_t k = 0; k < nz.distractors && !nz.distractor_pool.empty(); ++k) {
      const IdentitySpec& other = nz.distractor_pool[bg.below(nz.distractor_pool.size())];
      paint_object(other, height, width, bg.uniform(0, width), bg.uniform(0, height), img, nullptr);
    }
    paint_object(id, height, width, cx, cy, img, gt);
    for (std::size_t i = 0; i < 3 * hw; ++i) img[i] = std::min(nz.gain * img[i], 1.0);

    if (nz.occluder.on) {
      const auto& o = nz.occluder;
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double px = x + 0.5, py = y + 0.5;
          if (px < o.x0 || px >= o.x1 || py < o.y0 || py >= o.y1) continue;
          for (std::size_t c = 0; c < 3; ++c) img[c * hw + y * width + x] = kOccluderGray;
          gt[y * width + x] = 0.0;
        }
    }
    if (std::none_of(gt, gt + hw, [](double v) { return v > 0; }))
      throw std::invalid_argument("render_snippet: object fully occluded at t=" + std::to_string(t));
    for (std::size_t i = 0; i < 3 * hw; ++i) img[i] = quantize(img[i]);
  }
  return s;
}

void DatasetConfig::validate() const {
  if (num_ids < 4) throw std::invalid_argument("dataset: need at least 4 identities");
  if (snippets_per_id < 2) throw std::invalid_argument("dataset: need at least 2 snippets per identity");
  if (protocol == Protocol::shared && snippets_per_id < 3)
    throw std::invalid_argument("dataset: the shared protocol needs at least 3 snippets per identity");
  if (track_len < 2) throw std::invalid_argument("dataset: track_len must be at least 2");
  if (height < 8 || width < 8) throw std::invalid_argument("dataset: frames must be at least 8x8");
  if (occluder_prob < 0 || occluder_prob > 1) throw std::invalid_argument("dataset: occluder_prob outside [0,1]");
  if (center_jitter < 0 || center_jitter > 1) throw std::invalid_argument("dataset: center_jitter outside [0,1]");
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "?";
}

Protocol parse_protocol(const std::string& s) {
  if (s == "disjoint") return Protocol::disjoint;
  if (s == "shared") return Protocol::shared;
  throw std::invalid_argument("unknown split protocol '" + s + "'");
}

const char* protocol_name(Protocol p) { return p == Protocol::disjoint ? "disjoint" : "shared"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  if (s == "gallery") return Split::gallery;
  throw std::invalid_argument("unknown split '" + s + "'");
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i)
    if (split[i] == s) out.push_back(i);
  return out;
}

std::vector<int> Dataset::train_identities() const {
  std::vector<int> ids;
  for (auto i : indices(Split::train))
    if (std::find(ids.begin(), ids.end(), snippets[i].identity) == ids.end()) ids.push_back(snippets[i].identity);
  return ids;
}

namespace {

Nuisance sample_nuisance(const IdentitySpec& id, const DatasetConfig& cfg, Rng& r) {
  const auto ext = object_extent(id, cfg.height, cfg.width);
  const double w = static_cast<double>(cfg.width), h = static_cast<double>(cfg.height);
  if (2 * ext[0] > w || 2 * ext[1] > h) throw std::invalid_argument("dataset: object larger than frame");
  auto endpoint = [&](double lo, double hi, double start, double reach) {
    return r.uniform(std::max(lo, start - reach), std::min(hi, start + reach));
  };
  Nuisance nz;
  const double jx = cfg.center_jitter * (w / 2 - ext[0]), jy = cfg.center_jitter * (h / 2 - ext[1]);
  const double x0 = r.uniform(w / 2 - jx, w / 2 + jx), y0 = r.uniform(h / 2 - jy, h / 2 + jy);
  const double x1 = endpoint(w / 2 - jx, w / 2 + jx, x0, 0.25 * w);
  const double y1 = endpoint(h / 2 - jy, h / 2 + jy, y0, 0.25 * h);
  const double steps = static_cast<double>(cfg.track_len - 1);
  nz.trajectory = {x0, y0, (x1 - x0) / steps, (y1 - y0) / steps};
  nz.gain = r.uniform(0.75, 1.25);
  nz.clutter_seed = r.next();
  nz.clutter_items = cfg.clutter_items;
  nz.distractors = cfg.distractors;
  if (r.uniform() < cfg.occluder_prob) {
    const double ow = r.uniform(0.25, 0.4) * w, oh = r.uniform(0.2, 0.35) * h;
    const double ox = r.uniform(0, w - ow), oy = r.uniform(0, h - oh);
    nz.occluder = {true, ox, oy, ox + ow, oy + oh};
  }
  return nz;
}

}  // namespace

Dataset make_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  const auto ids = gen_identities(cfg.num_ids, derive_seed(cfg.seed, 1));
  std::vector<std::size_t> order(cfg.num_ids);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(derive_seed(cfg.seed, 2));
  split_rng.shuffle(order);
  std::vector<bool> is_train(cfg.num_ids, false);
  for (std::size_t i = 0; i < cfg.num_ids / 2; ++i) is_train[order[i]] = true;
  const std::size_t third = std::max<std::size_t>(1, cfg.snippets_per_id / 3);

  Dataset ds;
  ds.config = cfg;
  for (std::size_t i = 0; i < cfg.num_ids; ++i)
    for (std::size_t j = 0; j < cfg.snippets_per_id; ++j) {
      const std::size_t index = i * cfg.snippets_per_id + j;
      Rng r(derive_seed(cfg.seed, 1000 + index));
      std::vector<IdentitySpec> others;
      for (std::size_t o = 0; o < cfg.num_ids; ++o)
        if (o != i) others.push_back(ids[o]);
      SnippetSample s;
      bool ok = false;
      for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        try {
          Nuisance nz = sample_nuisance(ids[i], cfg, r);
          nz.distractor_pool = others;
          s = render_snippet(ids[i], nz, cfg.track_len, cfg.height, cfg.width);
          ok = true;
        } catch (const std::invalid_argument&) {
          if (attempt == 99) throw;
        }
      }
      s.identity = static_cast<int>(i);
      s.snippet = static_cast<int>(index);
      ds.snippets.push_back(std::move(s));
      if (cfg.protocol == Protocol::shared)
        ds.split.push_back(j == 0 ? Split::query : (j <= third ? Split::gallery : Split::train));
      else
        ds.split.push_back(is_train[i] ? Split::train : (j < third ? Split::query : Split::gallery));
    }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "snippets");
  std::ofstream m(dir / "manifest");
  if (!m) throw std::runtime_error("cannot write " + (dir / "manifest").string());
  const auto& c = ds.config;
  m << "# coseg-dataset 1\n"
    << "# num_ids " << c.num_ids << "\n# snippets_per_id " << c.snippets_per_id << "\n# track_len " << c.track_len
    << "\n# height " << c.height << "\n# width " << c.width << "\n# seed " << c.seed << "\n# occluder_prob "
    << c.occluder_prob << "\n# clutter_items " << c.clutter_items << "\n# distractors " << c.distractors
    << "\n# center_jitter " << c.center_jitter << "\n# protocol " << protocol_name(c.protocol) << "\n";
  for (std::size_t i = 0; i < ds.snippets.size(); ++i) {
    const auto& s = ds.snippets[i];
    char name[32];
    std::snprintf(name, sizeof name, "%06zu", i);
    const std::string f = std::string("snippets/") + name + "_frames.ctf";
    const std::string g = std::string("snippets/") + name + "_masks.ctf";
    Tensor frames = s.frames, masks = s.gt_masks;
    frames.set_dtype(DType::f32);
    masks.set_dtype(DType::f32);
    save_ctf(dir / f, frames);
    save_ctf(dir / g, masks);
    m << s.snippet << ' ' << s.identity << ' ' << split_name(ds.split[i]) << ' ' << f << ' ' << g << '\n';
  }
  if (!m) throw std::runtime_error("failed writing manifest");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest");
  if (!m) throw std::runtime_error("cannot read " + (dir / "manifest").string());
  Dataset ds;
  std::map<std::string, std::string> header;
  std::string line;
  bool first = true;
  while (std::getline(m, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (line[0] == '#') {
      std::string hash, key, value;
      ls >> hash >> key >> value;
      if (first && key != "coseg-dataset") throw std::runtime_error("not a coseg dataset manifest");
      first = false;
      header[key] = value;
      continue;
    }
    SnippetSample s;
    std::string split, f, g;
    if (!(ls >> s.snippet >> s.identity >> split >> f >> g)) throw std::runtime_error("bad manifest line: " + line);
    s.frames = load_ctf(dir / f);
    s.gt_masks = load_ctf(dir / g);
    s.frames.set_dtype(DType::f64);
    s.gt_masks.set_dtype(DType::f64);
    if (s.snippet != static_cast<int>(ds.snippets.size())) throw std::runtime_error("manifest ids out of order");
    ds.snippets.push_back(std::move(s));
    ds.split.push_back(parse_split(split));
  }
  auto get = [&](const char* k) {
    auto it = header.find(k);
    if (it == header.end()) throw std::runtime_error(std::string("manifest missing ") + k);
    return it->second;
  };
  auto& c = ds.config;
  c.num_ids = std::stoull(get("num_ids"));
  c.snippets_per_id = std::stoull(get("snippets_per_id"));
  c.track_len = std::stoull(get("track_len"));
  c.height = std::stoull(get("height"));
  c.width = std::stoull(get("width"));
  c.seed = std::stoull(get("seed"));
  c.occluder_prob = std::stod(get("occluder_prob"));
  c.clutter_items = std::stoull(get("clutter_items"));
  c.distractors = std::stoull(get("distractors"));
  c.center_jitter = std::stod(get("center_jitter"));
  c.protocol = parse_protocol(get("protocol"));
  if (ds.snippets.size() != c.num_ids * c.snippets_per_id) throw std::runtime_error("manifest snippet count mismatch");
  return ds;
}

FrameSelect parse_frame_select(const std::string& s) {
  if (s == "sequential") return FrameSelect::sequential;
  if (s == "random") return FrameSelect::random;
  throw std::invalid_argument("unknown frame selection '" + s + "'");
}

std::vector<std::size_t> select_frames(std::size_t len, std::size_t n, FrameSelect mode, Rng& rng) {
  if (n == 0 || n > len) throw std::invalid_argument("select_frames: need 1 <= n <= track length");
  std::vector<std::size_t> out;
  if (mode == FrameSelect::sequential) {
    const std::size_t s = rng.below(len - n + 1);
    for (std::size_t i = 0; i < n; ++i) out.push_back(s + i);
  } else {
    std::vector<std::size_t> all(len);
    for (std::size_t i = 0; i < len; ++i) all[i] = i;
    rng.shuffle(all);
    out.assign(all.begin(), all.begin() + n);
    std::sort(out.begin(), out.end());
  }
  return out;
}

Batch gather_batch(const Dataset& ds, const std::vector<std::size_t>& snippets,
                   const std::vector<std::vector<std::size_t>>& frames) {
  if (snippets.empty() || snippets.size() != frames.size())
    throw std::invalid_argument("gather_batch: need one frame list per snippet");
  const std::size_t n = frames[0].size();
  const std::size_t h = ds.config.height, w = ds.config.width, hw = h * w;
  Batch b;
  b.snippet_len = n;
  b.frames = Tensor({snippets.size() * n, 3, h, w});
  b.gt_masks = Tensor({snippets.size() * n, 1, h, w});
  for (std::size_t i = 0; i < snippets.size(); ++i) {
    const auto& s = ds.snippets.at(snippets[i]);
    if (frames[i].size() != n) throw std::invalid_argument("gather_batch: ragged frame lists");
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t t = frames[i][j];
      if (t >= s.frames.dim(0)) throw std::invalid_argument("gather_batch: frame index out of range");
      const std::size_t row = i * n + j;
      std::copy_n(s.frames.data().begin() + t * 3 * hw, 3 * hw, b.frames.data().begin() + row * 3 * hw);
      std::copy_n(s.gt_masks.data().begin() + t * hw, hw, b.gt_masks.data().begin() + row * hw);
    }
    b.identities.push_back(s.identity);
    b.snippets.push_back(snippets[i]);
    b.frame_indices.push_back(frames[i]);
  }
  return b;
}

Batch sample_batch(const Dataset& ds, Split split, std::size_t p, std::size_t k, FrameSelect mode, std::size_t n,
                   Rng& rng) {
  if (p == 0 || k == 0) throw std::invalid_argument("sample_batch: P and K must be positive");
  std::map<int, std::vector<std::size_t>> by_id;
  for (auto i : ds.indices(split)) by_id[ds.snippets[i].identity].push_back(i);
  std::vector<int> eligible;
  for (auto& [id, list] : by_id)
    if (list.size() >= k) eligible.push_back(id);
  if (eligible.size() < p)
    throw std::invalid_argument("sample_batch: split has " + std::to_string(eligible.size()) +
                                " identities with >= " + std::to_string(k) + " snippets, need " + std::to_string(p));
  rng.shuffle(eligible);
  std::vector<std::size_t> chosen;
  std::vector<std::vector<std::size_t>> frames;
  for (std::size_t i = 0; i < p; ++i) {
    auto list = by_id[eligible[i]];
    rng.shuffle(list);
    for (std::size_t j = 0; j < k; ++j) {
      chosen.push_back(list[j]);
      frames.push_back(select_frames(ds.snippets[list[j]].frames.dim(0), n, mode, rng));
    }
  }
  return gather_batch(ds, chosen, frames);
}

void export_snippet_pgm(const SnippetSample& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t n = s.frames.dim(0), h = s.frames.dim(2), w = s.frames.dim(3), hw = h * w;
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> gray(hw);
    for (std::size_t i = 0; i < hw; ++i)
      gray[i] = (s.frames[t * 3 * hw + i] + s.frames[t * 3 * hw + hw + i] + s.frames[t * 3 * hw + 2 * hw + i]) / 3.0;
    char name[64];
    std::snprintf(name, sizeof name, "snippet%04d_frame%02zu.pgm", s.snippet, t);
    save_pgm(dir / name, h, w, gray);
    std::snprintf(name, sizeof name, "snippet%04d_mask%02zu.pgm", s.snippet, t);
    save_pgm(dir / name, h, w, std::span<const double>(s.gt_masks.data().data() + t * hw, hw));
  }
}

}  // namespace coseg
