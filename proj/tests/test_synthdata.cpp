#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "coseg/cosam.hpp"
#include "coseg/synthdata.hpp"

using namespace coseg;

namespace {

IdentitySpec disk(double size, std::array<double, 3> hue = {0.9, 0.4, 0.2}) {
  IdentitySpec id;
  id.shape = ShapeKind::disk;
  id.texture_seed = 5;
  id.hue = hue;
  id.size = size;
  return id;
}

Nuisance still(double x, double y) {
  Nuisance nz;
  nz.trajectory = {x, y, 0, 0};
  nz.clutter_seed = 17;
  return nz;
}

std::string mask_rows(const Tensor& m, std::size_t t) {
  const std::size_t h = m.dim(2), w = m.dim(3);
  std::string s;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) s += m[t * h * w + y * w + x] > 0 ? 'X' : '.';
    s += '\n';
  }
  return s;
}

std::string temp_dir(const char* name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  return p.string();
}

}  // namespace

TEST(GenIdentities, DeterministicAndSeedSensitive) {
  auto a = gen_identities(12, 3), b = gen_identities(12, 3), c = gen_identities(12, 4);
  ASSERT_EQ(a.size(), 12u);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].texture_seed, b[i].texture_seed);
    EXPECT_EQ(a[i].hue, b[i].hue);
    EXPECT_EQ(a[i].size, b[i].size);
    EXPECT_EQ(a[i].shape, b[i].shape);
    differs |= a[i].texture_seed != c[i].texture_seed;
  }
  EXPECT_TRUE(differs);
  std::set<std::uint64_t> seeds;
  for (auto& s : a) {
    seeds.insert(s.texture_seed);
    EXPECT_GE(s.size, 0.1);
    EXPECT_LE(s.size, 0.4);
  }
  EXPECT_EQ(seeds.size(), a.size());
  EXPECT_EQ(gen_identities(2, 0).size(), 2u);
  EXPECT_THROW(gen_identities(1, 0), std::invalid_argument);
}

TEST(RenderSnippet, StaticObjectHasIdenticalMasks) {
  auto s = render_snippet(disk(0.25), still(16, 32), 5, 64, 32);
  ASSERT_EQ(s.frames.shape(), (Shape{5, 3, 64, 32}));
  const std::size_t hw = 64 * 32;
  for (std::size_t t = 1; t < 5; ++t)
    EXPECT_TRUE(std::equal(s.gt_masks.data().begin(), s.gt_masks.data().begin() + hw,
                           s.gt_masks.data().begin() + t * hw));
  for (double v : s.frames.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(RenderSnippet, GainScalesUnoccludedPixels) {
  auto nz = still(14, 30);
  nz.trajectory.vx = 0.5;
  nz.occluder = {true, 0, 0, 10, 20};
  auto base = render_snippet(disk(0.25), nz, 3, 64, 32);
  nz.gain = 0.8;
  auto dim = render_snippet(disk(0.25), nz, 3, 64, 32);
  const std::size_t h = 64, w = 32;
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t i = ((t * 3 + c) * h + y) * w + x;
          if (x < 10 && y < 20)
            EXPECT_EQ(dim.frames[i], base.frames[i]);
          else
            EXPECT_NEAR(dim.frames[i], 0.8 * base.frames[i], 1e-6);
        }
  EXPECT_EQ(dim.gt_masks, base.gt_masks);
}

TEST(RenderSnippet, OccluderRemovesVisiblePixelsHandCase) {
  Nuisance nz = still(4, 4);
  nz.clutter_items = 0;
  auto clear = render_snippet(disk(0.32), nz, 2, 8, 8);
  EXPECT_EQ(mask_rows(clear.gt_masks, 0),
            "........\n"
            "...XX...\n"
            "..XXXX..\n"
            ".XXXXXX.\n"
            ".XXXXXX.\n"
            "..XXXX..\n"
            "...XX...\n"
            "........\n");
  nz.occluder = {true, 5, 0, 8, 4};
  auto occ = render_snippet(disk(0.32), nz, 2, 8, 8);
  for (std::size_t t = 0; t < 2; ++t)
    EXPECT_EQ(mask_rows(occ.gt_masks, t),
              "........\n"
              "...XX...\n"
              "..XXX...\n"
              ".XXXX...\n"
              ".XXXXXX.\n"
              "..XXXX..\n"
              "...XX...\n"
              "........\n");
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(occ.frames.at({0, c, 2, 6}), 0.5);
}

TEST(RenderSnippet, Errors) {
  EXPECT_THROW(render_snippet(disk(0.25), still(16, 32), 1, 64, 32), std::invalid_argument);
  auto nz = still(16, 32);
  nz.trajectory.vx = 4.0;  // leaves the 32-wide frame within a few frames
  EXPECT_THROW(render_snippet(disk(0.25), nz, 8, 64, 32), std::invalid_argument);
  EXPECT_THROW(render_snippet(disk(0.5), still(16, 32), 2, 64, 32), std::invalid_argument);
  auto hidden = still(16, 32);
  hidden.occluder = {true, 0, 0, 32, 64};
  EXPECT_THROW(render_snippet(disk(0.25), hidden, 2, 64, 32), std::invalid_argument);
}

TEST(MakeDataset, CountsSplitsAndDeterminism) {
  DatasetConfig cfg;
  cfg.protocol = Protocol::disjoint;
  cfg.num_ids = 10;
  cfg.snippets_per_id = 4;
  cfg.track_len = 4;
  auto ds = make_dataset(cfg);
  EXPECT_EQ(ds.snippets.size(), 40u);
  std::set<int> train, query, gallery;
  for (auto i : ds.indices(Split::train)) train.insert(ds.snippets[i].identity);
  for (auto i : ds.indices(Split::query)) query.insert(ds.snippets[i].identity);
  for (auto i : ds.indices(Split::gallery)) gallery.insert(ds.snippets[i].identity);
  EXPECT_EQ(query, gallery);
  EXPECT_EQ(train.size(), 5u);
  for (int id : train) EXPECT_EQ(query.count(id), 0u);
  EXPECT_EQ(ds.indices(Split::train).size() + ds.indices(Split::query).size() + ds.indices(Split::gallery).size(),
            40u);
  for (std::size_t i = 0; i < ds.snippets.size(); ++i) {
    EXPECT_EQ(ds.snippets[i].snippet, static_cast<int>(i));
    for (std::size_t t = 0; t < 4; ++t) {
      double area = 0;
      for (std::size_t p = 0; p < 64 * 32; ++p) area += ds.snippets[i].gt_masks[t * 64 * 32 + p];
      EXPECT_GT(area, 0.0);
    }
  }
  auto again = make_dataset(cfg);
  for (std::size_t i = 0; i < ds.snippets.size(); ++i) {
    EXPECT_EQ(ds.snippets[i].frames, again.snippets[i].frames);
    EXPECT_EQ(ds.split[i], again.split[i]);
  }
  cfg.seed = 1;
  EXPECT_FALSE(make_dataset(cfg).snippets[0].frames == ds.snippets[0].frames);
  cfg.snippets_per_id = 1;
  EXPECT_THROW(make_dataset(cfg), std::invalid_argument);
}

TEST(MakeDataset, SharedProtocolKeepsSnippetsDisjoint) {
  DatasetConfig cfg;
  cfg.num_ids = 5;
  cfg.snippets_per_id = 6;
  cfg.track_len = 2;
  auto ds = make_dataset(cfg);
  std::map<int, std::array<int, 3>> counts;
  for (std::size_t i = 0; i < ds.snippets.size(); ++i) ++counts[ds.snippets[i].identity][static_cast<int>(ds.split[i])];
  ASSERT_EQ(counts.size(), 5u);
  for (auto& [id, c] : counts) {
    EXPECT_EQ(c[static_cast<int>(Split::train)], 3);
    EXPECT_EQ(c[static_cast<int>(Split::query)], 1);
    EXPECT_EQ(c[static_cast<int>(Split::gallery)], 2);
  }
  cfg.snippets_per_id = 2;
  EXPECT_THROW(make_dataset(cfg), std::invalid_argument);
  cfg.protocol = Protocol::disjoint;
  EXPECT_NO_THROW(make_dataset(cfg));
  EXPECT_THROW(parse_protocol("mixed"), std::invalid_argument);
}

TEST(MakeDataset, ObjectHueDominatesInsideMask) {
  DatasetConfig cfg;
  cfg.num_ids = 6;
  cfg.snippets_per_id = 3;
  cfg.track_len = 3;
  auto ds = make_dataset(cfg);
  auto ids = gen_identities(cfg.num_ids, derive_seed(cfg.seed, 1));
  const std::size_t hw = cfg.height * cfg.width;
  for (const auto& s : ds.snippets) {
    const auto& hue = ids[s.identity].hue;
    const double hs = hue[0] + hue[1] + hue[2];
    double in = 0, out = 0, nin = 0, nout = 0;
    for (std::size_t t = 0; t < cfg.track_len; ++t)
      for (std::size_t p = 0; p < hw; ++p) {
        const double r = s.frames[t * 3 * hw + p], g = s.frames[t * 3 * hw + hw + p],
                     b = s.frames[t * 3 * hw + 2 * hw + p];
        const double sum = r + g + b + 1e-9;
        const double d = std::hypot(r / sum - hue[0] / hs, g / sum - hue[1] / hs, b / sum - hue[2] / hs);
        if (s.gt_masks[t * hw + p] > 0) {
          in += d;
          ++nin;
        } else {
          out += d;
          ++nout;
        }
      }
    EXPECT_LT(in / nin, out / nout) << "snippet " << s.snippet;
  }
}

TEST(MakeDataset, ObjectIsTemporallyCoherentClutterIsNot) {
  DatasetConfig cfg;
  cfg.num_ids = 8;
  cfg.snippets_per_id = 4;
  cfg.track_len = 4;
  auto ds = make_dataset(cfg);
  ASSERT_GE(ds.snippets.size(), 30u);
  const std::size_t h = cfg.height, w = cfg.width, hw = h * w;
  auto patch = [&](const Tensor& f, std::size_t t, std::size_t y, std::size_t x) {
    std::vector<double> d;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t dy = 0; dy < 3; ++dy)
        for (std::size_t dx = 0; dx < 3; ++dx) d.push_back(f[((t * 3 + c) * h + y + dy - 1) * w + x + dx - 1]);
    return d;
  };
  auto full = [&](const Tensor& m, std::size_t t, long y, long x, double want) {
    for (long dy = -1; dy <= 1; ++dy)
      for (long dx = -1; dx <= 1; ++dx) {
        const long yy = y + dy, xx = x + dx;
        if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return false;
        if (m[t * hw + yy * w + xx] != want) return false;
      }
    return true;
  };
  double obj = 0, bg = 0;
  long nobj = 0, nbg = 0;
  for (const auto& s : ds.snippets)
    for (std::size_t t = 0; t + 1 < cfg.track_len; ++t) {
      // integer shift that best aligns consecutive masks
      long best_dx = 0, best_dy = 0, best = -1;
      for (long sy = -8; sy <= 8; ++sy)
        for (long sx = -8; sx <= 8; ++sx) {
          long overlap = 0;
          for (long y = 0; y < static_cast<long>(h); ++y)
            for (long x = 0; x < static_cast<long>(w); ++x) {
              const long yy = y + sy, xx = x + sx;
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
              overlap += s.gt_masks[t * hw + y * w + x] > 0 && s.gt_masks[(t + 1) * hw + yy * w + xx] > 0;
            }
          if (overlap > best) {
            best = overlap;
            best_dx = sx;
            best_dy = sy;
          }
        }
      for (long y = 1; y + 1 < static_cast<long>(h); ++y)
        for (long x = 1; x + 1 < static_cast<long>(w); ++x) {
          if (full(s.gt_masks, t, y, x, 1.0) && full(s.gt_masks, t + 1, y + best_dy, x + best_dx, 1.0)) {
            obj += ncc(patch(s.frames, t, y, x), patch(s.frames, t + 1, y + best_dy, x + best_dx), 1e-4);
            ++nobj;
          } else if (full(s.gt_masks, t, y, x, 0.0) && full(s.gt_masks, t + 1, y, x, 0.0)) {
            bg += ncc(patch(s.frames, t, y, x), patch(s.frames, t + 1, y, x), 1e-4);
            ++nbg;
          }
        }
    }
  ASSERT_GT(nobj, 1000);
  ASSERT_GT(nbg, 1000);
  EXPECT_GT(obj / nobj, bg / nbg + 0.3) << "object " << obj / nobj << " background " << bg / nbg;
}

TEST(SampleBatch, SelectionModes) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    auto seq = select_frames(8, 4, FrameSelect::sequential, rng);
    ASSERT_EQ(seq.size(), 4u);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(seq[j], seq[0] + j);
    EXPECT_LE(seq[0], 4u);
    auto rnd = select_frames(8, 4, FrameSelect::random, rng);
    for (std::size_t j = 1; j < 4; ++j) EXPECT_LT(rnd[j - 1], rnd[j]);
    EXPECT_LT(rnd.back(), 8u);
  }
  EXPECT_EQ(select_frames(4, 4, FrameSelect::sequential, rng), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_THROW(select_frames(3, 4, FrameSelect::random, rng), std::invalid_argument);
}

TEST(SampleBatch, PkBatches) {
  DatasetConfig cfg;
  cfg.protocol = Protocol::disjoint;
  cfg.num_ids = 10;
  cfg.snippets_per_id = 4;
  cfg.track_len = 6;
  auto ds = make_dataset(cfg);
  Rng rng(9);
  auto b = sample_batch(ds, Split::train, 4, 2, FrameSelect::sequential, 4, rng);
  EXPECT_EQ(b.snippets.size(), 8u);
  EXPECT_EQ(std::set<int>(b.identities.begin(), b.identities.end()).size(), 4u);
  EXPECT_EQ(b.frames.shape(), (Shape{32, 3, 64, 32}));
  for (std::size_t i = 0; i < b.snippets.size(); ++i) {
    EXPECT_EQ(ds.split[b.snippets[i]], Split::train);
    EXPECT_EQ(ds.snippets[b.snippets[i]].identity, b.identities[i]);
    const std::size_t t = b.frame_indices[i][2];
    const std::size_t n = 64 * 32 * 3;
    EXPECT_TRUE(std::equal(b.frames.data().begin() + (i * 4 + 2) * n, b.frames.data().begin() + (i * 4 + 3) * n,
                           ds.snippets[b.snippets[i]].frames.data().begin() + t * n));
  }
  std::set<std::size_t> unique(b.snippets.begin(), b.snippets.end());
  EXPECT_EQ(unique.size(), 8u);
  EXPECT_THROW(sample_batch(ds, Split::train, 6, 2, FrameSelect::sequential, 4, rng), std::invalid_argument);
  EXPECT_THROW(sample_batch(ds, Split::train, 2, 5, FrameSelect::sequential, 4, rng), std::invalid_argument);
}

TEST(DatasetIo, RoundTripAndManifest) {
  DatasetConfig cfg;
  cfg.num_ids = 4;
  cfg.snippets_per_id = 3;
  cfg.track_len = 3;
  auto ds = make_dataset(cfg);
  const auto dir = temp_dir("coseg_ds_roundtrip");
  save_dataset(ds, dir);
  auto back = load_dataset(dir);
  ASSERT_EQ(back.snippets.size(), ds.snippets.size());
  for (std::size_t i = 0; i < ds.snippets.size(); ++i) {
    EXPECT_EQ(back.snippets[i].frames, ds.snippets[i].frames);
    EXPECT_EQ(back.snippets[i].gt_masks, ds.snippets[i].gt_masks);
    EXPECT_EQ(back.snippets[i].identity, ds.snippets[i].identity);
    EXPECT_EQ(back.split[i], ds.split[i]);
  }
  EXPECT_EQ(back.config.track_len, 3u);
  std::ifstream m(std::filesystem::path(dir) / "manifest");
  std::string line;
  int rows = 0;
  while (std::getline(m, line))
    if (!line.empty() && line[0] != '#') ++rows;
  EXPECT_EQ(rows, 12);

  export_snippet_pgm(ds.snippets[0], std::filesystem::path(dir) / "pgm");
  EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(dir) / "pgm" / "snippet0000_frame02.pgm"));
  EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(dir) / "pgm" / "snippet0000_mask00.pgm"));
  std::filesystem::remove_all(dir);
}
