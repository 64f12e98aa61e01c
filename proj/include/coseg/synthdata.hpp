#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "coseg/random.hpp"
#include "coseg/tensor.hpp"

namespace coseg {

enum class ShapeKind { disk, bar, blob };

struct IdentitySpec {
  ShapeKind shape = ShapeKind::disk;
  std::uint64_t texture_seed = 0;
  std::array<double, 3> hue{};  // base RGB, each in (0,1]
  double size = 0.25;           // fraction of the frame, in [0.1, 0.4]
};

std::vector<IdentitySpec> gen_identities(std::size_t count, std::uint64_t seed);

// Object center moves linearly: (x0 + vx*t, y0 + vy*t), in pixels.
struct Trajectory {
  double x0 = 0, y0 = 0;
  double vx = 0, vy = 0;
};

// Flat gray rectangle [x0,x1) x [y0,y1) in pixels pasted over everything.
struct Occluder {
  bool on = false;
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

struct Nuisance {
  Trajectory trajectory;
  double gain = 1.0;
  std::uint64_t clutter_seed = 0;
  Occluder occluder;
  // Clutter rectangles per frame; 0 leaves a flat background.
  std::size_t clutter_items = 10;
  // Look-alike objects drawn from this pool at fresh random places in
  // every frame, underneath the real object.
  std::vector<IdentitySpec> distractor_pool;
  std::size_t distractors = 0;
};

struct SnippetSample {
  Tensor frames;    // [N,3,H,W] in [0,1]
  Tensor gt_masks;  // [N,1,H,W], 1 on visible object pixels
  int identity = 0;
  int snippet = 0;
};

// Half extents (x, y) of the object's bounding box in pixels.
std::array<double, 2> object_extent(const IdentitySpec& id, std::size_t height, std::size_t width);
// Whether the pixel center (x+0.5, y+0.5) lies in the object centered at (cx, cy).
bool inside_object(const IdentitySpec& id, std::size_t height, std::size_t width, double cx, double cy,
                   std::size_t x, std::size_t y);

SnippetSample render_snippet(const IdentitySpec& id, const Nuisance& nuisance, std::size_t frames,
                             std::size_t height, std::size_t width);

enum class Split { train, query, gallery };
// disjoint: half the identities train, the rest form query/gallery.
// shared: every identity contributes train, query and gallery snippets.
enum class Protocol { disjoint, shared };
Protocol parse_protocol(const std::string& s);
const char* protocol_name(Protocol p);
const char* split_name(Split s);
Split parse_split(const std::string& s);

struct DatasetConfig {
  std::size_t num_ids = 16;
  std::size_t snippets_per_id = 6;
  std::size_t track_len = 8;  // frames rendered per snippet
  std::size_t height = 64;
  std::size_t width = 32;
  std::uint64_t seed = 0;
  double occluder_prob = 0.3;
  std::size_t clutter_items = 10;
  std::size_t distractors = 2;
  // Object centres stay within this fraction of the free range around the
  // frame centre, as in detector-cropped tracklets; 1 allows anywhere.
  double center_jitter = 1.0;
  Protocol protocol = Protocol::shared;
  void validate() const;
};


// Disjoint: identities are split in half and each test identity gives its
// first third of snippets (at least one) as queries, the rest as gallery.
// Shared: each identity gives snippet 0 as query, the next third (at least
// one) as gallery and the remainder to training.
struct Dataset {
  DatasetConfig config;
  std::vector<SnippetSample> snippets;  // index == snippet id
  std::vector<Split> split;
  std::vector<std::size_t> indices(Split s) const;
  // Training labels remapped to 0..C-1 in order of first appearance.
  std::vector<int> train_identities() const;
};

Dataset make_dataset(const DatasetConfig& cfg);

// Directory layout: `manifest` (header lines start with '#', then one line
// per snippet: id identity split frames_file masks_file) plus CTF1 files.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

enum class FrameSelect { sequential, random };
FrameSelect parse_frame_select(const std::string& s);

// Sequential: a window [s, s+n) with s uniform in [0, len-n].
// Random: n distinct frames in increasing order.
std::vector<std::size_t> select_frames(std::size_t len, std::size_t n, FrameSelect mode, Rng& rng);

struct Batch {
  Tensor frames;    // [B*N,3,H,W], snippets consecutive
  Tensor gt_masks;  // [B*N,1,H,W]
  std::vector<int> identities;
  std::vector<std::size_t> snippets;
  std::vector<std::vector<std::size_t>> frame_indices;
  std::size_t snippet_len = 0;
};

// P identities with K snippets each, drawn without replacement.
Batch sample_batch(const Dataset& ds, Split split, std::size_t p, std::size_t k, FrameSelect mode,
                   std::size_t n, Rng& rng);
// The given snippets with explicit frame indices per snippet.
Batch gather_batch(const Dataset& ds, const std::vector<std::size_t>& snippets,
                   const std::vector<std::vector<std::size_t>>& frames);

// Grayscale PGMs of each frame and its mask for eyeballing.
void export_snippet_pgm(const SnippetSample& s, const std::filesystem::path& dir);

}  // namespace coseg
