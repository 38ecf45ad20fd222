#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cme/tensor.hpp"

namespace cme {

/// Half-open axis-aligned box in pixel coordinates: [x0,x1) x [y0,y1).
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int class_id = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  bool valid(int canvas_w, int canvas_h) const {
    return x0 >= 0 && x0 < x1 && x1 <= canvas_w && y0 >= 0 && y0 < y1 && y1 <= canvas_h;
  }
};

struct SupportItem {
  Tensor image;  // [3,H,W] in [0,1]
  Tensor mask;   // [1,H,W] binary; the box indicator at creation
  int class_id = 0;
};

struct QueryItem {
  Tensor image;  // [3,H,W]
  std::vector<Box> boxes;
};

enum class ClassRole { base, novel };

struct ClassSplit {
  std::vector<int> base_ids;
  std::vector<int> novel_ids;

  bool is_novel(int class_id) const;
  std::vector<int> all_ids() const;
};

struct Episode {
  std::vector<SupportItem> support;
  std::vector<QueryItem> query;
  std::map<int, ClassRole> class_roster;
};

enum class Phase { base, finetune };

inline constexpr int kCanvas = 64;
inline constexpr int kNumClasses = 8;
inline constexpr const char* kClassNames[kNumClasses] = {
    "circle", "square", "triangle", "cross", "diamond", "ring", "bar", "star"};

/// Deterministic scene rasterizer: the listed classes are drawn at random
/// positions and scales (10-28 px) over low-amplitude uniform noise. Shape
/// identity is geometric; hue correlates with the class but is jittered
/// enough that neighbouring classes overlap in color.
/// Throws ValueError("placement exhausted") when the IoU/size constraints
/// cannot be met within 100 attempts.
struct Scene {
  Tensor image;  // [3,64,64]
  std::vector<Box> boxes;
};
Scene render_scene(std::uint64_t seed, const std::vector<int>& classes,
                   int canvas_h = kCanvas, int canvas_w = kCanvas);

/// 1 inside the half-open box, 0 outside.
Tensor make_support_mask(const Box& box, int canvas_h = kCanvas, int canvas_w = kCanvas);

/// Horizontal flip / random crop / random resize, applied to query images
/// only (support masks must stay aligned with their images).
QueryItem augment_query(const QueryItem& item, std::uint64_t seed);

struct EpisodeRequest {
  std::uint64_t seed = 0;       // per-episode stream
  std::uint64_t pool_seed = 0;  // frozen K-shot novel pool (finetune phase)
  Phase phase = Phase::base;
  int support_per_class = 1;  // K
  int num_query = 8;
  bool augment = false;
};

/// Pure function of the request: support items (exactly support_per_class
/// per present class), query images with 1-3 boxes each, and the roster.
/// In the base phase novel classes never appear; in the finetune phase the
/// novel support instances come from a pool of exactly K instances fixed by
/// pool_seed, not resampled per episode.
Episode sample_episode(const EpisodeRequest& req, const ClassSplit& split);

/// Render one support instance of a class from a seed (image + box mask).
SupportItem render_support(std::uint64_t seed, int class_id);

/// Deterministic cross-validation splits over the 8 built-in classes;
/// variant in {0,1,2} rotates which 2 classes are novel.
ClassSplit default_split(int variant);

inline constexpr int kMaxNovelPool = 10;

// --- portable tensor files and episode dumps ---

/// Binary tensor file: magic "CMET", u32 version=1, u32 rank, u32 dims...,
/// little-endian f64 payload.
void write_tensor_file(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor_file(const std::filesystem::path& path);

/// One directory per episode: every image/mask tensor plus a plain-text box
/// list per query image, one "class x0 y0 x1 y1" line per box.
void dump_episode(const Episode& episode, const std::filesystem::path& dir);

}  // namespace cme
