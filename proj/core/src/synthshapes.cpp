#include "cme/synthshapes.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cme/rng.hpp"

namespace cme {

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);  // wrap to [0,1)
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - f * s);
  const double t = v * (1.0 - (1.0 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

/// Shape predicate in local coordinates of an s-by-s square; (u,v) is
/// (column, row) of the pixel center relative to the square origin.
bool shape_covers(int class_id, int u, int v, int s) {
  const double c = (s - 1) / 2.0;
  const double r = s / 2.0;
  const double du = u - c;
  const double dv = v - c;
  switch (class_id) {
    case 0:  // circle
      return du * du + dv * dv <= r * r;
    case 1:  // square
      return true;
    case 2:  // triangle, apex at the top
      return std::abs(du) <= (v + 0.5) * 0.5;
    case 3: {  // cross
      const double t = std::max(1.5, s / 6.0);
      return std::abs(du) <= t || std::abs(dv) <= t;
    }
    case 4:  // diamond
      return std::abs(du) + std::abs(dv) <= r;
    case 5: {  // ring
      const double d2 = du * du + dv * dv;
      const double ri = 0.55 * r;
      return d2 <= r * r && d2 >= ri * ri;
    }
    case 6: {  // bar, full width, at least 8 px tall
      const double half = std::max(4.0, 0.2 * s);
      return std::abs(dv) <= half;
    }
    case 7: {  // four-pointed star
      const double k = 0.35 * r;
      return std::abs(du * dv) <= k * k && std::abs(du) <= r && std::abs(dv) <= r;
    }
    default:
      throw ValueError("unknown class id " + std::to_string(class_id));
  }
}

struct Placement {
  std::vector<std::pair<int, int>> pixels;  // (x,y) canvas coords
  Box tight;
};

bool try_place(int class_id, int x0, int y0, int s, int canvas_w, int canvas_h,
               Placement& out) {
  out.pixels.clear();
  int minx = canvas_w, maxx = -1, miny = canvas_h, maxy = -1;
  for (int v = 0; v < s; ++v) {
    for (int u = 0; u < s; ++u) {
      if (!shape_covers(class_id, u, v, s)) continue;
      const int x = x0 + u, y = y0 + v;
      out.pixels.emplace_back(x, y);
      minx = std::min(minx, x);
      maxx = std::max(maxx, x);
      miny = std::min(miny, y);
      maxy = std::max(maxy, y);
    }
  }
  if (out.pixels.empty()) return false;
  out.tight = Box{static_cast<double>(minx), static_cast<double>(miny),
                  static_cast<double>(maxx + 1), static_cast<double>(maxy + 1), class_id};
  return out.tight.width() >= 8 && out.tight.height() >= 8;
}

double box_iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

constexpr double kNoiseAmplitude = 0.1;
constexpr int kMinScale = 10;
constexpr int kMaxScale = 28;
constexpr double kHueJitter = 0.15;
constexpr double kMaxPairIou = 0.3;
constexpr int kPlacementAttempts = 100;

void nearest_resize(const std::vector<real>& src, int sh, int sw, std::vector<real>& dst,
                    int dh, int dw) {
  dst.resize(static_cast<size_t>(3) * dh * dw);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < dh; ++y)
      for (int x = 0; x < dw; ++x) {
        const int sy = std::min(sh - 1, y * sh / dh);
        const int sx = std::min(sw - 1, x * sw / dw);
        dst[(static_cast<size_t>(c) * dh + y) * dw + x] =
            src[(static_cast<size_t>(c) * sh + sy) * sw + sx];
      }
}

}  // namespace

bool ClassSplit::is_novel(int class_id) const {
  return std::find(novel_ids.begin(), novel_ids.end(), class_id) != novel_ids.end();
}

std::vector<int> ClassSplit::all_ids() const {
  std::vector<int> ids = base_ids;
  ids.insert(ids.end(), novel_ids.begin(), novel_ids.end());
  std::sort(ids.begin(), ids.end());
  return ids;
}

Scene render_scene(std::uint64_t seed, const std::vector<int>& classes, int canvas_h,
                   int canvas_w) {
  Rng rng(seed);
  std::vector<real> image(static_cast<size_t>(3) * canvas_h * canvas_w);
  for (auto& p : image) p = static_cast<real>(rng.uniform(0.0, kNoiseAmplitude));

  Scene scene;
  for (int class_id : classes) {
    Placement placement;
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      const int s = rng.uniform_int(kMinScale, std::min(kMaxScale, std::min(canvas_h, canvas_w)));
      const int x0 = rng.uniform_int(0, canvas_w - s);
      const int y0 = rng.uniform_int(0, canvas_h - s);
      const double hue = static_cast<double>(class_id) / kNumClasses +
                         rng.uniform(-kHueJitter, kHueJitter);
      const double sat = rng.uniform(0.65, 0.95);
      const double val = rng.uniform(0.7, 1.0);
      if (!try_place(class_id, x0, y0, s, canvas_w, canvas_h, placement)) continue;
      bool clash = false;
      for (const auto& b : scene.boxes) {
        if (box_iou(b, placement.tight) >= kMaxPairIou) clash = true;
      }
      if (clash) continue;
      const Rgb rgb = hsv_to_rgb(hue, sat, val);
      const double ch[3] = {rgb.r, rgb.g, rgb.b};
      for (const auto& [x, y] : placement.pixels) {
        for (int c = 0; c < 3; ++c)
          image[(static_cast<size_t>(c) * canvas_h + y) * canvas_w + x] =
              static_cast<real>(ch[c]);
      }
      scene.boxes.push_back(placement.tight);
      placed = true;
    }
    if (!placed) throw ValueError("placement exhausted");
  }
  scene.image = Tensor({3, canvas_h, canvas_w}, std::move(image));
  return scene;
}

Tensor make_support_mask(const Box& box, int canvas_h, int canvas_w) {
  if (!box.valid(canvas_w, canvas_h)) {
    throw ValueError("make_support_mask: invalid box");
  }
  std::vector<real> mask(static_cast<size_t>(canvas_h) * canvas_w, real(0));
  for (int y = 0; y < canvas_h; ++y)
    for (int x = 0; x < canvas_w; ++x) {
      if (x >= box.x0 && x < box.x1 && y >= box.y0 && y < box.y1)
        mask[static_cast<size_t>(y) * canvas_w + x] = real(1);
    }
  return Tensor({1, canvas_h, canvas_w}, std::move(mask));
}

SupportItem render_support(std::uint64_t seed, int class_id) {
  const Scene scene = render_scene(seed, {class_id});
  SupportItem item;
  item.image = scene.image;
  item.mask = make_support_mask(scene.boxes.at(0));
  item.class_id = class_id;
  return item;
}

QueryItem augment_query(const QueryItem& item, std::uint64_t seed) {
  Rng rng(seed);
  const int w = item.image.shape()[2], h = item.image.shape()[1];
  std::vector<real> img(item.image.values().begin(), item.image.values().end());
  std::vector<Box> boxes = item.boxes;

  if (rng.bernoulli(0.5)) {  // horizontal flip
    std::vector<real> flipped(img.size());
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          flipped[(static_cast<size_t>(c) * h + y) * w + x] =
              img[(static_cast<size_t>(c) * h + y) * w + (w - 1 - x)];
    img = std::move(flipped);
    for (auto& b : boxes) {
      const double x0 = w - b.x1, x1 = w - b.x0;
      b.x0 = x0;
      b.x1 = x1;
    }
  }

  if (rng.bernoulli(0.5)) {  // random crop containing every box, resized back
    double bx0 = w, by0 = h, bx1 = 0, by1 = 0;
    for (const auto& b : boxes) {
      bx0 = std::min(bx0, b.x0);
      by0 = std::min(by0, b.y0);
      bx1 = std::max(bx1, b.x1);
      by1 = std::max(by1, b.y1);
    }
    if (boxes.empty()) {
      bx0 = w;
      by0 = h;
      bx1 = 0;
      by1 = 0;
    }
    const int left = rng.uniform_int(0, std::max(0, std::min(8, static_cast<int>(bx0))));
    const int top = rng.uniform_int(0, std::max(0, std::min(8, static_cast<int>(by0))));
    const int right = rng.uniform_int(0, std::max(0, std::min(8, w - static_cast<int>(std::ceil(bx1)))));
    const int bottom = rng.uniform_int(0, std::max(0, std::min(8, h - static_cast<int>(std::ceil(by1)))));
    const int cw = w - left - right, ch = h - top - bottom;
    if (cw > 0 && ch > 0 && (left || top || right || bottom)) {
      std::vector<real> crop(static_cast<size_t>(3) * ch * cw);
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < ch; ++y)
          for (int x = 0; x < cw; ++x)
            crop[(static_cast<size_t>(c) * ch + y) * cw + x] =
                img[(static_cast<size_t>(c) * h + y + top) * w + x + left];
      std::vector<real> resized;
      nearest_resize(crop, ch, cw, resized, h, w);
      img = std::move(resized);
      for (auto& b : boxes) {
        b.x0 = std::floor((b.x0 - left) * w / static_cast<double>(cw));
        b.x1 = std::ceil((b.x1 - left) * w / static_cast<double>(cw));
        b.y0 = std::floor((b.y0 - top) * h / static_cast<double>(ch));
        b.y1 = std::ceil((b.y1 - top) * h / static_cast<double>(ch));
        b.x0 = std::max(0.0, b.x0);
        b.y0 = std::max(0.0, b.y0);
        b.x1 = std::min<double>(w, b.x1);
        b.y1 = std::min<double>(h, b.y1);
      }
    }
  }

  if (rng.bernoulli(0.5)) {  // random shrink, centered, noise-padded
    const double f = rng.uniform(0.8, 1.0);
    const int n = std::max(8, static_cast<int>(std::lround(w * f)));
    if (n < w) {
      std::vector<real> shrunk;
      nearest_resize(img, h, w, shrunk, n, n);
      std::vector<real> padded(static_cast<size_t>(3) * h * w);
      for (auto& p : padded) p = static_cast<real>(rng.uniform(0.0, kNoiseAmplitude));
      const int off = (w - n) / 2;
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < n; ++y)
          for (int x = 0; x < n; ++x)
            padded[(static_cast<size_t>(c) * h + y + off) * w + x + off] =
                shrunk[(static_cast<size_t>(c) * n + y) * n + x];
      img = std::move(padded);
      const double s = static_cast<double>(n) / w;
      for (auto& b : boxes) {
        b.x0 = std::floor(b.x0 * s) + off;
        b.x1 = std::max(b.x0 + 1, std::ceil(b.x1 * s) + off);
        b.y0 = std::floor(b.y0 * s) + off;
        b.y1 = std::max(b.y0 + 1, std::ceil(b.y1 * s) + off);
      }
    }
  }

  QueryItem out;
  out.image = Tensor({3, h, w}, std::move(img));
  out.boxes = std::move(boxes);
  return out;
}

Episode sample_episode(const EpisodeRequest& req, const ClassSplit& split) {
  if (req.support_per_class < 1) throw ValueError("sample_episode: K must be >= 1");
  Episode ep;
  std::vector<int> roster =
      req.phase == Phase::base ? split.base_ids : split.all_ids();
  std::sort(roster.begin(), roster.end());
  for (int c : roster)
    ep.class_roster[c] = split.is_novel(c) ? ClassRole::novel : ClassRole::base;

  for (int c : roster) {
    const bool frozen = req.phase == Phase::finetune && split.is_novel(c);
    if (frozen && req.support_per_class > kMaxNovelPool) {
      throw ValueError("sample_episode: K exceeds novel pool size (" +
                       std::to_string(kMaxNovelPool) + ")");
    }
    for (int j = 0; j < req.support_per_class; ++j) {
      const std::uint64_t s = frozen
          ? derive_seed(req.pool_seed, "novel_support", static_cast<std::uint64_t>(c), j)
          : derive_seed(req.seed, "support", static_cast<std::uint64_t>(c), j);
      ep.support.push_back(render_support(s, c));
    }
  }

  for (int q = 0; q < req.num_query; ++q) {
    Rng pick(derive_seed(req.seed, "query_classes", q));
    const int count = pick.uniform_int(1, 3);
    std::vector<int> classes;
    for (int i = 0; i < count; ++i)
      classes.push_back(roster[static_cast<size_t>(pick.uniform_int(0, static_cast<int>(roster.size()) - 1))]);
    const Scene scene = render_scene(derive_seed(req.seed, "query", q), classes);
    QueryItem item{scene.image, scene.boxes};
    if (req.augment) item = augment_query(item, derive_seed(req.seed, "augment", q));
    ep.query.push_back(std::move(item));
  }
  return ep;
}

ClassSplit default_split(int variant) {
  if (variant < 0 || variant > 2) throw ValueError("default_split: variant must be 0, 1 or 2");
  ClassSplit split;
  const int novel_pairs[3][2] = {{6, 7}, {4, 5}, {2, 3}};
  split.novel_ids = {novel_pairs[variant][0], novel_pairs[variant][1]};
  for (int c = 0; c < kNumClasses; ++c) {
    if (!split.is_novel(c)) split.base_ids.push_back(c);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Portable tensor files
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw ValueError("truncated tensor file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw ValueError("truncated tensor file");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValueError("cannot open " + path.string() + " for writing");
  os.write("CMET", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  for (real v : t.values()) put_f64(os, static_cast<double>(v));
  if (!os) throw ValueError("write failed on " + path.string());
}

Tensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValueError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CMET", 4) != 0)
    throw ValueError(path.string() + " is not a CMET tensor file");
  const std::uint32_t version = get_u32(is);
  if (version != 1) throw ValueError("unsupported tensor file version " + std::to_string(version));
  const std::uint32_t rank = get_u32(is);
  if (rank > 8) throw ValueError("implausible tensor rank " + std::to_string(rank));
  std::vector<int> shape;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape.push_back(static_cast<int>(get_u32(is)));
    n *= static_cast<std::size_t>(shape.back());
  }
  std::vector<real> values(n);
  for (auto& v : values) v = static_cast<real>(get_f64(is));
  return Tensor(std::move(shape), std::move(values));
}

void dump_episode(const Episode& episode, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  char name[64];
  for (size_t i = 0; i < episode.support.size(); ++i) {
    const auto& s = episode.support[i];
    std::snprintf(name, sizeof name, "support_%03zu_class%d_image.cmet", i, s.class_id);
    write_tensor_file(dir / name, s.image);
    std::snprintf(name, sizeof name, "support_%03zu_class%d_mask.cmet", i, s.class_id);
    write_tensor_file(dir / name, s.mask);
  }
  for (size_t q = 0; q < episode.query.size(); ++q) {
    std::snprintf(name, sizeof name, "query_%03zu_image.cmet", q);
    write_tensor_file(dir / name, episode.query[q].image);
    std::snprintf(name, sizeof name, "query_%03zu_boxes.txt", q);
    std::ofstream os(dir / name);
    for (const auto& b : episode.query[q].boxes)
      os << b.class_id << ' ' << b.x0 << ' ' << b.y0 << ' ' << b.x1 << ' ' << b.y1 << '\n';
  }
  std::ofstream roster(dir / "roster.txt");
  for (const auto& [c, role] : episode.class_roster)
    roster << c << ' ' << (role == ClassRole::novel ? "novel" : "base") << '\n';
}

}  // namespace cme
