#include "selfshot/datagen.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

using ordered_json = nlohmann::ordered_json;

namespace selfshot::data {

namespace {

constexpr std::int64_t kFix = 16;  // fixed-point units per pixel

const char* kArchetypeNames[kNumArchetypes] = {"circle", "square", "triangle",
                                               "star",   "cross",  "ring"};

struct ColorDef {
  const char* name;
  std::array<std::uint8_t, 3> rgb;
};
const ColorDef kColors[kNumColors] = {
    {"red", {220, 45, 45}},     {"green", {50, 200, 70}},  {"blue", {55, 95, 230}},
    {"yellow", {230, 210, 55}}, {"magenta", {205, 60, 205}}, {"cyan", {60, 205, 210}},
    {"orange", {240, 145, 40}},
};

// sin/cos at integer degrees, built once
const double* sin_table() {
  static double table[360];
  static bool init = [] {
    for (int d = 0; d < 360; ++d) table[d] = std::sin(d * M_PI / 180.0);
    return true;
  }();
  (void)init;
  return table;
}

double sin_deg(int deg) { return sin_table()[((deg % 360) + 360) % 360]; }
double cos_deg(int deg) { return sin_deg(deg + 90); }

Archetype archetype_of_class(int class_id) {
  return static_cast<Archetype>((class_id / kNumColors) % kNumArchetypes);
}

std::int64_t circumradius16(Archetype a, int scale_px) {
  double half = static_cast<double>(scale_px) * kFix / 2.0;
  double r;
  switch (a) {
    case Archetype::Circle:
    case Archetype::Ring:
    case Archetype::Star:
      r = half;
      break;
    case Archetype::Square:
    case Archetype::Triangle:
      r = half * std::sqrt(2.0);
      break;
    case Archetype::Cross:
      r = half * std::sqrt(1.0 + 1.0 / 9.0);
      break;
    default:
      r = half * std::sqrt(2.0);
  }
  return static_cast<std::int64_t>(std::ceil(r)) + kFix;  // one pixel of slack
}

// Base polygon vertices in 1/16 units relative to the center, at rotation 0.
std::vector<std::array<double, 2>> base_polygon(Archetype a, int scale_px) {
  double h = static_cast<double>(scale_px) * kFix / 2.0;
  switch (a) {
    case Archetype::Square:
      return {{-h, -h}, {h, -h}, {h, h}, {-h, h}};
    case Archetype::Triangle:
      return {{0, -h}, {h, h}, {-h, h}};
    case Archetype::Cross: {
      double arm = h / 3.0;
      return {{-arm, -h}, {arm, -h}, {arm, -arm}, {h, -arm}, {h, arm},  {arm, arm},
              {arm, h},   {-arm, h}, {-arm, arm}, {-h, arm}, {-h, -arm}, {-arm, -arm}};
    }
    case Archetype::Star: {
      // five-point star: alternate outer/inner radius vertices
      double inner = h * 0.382;
      std::vector<std::array<double, 2>> v;
      for (int i = 0; i < 5; ++i) {
        int ao = -90 + i * 72;
        int ai = -90 + 36 + i * 72;
        v.push_back({h * cos_deg(ao), h * sin_deg(ao)});
        v.push_back({inner * cos_deg(ai), inner * sin_deg(ai)});
      }
      return v;
    }
    default:
      return {};
  }
}

std::vector<std::array<double, 2>> rotate_polygon(const std::vector<std::array<double, 2>>& poly,
                                                  int deg) {
  if (deg % 360 == 0) return poly;
  double c = cos_deg(deg), s = sin_deg(deg);
  std::vector<std::array<double, 2>> out(poly.size());
  for (std::size_t i = 0; i < poly.size(); ++i) {
    out[i][0] = poly[i][0] * c - poly[i][1] * s;
    out[i][1] = poly[i][0] * s + poly[i][1] * c;
  }
  return out;
}

// Even-odd rule; vertex coordinates are relative to the shape center.
bool point_in_polygon(const std::vector<std::array<double, 2>>& poly, double dx, double dy) {
  bool inside = false;
  std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    double yi = poly[i][1], yj = poly[j][1];
    if ((yi > dy) != (yj > dy)) {
      double xint = poly[i][0] + (dy - yi) * (poly[j][0] - poly[i][0]) / (yj - yi);
      if (dx < xint) inside = !inside;
    }
  }
  return inside;
}

struct ShapeAtFrame {
  Archetype arche;
  std::int64_t cx16, cy16;
  std::int64_t scale16;
  std::int64_t cr16;
  bool rotated;
  std::vector<std::array<double, 2>> poly;  // rotated polygon, if polygon-based

  bool contains(std::int64_t px16, std::int64_t py16) const {
    std::int64_t dx = px16 - cx16, dy = py16 - cy16;
    std::int64_t half = scale16 / 2;
    switch (arche) {
      case Archetype::Circle:
        return dx * dx + dy * dy < half * half;
      case Archetype::Ring: {
        std::int64_t inner = scale16 / 4;
        std::int64_t d2 = dx * dx + dy * dy;
        return d2 < half * half && d2 >= inner * inner;
      }
      case Archetype::Square:
        if (!rotated) return std::max(std::llabs(dx), std::llabs(dy)) < half;
        [[fallthrough]];
      default:
        return point_in_polygon(poly, static_cast<double>(dx), static_cast<double>(dy));
    }
  }
};

ShapeAtFrame shape_at(const InstanceSpec& inst, std::int64_t t) {
  ShapeAtFrame s;
  s.arche = archetype_of_class(inst.class_id);
  s.cx16 = inst.x0_16 + inst.vx_16 * t;
  s.cy16 = inst.y0_16 + inst.vy_16 * t;
  s.scale16 = static_cast<std::int64_t>(inst.scale_px) * kFix;
  s.cr16 = circumradius16(s.arche, inst.scale_px);
  int deg = inst.rot_phase_deg + inst.rot_deg_per_frame * static_cast<int>(t);
  s.rotated = (deg % 360) != 0;
  if (s.arche != Archetype::Circle && s.arche != Archetype::Ring &&
      !(s.arche == Archetype::Square && !s.rotated)) {
    s.poly = rotate_polygon(base_polygon(s.arche, inst.scale_px), deg);
  }
  return s;
}

// static textured-noise background, integer bilinear between coarse cells
Image8 render_background(std::int64_t h, std::int64_t w, int cells, std::uint64_t seed) {
  SeedStream rng(seed, "background");
  int g = std::max(cells, 2);
  std::vector<int> grid(static_cast<std::size_t>((g + 1) * (g + 1)));
  for (auto& v : grid) v = static_cast<int>(rng.next_int(64, 168));
  Image8 img(h, w, 3);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      // cell coordinates in 1/256 fixed point
      std::int64_t fy = y * 256 * g / h;
      std::int64_t fx = x * 256 * g / w;
      std::int64_t cy = fy / 256, cx = fx / 256;
      std::int64_t ry = fy % 256, rx = fx % 256;
      std::int64_t v00 = grid[static_cast<std::size_t>(cy * (g + 1) + cx)];
      std::int64_t v01 = grid[static_cast<std::size_t>(cy * (g + 1) + cx + 1)];
      std::int64_t v10 = grid[static_cast<std::size_t>((cy + 1) * (g + 1) + cx)];
      std::int64_t v11 = grid[static_cast<std::size_t>((cy + 1) * (g + 1) + cx + 1)];
      std::int64_t top = v00 * (256 - rx) + v01 * rx;
      std::int64_t bot = v10 * (256 - rx) + v11 * rx;
      std::int64_t v = (top * (256 - ry) + bot * ry) / (256 * 256);
      // per-pixel speckle, +-6 levels
      std::uint64_t hsh = fnv1a64(&y, sizeof(y), seed ^ 0x9e3779b97f4a7c15ull);
      hsh = fnv1a64(&x, sizeof(x), hsh);
      v += static_cast<std::int64_t>(hsh % 13) - 6;
      auto b = static_cast<std::uint8_t>(std::clamp<std::int64_t>(v, 0, 255));
      img.at(y, x, 0) = b;
      img.at(y, x, 1) = b;
      img.at(y, x, 2) = b;
    }
  }
  return img;
}

}  // namespace

ClassSpec class_spec(int class_id) {
  SS_CHECK(class_id >= 0 && class_id < kMaxClasses, "class id out of range");
  ClassSpec c;
  c.id = class_id;
  int color = class_id % kNumColors;
  c.archetype = archetype_of_class(class_id);
  c.color = kColors[color].rgb;
  c.name = std::string(kColors[color].name) + "-" +
           kArchetypeNames[static_cast<int>(c.archetype)];
  return c;
}

Box box_from_mask(const MaskSeq& mask, std::int64_t frame) {
  std::int64_t x0 = mask.w, x1 = -1, y0 = mask.h, y1 = -1;
  for (std::int64_t y = 0; y < mask.h; ++y)
    for (std::int64_t x = 0; x < mask.w; ++x)
      if (mask.at(frame, y, x)) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) return {0.0, 0.0, 0.0, 0.0};
  double W = static_cast<double>(mask.w), H = static_cast<double>(mask.h);
  Box b;
  b[0] = static_cast<double>(x0 + x1 + 1) / (2.0 * W);
  b[1] = static_cast<double>(y0 + y1 + 1) / (2.0 * H);
  b[2] = static_cast<double>(x1 - x0 + 1) / W;
  b[3] = static_cast<double>(y1 - y0 + 1) / H;
  return b;
}

std::pair<VideoClip, GroundTruth> generate_video(const VideoSpec& spec, std::uint64_t seed) {
  SS_CHECK(spec.num_frames >= 1, "video must have at least one frame: " + spec.video_id);
  SS_CHECK(spec.height > 0 && spec.width > 0, "empty frame geometry: " + spec.video_id);
  SS_CHECK(spec.instances.size() <= 254, "too many instances: " + spec.video_id);
  std::int64_t W16 = spec.width * kFix, H16 = spec.height * kFix;
  for (std::size_t i = 0; i < spec.instances.size(); ++i) {
    const auto& inst = spec.instances[i];
    SS_CHECK(inst.class_id >= 0 && inst.class_id < kMaxClasses,
             "instance " + std::to_string(i) + " has unknown class in " + spec.video_id);
    std::int64_t cr = circumradius16(archetype_of_class(inst.class_id), inst.scale_px);
    bool fits = inst.x0_16 - cr >= 0 && inst.x0_16 + cr <= W16 && inst.y0_16 - cr >= 0 &&
                inst.y0_16 + cr <= H16;
    SS_CHECK(fits, "instance " + std::to_string(i) + " out of bounds at t=0 in " + spec.video_id);
  }

  std::int64_t T = spec.num_frames, H = spec.height, W = spec.width;
  auto n = static_cast<std::int64_t>(spec.instances.size());
  Image8 bg = render_background(H, W, 8, seed);

  VideoClip clip(T, H, W);
  GroundTruth gt;
  gt.t = T;
  gt.h = H;
  gt.w = W;
  for (const auto& inst : spec.instances) gt.class_ids.push_back(inst.class_id);
  gt.masks.assign(static_cast<std::size_t>(n), MaskSeq(T, H, W));
  gt.boxes.assign(static_cast<std::size_t>(n), std::vector<Box>(static_cast<std::size_t>(T)));

  std::vector<std::uint8_t> idxmap(static_cast<std::size_t>(H * W));
  for (std::int64_t t = 0; t < T; ++t) {
    std::fill(idxmap.begin(), idxmap.end(), 0);
    for (std::int64_t i = 0; i < n; ++i) {
      ShapeAtFrame s = shape_at(spec.instances[static_cast<std::size_t>(i)], t);
      std::int64_t xlo = std::max<std::int64_t>(0, (s.cx16 - s.cr16) / kFix - 1);
      std::int64_t xhi = std::min<std::int64_t>(W - 1, (s.cx16 + s.cr16) / kFix + 1);
      std::int64_t ylo = std::max<std::int64_t>(0, (s.cy16 - s.cr16) / kFix - 1);
      std::int64_t yhi = std::min<std::int64_t>(H - 1, (s.cy16 + s.cr16) / kFix + 1);
      for (std::int64_t y = ylo; y <= yhi; ++y) {
        std::int64_t py16 = y * kFix + kFix / 2;
        for (std::int64_t x = xlo; x <= xhi; ++x) {
          std::int64_t px16 = x * kFix + kFix / 2;
          if (s.contains(px16, py16))
            idxmap[static_cast<std::size_t>(y * W + x)] = static_cast<std::uint8_t>(i + 1);
        }
      }
    }
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        std::uint8_t idx = idxmap[static_cast<std::size_t>(y * W + x)];
        if (idx == 0) {
          clip.at(t, y, x, 0) = bg.at(y, x, 0);
          clip.at(t, y, x, 1) = bg.at(y, x, 1);
          clip.at(t, y, x, 2) = bg.at(y, x, 2);
        } else {
          auto cs = class_spec(spec.instances[static_cast<std::size_t>(idx - 1)].class_id);
          clip.at(t, y, x, 0) = cs.color[0];
          clip.at(t, y, x, 1) = cs.color[1];
          clip.at(t, y, x, 2) = cs.color[2];
          gt.masks[static_cast<std::size_t>(idx - 1)].at(t, y, x) = 1;
        }
      }
    }
    for (std::int64_t i = 0; i < n; ++i)
      gt.boxes[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] =
          box_from_mask(gt.masks[static_cast<std::size_t>(i)], t);
  }
  return {std::move(clip), std::move(gt)};
}

void DatasetConfig::validate() const {
  SS_CHECK(num_train_classes >= 2, "need at least 2 train classes");
  SS_CHECK(num_eval_classes >= 2, "need at least 2 val/test classes");
  SS_CHECK(num_train_classes + num_eval_classes <= kMaxClasses,
           "class table supports at most " + std::to_string(kMaxClasses) + " classes");
  SS_CHECK(train_videos_per_class >= 1 && eval_videos_per_class >= 1, "videos per class must be >= 1");
  SS_CHECK(val_fraction >= 0.0 && val_fraction <= 1.0, "val_fraction must be in [0,1]");
  SS_CHECK(height >= 16 && width >= 16, "frames must be at least 16x16");
  SS_CHECK(frames_min >= 1 && frames_max >= frames_min, "bad frame count range");
  SS_CHECK(instances_min >= 0 && instances_max >= instances_min, "bad instance count range");
  SS_CHECK(classes_per_video >= 1, "classes_per_video must be >= 1");
  SS_CHECK(scale_min >= 4 && scale_max >= scale_min, "bad scale range");
  SS_CHECK(scale_max * 2 < std::min(height, width), "shapes too large for the frame");
  SS_CHECK(speed_min >= 0.0 && speed_max >= speed_min, "bad speed range");
  SS_CHECK(rotate_prob >= 0.0 && rotate_prob <= 1.0, "rotate_prob must be in [0,1]");
}

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
  }
}

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  fail_validation("unknown split: " + s);
}

std::string mode_name(EpisodeMode m) {
  switch (m) {
    case EpisodeMode::Oracle: return "oracle";
    case EpisodeMode::SelfShot: return "selfshot";
    case EpisodeMode::Semi: return "semi";
    case EpisodeMode::Random: return "random";
    default: return "image-support";
  }
}

EpisodeMode mode_from_name(const std::string& s) {
  if (s == "oracle") return EpisodeMode::Oracle;
  if (s == "selfshot") return EpisodeMode::SelfShot;
  if (s == "semi") return EpisodeMode::Semi;
  if (s == "random") return EpisodeMode::Random;
  if (s == "image-support") return EpisodeMode::ImageSupport;
  fail_validation("unknown episode mode: " + s);
}

void DatasetManifest::build_index() const {
  if (index_.size() == videos.size()) return;
  index_.clear();
  for (std::size_t i = 0; i < videos.size(); ++i) index_[videos[i].spec.video_id] = i;
}

const ManifestVideo& DatasetManifest::video(const std::string& id) const {
  build_index();
  auto it = index_.find(id);
  SS_CHECK(it != index_.end(), "unknown video id: " + id);
  return videos[it->second];
}

bool DatasetManifest::has_video(const std::string& id) const {
  build_index();
  return index_.count(id) > 0;
}

std::vector<std::string> DatasetManifest::split_ids(Split s) const {
  std::vector<std::string> out;
  for (const auto& v : videos)
    if (v.split == s) out.push_back(v.spec.video_id);
  return out;
}

void DatasetManifest::validate() const {
  std::set<int> train_set(train_class_ids.begin(), train_class_ids.end());
  std::set<int> eval_set(eval_class_ids.begin(), eval_class_ids.end());
  for (int c : train_set)
    SS_CHECK(eval_set.count(c) == 0, "class " + std::to_string(c) + " appears in both splits");
  std::set<std::string> seen_ids;
  for (const auto& v : videos) {
    SS_CHECK(seen_ids.insert(v.spec.video_id).second,
             "duplicate video id: " + v.spec.video_id);
    const auto& allowed = (v.split == Split::Train) ? train_set : eval_set;
    for (int c : v.class_set)
      SS_CHECK(allowed.count(c) == 1, "video " + v.spec.video_id + " uses class " +
                                          std::to_string(c) + " outside its split's class set");
  }
}

namespace {

std::string frame_name(std::int64_t t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%04lld.png", static_cast<long long>(t));
  return buf;
}

// Sampled instance set for one video; retries keep every instance >=50%
// visible in >=80% of frames.
VideoSpec sample_video_spec(const DatasetConfig& cfg, const std::string& id,
                            const std::vector<int>& class_pool, SeedStream& rng) {
  VideoSpec spec;
  spec.video_id = id;
  spec.height = cfg.height;
  spec.width = cfg.width;
  spec.num_frames = rng.next_int(cfg.frames_min, cfg.frames_max);
  int n_inst = static_cast<int>(rng.next_int(cfg.instances_min, cfg.instances_max));
  if (n_inst == 0) return spec;

  // classes present in this video
  int n_cls = std::min<int>(cfg.classes_per_video, static_cast<int>(class_pool.size()));
  std::vector<int> pool = class_pool;
  rng.shuffle(pool);
  std::vector<int> video_classes(pool.begin(), pool.begin() + n_cls);

  std::int64_t W16 = cfg.width * kFix, H16 = cfg.height * kFix;
  std::int64_t Tm1 = spec.num_frames - 1;
  for (int i = 0; i < n_inst; ++i) {
    InstanceSpec inst;
    inst.class_id = video_classes[static_cast<std::size_t>(rng.next_int(0, n_cls - 1))];
    inst.scale_px = static_cast<int>(rng.next_int(cfg.scale_min, cfg.scale_max));
    std::int64_t cr = circumradius16(archetype_of_class(inst.class_id), inst.scale_px);
    // speed in 1/16 px per frame, direction uniform
    double speed = cfg.speed_min + (cfg.speed_max - cfg.speed_min) * rng.next_double();
    int dir = static_cast<int>(rng.next_int(0, 359));
    inst.vx_16 = static_cast<std::int64_t>(std::llround(speed * kFix * cos_deg(dir)));
    inst.vy_16 = static_cast<std::int64_t>(std::llround(speed * kFix * sin_deg(dir)));
    // keep the whole linear path inside the frame; shrink velocity if needed
    for (int attempt = 0; attempt < 16; ++attempt) {
      std::int64_t xlo = cr + std::max<std::int64_t>(0, -inst.vx_16 * Tm1);
      std::int64_t xhi = (W16 - cr) - std::max<std::int64_t>(0, inst.vx_16 * Tm1);
      std::int64_t ylo = cr + std::max<std::int64_t>(0, -inst.vy_16 * Tm1);
      std::int64_t yhi = (H16 - cr) - std::max<std::int64_t>(0, inst.vy_16 * Tm1);
      if (xlo <= xhi && ylo <= yhi) {
        inst.x0_16 = rng.next_int(xlo, xhi);
        inst.y0_16 = rng.next_int(ylo, yhi);
        break;
      }
      inst.vx_16 /= 2;
      inst.vy_16 /= 2;
    }
    if (rng.next_double() < cfg.rotate_prob) {
      inst.rot_deg_per_frame = static_cast<int>(rng.next_int(1, 7)) *
                               (rng.next_int(0, 1) == 0 ? 1 : -1);
      inst.rot_phase_deg = static_cast<int>(rng.next_int(0, 359));
    }
    spec.instances.push_back(inst);
  }
  return spec;
}

bool visibility_ok(const VideoSpec& spec, const GroundTruth& gt) {
  for (std::size_t i = 0; i < spec.instances.size(); ++i) {
    // amodal pixel count: the shape rendered alone
    std::int64_t ok_frames = 0;
    for (std::int64_t t = 0; t < gt.t; ++t) {
      ShapeAtFrame s = shape_at(spec.instances[i], t);
      std::int64_t amodal = 0;
      std::int64_t xlo = std::max<std::int64_t>(0, (s.cx16 - s.cr16) / kFix - 1);
      std::int64_t xhi = std::min<std::int64_t>(gt.w - 1, (s.cx16 + s.cr16) / kFix + 1);
      std::int64_t ylo = std::max<std::int64_t>(0, (s.cy16 - s.cr16) / kFix - 1);
      std::int64_t yhi = std::min<std::int64_t>(gt.h - 1, (s.cy16 + s.cr16) / kFix + 1);
      for (std::int64_t y = ylo; y <= yhi; ++y)
        for (std::int64_t x = xlo; x <= xhi; ++x)
          if (s.contains(x * kFix + kFix / 2, y * kFix + kFix / 2)) ++amodal;
      std::int64_t visible = 0;
      for (std::int64_t y = 0; y < gt.h; ++y)
        for (std::int64_t x = 0; x < gt.w; ++x) visible += gt.masks[i].at(t, y, x);
      if (amodal > 0 && visible * 2 >= amodal) ++ok_frames;
    }
    if (ok_frames * 5 < gt.t * 4) return false;  // >= 80% of frames
  }
  return true;
}

}  // namespace

DatasetManifest generate_dataset(const DatasetConfig& cfg, std::uint64_t seed,
                                 const std::string& root) {
  cfg.validate();
  DatasetManifest m;
  m.root = root;
  m.seed = seed;
  m.height = cfg.height;
  m.width = cfg.width;

  int total_classes = cfg.num_train_classes + cfg.num_eval_classes;
  std::vector<int> class_ids(static_cast<std::size_t>(total_classes));
  for (int i = 0; i < total_classes; ++i) class_ids[static_cast<std::size_t>(i)] = i;
  SeedStream cls_rng(seed, "class-split");
  cls_rng.shuffle(class_ids);
  m.train_class_ids.assign(class_ids.begin(), class_ids.begin() + cfg.num_train_classes);
  m.eval_class_ids.assign(class_ids.begin() + cfg.num_train_classes, class_ids.end());
  std::sort(m.train_class_ids.begin(), m.train_class_ids.end());
  std::sort(m.eval_class_ids.begin(), m.eval_class_ids.end());
  for (int c = 0; c < total_classes; ++c) m.class_table.push_back(class_spec(c));

  ensure_dir(root);
  ensure_dir(root + "/videos");
  ensure_dir(root + "/masks");

  int global_index = 0;
  auto emit_class_videos = [&](int class_id, bool is_train) {
    int count = is_train ? cfg.train_videos_per_class : cfg.eval_videos_per_class;
    int n_val = is_train ? 0 : static_cast<int>(std::lround(cfg.val_fraction * count));
    const std::vector<int>& pool = is_train ? m.train_class_ids : m.eval_class_ids;
    for (int v = 0; v < count; ++v) {
      char idbuf[32];
      std::snprintf(idbuf, sizeof(idbuf), "vid_%05d", global_index);
      std::string id = idbuf;
      SeedStream vid_rng(seed, "video." + id);
      // the sampled primary class comes first in the pool handed to the sampler
      std::vector<int> class_pool{class_id};
      for (int c : pool)
        if (c != class_id) class_pool.push_back(c);
      if (cfg.classes_per_video == 1) class_pool = {class_id};

      VideoSpec spec;
      GroundTruth gt;
      VideoClip clip;
      for (int attempt = 0; attempt < 8; ++attempt) {
        spec = sample_video_spec(cfg, id, class_pool, vid_rng);
        // force the primary class onto the first instance for oracle pairing
        if (!spec.instances.empty()) spec.instances[0].class_id = class_id;
        auto [c2, g2] = generate_video(spec, vid_rng.next_u64());
        clip = std::move(c2);
        gt = std::move(g2);
        if (visibility_ok(spec, gt)) break;
      }
      ManifestVideo mv;
      mv.spec = spec;
      mv.split = is_train ? Split::Train : (v < n_val ? Split::Val : Split::Test);
      std::set<int> cls;
      for (const auto& inst : spec.instances) cls.insert(inst.class_id);
      mv.class_set.assign(cls.begin(), cls.end());
      m.videos.push_back(mv);

      std::string vdir = root + "/videos/" + id;
      std::string mdir = root + "/masks/" + id;
      ensure_dir(vdir);
      ensure_dir(mdir);
      for (std::int64_t t = 0; t < spec.num_frames; ++t) {
        write_png(vdir + "/" + frame_name(t), clip.frame(t));
        Image8 mask(m.height, m.width, 1);
        for (std::size_t i = 0; i < gt.masks.size(); ++i)
          for (std::int64_t y = 0; y < m.height; ++y)
            for (std::int64_t x = 0; x < m.width; ++x)
              if (gt.masks[i].at(t, y, x)) mask.at(y, x, 0) = static_cast<std::uint8_t>(i + 1);
        write_png(mdir + "/" + frame_name(t), mask);
      }
      ++global_index;
    }
  };

  for (int c : m.train_class_ids) emit_class_videos(c, true);
  for (int c : m.eval_class_ids) emit_class_videos(c, false);

  // config hash commits the generation parameters
  std::string cfg_repr =
      std::to_string(cfg.num_train_classes) + "," + std::to_string(cfg.num_eval_classes) + "," +
      std::to_string(cfg.train_videos_per_class) + "," + std::to_string(cfg.eval_videos_per_class) +
      "," + std::to_string(cfg.val_fraction) + "," + std::to_string(cfg.height) + "," +
      std::to_string(cfg.width) + "," + std::to_string(cfg.frames_min) + "," +
      std::to_string(cfg.frames_max) + "," + std::to_string(cfg.instances_min) + "," +
      std::to_string(cfg.instances_max) + "," + std::to_string(cfg.classes_per_video) + "," +
      std::to_string(cfg.scale_min) + "," + std::to_string(cfg.scale_max) + "," +
      std::to_string(cfg.speed_min) + "," + std::to_string(cfg.speed_max) + "," +
      std::to_string(cfg.rotate_prob) + "," + std::to_string(cfg.noise_cells);
  m.config_hash = to_hex(fnv1a64(cfg_repr));

  m.validate();
  write_text_file(root + "/manifest.json", manifest_to_json(m));
  return m;
}

std::string manifest_to_json(const DatasetManifest& m) {
  ordered_json j;
  j["schema_version"] = 1;
  j["benchmark"] = "shapesvid";
  j["seed"] = m.seed;
  j["config_hash"] = m.config_hash;
  j["height"] = m.height;
  j["width"] = m.width;
  j["class_table"] = ordered_json::array();
  for (const auto& c : m.class_table) {
    ordered_json cj;
    cj["id"] = c.id;
    cj["archetype"] = kArchetypeNames[static_cast<int>(c.archetype)];
    cj["color"] = {c.color[0], c.color[1], c.color[2]};
    cj["name"] = c.name;
    j["class_table"].push_back(cj);
  }
  j["train_classes"] = m.train_class_ids;
  j["eval_classes"] = m.eval_class_ids;
  j["videos"] = ordered_json::array();
  for (const auto& v : m.videos) {
    ordered_json vj;
    vj["id"] = v.spec.video_id;
    vj["split"] = split_name(v.split);
    vj["frames"] = v.spec.num_frames;
    vj["classes"] = v.class_set;
    vj["instances"] = ordered_json::array();
    for (const auto& inst : v.spec.instances) {
      ordered_json ij;
      ij["class"] = inst.class_id;
      ij["scale"] = inst.scale_px;
      ij["x0_16"] = inst.x0_16;
      ij["y0_16"] = inst.y0_16;
      ij["vx_16"] = inst.vx_16;
      ij["vy_16"] = inst.vy_16;
      ij["rot"] = inst.rot_deg_per_frame;
      ij["phase"] = inst.rot_phase_deg;
      vj["instances"].push_back(ij);
    }
    j["videos"].push_back(vj);
  }
  return j.dump(1);
}

DatasetManifest manifest_from_json(const std::string& json_text, const std::string& root) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const std::exception& e) {
    fail_validation(std::string("manifest parse error: ") + e.what());
  }
  DatasetManifest m;
  m.root = root;
  SS_CHECK(j.value("schema_version", 0) == 1, "unsupported manifest schema");
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config_hash = j.value("config_hash", "");
  m.height = j.at("height").get<std::int64_t>();
  m.width = j.at("width").get<std::int64_t>();
  for (const auto& cj : j.at("class_table")) {
    m.class_table.push_back(class_spec(cj.at("id").get<int>()));
  }
  m.train_class_ids = j.at("train_classes").get<std::vector<int>>();
  m.eval_class_ids = j.at("eval_classes").get<std::vector<int>>();
  for (const auto& vj : j.at("videos")) {
    ManifestVideo v;
    v.spec.video_id = vj.at("id").get<std::string>();
    v.split = split_from_name(vj.at("split").get<std::string>());
    v.spec.num_frames = vj.at("frames").get<std::int64_t>();
    v.spec.height = m.height;
    v.spec.width = m.width;
    v.class_set = vj.at("classes").get<std::vector<int>>();
    for (const auto& ij : vj.at("instances")) {
      InstanceSpec inst;
      inst.class_id = ij.at("class").get<int>();
      inst.scale_px = ij.at("scale").get<int>();
      inst.x0_16 = ij.at("x0_16").get<std::int64_t>();
      inst.y0_16 = ij.at("y0_16").get<std::int64_t>();
      inst.vx_16 = ij.at("vx_16").get<std::int64_t>();
      inst.vy_16 = ij.at("vy_16").get<std::int64_t>();
      inst.rot_deg_per_frame = ij.at("rot").get<int>();
      inst.rot_phase_deg = ij.at("phase").get<int>();
      v.spec.instances.push_back(inst);
    }
    m.videos.push_back(std::move(v));
  }
  m.validate();
  return m;
}

DatasetManifest load_manifest(const std::string& root) {
  return manifest_from_json(read_text_file(root + "/manifest.json"), root);
}

VideoClip load_video(const DatasetManifest& m, const std::string& id) {
  const auto& v = m.video(id);
  VideoClip clip(v.spec.num_frames, m.height, m.width);
  for (std::int64_t t = 0; t < v.spec.num_frames; ++t) {
    Image8 img = read_png(m.root + "/videos/" + id + "/" + frame_name(t));
    SS_CHECK(img.h == m.height && img.w == m.width && img.c == 3,
             "frame geometry mismatch in " + id);
    std::copy(img.px.begin(), img.px.end(), clip.rgb.begin() + t * m.height * m.width * 3);
  }
  return clip;
}

GroundTruth load_ground_truth(const DatasetManifest& m, const std::string& id) {
  const auto& v = m.video(id);
  GroundTruth gt;
  gt.t = v.spec.num_frames;
  gt.h = m.height;
  gt.w = m.width;
  auto n = static_cast<std::int64_t>(v.spec.instances.size());
  for (const auto& inst : v.spec.instances) gt.class_ids.push_back(inst.class_id);
  gt.masks.assign(static_cast<std::size_t>(n), MaskSeq(gt.t, gt.h, gt.w));
  gt.boxes.assign(static_cast<std::size_t>(n), std::vector<Box>(static_cast<std::size_t>(gt.t)));
  for (std::int64_t t = 0; t < gt.t; ++t) {
    Image8 mask = read_png(m.root + "/masks/" + id + "/" + frame_name(t));
    SS_CHECK(mask.h == gt.h && mask.w == gt.w && mask.c == 1, "mask geometry mismatch in " + id);
    for (std::int64_t y = 0; y < gt.h; ++y)
      for (std::int64_t x = 0; x < gt.w; ++x) {
        int idx = mask.at(y, x, 0);
        if (idx > 0) {
          SS_CHECK(idx <= n, "mask index out of range in " + id);
          gt.masks[static_cast<std::size_t>(idx - 1)].at(t, y, x) = 1;
        }
      }
    for (std::int64_t i = 0; i < n; ++i)
      gt.boxes[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] =
          box_from_mask(gt.masks[static_cast<std::size_t>(i)], t);
  }
  return gt;
}

std::vector<Episode> make_episodes(const DatasetManifest& m, int k, EpisodeMode mode, Split split,
                                   std::uint64_t seed) {
  SS_CHECK(k >= 1, "k must be >= 1");
  std::vector<std::string> ids = m.split_ids(split);
  SS_CHECK(!ids.empty(), "no videos in split " + split_name(split));
  std::vector<Episode> out;
  out.reserve(ids.size());
  for (const auto& qid : ids) {
    Episode ep;
    ep.query_id = qid;
    ep.k = k;
    ep.mode = mode;
    ep.split = split;
    if (mode == EpisodeMode::SelfShot) {
      out.push_back(std::move(ep));
      continue;
    }
    SeedStream rng(seed, "episode." + split_name(split) + "." + mode_name(mode) + "." + qid);
    std::vector<std::string> candidates;
    if (mode == EpisodeMode::Random) {
      for (const auto& id : ids)
        if (id != qid) candidates.push_back(id);
    } else {  // oracle-paired modes: oracle, semi, image-support
      const auto& qcls = m.video(qid).class_set;
      for (const auto& id : ids) {
        if (id == qid) continue;
        const auto& scls = m.video(id).class_set;
        bool shares = false;
        for (int c : qcls)
          if (std::find(scls.begin(), scls.end(), c) != scls.end()) shares = true;
        if (shares) candidates.push_back(id);
      }
      if (static_cast<int>(candidates.size()) < k) {
        std::string cls_names;
        for (int c : qcls) {
          if (!cls_names.empty()) cls_names += ",";
          cls_names += class_spec(c).name;
        }
        fail_validation("oracle pairing: query " + qid + " (classes " + cls_names + ") has only " +
                        std::to_string(candidates.size()) + " same-class candidates, need " +
                        std::to_string(k));
      }
    }
    SS_CHECK(static_cast<int>(candidates.size()) >= k,
             "not enough support candidates for query " + qid);
    rng.shuffle(candidates);
    ep.support_ids.assign(candidates.begin(), candidates.begin() + k);
    out.push_back(std::move(ep));
  }
  return out;
}

std::string episodes_to_json(const std::vector<Episode>& eps, std::uint64_t seed) {
  ordered_json j;
  j["schema_version"] = 1;
  j["seed"] = seed;
  if (!eps.empty()) {
    j["split"] = split_name(eps[0].split);
    j["mode"] = mode_name(eps[0].mode);
    j["k"] = eps[0].k;
  }
  j["episodes"] = ordered_json::array();
  for (const auto& ep : eps) {
    ordered_json e;
    e["query"] = ep.query_id;
    e["supports"] = ep.support_ids;
    e["extra"] = ep.extra;
    j["episodes"].push_back(e);
  }
  return j.dump(1);
}

std::vector<Episode> episodes_from_json(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const std::exception& e) {
    fail_validation(std::string("episode file parse error: ") + e.what());
  }
  SS_CHECK(j.value("schema_version", 0) == 1, "unsupported episode schema");
  std::vector<Episode> out;
  Split split = split_from_name(j.value("split", "test"));
  EpisodeMode mode = mode_from_name(j.value("mode", "oracle"));
  int k = j.value("k", 1);
  for (const auto& e : j.at("episodes")) {
    Episode ep;
    ep.query_id = e.at("query").get<std::string>();
    ep.support_ids = e.at("supports").get<std::vector<std::string>>();
    ep.extra = e.value("extra", 0);
    ep.k = k;
    ep.mode = mode;
    ep.split = split;
    out.push_back(std::move(ep));
  }
  return out;
}

std::string episodes_filename(Split split, EpisodeMode mode, int k) {
  return "episodes_" + split_name(split) + "_" + mode_name(mode) + "_k" + std::to_string(k) +
         ".json";
}

}  // namespace selfshot::data
