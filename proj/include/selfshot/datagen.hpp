#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "selfshot/common.hpp"
#include "selfshot/image.hpp"

namespace selfshot::data {

// ShapesVID: deterministic synthetic moving-shapes benchmark with pixel-exact
// instance masks on a textured-noise background. All rasterization decisions
// use fixed-point (1/16 px) arithmetic.

enum class Archetype : int { Circle = 0, Square, Triangle, Star, Cross, Ring };
constexpr int kNumArchetypes = 6;
constexpr int kNumColors = 7;
constexpr int kMaxClasses = kNumArchetypes * kNumColors;

struct ClassSpec {
  int id = 0;
  Archetype archetype = Archetype::Circle;
  std::array<std::uint8_t, 3> color{};
  std::string name;
};

ClassSpec class_spec(int class_id);

struct InstanceSpec {
  int class_id = 0;
  int scale_px = 12;           // side of the axis-aligned bounding box at rotation 0
  std::int64_t x0_16 = 0;      // start center, 1/16 px units
  std::int64_t y0_16 = 0;
  std::int64_t vx_16 = 0;      // velocity per frame, 1/16 px
  std::int64_t vy_16 = 0;
  int rot_deg_per_frame = 0;   // integer degrees
  int rot_phase_deg = 0;
};

struct VideoSpec {
  std::string video_id;
  std::int64_t num_frames = 1;
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::vector<InstanceSpec> instances;
};

// Normalized (cx, cy, w, h); all zero when the instance is fully occluded.
using Box = std::array<double, 4>;

struct GroundTruth {
  std::int64_t t = 0, h = 0, w = 0;
  std::vector<int> class_ids;             // per instance
  std::vector<MaskSeq> masks;             // per instance, visible-region masks
  std::vector<std::vector<Box>> boxes;    // [instance][frame]
  std::int64_t num_instances() const { return static_cast<std::int64_t>(class_ids.size()); }
};

// Tight normalized box of one frame of a binary mask; zeros when empty.
Box box_from_mask(const MaskSeq& mask, std::int64_t frame);

// Deterministic render; `seed` drives only the background texture.
// Throws ValidationError naming the offending instance if one does not fit at t=0.
std::pair<VideoClip, GroundTruth> generate_video(const VideoSpec& spec, std::uint64_t seed);

struct DatasetConfig {
  int num_train_classes = 30;
  int num_eval_classes = 10;
  int train_videos_per_class = 10;
  int eval_videos_per_class = 10;
  double val_fraction = 0.5;  // of eval-class videos; remainder goes to test
  std::int64_t height = 64;
  std::int64_t width = 64;
  int frames_min = 8;
  int frames_max = 10;
  int instances_min = 1;
  int instances_max = 3;
  int classes_per_video = 1;
  int scale_min = 14;
  int scale_max = 24;
  double speed_min = 0.5;  // px/frame
  double speed_max = 2.5;
  double rotate_prob = 0.25;
  int noise_cells = 8;

  void validate() const;
};

enum class Split { Train, Val, Test };
std::string split_name(Split s);
Split split_from_name(const std::string& s);

struct ManifestVideo {
  VideoSpec spec;
  Split split = Split::Train;
  std::vector<int> class_set;  // distinct class ids present
};

struct DatasetManifest {
  std::string root;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::int64_t height = 0, width = 0;
  std::vector<ClassSpec> class_table;
  std::vector<int> train_class_ids;  // seen classes S
  std::vector<int> eval_class_ids;   // unseen classes U; S and U disjoint
  std::vector<ManifestVideo> videos;

  const ManifestVideo& video(const std::string& id) const;
  bool has_video(const std::string& id) const;
  std::vector<std::string> split_ids(Split s) const;
  void validate() const;  // split hygiene and class-subset checks

 private:
  mutable std::map<std::string, std::size_t> index_;
  void build_index() const;
};

// Generates videos + masks + manifest.json under root. Rejects overlapping
// splits and class counts outside the table.
DatasetManifest generate_dataset(const DatasetConfig& config, std::uint64_t seed,
                                 const std::string& root);

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& json_text, const std::string& root);
DatasetManifest load_manifest(const std::string& root);

VideoClip load_video(const DatasetManifest& m, const std::string& id);
GroundTruth load_ground_truth(const DatasetManifest& m, const std::string& id);

// --- episodes ---------------------------------------------------------------

enum class EpisodeMode { Oracle, SelfShot, Semi, Random, ImageSupport };
std::string mode_name(EpisodeMode m);
EpisodeMode mode_from_name(const std::string& s);

struct Episode {
  std::string query_id;
  std::vector<std::string> support_ids;
  int k = 0;
  EpisodeMode mode = EpisodeMode::Oracle;
  Split split = Split::Test;
  int extra = 0;  // inference-time support increase, the k+(n) setting
};

// Fixed given (manifest, k, mode, split, seed). Self-shot episodes carry empty
// support lists; retrieval fills them at inference time. Oracle pairing fails
// naming the class when fewer than k same-class candidates exist.
std::vector<Episode> make_episodes(const DatasetManifest& m, int k, EpisodeMode mode, Split split,
                                   std::uint64_t seed);

std::string episodes_to_json(const std::vector<Episode>& eps, std::uint64_t seed);
std::vector<Episode> episodes_from_json(const std::string& json_text);
std::string episodes_filename(Split split, EpisodeMode mode, int k);

}  // namespace selfshot::data
