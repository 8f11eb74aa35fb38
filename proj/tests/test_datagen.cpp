#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "selfshot/datagen.hpp"

using namespace selfshot;
using namespace selfshot::data;

namespace {

VideoSpec base_spec(std::int64_t frames = 4) {
  VideoSpec spec;
  spec.video_id = "test";
  spec.num_frames = frames;
  spec.height = 64;
  spec.width = 64;
  return spec;
}

InstanceSpec centered(int class_id, int scale) {
  InstanceSpec inst;
  inst.class_id = class_id;
  inst.scale_px = scale;
  inst.x0_16 = 32 * 16;
  inst.y0_16 = 32 * 16;
  return inst;
}

int circle_class() {
  for (int c = 0; c < kMaxClasses; ++c)
    if (class_spec(c).archetype == Archetype::Circle) return c;
  return 0;
}

int square_class() {
  for (int c = 0; c < kMaxClasses; ++c)
    if (class_spec(c).archetype == Archetype::Square) return c;
  return 0;
}

std::string tmp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("selfshot_test_" + name);
  std::filesystem::remove_all(p);
  return p.string();
}

DatasetConfig tiny_config() {
  DatasetConfig cfg;
  cfg.num_train_classes = 2;
  cfg.num_eval_classes = 2;
  cfg.train_videos_per_class = 3;
  cfg.eval_videos_per_class = 4;
  cfg.val_fraction = 0.5;
  cfg.height = 32;
  cfg.width = 32;
  cfg.frames_min = 4;
  cfg.frames_max = 6;
  cfg.instances_min = 1;
  cfg.instances_max = 2;
  cfg.scale_min = 8;
  cfg.scale_max = 12;
  return cfg;
}

}  // namespace

TEST_CASE("empty spec renders background-only frames") {
  auto [clip, gt] = generate_video(base_spec(4), 11);
  CHECK(clip.t == 4);
  CHECK(gt.num_instances() == 0);
  // two different frames of a static background are identical
  for (std::int64_t i = 0; i < 64 * 64 * 3; ++i) CHECK(clip.rgb[i] == clip.rgb[64 * 64 * 3 + i]);
}

TEST_CASE("static square box equals closed form") {
  VideoSpec spec = base_spec(3);
  spec.instances.push_back(centered(square_class(), 10));
  auto [clip, gt] = generate_video(spec, 3);
  for (std::int64_t t = 0; t < 3; ++t) {
    auto b = gt.boxes[0][static_cast<std::size_t>(t)];
    CHECK(b[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(b[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(b[2] == doctest::Approx(10.0 / 64.0).epsilon(1e-12));
    CHECK(b[3] == doctest::Approx(10.0 / 64.0).epsilon(1e-12));
  }
}

TEST_CASE("moving circle advances exactly 2/W per frame") {
  VideoSpec spec = base_spec(5);
  InstanceSpec inst = centered(circle_class(), 12);
  inst.x0_16 = 16 * 16;  // start left of center so the path stays inside
  inst.vx_16 = 2 * 16;   // 2 px/frame
  spec.instances.push_back(inst);
  auto [clip, gt] = generate_video(spec, 5);
  for (std::int64_t t = 0; t < 5; ++t) {
    auto b = gt.boxes[0][static_cast<std::size_t>(t)];
    CHECK(b[0] == doctest::Approx((16.0 + 2.0 * t) / 64.0).epsilon(1e-12));
    CHECK(b[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("out-of-bounds instance is rejected naming the instance") {
  VideoSpec spec = base_spec(2);
  InstanceSpec inst = centered(circle_class(), 16);
  inst.x0_16 = 2 * 16;  // circumradius pushes past the left edge
  spec.instances.push_back(inst);
  try {
    (void)generate_video(spec, 1);
    FAIL("expected rejection");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("instance 0") != std::string::npos);
  }
}

TEST_CASE("generate_video is deterministic in (spec, seed)") {
  VideoSpec spec = base_spec(4);
  spec.instances.push_back(centered(circle_class(), 14));
  auto [c1, g1] = generate_video(spec, 99);
  auto [c2, g2] = generate_video(spec, 99);
  CHECK(c1.rgb == c2.rgb);
  CHECK(g1.masks[0].m == g2.masks[0].m);
  auto [c3, g3] = generate_video(spec, 100);
  CHECK(c1.rgb != c3.rgb);  // background differs with the seed
}

TEST_CASE("tight-box property on random renders") {
  SeedStream rng(5, "tight");
  for (int trial = 0; trial < 10; ++trial) {
    VideoSpec spec = base_spec(3);
    for (int i = 0; i < 2; ++i) {
      InstanceSpec inst = centered(static_cast<int>(rng.next_int(0, 41)),
                                   static_cast<int>(rng.next_int(8, 16)));
      inst.x0_16 = rng.next_int(20 * 16, 44 * 16);
      inst.y0_16 = rng.next_int(20 * 16, 44 * 16);
      inst.rot_deg_per_frame = static_cast<int>(rng.next_int(0, 5));
      spec.instances.push_back(inst);
    }
    auto [clip, gt] = generate_video(spec, rng.next_u64());
    for (std::int64_t i = 0; i < gt.num_instances(); ++i) {
      for (std::int64_t t = 0; t < gt.t; ++t) {
        Box expect = box_from_mask(gt.masks[static_cast<std::size_t>(i)], t);
        Box got = gt.boxes[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
        for (int c = 0; c < 4; ++c) CHECK(expect[static_cast<std::size_t>(c)] == got[static_cast<std::size_t>(c)]);
      }
    }
  }
}

TEST_CASE("dataset generation, manifest round-trip and split hygiene") {
  std::string root = tmp_dir("ds1");
  DatasetManifest m = generate_dataset(tiny_config(), 7, root);
  CHECK(m.videos.size() == 2 * 3 + 2 * 4);
  CHECK(m.train_class_ids.size() == 2);
  CHECK(m.eval_class_ids.size() == 2);
  m.validate();

  // round-trip: load -> identical serialization
  DatasetManifest loaded = load_manifest(root);
  CHECK(manifest_to_json(m) == manifest_to_json(loaded));

  // split hygiene is assertable from the manifest alone
  DatasetManifest tampered = loaded;
  tampered.eval_class_ids.push_back(tampered.train_class_ids[0]);
  CHECK_THROWS_AS(tampered.validate(), ValidationError);

  // pixel determinism: regenerate into another root
  std::string root2 = tmp_dir("ds2");
  DatasetManifest m2 = generate_dataset(tiny_config(), 7, root2);
  CHECK(manifest_to_json(m).substr(manifest_to_json(m).find("class_table")) ==
        manifest_to_json(m2).substr(manifest_to_json(m2).find("class_table")));
  for (const auto& v : m.videos) {
    VideoClip a = load_video(m, v.spec.video_id);
    VideoClip b = load_video(m2, v.spec.video_id);
    CHECK(a.rgb == b.rgb);
  }

  // ground truth reloads consistently with generation
  auto gt = load_ground_truth(m, m.videos[0].spec.video_id);
  CHECK(gt.num_instances() == static_cast<std::int64_t>(m.videos[0].spec.instances.size()));

  std::filesystem::remove_all(root);
  std::filesystem::remove_all(root2);
}

TEST_CASE("benchmark-style class splits") {
  DatasetConfig vis_like = tiny_config();
  vis_like.num_train_classes = 30;
  vis_like.num_eval_classes = 10;
  vis_like.validate();
  DatasetConfig ovis_like = tiny_config();
  ovis_like.num_train_classes = 17;
  ovis_like.num_eval_classes = 8;
  ovis_like.validate();

  std::string root = tmp_dir("ds30");
  DatasetConfig small = vis_like;
  small.train_videos_per_class = 1;
  small.eval_videos_per_class = 1;
  small.val_fraction = 0.0;
  DatasetManifest m = generate_dataset(small, 3, root);
  CHECK(m.train_class_ids.size() == 30);
  CHECK(m.eval_class_ids.size() == 10);
  std::set<int> inter;
  for (int c : m.train_class_ids)
    for (int u : m.eval_class_ids)
      if (c == u) inter.insert(c);
  CHECK(inter.empty());
  std::filesystem::remove_all(root);
}

TEST_CASE("overlapping class split is rejected") {
  DatasetConfig cfg = tiny_config();
  cfg.num_train_classes = 41;
  cfg.num_eval_classes = 2;  // 43 > table size
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("episodes: oracle pairing, determinism, selfshot placeholders") {
  std::string root = tmp_dir("ds3");
  DatasetConfig cfg = tiny_config();
  cfg.eval_videos_per_class = 6;
  cfg.val_fraction = 0.0;
  DatasetManifest m = generate_dataset(cfg, 13, root);

  auto oracle = make_episodes(m, 2, EpisodeMode::Oracle, Split::Test, 5);
  CHECK(oracle.size() == m.split_ids(Split::Test).size());
  for (const auto& ep : oracle) {
    CHECK(ep.support_ids.size() == 2);
    const auto& qcls = m.video(ep.query_id).class_set;
    for (const auto& sid : ep.support_ids) {
      CHECK(sid != ep.query_id);
      const auto& scls = m.video(sid).class_set;
      bool shares = false;
      for (int c : qcls)
        if (std::find(scls.begin(), scls.end(), c) != scls.end()) shares = true;
      CHECK(shares);
    }
  }
  // fixed given the seed
  auto oracle2 = make_episodes(m, 2, EpisodeMode::Oracle, Split::Test, 5);
  CHECK(episodes_to_json(oracle, 5) == episodes_to_json(oracle2, 5));

  auto selfshot = make_episodes(m, 2, EpisodeMode::SelfShot, Split::Test, 5);
  for (const auto& ep : selfshot) CHECK(ep.support_ids.empty());

  // k exceeding same-class candidates names the class
  try {
    (void)make_episodes(m, 50, EpisodeMode::Oracle, Split::Test, 5);
    FAIL("expected rejection");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("oracle pairing") != std::string::npos);
    CHECK(std::string(e.what()).find("-") != std::string::npos);  // a class name like red-circle
  }

  // episode file round-trip
  std::string js = episodes_to_json(oracle, 5);
  auto parsed = episodes_from_json(js);
  CHECK(parsed.size() == oracle.size());
  CHECK(parsed[0].query_id == oracle[0].query_id);
  CHECK(parsed[0].support_ids == oracle[0].support_ids);
  CHECK(parsed[0].mode == EpisodeMode::Oracle);
  std::filesystem::remove_all(root);
}

TEST_CASE("mask pngs encode instance index + 1") {
  std::string root = tmp_dir("ds4");
  DatasetConfig cfg = tiny_config();
  cfg.instances_min = 2;
  cfg.instances_max = 2;
  DatasetManifest m = generate_dataset(cfg, 21, root);
  const auto& vid = m.videos[0];
  Image8 mask = read_png(root + "/masks/" + vid.spec.video_id + "/frame_0000.png");
  std::set<int> values;
  for (auto v : mask.px) values.insert(v);
  for (int v : values) CHECK(v <= static_cast<int>(vid.spec.instances.size()));
  std::filesystem::remove_all(root);
}
