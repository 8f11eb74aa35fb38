#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "selfshot/evalmod.hpp"

using namespace selfshot;
using namespace selfshot::eval;

namespace {

MaskSeq rect_mask(std::int64_t t, std::int64_t hw, std::int64_t x0, std::int64_t y0,
                  std::int64_t x1, std::int64_t y1) {
  MaskSeq m(t, hw, hw);
  for (std::int64_t f = 0; f < t; ++f)
    for (std::int64_t y = y0; y < y1; ++y)
      for (std::int64_t x = x0; x < x1; ++x) m.at(f, y, x) = 1;
  return m;
}

MaskSeq random_mask(std::int64_t t, std::int64_t hw, double p, SeedStream& rng) {
  MaskSeq m(t, hw, hw);
  for (auto& v : m.m) v = rng.next_double() < p ? 1 : 0;
  return m;
}

}  // namespace

TEST_CASE("video_iou unit values and symmetry") {
  MaskSeq a = rect_mask(3, 8, 0, 0, 4, 4);
  CHECK(video_iou(a, a) == 1.0);

  MaskSeq b = rect_mask(3, 8, 4, 4, 8, 8);
  CHECK(video_iou(a, b) == 0.0);

  // per frame |a| = |b| = 2 with overlap 1 -> 1/3 regardless of T
  for (std::int64_t T : {1, 4, 7}) {
    MaskSeq p(T, 8, 8), q(T, 8, 8);
    for (std::int64_t f = 0; f < T; ++f) {
      p.at(f, 0, 0) = 1;
      p.at(f, 0, 1) = 1;
      q.at(f, 0, 1) = 1;
      q.at(f, 0, 2) = 1;
    }
    CHECK(video_iou(p, q) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }

  // empty-union-empty convention
  MaskSeq e1(2, 8, 8), e2(2, 8, 8);
  CHECK(video_iou(e1, e2) == 1.0);

  SeedStream rng(3, "sym");
  MaskSeq r1 = random_mask(2, 8, 0.4, rng), r2 = random_mask(2, 8, 0.4, rng);
  CHECK(video_iou(r1, r2) == video_iou(r2, r1));

  MaskSeq wrong(2, 4, 4);
  CHECK_THROWS_AS((void)video_iou(r1, wrong), ValidationError);
}

TEST_CASE("average precision unit cases") {
  MaskSeq gt = rect_mask(2, 8, 1, 1, 5, 5);
  // single exact prediction, score 1 -> AP 1
  CHECK(average_precision({{1.0, gt}}, {gt}, 0.5) == 1.0);

  // a spurious higher-scored prediction halves AP: PR walk gives precision 1/2 at recall 1
  MaskSeq junk = rect_mask(2, 8, 6, 6, 8, 8);
  CHECK(average_precision({{0.9, gt}, {0.95, junk}}, {gt}, 0.5) == doctest::Approx(0.5));

  // empty predictions
  CHECK(average_precision({}, {gt}, 0.5) == 0.0);
  CHECK(average_precision({}, {}, 0.5) == 1.0);

  // AP in [0,1] and greedy never double-assigns a GT
  SeedStream rng(5, "ap");
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ScoredMask> preds;
    std::vector<MaskSeq> gts;
    for (int i = 0; i < 3; ++i) gts.push_back(random_mask(2, 8, 0.3, rng));
    for (int i = 0; i < 5; ++i) preds.push_back({rng.next_double(), random_mask(2, 8, 0.3, rng)});
    double ap = average_precision(preds, gts, 0.5);
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
  }
}

TEST_CASE("AP is non-increasing in the IoU threshold") {
  SeedStream rng(6, "sweep");
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<MaskSeq> gts;
    std::vector<ScoredMask> preds;
    for (int i = 0; i < 3; ++i) {
      std::int64_t x0 = rng.next_int(0, 3), y0 = rng.next_int(0, 3);
      MaskSeq g = rect_mask(2, 8, x0, y0, x0 + 4, y0 + 4);
      gts.push_back(g);
      // noisy copy as a prediction
      MaskSeq p = g;
      for (auto& v : p.m)
        if (rng.next_double() < 0.15) v ^= 1;
      preds.push_back({rng.next_double(), p});
    }
    double last = 2.0;
    for (double thresh : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      double ap = average_precision(preds, gts, thresh);
      CHECK(ap <= last + 1e-12);
      last = ap;
    }
  }
}

TEST_CASE("prediction threshold and upsampling") {
  Tensor logits({1, 2, 2}, {3.0, -2.0, 0.0, -0.1});
  MaskSeq m = prediction_to_mask(logits, 4, 4);
  CHECK(m.h == 4);
  CHECK(m.at(0, 0, 0) == 1);  // logit 3 -> sigmoid > 0.5
  CHECK(m.at(0, 0, 1) == 1);  // nearest upsample of the same cell
  CHECK(m.at(0, 0, 2) == 0);
  CHECK(m.at(0, 2, 0) == 1);  // logit 0 -> sigmoid exactly 0.5, counted as foreground
  CHECK(m.at(0, 2, 2) == 0);
}

TEST_CASE("evaluate_run end-to-end determinism and bucket keys") {
  auto root = (std::filesystem::temp_directory_path() / "selfshot_eval_run").string();
  std::filesystem::remove_all(root);
  data::DatasetConfig dcfg;
  dcfg.num_train_classes = 2;
  dcfg.num_eval_classes = 2;
  dcfg.train_videos_per_class = 2;
  dcfg.eval_videos_per_class = 4;
  dcfg.val_fraction = 0.0;
  dcfg.height = 32;
  dcfg.width = 32;
  dcfg.frames_min = 3;
  dcfg.frames_max = 4;
  dcfg.instances_min = 1;
  dcfg.instances_max = 3;
  dcfg.scale_min = 8;
  dcfg.scale_max = 10;
  auto m = data::generate_dataset(dcfg, 23, root);

  vistr::VisConfig vcfg;
  vcfg.dim = 24;
  vcfg.enc_layers = 1;
  vcfg.fuser_layers = 1;
  vcfg.dec_layers = 1;
  vcfg.heads = 4;
  vcfg.instances = 3;
  vcfg.frames = 3;
  vcfg.support_frames = 3;
  vcfg.input_h = 32;
  vcfg.input_w = 32;
  vcfg.mask_h = 8;
  vcfg.mask_w = 8;
  vcfg.backbone_width = 4;
  vcfg.mask_channels = 4;
  vistr::VisModel model(vcfg, 2);

  auto episodes = data::make_episodes(m, 1, data::EpisodeMode::Oracle, data::Split::Test, 9);
  auto r1 = evaluate_run(m, episodes, model, 0.5);
  auto r2 = evaluate_run(m, episodes, model, 0.5);
  CHECK(r1.to_json() == r2.to_json());
  CHECK(r1.map >= 0.0);
  CHECK(r1.map <= 1.0);
  CHECK(r1.episodes.size() == episodes.size());
  for (const auto& [key, v] : r1.instance_count_map) {
    CHECK((key == "1" || key == "2" || key == "3" || key == "4" || key == ">=5"));
    CHECK(v >= 0.0);
  }
  for (const auto& [key, v] : r1.class_count_map)
    CHECK((key == "1" || key == "2" || key == "3" || key == ">=4"));
  // mAP equals the mean of per-episode APs
  double acc = 0;
  for (const auto& e : r1.episodes) acc += e.ap;
  CHECK(r1.map == doctest::Approx(acc / r1.episodes.size()).epsilon(1e-12));
  // oracle supports share the query class: support precision is 1
  for (const auto& e : r1.episodes) CHECK(e.support_precision == 1.0);

  // report JSON round-trip
  auto parsed = EvalReport::from_json(r1.to_json());
  CHECK(parsed.map == r1.map);
  CHECK(parsed.episodes.size() == r1.episodes.size());

  std::filesystem::remove_all(root);
}

TEST_CASE("missing ground truth is rejected") {
  auto root = (std::filesystem::temp_directory_path() / "selfshot_eval_missing").string();
  std::filesystem::remove_all(root);
  data::DatasetConfig dcfg;
  dcfg.num_train_classes = 2;
  dcfg.num_eval_classes = 2;
  dcfg.train_videos_per_class = 2;
  dcfg.eval_videos_per_class = 2;
  dcfg.val_fraction = 0.0;
  dcfg.height = 32;
  dcfg.width = 32;
  dcfg.frames_min = 3;
  dcfg.frames_max = 3;
  dcfg.scale_min = 8;
  dcfg.scale_max = 10;
  auto m = data::generate_dataset(dcfg, 29, root);
  data::Episode ep;
  ep.query_id = "vid_99999";  // not in the manifest
  ep.support_ids = {m.videos[0].spec.video_id};
  ep.mode = data::EpisodeMode::Oracle;
  vistr::VisConfig vcfg;
  vcfg.dim = 12;
  vcfg.enc_layers = 0;
  vcfg.fuser_layers = 0;
  vcfg.dec_layers = 0;
  vcfg.heads = 2;
  vcfg.instances = 1;
  vcfg.frames = 2;
  vcfg.support_frames = 2;
  vcfg.input_h = 16;
  vcfg.input_w = 16;
  vcfg.mask_h = 2;
  vcfg.mask_w = 2;
  vcfg.backbone_width = 4;
  vcfg.mask_channels = 2;
  vistr::VisModel model(vcfg, 1);
  CHECK_THROWS_AS((void)evaluate_run(m, {ep}, model, 0.5), ValidationError);
  std::filesystem::remove_all(root);
}
