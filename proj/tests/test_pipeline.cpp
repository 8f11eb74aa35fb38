#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "selfshot/pipeline.hpp"

using namespace selfshot;

namespace {

std::string tmp_root(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("selfshot_pipe_" + name);
  std::filesystem::remove_all(p);
  return p.string();
}

data::DatasetConfig small_data() {
  data::DatasetConfig d;
  d.num_train_classes = 2;
  d.num_eval_classes = 2;
  d.train_videos_per_class = 3;
  d.eval_videos_per_class = 4;
  d.val_fraction = 0.0;
  d.height = 32;
  d.width = 32;
  d.frames_min = 3;
  d.frames_max = 4;
  d.instances_min = 1;
  d.instances_max = 2;
  d.scale_min = 8;
  d.scale_max = 12;
  return d;
}

config::Config tiny_config() {
  config::Config cfg;
  cfg.data.gen = small_data();
  cfg.vis.cfg.dim = 24;
  cfg.vis.cfg.enc_layers = 1;
  cfg.vis.cfg.fuser_layers = 1;
  cfg.vis.cfg.dec_layers = 1;
  cfg.vis.cfg.heads = 4;
  cfg.vis.cfg.instances = 2;
  cfg.vis.cfg.frames = 3;
  cfg.vis.cfg.support_frames = 3;
  cfg.vis.cfg.input_h = 32;
  cfg.vis.cfg.input_w = 32;
  cfg.vis.cfg.mask_h = 8;
  cfg.vis.cfg.mask_w = 8;
  cfg.vis.cfg.backbone_width = 4;
  cfg.vis.cfg.mask_channels = 4;
  cfg.train.epochs = 2;
  cfg.train.episodes_per_epoch = 4;
  cfg.train.k_supports = 1;
  cfg.train.grad_accum = 2;
  cfg.train.lr_transformer = 3e-4;
  cfg.train.lr_backbone = 3e-5;
  return cfg;
}

embed::EmbedConfig tiny_embed() {
  embed::EmbedConfig e;
  e.dim = 16;
  e.base_width = 4;
  e.crop_frames = 2;
  e.crop_h = 16;
  e.crop_w = 16;
  e.crops_per_video = 2;
  e.batch_videos = 2;
  e.epochs = 1;
  return e;
}

}  // namespace

TEST_CASE("config parser: defaults, unknown keys, bad values") {
  std::string ini = R"(
# comment
[data]
root = some/where
train_classes = 4

[eval]
pool_sizes = 10, 20, 30
)";
  auto cfg = config::parse_config(ini);
  CHECK(cfg.data.root == "some/where");
  CHECK(cfg.data.gen.num_train_classes == 4);
  CHECK(cfg.data.gen.num_eval_classes == 10);  // default
  CHECK(cfg.eval.pool_sizes == std::vector<int>{10, 20, 30});
  CHECK(cfg.retrieve.k == 5);  // paper-default support count
  CHECK(cfg.eval.iou_thresh == 0.5);
  CHECK(!cfg.config_hash.empty());

  CHECK_THROWS_AS((void)config::parse_config("[data]\nnot_a_key = 1\n"), ValidationError);
  CHECK_THROWS_AS((void)config::parse_config("[nope]\nk = 1\n"), ValidationError);
  CHECK_THROWS_AS((void)config::parse_config("[data]\nheight = abc\n"), ValidationError);
  CHECK_THROWS_AS((void)config::parse_config("[data]\nheight = 32\nheight = 64\n"),
                  ValidationError);
  CHECK_THROWS_AS((void)config::parse_config("stray = 1\n"), ValidationError);

  // same text -> same hash; different text -> different hash
  CHECK(config::parse_config(ini).config_hash == cfg.config_hash);
  CHECK(config::parse_config(ini + "\n[train]\nepochs = 2\n").config_hash != cfg.config_hash);
}

TEST_CASE("resolve_episode modes and seed totality") {
  std::string root = tmp_root("resolve");
  auto m = data::generate_dataset(small_data(), 11, root);
  pipeline::ResolveContext ctx;
  ctx.manifest = &m;
  ctx.pool_ids = m.split_ids(data::Split::Test);

  auto oracle = pipeline::resolve_episode(ctx, ctx.pool_ids[0], data::EpisodeMode::Oracle, 2, 0, 0, 5);
  CHECK(oracle.support_ids.size() == 2);
  const auto& qcls = m.video(ctx.pool_ids[0]).class_set;
  for (const auto& sid : oracle.support_ids) {
    const auto& scls = m.video(sid).class_set;
    bool shares = false;
    for (int c : qcls)
      if (std::find(scls.begin(), scls.end(), c) != scls.end()) shares = true;
    CHECK(shares);
  }
  // reruns with the same seed reproduce exactly; different seeds resample
  auto oracle2 = pipeline::resolve_episode(ctx, ctx.pool_ids[0], data::EpisodeMode::Oracle, 2, 0, 0, 5);
  CHECK(oracle.support_ids == oracle2.support_ids);

  auto random_ep = pipeline::resolve_episode(ctx, ctx.pool_ids[0], data::EpisodeMode::Random, 3, 0, 0, 5);
  CHECK(random_ep.support_ids.size() == 3);
  for (const auto& sid : random_ep.support_ids) CHECK(sid != ctx.pool_ids[0]);

  // selfshot without an index is rejected
  CHECK_THROWS_AS(
      (void)pipeline::resolve_episode(ctx, ctx.pool_ids[0], data::EpisodeMode::SelfShot, 2, 0, 0, 5),
      ValidationError);
  std::filesystem::remove_all(root);
}

TEST_CASE("label isolation: poisoned labels cannot change self-shot supports") {
  std::string root = tmp_root("poison");
  auto m = data::generate_dataset(small_data(), 31, root);
  embed::Embedder emb(tiny_embed(), 3);
  auto pool = m.split_ids(data::Split::Test);
  retrieve::EmbeddingIndex index(emb.config().dim, "fp");
  for (const auto& id : pool) index.append(id, emb.encode(data::load_video(m, id)), "fp");

  pipeline::ResolveContext ctx;
  ctx.manifest = &m;
  ctx.pool_ids = pool;
  ctx.index = &index;
  ctx.embedder = &emb;
  auto clean = pipeline::resolve_episode(ctx, pool[0], data::EpisodeMode::SelfShot, 3, 0, 0, 7);

  // poison every class label in a manifest copy; pixels on disk are untouched
  data::DatasetManifest poisoned = m;
  for (auto& v : poisoned.videos) {
    for (auto& inst : v.spec.instances) inst.class_id = (inst.class_id + 1) % 40;
    v.class_set.clear();
    for (const auto& inst : v.spec.instances) v.class_set.push_back(inst.class_id);
  }
  pipeline::ResolveContext poisoned_ctx = ctx;
  poisoned_ctx.manifest = &poisoned;
  auto dirty = pipeline::resolve_episode(poisoned_ctx, pool[0], data::EpisodeMode::SelfShot, 3, 0, 0, 7);
  CHECK(clean.support_ids == dirty.support_ids);  // bit-exact
  std::filesystem::remove_all(root);
}

TEST_CASE("train_vis decreases the probe loss and logs components") {
  std::string root = tmp_root("trainvis");
  auto cfg = tiny_config();
  auto m = data::generate_dataset(cfg.data.gen, 13, root);
  vistr::VisModel model(cfg.vis.cfg, 5);
  nn::AdamW opt = pipeline::make_vis_optimizer(model, cfg.train);
  std::vector<std::string> lines;
  auto result = pipeline::train_vis(m, model, opt, cfg, 17, "", {}, 0, -1,
                                    [&](const std::string& l) { lines.push_back(l); });
  CHECK(result.steps == 2 * 4);
  CHECK(result.probe_loss_final < result.probe_loss_initial);
  CHECK(lines.size() == 8);
  CHECK(lines[0].find("\"cls\"") != std::string::npos);
  CHECK(lines[0].find("\"box\"") != std::string::npos);
  CHECK(lines[0].find("\"mask\"") != std::string::npos);
  std::filesystem::remove_all(root);
}

TEST_CASE("training resume reproduces the next-step loss") {
  std::string root = tmp_root("resume");
  auto cfg = tiny_config();
  cfg.train.epochs = 2;
  cfg.train.episodes_per_epoch = 3;
  auto m = data::generate_dataset(cfg.data.gen, 19, root);
  std::string state_path = root + "/state.ckpt";

  // run A: two epochs straight through, recording epoch-1 losses
  std::vector<double> a_losses;
  {
    vistr::VisModel model(cfg.vis.cfg, 5);
    nn::AdamW opt = pipeline::make_vis_optimizer(model, cfg.train);
    pipeline::train_vis(m, model, opt, cfg, 23, "", {}, 0, 1);
    pipeline::save_train_state(state_path, model, opt);
    pipeline::train_vis(m, model, opt, cfg, 23, "", {}, 1, 2,
                        [&](const std::string& l) {
                          auto pos = l.find("\"loss\":");
                          a_losses.push_back(std::stod(l.substr(pos + 7)));
                        });
  }
  // run B: fresh process state, resume from the checkpoint
  std::vector<double> b_losses;
  {
    vistr::VisModel model(cfg.vis.cfg, 999);  // different init, overwritten by the state
    nn::AdamW opt = pipeline::make_vis_optimizer(model, cfg.train);
    pipeline::load_train_state(state_path, model, opt);
    pipeline::train_vis(m, model, opt, cfg, 23, "", {}, 1, 2,
                        [&](const std::string& l) {
                          auto pos = l.find("\"loss\":");
                          b_losses.push_back(std::stod(l.substr(pos + 7)));
                        });
  }
  REQUIRE(!a_losses.empty());
  REQUIRE(a_losses.size() == b_losses.size());
  for (std::size_t i = 0; i < a_losses.size(); ++i)
    CHECK(std::fabs(a_losses[i] - b_losses[i]) <= 1e-6);
  std::filesystem::remove_all(root);
}

TEST_CASE("run_experiment covers the grid and records failures gracefully") {
  std::string root = tmp_root("grid");
  auto cfg = tiny_config();
  cfg.data.gen.eval_videos_per_class = 5;
  cfg.retrieve.k = 2;
  cfg.eval.max_queries = 3;
  cfg.eval.extras = {1};
  cfg.eval.pool_sizes = {4};
  cfg.eval.semi_oracle_max = 1;
  cfg.eval.semi_self_max = 1;
  cfg.eval.semi_max_total = 2;
  auto m = data::generate_dataset(cfg.data.gen, 41, root);
  vistr::VisModel model(cfg.vis.cfg, 3);
  embed::Embedder emb(tiny_embed(), 4);
  auto pool = m.split_ids(data::Split::Test);
  retrieve::EmbeddingIndex index(emb.config().dim, "fp");
  for (const auto& id : pool) index.append(id, emb.encode(data::load_video(m, id)), "fp");

  auto result = pipeline::run_experiment(m, cfg, model, emb, index, 4, root + "/exp");
  CHECK(result.cells.size() >= 7);  // 3 modes + 1 extra + semi cells + pool cell
  int ok = 0;
  for (const auto& c : result.cells) {
    if (!c.failed) ++ok;
    CHECK(!c.name.empty());
  }
  CHECK(ok == static_cast<int>(result.cells.size()));
  CHECK(file_exists(root + "/exp/summary.json"));
  CHECK(result.summary_json.find("oracle_minus_random_map") != std::string::npos);
  std::filesystem::remove_all(root);
}

TEST_CASE("fuser activation maps have the declared geometry") {
  auto cfg = tiny_config();
  vistr::VisModel model(cfg.vis.cfg, 31);
  SeedStream rng(1, "act");
  Tensor q({cfg.vis.cfg.frames, 3, 32, 32});
  Tensor s({cfg.vis.cfg.support_frames, 3, 32, 32});
  for (std::int64_t i = 0; i < q.numel(); ++i) q[i] = rng.next_double() - 0.5;
  for (std::int64_t i = 0; i < s.numel(); ++i) s[i] = rng.next_double() - 0.5;
  auto [before, after] = pipeline::fuser_activation_maps(model, q, {s});
  CHECK(before.shape() == Tensor::Shape{3, 4, 4});
  CHECK(after.shape() == Tensor::Shape{3, 4, 4});
  CHECK(before.all_finite());
  CHECK(after.all_finite());
}
