#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "selfshot/datagen.hpp"
#include "selfshot/embed.hpp"

using namespace selfshot;
using namespace selfshot::embed;
using ad::Var;

namespace {

EmbedConfig tiny_cfg() {
  EmbedConfig cfg;
  cfg.dim = 16;
  cfg.base_width = 4;
  cfg.crop_frames = 2;
  cfg.crop_h = 16;
  cfg.crop_w = 16;
  cfg.crops_per_video = 2;
  cfg.batch_videos = 2;
  cfg.epochs = 2;
  cfg.queue_capacity = 16;
  return cfg;
}

Var unit_vec(std::vector<double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  for (double& x : v) x /= std::sqrt(s);
  return ad::constant(Tensor({static_cast<std::int64_t>(v.size())}, std::move(v)));
}

VideoClip noise_clip(std::int64_t t, std::int64_t hw, std::uint64_t seed) {
  SeedStream rng(seed, "clip");
  VideoClip clip(t, hw, hw);
  for (auto& b : clip.rgb) b = static_cast<std::uint8_t>(rng.next_int(0, 255));
  return clip;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("encode is unit-norm, deterministic and rejects empty clips") {
  Embedder emb(tiny_cfg(), 42);
  VideoClip clip = noise_clip(5, 24, 1);  // resized internally to crop geometry
  Tensor e1 = emb.encode(clip);
  Tensor e2 = emb.encode(clip);
  CHECK(e1.numel() == 16);
  double n = 0;
  for (std::int64_t i = 0; i < 16; ++i) n += e1[i] * e1[i];
  CHECK(std::fabs(std::sqrt(n) - 1.0) <= 1e-6);
  CHECK(e1.vec() == e2.vec());

  VideoClip empty;
  CHECK_THROWS_AS((void)emb.encode(empty), ValidationError);

  // student and teacher start equal, so both sides agree initially
  Tensor et = emb.encode(clip, EncoderSide::Teacher);
  for (std::int64_t i = 0; i < 16; ++i) CHECK(et[i] == doctest::Approx(e1[i]).epsilon(1e-12));
}

TEST_CASE("ema_update closed form") {
  nn::ParamStore student, teacher;
  student.add("w", Tensor({2, 2}, 0.0));
  teacher.add("w", Tensor({2, 2}, 1.0));
  ema_update(student, teacher, 0.99);
  CHECK(teacher.get("w")->val[0] == doctest::Approx(0.99).epsilon(1e-15));

  nn::ParamStore t2;
  t2.add("w", Tensor({2, 2}, 1.0));
  ema_update(student, t2, 1.0);
  CHECK(t2.get("w")->val[0] == 1.0);  // fixed point

  nn::ParamStore t3;
  t3.add("w", Tensor({2, 2}, 1.0));
  ema_update(student, t3, 0.0);
  CHECK(t3.get("w")->val[0] == 0.0);  // exact copy

  nn::ParamStore bad;
  bad.add("w", Tensor({3}, 1.0));
  CHECK_THROWS_AS(ema_update(student, bad, 0.5), ValidationError);
}

TEST_CASE("nce_loss symmetric cases and independent recomputation") {
  // all similarities equal, 1 positive, 3 negatives -> log 4
  Var a = unit_vec({1, 0, 0});
  Var p = unit_vec({0, 1, 0});
  std::vector<Var> negs{unit_vec({0, 0, 1}), unit_vec({0, -1, 0}), unit_vec({0, 0, -1})};
  // all orthogonal to the anchor: every similarity is 0
  double v = ad::scalar_value(nce_loss(a, {p}, negs, 0.07));
  CHECK(v == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  // P positives, N negatives, equal sims -> log((P+N)/P)
  std::vector<Var> pos{p, unit_vec({0, 0, 1})};
  std::vector<Var> neg2{unit_vec({0, -1, 0}), unit_vec({0, 0, -1}), unit_vec({0, 1, 0})};
  double v2 = ad::scalar_value(nce_loss(a, pos, neg2, 0.5));
  CHECK(v2 == doctest::Approx(std::log(5.0 / 2.0)).epsilon(1e-12));

  // a specific instance against a direct double-precision re-evaluation
  SeedStream rng(9, "nce");
  auto rand_unit = [&](int d) {
    std::vector<double> v(static_cast<std::size_t>(d));
    for (auto& x : v) x = rng.next_normal();
    return v;
  };
  for (int trial = 0; trial < 20; ++trial) {
    auto av = rand_unit(8);
    auto pv = rand_unit(8);
    auto n1 = rand_unit(8), n2 = rand_unit(8);
    auto normed = [](std::vector<double> v) {
      double s = 0;
      for (double x : v) s += x * x;
      for (double& x : v) x /= std::sqrt(s);
      return v;
    };
    av = normed(av);
    pv = normed(pv);
    n1 = normed(n1);
    n2 = normed(n2);
    double tau = 0.2;
    auto dotv = [](const std::vector<double>& x, const std::vector<double>& y) {
      double s = 0;
      for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
      return s;
    };
    double ep = std::exp(dotv(av, pv) / tau);
    double den = ep + std::exp(dotv(av, n1) / tau) + std::exp(dotv(av, n2) / tau);
    double expected = -std::log(ep / den);
    Var va = ad::constant(Tensor({8}, std::vector<double>(av)));
    double got = ad::scalar_value(nce_loss(va, {ad::constant(Tensor({8}, std::vector<double>(pv)))},
                                           {ad::constant(Tensor({8}, std::vector<double>(n1))),
                                            ad::constant(Tensor({8}, std::vector<double>(n2)))},
                                           tau));
    CHECK(got == doctest::Approx(expected).epsilon(1e-10));
    CHECK(got >= 0.0);
  }

  CHECK_THROWS_AS((void)nce_loss(a, {p}, negs, 0.0), ValidationError);
  CHECK_THROWS_AS((void)nce_loss(a, {}, negs, 0.1), ValidationError);
}

TEST_CASE("nce and rank losses are set-permutation invariant") {
  SeedStream rng(10, "perm");
  auto rand_vec = [&]() {
    Tensor t({6});
    for (std::int64_t i = 0; i < 6; ++i) t[i] = rng.next_normal();
    return ad::constant(t);
  };
  Var a = rand_vec();
  std::vector<Var> pos{rand_vec(), rand_vec(), rand_vec()};
  std::vector<Var> neg{rand_vec(), rand_vec(), rand_vec(), rand_vec()};
  std::vector<Var> pos_p{pos[2], pos[0], pos[1]};
  std::vector<Var> neg_p{neg[3], neg[1], neg[0], neg[2]};
  CHECK(std::fabs(ad::scalar_value(nce_loss(a, pos, neg, 0.1)) -
                  ad::scalar_value(nce_loss(a, pos_p, neg_p, 0.1))) <= 1e-6);
  CHECK(std::fabs(ad::scalar_value(rank_loss(a, pos, neg)) -
                  ad::scalar_value(rank_loss(a, pos_p, neg_p))) <= 1e-6);
}

TEST_CASE("rank_R unit examples") {
  Var a = ad::constant(Tensor({2}, {1.0, 0.0}));
  Var b = ad::constant(Tensor({2}, {0.0, 1.0}));
  // C = {b}: no competitors
  CHECK(ad::scalar_value(rank_R(a, b, {b})) == doctest::Approx(1.0).epsilon(1e-15));

  // one competitor with equal cosine -> 1.5
  Var c_same = ad::constant(Tensor({2}, {0.0, 2.0}));  // same direction as b
  CHECK(ad::scalar_value(rank_R(a, b, {b, c_same})) == doctest::Approx(1.5).epsilon(1e-12));

  // a=(1,0), b=(0,1), c=(1,0): d = 1, R = 1 + 1/(1+e^-0.5)
  Var c = ad::constant(Tensor({2}, {1.0, 0.0}));
  double expected = 1.0 + 1.0 / (1.0 + std::exp(-0.5));
  CHECK(ad::scalar_value(rank_R(a, b, {b, c})) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(std::fabs(ad::scalar_value(rank_R(a, b, {b, c})) - 1.6225) < 1e-4);
}

TEST_CASE("rank_R scale invariance and bounds") {
  SeedStream rng(11, "scale");
  for (int trial = 0; trial < 10; ++trial) {
    auto rand_vec = [&]() {
      Tensor t({5});
      for (std::int64_t i = 0; i < 5; ++i) t[i] = rng.next_normal();
      return t;
    };
    Tensor at = rand_vec();
    Var b = ad::constant(rand_vec());
    std::vector<Var> C{b, ad::constant(rand_vec()), ad::constant(rand_vec()),
                       ad::constant(rand_vec())};
    double r1 = ad::scalar_value(rank_R(ad::constant(at), b, C));
    // power-of-two scaling is exact in floating point
    Tensor scaled = at;
    for (std::int64_t i = 0; i < 5; ++i) scaled[i] *= 4.0;
    double r2 = ad::scalar_value(rank_R(ad::constant(scaled), b, C));
    CHECK(r1 == r2);
    // arbitrary positive scaling within double rounding
    Tensor scaled2 = at;
    for (std::int64_t i = 0; i < 5; ++i) scaled2[i] *= 0.7319;
    CHECK(ad::scalar_value(rank_R(ad::constant(scaled2), b, C)) ==
          doctest::Approx(r1).epsilon(1e-12));
    // bounds: 1 <= R <= |C \ {b}| + 1
    CHECK(r1 >= 1.0);
    CHECK(r1 <= 4.0);
  }
}

TEST_CASE("rank_loss unit values, saturation and gradients") {
  // 1 positive / 1 negative, equidistant: loss = log(1 + sigmoid(0)) = log 1.5
  Var a = ad::constant(Tensor({3}, {1.0, 0.0, 0.0}));
  Var p = ad::constant(Tensor({3}, {0.0, 1.0, 0.0}));
  Var n = ad::constant(Tensor({3}, {0.0, 0.0, 1.0}));
  CHECK(ad::scalar_value(rank_loss(a, {p}, {n})) ==
        doctest::Approx(std::log(1.5)).epsilon(1e-12));

  // positives far ahead of negatives: loss -> 0+
  Var p_close = ad::constant(Tensor({3}, {0.999, 0.04, 0.0}));
  Var n_far = ad::constant(Tensor({3}, {-1.0, 0.0, 0.0}));
  double sat = ad::scalar_value(rank_loss(a, {p_close}, {n_far}));
  CHECK(sat > 0.0);
  CHECK(sat < 0.1);
  // matches the closed form sum_p log(1 + sigma((cos(a,n)-cos(a,p))/2))
  double cos_p = 0.999 / std::sqrt(0.999 * 0.999 + 0.04 * 0.04);
  double expected = std::log(1.0 + sigmoid_ref((-1.0 - cos_p) / 2.0));
  CHECK(sat == doctest::Approx(expected).epsilon(1e-10));

  CHECK_THROWS_AS((void)rank_loss(a, {}, {n}), ValidationError);

  // finite-difference gradients on random instances
  SeedStream rng(12, "rankfd");
  for (int trial = 0; trial < 20; ++trial) {
    auto mk = [&]() {
      Tensor t({4});
      for (std::int64_t i = 0; i < 4; ++i) t[i] = rng.next_normal();
      return ad::leaf(t);
    };
    Var anchor = mk();
    std::vector<Var> pos{mk(), mk()};
    std::vector<Var> neg{mk(), mk(), mk()};
    std::vector<Var> leaves{anchor};
    leaves.insert(leaves.end(), pos.begin(), pos.end());
    leaves.insert(leaves.end(), neg.begin(), neg.end());
    auto fn = [&]() { return rank_loss(anchor, pos, neg); };
    for (auto& l : leaves) l->grad = Tensor();
    ad::backward(fn());
    for (auto& l : leaves) {
      for (std::int64_t i = 0; i < 4; ++i) {
        double analytic = l->grad.numel() ? l->grad[i] : 0.0;
        double numeric =
            ad::finite_difference(l->val, i, 1e-6, [&]() { return ad::scalar_value(fn()); });
        double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-3});
        CHECK(std::fabs(analytic - numeric) / denom <= 1e-4);
      }
    }
  }
}

TEST_CASE("negative queue holds capacity and FIFO order") {
  NegativeQueue q(3);
  for (int i = 0; i < 5; ++i) q.push(Tensor({1}, {static_cast<double>(i)}));
  CHECK(q.size() == 3);
  CHECK(q.entries()[0][0] == 2.0);  // oldest surviving
  CHECK(q.entries()[2][0] == 4.0);  // newest
}

TEST_CASE("training step leaves teacher equal to the EMA closed form") {
  EmbedConfig cfg = tiny_cfg();
  Embedder emb(cfg, 7);
  // snapshot before
  std::vector<Tensor> teacher_before, student_after;
  for (const auto& [name, v] : emb.teacher().params().entries()) teacher_before.push_back(v->val);

  std::filesystem::path root = std::filesystem::temp_directory_path() / "selfshot_embed_step";
  std::filesystem::remove_all(root);
  data::DatasetConfig dcfg;
  dcfg.num_train_classes = 2;
  dcfg.num_eval_classes = 2;
  dcfg.train_videos_per_class = 2;
  dcfg.eval_videos_per_class = 1;
  dcfg.height = 32;
  dcfg.width = 32;
  dcfg.frames_min = 3;
  dcfg.frames_max = 4;
  dcfg.scale_min = 8;
  dcfg.scale_max = 10;
  auto m = data::generate_dataset(dcfg, 5, root.string());
  auto ids = m.split_ids(data::Split::Train);

  EmbedConfig one_step = cfg;
  one_step.epochs = 1;
  one_step.batch_videos = 2;
  Embedder emb2(one_step, 7);
  for (const auto& [name, v] : emb2.teacher().params().entries()) {
    (void)name;
  }
  std::vector<Tensor> t_before;
  for (const auto& [name, v] : emb2.teacher().params().entries()) t_before.push_back(v->val);
  auto result = train_embedder(
      emb2, {ids[0], ids[1]}, [&](const std::string& id) { return data::load_video(m, id); }, 3);
  CHECK(result.steps == 1);
  const auto& s_entries = emb2.student().params().entries();
  const auto& t_entries = emb2.teacher().params().entries();
  for (std::size_t i = 0; i < s_entries.size(); ++i) {
    const Tensor& tb = t_before[i];
    const Tensor& sv = s_entries[i].second->val;
    const Tensor& tv = t_entries[i].second->val;
    for (std::int64_t j = 0; j < tv.numel(); ++j) {
      double expected = cfg.ema_momentum * tb[j] + (1.0 - cfg.ema_momentum) * sv[j];
      CHECK(tv[j] == expected);  // exact: no gradient leaks into the teacher
    }
  }
  std::filesystem::remove_all(root);
}

TEST_CASE("embedder checkpoint round-trip preserves encodings") {
  EmbedConfig cfg = tiny_cfg();
  Embedder emb(cfg, 31);
  VideoClip clip = noise_clip(4, 16, 2);
  Tensor before = emb.encode(clip);
  auto path = (std::filesystem::temp_directory_path() / "selfshot_emb.ckpt").string();
  emb.save(path);
  Embedder loaded = Embedder::load(path);
  Tensor after = loaded.encode(clip);
  CHECK(before.vec() == after.vec());
  std::filesystem::remove(path);
}

TEST_CASE("short training run decreases the probe loss") {
  std::filesystem::path root = std::filesystem::temp_directory_path() / "selfshot_embed_train";
  std::filesystem::remove_all(root);
  data::DatasetConfig dcfg;
  dcfg.num_train_classes = 2;
  dcfg.num_eval_classes = 2;
  dcfg.train_videos_per_class = 4;
  dcfg.eval_videos_per_class = 1;
  dcfg.height = 32;
  dcfg.width = 32;
  dcfg.frames_min = 4;
  dcfg.frames_max = 5;
  dcfg.scale_min = 8;
  dcfg.scale_max = 12;
  auto m = data::generate_dataset(dcfg, 17, root.string());
  auto ids = m.split_ids(data::Split::Train);

  EmbedConfig cfg = tiny_cfg();
  cfg.epochs = 6;
  cfg.lr = 3e-3;
  Embedder emb(cfg, 1);
  auto result = train_embedder(
      emb, ids, [&](const std::string& id) { return data::load_video(m, id); }, 2);
  CHECK(result.steps > 0);
  CHECK(result.probe_loss_final < result.probe_loss_initial);
  std::filesystem::remove_all(root);
}
