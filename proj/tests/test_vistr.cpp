#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "selfshot/vistr.hpp"

using namespace selfshot;
using namespace selfshot::vistr;
using ad::Var;

namespace {

VisConfig tiny_cfg() {
  VisConfig cfg;
  cfg.dim = 24;
  cfg.enc_layers = 1;
  cfg.fuser_layers = 1;
  cfg.dec_layers = 1;
  cfg.heads = 4;
  cfg.instances = 3;
  cfg.frames = 2;
  cfg.support_frames = 2;
  cfg.input_h = 16;
  cfg.input_w = 16;
  cfg.mask_h = 4;
  cfg.mask_w = 4;
  cfg.backbone_width = 4;
  cfg.mask_channels = 4;
  return cfg;
}

Tensor rand_clip(SeedStream& rng, std::int64_t t, std::int64_t hw) {
  Tensor clip({t, 3, hw, hw});
  for (std::int64_t i = 0; i < clip.numel(); ++i) clip[i] = rng.next_double() * 2.0 - 1.0;
  return clip;
}

}  // namespace

TEST_CASE("positional encoding basics") {
  Tensor pe = positional_encoding(2, 3, 3, 12);
  CHECK(pe.shape() == Tensor::Shape{18, 12});
  // position (0,0,0): every sin channel 0, every cos channel 1
  for (std::int64_t c = 0; c < 12; c += 2) CHECK(pe.at2(0, c) == 0.0);
  for (std::int64_t c = 1; c < 12; c += 2) CHECK(pe.at2(0, c) == 1.0);
  // bounded by construction on a larger grid
  Tensor big = positional_encoding(8, 8, 8, 48);
  for (std::int64_t i = 0; i < big.numel(); ++i) {
    CHECK(big[i] <= 1.0);
    CHECK(big[i] >= -1.0);
  }
  CHECK_THROWS_AS((void)positional_encoding(2, 2, 2, 16), ValidationError);
}

TEST_CASE("positional encoding is injective on an 8x8x8 grid") {
  Tensor pe = positional_encoding(8, 8, 8, 48);
  std::int64_t n = pe.dim(0);
  double min_dist = 1e300;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      double d = 0;
      for (std::int64_t c = 0; c < 48; ++c) {
        double diff = pe.at2(i, c) - pe.at2(j, c);
        d += diff * diff;
      }
      min_dist = std::min(min_dist, std::sqrt(d));
    }
  }
  CHECK(min_dist > 0.0);
}

TEST_CASE("backbone shapes and weight sharing") {
  VisConfig cfg = tiny_cfg();
  VisModel model(cfg, 3);
  SeedStream rng(1, "clip");
  Tensor clip = rand_clip(rng, 2, 16);
  Var f1 = model.extract_features(clip);
  CHECK(f1->val.shape() == Tensor::Shape{2, 24, 2, 2});
  // same weights process query and support branches: identical input, identical output
  Var f2 = model.extract_features(clip);
  CHECK(f1->val.vec() == f2->val.vec());
}

TEST_CASE("zero-layer encoder is the identity on tokens") {
  VisConfig cfg = tiny_cfg();
  cfg.enc_layers = 0;
  VisModel model(cfg, 4);
  SeedStream rng(2, "tok");
  Tensor tokens({8, 24});
  for (std::int64_t i = 0; i < tokens.numel(); ++i) tokens[i] = rng.next_normal();
  Tensor pe({8, 24});
  Var out = model.encode_tokens(ad::constant(tokens), pe);
  CHECK(out->val.vec() == tokens.vec());
}

TEST_CASE("encoder without positional encoding is permutation-equivariant") {
  VisConfig cfg = tiny_cfg();
  cfg.enc_layers = 2;
  VisModel model(cfg, 5);
  SeedStream rng(3, "perm");
  std::int64_t n = 8;
  Tensor tokens({n, 24});
  for (std::int64_t i = 0; i < tokens.numel(); ++i) tokens[i] = rng.next_normal();
  Tensor pe({n, 24});  // zeros: no positional information
  std::vector<std::int64_t> perm{3, 1, 7, 0, 5, 2, 6, 4};
  Tensor permuted({n, 24});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < 24; ++c) permuted.at2(i, c) = tokens.at2(perm[static_cast<std::size_t>(i)], c);
  Var out = model.encode_tokens(ad::constant(tokens), pe);
  Var out_p = model.encode_tokens(ad::constant(permuted), pe);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < 24; ++c)
      CHECK(out_p->val.at2(i, c) ==
            doctest::Approx(out->val.at2(perm[static_cast<std::size_t>(i)], c)).epsilon(1e-9));
}

TEST_CASE("fuser: shape contract and support-token permutation invariance") {
  VisConfig cfg = tiny_cfg();
  cfg.fuser_layers = 2;
  VisModel model(cfg, 6);
  SeedStream rng(4, "fuse");
  Tensor q({8, 24}), s({12, 24});
  for (std::int64_t i = 0; i < q.numel(); ++i) q[i] = rng.next_normal();
  for (std::int64_t i = 0; i < s.numel(); ++i) s[i] = rng.next_normal();
  Var fused = model.fuse(ad::constant(q), ad::constant(s));
  CHECK(fused->val.shape() == Tensor::Shape{8, 24});  // query token count regardless of T'

  std::vector<std::int64_t> perm{5, 0, 11, 3, 7, 1, 9, 2, 10, 4, 8, 6};
  Tensor sp({12, 24});
  for (std::int64_t i = 0; i < 12; ++i)
    for (std::int64_t c = 0; c < 24; ++c) sp.at2(i, c) = s.at2(perm[static_cast<std::size_t>(i)], c);
  Var fused_p = model.fuse(ad::constant(q), ad::constant(sp));
  for (std::int64_t i = 0; i < fused->val.numel(); ++i)
    CHECK(std::fabs(fused->val[i] - fused_p->val[i]) <= 1e-6);
}

TEST_CASE("fuser gradients match finite differences") {
  VisConfig cfg = tiny_cfg();
  VisModel model(cfg, 7);
  SeedStream rng(5, "fd");
  for (int trial = 0; trial < 3; ++trial) {
    Tensor q({4, 24}), s({6, 24}), coeft({4, 24});
    for (std::int64_t i = 0; i < q.numel(); ++i) q[i] = rng.next_normal() * 0.5;
    for (std::int64_t i = 0; i < s.numel(); ++i) s[i] = rng.next_normal() * 0.5;
    for (std::int64_t i = 0; i < coeft.numel(); ++i) coeft[i] = rng.next_normal();
    Var ql = ad::leaf(q), sl = ad::leaf(s);
    Var coef = ad::constant(coeft);
    auto fn = [&]() { return ad::sum_all(ad::mul(model.fuse(ql, sl), coef)); };
    ql->grad = Tensor();
    sl->grad = Tensor();
    ad::backward(fn());
    for (Var leafv : {ql, sl}) {
      for (std::int64_t i = 0; i < std::min<std::int64_t>(leafv->val.numel(), 24); i += 5) {
        double analytic = leafv->grad[i];
        double numeric =
            ad::finite_difference(leafv->val, i, 1e-6, [&]() { return ad::scalar_value(fn()); });
        double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-3});
        CHECK(std::fabs(analytic - numeric) / denom <= 1e-4);
      }
    }
  }
}

TEST_CASE("decoder column grouping and equivariance to query-embedding reordering") {
  VisConfig cfg = tiny_cfg();
  cfg.instances = 2;
  cfg.frames = 4;   // N = 8
  cfg.input_h = 16;
  cfg.input_w = 16;
  VisModel model(cfg, 8);
  SeedStream rng(6, "dec");
  Tensor fused({cfg.frames * 4, 24});
  for (std::int64_t i = 0; i < fused.numel(); ++i) fused[i] = rng.next_normal();
  Var out = model.decode(ad::constant(fused));
  CHECK(out->val.shape() == Tensor::Shape{8, 24});

  // swap two decoder input embeddings; output columns swap identically
  auto qe = model.params().get("decoder.query_embed");
  Tensor original = qe->val;
  Var base = model.decode(ad::constant(fused));
  Tensor swapped = original;
  for (std::int64_t c = 0; c < 24; ++c) std::swap(swapped.at2(2, c), swapped.at2(5, c));
  qe->val = swapped;
  Var perm = model.decode(ad::constant(fused));
  qe->val = original;
  for (std::int64_t c = 0; c < 24; ++c) {
    CHECK(perm->val.at2(2, c) == doctest::Approx(base->val.at2(5, c)).epsilon(1e-9));
    CHECK(perm->val.at2(5, c) == doctest::Approx(base->val.at2(2, c)).epsilon(1e-9));
    CHECK(perm->val.at2(0, c) == doctest::Approx(base->val.at2(0, c)).epsilon(1e-9));
  }
}

TEST_CASE("full forward: shapes, ranges, determinism, support duplication") {
  VisConfig cfg = tiny_cfg();
  VisModel model(cfg, 9);
  SeedStream rng(7, "fw");
  Tensor query = rand_clip(rng, cfg.frames, 16);
  Tensor support = rand_clip(rng, cfg.support_frames, 16);

  CHECK_THROWS_AS((void)model.forward(query, {}), ValidationError);

  auto pred = model.forward(query, {support});
  CHECK(pred.size() == cfg.instances);
  for (std::int64_t i = 0; i < cfg.instances; ++i) {
    double p = ad::scalar_value(pred.prob_fg[static_cast<std::size_t>(i)]);
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
    const Tensor& bx = pred.box_seq[static_cast<std::size_t>(i)]->val;
    CHECK(bx.shape() == Tensor::Shape{cfg.frames, 4});
    for (std::int64_t j = 0; j < bx.numel(); ++j) {
      CHECK(bx[j] >= 0.0);
      CHECK(bx[j] <= 1.0);
    }
    const Tensor& mk = pred.mask_logits[static_cast<std::size_t>(i)]->val;
    CHECK(mk.shape() == Tensor::Shape{cfg.frames, cfg.mask_h, cfg.mask_w});
    CHECK(mk.all_finite());
  }

  // eval-mode purity
  auto pred2 = model.forward(query, {support});
  for (std::int64_t i = 0; i < cfg.instances; ++i)
    CHECK(pred.mask_logits[static_cast<std::size_t>(i)]->val.vec() ==
          pred2.mask_logits[static_cast<std::size_t>(i)]->val.vec());

  // two supports also valid; duplicated support changes nothing (within fp noise)
  auto dup = model.forward(query, {support, support});
  for (std::int64_t i = 0; i < cfg.instances; ++i) {
    const Tensor& a = pred.mask_logits[static_cast<std::size_t>(i)]->val;
    const Tensor& b = dup.mask_logits[static_cast<std::size_t>(i)]->val;
    for (std::int64_t j = 0; j < a.numel(); ++j) CHECK(std::fabs(a[j] - b[j]) <= 1e-5);
    CHECK(std::fabs(ad::scalar_value(pred.prob_fg[static_cast<std::size_t>(i)]) -
                    ad::scalar_value(dup.prob_fg[static_cast<std::size_t>(i)])) <= 1e-5);
  }
}

TEST_CASE("paper-scale configuration is expressible") {
  VisConfig cfg = VisConfig::paper_scale();
  cfg.validate();
  CHECK(cfg.dim == 288);
  CHECK(cfg.enc_layers == 6);
  CHECK(cfg.fuser_layers == 3);
  CHECK(cfg.dec_layers == 6);
  CHECK(cfg.heads == 8);
  CHECK(cfg.instances == 10);
  CHECK(cfg.frames == 32);
  CHECK(cfg.support_frames == 24);
  CHECK(cfg.num_queries() == 320);
  CHECK(cfg.input_w == 320);
  CHECK(cfg.input_h == 280);
}

TEST_CASE("checkpoint round-trip preserves the forward pass") {
  VisConfig cfg = tiny_cfg();
  VisModel model(cfg, 10);
  SeedStream rng(8, "ck");
  Tensor query = rand_clip(rng, cfg.frames, 16);
  Tensor support = rand_clip(rng, cfg.support_frames, 16);
  auto before = vistr::detach(model.forward(query, {support}));
  auto path = (std::filesystem::temp_directory_path() / "selfshot_vis.ckpt").string();
  model.save(path);
  auto loaded = VisModel::load(path);
  auto after = vistr::detach(loaded->forward(query, {support}));
  for (std::size_t i = 0; i < before.prob.size(); ++i) {
    CHECK(before.prob[i] == after.prob[i]);
    CHECK(before.mask_logits[i].vec() == after.mask_logits[i].vec());
  }
  std::filesystem::remove(path);
}

TEST_CASE("config validation rejects malformed geometry") {
  VisConfig cfg = tiny_cfg();
  cfg.dim = 20;  // not divisible by 6
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = tiny_cfg();
  cfg.input_h = 20;  // not divisible by the stride
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = tiny_cfg();
  cfg.mask_h = 5;  // not a multiple of the token grid
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}
