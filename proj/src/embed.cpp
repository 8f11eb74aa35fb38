#include "selfshot/embed.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

using ordered_json = nlohmann::ordered_json;

namespace selfshot::embed {

void EmbedConfig::validate() const {
  SS_CHECK(dim >= 4, "embedding dim too small");
  SS_CHECK(base_width >= 4, "base width too small");
  SS_CHECK(crop_frames >= 1 && crop_h >= 16 && crop_w >= 16, "bad crop geometry");
  SS_CHECK(crop_h % 4 == 0 && crop_w % 4 == 0, "crop height/width must be divisible by 4");
  SS_CHECK(temperature > 0.0, "temperature must be positive");
  SS_CHECK(ema_momentum >= 0.0 && ema_momentum <= 1.0, "ema momentum must be in [0,1]");
  SS_CHECK(queue_capacity >= 0, "queue capacity must be >= 0");
  SS_CHECK(crops_per_video >= 2, "need at least one positive crop per video");
  SS_CHECK(batch_videos >= 2, "need at least two videos per batch for negatives");
  SS_CHECK(epochs >= 1, "epochs must be >= 1");
  SS_CHECK(lr > 0.0, "learning rate must be positive");
  SS_CHECK(loss == "nce" || loss == "rank", "loss must be 'nce' or 'rank'");
}

std::string EmbedConfig::arch_json() const {
  ordered_json j;
  j["kind"] = "video_embedder";
  j["dim"] = dim;
  j["base_width"] = base_width;
  j["crop"] = {crop_frames, crop_h, crop_w};
  j["temperature"] = temperature;
  j["ema_momentum"] = ema_momentum;
  j["queue_capacity"] = queue_capacity;
  j["loss"] = loss;
  return j.dump();
}

EmbedConfig EmbedConfig::from_arch_json(const std::string& json_text) {
  ordered_json j = ordered_json::parse(json_text);
  SS_CHECK(j.value("kind", "") == "video_embedder", "not an embedder checkpoint");
  EmbedConfig cfg;
  cfg.dim = j.at("dim").get<std::int64_t>();
  cfg.base_width = j.at("base_width").get<std::int64_t>();
  auto crop = j.at("crop").get<std::vector<std::int64_t>>();
  SS_CHECK(crop.size() == 3, "bad crop descriptor");
  cfg.crop_frames = crop[0];
  cfg.crop_h = crop[1];
  cfg.crop_w = crop[2];
  cfg.temperature = j.value("temperature", 0.07);
  cfg.ema_momentum = j.value("ema_momentum", 0.99);
  cfg.queue_capacity = j.value("queue_capacity", std::int64_t{1280});
  cfg.loss = j.value("loss", "rank");
  return cfg;
}

namespace {
std::int64_t norm_groups(std::int64_t ch) { return std::min<std::int64_t>(8, ch); }
}  // namespace

EncoderNet::EncoderNet(const EmbedConfig& cfg, SeedStream& init_rng, bool trainable)
    : trainable_(trainable), dim_(cfg.dim) {
  nn::Init init{&init_rng};
  std::int64_t w = cfg.base_width;
  // four strided blocks; temporal stride kicks in once the clip is deep enough
  c1_ = nn::Conv3d(ps_, "conv1", 3, w, 3, 3, 3, 1, 2, 2, 1, 1, 1, init);
  g1_ = nn::GroupNorm(ps_, "norm1", w, norm_groups(w));
  c2_ = nn::Conv3d(ps_, "conv2", w, 2 * w, 3, 3, 3, 1, 2, 2, 1, 1, 1, init);
  g2_ = nn::GroupNorm(ps_, "norm2", 2 * w, norm_groups(2 * w));
  c3_ = nn::Conv3d(ps_, "conv3", 2 * w, 4 * w, 3, 3, 3, 2, 2, 2, 1, 1, 1, init);
  g3_ = nn::GroupNorm(ps_, "norm3", 4 * w, norm_groups(4 * w));
  c4_ = nn::Conv3d(ps_, "conv4", 4 * w, 8 * w, 3, 3, 3, 2, 2, 2, 1, 1, 1, init);
  g4_ = nn::GroupNorm(ps_, "norm4", 8 * w, norm_groups(8 * w));
  head_ = nn::Linear(ps_, "head", 8 * w, cfg.dim, init);
  if (!trainable) ps_.freeze();
}

Var EncoderNet::forward(const Var& x) const {
  SS_CHECK(x->val.rank() == 5 && x->val.dim(1) == 3, "encoder input must be [B,3,T,H,W]");
  std::int64_t B = x->val.dim(0);
  Var h = ad::relu(g1_(c1_(x)));
  h = ad::relu(g2_(c2_(h)));
  h = ad::relu(g3_(c3_(h)));
  h = ad::relu(g4_(c4_(h)));
  // global average pool over (T,H,W)
  std::int64_t C = h->val.dim(1);
  std::int64_t sp = h->val.numel() / (B * C);
  Var pooled = ad::mean_axis(ad::reshape(h, {B, C, sp}), 2);  // [B,C]
  Var out = head_(pooled);
  return ad::l2_normalize_lastdim(out);
}

Embedder::Embedder(const EmbedConfig& cfg) : cfg_(cfg) {}

Embedder::Embedder(const EmbedConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  SeedStream s_rng(seed, "embedder-init");
  student_ = std::make_unique<EncoderNet>(cfg_, s_rng, true);
  SeedStream t_rng(seed, "embedder-init-teacher");  // same shapes; values overwritten below
  teacher_ = std::make_unique<EncoderNet>(cfg_, t_rng, false);
  // teacher starts as a copy of the student
  teacher_->params().copy_values_from(student_->params());
}

Tensor Embedder::prepare_crop(const VideoClip& clip, std::int64_t start_frame) const {
  SS_CHECK(clip.t >= 1 && clip.h >= 1 && clip.w >= 1, "cannot encode an empty clip");
  VideoClip resized = resize_clip(clip, cfg_.crop_h, cfg_.crop_w);
  VideoClip crop(cfg_.crop_frames, cfg_.crop_h, cfg_.crop_w);
  for (std::int64_t f = 0; f < cfg_.crop_frames; ++f) {
    std::int64_t src = std::min(start_frame + f, resized.t - 1);  // pad with the last frame
    std::copy(resized.rgb.begin() + src * resized.h * resized.w * 3,
              resized.rgb.begin() + (src + 1) * resized.h * resized.w * 3,
              crop.rgb.begin() + f * crop.h * crop.w * 3);
  }
  Tensor t = clip_to_tensor(crop);  // [T,3,H,W]
  // reorder to [3,T,H,W] for the space-time encoder
  Tensor out({3, cfg_.crop_frames, cfg_.crop_h, cfg_.crop_w});
  for (std::int64_t f = 0; f < cfg_.crop_frames; ++f)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < cfg_.crop_h; ++y)
        for (std::int64_t x = 0; x < cfg_.crop_w; ++x)
          out.at4(c, f, y, x) = t.at4(f, c, y, x);
  return out;
}

Tensor Embedder::encode(const VideoClip& clip, EncoderSide side) const {
  SS_CHECK(clip.t >= 1, "cannot encode an empty clip");
  std::int64_t start = std::max<std::int64_t>(0, (clip.t - cfg_.crop_frames) / 2);  // center cut
  Tensor crop = prepare_crop(clip, start);
  Tensor batch({1, 3, cfg_.crop_frames, cfg_.crop_h, cfg_.crop_w}, std::move(crop.vec()));
  const EncoderNet& net = (side == EncoderSide::Student) ? *student_ : *teacher_;
  Var out = net.forward(ad::constant(std::move(batch)));
  Tensor emb({cfg_.dim});
  for (std::int64_t i = 0; i < cfg_.dim; ++i) emb[i] = out->val[i];
  return emb;
}

void Embedder::save(const std::string& path) const {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& [name, v] : student_->params().entries())
    tensors.emplace_back("student." + name, v->val);
  for (const auto& [name, v] : teacher_->params().entries())
    tensors.emplace_back("teacher." + name, v->val);
  save_checkpoint(path, cfg_.arch_json(), tensors);
}

Embedder Embedder::load(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  EmbedConfig cfg = EmbedConfig::from_arch_json(ck.arch_json);
  Embedder emb(cfg);
  SeedStream rng(0, "embedder-load");
  emb.student_ = std::make_unique<EncoderNet>(cfg, rng, true);
  emb.teacher_ = std::make_unique<EncoderNet>(cfg, rng, false);
  auto tensors = ck.tensor_map();
  auto fill = [&](EncoderNet& net, const std::string& prefix) {
    for (auto& [name, v] : net.params().entries()) {
      auto it = tensors.find(prefix + name);
      SS_CHECK(it != tensors.end(), "checkpoint missing tensor: " + prefix + name);
      SS_CHECK(it->second.same_shape(v->val), "checkpoint shape mismatch: " + prefix + name);
      v->val.vec() = it->second.vec();
    }
  };
  fill(*emb.student_, "student.");
  fill(*emb.teacher_, "teacher.");
  return emb;
}

void ema_update(const nn::ParamStore& student, nn::ParamStore& teacher, double m_ema) {
  SS_CHECK(m_ema >= 0.0 && m_ema <= 1.0, "ema momentum must be in [0,1]");
  SS_CHECK(student.size() == teacher.size(), "ema: parameter count mismatch");
  const auto& se = student.entries();
  const auto& te = teacher.entries();
  for (std::size_t i = 0; i < se.size(); ++i) {
    SS_CHECK(se[i].second->val.same_shape(te[i].second->val),
             "ema: shape mismatch at " + se[i].first);
    Tensor& tv = te[i].second->val;
    const Tensor& sv = se[i].second->val;
    for (std::int64_t j = 0; j < tv.numel(); ++j)
      tv[j] = m_ema * tv[j] + (1.0 - m_ema) * sv[j];
  }
}

Var nce_loss(const Var& anchor, const std::vector<Var>& positives,
             const std::vector<Var>& negatives, double tau) {
  SS_CHECK(tau > 0.0, "nce_loss: temperature must be positive");
  SS_CHECK(!positives.empty(), "nce_loss: need at least one positive");
  SS_CHECK(!negatives.empty(), "nce_loss: need at least one negative");
  std::vector<Var> pos_sims, all_sims;
  for (const auto& p : positives) {
    Var s = ad::scale(ad::dot(anchor, p), 1.0 / tau);
    pos_sims.push_back(s);
    all_sims.push_back(s);
  }
  for (const auto& n : negatives) all_sims.push_back(ad::scale(ad::dot(anchor, n), 1.0 / tau));
  Var lse_pos = ad::logsumexp_lastdim(ad::concat(pos_sims, 0));
  Var lse_all = ad::logsumexp_lastdim(ad::concat(all_sims, 0));
  return ad::sub(lse_all, lse_pos);
}

namespace {
// cos(a,b) = <a,b> / sqrt(<a,a><b,b>); exactly invariant under power-of-two
// rescaling of either argument
Var cosine(const Var& a, const Var& b) {
  Var denom = ad::sqrt_(ad::mul(ad::dot(a, a), ad::dot(b, b)));
  return ad::div(ad::dot(a, b), denom);
}
}  // namespace

Var rank_R(const Var& query, const Var& candidate, const std::vector<Var>& set_c) {
  SS_CHECK(query->val.max_abs() > 0.0 && candidate->val.max_abs() > 0.0,
           "rank_R: embeddings must be nonzero");
  Var cos_b = cosine(query, candidate);
  std::vector<Var> terms{ad::constant(Tensor({1}, 1.0))};
  for (const auto& c : set_c) {
    if (c.get() == candidate.get()) continue;  // the ranked item itself
    SS_CHECK(c->val.max_abs() > 0.0, "rank_R: embeddings must be nonzero");
    Var d = ad::sub(cosine(query, c), cos_b);
    terms.push_back(ad::sigmoid(ad::scale(d, 0.5)));
  }
  return ad::add_n(terms);
}

Var rank_loss(const Var& anchor, const std::vector<Var>& positives,
              const std::vector<Var>& negatives) {
  SS_CHECK(!positives.empty(), "rank_loss: need at least one positive");
  SS_CHECK(!negatives.empty(), "rank_loss: need at least one negative");
  std::vector<Var> terms;
  for (const auto& p : positives) {
    std::vector<Var> denom_set{p};
    for (const auto& n : negatives) denom_set.push_back(n);
    Var denom = rank_R(anchor, p, denom_set);  // numerator R over {p} alone is exactly 1
    terms.push_back(ad::log_(denom));
  }
  return ad::add_n(terms);
}

void NegativeQueue::push(Tensor emb) {
  if (capacity_ == 0) return;
  entries_.push_back(std::move(emb));
  while (static_cast<std::int64_t>(entries_.size()) > capacity_) entries_.pop_front();
}

namespace {

// one training batch: anchors through the student, positives through the teacher
struct Batch {
  Tensor anchors;                       // [B,3,T,H,W]
  Tensor positives;                     // [B*(P),3,T,H,W]
  std::int64_t B = 0, P = 0;
};

Batch assemble_batch(const Embedder& emb, const std::vector<std::string>& ids,
                     const ClipLoader& load_clip, SeedStream& rng) {
  const auto& cfg = emb.config();
  std::int64_t B = static_cast<std::int64_t>(ids.size());
  std::int64_t P = cfg.crops_per_video - 1;
  Batch batch;
  batch.B = B;
  batch.P = P;
  batch.anchors = Tensor({B, 3, cfg.crop_frames, cfg.crop_h, cfg.crop_w});
  batch.positives = Tensor({B * P, 3, cfg.crop_frames, cfg.crop_h, cfg.crop_w});
  std::int64_t crop_elems = 3 * cfg.crop_frames * cfg.crop_h * cfg.crop_w;
  for (std::int64_t i = 0; i < B; ++i) {
    VideoClip clip = load_clip(ids[static_cast<std::size_t>(i)]);
    std::int64_t max_start = std::max<std::int64_t>(0, clip.t - cfg.crop_frames);
    for (std::int64_t c = 0; c < cfg.crops_per_video; ++c) {
      std::int64_t start = rng.next_int(0, max_start);
      Tensor crop = emb.prepare_crop(clip, start);
      double* dst = (c == 0) ? batch.anchors.data() + i * crop_elems
                             : batch.positives.data() + (i * P + (c - 1)) * crop_elems;
      std::copy(crop.data(), crop.data() + crop_elems, dst);
    }
  }
  return batch;
}

}  // namespace

EmbedTrainResult train_embedder(Embedder& emb, const std::vector<std::string>& pool_ids,
                                const ClipLoader& load_clip, std::uint64_t seed,
                                const LogSink& log) {
  const EmbedConfig& cfg = emb.config();
  cfg.validate();
  SS_CHECK(pool_ids.size() >= 2, "embedder training needs at least two pool videos");

  nn::AdamW opt(emb.student().params(), {{"", cfg.lr}}, cfg.weight_decay);
  NegativeQueue queue(cfg.queue_capacity);
  int decay_epoch = cfg.lr_decay_epoch > 0
                        ? cfg.lr_decay_epoch
                        : std::max(1, static_cast<int>(cfg.epochs * 5 / 8));

  // fixed probe batch, evaluated before and after training
  std::vector<std::string> probe_ids(pool_ids.begin(),
                                     pool_ids.begin() + std::min<std::size_t>(pool_ids.size(), 8));
  auto probe_loss = [&]() {
    SeedStream probe_rng(seed, "probe-crops");
    Batch b = assemble_batch(emb, probe_ids, load_clip, probe_rng);
    Var a = emb.student().forward(ad::constant(b.anchors));
    Var p = emb.teacher().forward(ad::constant(b.positives));
    std::vector<Var> losses;
    for (std::int64_t i = 0; i < b.B; ++i) {
      Var anchor = ad::reshape(ad::slice(a, 0, i, 1), {cfg.dim});
      std::vector<Var> pos, neg;
      for (std::int64_t c = 0; c < b.P; ++c)
        pos.push_back(ad::reshape(ad::slice(p, 0, i * b.P + c, 1), {cfg.dim}));
      for (std::int64_t j = 0; j < b.B; ++j) {
        if (j == i) continue;
        for (std::int64_t c = 0; c < b.P; ++c)
          neg.push_back(ad::reshape(ad::slice(p, 0, j * b.P + c, 1), {cfg.dim}));
      }
      losses.push_back(cfg.loss == "nce" ? nce_loss(anchor, pos, neg, cfg.temperature)
                                         : rank_loss(anchor, pos, neg));
    }
    return ad::scalar_value(ad::scale(ad::add_n(losses), 1.0 / static_cast<double>(b.B)));
  };

  EmbedTrainResult result;
  result.probe_loss_initial = probe_loss();

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr_scale = (epoch >= decay_epoch) ? cfg.lr_decay_factor : 1.0;
    std::vector<std::string> order = pool_ids;
    SeedStream shuffle_rng(seed, "epoch-order." + std::to_string(epoch));
    shuffle_rng.shuffle(order);
    for (std::size_t off = 0; off + cfg.batch_videos <= order.size();
         off += static_cast<std::size_t>(cfg.batch_videos)) {
      std::vector<std::string> ids(order.begin() + static_cast<std::ptrdiff_t>(off),
                                   order.begin() + static_cast<std::ptrdiff_t>(off) +
                                       cfg.batch_videos);
      SeedStream crop_rng(seed, "crops." + std::to_string(epoch) + "." + std::to_string(off));
      Batch b = assemble_batch(emb, ids, load_clip, crop_rng);

      Var a = emb.student().forward(ad::constant(b.anchors));
      Var p = emb.teacher().forward(ad::constant(b.positives));  // frozen net: no gradient
      std::vector<Var> losses;
      for (std::int64_t i = 0; i < b.B; ++i) {
        Var anchor = ad::reshape(ad::slice(a, 0, i, 1), {cfg.dim});
        std::vector<Var> pos, neg;
        for (std::int64_t c = 0; c < b.P; ++c)
          pos.push_back(ad::reshape(ad::slice(p, 0, i * b.P + c, 1), {cfg.dim}));
        for (std::int64_t j = 0; j < b.B; ++j) {
          if (j == i) continue;
          for (std::int64_t c = 0; c < b.P; ++c)
            neg.push_back(ad::reshape(ad::slice(p, 0, j * b.P + c, 1), {cfg.dim}));
        }
        for (const auto& q : queue.entries()) neg.push_back(ad::constant(q));
        losses.push_back(cfg.loss == "nce" ? nce_loss(anchor, pos, neg, cfg.temperature)
                                           : rank_loss(anchor, pos, neg));
      }
      Var loss = ad::scale(ad::add_n(losses), 1.0 / static_cast<double>(b.B));
      double loss_val = ad::scalar_value(loss);
      SS_REQUIRE(std::isfinite(loss_val),
                 "embedder training diverged (non-finite loss) at step " + std::to_string(step));
      opt.zero_grad();
      ad::backward(loss);
      opt.step(lr_scale);
      ema_update(emb.student().params(), emb.teacher().params(), cfg.ema_momentum);
      // newest teacher embeddings enter the queue, oldest leave
      for (std::int64_t i = 0; i < b.B * b.P; ++i) {
        Tensor e({cfg.dim});
        for (std::int64_t d = 0; d < cfg.dim; ++d) e[d] = p->val.at2(i, d);
        queue.push(std::move(e));
      }
      if (log) {
        ordered_json j;
        j["step"] = step;
        j["loss"] = loss_val;
        j["lr"] = cfg.lr * lr_scale;
        log(j.dump());
      }
      ++step;
    }
  }
  result.steps = step;
  result.probe_loss_final = probe_loss();
  return result;
}

}  // namespace selfshot::embed
