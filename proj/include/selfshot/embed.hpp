#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "selfshot/checkpoint.hpp"
#include "selfshot/image.hpp"
#include "selfshot/nn.hpp"

namespace selfshot::embed {

using ad::Var;

struct EmbedConfig {
  std::int64_t dim = 128;        // embedding width
  std::int64_t base_width = 16;  // first conv block channels
  std::int64_t crop_frames = 4;
  std::int64_t crop_h = 64;
  std::int64_t crop_w = 64;
  double temperature = 0.07;
  double ema_momentum = 0.99;
  std::int64_t queue_capacity = 1280;
  int crops_per_video = 2;  // one anchor + (crops_per_video - 1) positives
  int batch_videos = 8;
  int epochs = 5;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int lr_decay_epoch = 0;  // 0 = auto (5/8 of the schedule)
  double lr_decay_factor = 0.1;
  std::string loss = "rank";  // "nce" | "rank"

  void validate() const;
  std::string arch_json() const;
  static EmbedConfig from_arch_json(const std::string& json_text);
};

// Space-time convolutional encoder: four strided conv blocks with group norm,
// global average pooling and a linear head onto the unit sphere.
class EncoderNet {
 public:
  EncoderNet(const EmbedConfig& cfg, SeedStream& init_rng, bool trainable);

  // x [B,3,T,H,W] -> [B,dim], rows unit-norm
  Var forward(const Var& x) const;
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }
  bool trainable() const { return trainable_; }

 private:
  bool trainable_;
  std::int64_t dim_;
  nn::ParamStore ps_;
  nn::Conv3d c1_, c2_, c3_, c4_;
  nn::GroupNorm g1_, g2_, g3_, g4_;
  nn::Linear head_;
};

enum class EncoderSide { Student, Teacher };

// Student encoder plus its exponential-moving-average teacher.
class Embedder {
 public:
  Embedder(const EmbedConfig& cfg, std::uint64_t seed);

  const EmbedConfig& config() const { return cfg_; }
  EncoderNet& student() { return *student_; }
  EncoderNet& teacher() { return *teacher_; }
  const EncoderNet& student() const { return *student_; }
  const EncoderNet& teacher() const { return *teacher_; }

  // Deterministic eval-mode embedding of a full video: center temporal crop,
  // resize to the crop geometry, forward. Rejects empty clips.
  Tensor encode(const VideoClip& clip, EncoderSide side = EncoderSide::Student) const;
  // Crop/resize only (shared by training batches).
  Tensor prepare_crop(const VideoClip& clip, std::int64_t start_frame) const;

  void save(const std::string& path) const;
  static Embedder load(const std::string& path);

 private:
  Embedder(const EmbedConfig& cfg);
  EmbedConfig cfg_;
  std::unique_ptr<EncoderNet> student_;
  std::unique_ptr<EncoderNet> teacher_;
};

// teacher' = m * teacher + (1 - m) * student, elementwise; shapes must agree.
void ema_update(const nn::ParamStore& student, nn::ParamStore& teacher, double m_ema);

// Multiple-instance NCE over unit embeddings:
//   -log( sum_pos exp(<a,p>/tau) / sum_{pos u neg} exp(<a,x>/tau) )
Var nce_loss(const Var& anchor, const std::vector<Var>& positives,
             const std::vector<Var>& negatives, double tau);

// Smooth rank of candidate b among set C w.r.t. query a:
//   R = 1 + sum_{c in C, c != b} sigmoid((cos(a,c) - cos(a,b)) / 2)
// Entries that are the same node as b are excluded (identity, not value).
Var rank_R(const Var& query, const Var& candidate, const std::vector<Var>& set_c);

// Smooth-AP style ranking loss:
//   sum_pos log(1 + sum_neg sigmoid((cos(a,n) - cos(a,p)) / 2))
Var rank_loss(const Var& anchor, const std::vector<Var>& positives,
              const std::vector<Var>& negatives);

// Fixed-capacity FIFO of teacher embeddings.
class NegativeQueue {
 public:
  explicit NegativeQueue(std::int64_t capacity) : capacity_(capacity) {}
  void push(Tensor emb);
  std::int64_t size() const { return static_cast<std::int64_t>(entries_.size()); }
  std::int64_t capacity() const { return capacity_; }
  const std::deque<Tensor>& entries() const { return entries_; }

 private:
  std::int64_t capacity_;
  std::deque<Tensor> entries_;
};

struct EmbedTrainResult {
  int steps = 0;
  double probe_loss_initial = 0.0;
  double probe_loss_final = 0.0;
};

using ClipLoader = std::function<VideoClip(const std::string&)>;
using LogSink = std::function<void(const std::string&)>;  // one JSON line per call

// Self-supervised training over an unlabelled pool (ids + pixels only; no
// label ever enters this path). Writes nothing; callers persist the embedder.
EmbedTrainResult train_embedder(Embedder& emb, const std::vector<std::string>& pool_ids,
                                const ClipLoader& load_clip, std::uint64_t seed,
                                const LogSink& log = nullptr);

}  // namespace selfshot::embed
