#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "selfshot/datagen.hpp"
#include "selfshot/retrieve.hpp"
#include "selfshot/vistr.hpp"

namespace selfshot::eval {

// sum_t |a_t & b_t| / sum_t |a_t | b_t|; two empty sequences count as IoU 1.
double video_iou(const MaskSeq& a, const MaskSeq& b);

struct ScoredMask {
  double score = 0.0;
  MaskSeq mask;
};

// Exact all-point PR area. Predictions are matched greedily in score order
// (ties keep the caller's slot order) to the unmatched GT with the highest
// IoU >= threshold; each GT matches at most once. When `detections` is given,
// (score, is_tp) pairs are appended for PR-curve rendering.
double average_precision(const std::vector<ScoredMask>& predictions,
                         const std::vector<MaskSeq>& gts, double iou_thresh,
                         std::vector<std::pair<double, bool>>* detections = nullptr);

struct EpisodeEval {
  std::string query_id;
  double ap = 0.0;
  int n_gt_instances = 0;
  int n_gt_classes = 0;
  int n_supports = 0;
  // share of supports with >=1 class in common with the query (labels are
  // consulted here only, for diagnostics); -1 when there are no supports
  double support_precision = -1.0;
};

struct EvalReport {
  std::string mode;
  int k = 0;
  int extra = 0;
  double iou_thresh = 0.5;
  double score_floor = 0.05;
  double map = 0.0;
  int dropped_low_score = 0;
  std::vector<EpisodeEval> episodes;
  // mean AP per query-instance-count bucket {1,2,3,4,>=5} and
  // per query-class-count bucket {1,2,3,>=4}
  std::map<std::string, double> instance_count_map;
  std::map<std::string, double> class_count_map;
  // pooled (score, tp) pairs across episodes plus the GT total, for PR curves
  std::vector<std::pair<double, bool>> detections;
  int total_gt = 0;

  std::string to_json() const;
  static EvalReport from_json(const std::string& json_text);
};

// Per-episode clips cut to the model geometry; eval uses a center cut.
struct EpisodeBatch {
  Tensor query_clip;                     // [T,3,H,W]
  std::vector<Tensor> support_clips;     // [Ts,3,H,W] each
  std::vector<MaskSeq> gt_masks;         // per instance, cut to the same frames, pixel res
  std::vector<int> gt_class_ids;
  loss::GtSequences gt_sequences;        // boxes + masks at mask resolution
};

// Loads, cuts and resizes one episode. Train mode uses a seeded random cut,
// eval a center cut. Support lists must already be resolved.
EpisodeBatch load_episode(const data::DatasetManifest& m, const data::Episode& ep,
                          const vistr::VisConfig& cfg, bool train_cut, std::uint64_t cut_seed);

// Runs the frozen model over resolved episodes and scores AP at the threshold.
EvalReport evaluate_run(const data::DatasetManifest& m, const std::vector<data::Episode>& episodes,
                        const vistr::VisModel& model, double iou_thresh, double score_floor = 0.05);

// Binary masks at pixel resolution from one prediction slot (sigmoid >= 0.5).
MaskSeq prediction_to_mask(const Tensor& mask_logits, std::int64_t pixel_h, std::int64_t pixel_w);

// Mean over indexed videos of the top-k share of same-class neighbors
// (query excluded). Retrieval diagnostic; labels are read from the manifest.
double same_class_precision(const retrieve::EmbeddingIndex& index,
                            const data::DatasetManifest& m, int k);

}  // namespace selfshot::eval
