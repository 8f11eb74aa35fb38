#pragma once

#include <vector>

#include "selfshot/autodiff.hpp"

namespace selfshot::loss {

using ad::Var;

struct LossWeights {
  double lambda_mask = 2.0;
  double lambda_iou = 2.0;
  double lambda_l1 = 5.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double dice_eps = 1.0;
};

// Boxes are (cx, cy, w, h). Differentiable; degenerate enclosures return the
// plain IoU instead of NaN.
Var giou(const Var& box_a, const Var& box_b);
double giou_value(const std::array<double, 4>& a, const std::array<double, 4>& b);

// Sequence box loss, Var shapes [T,4]:
// (1/T) sum_t [ lambda_iou * (1 - GIoU_t) + lambda_l1 * |b_t - bhat_t|_1 ]
Var box_loss(const Var& gt_seq, const Var& pred_seq, const LossWeights& w);

// Single-frame mask terms; any shape, treated as a pixel set. gt is binary.
Var dice_loss(const Var& mask_logits, const Var& gt_mask, double eps = 1.0);
Var focal_loss(const Var& mask_logits, const Var& gt_mask, double alpha = 0.25,
               double gamma = 2.0);
// (1/T) sum_t [ dice + focal ] over [T,H,W] sequences.
Var mask_loss(const Var& logits_seq, const Var& gt_seq, const LossWeights& w);

// Ground-truth instance sequences at mask resolution.
struct GtSequences {
  std::vector<Tensor> boxes;  // per instance [T,4]
  std::vector<Tensor> masks;  // per instance [T,H,W], binary
  std::int64_t size() const { return static_cast<std::int64_t>(boxes.size()); }
};

// Model outputs for one episode, n prediction slots.
struct PredictionsVar {
  std::vector<Var> prob_fg;      // scalar per slot
  std::vector<Var> box_seq;      // per slot [T,4]
  std::vector<Var> mask_logits;  // per slot [T,H,W]
  std::int64_t size() const { return static_cast<std::int64_t>(prob_fg.size()); }
};

// n x n matching costs; row = gt slot (rows >= gt.size() are empty padding,
// cost 0), column = prediction slot. Real rows: -p_hat + box_loss. Matching
// consumes boxes only, never masks.
Tensor match_cost(const GtSequences& gt, const PredictionsVar& pred, const LossWeights& w);

struct Assignment {
  std::vector<std::int64_t> col_of_row;  // sigma: row i -> column sigma(i)
  double cost = 0.0;
};

// Exact minimum-cost perfect matching on a square cost matrix, O(n^3).
Assignment hungarian(const Tensor& cost);

struct LossBreakdown {
  Var total;
  Var cls;
  Var box;
  Var mask;
};

// Eq-style set loss: matched rows contribute class NLL + box + mask terms,
// empty rows only the background NLL of their assigned slot. Probabilities are
// clamped to [1e-7, 1] before the log.
LossBreakdown training_loss(const GtSequences& gt, const PredictionsVar& pred,
                            const Assignment& assignment, const LossWeights& w);

}  // namespace selfshot::loss
