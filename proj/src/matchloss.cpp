#include "selfshot/matchloss.hpp"

#include <cmath>
#include <limits>

namespace selfshot::loss {

namespace {
constexpr double kDenomEps = 1e-12;
constexpr double kProbEps = 1e-7;

Var box_corners(const Var& box) {
  // [4] (cx,cy,w,h) -> (x0,y0,x1,y1) as slices
  Var cx = ad::slice(box, 0, 0, 1);
  Var cy = ad::slice(box, 0, 1, 1);
  Var w = ad::slice(box, 0, 2, 1);
  Var h = ad::slice(box, 0, 3, 1);
  Var hw = ad::scale(w, 0.5);
  Var hh = ad::scale(h, 0.5);
  return ad::concat({ad::sub(cx, hw), ad::sub(cy, hh), ad::add(cx, hw), ad::add(cy, hh)}, 0);
}
}  // namespace

Var giou(const Var& box_a, const Var& box_b) {
  SS_CHECK(box_a->val.numel() == 4 && box_b->val.numel() == 4, "giou: boxes must have 4 coords");
  Var a = box_corners(ad::reshape(box_a, {4}));
  Var b = box_corners(ad::reshape(box_b, {4}));
  auto coord = [](const Var& v, std::int64_t i) { return ad::slice(v, 0, i, 1); };
  Var ix0 = ad::maximum(coord(a, 0), coord(b, 0));
  Var iy0 = ad::maximum(coord(a, 1), coord(b, 1));
  Var ix1 = ad::minimum(coord(a, 2), coord(b, 2));
  Var iy1 = ad::minimum(coord(a, 3), coord(b, 3));
  Var inter = ad::mul(ad::relu(ad::sub(ix1, ix0)), ad::relu(ad::sub(iy1, iy0)));
  Var area_a = ad::mul(ad::sub(coord(a, 2), coord(a, 0)), ad::sub(coord(a, 3), coord(a, 1)));
  Var area_b = ad::mul(ad::sub(coord(b, 2), coord(b, 0)), ad::sub(coord(b, 3), coord(b, 1)));
  Var uni = ad::sub(ad::add(area_a, area_b), inter);
  Var ex = ad::sub(ad::maximum(coord(a, 2), coord(b, 2)), ad::minimum(coord(a, 0), coord(b, 0)));
  Var ey = ad::sub(ad::maximum(coord(a, 3), coord(b, 3)), ad::minimum(coord(a, 1), coord(b, 1)));
  Var enclosure = ad::mul(ex, ey);
  Var iou = ad::div(inter, ad::add_scalar(uni, kDenomEps));
  Var penalty = ad::div(ad::sub(enclosure, uni), ad::add_scalar(enclosure, kDenomEps));
  return ad::reshape(ad::sub(iou, penalty), {1});
}

double giou_value(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  Var va = ad::constant(Tensor({4}, {a[0], a[1], a[2], a[3]}));
  Var vb = ad::constant(Tensor({4}, {b[0], b[1], b[2], b[3]}));
  return ad::scalar_value(giou(va, vb));
}

Var box_loss(const Var& gt_seq, const Var& pred_seq, const LossWeights& w) {
  SS_CHECK(gt_seq->val.rank() == 2 && gt_seq->val.dim(1) == 4, "box_loss: expected [T,4]");
  SS_CHECK(gt_seq->val.same_shape(pred_seq->val),
           "box_loss: sequence length mismatch " + gt_seq->val.shape_str() + " vs " +
               pred_seq->val.shape_str());
  std::int64_t T = gt_seq->val.dim(0);
  std::vector<Var> frame_terms;
  frame_terms.reserve(static_cast<std::size_t>(T));
  for (std::int64_t t = 0; t < T; ++t) {
    Var bg = ad::reshape(ad::slice(gt_seq, 0, t, 1), {4});
    Var bp = ad::reshape(ad::slice(pred_seq, 0, t, 1), {4});
    Var iou_term = ad::scale(ad::add_scalar(ad::neg(giou(bg, bp)), 1.0), w.lambda_iou);
    Var l1 = ad::scale(ad::sum_all(ad::abs_(ad::sub(bg, bp))), w.lambda_l1);
    frame_terms.push_back(ad::add(iou_term, l1));
  }
  return ad::scale(ad::add_n(frame_terms), 1.0 / static_cast<double>(T));
}

Var dice_loss(const Var& mask_logits, const Var& gt_mask, double eps) {
  SS_CHECK(mask_logits->val.same_shape(gt_mask->val), "dice_loss: shape mismatch");
  Var p = ad::sigmoid(mask_logits);
  Var num = ad::add_scalar(ad::scale(ad::sum_all(ad::mul(p, gt_mask)), 2.0), eps);
  Var den = ad::add_scalar(ad::add(ad::sum_all(p), ad::sum_all(gt_mask)), eps);
  return ad::add_scalar(ad::neg(ad::div(num, den)), 1.0);
}

Var focal_loss(const Var& mask_logits, const Var& gt_mask, double alpha, double gamma) {
  SS_CHECK(mask_logits->val.same_shape(gt_mask->val), "focal_loss: shape mismatch");
  Var p = ad::sigmoid(mask_logits);
  // -log p = softplus(-x); -log(1-p) = softplus(x)
  Var pos = ad::scale(ad::mul(ad::pow_const(ad::add_scalar(ad::neg(p), 1.0), gamma),
                              ad::softplus(ad::neg(mask_logits))),
                      alpha);
  Var negv = ad::scale(ad::mul(ad::pow_const(p, gamma), ad::softplus(mask_logits)), 1.0 - alpha);
  Var per_px = ad::add(ad::mul(gt_mask, pos),
                       ad::mul(ad::add_scalar(ad::neg(gt_mask), 1.0), negv));
  return ad::mean_all(per_px);
}

Var mask_loss(const Var& logits_seq, const Var& gt_seq, const LossWeights& w) {
  SS_CHECK(logits_seq->val.rank() == 3, "mask_loss: expected [T,H,W]");
  SS_CHECK(logits_seq->val.same_shape(gt_seq->val), "mask_loss: shape mismatch");
  std::int64_t T = logits_seq->val.dim(0);
  std::vector<Var> terms;
  terms.reserve(static_cast<std::size_t>(T));
  for (std::int64_t t = 0; t < T; ++t) {
    Var lf = ad::slice(logits_seq, 0, t, 1);
    Var gf = ad::slice(gt_seq, 0, t, 1);
    terms.push_back(ad::add(dice_loss(lf, gf, w.dice_eps),
                            focal_loss(lf, gf, w.focal_alpha, w.focal_gamma)));
  }
  return ad::scale(ad::add_n(terms), 1.0 / static_cast<double>(T));
}

Tensor match_cost(const GtSequences& gt, const PredictionsVar& pred, const LossWeights& w) {
  std::int64_t n = pred.size();
  SS_CHECK(gt.size() <= n, "match_cost: more ground-truth instances than prediction slots");
  Tensor C({n, n});
  for (std::int64_t i = 0; i < gt.size(); ++i) {
    Var gt_box = ad::constant(gt.boxes[static_cast<std::size_t>(i)]);
    for (std::int64_t j = 0; j < n; ++j) {
      double p = ad::scalar_value(pred.prob_fg[static_cast<std::size_t>(j)]);
      double bl = ad::scalar_value(
          box_loss(gt_box, ad::constant(pred.box_seq[static_cast<std::size_t>(j)]->val), w));
      C.at2(i, j) = -p + bl;
    }
  }
  // empty rows stay 0: matching of background slots is arbitrary and cost-free
  return C;
}

Assignment hungarian(const Tensor& cost) {
  SS_CHECK(cost.rank() == 2 && cost.dim(0) == cost.dim(1), "hungarian: square matrix required");
  SS_CHECK(cost.all_finite(), "hungarian: non-finite cost entries");
  std::int64_t n = cost.dim(0);
  Assignment out;
  out.col_of_row.assign(static_cast<std::size_t>(n), -1);
  if (n == 0) return out;

  const double INF = std::numeric_limits<double>::infinity();
  // potentials + shortest augmenting paths, 1-indexed
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<double> v(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<std::int64_t> p(static_cast<std::size_t>(n + 1), 0);
  std::vector<std::int64_t> way(static_cast<std::size_t>(n + 1), 0);
  for (std::int64_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::int64_t j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n + 1), INF);
    std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      std::int64_t i0 = p[static_cast<std::size_t>(j0)], j1 = 0;
      double delta = INF;
      for (std::int64_t j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        double cur = cost.at2(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                     v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (std::int64_t j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      std::int64_t j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  for (std::int64_t j = 1; j <= n; ++j) {
    if (p[static_cast<std::size_t>(j)] > 0)
      out.col_of_row[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  }
  for (std::int64_t i = 0; i < n; ++i) {
    SS_REQUIRE(out.col_of_row[static_cast<std::size_t>(i)] >= 0, "hungarian: incomplete matching");
    out.cost += cost.at2(i, out.col_of_row[static_cast<std::size_t>(i)]);
  }
  return out;
}

LossBreakdown training_loss(const GtSequences& gt, const PredictionsVar& pred,
                            const Assignment& assignment, const LossWeights& w) {
  std::int64_t n = pred.size();
  SS_CHECK(static_cast<std::int64_t>(assignment.col_of_row.size()) == n,
           "training_loss: assignment size mismatch");
  std::vector<Var> cls_terms, box_terms, mask_terms;
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t j = assignment.col_of_row[static_cast<std::size_t>(i)];
    const Var& p = pred.prob_fg[static_cast<std::size_t>(j)];
    if (i < gt.size()) {
      cls_terms.push_back(ad::neg(ad::log_(ad::clamp(p, kProbEps, 1.0))));
      box_terms.push_back(box_loss(ad::constant(gt.boxes[static_cast<std::size_t>(i)]),
                                   pred.box_seq[static_cast<std::size_t>(j)], w));
      mask_terms.push_back(mask_loss(pred.mask_logits[static_cast<std::size_t>(j)],
                                     ad::constant(gt.masks[static_cast<std::size_t>(i)]), w));
    } else {
      Var p_bg = ad::add_scalar(ad::neg(p), 1.0);
      cls_terms.push_back(ad::neg(ad::log_(ad::clamp(p_bg, kProbEps, 1.0))));
    }
  }
  LossBreakdown out;
  out.cls = ad::add_n(cls_terms);
  out.box = box_terms.empty() ? ad::constant(Tensor({1})) : ad::add_n(box_terms);
  out.mask = mask_terms.empty() ? ad::constant(Tensor({1})) : ad::add_n(mask_terms);
  out.total = ad::add(out.cls, ad::add(out.box, ad::scale(out.mask, w.lambda_mask)));
  return out;
}

}  // namespace selfshot::loss
