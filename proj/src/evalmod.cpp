#include "selfshot/evalmod.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using ordered_json = nlohmann::ordered_json;

namespace selfshot::eval {

double video_iou(const MaskSeq& a, const MaskSeq& b) {
  SS_CHECK(a.t == b.t && a.h == b.h && a.w == b.w,
           "video_iou: mask sequence shapes must match");
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.m.size(); ++i) {
    bool av = a.m[i] != 0, bv = b.m[i] != 0;
    inter += (av && bv) ? 1 : 0;
    uni += (av || bv) ? 1 : 0;
  }
  if (uni == 0) return 1.0;  // two empty sequences agree perfectly
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double average_precision(const std::vector<ScoredMask>& predictions,
                         const std::vector<MaskSeq>& gts, double iou_thresh,
                         std::vector<std::pair<double, bool>>* detections) {
  if (gts.empty()) {
    if (detections)
      for (const auto& p : predictions) detections->emplace_back(p.score, false);
    return predictions.empty() ? 1.0 : 0.0;
  }
  if (predictions.empty()) return 0.0;
  std::vector<std::size_t> order(predictions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return predictions[a].score > predictions[b].score;
  });
  std::vector<bool> gt_used(gts.size(), false);
  std::int64_t tp = 0, seen = 0;
  double ap = 0.0;
  for (std::size_t oi : order) {
    ++seen;
    double best_iou = 0.0;
    std::int64_t best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g]) continue;
      double iou = video_iou(predictions[oi].mask, gts[g]);
      if (iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<std::int64_t>(g);
      }
    }
    bool is_tp = best_gt >= 0 && best_iou >= iou_thresh;
    if (is_tp) {
      gt_used[static_cast<std::size_t>(best_gt)] = true;
      ++tp;
      ap += static_cast<double>(tp) / static_cast<double>(seen);  // precision at this recall step
    }
    if (detections) detections->emplace_back(predictions[oi].score, is_tp);
  }
  return ap / static_cast<double>(gts.size());
}

MaskSeq prediction_to_mask(const Tensor& mask_logits, std::int64_t pixel_h, std::int64_t pixel_w) {
  SS_CHECK(mask_logits.rank() == 3, "mask logits must be [T,H0,W0]");
  MaskSeq low(mask_logits.dim(0), mask_logits.dim(1), mask_logits.dim(2));
  for (std::int64_t i = 0; i < mask_logits.numel(); ++i)
    low.m[static_cast<std::size_t>(i)] = mask_logits[i] >= 0.0 ? 1 : 0;  // sigmoid >= 0.5
  if (low.h == pixel_h && low.w == pixel_w) return low;
  return upsample_mask(low, pixel_h, pixel_w);
}

namespace {

// center (eval) or seeded random (train) temporal cut, padding with the last
// frame when the video is shorter than the requested length
std::vector<std::int64_t> cut_frames(std::int64_t video_len, std::int64_t want, bool train_cut,
                                     SeedStream* rng) {
  std::int64_t start;
  if (video_len <= want) {
    start = 0;
  } else if (train_cut) {
    start = rng->next_int(0, video_len - want);
  } else {
    start = (video_len - want) / 2;
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(want));
  for (std::int64_t f = 0; f < want; ++f)
    idx[static_cast<std::size_t>(f)] = std::min(start + f, video_len - 1);
  return idx;
}

Tensor clip_tensor_for_frames(const VideoClip& clip, const std::vector<std::int64_t>& frames,
                              std::int64_t h, std::int64_t w) {
  VideoClip cut(static_cast<std::int64_t>(frames.size()), clip.h, clip.w);
  for (std::size_t f = 0; f < frames.size(); ++f)
    std::copy(clip.rgb.begin() + frames[f] * clip.h * clip.w * 3,
              clip.rgb.begin() + (frames[f] + 1) * clip.h * clip.w * 3,
              cut.rgb.begin() + static_cast<std::int64_t>(f) * clip.h * clip.w * 3);
  return clip_to_tensor(resize_clip(cut, h, w));
}

}  // namespace

EpisodeBatch load_episode(const data::DatasetManifest& m, const data::Episode& ep,
                          const vistr::VisConfig& cfg, bool train_cut, std::uint64_t cut_seed) {
  SS_CHECK(m.has_video(ep.query_id), "missing query video: " + ep.query_id);
  SS_CHECK(!ep.support_ids.empty(), "episode has unresolved supports: " + ep.query_id);
  SeedStream rng(cut_seed, "cut." + ep.query_id);

  EpisodeBatch batch;
  VideoClip query = data::load_video(m, ep.query_id);
  auto q_frames = cut_frames(query.t, cfg.frames, train_cut, &rng);
  batch.query_clip = clip_tensor_for_frames(query, q_frames, cfg.input_h, cfg.input_w);

  for (const auto& sid : ep.support_ids) {
    VideoClip sup = data::load_video(m, sid);
    if (ep.mode == data::EpisodeMode::ImageSupport) {
      // single middle frame as the whole support clip
      std::vector<std::int64_t> mid{sup.t / 2};
      batch.support_clips.push_back(clip_tensor_for_frames(sup, mid, cfg.input_h, cfg.input_w));
    } else {
      auto s_frames = cut_frames(sup.t, cfg.support_frames, train_cut, &rng);
      batch.support_clips.push_back(
          clip_tensor_for_frames(sup, s_frames, cfg.input_h, cfg.input_w));
    }
  }

  data::GroundTruth gt = data::load_ground_truth(m, ep.query_id);
  batch.gt_class_ids = gt.class_ids;
  for (std::int64_t i = 0; i < gt.num_instances(); ++i) {
    const MaskSeq& full = gt.masks[static_cast<std::size_t>(i)];
    MaskSeq cut(cfg.frames, full.h, full.w);
    Tensor boxes({cfg.frames, 4});
    for (std::size_t f = 0; f < q_frames.size(); ++f) {
      std::copy(full.m.begin() + q_frames[f] * full.h * full.w,
                full.m.begin() + (q_frames[f] + 1) * full.h * full.w,
                cut.m.begin() + static_cast<std::int64_t>(f) * full.h * full.w);
      const auto& b = gt.boxes[static_cast<std::size_t>(i)][static_cast<std::size_t>(q_frames[f])];
      for (int c = 0; c < 4; ++c) boxes.at2(static_cast<std::int64_t>(f), c) = b[static_cast<std::size_t>(c)];
    }
    batch.gt_masks.push_back(cut);
    // mask-resolution target for the training loss
    MaskSeq low = downsample_mask(cut, cfg.mask_h, cfg.mask_w);
    Tensor low_t({cfg.frames, cfg.mask_h, cfg.mask_w});
    for (std::int64_t j = 0; j < low_t.numel(); ++j) low_t[j] = low.m[static_cast<std::size_t>(j)];
    batch.gt_sequences.boxes.push_back(boxes);
    batch.gt_sequences.masks.push_back(low_t);
  }
  return batch;
}

EvalReport evaluate_run(const data::DatasetManifest& m, const std::vector<data::Episode>& episodes,
                        const vistr::VisModel& model, double iou_thresh, double score_floor) {
  SS_CHECK(!episodes.empty(), "evaluate_run: no episodes");
  data::Split split = episodes[0].split;
  for (const auto& ep : episodes)
    SS_CHECK(ep.split == split, "evaluate_run: episodes must come from a single split");

  EvalReport report;
  report.mode = data::mode_name(episodes[0].mode);
  report.k = episodes[0].k;
  report.extra = episodes[0].extra;
  report.iou_thresh = iou_thresh;
  report.score_floor = score_floor;

  const auto& cfg = model.config();
  std::map<std::string, std::vector<double>> inst_bucket, cls_bucket;
  double ap_sum = 0.0;
  for (const auto& ep : episodes) {
    EpisodeBatch batch = load_episode(m, ep, cfg, /*train_cut=*/false, /*cut_seed=*/0);
    auto pred = vistr::detach(model.forward(batch.query_clip, batch.support_clips));

    std::vector<ScoredMask> scored;
    for (std::size_t i = 0; i < pred.prob.size(); ++i) {
      if (pred.prob[i] < score_floor) {
        ++report.dropped_low_score;
        continue;
      }
      ScoredMask sm;
      sm.score = pred.prob[i];
      sm.mask = prediction_to_mask(pred.mask_logits[i], m.height, m.width);
      scored.push_back(std::move(sm));
    }

    EpisodeEval ev;
    ev.query_id = ep.query_id;
    ev.ap = average_precision(scored, batch.gt_masks, iou_thresh, &report.detections);
    report.total_gt += static_cast<int>(batch.gt_masks.size());
    ev.n_gt_instances = static_cast<int>(batch.gt_masks.size());
    std::set<int> classes(batch.gt_class_ids.begin(), batch.gt_class_ids.end());
    ev.n_gt_classes = static_cast<int>(classes.size());
    ev.n_supports = static_cast<int>(ep.support_ids.size());
    if (!ep.support_ids.empty()) {
      int good = 0;
      const auto& qcls = m.video(ep.query_id).class_set;
      for (const auto& sid : ep.support_ids) {
        const auto& scls = m.video(sid).class_set;
        bool shares = false;
        for (int c : qcls)
          if (std::find(scls.begin(), scls.end(), c) != scls.end()) shares = true;
        if (shares) ++good;
      }
      ev.support_precision = static_cast<double>(good) / static_cast<double>(ep.support_ids.size());
    }
    ap_sum += ev.ap;

    auto inst_key = ev.n_gt_instances >= 5 ? std::string(">=5") : std::to_string(ev.n_gt_instances);
    auto cls_key = ev.n_gt_classes >= 4 ? std::string(">=4") : std::to_string(ev.n_gt_classes);
    inst_bucket[inst_key].push_back(ev.ap);
    cls_bucket[cls_key].push_back(ev.ap);
    report.episodes.push_back(std::move(ev));
  }
  report.map = ap_sum / static_cast<double>(episodes.size());
  auto bucket_mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  for (const auto& [key, vals] : inst_bucket) report.instance_count_map[key] = bucket_mean(vals);
  for (const auto& [key, vals] : cls_bucket) report.class_count_map[key] = bucket_mean(vals);
  return report;
}

std::string EvalReport::to_json() const {
  ordered_json j;
  j["schema_version"] = 1;
  j["mode"] = mode;
  j["k"] = k;
  j["extra"] = extra;
  j["iou_thresh"] = iou_thresh;
  j["score_floor"] = score_floor;
  j["map"] = map;
  j["dropped_low_score"] = dropped_low_score;
  j["total_gt"] = total_gt;
  j["instance_count_map"] = instance_count_map;
  j["class_count_map"] = class_count_map;
  j["detections"] = ordered_json::array();
  for (const auto& [score, tp] : detections) j["detections"].push_back({score, tp});
  j["episodes"] = ordered_json::array();
  for (const auto& e : episodes) {
    ordered_json ej;
    ej["query"] = e.query_id;
    ej["ap"] = e.ap;
    ej["instances"] = e.n_gt_instances;
    ej["classes"] = e.n_gt_classes;
    ej["supports"] = e.n_supports;
    ej["support_precision"] = e.support_precision;
    j["episodes"].push_back(ej);
  }
  return j.dump(1);
}

EvalReport EvalReport::from_json(const std::string& json_text) {
  ordered_json j = ordered_json::parse(json_text);
  SS_CHECK(j.value("schema_version", 0) == 1, "unsupported report schema");
  EvalReport r;
  r.mode = j.value("mode", "");
  r.k = j.value("k", 0);
  r.extra = j.value("extra", 0);
  r.iou_thresh = j.value("iou_thresh", 0.5);
  r.score_floor = j.value("score_floor", 0.05);
  r.map = j.value("map", 0.0);
  r.dropped_low_score = j.value("dropped_low_score", 0);
  r.total_gt = j.value("total_gt", 0);
  if (j.contains("instance_count_map"))
    r.instance_count_map = j.at("instance_count_map").get<std::map<std::string, double>>();
  if (j.contains("class_count_map"))
    r.class_count_map = j.at("class_count_map").get<std::map<std::string, double>>();
  if (j.contains("detections"))
    for (const auto& d : j.at("detections"))
      r.detections.emplace_back(d.at(0).get<double>(), d.at(1).get<bool>());
  if (j.contains("episodes")) {
    for (const auto& ej : j.at("episodes")) {
      EpisodeEval e;
      e.query_id = ej.value("query", "");
      e.ap = ej.value("ap", 0.0);
      e.n_gt_instances = ej.value("instances", 0);
      e.n_gt_classes = ej.value("classes", 0);
      e.n_supports = ej.value("supports", 0);
      e.support_precision = ej.value("support_precision", -1.0);
      r.episodes.push_back(e);
    }
  }
  return r;
}

double same_class_precision(const retrieve::EmbeddingIndex& index, const data::DatasetManifest& m,
                            int k) {
  SS_CHECK(index.size() > k, "pool too small for top-k precision");
  double total = 0.0;
  std::int64_t queries = 0;
  for (const auto& qid : index.ids()) {
    Tensor q({index.dim()});
    auto emb = index.embedding_of(qid);
    for (std::int64_t i = 0; i < index.dim(); ++i) q[i] = emb[static_cast<std::size_t>(i)];
    auto result = retrieve::knn(index, q, k, {qid});
    const auto& qcls = m.video(qid).class_set;
    int good = 0;
    for (const auto& [id, score] : result.ranked) {
      const auto& scls = m.video(id).class_set;
      for (int c : qcls)
        if (std::find(scls.begin(), scls.end(), c) != scls.end()) {
          ++good;
          break;
        }
    }
    total += static_cast<double>(good) / static_cast<double>(k);
    ++queries;
  }
  return total / static_cast<double>(queries);
}

}  // namespace selfshot::eval
