// The full iterative weakly supervised pipeline: classifier pre-training,
// initial pseudo labels from multi-scale CAM plus the saliency oracle, then
// per stage: multi-task training, evaluation of the pairwise-refined
// segmentation, affinity-refined multi-scale CAM, CRF-smoothed saliency PGT
// update, and segmentation PGT regeneration.
//
// Reporting convention: the initial PGT is stage 0; training round s
// (1-based) emits a "seg" row for the model it produced and a "pgt" row for
// the labels it regenerated, so a run with S stages reports pgt rows
// 0..S and seg rows 1..S.
#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "affseg/cam.hpp"
#include "affseg/checkpoint.hpp"
#include "affseg/image_io.hpp"
#include "affseg/metrics.hpp"
#include "affseg/model.hpp"
#include "affseg/pseudolabel.hpp"
#include "affseg/synthetic.hpp"
#include "affseg/trainer.hpp"

namespace affseg {

struct PipelineConfig {
  ModelConfig model;
  StageConfig train;
  ThresholdConfig thresholds;
  CrfParams crf;
  LossWeights weights;
  std::vector<float> scales{0.5f, 1.0f, 1.5f};
  int dump_count = 0;        // per-stage PGM dumps (0 = none)
  std::string out_dir;       // empty = no file output
  std::function<void(const std::string&)> log;  // may be empty
};

struct StageRecord {
  int stage = 0;
  std::string split;       // "pgt" or "seg"
  MetricSummary metrics;
  std::string provenance;  // which CAM produced a PGT / which head predicted
};

struct PipelineResult {
  std::vector<StageRecord> rows;
  std::vector<LabelMap> final_predictions;
  ToyModel model;
};

namespace detail {

inline void pipe_log(const PipelineConfig& cfg, const std::string& msg) {
  if (cfg.log) cfg.log(msg);
}

// single-scale CAM from the classification branch only
inline CamEvaluator plain_cam_evaluator(const ToyModel& m) {
  return [&m](const Tensor& image) {
    ad::Graph g;
    const ClsForward f = build_cls_graph(g, m, image, false);
    return normalize_cam(compute_cam(g.value_tensor(f.features), m.classifier()));
  };
}

// CAM refined by the cross-task pairwise affinity of the same forward pass
inline CamEvaluator refined_cam_evaluator(const ToyModel& m) {
  return [&m](const Tensor& image) {
    ad::Graph g;
    const FullForward f = build_full_graph(g, m, image, false);
    const CamStack cam =
        normalize_cam(compute_cam(g.value_tensor(f.features), m.classifier()));
    const PairwiseAffinity a(g.value_tensor(f.a_ct_pair), f.fh, f.fw);
    return refine_cam(cam, a);
  };
}

inline SaliencyMap tensor_to_saliency(const Tensor& t, int h, int w) {
  SaliencyMap out(h, w);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.values[i] = std::min(1.0f, std::max(0.0f, t[i]));
  return out;
}

// upsample the per-pixel class distribution and take the argmax
inline LabelMap prediction_to_labels(const Tensor& probs, int h, int w) {
  const Tensor up = bilinear_resize(probs, h, w);
  const int c = up.extent(0);
  LabelMap out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best = 0;
      float best_p = up.at(0, y, x);
      for (int k = 1; k < c; ++k)
        if (up.at(k, y, x) > best_p) {
          best_p = up.at(k, y, x);
          best = k;
        }
      out.at(y, x) = static_cast<std::uint8_t>(best);
    }
  return out;
}

inline void atomic_write(const std::filesystem::path& path,
                         const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << content;
    if (!os) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<ReportRow> to_report_rows(const std::vector<StageRecord>& rs) {
  std::vector<ReportRow> rows;
  for (const StageRecord& r : rs) rows.push_back({r.stage, r.split, r.metrics});
  return rows;
}

inline void emit_files(const PipelineConfig& cfg,
                       const std::vector<StageRecord>& rows) {
  if (cfg.out_dir.empty()) return;
  std::filesystem::create_directories(cfg.out_dir);
  atomic_write(std::filesystem::path(cfg.out_dir) / "report.csv",
               report_csv(to_report_rows(rows)));
  std::string prov;
  for (const StageRecord& r : rows)
    prov += "stage" + std::to_string(r.stage) + " " + r.split + " <- " +
            r.provenance + "\n";
  atomic_write(std::filesystem::path(cfg.out_dir) / "provenance.txt", prov);
}

inline void dump_stage_maps(const PipelineConfig& cfg, int stage,
                            const std::vector<SyntheticSample>& data,
                            const std::vector<LabelMap>& pgt,
                            const std::vector<SaliencyMap>& sal,
                            const std::vector<CamStack>* cams) {
  if (cfg.out_dir.empty() || cfg.dump_count <= 0) return;
  const std::filesystem::path dir(cfg.out_dir);
  const int n = std::min<int>(cfg.dump_count, static_cast<int>(data.size()));
  for (int i = 0; i < n; ++i) {
    const std::string suffix = "_" + std::to_string(i) + ".pgm";
    const std::string stem = "stage" + std::to_string(stage);
    write_labelmap_pgm(dir / (stem + "_pgt" + suffix), pgt[i]);
    write_saliency_pgm(dir / (stem + "_sal" + suffix), sal[i]);
    if (cams) {
      const CamStack& cam = (*cams)[i];
      for (int c = 0; c < cam.classes(); ++c) {
        Tensor slice(Shape{cam.height(), cam.width()});
        for (std::size_t p = 0; p < slice.size(); ++p)
          slice[p] = cam.maps[static_cast<std::size_t>(c) * slice.size() + p];
        write_gray_pgm(
            dir / (stem + "_cam" + std::to_string(c + 1) + suffix), slice,
            cam.height(), cam.width());
      }
    }
  }
}

}  // namespace detail

// evaluate one PGT or prediction set against the held-out masks
inline MetricSummary evaluate_labelmaps(const std::vector<LabelMap>& pred,
                                        const std::vector<SyntheticSample>& data,
                                        int num_classes) {
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < data.size(); ++i)
    accumulate(cm, pred[i], data[i].gt_mask);
  return summarize(cm);
}

inline PipelineResult run_pipeline(const std::vector<SyntheticSample>& data,
                                   const PipelineConfig& cfg) {
  detail::require(!data.empty(), "run_pipeline: empty dataset");
  cfg.train.check();
  cfg.thresholds.check();
  detail::require(!cfg.scales.empty(), "run_pipeline: no scales");

  const int num_classes = kNumShapeClasses + 1;  // background + shapes
  const int h = data[0].image.extent(1), w = data[0].image.extent(2);

  PipelineResult result;

  // line 1: classification pre-training on image-level labels
  std::vector<ClsSample> cls_data;
  for (const SyntheticSample& s : data) {
    std::vector<int> targets(kNumShapeClasses, 0);
    for (int c : s.image_labels) targets[static_cast<std::size_t>(c - 1)] = 1;
    cls_data.push_back({s.image, targets});
  }
  ModelConfig model_cfg = cfg.model;
  model_cfg.num_fg_classes = kNumShapeClasses;
  result.model = make_model(model_cfg, cfg.train.seed);
  detail::pipe_log(cfg, "training classification branch");
  train_classification(result.model, cls_data, cfg.train);

  // lines 2-4: initial pseudo ground truth from unrefined multi-scale CAM
  detail::pipe_log(cfg, "generating initial pseudo labels");
  std::vector<SaliencyMap> sal_pgt;
  std::vector<LabelMap> seg_pgt;
  std::vector<CamStack> cam_dump;
  for (const SyntheticSample& s : data) {
    sal_pgt.push_back(update_sal_pgt(std::nullopt, s.oracle_saliency, s.image,
                                     cfg.crf, 0));
    const CamStack mscam = multiscale_cam(
        detail::plain_cam_evaluator(result.model), s.image, cfg.scales);
    seg_pgt.push_back(generate_seg_pgt(mscam, sal_pgt.back(), s.image_labels,
                                       cfg.thresholds));
    if (cfg.dump_count > 0) cam_dump.push_back(mscam);
  }
  result.rows.push_back({0, "pgt", evaluate_labelmaps(seg_pgt, data, num_classes),
                         "raw_multiscale_cam"});
  detail::emit_files(cfg, result.rows);
  detail::dump_stage_maps(cfg, 0, data, seg_pgt, sal_pgt,
                          cfg.dump_count > 0 ? &cam_dump : nullptr);

  // feature extents are fixed by the backbone; probe once
  int fh = 0, fw = 0;
  {
    ad::Graph probe;
    const ClsForward f = build_cls_graph(probe, result.model, data[0].image, false);
    fh = f.fh;
    fw = f.fw;
  }

  // lines 5-19: iterate training and pseudo-label updating
  for (int stage = 1; stage <= cfg.train.num_stages; ++stage) {
    detail::pipe_log(cfg, "stage " + std::to_string(stage) + ": training");
    std::vector<StageSample> stage_data;
    for (std::size_t i = 0; i < data.size(); ++i) {
      StageSample s;
      s.image = data[i].image;
      s.targets = make_targets(cls_data[i].targets, seg_pgt[i], sal_pgt[i],
                               fh, fw);
      stage_data.push_back(std::move(s));
    }
    const TrainLog log = train_stage(result.model, stage_data, cfg.train, stage,
                                     cfg.weights);
    detail::pipe_log(cfg, "stage " + std::to_string(stage) + ": trained " +
                              std::to_string(log.epoch_losses.size()) +
                              " epochs, final loss " +
                              std::to_string(log.epoch_losses.back()));

    // inference: pairwise-refined segmentation prediction
    std::vector<LabelMap> predictions;
    std::vector<SaliencyMap> refined_sal;
    for (const SyntheticSample& s : data) {
      const MultiTaskOutput out = forward_multitask(result.model, s.image);
      predictions.push_back(detail::prediction_to_labels(out.p_seg_ref_p, h, w));
      const Tensor sal_up = bilinear_resize(out.p_sal_ref_p, h, w);
      refined_sal.push_back(detail::tensor_to_saliency(sal_up, h, w));
    }
    result.rows.push_back(
        {stage, "seg", evaluate_labelmaps(predictions, data, num_classes),
         "pairwise_refined_prediction(trained_on=pgt" +
             std::to_string(stage - 1) + ")"});
    result.final_predictions = std::move(predictions);

    // pseudo-label updating (also after the last stage, for the report)
    detail::pipe_log(cfg, "stage " + std::to_string(stage) +
                              ": updating pseudo labels");
    std::vector<CamStack> stage_cams;
    for (std::size_t i = 0; i < data.size(); ++i) {
      sal_pgt[i] = update_sal_pgt(refined_sal[i], data[i].oracle_saliency,
                                  data[i].image, cfg.crf, stage);
      const CamStack mscam = multiscale_cam(
          detail::refined_cam_evaluator(result.model), data[i].image,
          cfg.scales);
      seg_pgt[i] = generate_seg_pgt(mscam, sal_pgt[i], data[i].image_labels,
                                    cfg.thresholds);
      if (cfg.dump_count > 0) stage_cams.push_back(mscam);
    }
    result.rows.push_back(
        {stage, "pgt", evaluate_labelmaps(seg_pgt, data, num_classes),
         "refined_multiscale_cam(stage=" + std::to_string(stage) + ")"});
    detail::emit_files(cfg, result.rows);
    detail::dump_stage_maps(cfg, stage, data, seg_pgt, sal_pgt,
                            cfg.dump_count > 0 ? &stage_cams : nullptr);
  }

  if (!cfg.out_dir.empty())
    save_checkpoint(std::filesystem::path(cfg.out_dir) / "checkpoint",
                    result.model, cfg.train);
  return result;
}

}  // namespace affseg
