// Stage-wise optimization: classification pre-training, full multi-task
// stage training with the seven-term objective, SGD with polynomial decay,
// and early stopping on the mean epoch loss. Training is single-threaded
// and bit-reproducible for a fixed seed.
#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "affseg/losses.hpp"
#include "affseg/model.hpp"
#include "affseg/pseudolabel.hpp"
#include "affseg/rng.hpp"

namespace affseg {

struct StageConfig {
  int max_epochs = 15;
  int patience = 5;
  float lr0 = 0.001f;
  float poly_power = 0.9f;
  int batch_size = 4;
  int num_stages = 3;
  std::uint64_t seed = 0;

  void check() const {
    detail::require(max_epochs >= 1 && patience >= 1 && batch_size >= 1 &&
                        num_stages >= 1 && lr0 > 0.0f && poly_power > 0.0f,
                    "StageConfig: all fields must be positive");
  }
};

struct TrainState {
  int stage = 0;
  int epoch = 0;
  double best_loss = 0.0;
  int epochs_since_best = 0;
  int step = 0;
};

// lr = lr0 * (1 - step/total_steps)^power, applied to every parameter
inline void sgd_poly_step(const std::vector<ParamRef>& params,
                          const std::vector<Tensor>& grads, int step,
                          int total_steps, const StageConfig& cfg) {
  detail::require(step >= 0 && step <= total_steps,
                  "sgd_poly_step: step outside [0, total_steps]");
  detail::require(params.size() == grads.size(),
                  "sgd_poly_step: parameter/gradient count mismatch");
  const double frac = 1.0 - static_cast<double>(step) / total_steps;
  const float lr = cfg.lr0 * static_cast<float>(std::pow(frac, cfg.poly_power));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    const Tensor& g = grads[i];
    detail::require(p.shape() == g.shape(), "sgd_poly_step: shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
  }
}

inline float poly_lr(int step, int total_steps, const StageConfig& cfg) {
  const double frac = 1.0 - static_cast<double>(step) / total_steps;
  return cfg.lr0 * static_cast<float>(std::pow(frac, cfg.poly_power));
}

// ---------------------------------------------------------------------------
// Loss graph over a full forward pass.

struct TrainTargets {
  std::vector<int> cls_targets;          // C binary image-level labels
  std::vector<std::uint8_t> sal_target;  // N binary saliency target
  std::vector<std::uint8_t> seg_labels;  // N class ids with 255 = IGNORE
};

inline ad::Value build_total_loss(ad::Graph& g, const FullForward& f,
                                  const TrainTargets& t, const LossWeights& w) {
  w.check();
  const ad::Value l_cls = g.mlsm_loss(f.logits, t.cls_targets);
  const ad::Value l_sal = g.bce_loss(f.p_sal, t.sal_target);
  const ad::Value l_sal_u = g.bce_loss(f.p_sal_ref_u, t.sal_target);
  const ad::Value l_sal_p = g.bce_loss(f.p_sal_ref_p, t.sal_target);
  const ad::Value l_seg = g.ce_loss(f.p_seg, t.seg_labels);
  const ad::Value l_seg_u = g.ce_loss(f.p_seg_ref_u, t.seg_labels);
  const ad::Value l_seg_p = g.ce_loss(f.p_seg_ref_p, t.seg_labels);
  return g.weighted_sum({{l_cls, w.lambda1},
                         {l_sal, w.lambda2},
                         {l_sal_u, w.lambda2},
                         {l_sal_p, w.lambda2},
                         {l_seg, w.lambda3},
                         {l_seg_u, w.lambda3},
                         {l_seg_p, w.lambda3}});
}

// Reverse-mode gradients of the full multi-task objective for one image,
// aligned with the all_parameters() order.
struct BackwardResult {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

inline BackwardResult backward_full(const ToyModel& m, const Tensor& image,
                                    const TrainTargets& targets,
                                    const LossWeights& weights) {
  ad::Graph g;
  const FullForward f = build_full_graph(g, m, image, true);
  const ad::Value total = build_total_loss(g, f, targets, weights);
  g.backward(total);
  BackwardResult out;
  out.loss = g.scalar(total);
  out.grads.reserve(f.leaves.values.size());
  for (const ad::Value v : f.leaves.values) out.grads.push_back(g.grad_tensor(v));
  return out;
}

// loss value without gradients, for finite-difference probing
inline double forward_loss(const ToyModel& m, const Tensor& image,
                           const TrainTargets& targets,
                           const LossWeights& weights) {
  ad::Graph g;
  const FullForward f = build_full_graph(g, m, image, false);
  return g.scalar(build_total_loss(g, f, targets, weights));
}

// ---------------------------------------------------------------------------
// Target preparation: PGTs live at image resolution, losses at the model's
// feature resolution.

// corner-aligned nearest-neighbour downsampling, IGNORE preserved
inline LabelMap downsample_labels(const LabelMap& labels, int fh, int fw) {
  LabelMap out(fh, fw);
  const float sy = fh > 1 ? static_cast<float>(labels.h - 1) / (fh - 1) : 0.0f;
  const float sx = fw > 1 ? static_cast<float>(labels.w - 1) / (fw - 1) : 0.0f;
  for (int i = 0; i < fh; ++i)
    for (int j = 0; j < fw; ++j) {
      const int y = std::min(labels.h - 1,
                             static_cast<int>(std::lround(i * sy)));
      const int x = std::min(labels.w - 1,
                             static_cast<int>(std::lround(j * sx)));
      out.at(i, j) = labels.at(y, x);
    }
  return out;
}

inline SaliencyMap downsample_saliency(const SaliencyMap& sal, int fh, int fw) {
  Tensor t(Shape{1, sal.h, sal.w});
  for (std::size_t i = 0; i < sal.size(); ++i) t[i] = sal.values[i];
  const Tensor r = bilinear_resize(t, fh, fw);
  SaliencyMap out(fh, fw);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.values[i] = std::min(1.0f, std::max(0.0f, r[i]));
  return out;
}

// saliency targets are binarized at 1/2 for the BCE losses
constexpr float kSalTargetThresh = 0.5f;

inline TrainTargets make_targets(const std::vector<int>& cls_targets,
                                 const LabelMap& pgt_seg,
                                 const SaliencyMap& pgt_sal, int fh, int fw) {
  TrainTargets t;
  t.cls_targets = cls_targets;
  const LabelMap seg = downsample_labels(pgt_seg, fh, fw);
  t.seg_labels = seg.labels;
  const LabelMap sal = labelmap_from_saliency(
      downsample_saliency(pgt_sal, fh, fw), kSalTargetThresh);
  t.sal_target = sal.labels;
  return t;
}

// ---------------------------------------------------------------------------
// Training loops.

struct ClsSample {
  Tensor image;
  std::vector<int> targets;  // C binary
};

struct StageSample {
  Tensor image;
  TrainTargets targets;
};

struct TrainLog {
  std::vector<double> epoch_losses;  // mean loss per finished epoch
  int steps = 0;
  bool early_stopped = false;
};

namespace detail {

inline std::vector<int> epoch_order(int n, Rng& rng) {
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = rng.uniform_int(0, i);
    std::swap(order[i], order[j]);
  }
  return order;
}

// shared epoch/batch loop; step(index) returns the per-sample loss and
// accumulates gradients into grad_sum
template <typename StepFn>
TrainLog run_epochs(const std::vector<ParamRef>& params, int n_samples,
                    const StageConfig& cfg, Rng& rng, StepFn&& step) {
  const int batches_per_epoch = (n_samples + cfg.batch_size - 1) / cfg.batch_size;
  const int total_steps = cfg.max_epochs * batches_per_epoch;

  TrainLog log;
  TrainState state;
  state.best_loss = std::numeric_limits<double>::infinity();

  std::vector<Tensor> grad_sum(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    grad_sum[i] = Tensor(params[i].tensor->shape());

  for (state.epoch = 0; state.epoch < cfg.max_epochs; ++state.epoch) {
    const std::vector<int> order = epoch_order(n_samples, rng);
    double epoch_loss = 0.0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int lo = b * cfg.batch_size;
      const int hi = std::min(n_samples, lo + cfg.batch_size);
      for (auto& t : grad_sum)
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = 0.0f;
      for (int s = lo; s < hi; ++s)
        epoch_loss += step(order[static_cast<std::size_t>(s)], grad_sum);
      const float inv = 1.0f / static_cast<float>(hi - lo);
      for (auto& t : grad_sum)
        for (std::size_t j = 0; j < t.size(); ++j) t[j] *= inv;
      sgd_poly_step(params, grad_sum, state.step, total_steps, cfg);
      ++state.step;
    }
    epoch_loss /= n_samples;
    log.epoch_losses.push_back(epoch_loss);

    if (epoch_loss < state.best_loss) {
      state.best_loss = epoch_loss;
      state.epochs_since_best = 0;
    } else {
      ++state.epochs_since_best;
      if (state.epochs_since_best >= cfg.patience) {
        log.early_stopped = true;
        break;
      }
    }
  }
  log.steps = state.step;
  return log;
}

}  // namespace detail

// Algorithm line 1: train only the backbone and the classifier head with the
// multi-label soft margin loss.
inline TrainLog train_classification(ToyModel& model,
                                     const std::vector<ClsSample>& data,
                                     const StageConfig& cfg) {
  cfg.check();
  detail::require(!data.empty(), "train_classification: empty dataset");

  std::vector<ParamRef> params;
  for (ParamRef p : all_parameters(model))
    if (is_classifier_parameter(p.name)) params.push_back(p);

  Rng rng(cfg.seed ^ 0x5eedc1a5);
  return detail::run_epochs(
      params, static_cast<int>(data.size()), cfg, rng,
      [&](int idx, std::vector<Tensor>& grad_sum) {
        const ClsSample& sample = data[static_cast<std::size_t>(idx)];
        ad::Graph g;
        const ClsForward f = build_cls_graph(g, model, sample.image, true);
        const ad::Value loss = g.mlsm_loss(f.logits, sample.targets);
        g.backward(loss);
        std::size_t k = 0;
        for (std::size_t i = 0; i < f.leaves.names.size(); ++i) {
          if (!is_classifier_parameter(f.leaves.names[i])) continue;
          const Tensor grad = g.grad_tensor(f.leaves.values[i]);
          for (std::size_t j = 0; j < grad.size(); ++j) grad_sum[k][j] += grad[j];
          ++k;
        }
        return g.scalar(loss);
      });
}

// Algorithm line 6: one multi-task training stage over the current PGTs,
// optimizing the seven-term total loss with early stopping.
inline TrainLog train_stage(ToyModel& model, const std::vector<StageSample>& data,
                            const StageConfig& cfg, int stage_index,
                            const LossWeights& weights = LossWeights{}) {
  cfg.check();
  detail::require(!data.empty(), "train_stage: empty dataset");
  detail::require(stage_index >= 0, "train_stage: stage index must be >= 0");

  const std::vector<ParamRef> params = all_parameters(model);
  Rng rng(cfg.seed ^ (0x57a6e000ull + static_cast<std::uint64_t>(stage_index)));
  return detail::run_epochs(
      params, static_cast<int>(data.size()), cfg, rng,
      [&](int idx, std::vector<Tensor>& grad_sum) {
        const StageSample& sample = data[static_cast<std::size_t>(idx)];
        const BackwardResult r =
            backward_full(model, sample.image, sample.targets, weights);
        for (std::size_t i = 0; i < r.grads.size(); ++i)
          for (std::size_t j = 0; j < r.grads[i].size(); ++j)
            grad_sum[i][j] += r.grads[i][j];
        return r.loss;
      });
}

}  // namespace affseg
