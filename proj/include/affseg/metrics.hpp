// Confusion-matrix evaluation: per-class IoU, mIoU, precision and recall
// with IGNORE exclusion on both sides, plus the fixed CSV report format.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "affseg/image_io.hpp"
#include "affseg/tensor.hpp"

namespace affseg {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes)
      : c_(num_classes),
        counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
    detail::require(num_classes >= 1, "ConfusionMatrix: need >= 1 class");
  }

  int classes() const { return c_; }

  std::uint64_t count(int gt, int pred) const {
    return counts_[static_cast<std::size_t>(gt) * c_ + pred];
  }
  std::uint64_t& count(int gt, int pred) {
    return counts_[static_cast<std::size_t>(gt) * c_ + pred];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : counts_) t += v;
    return t;
  }

  ConfusionMatrix& merge(const ConfusionMatrix& other) {
    detail::require(c_ == other.c_, "ConfusionMatrix: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i)
      counts_[i] += other.counts_[i];
    return *this;
  }

 private:
  int c_ = 0;
  std::vector<std::uint64_t> counts_;
};

// IGNORE pixels are excluded on the ground-truth side always, and on the
// prediction side as well: partial pseudo labels are evaluated only where
// they commit to a class.
inline void accumulate(ConfusionMatrix& cm, const LabelMap& pred,
                       const LabelMap& gt) {
  detail::require(pred.h == gt.h && pred.w == gt.w,
                  "accumulate: extent mismatch");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::uint8_t g = gt.labels[i];
    const std::uint8_t p = pred.labels[i];
    if (g == LabelMap::kIgnore || p == LabelMap::kIgnore) continue;
    detail::require(g < cm.classes() && p < cm.classes(),
                    "accumulate: label outside class range");
    ++cm.count(g, p);
  }
}

// Undefined means (no class had a nonzero denominator) are NaN; the report
// layer prints them as "n/a".
struct MetricSummary {
  double precision = std::numeric_limits<double>::quiet_NaN();
  double recall = std::numeric_limits<double>::quiet_NaN();
  double miou = std::numeric_limits<double>::quiet_NaN();
};

inline std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
  const int c = cm.classes();
  std::vector<double> out(c, std::numeric_limits<double>::quiet_NaN());
  for (int k = 0; k < c; ++k) {
    const std::uint64_t tp = cm.count(k, k);
    std::uint64_t fp = 0, fn = 0;
    for (int j = 0; j < c; ++j) {
      if (j == k) continue;
      fp += cm.count(j, k);
      fn += cm.count(k, j);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom > 0) out[k] = static_cast<double>(tp) / denom;
  }
  return out;
}

inline double miou(const ConfusionMatrix& cm) {
  double sum = 0.0;
  int n = 0;
  for (double v : per_class_iou(cm))
    if (!std::isnan(v)) {
      sum += v;
      ++n;
    }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / n;
}

inline std::pair<double, double> precision_recall(const ConfusionMatrix& cm) {
  const int c = cm.classes();
  double psum = 0.0, rsum = 0.0;
  int pn = 0, rn = 0;
  for (int k = 0; k < c; ++k) {
    const std::uint64_t tp = cm.count(k, k);
    std::uint64_t fp = 0, fn = 0;
    for (int j = 0; j < c; ++j) {
      if (j == k) continue;
      fp += cm.count(j, k);
      fn += cm.count(k, j);
    }
    if (tp + fp > 0) {
      psum += static_cast<double>(tp) / (tp + fp);
      ++pn;
    }
    if (tp + fn > 0) {
      rsum += static_cast<double>(tp) / (tp + fn);
      ++rn;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  return {pn == 0 ? nan : psum / pn, rn == 0 ? nan : rsum / rn};
}

inline MetricSummary summarize(const ConfusionMatrix& cm) {
  MetricSummary s;
  const auto [p, r] = precision_recall(cm);
  s.precision = p;
  s.recall = r;
  s.miou = miou(cm);
  return s;
}

// ---------------------------------------------------------------------------
// CSV report: header `stage,split,precision,recall,miou`, fixed 4-decimal
// formatting, NaN rendered as "n/a".

struct ReportRow {
  int stage = 0;
  std::string split;
  MetricSummary metrics;
};

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << "stage,split,precision,recall,miou\n";
  for (const ReportRow& r : rows)
    os << r.stage << "," << r.split << "," << format_metric(r.metrics.precision)
       << "," << format_metric(r.metrics.recall) << ","
       << format_metric(r.metrics.miou) << "\n";
  return os.str();
}

}  // namespace affseg
