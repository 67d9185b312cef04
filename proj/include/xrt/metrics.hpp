#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xrt/tensor.hpp"

namespace xrt {

/// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;
  std::vector<std::string> labels;

  Index classes() const { return counts.rows(); }
  std::int64_t total() const { return counts.sum(); }

  friend bool operator==(const ConfusionMatrix& a, const ConfusionMatrix& b) {
    return a.labels == b.labels && a.counts.rows() == b.counts.rows() && a.counts.cols() == b.counts.cols() &&
           a.counts == b.counts;
  }
};

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, Index k,
                          std::vector<std::string> labels = {});

/// Each nonzero row divided by its sum; zero rows stay zero.
Eigen::MatrixXd normalize_rows(const ConfusionMatrix& cm);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t support = 0;

  friend bool operator==(const ClassMetrics&, const ClassMetrics&) = default;
};

struct ClassificationReport {
  std::vector<std::string> labels;
  std::vector<ClassMetrics> per_class;
  double accuracy = 0.0;
  ClassMetrics macro_avg;
  ClassMetrics weighted_avg;
  std::int64_t total = 0;

  friend bool operator==(const ClassificationReport&, const ClassificationReport&) = default;
};

/// Empty predicted column gives precision 0; empty true row gives recall 0;
/// p + r == 0 gives f1 0.
ClassificationReport report(const ConfusionMatrix& cm);

/// Round half away from zero to `digits` decimals, deciding the tie on the
/// shortest decimal representation rather than the binary value.
double round_half_away(double value, int digits = 2);

struct RocPoint {
  double threshold = 0.0;  // predicted positive iff score >= threshold
  double fpr = 0.0;
  double tpr = 0.0;

  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

struct RocCurve {
  std::vector<RocPoint> points;  // (0,0) first, (1,1) last
  double auc = 0.0;

  friend bool operator==(const RocCurve&, const RocCurve&) = default;
};

/// Threshold sweep over the distinct scores, highest first. scores[i] is the
/// probability that sample i belongs to `positive_class`.
RocCurve roc(std::span<const double> scores, std::span<const int> truth, int positive_class = 0);

/// Trapezoidal area under the points.
double auc(const RocCurve& curve);

std::string format_report_csv(const ClassificationReport& r);
ClassificationReport parse_report_csv(std::string_view text);

std::string format_curve_csv(const RocCurve& curve);
RocCurve parse_curve_csv(std::string_view text);

std::string format_confusion_csv(const ConfusionMatrix& cm, bool normalized = false);

void write_text(const std::filesystem::path& path, std::string_view text);

}  // namespace xrt
