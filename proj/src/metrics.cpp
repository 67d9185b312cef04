#include "xrt/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "xrt/error.hpp"

namespace xrt {

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, Index k,
                          std::vector<std::string> labels) {
  require(truth.size() == predicted.size(), Errc::shape_mismatch,
          "confusion: " + std::to_string(truth.size()) + " true labels but " + std::to_string(predicted.size()) +
              " predictions");
  require(k >= 1, Errc::invalid_argument, "confusion: need at least one class");
  if (labels.empty()) {
    for (Index j = 0; j < k; ++j) labels.push_back(std::to_string(j));
  }
  require(static_cast<Index>(labels.size()) == k, Errc::invalid_argument, "confusion: one label per class required");
  ConfusionMatrix cm{decltype(ConfusionMatrix::counts)::Zero(k, k), std::move(labels)};
  for (std::size_t t = 0; t < truth.size(); ++t) {
    require(truth[t] >= 0 && truth[t] < k && predicted[t] >= 0 && predicted[t] < k, Errc::invalid_argument,
            "confusion: label out of range at sample " + std::to_string(t));
    ++cm.counts(truth[t], predicted[t]);
  }
  return cm;
}

Eigen::MatrixXd normalize_rows(const ConfusionMatrix& cm) {
  Eigen::MatrixXd out = cm.counts.cast<double>();
  for (Index i = 0; i < out.rows(); ++i) {
    const double s = out.row(i).sum();
    if (s > 0) out.row(i) /= s;
  }
  return out;
}

namespace {

double ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ClassificationReport report(const ConfusionMatrix& cm) {
  const Index k = cm.classes();
  require(k >= 2 && cm.counts.cols() == k, Errc::invalid_argument, "report: need a square matrix with k >= 2");
  require(cm.total() > 0, Errc::invalid_argument, "report: confusion matrix is empty");
  require((cm.counts.array() >= 0).all(), Errc::invalid_argument, "report: negative count");

  ClassificationReport r;
  r.labels = cm.labels;
  r.total = cm.total();
  for (Index j = 0; j < k; ++j) {
    ClassMetrics m;
    const std::int64_t tp = cm.counts(j, j);
    m.support = cm.counts.row(j).sum();
    m.precision = ratio(tp, cm.counts.col(j).sum());
    m.recall = ratio(tp, m.support);
    // harmonic mean of p and r as one integer ratio, so exact ties survive for rounding
    const std::int64_t predicted = cm.counts.col(j).sum();
    m.f1 = ratio(2 * tp, predicted + m.support);
    r.per_class.push_back(m);
  }
  r.accuracy = ratio(cm.counts.trace(), r.total);

  r.macro_avg.support = r.weighted_avg.support = r.total;
  for (const ClassMetrics& m : r.per_class) {
    const double w = static_cast<double>(m.support);
    r.macro_avg.precision += m.precision;
    r.macro_avg.recall += m.recall;
    r.macro_avg.f1 += m.f1;
    r.weighted_avg.precision += w * m.precision;
    r.weighted_avg.recall += w * m.recall;
    r.weighted_avg.f1 += w * m.f1;
  }
  const auto kd = static_cast<double>(k), n = static_cast<double>(r.total);
  r.macro_avg.precision /= kd;
  r.macro_avg.recall /= kd;
  r.macro_avg.f1 /= kd;
  r.weighted_avg.precision /= n;
  r.weighted_avg.recall /= n;
  r.weighted_avg.f1 /= n;
  return r;
}

double round_half_away(double value, int digits) {
  require(digits >= 0 && digits <= 15, Errc::invalid_argument, "round_half_away: digits must be in [0, 15]");
  if (!std::isfinite(value)) return value;
  char buf[512];
  const auto res = std::to_chars(buf, buf + sizeof buf, std::fabs(value), std::chars_format::fixed);
  std::string text(buf, res.ptr);
  const auto dot = text.find('.');
  if (dot == std::string::npos || text.size() - dot - 1 <= static_cast<std::size_t>(digits)) return value;

  const bool up = text[dot + 1 + static_cast<std::size_t>(digits)] >= '5';
  std::string kept = text.substr(0, dot) + text.substr(dot + 1, static_cast<std::size_t>(digits));
  if (up) {
    auto i = kept.size();
    while (i > 0 && kept[i - 1] == '9') kept[--i] = '0';
    if (i == 0) {
      kept.insert(kept.begin(), '1');
    } else {
      ++kept[i - 1];
    }
  }
  kept.insert(kept.size() - static_cast<std::size_t>(digits), ".");
  double out = 0.0;
  std::from_chars(kept.data(), kept.data() + kept.size(), out);
  return std::copysign(out, value);
}

RocCurve roc(std::span<const double> scores, std::span<const int> truth, int positive_class) {
  require(scores.size() == truth.size(), Errc::shape_mismatch, "roc: scores and labels differ in length");
  std::int64_t p = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    require(scores[i] >= 0.0 && scores[i] <= 1.0, Errc::invalid_argument, "roc: scores must lie in [0, 1]");
    p += truth[i] == positive_class;
  }
  const auto n = static_cast<std::int64_t>(scores.size()) - p;
  require(p > 0 && n > 0, Errc::invalid_argument, "roc: both classes must be present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::int64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (truth[order[i]] == positive_class ? tp : fp) += 1;
    curve.points.push_back({s, ratio(fp, n), ratio(tp, p)});
  }
  curve.auc = auc(curve);
  return curve;
}

double auc(const RocCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const RocPoint &a = curve.points[i - 1], &b = curve.points[i];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
  }
  return area;
}

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string num2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", round_half_away(v, 2));
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, int line_no) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  require(res.ec == std::errc() && res.ptr == end, Errc::format,
          "line " + std::to_string(line_no) + ": '" + s + "' is not a number");
  return v;
}

std::vector<std::string> csv_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

constexpr std::string_view kReportHeader = "class,precision,recall,f1,support,precision_2dp,recall_2dp,f1_2dp";

}  // namespace

std::string format_report_csv(const ClassificationReport& r) {
  std::ostringstream out;
  out << kReportHeader << '\n';
  const auto row = [&](const std::string& name, const ClassMetrics& m) {
    out << name << ',' << num(m.precision) << ',' << num(m.recall) << ',' << num(m.f1) << ',' << m.support << ','
        << num2(m.precision) << ',' << num2(m.recall) << ',' << num2(m.f1) << '\n';
  };
  for (std::size_t j = 0; j < r.per_class.size(); ++j) row(r.labels.at(j), r.per_class[j]);
  // accuracy sits in the f1 column, as in the usual printed report
  out << "accuracy,,," << num(r.accuracy) << ',' << r.total << ",,," << num2(r.accuracy) << '\n';
  row("macro avg", r.macro_avg);
  row("weighted avg", r.weighted_avg);
  return out.str();
}

ClassificationReport parse_report_csv(std::string_view text) {
  const auto lines = csv_lines(text);
  require(!lines.empty() && lines[0] == kReportHeader, Errc::format, "report CSV: missing or unexpected header");
  ClassificationReport r;
  bool seen_accuracy = false, seen_macro = false, seen_weighted = false;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const int line_no = static_cast<int>(i) + 1;
    const auto cells = split_csv_line(lines[i]);
    require(cells.size() == 8, Errc::format, "report CSV line " + std::to_string(line_no) + ": expected 8 columns");
    const auto support = static_cast<std::int64_t>(parse_double(cells[4], line_no));
    if (cells[0] == "accuracy") {
      r.accuracy = parse_double(cells[3], line_no);
      r.total = support;
      seen_accuracy = true;
      continue;
    }
    ClassMetrics m{parse_double(cells[1], line_no), parse_double(cells[2], line_no), parse_double(cells[3], line_no),
                   support};
    if (cells[0] == "macro avg") {
      r.macro_avg = m;
      seen_macro = true;
    } else if (cells[0] == "weighted avg") {
      r.weighted_avg = m;
      seen_weighted = true;
    } else {
      require(!seen_accuracy, Errc::format, "report CSV line " + std::to_string(line_no) + ": class row after summary");
      r.labels.push_back(cells[0]);
      r.per_class.push_back(m);
    }
  }
  require(seen_accuracy && seen_macro && seen_weighted, Errc::format, "report CSV: missing summary rows");
  return r;
}

std::string format_curve_csv(const RocCurve& curve) {
  std::ostringstream out;
  out << "threshold,fpr,tpr\n";
  for (const RocPoint& p : curve.points) out << num(p.threshold) << ',' << num(p.fpr) << ',' << num(p.tpr) << '\n';
  return out.str();
}

RocCurve parse_curve_csv(std::string_view text) {
  const auto lines = csv_lines(text);
  require(!lines.empty() && lines[0] == "threshold,fpr,tpr", Errc::format, "curve CSV: missing or unexpected header");
  RocCurve curve;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const int line_no = static_cast<int>(i) + 1;
    const auto cells = split_csv_line(lines[i]);
    require(cells.size() == 3, Errc::format, "curve CSV line " + std::to_string(line_no) + ": expected 3 columns");
    curve.points.push_back(
        {parse_double(cells[0], line_no), parse_double(cells[1], line_no), parse_double(cells[2], line_no)});
  }
  curve.auc = auc(curve);
  return curve;
}

std::string format_confusion_csv(const ConfusionMatrix& cm, bool normalized) {
  std::ostringstream out;
  out << "true";
  for (const auto& l : cm.labels) out << ',' << l;
  out << '\n';
  const Eigen::MatrixXd norm = normalize_rows(cm);
  for (Index i = 0; i < cm.classes(); ++i) {
    out << cm.labels.at(static_cast<std::size_t>(i));
    for (Index j = 0; j < cm.classes(); ++j) {
      out << ',';
      if (normalized) {
        out << num(norm(i, j));
      } else {
        out << cm.counts(i, j);
      }
    }
    out << '\n';
  }
  return out.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot write '" + path.string() + "'");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  require(static_cast<bool>(out), Errc::io, "write to '" + path.string() + "' failed");
}

}  // namespace xrt
