#include "xrt/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "xrt/random.hpp"

namespace xrt {

void TrainConfig::check() const {
  require(epochs >= 1, Errc::invalid_argument, "epochs must be >= 1");
  require(batch_size >= 1, Errc::invalid_argument, "batch_size must be >= 1");
  require(learning_rate > 0.0 && std::isfinite(learning_rate), Errc::invalid_argument, "learning_rate must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, Errc::invalid_argument, "momentum must lie in [0, 1)");
  augmentation.check();
}

std::string format_history_csv(const TrainHistory& history) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,train_loss,train_acc,test_loss,test_acc\n";
  for (std::size_t e = 0; e < history.epochs.size(); ++e) {
    const EpochStats& s = history.epochs[e];
    out << e + 1 << ',' << s.train_loss << ',' << s.train_accuracy << ',';
    if (s.test_loss) out << *s.test_loss;
    out << ',';
    if (s.test_accuracy) out << *s.test_accuracy;
    out << '\n';
  }
  return out.str();
}

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot write '" + path.string() + "'");
  out << format_history_csv(history);
}

std::vector<double> ema(std::span<const double> values, int window) {
  std::vector<double> out;
  const double alpha = 2.0 / (window + 1.0);
  for (double v : values) out.push_back(out.empty() ? v : alpha * v + (1.0 - alpha) * out.back());
  return out;
}

RowMatrixf extract_features(const Network& network, const Preprocessing& prep, std::span<const ImageGrid> images) {
  RowMatrixf out(static_cast<Index>(images.size()), network.feature_count());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.row(static_cast<Index>(i)) = network.features(preprocess(images[i], prep));
  }
  return out;
}

namespace {

RowMatrixf one_hot(std::span<const int> labels, Index classes) {
  RowMatrixf y = RowMatrixf::Zero(static_cast<Index>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < classes, Errc::invalid_argument, "label index out of range");
    y(static_cast<Index>(i), labels[i]) = 1.0f;
  }
  return y;
}

/// Argmax with ties resolved toward the lowest index.
Index argmax(const auto& row) {
  Index best = 0;
  for (Index k = 1; k < row.size(); ++k) {
    if (row(k) > row(best)) best = k;
  }
  return best;
}

}  // namespace

HeadScore score_head(const HeadWeights& head, const RowMatrixf& features, std::span<const int> labels) {
  require(static_cast<std::size_t>(features.rows()) == labels.size(), Errc::shape_mismatch,
          "score_head: feature rows and label count differ");
  if (labels.empty()) return {};
  const RowMatrixf probs = head_probabilities(features, head);
  HeadScore s;
  s.loss = cross_entropy(probs, one_hot(labels, head.weights.cols()));
  std::size_t correct = 0;
  for (Index r = 0; r < probs.rows(); ++r) correct += argmax(probs.row(r)) == labels[static_cast<std::size_t>(r)];
  s.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  return s;
}

HeadTrainer::HeadTrainer(HeadWeights initial, const TrainConfig& config)
    : head_(std::move(initial)),
      velocity_w_(RowMatrixf::Zero(head_.weights.rows(), head_.weights.cols())),
      velocity_b_(Vectorf::Zero(head_.bias.size())),
      config_(config) {
  config_.check();
}

HeadScore HeadTrainer::run_epoch(const RowMatrixf& features, std::span<const int> labels, int epoch) {
  const auto n = static_cast<std::size_t>(features.rows());
  require(n == labels.size() && n > 0, Errc::shape_mismatch, "run_epoch: need one label per feature row");
  require(features.cols() == head_.weights.rows(), Errc::shape_mismatch,
          "run_epoch: feature width " + std::to_string(features.cols()) + " does not match head input " +
              std::to_string(head_.weights.rows()));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(config_.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order.begin(), order.end());

  const auto lr = static_cast<float>(config_.learning_rate), mu = static_cast<float>(config_.momentum);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  const auto batch = static_cast<std::size_t>(config_.batch_size);
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t end = std::min(n, start + batch);
    RowMatrixf xb(static_cast<Index>(end - start), features.cols());
    std::vector<int> yb;
    for (std::size_t i = start; i < end; ++i) {
      xb.row(static_cast<Index>(i - start)) = features.row(static_cast<Index>(order[i]));
      yb.push_back(labels[order[i]]);
    }
    const RowMatrixf probs = head_probabilities(xb, head_);
    for (Index r = 0; r < probs.rows(); ++r) correct += argmax(probs.row(r)) == yb[static_cast<std::size_t>(r)];

    const auto g = head_backward(xb, one_hot(yb, head_.weights.cols()), head_.weights, head_.bias);
    loss_sum += g.loss * static_cast<double>(end - start);
    velocity_w_ = mu * velocity_w_ - lr * g.d_weights;
    velocity_b_ = mu * velocity_b_ - lr * g.d_bias;
    head_.weights += velocity_w_;
    head_.bias += velocity_b_;
  }
  return {loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
}

HeadWeights random_head(Index features, Index classes, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(features + classes));
  HeadWeights h{RowMatrixf(features, classes), Vectorf::Zero(classes)};
  for (Index i = 0; i < h.weights.size(); ++i) h.weights.data()[i] = static_cast<float>(rng.uniform(-bound, bound));
  return h;
}

std::pair<HeadWeights, TrainHistory> train_head(const RowMatrixf& features, std::span<const int> labels,
                                                const TrainConfig& config, Index num_classes,
                                                std::optional<LabeledFeatures> eval) {
  config.check();
  require(static_cast<std::size_t>(features.rows()) == labels.size(), Errc::shape_mismatch,
          "train_head: feature rows and label count differ");
  require(features.allFinite(), Errc::invalid_argument, "train_head: features must be finite");
  for (int k = 0; k < num_classes; ++k) {
    require(std::count(labels.begin(), labels.end(), k) > 0, Errc::invalid_argument,
            "train_head: class " + std::to_string(k) + " has no samples (degenerate single-class input)");
  }

  HeadTrainer trainer(random_head(features.cols(), num_classes, config.seed), config);
  TrainHistory history;
  for (int e = 0; e < config.epochs; ++e) {
    const HeadScore s = trainer.run_epoch(features, labels, e);
    EpochStats stats{s.loss, s.accuracy, std::nullopt, std::nullopt};
    if (eval) {
      const HeadScore t = score_head(trainer.weights(), eval->features, eval->labels);
      stats.test_loss = t.loss;
      stats.test_accuracy = t.accuracy;
    }
    history.epochs.push_back(stats);
  }
  return {trainer.weights(), std::move(history)};
}

FineTuneResult fine_tune(const ModelBundle& bundle, const LabeledDataset& dataset, const SplitPlan& split,
                         const TrainConfig& config, const RecordObserver& observer) {
  config.check();
  check_split(split, dataset);
  const Network network(bundle);
  const Preprocessing& prep = bundle.preprocessing;
  const auto notify = [&](Partition p, const std::string& id) {
    if (observer) observer(p, id);
  };

  std::vector<const ImageRecord*> train, test;
  std::vector<int> train_labels, test_labels;
  for (const auto& id : split.train_ids) {
    train.push_back(&dataset.record(id));
    train_labels.push_back(static_cast<int>(label_index(train.back()->label)));
  }
  for (const auto& id : split.test_ids) {
    test.push_back(&dataset.record(id));
    test_labels.push_back(static_cast<int>(label_index(test.back()->label)));
  }
  require(!train.empty(), Errc::invalid_argument, "fine_tune: empty training partition");

  const auto features_of = [&](const std::vector<const ImageRecord*>& records, Partition part,
                               const AugmentationPolicy* policy, std::uint64_t draw_base) {
    RowMatrixf out(static_cast<Index>(records.size()), network.feature_count());
    for (std::size_t i = 0; i < records.size(); ++i) {
      notify(part, records[i]->id);
      const ImageGrid img = policy ? augment(records[i]->pixels, *policy, draw_base + i) : records[i]->pixels;
      out.row(static_cast<Index>(i)) = network.features(preprocess(img, prep));
    }
    return out;
  };

  const RowMatrixf test_features = features_of(test, Partition::test, nullptr, 0);
  const bool cached = config.feature_cache && config.augmentation.is_identity();
  RowMatrixf train_features;
  if (cached) train_features = features_of(train, Partition::train, nullptr, 0);

  HeadTrainer trainer(head_from_bundle(bundle), config);
  FineTuneResult result{bundle, {}};
  for (int e = 0; e < config.epochs; ++e) {
    if (!cached) {
      train_features = features_of(train, Partition::train, &config.augmentation,
                                   static_cast<std::uint64_t>(e) * train.size());
    }
    const HeadScore s = trainer.run_epoch(train_features, train_labels, e);
    EpochStats stats{s.loss, s.accuracy, std::nullopt, std::nullopt};
    if (!test.empty()) {
      const HeadScore t = score_head(trainer.weights(), test_features, test_labels);
      stats.test_loss = t.loss;
      stats.test_accuracy = t.accuracy;
    }
    result.history.epochs.push_back(stats);
  }
  store_head(result.bundle, trainer.weights());
  return result;
}

Predictor::Predictor(ModelBundle bundle) : bundle_(std::move(bundle)), network_(bundle_), id_(model_id(bundle_)) {}

Prediction Predictor::predict(const ImageGrid& image, std::optional<double> threshold) const {
  const RowMatrixf probs = network_.probabilities(preprocess(image, bundle_.preprocessing));
  Prediction p;
  for (Index k = 0; k < probs.cols(); ++k) p.probabilities.push_back(probs(0, k));
  if (threshold) {
    p.index = p.probabilities[0] >= *threshold ? 0 : 1;
  } else {
    p.index = static_cast<std::size_t>(argmax(probs.row(0)));
  }
  p.label = bundle_.class_labels.at(p.index);
  return p;
}

Prediction Predictor::predict(std::span<const std::uint8_t> encoded, std::optional<double> threshold) const {
  return predict(decode_image(encoded), threshold);
}

Prediction predict(const ModelBundle& bundle, const ImageGrid& image) {
  const Network network(bundle);
  const RowMatrixf probs = network.probabilities(preprocess(image, bundle.preprocessing));
  Prediction p;
  for (Index k = 0; k < probs.cols(); ++k) p.probabilities.push_back(probs(0, k));
  p.index = static_cast<std::size_t>(argmax(probs.row(0)));
  p.label = bundle.class_labels.at(p.index);
  return p;
}

}  // namespace xrt
