#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xrt/bundle.hpp"
#include "xrt/dataset.hpp"
#include "xrt/network.hpp"

namespace xrt {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 42;
  AugmentationPolicy augmentation;
  bool feature_cache = true;

  void check() const;
};

struct EpochStats {
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> test_loss;
  std::optional<double> test_accuracy;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
};

/// `epoch,train_loss,train_acc,test_loss,test_acc`, one row per epoch;
/// test columns are empty when no test partition was evaluated.
std::string format_history_csv(const TrainHistory& history);
void write_history_csv(const TrainHistory& history, const std::filesystem::path& path);

/// Exponential moving average with alpha = 2 / (window + 1).
std::vector<double> ema(std::span<const double> values, int window);

/// Row i is the pooled base output for image i after preprocessing.
RowMatrixf extract_features(const Network& network, const Preprocessing& prep, std::span<const ImageGrid> images);

/// Loss and accuracy of a head on a labelled feature set.
struct HeadScore {
  double loss = 0.0;
  double accuracy = 0.0;
};
HeadScore score_head(const HeadWeights& head, const RowMatrixf& features, std::span<const int> labels);

/// Mini-batch SGD with momentum on mean softmax cross-entropy:
/// v <- momentum * v - lr * g; w <- w + v.
class HeadTrainer {
 public:
  HeadTrainer(HeadWeights initial, const TrainConfig& config);

  /// One pass in a seeded shuffled order; returns the sample-weighted mean
  /// loss and accuracy observed on each batch before its update.
  HeadScore run_epoch(const RowMatrixf& features, std::span<const int> labels, int epoch);

  const HeadWeights& weights() const { return head_; }

 private:
  HeadWeights head_;
  RowMatrixf velocity_w_;
  Vectorf velocity_b_;
  TrainConfig config_;
};

/// Glorot-uniform dense weights, zero bias.
HeadWeights random_head(Index features, Index classes, std::uint64_t seed);

struct LabeledFeatures {
  const RowMatrixf& features;
  std::span<const int> labels;
};

/// Trains a freshly initialised head on fixed features.
std::pair<HeadWeights, TrainHistory> train_head(const RowMatrixf& features, std::span<const int> labels,
                                                const TrainConfig& config, Index num_classes = 2,
                                                std::optional<LabeledFeatures> eval = std::nullopt);

enum class Partition { train, test };

/// Called once for every record the fine-tuner preprocesses.
using RecordObserver = std::function<void(Partition, std::string_view id)>;

struct FineTuneResult {
  ModelBundle bundle;
  TrainHistory history;
};

/// Frozen-base transfer learning: base features per image (augmented train
/// images drawn fresh each epoch), head trained by HeadTrainer starting from
/// the bundle's head. Test records only feed the history.
FineTuneResult fine_tune(const ModelBundle& bundle, const LabeledDataset& dataset, const SplitPlan& split,
                         const TrainConfig& config, const RecordObserver& observer = {});

struct Prediction {
  std::size_t index = 0;
  std::string label;
  std::vector<double> probabilities;
};

/// Loaded model plus its executor; immutable and shareable across threads.
class Predictor {
 public:
  explicit Predictor(ModelBundle bundle);

  /// Without a threshold the label is the argmax (ties -> lowest index).
  /// With one, class 0 is chosen iff its probability >= threshold.
  Prediction predict(const ImageGrid& image, std::optional<double> threshold = std::nullopt) const;
  Prediction predict(std::span<const std::uint8_t> encoded, std::optional<double> threshold = std::nullopt) const;

  const ModelBundle& bundle() const { return bundle_; }
  const std::string& id() const { return id_; }

 private:
  ModelBundle bundle_;
  Network network_;
  std::string id_;
};

Prediction predict(const ModelBundle& bundle, const ImageGrid& image);

}  // namespace xrt
