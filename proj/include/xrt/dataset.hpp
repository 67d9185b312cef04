#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "xrt/architectures.hpp"
#include "xrt/image.hpp"

namespace xrt {

enum class Label { covid = 0, normal = 1 };

inline constexpr std::array<Label, 2> kLabels{Label::covid, Label::normal};

std::string_view label_name(Label label);
Label parse_label(std::string_view text);
inline std::size_t label_index(Label label) { return static_cast<std::size_t>(label); }

struct ImageRecord {
  std::string id;  // "<label>/<file name>" for scanned data
  ImageGrid pixels;
  Label label = Label::normal;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct LabeledDataset {
  std::vector<ImageRecord> records;
  std::map<Label, std::size_t> class_counts;
  std::vector<std::string> warnings;  // unreadable files skipped by scan_directory

  void add(ImageRecord record);
  const ImageRecord& record(std::string_view id) const;
};

/// Reads root/<label>/*.{pgm,ppm,png}. Records are sorted by id; files that
/// fail to decode are listed in warnings and skipped.
LabeledDataset scan_directory(const std::filesystem::path& root);

/// Writes root/<label>/<name>.pgm|ppm for every record.
void write_dataset(const LabeledDataset& dataset, const std::filesystem::path& root);

ImageRecord augment(const ImageRecord& record, const AugmentationPolicy& policy, std::uint64_t draw_index);

struct SplitPlan {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::uint64_t seed = 42;
  Ratio train_fraction{4, 5};

  friend bool operator==(const SplitPlan&, const SplitPlan&) = default;
};

/// Per class (in dataset order), a seeded shuffle; the first
/// round(fraction * n_c) records go to train, the rest to test.
SplitPlan stratified_split(const LabeledDataset& dataset, const Ratio& fraction, std::uint64_t seed);

/// Two tab-separated columns: id, partition ("train" / "test"). A leading
/// '#' line records seed and fraction.
std::string format_split(const SplitPlan& plan);
SplitPlan parse_split(std::string_view text);
void write_split(const SplitPlan& plan, const std::filesystem::path& path);
SplitPlan read_split(const std::filesystem::path& path);

/// Throws unless the plan covers every dataset id exactly once.
void check_split(const SplitPlan& plan, const LabeledDataset& dataset);

struct SynthOptions {
  Index n_per_class = 200;
  Index image_size = 64;
  std::uint64_t seed = 42;
  double background = 128.0;
  double noise = 10.0;
  /// Minimum mean-intensity gap between any covid image and the background,
  /// in grey levels. Must stay below 255 - background.
  double margin = 80.0;
};

/// Grey noise images; "covid" images add a few bright diffuse blobs whose
/// mean contribution is fixed, so classes separate on mean intensity.
LabeledDataset synth_dataset(const SynthOptions& options);

double mean_intensity(const ImageGrid& grid);

}  // namespace xrt
