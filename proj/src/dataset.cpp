#include "xrt/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "xrt/random.hpp"

namespace xrt {

std::string_view label_name(Label label) { return label == Label::covid ? "covid" : "normal"; }

Label parse_label(std::string_view text) {
  if (text == "covid") return Label::covid;
  if (text == "normal") return Label::normal;
  throw Error(Errc::invalid_argument, "unknown label '" + std::string(text) + "' (expected covid or normal)");
}

void LabeledDataset::add(ImageRecord record) {
  ++class_counts[record.label];
  records.push_back(std::move(record));
}

const ImageRecord& LabeledDataset::record(std::string_view id) const {
  auto it = std::find_if(records.begin(), records.end(), [&](const ImageRecord& r) { return r.id == id; });
  require(it != records.end(), Errc::invalid_argument, "dataset has no record '" + std::string(id) + "'");
  return *it;
}

namespace {

bool supported_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".pgm" || ext == ".ppm" || ext == ".png";
}

}  // namespace

LabeledDataset scan_directory(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  require(fs::is_directory(root), Errc::io, "dataset root '" + root.string() + "' is not a directory");
  LabeledDataset ds;
  bool any_label_dir = false;
  std::vector<std::pair<std::string, Label>> files;
  for (Label label : kLabels) {
    const fs::path dir = root / std::string(label_name(label));
    if (!fs::is_directory(dir)) continue;
    any_label_dir = true;
    ds.class_counts[label] = 0;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && supported_extension(entry.path())) {
        files.emplace_back(std::string(label_name(label)) + "/" + entry.path().filename().string(), label);
      }
    }
  }
  require(any_label_dir, Errc::invalid_argument,
          "dataset root '" + root.string() + "' has no labeled subdirectories (expected covid/ and/or normal/)");
  std::sort(files.begin(), files.end());
  for (const auto& [id, label] : files) {
    try {
      ds.add({id, read_image(root / id), label});
    } catch (const Error& e) {
      ds.warnings.push_back(e.what());
    }
  }
  return ds;
}

void write_dataset(const LabeledDataset& dataset, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  for (Label label : kLabels) fs::create_directories(root / std::string(label_name(label)));
  for (const ImageRecord& r : dataset.records) {
    fs::path path = root / r.id;
    if (path.parent_path() == root) path = root / std::string(label_name(r.label)) / r.id;
    path.replace_extension(r.pixels.channels == 1 ? ".pgm" : ".ppm");
    const auto bytes = encode_pnm(r.pixels);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), Errc::io, "cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
}

ImageRecord augment(const ImageRecord& record, const AugmentationPolicy& policy, std::uint64_t draw_index) {
  return {record.id, augment(record.pixels, policy, draw_index), record.label};
}

SplitPlan stratified_split(const LabeledDataset& dataset, const Ratio& fraction, std::uint64_t seed) {
  require(fraction.den > 0 && fraction.num >= 0 && fraction.num <= fraction.den, Errc::invalid_argument,
          "split fraction must lie in [0, 1]");
  SplitPlan plan;
  plan.seed = seed;
  plan.train_fraction = fraction;
  Rng rng(seed);
  for (Label label : kLabels) {
    std::vector<std::string> ids;
    for (const ImageRecord& r : dataset.records) {
      if (r.label == label) ids.push_back(r.id);
    }
    require(!ids.empty(), Errc::invalid_argument,
            "class '" + std::string(label_name(label)) + "' has no records; cannot stratify");
    rng.shuffle(ids.begin(), ids.end());
    const auto n_train = static_cast<std::size_t>(round_scaled(static_cast<std::int64_t>(ids.size()), fraction));
    plan.train_ids.insert(plan.train_ids.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    plan.test_ids.insert(plan.test_ids.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  }
  return plan;
}

std::string format_split(const SplitPlan& plan) {
  std::ostringstream out;
  out << "# seed=" << plan.seed << " fraction=" << to_string(plan.train_fraction) << "\n";
  for (const auto& id : plan.train_ids) out << id << "\ttrain\n";
  for (const auto& id : plan.test_ids) out << id << "\ttest\n";
  return out.str();
}

SplitPlan parse_split(std::string_view text) {
  SplitPlan plan;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream meta(line.substr(1));
      for (std::string kv; meta >> kv;) {
        if (kv.rfind("seed=", 0) == 0) plan.seed = std::stoull(kv.substr(5));
        if (kv.rfind("fraction=", 0) == 0) plan.train_fraction = parse_ratio(kv.substr(9));
      }
      continue;
    }
    const auto tab = line.rfind('\t');
    require(tab != std::string::npos && tab > 0, Errc::format,
            "split plan line " + std::to_string(line_no) + ": expected '<id>\\t<partition>'");
    const std::string id = line.substr(0, tab), part = line.substr(tab + 1);
    if (part == "train") {
      plan.train_ids.push_back(id);
    } else if (part == "test") {
      plan.test_ids.push_back(id);
    } else {
      throw Error(Errc::format, "split plan line " + std::to_string(line_no) + ": unknown partition '" + part + "'");
    }
  }
  return plan;
}

void write_split(const SplitPlan& plan, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot write '" + path.string() + "'");
  out << format_split(plan);
}

SplitPlan read_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::io, "cannot open '" + path.string() + "'");
  std::stringstream text;
  text << in.rdbuf();
  return parse_split(text.str());
}

void check_split(const SplitPlan& plan, const LabeledDataset& dataset) {
  std::set<std::string> seen;
  for (const auto* ids : {&plan.train_ids, &plan.test_ids}) {
    for (const auto& id : *ids) {
      require(seen.insert(id).second, Errc::invalid_argument, "split plan lists '" + id + "' more than once");
    }
  }
  for (const ImageRecord& r : dataset.records) {
    require(seen.erase(r.id) == 1, Errc::invalid_argument, "split plan does not cover record '" + r.id + "'");
  }
  require(seen.empty(), Errc::invalid_argument,
          "split plan names " + std::to_string(seen.size()) + " ids absent from the dataset (e.g. '" +
              (seen.empty() ? std::string() : *seen.begin()) + "')");
}

double mean_intensity(const ImageGrid& grid) {
  double total = 0;
  for (float v : grid.pixels) total += v;
  return grid.pixels.empty() ? 0.0 : total / static_cast<double>(grid.pixels.size());
}

LabeledDataset synth_dataset(const SynthOptions& o) {
  require(o.n_per_class >= 1, Errc::invalid_argument, "synth: need at least one image per class");
  require(o.image_size >= 8, Errc::invalid_argument, "synth: image size must be at least 8");
  require(o.background >= 0 && o.background <= 255 && o.noise >= 0, Errc::invalid_argument,
          "synth: background must lie in [0, 255] and noise must be non-negative");
  require(o.margin >= 0 && o.background + o.margin + 1 < 255, Errc::invalid_argument,
          "synth: margin must be non-negative and below 254 - background");
  const Index size = o.image_size;
  const auto area = static_cast<std::size_t>(size * size);
  LabeledDataset ds;
  std::uint64_t index = 0;
  for (Label label : kLabels) {
    for (Index i = 0; i < o.n_per_class; ++i, ++index) {
      Rng rng(mix_seed(o.seed, index));
      std::vector<double> noise(area);
      for (double& v : noise) v = rng.uniform(-o.noise, o.noise);
      double noise_mean = 0;
      for (double v : noise) noise_mean += v;
      noise_mean /= static_cast<double>(area);

      const auto pixel = [&](double offset) { return std::clamp(std::round(o.background + offset), 0.0, 255.0); };
      std::vector<double> blobs(area, 0.0);
      if (label == Label::covid) {
        // a few hazy patches over the lung fields, left and right
        const int count = 2 + static_cast<int>(rng.below(3));
        for (int b = 0; b < count; ++b) {
          const bool left = (b % 2) == 0;
          const double cx = (left ? rng.uniform(0.2, 0.45) : rng.uniform(0.55, 0.8)) * static_cast<double>(size);
          const double cy = rng.uniform(0.25, 0.75) * static_cast<double>(size);
          const double sigma = rng.uniform(0.08, 0.14) * static_cast<double>(size);
          for (Index y = 0; y < size; ++y) {
            for (Index x = 0; x < size; ++x) {
              const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
              blobs[static_cast<std::size_t>(y * size + x)] += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            }
          }
        }
        // Scale the pattern so the rounded, clamped image sits at least
        // margin + 1 above the background on average; bisection because
        // saturation makes the mean sublinear in the amplitude.
        const auto mean_at = [&](double amplitude) {
          double total = 0;
          for (std::size_t p = 0; p < area; ++p) total += pixel(noise[p] - noise_mean + amplitude * blobs[p]);
          return total / static_cast<double>(area);
        };
        const double target = o.background + o.margin + 1.0;
        double lo = 0.0, hi = 1.0;
        while (mean_at(hi) < target && hi < 1e9) hi *= 2;
        for (int it = 0; it < 60; ++it) {
          const double mid = 0.5 * (lo + hi);
          (mean_at(mid) < target ? lo : hi) = mid;
        }
        for (double& v : blobs) v *= hi;
      }

      ImageGrid grid(size, size, 1);
      for (std::size_t p = 0; p < area; ++p) grid.pixels[p] = static_cast<float>(pixel(noise[p] - noise_mean + blobs[p]));
      char name[32];
      std::snprintf(name, sizeof name, "%04lld.pgm", static_cast<long long>(i));
      ds.add({std::string(label_name(label)) + "/" + name, std::move(grid), label});
    }
  }
  return ds;
}

}  // namespace xrt
