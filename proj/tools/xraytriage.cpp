// xraytriage: dataset preparation, head training, evaluation, prediction
// and the HTTP service behind one command. Every flag can also be set from
// the environment as XRT_<SUBCOMMAND>_<FLAG>, e.g. XRT_TRAIN_EPOCHS=10.

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <json.hpp>
#include <pthread.h>
#include <thread>

#include "xrt/bundle.hpp"
#include "xrt/dataset.hpp"
#include "xrt/error.hpp"
#include "xrt/metrics.hpp"
#include "xrt/service.hpp"
#include "xrt/training.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Exit codes.
constexpr int kOk = 0;
constexpr int kUserError = 1;
constexpr int kInternalError = 2;

std::string env_name(const std::string& sub, const std::string& flag) {
  std::string out = "XRT_" + sub + "_" + flag;
  for (char& c : out) c = c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

void add_env_twins(CLI::App& sub) {
  for (CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty() || opt->get_lnames()[0] == "help") continue;
    opt->envname(env_name(sub.get_name(), opt->get_lnames()[0]));
  }
}

std::optional<double> optional_threshold(double t) { return t < 0 ? std::nullopt : std::optional<double>(t); }

// ---------------------------------------------------------------- synth

struct SynthArgs {
  fs::path out;
  xrt::SynthOptions options;
};

int run_synth(const SynthArgs& a) {
  const xrt::LabeledDataset ds = xrt::synth_dataset(a.options);
  xrt::write_dataset(ds, a.out);
  std::cout << "wrote " << ds.records.size() << " images to " << a.out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- split

struct SplitArgs {
  fs::path data, out;
  std::string fraction = "0.8";
  std::uint64_t seed = 42;
};

xrt::LabeledDataset scan(const fs::path& root) {
  xrt::LabeledDataset ds = xrt::scan_directory(root);
  for (const auto& w : ds.warnings) std::cerr << "warning: skipped " << w << "\n";
  return ds;
}

int run_split(const SplitArgs& a) {
  const xrt::LabeledDataset ds = scan(a.data);
  const xrt::SplitPlan plan = xrt::stratified_split(ds, xrt::parse_ratio(a.fraction), a.seed);
  xrt::write_split(plan, a.out);
  std::cout << "train " << plan.train_ids.size() << " test " << plan.test_ids.size() << " -> " << a.out.string()
            << "\n";
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  fs::path data, split, out, base, history;
  std::string family = "vgg16", preset = "desk", width, input;
  xrt::TrainConfig config;
  bool no_augment = false;
  bool no_cache = false;
};

int run_train(TrainArgs a) {
  const xrt::LabeledDataset ds = scan(a.data);
  const xrt::SplitPlan plan = xrt::read_split(a.split);

  xrt::ModelBundle bundle;
  if (!a.base.empty()) {
    bundle = xrt::load(a.base);
  } else {
    xrt::ArchitectureConfig arch;
    arch.family = xrt::parse_family(a.family);
    arch.preset = xrt::parse_preset(a.preset);
    arch.input = a.input.empty() ? xrt::default_input(arch.family, arch.preset) : xrt::parse_shape3(a.input);
    arch.width_scale = !a.width.empty()                  ? xrt::parse_ratio(a.width)
                       : arch.preset == xrt::Preset::desk ? xrt::Ratio{1, 4}
                                                          : xrt::Ratio{1, 1};
    bundle = xrt::init_random_base(arch, a.config.seed);
  }

  if (a.no_augment) a.config.augmentation = xrt::AugmentationPolicy::identity();
  a.config.augmentation.seed = a.config.seed;
  a.config.feature_cache = !a.no_cache;
  a.config.check();

  const xrt::FineTuneResult result = xrt::fine_tune(bundle, ds, plan, a.config);
  xrt::save(result.bundle, a.out);
  if (!a.history.empty()) xrt::write_history_csv(result.history, a.history);

  const xrt::EpochStats& last = result.history.epochs.back();
  std::cout << "epochs " << result.history.epochs.size() << " train_loss " << last.train_loss << " train_acc "
            << last.train_accuracy;
  if (last.test_accuracy) std::cout << " test_loss " << *last.test_loss << " test_acc " << *last.test_accuracy;
  std::cout << "\nmodel " << xrt::model_id(result.bundle) << " -> " << a.out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  fs::path model, data, split, out_dir;
  double threshold = -1;
  bool json = false;
};

int run_eval(const EvalArgs& a) {
  const xrt::Predictor predictor(xrt::load(a.model));
  const xrt::LabeledDataset ds = scan(a.data);

  std::vector<const xrt::ImageRecord*> records;
  if (a.split.empty()) {
    for (const auto& r : ds.records) records.push_back(&r);
  } else {
    const xrt::SplitPlan plan = xrt::read_split(a.split);
    xrt::check_split(plan, ds);
    for (const auto& id : plan.test_ids) records.push_back(&ds.record(id));
  }
  if (records.empty()) throw xrt::Error(xrt::Errc::invalid_argument, "eval: no records to evaluate");

  std::vector<int> truth, predicted;
  std::vector<double> scores;
  for (const auto* r : records) {
    const xrt::Prediction p = predictor.predict(r->pixels, optional_threshold(a.threshold));
    truth.push_back(static_cast<int>(xrt::label_index(r->label)));
    predicted.push_back(static_cast<int>(p.index));
    scores.push_back(p.probabilities.at(0));
  }

  const auto& labels = predictor.bundle().class_labels;
  const xrt::ConfusionMatrix cm =
      xrt::confusion(truth, predicted, static_cast<xrt::Index>(labels.size()), labels);
  const xrt::ClassificationReport rep = xrt::report(cm);
  std::optional<xrt::RocCurve> curve;
  if (std::count(truth.begin(), truth.end(), 0) > 0 && std::count(truth.begin(), truth.end(), 0) < static_cast<std::ptrdiff_t>(truth.size())) {
    curve = xrt::roc(scores, truth, 0);
  } else {
    std::cerr << "warning: only one class present; ROC skipped\n";
  }

  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    xrt::write_text(a.out_dir / "report.csv", xrt::format_report_csv(rep));
    xrt::write_text(a.out_dir / "confusion.csv", xrt::format_confusion_csv(cm));
    xrt::write_text(a.out_dir / "confusion_normalized.csv", xrt::format_confusion_csv(cm, true));
    if (curve) xrt::write_text(a.out_dir / "roc.csv", xrt::format_curve_csv(*curve));
  }

  if (a.json) {
    json out{{"samples", rep.total}, {"accuracy", rep.accuracy}, {"model_id", predictor.id()}};
    json classes = json::object();
    for (std::size_t j = 0; j < rep.per_class.size(); ++j) {
      const auto& m = rep.per_class[j];
      classes[rep.labels[j]] = {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"support", m.support}};
    }
    out["classes"] = classes;
    out["confusion"] = json::array();
    for (xrt::Index i = 0; i < cm.classes(); ++i) {
      json row = json::array();
      for (xrt::Index j = 0; j < cm.classes(); ++j) row.push_back(cm.counts(i, j));
      out["confusion"].push_back(row);
    }
    if (curve) out["auc"] = curve->auc;
    std::cout << out.dump() << "\n";
  } else {
    std::printf("%14s %9s %9s %9s %9s\n", "", "precision", "recall", "f1-score", "support");
    const auto line = [](const std::string& name, const xrt::ClassMetrics& m) {
      std::printf("%14s %9.2f %9.2f %9.2f %9lld\n", name.c_str(), xrt::round_half_away(m.precision),
                  xrt::round_half_away(m.recall), xrt::round_half_away(m.f1), static_cast<long long>(m.support));
    };
    for (std::size_t j = 0; j < rep.per_class.size(); ++j) line(rep.labels[j], rep.per_class[j]);
    std::printf("%14s %9s %9s %9.2f %9lld\n", "accuracy", "", "", xrt::round_half_away(rep.accuracy),
                static_cast<long long>(rep.total));
    line("macro avg", rep.macro_avg);
    line("weighted avg", rep.weighted_avg);
    if (curve) std::printf("auc %.6f\n", curve->auc);
  }
  return kOk;
}

// ---------------------------------------------------------------- predict

struct PredictArgs {
  fs::path model, image;
  double threshold = -1;
  bool json = false;
};

int run_predict(const PredictArgs& a) {
  const xrt::Predictor predictor(xrt::load(a.model));
  const xrt::Prediction p = predictor.predict(xrt::read_image(a.image), optional_threshold(a.threshold));
  const std::string_view message = xrt::verdict_message(p.label);
  if (a.json) {
    std::cout << json{{"label", p.label},
                      {"probability", p.probabilities.at(0)},
                      {"probabilities", p.probabilities},
                      {"message", message},
                      {"model_id", predictor.id()}}
                     .dump()
              << "\n";
  } else {
    std::cout << message << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------- serve

struct ServeArgs {
  fs::path model;
  xrt::ServiceConfig config;
  double threshold = -1;
};

int run_serve(ServeArgs a) {
  a.config.threshold = optional_threshold(a.threshold);
  auto predictor = std::make_shared<const xrt::Predictor>(xrt::load(a.model));
  // blocked before any worker thread exists, so only the waiter below sees them
  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

  xrt::Service service(predictor, a.config);
  const int port = service.bind();
  std::thread([&service, stop_signals] {
    int sig = 0;
    sigwait(&stop_signals, &sig);
    service.stop();
  }).detach();
  std::cerr << "serving model " << predictor->id() << " on http://" << a.config.host << ":" << port << std::endl;
  service.run();
  return kOk;
}

// ---------------------------------------------------------------- import

struct ImportArgs {
  fs::path manifest, out;
};

int run_import(const ImportArgs& a) {
  const xrt::ModelBundle bundle = xrt::import_manifest(a.manifest);
  xrt::save(bundle, a.out);
  std::cout << "model " << xrt::model_id(bundle) << " -> " << a.out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chest X-ray COVID-19 triage: data prep, transfer learning, evaluation and serving"};
  app.require_subcommand(1);
  std::function<int()> action;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic two-class dataset");
  s->add_option("--out", synth.out, "Output directory (gets covid/ and normal/)")->required();
  s->add_option("--per-class", synth.options.n_per_class, "Images per class")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--size", synth.options.image_size, "Image side in pixels")->capture_default_str()->check(CLI::Range(8, 4096));
  s->add_option("--seed", synth.options.seed, "Random seed")->capture_default_str();
  s->add_option("--background", synth.options.background, "Background grey level")->capture_default_str();
  s->add_option("--margin", synth.options.margin, "Mean grey-level gap between classes")->capture_default_str();
  s->add_option("--noise", synth.options.noise, "Uniform noise half-width in grey levels")->capture_default_str();
  s->callback([&] { action = [&] { return run_synth(synth); }; });

  SplitArgs split;
  auto* sp = app.add_subcommand("split", "Write a stratified train/test split plan");
  sp->add_option("--data", split.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  sp->add_option("--out", split.out, "Split plan file")->required();
  sp->add_option("--fraction", split.fraction, "Train fraction, decimal or a/b")->capture_default_str();
  sp->add_option("--seed", split.seed, "Shuffle seed")->capture_default_str();
  sp->callback([&] { action = [&] { return run_split(split); }; });

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Fine-tune the classification head and save a model bundle");
  t->add_option("--data", train.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  t->add_option("--split", train.split, "Split plan file")->required()->check(CLI::ExistingFile);
  t->add_option("--out", train.out, "Output bundle")->required();
  t->add_option("--base", train.base, "Start from this bundle instead of a random base")->check(CLI::ExistingFile);
  t->add_option("--family", train.family, "vgg16, resnet50 or inception_v3")->capture_default_str();
  t->add_option("--preset", train.preset, "full or desk")->capture_default_str();
  t->add_option("--width", train.width, "Channel width scale (default 1/4 desk, 1 full)");
  t->add_option("--input", train.input, "Input size CxHxW (default per family/preset)");
  t->add_option("--history", train.history, "Per-epoch history CSV");
  t->add_option("--epochs", train.config.epochs, "Epochs")->capture_default_str();
  t->add_option("--batch-size", train.config.batch_size, "Mini-batch size")->capture_default_str();
  t->add_option("--lr", train.config.learning_rate, "Learning rate")->capture_default_str();
  t->add_option("--momentum", train.config.momentum, "SGD momentum")->capture_default_str();
  t->add_option("--seed", train.config.seed, "Seed for base init, batch order and augmentation")->capture_default_str();
  t->add_option("--flip", train.config.augmentation.horizontal_flip_prob, "Horizontal flip probability")->capture_default_str();
  t->add_option("--rotation", train.config.augmentation.rotation_max_degrees, "Max rotation, degrees")->capture_default_str();
  t->add_option("--translate", train.config.augmentation.translate_max_fraction, "Max shift, fraction of side")->capture_default_str();
  t->add_option("--brightness", train.config.augmentation.brightness_delta_max, "Max relative brightness change")->capture_default_str();
  t->add_flag("--no-augment", train.no_augment, "Disable augmentation");
  t->add_flag("--no-cache", train.no_cache, "Recompute base features every epoch");
  t->callback([&] { action = [&] { return run_train(train); }; });

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a bundle: report, confusion matrices, ROC");
  e->add_option("--model", ev.model, "Model bundle")->required()->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  e->add_option("--split", ev.split, "Split plan; only its test ids are scored")->check(CLI::ExistingFile);
  e->add_option("--out-dir", ev.out_dir, "Directory for report.csv, confusion*.csv, roc.csv");
  e->add_option("--threshold", ev.threshold, "Covid iff p(covid) >= threshold (default argmax)")->check(CLI::Range(0.0, 1.0));
  e->add_flag("--json", ev.json, "JSON summary on stdout");
  e->callback([&] { action = [&] { return run_eval(ev); }; });

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Classify one radiograph");
  p->add_option("--model", pr.model, "Model bundle")->required()->check(CLI::ExistingFile);
  p->add_option("--image", pr.image, "PGM, PPM or PNG file")->required()->check(CLI::ExistingFile);
  p->add_option("--threshold", pr.threshold, "Covid iff p(covid) >= threshold (default argmax)")->check(CLI::Range(0.0, 1.0));
  p->add_flag("--json", pr.json, "JSON output");
  p->callback([&] { action = [&] { return run_predict(pr); }; });

  ServeArgs sv;
  auto* v = app.add_subcommand("serve", "Run the /detect HTTP service");
  v->add_option("--model", sv.model, "Model bundle")->required();
  v->add_option("--host", sv.config.host, "Bind address")->capture_default_str();
  v->add_option("--port", sv.config.port, "Port, 0 for any free port")->capture_default_str()->check(CLI::Range(0, 65535));
  v->add_option("--threshold", sv.threshold, "Covid iff p(covid) >= threshold (default argmax)")->check(CLI::Range(0.0, 1.0));
  v->add_option("--max-body", sv.config.max_body_bytes, "Request body limit in bytes")->capture_default_str()->check(CLI::PositiveNumber);
  v->add_option("--cors-origin", sv.config.cors_origin, "Allowed CORS origin, empty to disable")->capture_default_str();
  v->add_flag("--plain", sv.config.plain, "Reply with the bare verdict text");
  v->callback([&] { action = [&] { return run_serve(sv); }; });

  ImportArgs im;
  auto* i = app.add_subcommand("import", "Build a bundle from a manifest and raw f32 weight files");
  i->add_option("--manifest", im.manifest, "Manifest file")->required()->check(CLI::ExistingFile);
  i->add_option("--out", im.out, "Output bundle")->required();
  i->callback([&] { action = [&] { return run_import(im); }; });

  for (CLI::App* sub : app.get_subcommands({})) add_env_twins(*sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kOk : kUserError;
  }

  try {
    return action();
  } catch (const xrt::Error& err) {
    std::cerr << "error [" << xrt::errc_name(err.code()) << "]: " << err.what() << "\n";
    return kUserError;
  } catch (const std::exception& err) {
    std::cerr << "internal error: " << err.what() << "\n";
    return kInternalError;
  }
}
