#include "convsst/cli.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>

#include "CLI11.hpp"
#include "convsst/checkpoint.hpp"
#include "convsst/class_map.hpp"
#include "convsst/error.hpp"
#include "convsst/gradcheck.hpp"
#include "convsst/hsi_data.hpp"
#include "convsst/metrics.hpp"
#include "convsst/model.hpp"
#include "convsst/runtime.hpp"
#include "convsst/training.hpp"
#include "json.hpp"

namespace convsst {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct SplitSpec {
  std::string mode = "per_class";  // per_class | fraction | reference
  std::size_t per_class = 20;
  double fraction = 0.1;
  std::string reference;
};

ojson to_json(const SplitSpec& s) {
  ojson j;
  j["mode"] = s.mode;
  if (s.mode == "per_class") j["per_class"] = s.per_class;
  if (s.mode == "fraction") j["fraction"] = s.fraction;
  if (s.mode == "reference") j["reference"] = s.reference;
  return j;
}

SplitSpec split_from_json(const nlohmann::json& j) {
  SplitSpec s;
  s.mode = j.value("mode", s.mode);
  s.per_class = j.value("per_class", s.per_class);
  s.fraction = j.value("fraction", s.fraction);
  s.reference = j.value("reference", s.reference);
  if (s.mode != "per_class" && s.mode != "fraction" && s.mode != "reference") {
    throw Error("unknown split mode \"" + s.mode + "\"");
  }
  return s;
}

DatasetSplit apply_split(const SplitSpec& spec, const Dataset& data, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "split"));
  const std::size_t classes = data.meta.num_classes;
  if (spec.mode == "fraction") return make_split(data.labels, classes, spec.fraction, rng);
  std::vector<std::size_t> counts(classes, spec.per_class);
  if (spec.mode == "reference") {
    counts = reference_train_counts(spec.reference);
    if (counts.size() != classes) {
      throw DataError("split \"" + spec.reference + "\" lists " + std::to_string(counts.size()) +
                      " classes, dataset has " + std::to_string(classes));
    }
  }
  return make_split(data.labels, classes, counts, rng);
}

Dataset load_normalized(const std::string& dir) {
  Dataset data = load_dataset(dir);
  data.cube = normalize(data.cube);
  return data;
}

// Everything that determines a training run.
struct RunSpec {
  std::string data;
  ModelConfig model;  // bands and classes are filled from the dataset
  TrainConfig train;
  SplitSpec split;
  bool f64 = false;
};

ojson run_json(const RunSpec& r) {
  ojson j;
  j["dataset"] = r.data;
  j["dtype"] = r.f64 ? "f64" : "f32";
  j["model"] = to_json(r.model);
  j["train"] = to_json(r.train);
  j["split"] = to_json(r.split);
  return j;
}

RunSpec run_from_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed manifest " + path.string() + ": " + e.what());
  }
  RunSpec r;
  r.data = j.at("dataset").get<std::string>();
  r.f64 = j.value("dtype", std::string("f32")) == "f64";
  r.model = model_config_from_json(j.at("model"));
  r.train = train_config_from_json(j.at("train"));
  r.split = split_from_json(j.at("split"));
  return r;
}

void bind_dataset(RunSpec& r, const Dataset& data) {
  r.model.bands = data.cube.bands;
  r.model.classes = data.meta.num_classes;
  r.model.validate();
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.write(text.data(), static_cast<std::streamsize>(text.size()))) throw Error("cannot write " + path.string());
}

bool checkpoint_is_f64(const Checkpoint& ckpt) {
  return !ckpt.tensors.empty() && ckpt.tensors.front().dtype == DType::f64;
}

// ---------------------------------------------------------------------------

struct TrainOutcome {
  std::vector<EpochRecord> history;
  Checkpoint checkpoint;
  ConfusionMatrix test;
};

template <typename Scalar>
TrainOutcome train_and_test(const RunSpec& run, const Dataset& data, const DatasetSplit& split, std::size_t log_every,
                            std::ostream& err) {
  Rng init_rng(derive_seed(run.train.seed, "init"));
  ModelWeights<Scalar> weights = init_weights<Scalar>(run.model, init_rng);
  AdamState<Scalar> adam;
  TrainCallbacks callbacks;
  callbacks.on_epoch = [&](const EpochRecord& r) {
    if (log_every > 0 && (r.epoch % log_every == 0 || r.epoch == run.train.epochs)) {
      err << "epoch " << r.epoch << "/" << run.train.epochs << "  loss " << format_number(r.loss) << "  train_acc "
          << format_number(r.train_acc) << "\n";
    }
  };
  callbacks.on_eval = [&](std::size_t epoch) {
    if (split.test.empty()) return;
    const Evaluation e = evaluate(weights, run.model, data.cube, split.test);
    err << "epoch " << epoch << "  test OA " << format_number(overall_accuracy(e.confusion)) << "\n";
  };
  TrainOutcome outcome;
  outcome.history = train(weights, adam, run.model, data.cube, split.train, run.train, callbacks);

  ojson meta;
  meta["dataset"] = data.meta.name;
  meta["split"] = to_json(run.split);
  meta["epochs_completed"] = outcome.history.size();
  outcome.checkpoint = make_checkpoint(weights, run.model, run.train, meta, &adam);
  outcome.test = ConfusionMatrix(run.model.classes);
  if (!split.test.empty()) outcome.test = evaluate(weights, run.model, data.cube, split.test).confusion;
  return outcome;
}

int cmd_train(RunSpec run, const std::string& out_dir, std::size_t log_every, const std::vector<std::string>& args,
              std::ostream& out, std::ostream& err) {
  const Dataset data = load_normalized(run.data);
  bind_dataset(run, data);
  run.train.validate();
  const DatasetSplit split = apply_split(run.split, data, run.train.seed);

  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  ojson manifest;
  manifest["command"] = "train";
  manifest["args"] = args;
  manifest["timestamp"] = utc_timestamp();
  manifest["seed"] = run.train.seed;
  const ojson resolved = run_json(run);
  for (const auto& [k, v] : resolved.items()) manifest[k] = v;
  manifest["split_counts"] = {{"train", split.train_counts}, {"test", split.test_counts}};
  manifest["artifacts"] = {{"checkpoint", (dir / "model.ckpt").string()},
                           {"history", (dir / "history.csv").string()},
                           {"manifest", (dir / "manifest.json").string()}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  TrainOutcome r = run.f64 ? train_and_test<double>(run, data, split, log_every, err)
                           : train_and_test<float>(run, data, split, log_every, err);

  std::string csv = "epoch,loss,train_acc\n";
  for (const auto& e : r.history) {
    csv += std::to_string(e.epoch) + "," + format_number(e.loss) + "," + format_number(e.train_acc) + "\n";
  }
  write_text(dir / "history.csv", csv);
  save_checkpoint(r.checkpoint, dir / "model.ckpt");

  ojson summary;
  summary["checkpoint"] = (dir / "model.ckpt").string();
  summary["epochs"] = r.history.size();
  summary["final_loss"] = r.history.empty() ? 0.0 : r.history.back().loss;
  summary["train_acc"] = r.history.empty() ? 0.0 : r.history.back().train_acc;
  if (r.test.total() > 0) summary["test_oa"] = overall_accuracy(r.test);
  out << summary.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct LoadedModel {
  Checkpoint checkpoint;
  ModelConfig model;
  TrainConfig train;
  SplitSpec split;
};

LoadedModel load_model(const std::string& ckpt_path, const Dataset& data) {
  LoadedModel m;
  m.checkpoint = load_checkpoint(ckpt_path);
  m.model = m.checkpoint.model_config();
  m.train = train_config_from_json(m.checkpoint.config.value("train", nlohmann::ordered_json::object()));
  const auto meta = m.checkpoint.config.value("meta", nlohmann::ordered_json::object());
  if (meta.contains("split")) m.split = split_from_json(meta["split"]);
  if (m.model.classes != data.meta.num_classes) {
    throw Error("class count mismatch: checkpoint model has " + std::to_string(m.model.classes) +
                " classes, dataset has " + std::to_string(data.meta.num_classes));
  }
  if (m.model.bands != data.cube.bands) {
    throw Error("band count mismatch: checkpoint model has " + std::to_string(m.model.bands) + " bands, dataset has " +
                std::to_string(data.cube.bands));
  }
  return m;
}

template <typename Scalar>
std::vector<std::int32_t> predict_with(const LoadedModel& m, const HsiCube& cube, std::span<const PixelSample> samples) {
  Rng unused(0);
  ModelWeights<Scalar> weights = init_weights<Scalar>(m.model, unused);
  restore_weights(m.checkpoint, weights);
  return predict(weights, m.model, cube, samples);
}

std::vector<std::int32_t> predict_loaded(const LoadedModel& m, const HsiCube& cube,
                                         std::span<const PixelSample> samples) {
  return checkpoint_is_f64(m.checkpoint) ? predict_with<double>(m, cube, samples)
                                         : predict_with<float>(m, cube, samples);
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& on, std::ostream& out,
             std::ostream& err) {
  const Dataset data = load_normalized(data_dir);
  const LoadedModel m = load_model(ckpt, data);
  std::vector<PixelSample> samples;
  if (on == "all") {
    samples = labeled_pixels(data.labels);
  } else {
    DatasetSplit split = apply_split(m.split, data, m.train.seed);
    samples = on == "train" ? std::move(split.train) : std::move(split.test);
  }
  if (samples.empty()) throw Error("no samples to evaluate on the " + on + " side");
  const auto predicted = predict_loaded(m, data.cube, samples);
  ConfusionMatrix cm(m.model.classes);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    cm.update(static_cast<std::size_t>(samples[i].label), static_cast<std::size_t>(predicted[i]));
  }
  out << metrics_report(cm).dump(2) << "\n";
  err << format_report(cm, data.meta.class_names);
  return 0;
}

int cmd_map(const std::string& ckpt, const std::string& data_dir, const std::string& out_path, bool full, bool truth,
            std::ostream& out) {
  const Dataset data = load_normalized(data_dir);
  const std::size_t h = data.labels.height, w = data.labels.width;
  std::vector<std::int32_t> classes(h * w, -1);
  if (truth) {
    for (std::size_t p = 0; p < h * w; ++p) classes[p] = static_cast<std::int32_t>(data.labels.labels[p]) - 1;
  } else {
    if (ckpt.empty()) throw Error("map needs --ckpt unless --truth is given");
    const LoadedModel m = load_model(ckpt, data);
    std::vector<PixelSample> samples;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const std::int32_t label = static_cast<std::int32_t>(data.labels.at(r, c)) - 1;
        if (full || label >= 0) samples.push_back({r, c, label});
      }
    }
    const auto predicted = predict_loaded(m, data.cube, samples);
    for (std::size_t i = 0; i < samples.size(); ++i) classes[samples[i].row * w + samples[i].col] = predicted[i];
  }
  write_class_map(out_path, h, w, classes);
  out << out_path << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& op, double tol, std::uint64_t seed, std::ostream& out) {
  std::vector<std::string> families;
  if (op == "all") {
    families = gradcheck_families();
  } else {
    families.push_back(op);
  }
  bool ok = true;
  for (const auto& family : families) {
    const GradcheckReport report = gradcheck_family(family, seed);
    const bool pass = report.passed(tol);
    ok = ok && pass;
    out << (pass ? "PASS " : "FAIL ") << family << "  max_rel " << format_number(report.max_rel_error()) << "\n";
    for (const auto& e : report.entries) {
      out << "    " << e.name << " [" << e.elements << "]  max_rel " << format_number(e.max_rel_error) << "\n";
    }
  }
  out << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance " << format_number(tol) << ")\n";
  return ok ? 0 : 1;
}

int cmd_synth(SyntheticSpec spec, std::uint64_t seed, const std::string& out_dir, std::ostream& out) {
  Rng rng(seed);
  save_dataset(make_synthetic(spec, rng), out_dir);
  out << out_dir << "\n";
  return 0;
}

int cmd_ablate(RunSpec run, const std::string& csv_path, std::ostream& out, std::ostream& err) {
  const Dataset data = load_normalized(run.data);
  bind_dataset(run, data);
  run.train.validate();
  const DatasetSplit split = apply_split(run.split, data, run.train.seed);
  if (split.test.empty()) throw Error("ablation needs a non-empty test split");

  ojson rows = ojson::array();
  std::string csv = "cgrm,head,oa,aa,kappa\n";
  for (bool cgrm : {false, true}) {
    for (HeadMode head : {HeadMode::cls, HeadMode::gap}) {
      RunSpec cell = run;
      cell.model.use_cgrm = cgrm;
      cell.model.head = head;
      const std::string head_name = head == HeadMode::gap ? "gap" : "cls";
      err << "ablation cell cgrm=" << (cgrm ? "on" : "off") << " head=" << head_name << "\n";
      const TrainOutcome r = cell.f64 ? train_and_test<double>(cell, data, split, 0, err)
                                      : train_and_test<float>(cell, data, split, 0, err);
      ojson row;
      row["cgrm"] = cgrm;
      row["head"] = head_name;
      row["oa"] = overall_accuracy(r.test);
      row["aa"] = average_accuracy(r.test);
      row["kappa"] = kappa(r.test);
      csv += std::string(cgrm ? "on" : "off") + "," + head_name + "," + format_number(row["oa"].get<double>()) + "," +
             format_number(row["aa"].get<double>()) + "," + format_number(row["kappa"].get<double>()) + "\n";
      rows.push_back(std::move(row));
    }
  }
  if (!csv_path.empty()) write_text(csv_path, csv);
  out << rows.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct RunFlags {
  std::string data;
  std::size_t depth = 2, heads = 4, mlp_dim = 256, dim = 64, patch = 11, kspec = 9;
  double dropout = 0.1;
  bool no_cgrm = false, cls_token = false, f64 = false;
  std::size_t epochs = 500, batch = 64;
  double lr = 5e-4;
  std::uint64_t seed = 42;
  std::size_t eval_every = 0;
  std::size_t train_per_class = 20;
  double train_frac = 0.0;
  std::string split;

  RunSpec resolve() const {
    RunSpec r;
    r.data = data;
    r.model.patch = patch;
    r.model.embed_dim = dim;
    r.model.depth = depth;
    r.model.heads = heads;
    r.model.mlp_dim = mlp_dim;
    r.model.dropout = dropout;
    r.model.spectral_kernel = kspec;
    r.model.use_cgrm = !no_cgrm;
    r.model.head = cls_token ? HeadMode::cls : HeadMode::gap;
    r.train.epochs = epochs;
    r.train.batch = batch;
    r.train.lr = lr;
    r.train.seed = seed;
    r.train.eval_interval = eval_every;
    r.f64 = f64;
    if (!split.empty()) {
      r.split.mode = "reference";
      r.split.reference = split;
    } else if (train_frac > 0.0) {
      r.split.mode = "fraction";
      r.split.fraction = train_frac;
    } else {
      r.split.per_class = train_per_class;
    }
    return r;
  }
};

void add_run_flags(CLI::App* app, RunFlags& f) {
  app->add_option("--data", f.data, "Dataset directory")->check(CLI::ExistingDirectory);
  app->add_option("--depth", f.depth, "Encoder count")->capture_default_str();
  app->add_option("--heads", f.heads, "Attention heads")->capture_default_str();
  app->add_option("--mlp-dim", f.mlp_dim, "Encoder MLP hidden width")->capture_default_str();
  app->add_option("--dim", f.dim, "Token width")->capture_default_str();
  app->add_option("--patch", f.patch, "Spatial window (odd)")->capture_default_str();
  app->add_option("--kspec", f.kspec, "Stem spectral kernel extent")->capture_default_str();
  app->add_option("--dropout", f.dropout, "Dropout rate")->capture_default_str();
  app->add_flag("--no-cgrm", f.no_cgrm, "Chain encoders without fusion modules");
  app->add_flag("--cls-token", f.cls_token, "Classify from a CLS token instead of average pooling");
  app->add_flag("--f64", f.f64, "Train in 64-bit precision");
  app->add_option("--epochs", f.epochs, "Training epochs")->capture_default_str();
  app->add_option("--batch", f.batch, "Mini-batch size")->capture_default_str();
  app->add_option("--lr", f.lr, "Adam learning rate")->capture_default_str();
  app->add_option("--seed", f.seed, "Run seed")->capture_default_str();
  app->add_option("--eval-every", f.eval_every, "Report test OA every N epochs (0 = off)");
  auto* per_class = app->add_option("--train-per-class", f.train_per_class, "Train pixels per class")
                        ->capture_default_str();
  auto* frac = app->add_option("--train-frac", f.train_frac, "Train fraction per class")->check(CLI::Range(0.0, 1.0));
  auto* ref = app->add_option("--split", f.split, "Published per-class counts")
                  ->check(CLI::IsMember({"houston", "muufl", "botswana"}));
  per_class->excludes(frac)->excludes(ref);
  frac->excludes(ref);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spectral-spatial transformer for hyperspectral pixel classification"};
  app.require_subcommand(1);

  RunFlags train_flags;
  std::string train_out, manifest_path;
  std::size_t log_every = 10;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint, history and manifest");
  add_run_flags(train_cmd, train_flags);
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cmd->add_option("--manifest", manifest_path, "Re-run the configuration recorded in a manifest")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--log-every", log_every, "Progress line every N epochs (0 = quiet)")->capture_default_str();

  std::string ckpt, data_dir, on = "test";
  auto* eval_cmd = app.add_subcommand("eval", "Print metrics JSON for a checkpoint");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--on", on, "Samples to score")->check(CLI::IsMember({"test", "train", "all"}))
      ->capture_default_str();

  std::string map_ckpt, map_data, map_out;
  bool full = false, truth = false;
  auto* map_cmd = app.add_subcommand("map", "Render a per-pixel class map as binary PPM");
  map_cmd->add_option("--ckpt", map_ckpt, "Checkpoint file")->check(CLI::ExistingFile);
  map_cmd->add_option("--data", map_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  map_cmd->add_option("--out", map_out, "Output .ppm path")->required();
  map_cmd->add_flag("--full", full, "Predict unlabeled pixels too");
  map_cmd->add_flag("--truth", truth, "Render the ground-truth labels");

  std::string op = "all";
  double tol = 1e-5;
  std::uint64_t gc_seed = 1;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks in 64-bit");
  std::vector<std::string> choices = gradcheck_families();
  choices.push_back("all");
  gc_cmd->add_option("--op", op, "Op family")->check(CLI::IsMember(choices))->capture_default_str();
  gc_cmd->add_option("--tol", tol, "Max relative error")->capture_default_str();
  gc_cmd->add_option("--seed", gc_seed, "Instance seed")->capture_default_str();

  SyntheticSpec synth;
  std::size_t hw = 0;
  std::uint64_t synth_seed = 42;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset");
  synth_cmd->add_option("--hw", hw, "Height and width");
  synth_cmd->add_option("--height", synth.height)->capture_default_str();
  synth_cmd->add_option("--width", synth.width)->capture_default_str();
  synth_cmd->add_option("--bands", synth.bands)->capture_default_str();
  synth_cmd->add_option("--classes", synth.classes)->capture_default_str();
  synth_cmd->add_option("--noise", synth.noise, "Noise standard deviation")->capture_default_str();
  synth_cmd->add_option("--seed", synth_seed)->capture_default_str();
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();

  RunFlags ablate_flags;
  std::string ablate_csv;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train the {CGRM on/off} x {GAP, CLS} grid");
  add_run_flags(ablate_cmd, ablate_flags);
  ablate_cmd->add_option("--out", ablate_csv, "Also write the table as CSV");

  std::vector<const char*> argv{"convsst"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    configure_threads();
    if (*train_cmd) {
      RunSpec run = manifest_path.empty() ? train_flags.resolve() : run_from_manifest(manifest_path);
      if (run.data.empty()) throw Error("train needs --data or --manifest");
      return cmd_train(std::move(run), train_out, log_every, args, out, err);
    }
    if (*eval_cmd) return cmd_eval(ckpt, data_dir, on, out, err);
    if (*map_cmd) return cmd_map(map_ckpt, map_data, map_out, full, truth, out);
    if (*gc_cmd) return cmd_gradcheck(op, tol, gc_seed, out);
    if (*synth_cmd) {
      if (hw) synth.height = synth.width = hw;
      return cmd_synth(synth, synth_seed, synth_out, out);
    }
    if (*ablate_cmd) {
      RunSpec run = ablate_flags.resolve();
      if (run.data.empty()) throw Error("ablate needs --data");
      return cmd_ablate(std::move(run), ablate_csv, out, err);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace convsst
