#include "b2p/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>

#include "CLI11.hpp"
#include "b2p/config.hpp"
#include "b2p/error.hpp"
#include "b2p/manifest.hpp"
#include "b2p/metrics.hpp"
#include "b2p/pseudo_labels.hpp"
#include "b2p/synth.hpp"
#include "b2p/teacher.hpp"
#include "b2p/trainer.hpp"

namespace fs = std::filesystem;

namespace b2p {

namespace {

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::string output;
  std::string manifest;
  bool allow_partial = false;
  int seeds = 1;
  std::string checkpoint;
  std::vector<std::string> splits;
  std::string predictions;
  std::string ground_truth;
  bool verbose = false;
};

TrainingConfig resolve_config(const Options& o, const TrainingConfig& fallback, bool validate = true) {
  TrainingConfig cfg = o.config.empty() ? fallback : load_config(o.config);
  cfg = apply_overrides(cfg, o.overrides);
  if (!o.manifest.empty()) cfg.data.manifest = o.manifest;
  if (validate) cfg.validate();
  return cfg;
}

DatasetManifest open_manifest(const std::string& path, std::ostream& err) {
  if (path.empty()) throw ConfigError("no manifest: set data.manifest or pass --manifest");
  ManifestLoad load = load_manifest(path);
  for (const auto& w : load.warnings) err << "warning: " << w << "\n";
  return std::move(load.manifest);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (text.empty() || text.back() != '\n') f << "\n";
}

Split single_split(const Options& o) {
  if (o.splits.size() > 1) throw ConfigError("--split given more than once");
  return o.splits.empty() ? Split::kTest : parse_split(o.splits.front());
}

int cmd_pseudo_label(const Options& o, std::ostream& out, std::ostream& err) {
  const TrainingConfig cfg = resolve_config(o, TrainingConfig{});
  const DatasetManifest manifest = open_manifest(cfg.data.manifest, err);
  const fs::path cache_root = o.output.empty() ? fs::path(cfg.data.cache_root) : fs::path(o.output);
  if (cache_root.empty()) throw ConfigError("no cache root: set data.cache_root or pass --output");
  PseudoLabelOptions popts;
  if (!o.splits.empty()) {
    popts.splits.clear();
    for (const auto& s : o.splits) popts.splits.push_back(parse_split(s));
  }
  auto teacher = make_teacher(cfg.teacher);
  const PseudoLabelReport report = build_pseudo_labels(manifest, *teacher, cfg.teacher, cache_root, popts);
  const fs::path report_path = cache_root / report.fingerprint / "report.json";
  write_text(report_path, report.to_json());
  out << "fingerprint " << report.fingerprint << "\n"
      << "images " << report.images << ", generated " << report.generated << ", cache hits "
      << report.cache_hits << ", empty masks " << report.empty_masks << ", failures "
      << report.failures.size() << "\n"
      << "report " << report_path.string() << "\n";
  for (const auto& f : report.failures) err << "failed: " << f.image_id << ": " << f.error << "\n";
  if (!report.failures.empty() && !o.allow_partial) return kExitTeacher;
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.output.empty()) throw ConfigError("train needs --output DIR");
  const TrainingConfig cfg = resolve_config(o, TrainingConfig{});
  const DatasetManifest manifest = open_manifest(cfg.data.manifest, err);
  FitOptions fo;
  fo.quiet = !o.verbose;
  const FitResult r = fit(cfg, manifest, o.output, fo);
  out << "steps " << r.steps.size() << ", epochs " << r.epochs.size() << "\n"
      << "best " << cfg.selection_metric << " " << format_metric(r.best_metric) << " at epoch "
      << r.best_epoch << "\n"
      << "checkpoints " << r.best_checkpoint.string() << " " << r.last_checkpoint.string() << "\n";
  return kExitOk;
}

int cmd_predict(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.checkpoint.empty()) throw ConfigError("predict needs --checkpoint PATH");
  if (o.output.empty()) throw ConfigError("predict needs --output DIR");
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const TrainingConfig cfg = resolve_config(o, ckpt.config);
  const DatasetManifest manifest = open_manifest(cfg.data.manifest, err);
  auto model = student_from_checkpoint(ckpt, true);
  const Split split = single_split(o);
  write_predictions(*model, manifest, split, o.output);
  out << "wrote " << manifest.records_in(split).size() << " predictions to " << o.output << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.predictions.empty() || o.ground_truth.empty())
    throw ConfigError("eval needs --predictions DIR and --ground-truth DIR");
  TrainingConfig base;
  const TrainingConfig cfg = resolve_config(o, base);
  const DatasetManifest manifest = open_manifest(cfg.data.manifest, err);
  const Split split = single_split(o);
  const Evaluation ev = evaluate(manifest, split, o.predictions, o.ground_truth);
  const std::string table = format_table(ev.report, manifest.class_names);
  out << table;
  const fs::path dir = o.output.empty() ? fs::path(o.predictions) : fs::path(o.output);
  write_text(dir / "report.json", evaluation_to_json(ev, manifest.class_names));
  write_text(dir / "report.txt", table);
  return kExitOk;
}

int cmd_synth_bench(const Options& o, std::ostream& out, std::ostream& /*err*/) {
  if (o.output.empty()) throw ConfigError("synth-bench needs --output DIR");
  const TrainingConfig cfg = resolve_config(o, bench_config(), false);
  {
    // The teacher's ground-truth directory only exists once the dataset is emitted.
    TrainingConfig check = cfg;
    check.teacher.gt_root = "gt";
    check.validate();
  }
  FitOptions fo;
  fo.quiet = !o.verbose;
  const BenchReport report = run_bench(cfg, o.seeds, o.output, fo);
  write_text(fs::path(o.output) / "report.json", report.to_json());
  write_text(fs::path(o.output) / "report.txt", report.to_table());
  out << report.to_table();
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Box-supervised defect segmentation toolkit", "b2p"};
  app.require_subcommand(1);
  Options o;
  auto common = [&o](CLI::App* c) {
    c->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    c->add_option("--override", o.overrides, "dotted.key=value, repeatable");
    c->add_option("--manifest", o.manifest, "manifest.json (overrides data.manifest)");
    c->add_flag("-v,--verbose", o.verbose, "per-step progress");
  };
  auto* pl = app.add_subcommand("pseudo-label", "run the teacher and fill the pseudo-label cache");
  common(pl);
  pl->add_option("--output", o.output, "cache root (default data.cache_root)");
  pl->add_option("--split", o.splits, "splits to label (default train and val)");
  pl->add_flag("--allow-partial", o.allow_partial, "exit 0 even if some images failed");

  auto* tr = app.add_subcommand("train", "train a student on cached pseudo-labels");
  common(tr);
  tr->add_option("--output", o.output, "run directory")->required();

  auto* pr = app.add_subcommand("predict", "write class maps and foreground probabilities");
  common(pr);
  pr->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  pr->add_option("--output", o.output, "output directory")->required();
  pr->add_option("--split", o.splits, "split to predict (default test)");

  auto* ev = app.add_subcommand("eval", "score prediction maps against ground-truth maps");
  common(ev);
  ev->add_option("--predictions", o.predictions, "directory of <id>.png predictions")->required();
  ev->add_option("--ground-truth", o.ground_truth, "directory of <id>.png labels")->required();
  ev->add_option("--split", o.splits, "split to score (default test)");
  ev->add_option("--output", o.output, "report directory (default the predictions directory)");

  auto* sb = app.add_subcommand("synth-bench", "paired self-correction ablation on synthetic data");
  common(sb);
  sb->add_option("--output", o.output, "output directory")->required();
  sb->add_option("--seeds", o.seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (pl->parsed()) return cmd_pseudo_label(o, out, err);
    if (tr->parsed()) return cmd_train(o, out, err);
    if (pr->parsed()) return cmd_predict(o, out, err);
    if (ev->parsed()) return cmd_eval(o, out, err);
    if (sb->parsed()) return cmd_synth_bench(o, out, err);
  } catch (const TrainingAbort& e) {
    err << "training aborted: " << e.what() << "\n";
    return kExitAbort;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace b2p
