#include "refseg/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "refseg/errors.hpp"
#include "refseg/grad_suite.hpp"
#include "refseg/io.hpp"
#include "refseg/metrics.hpp"
#include "refseg/train.hpp"

namespace refseg {

namespace {

namespace fs = std::filesystem;

struct TrainArgs {
  std::string config;
  std::string out;
  std::string data;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, samples, max_steps;
  std::optional<double> lr;
};

struct InferArgs {
  std::string checkpoint;
  std::string volume;
  std::string prompt;
  std::string cases;
  std::string images;
  std::string out;
};

struct EvalArgs {
  std::string pred;
  std::string gt;
  std::string cases;
  std::string out;
  double tau = 1.0;
  double percentile = 100.0;
};

struct GradArgs {
  double tolerance = 1e-4;
  double eps = 1e-5;
  std::uint64_t seed = 1;
  bool skip_model = false;
};

struct SynthArgs {
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::string out;
  std::string config;
  double noise = 0.1;
};

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

int run_train(const TrainArgs& a, std::ostream& out) {
  ModelConfig cfg = a.config.empty() ? ModelConfig{} : load_config(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.samples) cfg.data.samples = *a.samples;
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  if (a.lr) cfg.train.lr = *a.lr;
  cfg.validate();

  const std::vector<VolumeSample> data = a.data.empty() ? synth_dataset(cfg.train.seed, cfg.data.samples, cfg.data) : read_dataset(a.data);
  Model model(cfg);
  const ParamCensus c = model.census();
  out << "parameters: " << c.total() << " total, " << c.trainable_count << " trainable, " << c.frozen_count << " frozen\n";
  out << "training on " << data.size() << " samples for " << cfg.train.epochs << " epochs\n";

  TrainOptions opts;
  opts.out_dir = a.out;
  opts.on_epoch = [&](const EpochRecord& r) { out << format_epoch_record(r) << '\n' << std::flush; };
  const TrainingReport rep = train(model, data, cfg.train, opts);
  for (const auto& w : rep.warnings) out << "warning: " << w << '\n';
  out << "steps: " << rep.steps << ", frozen hash " << hex64(rep.frozen_hash) << " verified at " << rep.frozen_checks << " checkpoints\n";
  for (const auto& p : rep.checkpoints) out << "wrote " << p << '\n';
  return 0;
}

std::unique_ptr<Model> load_model(const std::string& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  auto model = std::make_unique<Model>(parse_config(ckpt.config_text));
  load_checkpoint(model->params(), ckpt);
  return model;
}

Tensor as_model_input(const Volume3d& v, const std::string& path) {
  if (v.type != VolumeType::Float) throw InputError(path + " holds a mask, not an image volume");
  const Shape& s = v.data.shape();
  return reshape(v.data, {1, s[0], s[1], s[2]});
}

int run_infer(const InferArgs& a, std::ostream& out) {
  const bool batch = !a.cases.empty();
  if (batch == !a.volume.empty()) throw InputError("give either --volume with --prompt or --cases with --images");
  const auto model = load_model(a.checkpoint);
  if (!batch) {
    if (a.prompt.empty()) throw InputError("--volume needs --prompt");
    const Volume3d v = read_volume(a.volume);
    write_volume(a.out, predict_mask(*model, as_model_input(v, a.volume), a.prompt), v.spacing, VolumeType::Mask);
    out << "wrote " << a.out << '\n';
    return 0;
  }
  if (a.images.empty()) throw InputError("--cases needs --images");
  fs::create_directories(a.out);
  std::size_t n = 0;
  for (const CaseRecord& r : read_cases(a.cases)) {
    const std::string src = (fs::path(a.images) / (r.id + ".v3d")).string();
    const Volume3d v = read_volume(src);
    write_volume((fs::path(a.out) / (r.id + ".v3d")).string(), predict_mask(*model, as_model_input(v, src), r.prompt), v.spacing,
                 VolumeType::Mask);
    ++n;
  }
  out << "wrote " << n << " masks to " << a.out << '\n';
  return 0;
}

BinaryMask to_mask(const Volume3d& v) {
  BinaryMask m = BinaryMask::from_tensor(v.data);
  for (int a = 0; a < 3; ++a) m.spacing[a] = v.spacing[a];
  return m;
}

int run_eval(const EvalArgs& a, std::ostream& out) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(a.gt))
    if (e.is_regular_file() && e.path().extension() == ".v3d") names.push_back(e.path().filename().string());
  if (names.empty()) throw InputError("no .v3d files in " + a.gt);
  std::sort(names.begin(), names.end());

  std::vector<std::pair<std::string, std::string>> classes;  // id -> class
  if (!a.cases.empty())
    for (const CaseRecord& r : read_cases(a.cases)) classes.emplace_back(r.id, r.target);

  std::vector<MetricRow> rows;
  for (const std::string& name : names) {
    const std::string id = fs::path(name).stem().string();
    const fs::path pred_path = fs::path(a.pred) / name;
    if (!fs::exists(pred_path)) throw InputError("no prediction for " + id + " in " + a.pred);
    const Volume3d gt = read_volume((fs::path(a.gt) / name).string());
    const Volume3d pred = read_volume(pred_path.string());
    if (gt.data.shape() != pred.data.shape())
      throw DimensionError(id + ": prediction " + shape_str(pred.data.shape()) + " vs ground truth " + shape_str(gt.data.shape()));
    std::string cls;
    for (const auto& [cid, c] : classes)
      if (cid == id) cls = c;
    rows.push_back(evaluate_case(id, cls, to_mask(pred), to_mask(gt), a.tau, a.percentile));
  }
  const std::string table = format_report_table(rows);
  out << table;
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_file_bytes((fs::path(a.out) / "report.txt").string(), std::vector<std::uint8_t>(table.begin(), table.end()));
    const std::string jsonl = format_report_jsonl(rows);
    write_file_bytes((fs::path(a.out) / "report.jsonl").string(), std::vector<std::uint8_t>(jsonl.begin(), jsonl.end()));
    out << "wrote " << (fs::path(a.out) / "report.txt").string() << " and report.jsonl\n";
  }
  return 0;
}

int run_gradcheck(const GradArgs& a, std::ostream& out) {
  GradSuiteOptions o;
  o.tolerance = a.tolerance;
  o.eps = a.eps;
  o.seed = a.seed;
  o.include_model = !a.skip_model;
  bool ok = true;
  for (const auto& e : run_gradient_suite(o)) {
    char line[160];
    std::snprintf(line, sizeof line, "%-50s %.3e %s %.1fs\n", e.name.c_str(), e.report.max_rel_error, e.report.passed ? "ok" : "FAIL", e.seconds);
    out << line;
    ok = ok && e.report.passed;
  }
  if (!ok) throw EvaluationError("gradient check failed");
  return 0;
}

int run_synth(const SynthArgs& a, std::ostream& out) {
  const ModelConfig cfg = a.config.empty() ? ModelConfig{} : load_config(a.config);
  write_dataset(a.out, synth_dataset(a.seed, a.n, cfg.data, a.noise));
  out << "wrote " << a.n << " cases to " << a.out << '\n';
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"3D referring segmentation: train, infer, eval, gradcheck, synth", "refseg"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train on synthetic or on-disk data; writes train_log.jsonl and checkpoints");
  train_cmd->add_option("--config", ta.config, "config file (defaults apply to missing keys)")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", ta.out, "output directory")->required();
  train_cmd->add_option("--data", ta.data, "dataset directory written by synth (default: generate from the config)");
  train_cmd->add_option("--seed", ta.seed, "overrides train.seed; also seeds the generated data");
  train_cmd->add_option("--epochs", ta.epochs, "overrides train.epochs");
  train_cmd->add_option("--samples", ta.samples, "overrides data.samples");
  train_cmd->add_option("--max-steps", ta.max_steps, "overrides train.max_steps");
  train_cmd->add_option("--lr", ta.lr, "overrides train.lr");

  InferArgs ia;
  auto* infer_cmd = app.add_subcommand("infer", "predict masks with a trained checkpoint");
  infer_cmd->add_option("--checkpoint", ia.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--volume", ia.volume, "input .v3d volume")->check(CLI::ExistingFile);
  infer_cmd->add_option("--prompt", ia.prompt, "referring text");
  infer_cmd->add_option("--cases", ia.cases, "cases.jsonl for batch mode")->check(CLI::ExistingFile);
  infer_cmd->add_option("--images", ia.images, "image directory for batch mode")->check(CLI::ExistingDirectory);
  infer_cmd->add_option("--out", ia.out, "output mask file (directory in batch mode)")->required();

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "compare predicted masks against ground truth (matched by file name)");
  eval_cmd->add_option("--pred", ea.pred, "directory of predicted masks")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--gt", ea.gt, "directory of ground-truth masks")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--cases", ea.cases, "cases.jsonl supplying class names")->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", ea.out, "directory for report.txt and report.jsonl");
  eval_cmd->add_option("--tau", ea.tau, "surface-distance tolerance for NSD")->check(CLI::NonNegativeNumber);
  eval_cmd->add_option("--percentile", ea.percentile, "Hausdorff percentile, e.g. 95")->check(CLI::Range(0.0, 100.0));

  GradArgs ga;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op and the full model");
  grad_cmd->add_option("--tolerance", ga.tolerance, "max relative error");
  grad_cmd->add_option("--eps", ga.eps, "central-difference step");
  grad_cmd->add_option("--seed", ga.seed, "seed for inputs and sampled coordinates");
  grad_cmd->add_flag("--skip-model", ga.skip_model, "leave out the full-model check");

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic referring-segmentation dataset");
  synth_cmd->add_option("--seed", sa.seed, "dataset seed")->required();
  synth_cmd->add_option("--n", sa.n, "number of cases")->required();
  synth_cmd->add_option("--out", sa.out, "output directory")->required();
  synth_cmd->add_option("--config", sa.config, "config whose [data] section sets dims and classes")->check(CLI::ExistingFile);
  synth_cmd->add_option("--noise", sa.noise, "Gaussian noise sigma")->check(CLI::NonNegativeNumber);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    out << sub->help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << "error: " << e.what() << "\n\n" << sub->help();
    return 1;
  }

  try {
    if (train_cmd->parsed()) return run_train(ta, out);
    if (infer_cmd->parsed()) return run_infer(ia, out);
    if (eval_cmd->parsed()) return run_eval(ea, out);
    if (grad_cmd->parsed()) return run_gradcheck(ga, out);
    return run_synth(sa, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace refseg
