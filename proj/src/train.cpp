#include "refseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "refseg/errors.hpp"
#include "refseg/io.hpp"
#include "refseg/metrics.hpp"

namespace refseg {

namespace fs = std::filesystem;

std::string format_epoch_record(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["loss"] = r.loss;
  j["dice"] = r.dice;
  return j.dump();
}

double logits_dice(const Tensor& logits, const Tensor& mask) {
  const auto z = logits.data();
  const auto m = mask.data();
  if (z.size() != m.size()) throw InputError("logits and mask differ in size");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const bool a = z[i] > 0.0, b = m[i] != 0.0;
    p += a;
    g += b;
    both += a && b;
  }
  return p + g == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

namespace {

void dump_batch(const std::string& dir, const VolumeSample& s, std::size_t epoch, std::size_t step, double loss) {
  if (dir.empty()) return;
  const Triple d = s.dims();
  write_volume((fs::path(dir) / "nonfinite_volume.v3d").string(), reshape(s.volume.detach(), {s.volume.size(0) * d[0], d[1], d[2]}),
               {1, 1, 1}, VolumeType::Float);
  write_volume((fs::path(dir) / "nonfinite_mask.v3d").string(), s.mask, {1, 1, 1}, VolumeType::Mask);
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["step"] = step;
  j["loss"] = std::isnan(loss) ? "nan" : (loss > 0 ? "inf" : "-inf");
  j["prompt"] = s.prompt;
  std::ofstream((fs::path(dir) / "nonfinite.json").string()) << j.dump(2) << "\n";
}

}  // namespace

TrainingReport train(Model& model, const std::vector<VolumeSample>& dataset, const TrainConfig& config, const TrainOptions& options) {
  if (dataset.empty()) throw InputError("training set is empty");
  if (config.batch_size == 0 || config.epochs == 0) throw ConfigError("epochs and batch_size must be positive");

  std::ofstream log;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    log.open((fs::path(options.out_dir) / "train_log.jsonl").string(), std::ios::trunc);
    if (!log) throw InputError("cannot write training log in " + options.out_dir);
  }
  const std::string config_text = serialize_config(model.config());

  TrainingReport report;
  report.frozen_hash = model.params().frozen_hash();
  auto verify_frozen = [&] {
    if (model.params().frozen_hash() != report.frozen_hash) throw InternalError("frozen parameters changed during training");
    ++report.frozen_checks;
  };

  AdamW opt(model.params().trainable(), config.beta1, config.beta2, config.adam_eps, config.weight_decay);
  std::mt19937_64 rng(config.seed ^ 0x7a11ULL);
  std::vector<std::size_t> order(dataset.size());
  const Triple vol_dims = dataset[0].dims();
  const bool use_patches = config.patch != vol_dims;
  std::size_t patch_counter = 0;
  bool done = false;

  model.params().zero_grad();
  for (std::size_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
    const double lr = scheduled_lr(config.schedule, config.lr, epoch, config.epochs);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0, dice_sum = 0;
    std::size_t seen = 0, in_batch = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      VolumeSample s = dataset[order[k]];
      if (!config.augment.empty()) s = augment(s, rng, config.augment);
      if (use_patches) {
        // Alternate foreground / background crops across steps.
        PatchSet ps = sample_patches(s, config.patch, 2, rng);
        if (!ps.warning.empty() && report.warnings.size() < 100) report.warnings.push_back(ps.warning);
        s = ps.patches[patch_counter++ % 2];
      }
      const Triple d = s.dims();
      const Tensor x = reshape(s.volume, {1, s.volume.size(0), d[0], d[1], d[2]});
      const Tensor logits = model.forward(x, s.prompt);
      Tensor loss = segmentation_loss(logits, s.mask);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        dump_batch(options.out_dir, s, epoch, report.steps, lv);
        throw EvaluationError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(report.steps) +
                              " (prompt '" + s.prompt + "')" + (options.out_dir.empty() ? "" : "; batch dumped to " + options.out_dir));
      }
      loss_sum += lv;
      dice_sum += logits_dice(logits, s.mask);
      ++seen;
      const std::size_t batch_len = std::min(config.batch_size, order.size() - (k - in_batch));
      (batch_len == 1 ? loss : mul_scalar(loss, 1.0 / static_cast<double>(batch_len))).backward();
      if (++in_batch == batch_len) {
        opt.step(lr);
        model.params().zero_grad();
        in_batch = 0;
        ++report.steps;
        if (config.max_steps && report.steps >= config.max_steps) {
          done = true;
          break;
        }
      }
    }
    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(seen), dice_sum / static_cast<double>(seen)};
    report.epochs.push_back(rec);
    if (log) log << format_epoch_record(rec) << "\n" << std::flush;
    if (options.on_epoch) options.on_epoch(rec);

    const bool last = done || epoch + 1 == config.epochs;
    if ((config.checkpoint_every && (epoch + 1) % config.checkpoint_every == 0) || last) {
      verify_frozen();
      if (!options.out_dir.empty()) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_epoch%04zu.ckpt", epoch + 1);
        const std::string path = (fs::path(options.out_dir) / name).string();
        write_checkpoint(path, model.params(), config_text);
        report.checkpoints.push_back(path);
        if (last) {
          const std::string final_path = (fs::path(options.out_dir) / "model.ckpt").string();
          write_checkpoint(final_path, model.params(), config_text);
          report.checkpoints.push_back(final_path);
        }
      }
    }
  }
  return report;
}

}  // namespace refseg
