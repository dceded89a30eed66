#include "refseg/experiment.hpp"

#include <algorithm>

#include "refseg/errors.hpp"
#include "refseg/metrics.hpp"

namespace refseg {

HeldOutScore evaluate_heldout(const Model& model, const std::vector<VolumeSample>& samples) {
  if (samples.empty()) throw InputError("held-out set is empty");
  HeldOutScore s;
  std::size_t wins = 0;
  for (const VolumeSample& v : samples) {
    const BinaryMask pred = BinaryMask::from_tensor(predict_mask(model, v.volume, v.prompt));
    const double d = dice(pred, BinaryMask::from_tensor(v.mask));
    double best_off = 0.0;
    for (const auto& cls : v.classes)
      if (cls != v.target) best_off = std::max(best_off, dice(pred, BinaryMask::from_tensor(class_mask(v, cls))));
    s.mean_dice += d;
    wins += d > best_off;
  }
  s.cases = samples.size();
  s.mean_dice /= static_cast<double>(s.cases);
  s.win_rate = static_cast<double>(wins) / static_cast<double>(s.cases);
  return s;
}

ModelConfig ablation_config(const ModelConfig& base, const std::string& variant) {
  ModelConfig c = base;
  if (variant == "full") return c;
  if (variant == "no-text") {
    c.crossmodal.use_text = false;
  } else if (variant == "no-projector") {
    c.crossmodal.use_projector = false;
  } else if (variant == "no-hierarchical-fusion") {
    c.crossmodal.stages = {c.encoder.num_stages};
  } else if (variant.rfind("stage-", 0) == 0) {
    std::size_t stage = 0;
    try {
      stage = std::stoul(variant.substr(6));
    } catch (const std::exception&) {
      throw ConfigError("unknown ablation variant '" + variant + "'");
    }
    c.crossmodal.stages = {stage};
  } else {
    throw ConfigError("unknown ablation variant '" + variant + "'");
  }
  c.validate();
  return c;
}

std::vector<AblationResult> run_ablation(const ModelConfig& base, const std::vector<std::string>& variants, const AblationSetup& setup) {
  const std::vector<VolumeSample> train_set = synth_dataset(setup.train_seed, base.data.samples, base.data);
  const std::vector<VolumeSample> heldout = synth_dataset(setup.heldout_seed, setup.heldout, base.data);
  std::vector<AblationResult> out;
  for (const auto& name : variants) {
    const ModelConfig cfg = ablation_config(base, name);
    Model model(cfg);
    const TrainingReport r = train(model, train_set, cfg.train);
    out.push_back({name, evaluate_heldout(model, heldout), r.epochs.empty() ? 0.0 : r.epochs.back().loss});
  }
  return out;
}

}  // namespace refseg
