#pragma once

#include <string>
#include <vector>

#include "refseg/data.hpp"
#include "refseg/model.hpp"
#include "refseg/train.hpp"

namespace refseg {

struct HeldOutScore {
  double mean_dice = 0.0;  // prompted-class Dice
  double win_rate = 0.0;   // fraction where prompted-class Dice beats every off-class Dice
  std::size_t cases = 0;
};

/// Predicts each sample under its own prompt and scores the mask against the
/// referred object and against the other objects in the scene.
HeldOutScore evaluate_heldout(const Model& model, const std::vector<VolumeSample>& samples);

/// Config variants compared by the ablation harness:
///   full, no-text, no-projector, no-hierarchical-fusion (final stage only),
///   stage-<i> (cross-attention on encoder stage i alone).
ModelConfig ablation_config(const ModelConfig& base, const std::string& variant);

struct AblationResult {
  std::string variant;
  HeldOutScore score;
  double final_loss = 0.0;
};

struct AblationSetup {
  std::uint64_t train_seed = 1;
  std::uint64_t heldout_seed = 2;
  std::size_t heldout = 40;
};

/// Trains one model per variant from the same seed on the same data
/// (base.data.samples scenes) and scores each on the same held-out scenes.
std::vector<AblationResult> run_ablation(const ModelConfig& base, const std::vector<std::string>& variants, const AblationSetup& setup = {});

}  // namespace refseg
