#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "refseg/data.hpp"
#include "refseg/model.hpp"

namespace refseg {

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;  // mean sample loss over the epoch
  double dice = 0.0;  // mean hard Dice of the training predictions
};

struct TrainOptions {
  /// Directory for train_log.jsonl, checkpoints and failure dumps; empty
  /// writes nothing.
  std::string out_dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainingReport {
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
  std::uint64_t frozen_hash = 0;
  std::size_t frozen_checks = 0;  // checkpoints at which the hash was verified
  std::vector<std::string> checkpoints;
  std::vector<std::string> warnings;
};

/// AdamW over the trainable parameters with the configured schedule. One
/// sample per forward pass; gradients are averaged over batch_size samples.
/// Throws EvaluationError (after dumping the batch) on a non-finite loss and
/// InternalError if a frozen parameter ever changes.
TrainingReport train(Model& model, const std::vector<VolumeSample>& dataset, const TrainConfig& config, const TrainOptions& options = {});

/// One JSON object per epoch record.
std::string format_epoch_record(const EpochRecord& r);

/// Hard Dice of logits > 0 against a binary mask.
double logits_dice(const Tensor& logits, const Tensor& mask);

}  // namespace refseg
