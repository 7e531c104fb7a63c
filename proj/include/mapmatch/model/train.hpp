#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mapmatch/model/optimizer.hpp"
#include "mapmatch/model/transformer.hpp"

namespace mapmatch::model {

struct TrainOptions {
  int epochs = 20;
  int batch_size = 32;
  AdamOptions adam;
  std::uint64_t seed = 1;
  /// Rewritten at the end of every epoch when set.
  std::optional<std::filesystem::path> checkpoint_path;
  /// Called after each epoch with (epoch, mean loss).
  std::function<void(int, double)> on_epoch;
};

struct LossLogEntry {
  int epoch = 0;
  long step = 0;
  double loss = 0.0;
};

struct TrainLog {
  std::vector<LossLogEntry> steps;
  std::vector<double> epoch_loss;  // token-weighted mean per epoch

  /// CSV with header `epoch,step,loss`.
  std::string to_csv() const;
};

using ComponentMask = std::set<Component>;

/// Every component, embedding included.
ComponentMask full_mask();

/// Parses "output", "output+norm", ..., or "full".
ComponentMask parse_mask(const std::string& spec);
std::string mask_name(const ComponentMask& mask);

/// Shuffled mini-batch Adam over every tensor. Deterministic for a seed.
TrainLog train(Transformer<float>& model, const std::vector<TrainingExample>& data,
               const TrainOptions& opt);

/// Same loop restricted to tensors tagged with a component in `mask`; all
/// other tensors stay bit-identical.
TrainLog fine_tune(Transformer<float>& model, const std::vector<TrainingExample>& data,
                   const ComponentMask& mask, const TrainOptions& opt);

}  // namespace mapmatch::model
