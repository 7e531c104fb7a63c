#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "mapmatch/model/layers.hpp"
#include "mapmatch/model/parameters.hpp"
#include "mapmatch/random.hpp"

namespace mapmatch::model {

/// Coordinates scaled into [0, 1] by the network bounding box.
struct NormalizedTrajectory {
  std::vector<std::array<double, 2>> values;  // (lat_norm, lon_norm)
  std::vector<std::uint8_t> pad_mask;         // nonzero marks padding
  std::size_t clamped = 0;                    // coordinates clamped into [0, 1]

  std::size_t size() const { return values.size(); }
  std::size_t real_length() const;
  /// Appends `count` padded positions.
  void pad(std::size_t count);
};

/// Input with one class label per position (0 at padded positions).
struct TrainingExample {
  NormalizedTrajectory input;
  std::vector<int> labels;
};

enum class AttentionStage : std::uint8_t { EncoderSelf, DecoderSelf, DecoderCross };

const char* stage_name(AttentionStage s);

struct AttentionRecord {
  AttentionStage stage = AttentionStage::EncoderSelf;
  int layer = 0;
  int head = 0;
  Mat<double> weights;  // query positions x key positions
};

template <typename T>
struct ForwardOutput {
  Mat<T> logits;                         // all positions of all sequences, stacked
  std::vector<Eigen::Index> offsets;     // first row of each sequence
  std::vector<std::vector<AttentionRecord>> records;  // per sequence, when captured

  auto sequence_logits(std::size_t s) const {
    const Eigen::Index end =
        s + 1 < offsets.size() ? offsets[s + 1] : logits.rows();
    return logits.middleRows(offsets[s], end - offsets[s]);
  }
};

template <typename T>
struct LossAndGradients {
  double loss = 0.0;
  std::size_t tokens = 0;
  std::vector<Mat<T>> gradients;  // aligned with ParameterStore tensors
};

/// Encoder-decoder Transformer labeling every input point with an edge class.
/// The decoder is non-autoregressive: its input stream is a learned query
/// embedding per position, so output length always equals input length.
template <typename T>
class Transformer {
 public:
  explicit Transformer(ModelConfig cfg);
  Transformer(ModelConfig cfg, std::uint64_t init_seed);
  Transformer(ModelConfig cfg, ParameterStore<T> params);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return params_; }
  const ParameterStore<T>& parameters() const { return params_; }

  /// Inference pass, no dropout.
  ForwardOutput<T> forward(std::span<const NormalizedTrajectory> batch,
                           bool capture = false) const;

  /// Mean cross-entropy over non-padded positions and its gradient. Dropout
  /// is applied when `dropout_rng` is given and the config rate is nonzero.
  LossAndGradients<T> loss_and_gradients(std::span<const TrainingExample> batch,
                                         Rng* dropout_rng = nullptr) const;

 private:
  struct Pass;
  void run_forward(Pass& pass, Rng* dropout_rng) const;

  ModelConfig cfg_;
  ParameterStore<T> params_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

}  // namespace mapmatch::model
