#pragma once

#include <span>
#include <vector>

#include "mapmatch/model/transformer.hpp"
#include "mapmatch/roadnet.hpp"
#include "mapmatch/trajgen.hpp"

namespace mapmatch::model {

/// Min-max scaling of (lat, lon) by fixed per-network bounds; coordinates
/// outside the box are clamped and counted.
NormalizedTrajectory normalize(const GpsTrajectory& traj, const BoundingBox& bounds);

/// Labels are edge id + 1; class 0 is padding.
inline int edge_to_class(EdgeId e) { return e + 1; }
inline EdgeId class_to_edge(int c) { return c - 1; }

ModelConfig config_for_network(const RoadNetwork& net, ModelConfig base = {});

std::vector<TrainingExample> make_examples(std::span<const GpsTrajectory> corpus,
                                           const BoundingBox& bounds);

struct MatchResult {
  PointRoute route;
  Mat<double> probabilities;  // positions x classes, softmax rows
  std::vector<AttentionRecord> records;
};

/// Per-position argmax over classes 1..n-1.
MatchResult predict(const Transformer<float>& model, const GpsTrajectory& traj,
                    const BoundingBox& bounds, bool capture = false);

/// Batched predict for a whole corpus (routes only, or with probabilities).
std::vector<MatchResult> predict_corpus(const Transformer<float>& model,
                                        std::span<const GpsTrajectory> corpus,
                                        const BoundingBox& bounds, bool with_probs = false,
                                        std::size_t batch_size = 64);

struct Interval {
  int first = 0;
  int last = 0;  // inclusive
  bool operator==(const Interval&) const = default;
};

struct AttentionRanges {
  double threshold = 0.0;        // mean of (mean, median) of the log weights
  Mat<double> log_weights;       // head- and layer-averaged cross-attention, logged
  std::vector<Interval> intervals;  // one per output position
};

/// Weights below this are floored before taking logs.
inline constexpr double kLogWeightFloor = 1e-12;

/// Contiguous input range per output position whose averaged decoder
/// cross-attention log-weight reaches the global threshold. Rows with no key
/// at or above it fall back to their argmax key.
AttentionRanges attention_ranges(std::span<const AttentionRecord> records);

}  // namespace mapmatch::model
