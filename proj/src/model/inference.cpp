#include "mapmatch/model/inference.hpp"

#include <algorithm>
#include <cmath>

#include "mapmatch/error.hpp"

namespace mapmatch::model {

NormalizedTrajectory normalize(const GpsTrajectory& traj, const BoundingBox& bounds) {
  if (!(bounds.lat_max > bounds.lat_min) || !(bounds.lon_max > bounds.lon_min)) {
    throw DegenerateBounds("normalization bounds must satisfy max > min on both axes");
  }
  NormalizedTrajectory out;
  out.values.reserve(traj.size());
  out.pad_mask.assign(traj.size(), 0);
  auto scale = [&out](double x, double lo, double hi) {
    double v = (x - lo) / (hi - lo);
    if (v < 0.0 || v > 1.0) {
      ++out.clamped;
      v = std::clamp(v, 0.0, 1.0);
    }
    return v;
  };
  for (const LonLat& p : traj.points) {
    const double lat = scale(p.lat, bounds.lat_min, bounds.lat_max);
    const double lon = scale(p.lon, bounds.lon_min, bounds.lon_max);
    out.values.push_back({lat, lon});
  }
  return out;
}

ModelConfig config_for_network(const RoadNetwork& net, ModelConfig base) {
  base.n_classes = static_cast<int>(net.num_edges()) + 1;
  return base;
}

std::vector<TrainingExample> make_examples(std::span<const GpsTrajectory> corpus,
                                           const BoundingBox& bounds) {
  std::vector<TrainingExample> out;
  out.reserve(corpus.size());
  for (const GpsTrajectory& t : corpus) {
    if (!t.truth) throw ValidationError("trajectory " + t.traj_id + " has no truth labels");
    TrainingExample ex{normalize(t, bounds), {}};
    ex.labels.reserve(t.truth->size());
    for (EdgeId e : *t.truth) ex.labels.push_back(edge_to_class(e));
    out.push_back(std::move(ex));
  }
  return out;
}

namespace {

MatchResult decode_rows(const Eigen::Ref<const Mat<float>>& logits, bool with_probs) {
  MatchResult r;
  r.route.reserve(static_cast<std::size_t>(logits.rows()));
  if (with_probs) r.probabilities.resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 1;
    for (Eigen::Index c = 2; c < logits.cols(); ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    r.route.push_back(class_to_edge(static_cast<int>(best)));
    if (with_probs) {
      const auto row = logits.row(i).cast<double>();
      const double peak = row.maxCoeff();
      const auto e = (row.array() - peak).exp();
      r.probabilities.row(i) = e / e.sum();
    }
  }
  return r;
}

}  // namespace

MatchResult predict(const Transformer<float>& model, const GpsTrajectory& traj,
                    const BoundingBox& bounds, bool capture) {
  const NormalizedTrajectory input = normalize(traj, bounds);
  auto out = model.forward(std::span(&input, 1), capture);
  MatchResult r = decode_rows(out.logits, true);
  if (capture) r.records = std::move(out.records[0]);
  return r;
}

std::vector<MatchResult> predict_corpus(const Transformer<float>& model,
                                        std::span<const GpsTrajectory> corpus,
                                        const BoundingBox& bounds, bool with_probs,
                                        std::size_t batch_size) {
  std::vector<MatchResult> results;
  results.reserve(corpus.size());
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t start = 0; start < corpus.size(); start += batch_size) {
    const std::size_t end = std::min(corpus.size(), start + batch_size);
    std::vector<NormalizedTrajectory> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(normalize(corpus[i], bounds));
    auto out = model.forward(batch);
    for (std::size_t s = 0; s < batch.size(); ++s) {
      results.push_back(decode_rows(out.sequence_logits(s), with_probs));
    }
  }
  return results;
}

AttentionRanges attention_ranges(std::span<const AttentionRecord> records) {
  Mat<double> mean;
  int used = 0;
  for (const AttentionRecord& r : records) {
    if (r.stage != AttentionStage::DecoderCross) continue;
    if (used == 0) {
      mean = r.weights;
    } else {
      if (r.weights.rows() != mean.rows() || r.weights.cols() != mean.cols()) {
        throw ValidationError("cross-attention records have inconsistent shapes");
      }
      mean += r.weights;
    }
    ++used;
  }
  if (used == 0) throw NoCapture("no decoder cross-attention records captured");
  mean /= static_cast<double>(used);

  AttentionRanges out;
  out.log_weights = mean.cwiseMax(kLogWeightFloor).array().log().matrix();
  std::vector<double> all(out.log_weights.data(), out.log_weights.data() + out.log_weights.size());
  double avg = 0.0;
  for (double v : all) avg += v;
  avg /= static_cast<double>(all.size());
  std::sort(all.begin(), all.end());
  const std::size_t n = all.size();
  const double median = n % 2 ? all[n / 2] : 0.5 * (all[n / 2 - 1] + all[n / 2]);
  out.threshold = 0.5 * (avg + median);

  // Values equal to the threshold up to rounding count as above it.
  const double cut = out.threshold - 1e-12 * std::max(1.0, std::abs(out.threshold));
  for (Eigen::Index q = 0; q < out.log_weights.rows(); ++q) {
    int first = -1, last = -1;
    for (Eigen::Index k = 0; k < out.log_weights.cols(); ++k) {
      if (out.log_weights(q, k) >= cut) {
        if (first < 0) first = static_cast<int>(k);
        last = static_cast<int>(k);
      }
    }
    if (first < 0) {
      Eigen::Index arg = 0;
      out.log_weights.row(q).maxCoeff(&arg);
      first = last = static_cast<int>(arg);
    }
    out.intervals.push_back({first, last});
  }
  return out;
}

}  // namespace mapmatch::model
