#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mapmatch/random.hpp"
#include "mapmatch/roadnet.hpp"

namespace mapmatch {

/// One matched edge id per GPS point.
using PointRoute = std::vector<EdgeId>;

struct LabeledPoint {
  LonLat pos;
  EdgeId edge = 0;
  int ordinal = 0;  // position along the edge, increasing in travel direction
};

struct GpsTrajectory {
  std::string traj_id;
  std::vector<LonLat> points;
  std::optional<PointRoute> truth;

  std::size_t size() const { return points.size(); }
};

struct GenerationConfig {
  int route_length = 4;       // N, segments per route
  double spacing_m = 30.0;    // D, distance between generated points
  int select_min = 2;         // r1
  int select_max = 6;         // r2
  double sigma_m = 15.0;      // Gaussian noise per axis
  std::uint64_t seed = 1;
  bool exclude_uturn = true;
  std::size_t route_cap = 10'000'000;

  /// Throws ValidationError when a field is out of range.
  void validate() const;
  nlohmann::json to_json() const;
  static GenerationConfig from_json(const nlohmann::json& j);
};

/// Every route of exactly `n` connected segments, lexicographic by edge ids.
std::vector<SegmentRoute> enumerate_routes(const RoadNetwork& net, int n,
                                           bool exclude_uturn = true,
                                           std::size_t cap = 10'000'000);

/// Points at arc offsets 0, D, 2D, ... strictly below the edge length.
std::vector<LabeledPoint> generate_points(const RoadNetwork& net, EdgeId edge,
                                          double spacing_m);

/// Picks between r1 and min(r2, available) points per segment, uniformly,
/// keeping ordinal order within each segment and route order across them.
std::vector<LabeledPoint> select_points(
    std::span<const std::vector<LabeledPoint>> route_points, int r1, int r2,
    Rng& rng);

/// Independent zero-mean Gaussian perturbation per meter-plane axis.
GpsTrajectory add_noise(const RoadNetwork& net, const GpsTrajectory& traj,
                        double sigma_m, Rng& rng);

std::vector<GpsTrajectory> generate_corpus(const RoadNetwork& net,
                                           const GenerationConfig& cfg,
                                           std::size_t count);

/// Like generate_corpus with a shifted noise/sampling distribution: per
/// trajectory sigma ~ U[0.5, 2] * cfg.sigma_m, 10% of points with 4x heavier
/// noise, and per-segment counts drawn from (r1 + 1, r2 + 2).
std::vector<GpsTrajectory> generate_pseudo_real(const RoadNetwork& net,
                                                const GenerationConfig& cfg,
                                                std::size_t count);

/// Order-preserving removal of consecutive duplicates (point-level route to
/// segment-level route).
SegmentRoute collapse(std::span<const EdgeId> route);

/// Floor applied to the heavy-tail sigma so a zero-noise base still yields
/// perturbed outliers.
inline constexpr double kHeavyTailFloorM = 5.0;

}  // namespace mapmatch
