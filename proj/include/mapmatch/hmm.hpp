#pragma once

#include <cmath>
#include <vector>

#include "json.hpp"
#include "mapmatch/roadnet.hpp"
#include "mapmatch/trajgen.hpp"

namespace mapmatch {

struct HmmConfig {
  double sigma_emission_m = 15.0;
  double beta_transition = 50.0;
  int k_candidates = 4;
  double radius_m = 100.0;
  /// When set, a point with nothing inside radius_m takes its k nearest edges
  /// at any distance instead of raising NoCandidates.
  bool nearest_fallback = false;

  void validate() const;
  nlohmann::json to_json() const;
  static HmmConfig from_json(const nlohmann::json& j);
};

/// Gaussian log-density of the candidate's distance to its observation.
double emission_logp(const EdgeCandidate& c, const HmmConfig& cfg);

/// -|straight - along_network| / beta between consecutive candidates;
/// -infinity when the second cannot be reached from the first.
double transition_logp(const EdgeCandidate& from, const EdgeCandidate& to,
                       const RoadNetwork& net, const HmmConfig& cfg);
double transition_logp(const EdgeCandidate& from, const EdgeCandidate& to,
                       const RoadNetwork& net, const DistanceTable& paths,
                       const HmmConfig& cfg);

/// Scored state lattice for one trajectory. `label[t][i]` identifies state i
/// at step t for tie-breaking; `transition[t][i][j]` links state i at step t
/// to state j at step t + 1.
struct Lattice {
  std::vector<std::vector<int>> label;
  std::vector<std::vector<double>> emission;
  std::vector<std::vector<std::vector<double>>> transition;
};

struct ViterbiPath {
  std::vector<int> states;  // chosen state index per step
  double score = 0.0;
};

/// Path scores closer than this count as equal. Geometrically symmetric
/// paths (an edge and its reverse twin) sum the same terms in a different
/// order and can differ by rounding only.
inline constexpr double kScoreTieTolerance = 1e-9;

inline bool scores_tie(double a, double b) {
  return a == b || std::abs(a - b) <= kScoreTieTolerance;
}

/// Maximizes the summed emission and transition scores. Among equal scores
/// the lexicographically smallest label sequence wins.
ViterbiPath viterbi_decode(const Lattice& lattice);

class HmmMatcher {
 public:
  HmmMatcher(const RoadNetwork& net, HmmConfig cfg);

  /// Candidate lists per point; throws NoCandidates for an uncovered point.
  std::vector<std::vector<EdgeCandidate>> candidates(const GpsTrajectory& traj) const;
  Lattice build_lattice(const std::vector<std::vector<EdgeCandidate>>& candidates) const;
  PointRoute match(const GpsTrajectory& traj) const;
  /// Score of the optimal path.
  double best_score(const GpsTrajectory& traj) const;

  const HmmConfig& config() const { return cfg_; }

 private:
  const RoadNetwork& net_;
  HmmConfig cfg_;
  DistanceTable paths_;
};

PointRoute viterbi_match(const GpsTrajectory& traj, const RoadNetwork& net,
                         const HmmConfig& cfg);

}  // namespace mapmatch
