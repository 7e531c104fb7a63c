#include "mapmatch/hmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "mapmatch/error.hpp"

namespace mapmatch {

void HmmConfig::validate() const {
  if (!(sigma_emission_m > 0.0) || !(beta_transition > 0.0) || k_candidates < 1 ||
      !(radius_m > 0.0)) {
    throw ValidationError("HMM parameters must all be strictly positive");
  }
}

nlohmann::json HmmConfig::to_json() const {
  return {{"sigma_emission_m", sigma_emission_m},
          {"beta_transition", beta_transition},
          {"k_candidates", k_candidates},
          {"radius_m", radius_m},
          {"nearest_fallback", nearest_fallback}};
}

HmmConfig HmmConfig::from_json(const nlohmann::json& j) {
  HmmConfig c;
  c.sigma_emission_m = j.value("sigma_emission_m", c.sigma_emission_m);
  c.beta_transition = j.value("beta_transition", c.beta_transition);
  c.k_candidates = j.value("k_candidates", c.k_candidates);
  c.radius_m = j.value("radius_m", c.radius_m);
  c.nearest_fallback = j.value("nearest_fallback", c.nearest_fallback);
  return c;
}

double emission_logp(const EdgeCandidate& c, const HmmConfig& cfg) {
  const double s = cfg.sigma_emission_m;
  const double d = c.distance_m;
  return -d * d / (2.0 * s * s) - std::log(s * std::sqrt(2.0 * std::numbers::pi));
}

namespace {

template <typename PathFn>
double transition_impl(const EdgeCandidate& from, const EdgeCandidate& to,
                       const RoadNetwork& net, const HmmConfig& cfg, PathFn path) {
  const double straight = std::hypot(to.projected_xy.x - from.projected_xy.x,
                                     to.projected_xy.y - from.projected_xy.y);
  double route = 0.0;
  if (from.edge == to.edge && to.offset_m >= from.offset_m) {
    route = to.offset_m - from.offset_m;
  } else {
    std::optional<double> between = path(from.edge, to.edge);
    if (!between) return -std::numeric_limits<double>::infinity();
    route = (net.edge_length(from.edge) - from.offset_m) + *between + to.offset_m;
  }
  return -std::abs(straight - route) / cfg.beta_transition;
}

}  // namespace

double transition_logp(const EdgeCandidate& from, const EdgeCandidate& to,
                       const RoadNetwork& net, const HmmConfig& cfg) {
  return transition_impl(from, to, net, cfg, [&net](EdgeId a, EdgeId b) {
    return shortest_path_length(net, a, b);
  });
}

double transition_logp(const EdgeCandidate& from, const EdgeCandidate& to,
                       const RoadNetwork& net, const DistanceTable& paths,
                       const HmmConfig& cfg) {
  return transition_impl(from, to, net, cfg, [&paths](EdgeId a, EdgeId b) {
    return paths.between_edges(a, b);
  });
}

ViterbiPath viterbi_decode(const Lattice& lattice) {
  const std::size_t steps = lattice.emission.size();
  ViterbiPath result;
  if (steps == 0) return result;

  std::vector<std::vector<double>> score(steps);
  std::vector<std::vector<int>> back(steps);
  score[0] = lattice.emission[0];
  back[0].assign(score[0].size(), -1);

  // Label sequence of the best prefix ending at state i of step t.
  auto prefix = [&](std::size_t t, int i) {
    std::vector<int> labels(t + 1);
    for (std::size_t s = t + 1; s-- > 0;) {
      labels[s] = lattice.label[s][static_cast<std::size_t>(i)];
      i = back[s][static_cast<std::size_t>(i)];
    }
    return labels;
  };

  for (std::size_t t = 1; t < steps; ++t) {
    const std::size_t prev_n = score[t - 1].size();
    const std::size_t cur_n = lattice.emission[t].size();
    score[t].assign(cur_n, -std::numeric_limits<double>::infinity());
    back[t].assign(cur_n, -1);
    for (std::size_t j = 0; j < cur_n; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      int arg = -1;
      for (std::size_t i = 0; i < prev_n; ++i) {
        const double s = score[t - 1][i] + lattice.transition[t - 1][i][j];
        if (arg < 0 || s > best + kScoreTieTolerance ||
            (scores_tie(s, best) && prefix(t - 1, static_cast<int>(i)) < prefix(t - 1, arg))) {
          best = s;
          arg = static_cast<int>(i);
        }
      }
      score[t][j] = best + lattice.emission[t][j];
      back[t][j] = arg;
    }
  }

  const std::size_t last = steps - 1;
  int end = -1;
  for (std::size_t i = 0; i < score[last].size(); ++i) {
    const int ii = static_cast<int>(i);
    if (end < 0 || score[last][i] > score[last][static_cast<std::size_t>(end)] + kScoreTieTolerance ||
        (scores_tie(score[last][i], score[last][static_cast<std::size_t>(end)]) &&
         prefix(last, ii) < prefix(last, end))) {
      end = ii;
    }
  }
  result.score = score[last][static_cast<std::size_t>(end)];
  result.states.resize(steps);
  if (std::isinf(result.score)) {
    // Every path is infeasible, so all tie; the DP's prefixes were chosen by
    // partial scores, which no longer matter. Smallest label per step.
    for (std::size_t t = 0; t < steps; ++t) {
      const auto& l = lattice.label[t];
      result.states[t] = static_cast<int>(std::min_element(l.begin(), l.end()) - l.begin());
    }
    return result;
  }
  for (std::size_t s = steps; s-- > 0;) {
    result.states[s] = end;
    end = back[s][static_cast<std::size_t>(end)];
  }
  return result;
}

HmmMatcher::HmmMatcher(const RoadNetwork& net, HmmConfig cfg)
    : net_(net), cfg_(cfg), paths_(net) {
  cfg_.validate();
}

std::vector<std::vector<EdgeCandidate>> HmmMatcher::candidates(const GpsTrajectory& traj) const {
  std::vector<std::vector<EdgeCandidate>> out;
  out.reserve(traj.size());
  for (std::size_t i = 0; i < traj.size(); ++i) {
    auto c = nearest_edges(net_, traj.points[i], cfg_.k_candidates, cfg_.radius_m);
    if (c.empty() && cfg_.nearest_fallback) {
      c = nearest_edges(net_, traj.points[i], cfg_.k_candidates,
                        std::numeric_limits<double>::infinity());
    }
    if (c.empty()) throw NoCandidates(i);
    out.push_back(std::move(c));
  }
  return out;
}

Lattice HmmMatcher::build_lattice(const std::vector<std::vector<EdgeCandidate>>& cands) const {
  Lattice lat;
  lat.label.resize(cands.size());
  lat.emission.resize(cands.size());
  for (std::size_t t = 0; t < cands.size(); ++t) {
    for (const EdgeCandidate& c : cands[t]) {
      lat.label[t].push_back(c.edge);
      lat.emission[t].push_back(emission_logp(c, cfg_));
    }
  }
  for (std::size_t t = 0; t + 1 < cands.size(); ++t) {
    std::vector<std::vector<double>> m(cands[t].size(),
                                       std::vector<double>(cands[t + 1].size()));
    for (std::size_t i = 0; i < cands[t].size(); ++i)
      for (std::size_t j = 0; j < cands[t + 1].size(); ++j)
        m[i][j] = transition_logp(cands[t][i], cands[t + 1][j], net_, paths_, cfg_);
    lat.transition.push_back(std::move(m));
  }
  return lat;
}

PointRoute HmmMatcher::match(const GpsTrajectory& traj) const {
  const auto cands = candidates(traj);
  const ViterbiPath path = viterbi_decode(build_lattice(cands));
  PointRoute route(traj.size());
  for (std::size_t t = 0; t < route.size(); ++t) {
    route[t] = cands[t][static_cast<std::size_t>(path.states[t])].edge;
  }
  return route;
}

double HmmMatcher::best_score(const GpsTrajectory& traj) const {
  return viterbi_decode(build_lattice(candidates(traj))).score;
}

PointRoute viterbi_match(const GpsTrajectory& traj, const RoadNetwork& net,
                         const HmmConfig& cfg) {
  return HmmMatcher(net, cfg).match(traj);
}

}  // namespace mapmatch
