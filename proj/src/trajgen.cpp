#include "mapmatch/trajgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mapmatch/error.hpp"

namespace mapmatch {

namespace {

// Offsets within this distance of the edge end count as reaching it.
constexpr double kEndSlackM = 1e-6;

std::string make_traj_id(const char* prefix, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%06zu", prefix, index);
  return buf;
}

}  // namespace

void GenerationConfig::validate() const {
  if (route_length < 1) throw ValidationError("route_length must be >= 1");
  if (!(spacing_m > 0.0)) throw ValidationError("spacing_m must be > 0");
  if (select_min < 1 || select_min > select_max) {
    throw ValidationError("selection range must satisfy 1 <= r1 <= r2");
  }
  if (!(sigma_m >= 0.0)) throw ValidationError("sigma_m must be >= 0");
  if (static_cast<long long>(route_length) * select_min < 3) {
    throw ValidationError("route_length * r1 must be >= 3 (minimum trajectory length)");
  }
}

nlohmann::json GenerationConfig::to_json() const {
  return {{"route_length", route_length}, {"spacing_m", spacing_m},
          {"select_min", select_min},     {"select_max", select_max},
          {"sigma_m", sigma_m},           {"seed", seed},
          {"exclude_uturn", exclude_uturn}, {"route_cap", route_cap}};
}

GenerationConfig GenerationConfig::from_json(const nlohmann::json& j) {
  GenerationConfig c;
  c.route_length = j.value("route_length", c.route_length);
  c.spacing_m = j.value("spacing_m", c.spacing_m);
  c.select_min = j.value("select_min", c.select_min);
  c.select_max = j.value("select_max", c.select_max);
  c.sigma_m = j.value("sigma_m", c.sigma_m);
  c.seed = j.value("seed", c.seed);
  c.exclude_uturn = j.value("exclude_uturn", c.exclude_uturn);
  c.route_cap = j.value("route_cap", c.route_cap);
  return c;
}

std::vector<SegmentRoute> enumerate_routes(const RoadNetwork& net, int n,
                                           bool exclude_uturn, std::size_t cap) {
  if (n < 1) throw ValidationError("route length must be >= 1");
  const auto table = connection_table(net, exclude_uturn);
  std::vector<SegmentRoute> routes;
  SegmentRoute current;
  current.reserve(static_cast<std::size_t>(n));

  // Successor lists are ascending, so depth-first order is lexicographic.
  auto extend = [&](auto&& self) -> void {
    if (current.size() == static_cast<std::size_t>(n)) {
      if (routes.size() >= cap) {
        throw ExplosionGuard("more than " + std::to_string(cap) + " routes of length " +
                             std::to_string(n) + "; reduce N");
      }
      routes.push_back(current);
      return;
    }
    for (EdgeId next : table[current.back()]) {
      current.push_back(next);
      self(self);
      current.pop_back();
    }
  };
  for (const Edge& e : net.edges()) {
    current.assign(1, e.id);
    extend(extend);
  }
  return routes;
}

std::vector<LabeledPoint> generate_points(const RoadNetwork& net, EdgeId edge,
                                          double spacing_m) {
  if (!(spacing_m > 0.0)) throw ValidationError("point spacing must be > 0");
  const double length = net.edge_length(edge);
  std::vector<LabeledPoint> points;
  for (int k = 0;; ++k) {
    double offset = spacing_m * k;
    if (k > 0 && offset >= length - kEndSlackM) break;
    points.push_back({net.point_along(edge, offset), edge, k});
  }
  return points;
}

std::vector<LabeledPoint> select_points(
    std::span<const std::vector<LabeledPoint>> route_points, int r1, int r2,
    Rng& rng) {
  if (r1 < 1 || r1 > r2) throw ValidationError("selection range must satisfy 1 <= r1 <= r2");
  std::vector<LabeledPoint> out;
  for (const auto& segment : route_points) {
    const int available = static_cast<int>(segment.size());
    if (available < r1) {
      throw InsufficientPoints("segment offers " + std::to_string(available) +
                               " points but at least " + std::to_string(r1) +
                               " are required");
    }
    std::uniform_int_distribution<int> count_dist(r1, std::min(r2, available));
    const int count = count_dist(rng);
    // std::sample keeps the relative order of the source range.
    std::sample(segment.begin(), segment.end(), std::back_inserter(out),
                count, rng);
  }
  return out;
}

GpsTrajectory add_noise(const RoadNetwork& net, const GpsTrajectory& traj,
                        double sigma_m, Rng& rng) {
  if (!(sigma_m >= 0.0)) throw ValidationError("noise sigma must be >= 0");
  GpsTrajectory out = traj;
  if (sigma_m == 0.0) return out;
  std::normal_distribution<double> noise(0.0, sigma_m);
  for (LonLat& p : out.points) {
    PlanePoint q = net.project(p);
    q.x += noise(rng);
    q.y += noise(rng);
    p = net.unproject(q);
  }
  return out;
}

namespace {

struct RouteSampler {
  const RoadNetwork& net;
  std::vector<SegmentRoute> routes;
  std::vector<std::vector<LabeledPoint>> points_by_edge;

  RouteSampler(const RoadNetwork& n, const GenerationConfig& cfg)
      : net(n),
        routes(enumerate_routes(n, cfg.route_length, cfg.exclude_uturn, cfg.route_cap)) {
    if (routes.empty()) throw ValidationError("network has no route of the requested length");
    points_by_edge.reserve(net.num_edges());
    for (const Edge& e : net.edges()) {
      points_by_edge.push_back(generate_points(net, e.id, cfg.spacing_m));
    }
  }

  std::vector<std::vector<LabeledPoint>> route_points(Rng& rng) const {
    std::uniform_int_distribution<std::size_t> pick(0, routes.size() - 1);
    const SegmentRoute& route = routes[pick(rng)];
    std::vector<std::vector<LabeledPoint>> per_segment;
    per_segment.reserve(route.size());
    for (EdgeId e : route) per_segment.push_back(points_by_edge[e]);
    return per_segment;
  }
};

GpsTrajectory to_trajectory(std::string id, const std::vector<LabeledPoint>& pts) {
  GpsTrajectory t;
  t.traj_id = std::move(id);
  t.truth.emplace();
  t.points.reserve(pts.size());
  t.truth->reserve(pts.size());
  for (const LabeledPoint& p : pts) {
    t.points.push_back(p.pos);
    t.truth->push_back(p.edge);
  }
  return t;
}

}  // namespace

std::vector<GpsTrajectory> generate_corpus(const RoadNetwork& net,
                                           const GenerationConfig& cfg,
                                           std::size_t count) {
  cfg.validate();
  std::vector<GpsTrajectory> corpus;
  if (count == 0) return corpus;
  RouteSampler sampler(net, cfg);
  corpus.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    auto per_segment = sampler.route_points(rng);
    auto selected = select_points(per_segment, cfg.select_min, cfg.select_max, rng);
    corpus.push_back(add_noise(net, to_trajectory(make_traj_id("syn", i), selected),
                               cfg.sigma_m, rng));
  }
  return corpus;
}

std::vector<GpsTrajectory> generate_pseudo_real(const RoadNetwork& net,
                                                const GenerationConfig& cfg,
                                                std::size_t count) {
  cfg.validate();
  std::vector<GpsTrajectory> corpus;
  if (count == 0) return corpus;
  RouteSampler sampler(net, cfg);
  corpus.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    auto per_segment = sampler.route_points(rng);
    std::vector<LabeledPoint> selected;
    for (const auto& segment : per_segment) {
      const int available = static_cast<int>(segment.size());
      if (available < cfg.select_min) {
        throw InsufficientPoints("segment offers " + std::to_string(available) +
                                 " points but at least " +
                                 std::to_string(cfg.select_min) + " are required");
      }
      const int lo = std::min(cfg.select_min + 1, available);
      const int hi = std::min(cfg.select_max + 2, available);
      auto chosen = select_points(std::span(&segment, 1), lo, hi, rng);
      selected.insert(selected.end(), chosen.begin(), chosen.end());
    }
    GpsTrajectory t = to_trajectory(make_traj_id("real", i), selected);

    std::uniform_real_distribution<double> scale(0.5, 2.0);
    const double sigma = cfg.sigma_m * scale(rng);
    const double heavy = 4.0 * std::max(sigma, kHeavyTailFloorM);
    std::bernoulli_distribution outlier(0.1);
    std::normal_distribution<double> unit(0.0, 1.0);
    for (LonLat& p : t.points) {
      const double s = outlier(rng) ? heavy : sigma;
      if (s == 0.0) continue;
      PlanePoint q = net.project(p);
      q.x += s * unit(rng);
      q.y += s * unit(rng);
      p = net.unproject(q);
    }
    corpus.push_back(std::move(t));
  }
  return corpus;
}

SegmentRoute collapse(std::span<const EdgeId> route) {
  SegmentRoute out;
  for (EdgeId e : route) {
    if (out.empty() || out.back() != e) out.push_back(e);
  }
  return out;
}

}  // namespace mapmatch
