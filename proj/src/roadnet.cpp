#include "mapmatch/roadnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <queue>
#include <sstream>
#include <unordered_set>

#include "mapmatch/error.hpp"

namespace mapmatch {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kEndpointTolDeg = 1e-9;

double plane_distance(PlanePoint a, PlanePoint b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

}  // namespace

RoadNetwork::RoadNetwork(std::vector<Vertex> vertices, std::vector<Edge> edges,
                         nlohmann::json meta)
    : vertices_(std::move(vertices)), meta_(std::move(meta)) {
  if (edges.empty()) throw ValidationError("network has no edges");
  if (vertices_.empty()) throw ValidationError("network has no vertices");

  std::unordered_map<long long, int> vertex_index;
  double sum_lon = 0.0, sum_lat = 0.0;
  for (std::size_t i = 0; i < vertices_.size(); ++i) {
    const Vertex& v = vertices_[i];
    if (!(v.x >= -180.0 && v.x <= 180.0 && v.y >= -90.0 && v.y <= 90.0)) {
      throw ValidationError("vertex " + std::to_string(v.id) +
                            " has coordinates outside WGS84 range");
    }
    if (!vertex_index.emplace(v.id, static_cast<int>(i)).second) {
      throw ValidationError("duplicate vertex id " + std::to_string(v.id));
    }
    sum_lon += v.x;
    sum_lat += v.y;
  }
  origin_ = {sum_lon / static_cast<double>(vertices_.size()),
             sum_lat / static_cast<double>(vertices_.size())};
  cos_lat0_ = std::cos(origin_.lat * kDegToRad);

  // Input edges carry vertex *ids* in start/end; resolve them to indices.
  std::sort(edges.begin(), edges.end(),
            [](const Edge& a, const Edge& b) { return a.source_id < b.source_id; });
  for (std::size_t i = 0; i < edges.size(); ++i) {
    Edge& e = edges[i];
    if (i > 0 && edges[i - 1].source_id == e.source_id) {
      throw ValidationError("duplicate edge id " + std::to_string(e.source_id));
    }
    auto s = vertex_index.find(e.start);
    auto t = vertex_index.find(e.end);
    if (s == vertex_index.end() || t == vertex_index.end()) {
      throw ValidationError("edge " + std::to_string(e.source_id) +
                            " references a missing vertex");
    }
    e.start = s->second;
    e.end = t->second;
    e.id = static_cast<EdgeId>(i);
    if (e.polyline.size() < 2) {
      throw ValidationError("edge " + std::to_string(e.source_id) +
                            " polyline needs at least two points");
    }
    const Vertex& vs = vertices_[e.start];
    const Vertex& ve = vertices_[e.end];
    const LonLat& first = e.polyline.front();
    const LonLat& last = e.polyline.back();
    if (std::abs(first.lon - vs.x) > kEndpointTolDeg ||
        std::abs(first.lat - vs.y) > kEndpointTolDeg ||
        std::abs(last.lon - ve.x) > kEndpointTolDeg ||
        std::abs(last.lat - ve.y) > kEndpointTolDeg) {
      throw ValidationError("edge " + std::to_string(e.source_id) +
                            " polyline endpoints do not match its vertices");
    }
    source_to_dense_.emplace(e.source_id, e.id);
  }
  edges_ = std::move(edges);

  geometry_.resize(edges_.size());
  out_edges_.resize(vertices_.size());
  for (const Edge& e : edges_) {
    EdgeGeometry& g = geometry_[e.id];
    g.points.reserve(e.polyline.size());
    g.cumulative.reserve(e.polyline.size());
    double acc = 0.0;
    for (const LonLat& p : e.polyline) {
      PlanePoint q = project(p);
      if (!g.points.empty()) acc += plane_distance(g.points.back(), q);
      g.points.push_back(q);
      g.cumulative.push_back(acc);
    }
    if (!(acc > 0.0)) {
      throw ValidationError("edge " + std::to_string(e.source_id) +
                            " has zero length");
    }
    out_edges_[e.start].push_back(e.id);
  }
}

const Edge& RoadNetwork::edge(EdgeId id) const {
  if (!has_edge(id)) throw UnknownEdge(id);
  return edges_[static_cast<std::size_t>(id)];
}

EdgeId RoadNetwork::edge_from_source(long long source_id) const {
  auto it = source_to_dense_.find(source_id);
  if (it == source_to_dense_.end()) throw UnknownEdge(source_id);
  return it->second;
}

std::span<const EdgeId> RoadNetwork::out_edges(int vertex) const {
  return out_edges_.at(static_cast<std::size_t>(vertex));
}

PlanePoint RoadNetwork::project(LonLat p) const {
  return {kEarthRadiusM * (p.lon - origin_.lon) * kDegToRad * cos_lat0_,
          kEarthRadiusM * (p.lat - origin_.lat) * kDegToRad};
}

LonLat RoadNetwork::unproject(PlanePoint p) const {
  return {origin_.lon + p.x / (kEarthRadiusM * cos_lat0_) / kDegToRad,
          origin_.lat + p.y / kEarthRadiusM / kDegToRad};
}

double RoadNetwork::edge_length(EdgeId id) const {
  edge(id);
  return geometry_[id].cumulative.back();
}

PlanePoint RoadNetwork::plane_point_along(EdgeId id, double offset_m) const {
  edge(id);
  const EdgeGeometry& g = geometry_[id];
  if (offset_m <= 0.0) return g.points.front();
  if (offset_m >= g.cumulative.back()) return g.points.back();
  // First polyline vertex strictly beyond the offset.
  auto it = std::upper_bound(g.cumulative.begin(), g.cumulative.end(), offset_m);
  std::size_t j = static_cast<std::size_t>(it - g.cumulative.begin());
  const PlanePoint& a = g.points[j - 1];
  const PlanePoint& b = g.points[j];
  double seg = g.cumulative[j] - g.cumulative[j - 1];
  double t = seg > 0.0 ? (offset_m - g.cumulative[j - 1]) / seg : 0.0;
  return {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
}

LonLat RoadNetwork::point_along(EdgeId id, double offset_m) const {
  edge(id);
  if (offset_m <= 0.0) return edges_[id].polyline.front();
  return unproject(plane_point_along(id, offset_m));
}

EdgeProjection RoadNetwork::project_onto_edge(EdgeId id, PlanePoint p) const {
  edge(id);
  const EdgeGeometry& g = geometry_[id];
  EdgeProjection best;
  best.distance_m = std::numeric_limits<double>::infinity();
  for (std::size_t j = 1; j < g.points.size(); ++j) {
    const PlanePoint& a = g.points[j - 1];
    const PlanePoint& b = g.points[j];
    double dx = b.x - a.x, dy = b.y - a.y;
    double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    PlanePoint q{a.x + t * dx, a.y + t * dy};
    double d = plane_distance(p, q);
    if (d < best.distance_m) {
      best.distance_m = d;
      best.point = q;
      best.offset_m = g.cumulative[j - 1] + t * (g.cumulative[j] - g.cumulative[j - 1]);
    }
  }
  return best;
}

BoundingBox RoadNetwork::bounding_box() const {
  BoundingBox box{std::numeric_limits<double>::infinity(),
                  -std::numeric_limits<double>::infinity(),
                  std::numeric_limits<double>::infinity(),
                  -std::numeric_limits<double>::infinity()};
  auto grow = [&box](double lon, double lat) {
    box.lat_min = std::min(box.lat_min, lat);
    box.lat_max = std::max(box.lat_max, lat);
    box.lon_min = std::min(box.lon_min, lon);
    box.lon_max = std::max(box.lon_max, lon);
  };
  for (const Vertex& v : vertices_) grow(v.x, v.y);
  for (const Edge& e : edges_)
    for (const LonLat& p : e.polyline) grow(p.lon, p.lat);
  return box;
}

RoadNetwork RoadNetwork::from_json(const nlohmann::json& doc) {
  std::vector<Vertex> vertices;
  std::vector<Edge> edges;
  try {
    for (const auto& v : doc.at("vertices")) {
      vertices.push_back({v.at("id").get<long long>(), v.at("x").get<double>(),
                          v.at("y").get<double>()});
    }
    for (const auto& e : doc.at("edges")) {
      Edge edge;
      edge.source_id = e.at("id").get<long long>();
      // Vertex ids; resolved to indices by the constructor.
      edge.start = static_cast<int>(e.at("start").get<long long>());
      edge.end = static_cast<int>(e.at("end").get<long long>());
      for (const auto& p : e.at("polyline")) {
        if (!p.is_array() || p.size() != 2) {
          throw ParseError("polyline points must be [lon, lat] pairs");
        }
        edge.polyline.push_back({p[0].get<double>(), p[1].get<double>()});
      }
      edges.push_back(std::move(edge));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(std::string("network JSON: ") + ex.what());
  }
  nlohmann::json meta = doc.contains("meta") ? doc["meta"] : nlohmann::json::object();
  return RoadNetwork(std::move(vertices), std::move(edges), std::move(meta));
}

nlohmann::json RoadNetwork::to_json() const {
  nlohmann::json doc;
  if (!meta_.empty()) doc["meta"] = meta_;
  doc["vertices"] = nlohmann::json::array();
  for (const Vertex& v : vertices_) {
    doc["vertices"].push_back({{"id", v.id}, {"x", v.x}, {"y", v.y}});
  }
  doc["edges"] = nlohmann::json::array();
  bool remapped = false;
  for (const Edge& e : edges_) {
    nlohmann::json poly = nlohmann::json::array();
    for (const LonLat& p : e.polyline) poly.push_back({p.lon, p.lat});
    doc["edges"].push_back({{"id", e.source_id},
                            {"start", vertices_[e.start].id},
                            {"end", vertices_[e.end].id},
                            {"polyline", std::move(poly)}});
    remapped = remapped || e.source_id != e.id;
  }
  if (remapped) {
    // Dense id (class index) -> source id.
    nlohmann::json map = nlohmann::json::array();
    for (const Edge& e : edges_) map.push_back(e.source_id);
    doc["edge_id_map"] = std::move(map);
  }
  return doc;
}

RoadNetwork load_network(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open network file " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError("network file " + path.string() + ": " + ex.what());
  }
  return RoadNetwork::from_json(doc);
}

void save_network(const RoadNetwork& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write network file " + path.string());
  out << net.to_json().dump(1) << '\n';
  if (!out) throw Error("failed writing network file " + path.string());
}

std::vector<std::vector<EdgeId>> connection_table(const RoadNetwork& net,
                                                  bool exclude_uturn) {
  std::vector<std::vector<EdgeId>> table(net.num_edges());
  for (const Edge& e : net.edges()) {
    for (EdgeId next : net.out_edges(e.end)) {
      const Edge& n = net.edge(next);
      if (exclude_uturn && n.end == e.start) continue;
      table[e.id].push_back(next);
    }
  }
  return table;
}

bool validate_route(const RoadNetwork& net, std::span<const EdgeId> route) {
  for (EdgeId id : route) net.edge(id);
  for (std::size_t k = 1; k < route.size(); ++k) {
    if (net.edge(route[k - 1]).end != net.edge(route[k]).start) return false;
  }
  return true;
}

std::vector<EdgeCandidate> nearest_edges(const RoadNetwork& net, PlanePoint p,
                                         int k, double radius_m) {
  std::vector<EdgeCandidate> found;
  if (k < 1 || !(radius_m > 0.0)) return found;
  for (const Edge& e : net.edges()) {
    EdgeProjection proj = net.project_onto_edge(e.id, p);
    if (proj.distance_m <= radius_m) {
      found.push_back({e.id, net.unproject(proj.point), proj.point,
                       proj.offset_m, proj.distance_m});
    }
  }
  auto by_distance = [](const EdgeCandidate& a, const EdgeCandidate& b) {
    if (a.distance_m != b.distance_m) return a.distance_m < b.distance_m;
    return a.edge < b.edge;
  };
  std::size_t keep = std::min(found.size(), static_cast<std::size_t>(k));
  std::partial_sort(found.begin(), found.begin() + static_cast<std::ptrdiff_t>(keep),
                    found.end(), by_distance);
  found.resize(keep);
  return found;
}

std::vector<EdgeCandidate> nearest_edges(const RoadNetwork& net, LonLat p,
                                         int k, double radius_m) {
  return nearest_edges(net, net.project(p), k, radius_m);
}

namespace {

std::vector<double> dijkstra(const RoadNetwork& net, int source) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(net.vertices().size(), inf);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> queue;
  dist[source] = 0.0;
  queue.push({0.0, source});
  while (!queue.empty()) {
    auto [d, v] = queue.top();
    queue.pop();
    if (d > dist[v]) continue;
    for (EdgeId id : net.out_edges(v)) {
      int w = net.edge(id).end;
      double nd = d + net.edge_length(id);
      if (nd < dist[w]) {
        dist[w] = nd;
        queue.push({nd, w});
      }
    }
  }
  return dist;
}

}  // namespace

std::optional<double> shortest_path_length(const RoadNetwork& net, EdgeId from,
                                           EdgeId to) {
  const Edge& a = net.edge(from);
  const Edge& b = net.edge(to);
  if (a.end == b.start) return 0.0;
  double d = dijkstra(net, a.end)[b.start];
  if (std::isinf(d)) return std::nullopt;
  return d;
}

DistanceTable::DistanceTable(const RoadNetwork& net)
    : net_(&net), n_(net.vertices().size()) {
  dist_.reserve(n_ * n_);
  for (std::size_t v = 0; v < n_; ++v) {
    auto row = dijkstra(net, static_cast<int>(v));
    dist_.insert(dist_.end(), row.begin(), row.end());
  }
}

std::optional<double> DistanceTable::between_vertices(int from, int to) const {
  double d = dist_.at(static_cast<std::size_t>(from) * n_ + static_cast<std::size_t>(to));
  if (std::isinf(d)) return std::nullopt;
  return d;
}

std::optional<double> DistanceTable::between_edges(EdgeId from, EdgeId to) const {
  return between_vertices(net_->edge(from).end, net_->edge(to).start);
}

RoadNetwork make_grid_network(int rows, int cols, double spacing_m,
                              LonLat south_west) {
  if (rows < 2 || cols < 2) throw UsageError("grid needs at least 2 rows and 2 columns");
  if (!(spacing_m > 0.0)) throw UsageError("grid spacing must be positive");

  // Degrees per meter evaluated at the grid's central latitude, which is
  // also the projection origin of the resulting network.
  double dlat = spacing_m / kEarthRadiusM / kDegToRad;
  double center_lat = south_west.lat + dlat * (rows - 1) / 2.0;
  double dlon = spacing_m / (kEarthRadiusM * std::cos(center_lat * kDegToRad)) / kDegToRad;

  std::vector<Vertex> vertices;
  vertices.reserve(static_cast<std::size_t>(rows * cols));
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      vertices.push_back({static_cast<long long>(r * cols + c),
                          south_west.lon + dlon * c, south_west.lat + dlat * r});
    }
  }
  std::vector<Edge> edges;
  auto link = [&](int a, int b) {
    const Vertex& va = vertices[static_cast<std::size_t>(a)];
    const Vertex& vb = vertices[static_cast<std::size_t>(b)];
    long long next = static_cast<long long>(edges.size());
    edges.push_back({0, next, a, b, {{va.x, va.y}, {vb.x, vb.y}}});
    edges.push_back({0, next + 1, b, a, {{vb.x, vb.y}, {va.x, va.y}}});
  };
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c + 1 < cols; ++c) link(r * cols + c, r * cols + c + 1);
  for (int r = 0; r + 1 < rows; ++r)
    for (int c = 0; c < cols; ++c) link(r * cols + c, (r + 1) * cols + c);

  nlohmann::json meta = {
      {"generator", "grid"},
      {"rows", rows},
      {"cols", cols},
      {"spacing_m", spacing_m},
      {"south_west", {south_west.lon, south_west.lat}},
      {"id_scheme",
       "vertex id = row*cols + col (row 0 south, col 0 west); horizontal "
       "adjacencies first in row-major order, then vertical; adjacency k "
       "gives edge 2k toward the higher col/row and edge 2k+1 in reverse"}};
  return RoadNetwork(std::move(vertices), std::move(edges), std::move(meta));
}

}  // namespace mapmatch
