#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace mapmatch {

using EdgeId = int;

inline constexpr double kEarthRadiusM = 6371000.0;

struct LonLat {
  double lon = 0.0;
  double lat = 0.0;
  bool operator==(const LonLat&) const = default;
};

/// A point in the local equirectangular plane, meters east/north of the
/// network's projection origin.
struct PlanePoint {
  double x = 0.0;
  double y = 0.0;
};

struct Vertex {
  long long id = 0;
  double x = 0.0;  // longitude
  double y = 0.0;  // latitude
};

struct Edge {
  EdgeId id = 0;                // dense, 0..|E|-1
  long long source_id = 0;      // id as it appeared in the input file
  int start = 0;                // vertex index
  int end = 0;                  // vertex index
  std::vector<LonLat> polyline;
};

/// Ordered edge ids; consecutive edges share a vertex (end of one is the
/// start of the next) when the route is valid.
using SegmentRoute = std::vector<EdgeId>;

/// Result of projecting a point onto an edge polyline.
struct EdgeProjection {
  double offset_m = 0.0;    // arc length from the edge start
  PlanePoint point;         // closest point on the polyline
  double distance_m = 0.0;  // distance from the query to `point`
};

struct EdgeCandidate {
  EdgeId edge = 0;
  LonLat projected;
  PlanePoint projected_xy;
  double offset_m = 0.0;
  double distance_m = 0.0;
};

struct BoundingBox {
  double lat_min = 0.0;
  double lat_max = 0.0;
  double lon_min = 0.0;
  double lon_max = 0.0;
};

/// Directed road network. Immutable once constructed; all queries are reads.
class RoadNetwork {
 public:
  /// Validates and builds the network. Edge ids are remapped to dense
  /// indices ordered by their source id.
  RoadNetwork(std::vector<Vertex> vertices, std::vector<Edge> edges,
              nlohmann::json meta = nlohmann::json::object());

  static RoadNetwork from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;

  const std::vector<Vertex>& vertices() const { return vertices_; }
  const std::vector<Edge>& edges() const { return edges_; }
  std::size_t num_edges() const { return edges_.size(); }
  const Edge& edge(EdgeId id) const;
  bool has_edge(EdgeId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < edges_.size();
  }
  /// Dense id for an id used in the source file.
  EdgeId edge_from_source(long long source_id) const;
  const nlohmann::json& meta() const { return meta_; }

  /// Outgoing edges of a vertex index, ascending by edge id.
  std::span<const EdgeId> out_edges(int vertex) const;

  LonLat projection_origin() const { return origin_; }
  PlanePoint project(LonLat p) const;
  LonLat unproject(PlanePoint p) const;

  double edge_length(EdgeId id) const;
  /// Point at arc length `offset_m` along the edge (clamped to its extent).
  LonLat point_along(EdgeId id, double offset_m) const;
  PlanePoint plane_point_along(EdgeId id, double offset_m) const;
  EdgeProjection project_onto_edge(EdgeId id, PlanePoint p) const;

  BoundingBox bounding_box() const;

 private:
  struct EdgeGeometry {
    std::vector<PlanePoint> points;
    std::vector<double> cumulative;  // arc length at each polyline vertex
  };

  std::vector<Vertex> vertices_;
  std::vector<Edge> edges_;
  std::vector<EdgeGeometry> geometry_;
  std::vector<std::vector<EdgeId>> out_edges_;
  std::unordered_map<long long, EdgeId> source_to_dense_;
  nlohmann::json meta_;
  LonLat origin_;
  double cos_lat0_ = 1.0;
};

RoadNetwork load_network(const std::filesystem::path& path);
void save_network(const RoadNetwork& net, const std::filesystem::path& path);

/// Successor lists per edge. With `exclude_uturn`, the edge running exactly
/// back along the key edge (end -> start) is dropped.
std::vector<std::vector<EdgeId>> connection_table(const RoadNetwork& net,
                                                  bool exclude_uturn = true);

bool validate_route(const RoadNetwork& net, std::span<const EdgeId> route);

/// Up to k edges within radius_m of p, ascending by (distance, edge id).
std::vector<EdgeCandidate> nearest_edges(const RoadNetwork& net, LonLat p,
                                         int k, double radius_m);
std::vector<EdgeCandidate> nearest_edges(const RoadNetwork& net, PlanePoint p,
                                         int k, double radius_m);

/// Shortest along-network distance from the end of `from` to the start of
/// `to`; nullopt when unreachable.
std::optional<double> shortest_path_length(const RoadNetwork& net, EdgeId from,
                                           EdgeId to);

/// All-pairs vertex distances, for callers issuing many path queries.
class DistanceTable {
 public:
  explicit DistanceTable(const RoadNetwork& net);
  std::optional<double> between_edges(EdgeId from, EdgeId to) const;
  std::optional<double> between_vertices(int from, int to) const;

 private:
  const RoadNetwork* net_;
  std::size_t n_ = 0;
  std::vector<double> dist_;
};

/// rows x cols lattice with two directed edges per orthogonal adjacency.
/// Horizontal adjacencies come first in row-major order, then vertical ones;
/// adjacency k yields edge 2k (toward higher column/row) and 2k+1 (reverse).
RoadNetwork make_grid_network(int rows, int cols, double spacing_m,
                              LonLat south_west = {127.0276, 37.4979});

}  // namespace mapmatch
