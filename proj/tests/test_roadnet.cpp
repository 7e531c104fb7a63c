#include <algorithm>
#include <fstream>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "mapmatch/error.hpp"
#include "mapmatch/roadnet.hpp"

using namespace mapmatch;

namespace {

// Point-to-segment distance in the plane, written independently of the
// library's projection code.
double segment_distance(PlanePoint p, PlanePoint a, PlanePoint b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  double t = ((p.x - a.x) * dx + (p.y - a.y) * dy) / (dx * dx + dy * dy);
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

double brute_distance(const RoadNetwork& net, EdgeId e, PlanePoint p) {
  const auto& poly = net.edge(e).polyline;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < poly.size(); ++i) {
    best = std::min(best, segment_distance(p, net.project(poly[i]), net.project(poly[i + 1])));
  }
  return best;
}

}  // namespace

TEST_SUITE("roadnet") {

TEST_CASE("minimal network loads from JSON") {
  nlohmann::json doc = {
      {"vertices", {{{"id", 10}, {"x", 127.0}, {"y", 37.0}}, {{"id", 11}, {"x", 127.001}, {"y", 37.0}}}},
      {"edges", {{{"id", 5}, {"start", 10}, {"end", 11}, {"polyline", {{127.0, 37.0}, {127.001, 37.0}}}}}}};
  RoadNetwork net = RoadNetwork::from_json(doc);
  CHECK(net.vertices().size() == 2);
  CHECK(net.num_edges() == 1);
  CHECK(net.edge_from_source(5) == 0);
}

TEST_CASE("validation errors") {
  auto base = [] {
    return nlohmann::json{
        {"vertices", {{{"id", 1}, {"x", 127.0}, {"y", 37.0}}, {{"id", 2}, {"x", 127.001}, {"y", 37.0}}}},
        {"edges", {{{"id", 0}, {"start", 1}, {"end", 2}, {"polyline", {{127.0, 37.0}, {127.001, 37.0}}}}}}};
  };
  SUBCASE("missing vertex") {
    auto d = base();
    d["edges"][0]["end"] = 99;
    CHECK_THROWS_AS(RoadNetwork::from_json(d), ValidationError);
  }
  SUBCASE("duplicate edge id") {
    auto d = base();
    d["edges"].push_back(d["edges"][0]);
    CHECK_THROWS_AS(RoadNetwork::from_json(d), ValidationError);
  }
  SUBCASE("duplicate vertex id") {
    auto d = base();
    d["vertices"].push_back(d["vertices"][0]);
    CHECK_THROWS_AS(RoadNetwork::from_json(d), ValidationError);
  }
  SUBCASE("zero-length edge") {
    auto d = base();
    d["vertices"][1]["x"] = 127.0;
    d["edges"][0]["polyline"] = {{127.0, 37.0}, {127.0, 37.0}};
    CHECK_THROWS_AS(RoadNetwork::from_json(d), ValidationError);
  }
  SUBCASE("polyline endpoint off its vertex") {
    auto d = base();
    d["edges"][0]["polyline"][1] = {127.002, 37.0};
    CHECK_THROWS_AS(RoadNetwork::from_json(d), ValidationError);
  }
  SUBCASE("no edges") {
    auto d = base();
    d["edges"] = nlohmann::json::array();
    CHECK_THROWS_AS(RoadNetwork::from_json(d), ValidationError);
  }
  SUBCASE("malformed file") {
    auto dir = testutil::temp_dir("roadnet_bad");
    std::ofstream(dir / "bad.json") << "{\"vertices\": [";
    CHECK_THROWS_AS(load_network(dir / "bad.json"), ParseError);
  }
}

TEST_CASE("grid sizes") {
  CHECK(make_grid_network(2, 2, 100).num_edges() == 8);
  CHECK(make_grid_network(2, 2, 100).vertices().size() == 4);
  CHECK(make_grid_network(3, 3, 100).num_edges() == 24);
  CHECK(make_grid_network(5, 5, 200).num_edges() == 80);
  CHECK(make_grid_network(5, 5, 200).vertices().size() == 25);
}

// No rows x cols lattice has 228 edges ((2r-1)(2c-1) = 229 is prime), so the
// reference-size file is an 8x8 grid (224 edges) plus two diagonal roads.
TEST_CASE("228-edge grid file loads") {
  auto dir = testutil::temp_dir("roadnet_228");
  nlohmann::json doc = make_grid_network(8, 8, 100).to_json();
  auto vertex = [&](int id) { return doc["vertices"][id]; };
  long long next_id = 224;
  for (auto [a, b] : {std::pair{0, 9}, {20, 29}}) {
    for (auto [s, t] : {std::pair{a, b}, {b, a}}) {
      doc["edges"].push_back({{"id", next_id++},
                              {"start", s},
                              {"end", t},
                              {"polyline", {{vertex(s)["x"], vertex(s)["y"]}, {vertex(t)["x"], vertex(t)["y"]}}}});
    }
  }
  std::ofstream(dir / "net.json") << doc.dump();
  CHECK(load_network(dir / "net.json").num_edges() == 228);
}

TEST_CASE("grid file round trip keeps meta and bytes") {
  auto dir = testutil::temp_dir("roadnet_io");
  RoadNetwork net = make_grid_network(3, 4, 100);
  save_network(net, dir / "net.json");
  RoadNetwork back = load_network(dir / "net.json");
  CHECK(back.num_edges() == 34);
  CHECK(back.meta().at("rows") == 3);
  CHECK(back.meta().contains("id_scheme"));
  save_network(back, dir / "again.json");
  std::ifstream a(dir / "net.json"), b(dir / "again.json");
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
}

TEST_CASE("connection table on a chain") {
  RoadNetwork net = testutil::chain();
  auto t = connection_table(net);
  REQUIRE(t.size() == 2);
  CHECK(t[0] == std::vector<EdgeId>{1});
  CHECK(t[1].empty());
}

TEST_CASE("connection table drops the U-turn when asked") {
  std::vector<Vertex> v{{1, 127.0, 37.0}, {2, 127.001, 37.0}};
  Edge ab{1, 1, 1, 2, {{127.0, 37.0}, {127.001, 37.0}}};
  Edge ba{2, 2, 2, 1, {{127.001, 37.0}, {127.0, 37.0}}};
  RoadNetwork net(v, {ab, ba});
  auto on = connection_table(net, true);
  CHECK(on[0].empty());
  CHECK(on[1].empty());
  auto off = connection_table(net, false);
  CHECK(off[0] == std::vector<EdgeId>{1});
  CHECK(off[1] == std::vector<EdgeId>{0});
}

TEST_CASE("connection table equals pairwise scan") {
  for (auto [r, c] : {std::pair{2, 2}, {3, 3}, {2, 4}, {4, 3}}) {
    RoadNetwork net = make_grid_network(r, c, 100);
    for (bool uturn : {false, true}) {
      auto t = connection_table(net, uturn);
      for (const Edge& a : net.edges()) {
        std::vector<EdgeId> expect;
        for (const Edge& b : net.edges()) {
          if (b.start != a.end) continue;
          if (uturn && b.start == a.end && b.end == a.start) continue;
          expect.push_back(b.id);
        }
        CHECK(t[a.id] == expect);
      }
    }
  }
}

TEST_CASE("validate_route") {
  RoadNetwork net = testutil::chain();
  CHECK(validate_route(net, std::vector<EdgeId>{0, 1}));
  CHECK_FALSE(validate_route(net, std::vector<EdgeId>{1, 0}));
  CHECK_THROWS_AS(validate_route(net, std::vector<EdgeId>{0, 7}), UnknownEdge);

  RoadNetwork grid = make_grid_network(3, 3, 100);
  std::mt19937 rng(3);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(grid.num_edges()) - 1);
  int valid = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<EdgeId> route(5);
    // Mix fully random routes with random walks so both outcomes occur.
    route[0] = pick(rng);
    for (int k = 1; k < 5; ++k) {
      auto succ = grid.out_edges(grid.edge(route[k - 1]).end);
      route[k] = (trial % 2 == 0) ? pick(rng) : succ[rng() % succ.size()];
    }
    bool expect = true;
    for (int k = 1; k < 5; ++k) expect = expect && grid.edge(route[k - 1]).end == grid.edge(route[k]).start;
    valid += expect;
    CHECK(validate_route(grid, route) == expect);
  }
  // Every walk is valid; almost no random sequence is.
  CHECK(valid >= 1000);
  CHECK(valid < 2000);
}

TEST_CASE("projection") {
  RoadNetwork net = make_grid_network(3, 3, 100);
  LonLat o = net.projection_origin();
  PlanePoint z = net.project(o);
  CHECK(std::abs(z.x) < 1e-9);
  CHECK(std::abs(z.y) < 1e-9);

  PlanePoint north = net.project({o.lon, o.lat + 0.001});
  CHECK(std::abs(north.y - 6371000.0 * 0.001 * M_PI / 180.0) < 1e-6);
  CHECK(std::abs(north.y - 111.19) < 0.1);
  CHECK(std::abs(north.x) < 1e-9);

  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> off(-0.1, 0.1);
  for (int i = 0; i < 1000; ++i) {
    LonLat p{o.lon + off(rng), o.lat + off(rng)};
    LonLat q = net.unproject(net.project(p));
    CHECK(std::abs(q.lon - p.lon) < 1e-9);
    CHECK(std::abs(q.lat - p.lat) < 1e-9);
  }
}

TEST_CASE("origin is the vertex mean") {
  RoadNetwork net = testutil::chain();
  CHECK(net.projection_origin().lon == doctest::Approx(127.001).epsilon(1e-12));
  CHECK(net.projection_origin().lat == doctest::Approx(37.0).epsilon(1e-12));
}

TEST_CASE("nearest edges") {
  RoadNetwork net = make_grid_network(3, 3, 100);
  SUBCASE("midpoint hits the edge with zero distance") {
    for (const Edge& e : net.edges()) {
      PlanePoint mid = net.plane_point_along(e.id, net.edge_length(e.id) / 2);
      auto c = nearest_edges(net, mid, 4, 10.0);
      REQUIRE_FALSE(c.empty());
      CHECK(c[0].distance_m < 1e-9);
      // The reverse edge shares the geometry; ties go to the smaller id.
      CHECK((c[0].edge == e.id || c[0].edge == (e.id ^ 1)));
      CHECK(c[0].edge == std::min(e.id, e.id ^ 1));
    }
  }
  SUBCASE("far point") {
    PlanePoint far{5000, 5000};
    CHECK(nearest_edges(net, far, 4, 100).empty());
  }
  SUBCASE("matches exhaustive scan") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(-150, 150);
    for (int i = 0; i < 20; ++i) {
      PlanePoint p{u(rng), u(rng)};
      for (double radius : {30.0, 80.0, 1e6}) {
        for (int k : {1, 3, 24}) {
          auto got = nearest_edges(net, p, k, radius);
          std::vector<std::pair<double, EdgeId>> all;
          for (const Edge& e : net.edges()) {
            double d = brute_distance(net, e.id, p);
            if (d <= radius) all.push_back({d, e.id});
          }
          std::sort(all.begin(), all.end(), [](auto& a, auto& b) {
            if (std::abs(a.first - b.first) > 1e-9) return a.first < b.first;
            return a.second < b.second;
          });
          all.resize(std::min<std::size_t>(all.size(), static_cast<std::size_t>(k)));
          REQUIRE(got.size() == all.size());
          for (std::size_t j = 0; j < got.size(); ++j) {
            CHECK(got[j].distance_m == doctest::Approx(all[j].first).epsilon(1e-9));
            if (j > 0) CHECK(got[j - 1].distance_m <= got[j].distance_m + 1e-12);
          }
        }
      }
    }
  }
}

TEST_CASE("shortest paths") {
  RoadNetwork chain = testutil::chain();
  CHECK(shortest_path_length(chain, 0, 1) == 0.0);
  CHECK_FALSE(shortest_path_length(chain, 1, 0).has_value());
  CHECK_THROWS_AS(shortest_path_length(chain, 0, 5), UnknownEdge);

  RoadNetwork net = make_grid_network(3, 3, 100);
  DistanceTable table(net);
  // Exhaustive enumeration of edge walks up to depth 8 from each edge end.
  for (const Edge& from : net.edges()) {
    std::vector<double> best(net.vertices().size(), std::numeric_limits<double>::infinity());
    std::function<void(int, double, int)> walk = [&](int vertex, double dist, int depth) {
      best[vertex] = std::min(best[vertex], dist);
      if (depth == 8) return;
      for (EdgeId e : net.out_edges(vertex)) walk(net.edge(e).end, dist + net.edge_length(e), depth + 1);
    };
    walk(from.end, 0.0, 0);
    for (const Edge& to : net.edges()) {
      auto got = shortest_path_length(net, from.id, to.id);
      REQUIRE(got.has_value());
      CHECK(*got == doctest::Approx(best[to.start]).epsilon(1e-9));
      CHECK(*table.between_edges(from.id, to.id) == doctest::Approx(*got).epsilon(1e-12));
    }
  }
}

TEST_CASE("shortest path unreachable across components") {
  std::vector<Vertex> v{{1, 127.0, 37.0}, {2, 127.001, 37.0}, {3, 127.01, 37.0}, {4, 127.011, 37.0}};
  Edge a{0, 0, 1, 2, {{127.0, 37.0}, {127.001, 37.0}}};
  Edge b{1, 1, 3, 4, {{127.01, 37.0}, {127.011, 37.0}}};
  RoadNetwork net(v, {a, b});
  CHECK_FALSE(shortest_path_length(net, 0, 1).has_value());
  CHECK_FALSE(DistanceTable(net).between_edges(0, 1).has_value());
}

TEST_CASE("shortest path triangle inequality on random-ish grids") {
  for (auto [r, c] : {std::pair{3, 3}, {2, 5}, {4, 4}}) {
    RoadNetwork net = make_grid_network(r, c, 150);
    DistanceTable t(net);
    const int n = static_cast<int>(net.vertices().size());
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        for (int c2 = 0; c2 < n; ++c2) {
          auto ab = t.between_vertices(a, b), bc = t.between_vertices(b, c2), ac = t.between_vertices(a, c2);
          if (ab && bc && ac) CHECK(*ac <= *ab + *bc + 1e-9);
        }
  }
}

TEST_CASE("edges dense and remapped by source id") {
  std::vector<Vertex> v{{1, 127.0, 37.0}, {2, 127.001, 37.0}, {3, 127.002, 37.0}};
  Edge hi{0, 900, 2, 3, {{127.001, 37.0}, {127.002, 37.0}}};
  Edge lo{0, 40, 1, 2, {{127.0, 37.0}, {127.001, 37.0}}};
  RoadNetwork net(v, {hi, lo});
  CHECK(net.edge_from_source(40) == 0);
  CHECK(net.edge_from_source(900) == 1);
  CHECK(net.to_json().contains("edge_id_map"));
}

}  // TEST_SUITE
