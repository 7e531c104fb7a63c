#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "mapmatch/error.hpp"
#include "mapmatch/hmm.hpp"
#include "mapmatch/trajgen.hpp"
#include "oracles.hpp"

using namespace mapmatch;

namespace {

EdgeCandidate on_edge(const RoadNetwork& net, EdgeId e, double offset, double dist = 0) {
  EdgeCandidate c;
  c.edge = e;
  c.offset_m = offset;
  c.projected_xy = net.plane_point_along(e, offset);
  c.projected = net.unproject(c.projected_xy);
  c.distance_m = dist;
  return c;
}

// Random lattice; values drawn from a small integer set so exact ties occur.
Lattice random_lattice(std::mt19937_64& rng, int steps, int max_states) {
  std::uniform_int_distribution<int> states(1, max_states), val(-4, 0), lab(0, 5);
  std::bernoulli_distribution blocked(0.15);
  Lattice lat;
  for (int t = 0; t < steps; ++t) {
    const int k = states(rng);
    std::vector<int> labels;
    while (static_cast<int>(labels.size()) < k) {
      int l = lab(rng);
      if (std::find(labels.begin(), labels.end(), l) == labels.end()) labels.push_back(l);
    }
    lat.label.push_back(labels);
    std::vector<double> em;
    for (int i = 0; i < k; ++i) em.push_back(val(rng));
    lat.emission.push_back(em);
  }
  for (int t = 0; t + 1 < steps; ++t) {
    std::vector<std::vector<double>> m(lat.emission[t].size(),
                                       std::vector<double>(lat.emission[t + 1].size()));
    for (auto& row : m)
      for (double& x : row)
        x = blocked(rng) ? -std::numeric_limits<double>::infinity() : val(rng) * 0.5;
    lat.transition.push_back(m);
  }
  return lat;
}

}  // namespace

TEST_SUITE("hmm") {

TEST_CASE("emission") {
  HmmConfig cfg;
  const double base = -std::log(15.0 * std::sqrt(2.0 * std::numbers::pi));
  EdgeCandidate c;
  c.distance_m = 0;
  CHECK(emission_logp(c, cfg) == doctest::Approx(base).epsilon(1e-15));
  c.distance_m = 15;
  CHECK(emission_logp(c, cfg) == doctest::Approx(base - 0.5).epsilon(1e-15));
  CHECK(emission_logp(c, cfg) == doctest::Approx(-4.128).epsilon(1e-3 / 4.128));
}

TEST_CASE("transition") {
  RoadNetwork net = make_grid_network(3, 3, 100);
  HmmConfig cfg;
  SUBCASE("same edge, forward") {
    CHECK(transition_logp(on_edge(net, 0, 10), on_edge(net, 0, 60), net, cfg) == 0.0);
  }
  SUBCASE("unreachable") {
    RoadNetwork chain = testutil::chain();
    double t = transition_logp(on_edge(chain, 1, 10), on_edge(chain, 0, 10), chain, cfg);
    CHECK(std::isinf(t));
    CHECK(t < 0);
  }
  SUBCASE("detour costs exactly one beta") {
    // Edge 0 at 75 m and its reverse at 25 m project to the same point;
    // the route between them is 25 + 0 + 25 = 50 = beta.
    EdgeCandidate a = on_edge(net, 0, 75);
    EdgeCandidate b = on_edge(net, 1, 25);
    CHECK(transition_logp(a, b, net, cfg) == doctest::Approx(-1.0).epsilon(1e-12));
    DistanceTable table(net);
    CHECK(transition_logp(a, b, net, table, cfg) == doctest::Approx(-1.0).epsilon(1e-12));
  }
}

TEST_CASE("viterbi equals brute force on random lattices") {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 2000; ++i) {
    Lattice lat = random_lattice(rng, 1 + static_cast<int>(rng() % 5), 4);
    double brute_score = 0;
    std::vector<int> want = oracle::brute_viterbi(lat, &brute_score);
    ViterbiPath got = viterbi_decode(lat);
    REQUIRE(got.states == want);
    if (std::isfinite(brute_score)) CHECK(got.score == brute_score);
  }
}

TEST_CASE("viterbi breaks ties toward the smallest labels") {
  Lattice lat;
  lat.label = {{5, 2}, {9, 1}};
  lat.emission = {{0, 0}, {0, 0}};
  lat.transition = {{{0, 0}, {0, 0}}};
  ViterbiPath p = viterbi_decode(lat);
  CHECK(p.states == std::vector<int>{1, 1});
}

TEST_CASE("noiseless single-edge trajectory") {
  RoadNetwork net = make_grid_network(3, 3, 200);
  GpsTrajectory t;
  for (double off : {10.0, 60.0, 110.0, 160.0}) t.points.push_back(net.point_along(4, off));
  PointRoute r = viterbi_match(t, net, HmmConfig{});
  // Edge 4 and its reverse 5 share geometry; the forward one is the only
  // consistent direction.
  CHECK(r == PointRoute{4, 4, 4, 4});
}

TEST_CASE("no candidates") {
  RoadNetwork net = make_grid_network(3, 3, 100);
  GpsTrajectory t;
  t.points = {net.point_along(0, 10), net.unproject({5000, 5000}), net.point_along(0, 50)};
  try {
    viterbi_match(t, net, HmmConfig{});
    FAIL("expected NoCandidates");
  } catch (const NoCandidates& e) {
    CHECK(e.point_index == 1);
  }
  HmmConfig wide;
  wide.nearest_fallback = true;
  CHECK(viterbi_match(t, net, wide).size() == 3);
}

TEST_CASE("matcher output length and radius monotonicity") {
  RoadNetwork net = make_grid_network(4, 4, 200);
  GenerationConfig g;
  g.sigma_m = 15;
  auto corpus = generate_corpus(net, g, 60);
  HmmConfig small;
  small.radius_m = 60;
  HmmConfig big;
  big.radius_m = 150;
  HmmMatcher ms(net, small), mb(net, big);
  for (const auto& t : corpus) {
    double s_small = -std::numeric_limits<double>::infinity();
    try {
      s_small = ms.best_score(t);
      CHECK(ms.match(t).size() == t.size());
    } catch (const NoCandidates&) {
    }
    CHECK(mb.match(t).size() == t.size());
    CHECK(mb.best_score(t) >= s_small - 1e-9);
  }
}

TEST_CASE("viterbi_match equals brute force on real lattices") {
  // Twin edges give mathematically tied paths whose float sums differ by
  // rounding; both sides treat scores within the tie tolerance as equal.
  for (double sigma : {0.0, 20.0, 40.0}) {
    RoadNetwork net = make_grid_network(4, 4, 150);
    GenerationConfig g;
    g.sigma_m = sigma;
    g.route_length = 3;
    HmmConfig hc;
    hc.nearest_fallback = true;
    HmmMatcher m(net, hc);
    for (const auto& t : generate_corpus(net, g, 200)) {
      GpsTrajectory cut = t;
      cut.points.resize(std::min<std::size_t>(5, t.size()));
      auto cands = m.candidates(cut);
      Lattice lat = m.build_lattice(cands);
      double best = 0;
      auto want = oracle::brute_viterbi(lat, &best);
      ViterbiPath got = viterbi_decode(lat);
      REQUIRE(got.states == want);
      CHECK(std::abs(got.score - best) < 1e-9);
      PointRoute r = m.match(cut);
      for (std::size_t i = 0; i < r.size(); ++i) CHECK(r[i] == cands[i][want[i]].edge);
    }
  }
}

TEST_CASE("fully infeasible lattice takes the smallest labels") {
  const double ninf = -std::numeric_limits<double>::infinity();
  Lattice lat;
  lat.label = {{4, 0, 3}, {2, 1}};
  lat.emission = {{-1, -5, -2}, {0, 0}};
  lat.transition = {{{ninf, ninf}, {ninf, ninf}, {ninf, ninf}}};
  CHECK(viterbi_decode(lat).states == std::vector<int>{1, 1});
}

TEST_CASE("config validation") {
  HmmConfig c;
  c.k_candidates = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.beta_transition = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  CHECK(HmmConfig::from_json(c.to_json()).to_json() == c.to_json());
}

}  // TEST_SUITE
