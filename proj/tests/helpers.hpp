#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "mapmatch/roadnet.hpp"

namespace testutil {

using namespace mapmatch;

/// A->B->C chain: edge 1 is A->B, edge 2 is B->C (dense ids 0 and 1).
inline RoadNetwork chain() {
  std::vector<Vertex> v{{1, 127.0, 37.0}, {2, 127.001, 37.0}, {3, 127.002, 37.0}};
  std::vector<Edge> e;
  Edge a;
  a.source_id = 1;
  a.start = 1;
  a.end = 2;
  a.polyline = {{127.0, 37.0}, {127.001, 37.0}};
  Edge b;
  b.source_id = 2;
  b.start = 2;
  b.end = 3;
  b.polyline = {{127.001, 37.0}, {127.002, 37.0}};
  e.push_back(a);
  e.push_back(b);
  return RoadNetwork(v, e);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mapmatch_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
