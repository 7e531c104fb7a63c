#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mapmatch/trajgen.hpp"

namespace mapmatch {

/// Minimum points per trajectory (BLEU uses trigrams).
inline constexpr std::size_t kMinTrajectoryLength = 3;

/// One JSON Lines record: {"traj_id", "points": [[lon, lat], ...], "truth"?}.
nlohmann::json trajectory_to_json(const GpsTrajectory& t);
GpsTrajectory trajectory_from_json(const nlohmann::json& j);

void write_corpus(const std::filesystem::path& path,
                  const std::vector<GpsTrajectory>& corpus);
std::vector<GpsTrajectory> read_corpus(const std::filesystem::path& path);

struct Prediction {
  std::string traj_id;
  std::string engine;
  PointRoute route;
  std::vector<std::vector<double>> probs;  // empty unless requested
};

nlohmann::json prediction_to_json(const Prediction& p);
Prediction prediction_from_json(const nlohmann::json& j);

void write_predictions(const std::filesystem::path& path,
                       const std::vector<Prediction>& preds);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);

/// Reads a whole file into a string; throws DataError when unreadable.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& contents);

/// Hex SHA-256 of a byte string / file.
std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace mapmatch
