#include "mapmatch/corpus_io.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <sstream>

#include "mapmatch/error.hpp"

namespace mapmatch {

nlohmann::json trajectory_to_json(const GpsTrajectory& t) {
  nlohmann::json j;
  j["traj_id"] = t.traj_id;
  nlohmann::json pts = nlohmann::json::array();
  for (const LonLat& p : t.points) pts.push_back({p.lon, p.lat});
  j["points"] = std::move(pts);
  if (t.truth) j["truth"] = *t.truth;
  return j;
}

GpsTrajectory trajectory_from_json(const nlohmann::json& j) {
  GpsTrajectory t;
  try {
    t.traj_id = j.at("traj_id").get<std::string>();
    for (const auto& p : j.at("points")) {
      if (!p.is_array() || p.size() != 2) throw ParseError("points must be [lon, lat] pairs");
      t.points.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    if (j.contains("truth")) t.truth = j["truth"].get<PointRoute>();
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(std::string("trajectory record: ") + ex.what());
  }
  if (t.points.size() < kMinTrajectoryLength) {
    throw ValidationError("trajectory " + t.traj_id + " has fewer than 3 points");
  }
  if (t.truth && t.truth->size() != t.points.size()) {
    throw ValidationError("trajectory " + t.traj_id + " truth length differs from points");
  }
  return t;
}

namespace {

template <typename T, typename Encode>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& items,
                 Encode encode) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const T& item : items) out << encode(item).dump() << '\n';
  if (!out) throw Error("failed writing " + path.string());
}

template <typename Decode>
auto read_jsonl(const std::filesystem::path& path, Decode decode) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<decltype(decode(nlohmann::json{}))> items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
    items.push_back(decode(j));
  }
  return items;
}

}  // namespace

void write_corpus(const std::filesystem::path& path,
                  const std::vector<GpsTrajectory>& corpus) {
  write_jsonl(path, corpus, trajectory_to_json);
}

std::vector<GpsTrajectory> read_corpus(const std::filesystem::path& path) {
  return read_jsonl(path, trajectory_from_json);
}

nlohmann::json prediction_to_json(const Prediction& p) {
  nlohmann::json j{{"traj_id", p.traj_id}, {"engine", p.engine}, {"route", p.route}};
  if (!p.probs.empty()) j["probs"] = p.probs;
  return j;
}

Prediction prediction_from_json(const nlohmann::json& j) {
  Prediction p;
  try {
    p.traj_id = j.at("traj_id").get<std::string>();
    p.engine = j.value("engine", std::string{});
    p.route = j.at("route").get<PointRoute>();
    if (j.contains("probs")) p.probs = j["probs"].get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(std::string("prediction record: ") + ex.what());
  }
  return p;
}

void write_predictions(const std::filesystem::path& path,
                       const std::vector<Prediction>& preds) {
  write_jsonl(path, preds, prediction_to_json);
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  return read_jsonl(path, prediction_from_json);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << contents;
  if (!out) throw Error("failed writing " + path.string());
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string file_sha256(const std::filesystem::path& path) {
  return sha256_hex(read_file(path));
}

}  // namespace mapmatch
