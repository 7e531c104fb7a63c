#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mapmatch/hmm.hpp"
#include "mapmatch/metrics.hpp"
#include "mapmatch/model/inference.hpp"
#include "mapmatch/model/train.hpp"
#include "mapmatch/trajgen.hpp"

namespace mapmatch::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* kToolkitVersion = "mapmatch 0.1.0";

struct SplitSpec {
  double train_fraction = 0.70;
  std::uint64_t seed = 1;
  void validate() const;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Trajectory-level shuffled split; the train side gets floor(fraction * n).
Split split_indices(std::size_t n, const SplitSpec& spec);

template <typename T>
std::vector<T> take(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(items.at(i));
  return out;
}

/// Provenance record written next to a command's outputs: parameters plus
/// path and SHA-256 of every file read or written.
class Manifest {
 public:
  explicit Manifest(std::string command);
  nlohmann::json& params() { return params_; }
  void input(const fs::path& path);
  void output(const fs::path& path);
  nlohmann::json to_json() const;
  void write(const fs::path& path) const;

 private:
  std::string command_;
  nlohmann::json params_ = nlohmann::json::object();
  nlohmann::json inputs_ = nlohmann::json::array();
  nlohmann::json outputs_ = nlohmann::json::array();
};

/// `<out>.manifest.json`
fs::path sidecar_path(const fs::path& out);

struct GenNetOptions {
  int rows = 5;
  int cols = 5;
  double spacing_m = 200.0;
  fs::path out;
};
void gen_net(const GenNetOptions& opt);

struct GenTrajOptions {
  fs::path net;
  GenerationConfig gen;
  std::size_t count = 2000;
  bool pseudo_real = false;
  fs::path out;
};
void gen_traj(const GenTrajOptions& opt);

/// Training settings that can live in a manifest (no callbacks or paths).
struct TrainSettings {
  int epochs = 20;
  int batch_size = 32;
  double lr = 7e-4;
  std::uint64_t seed = 1;

  model::TrainOptions options() const;
  nlohmann::json to_json() const;
  static TrainSettings from_json(const nlohmann::json& j, TrainSettings defaults);
};

struct PretrainOptions {
  fs::path net;
  fs::path corpus;
  fs::path out;  // checkpoint; loss log goes to <out>.loss.csv
  model::ModelConfig model;
  TrainSettings train;
  std::uint64_t init_seed = 1;
};
model::TrainLog pretrain(const PretrainOptions& opt);

struct FinetuneOptions {
  fs::path net;
  fs::path checkpoint;
  fs::path corpus;
  fs::path out;  // checkpoint, or a directory with `sweep`
  std::string mask = "full";
  bool sweep = false;
  std::optional<fs::path> test;  // required with `sweep`
  TrainSettings train;
};
void finetune(const FinetuneOptions& opt);

enum class Engine { Hmm, Transformer };
Engine parse_engine(const std::string& name);
const char* engine_name(Engine e);

struct MatchOptions {
  Engine engine = Engine::Transformer;
  fs::path net;
  fs::path corpus;
  fs::path out;
  std::optional<fs::path> checkpoint;
  bool probs = false;
  HmmConfig hmm;
};
void match(const MatchOptions& opt);

struct EvalOptions {
  fs::path predictions;
  fs::path truth;
  fs::path out;
  std::string model_name;  // defaults to the engine recorded in the predictions
};
/// Joins predictions to truth by traj_id; JoinError when the id sets differ.
MetricReport eval(const EvalOptions& opt);

struct AttnOptions {
  fs::path net;
  fs::path checkpoint;
  fs::path corpus;
  fs::path out_dir;
  std::optional<std::string> traj_id;  // first trajectory when unset
};
model::AttentionRanges attn(const AttnOptions& opt);

/// Full-study configuration. Every randomized stage draws its seed from
/// `seed` mixed with the stage name.
struct ExperimentManifest {
  std::uint64_t seed = 1;
  int grid_rows = 5;
  int grid_cols = 5;
  double grid_spacing_m = 200.0;
  std::optional<fs::path> network_path;  // overrides the grid when set
  std::optional<std::string> network_sha256;

  GenerationConfig generation;          // sigma and seed are set per stage
  std::size_t synthetic_train_count = 8000;
  std::size_t synthetic_test_count = 1000;
  std::vector<double> noise_sweep{0, 15, 30, 60, 100};
  double matched_sigma_m = 15.0;        // table1.csv model and its HMM comparison

  std::size_t pseudo_real_count = 1331;
  double pseudo_real_sigma_m = 15.0;
  SplitSpec split;

  model::ModelConfig model;
  TrainSettings pretrain;
  std::vector<double> finetune_from{0, 15};
  std::size_t finetune_count = 100;
  std::vector<std::string> finetune_masks{"output", "output+norm", "output+encoder",
                                          "output+decoder", "output+encoder+decoder", "full"};
  TrainSettings finetune{10, 16, 7e-4, 1};

  // Pseudo-real outliers can land outside the candidate radius.
  HmmConfig hmm = [] {
    HmmConfig h;
    h.nearest_fallback = true;
    return h;
  }();
  std::size_t attention_samples = 200;

  nlohmann::json to_json() const;
  static ExperimentManifest from_json(const nlohmann::json& j);
  void validate() const;
};

struct ExperimentResult {
  fs::path out_dir;
  MetricReport table1_transformer;
  MetricReport table1_hmm;
  std::vector<std::pair<double, MetricReport>> table2;  // (pretrain sigma, report)
  struct FinetuneRow {
    double pretrained_sigma = 0;
    std::string mask;  // "origin" for the untuned model
    MetricReport report;
  };
  std::vector<FinetuneRow> table3;
  double attention_threshold = 0;         // mean over sampled trajectories
  double attention_adjacent_fraction = 0;  // interior positions reaching a neighbor segment
  std::size_t attention_positions = 0;
  double matched_pretrain_seconds = 0;
};

ExperimentResult experiment(const ExperimentManifest& m, const fs::path& out_dir);
ExperimentResult experiment(const fs::path& manifest_path, const fs::path& out_dir);

/// Fraction of output positions on interior route segments whose attention
/// interval covers a point labeled with a neighboring segment of the route.
struct AdjacencyStats {
  std::size_t positions = 0;
  std::size_t with_neighbor = 0;
  double threshold_sum = 0;
  std::size_t trajectories = 0;
};
void accumulate_adjacency(const model::AttentionRanges& ranges, const PointRoute& truth,
                          AdjacencyStats& stats);

}  // namespace mapmatch::pipeline
