#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mapmatch/trajgen.hpp"

namespace mapmatch {

/// One alignment column; an empty side is a gap.
struct AlignedPair {
  std::optional<int> a;
  std::optional<int> b;
  bool operator==(const AlignedPair&) const = default;
};

struct Alignment {
  std::vector<AlignedPair> pairs;
  int score = 0;

  std::size_t matches() const;
};

/// Global alignment by the Needleman-Wunsch recurrence. Equal-score
/// alignments are ranked by matched pairs first; traceback then prefers
/// diagonal, then up (a symbol against a gap), then left.
Alignment needleman_wunsch(std::span<const int> a, std::span<const int> b,
                           int match = 1, int mismatch = -1, int gap = -1);

/// Fraction of positions with equal symbols; lengths must agree.
double ahd_point(std::span<const int> pred, std::span<const int> truth);

/// Matched columns over alignment length (+1/-1/-1 scoring).
double ahd_segment(std::span<const int> pred, std::span<const int> truth);

enum class Level { Point, Segment };

/// Macro-averaged F1 over the classes appearing in either sequence.
double f_score(std::span<const int> pred, std::span<const int> truth, Level level);

/// Single-reference BLEU with clipped n-gram precisions up to `n` and
/// brevity penalty min(1, |pred| / |truth|).
double bleu(std::span<const int> pred, std::span<const int> truth, int n = 3);

struct MetricReport {
  double ahd_point = 0.0;
  double f_point = 0.0;
  double bleu_point = 0.0;
  double ahd_segment = 0.0;
  double f_segment = 0.0;
  double bleu_segment = 0.0;
  std::size_t n_trajectories = 0;
};

/// Per-trajectory metrics at both levels, averaged over trajectories.
/// Each pair is (prediction, truth).
MetricReport evaluate_corpus(std::span<const std::pair<PointRoute, PointRoute>> pairs);

inline constexpr const char* kMetricCsvHeader = "model,level,ahd,fscore,bleu,n_traj";

/// Two CSV rows (point, segment) for the report, without trailing newline
/// on the last row.
std::string metric_csv_rows(const std::string& model, const MetricReport& r);

}  // namespace mapmatch
