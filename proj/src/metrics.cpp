#include "mapmatch/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <utility>

#include "mapmatch/error.hpp"

namespace mapmatch {

std::size_t Alignment::matches() const {
  return static_cast<std::size_t>(std::count_if(pairs.begin(), pairs.end(), [](const AlignedPair& p) {
    return p.a && p.b && *p.a == *p.b;
  }));
}

Alignment needleman_wunsch(std::span<const int> a, std::span<const int> b,
                           int match, int mismatch, int gap) {
  // Cells hold (score, matches), compared lexicographically: among
  // equal-score alignments the one with more matched pairs wins, which keeps
  // the match count independent of argument order. Remaining ties follow the
  // diagonal/up/left traceback order.
  using Cell = std::pair<int, int>;
  const std::size_t n = a.size(), m = b.size();
  const std::size_t stride = m + 1;
  std::vector<Cell> score((n + 1) * stride);
  auto at = [&](std::size_t i, std::size_t j) -> Cell& { return score[i * stride + j]; };
  auto diag_step = [&](std::size_t i, std::size_t j) {
    const bool eq = a[i - 1] == b[j - 1];
    const Cell& p = at(i - 1, j - 1);
    return Cell{p.first + (eq ? match : mismatch), p.second + (eq ? 1 : 0)};
  };
  auto gap_step = [&](const Cell& p) { return Cell{p.first + gap, p.second}; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = {static_cast<int>(i) * gap, 0};
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = {static_cast<int>(j) * gap, 0};
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      at(i, j) = std::max({diag_step(i, j), gap_step(at(i - 1, j)), gap_step(at(i, j - 1))});
    }
  }

  Alignment out;
  out.score = at(n, m).first;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == diag_step(i, j)) {
      out.pairs.push_back({a[i - 1], b[j - 1]});
      --i;
      --j;
    } else if (i > 0 && at(i, j) == gap_step(at(i - 1, j))) {
      out.pairs.push_back({a[i - 1], std::nullopt});
      --i;
    } else {
      out.pairs.push_back({std::nullopt, b[j - 1]});
      --j;
    }
  }
  std::reverse(out.pairs.begin(), out.pairs.end());
  return out;
}

double ahd_point(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) {
    throw LengthMismatch("point-level AHD needs equal lengths (" + std::to_string(pred.size()) +
                         " vs " + std::to_string(truth.size()) + ")");
  }
  if (truth.empty()) return 1.0;
  std::size_t same = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) same += pred[i] == truth[i];
  return static_cast<double>(same) / static_cast<double>(truth.size());
}

double ahd_segment(std::span<const int> pred, std::span<const int> truth) {
  Alignment al = needleman_wunsch(pred, truth);
  if (al.pairs.empty()) return 1.0;
  return static_cast<double>(al.matches()) / static_cast<double>(al.pairs.size());
}

namespace {

struct ClassCounts {
  std::size_t predicted = 0;
  std::size_t actual = 0;
  std::size_t hits = 0;
};

double macro_f1(const std::map<int, ClassCounts>& counts) {
  if (counts.empty()) return 1.0;
  double total = 0.0;
  for (const auto& [cls, c] : counts) {
    if (c.predicted == 0 || c.actual == 0 || c.hits == 0) continue;
    double p = static_cast<double>(c.hits) / static_cast<double>(c.predicted);
    double r = static_cast<double>(c.hits) / static_cast<double>(c.actual);
    total += 2.0 * p * r / (p + r);
  }
  return total / static_cast<double>(counts.size());
}

}  // namespace

double f_score(std::span<const int> pred, std::span<const int> truth, Level level) {
  std::map<int, ClassCounts> counts;
  if (level == Level::Point) {
    if (pred.size() != truth.size()) {
      throw LengthMismatch("point-level F-score needs equal lengths");
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
      counts[pred[i]].predicted++;
      counts[truth[i]].actual++;
      if (pred[i] == truth[i]) counts[pred[i]].hits++;
    }
  } else {
    for (const AlignedPair& col : needleman_wunsch(pred, truth).pairs) {
      if (col.a) counts[*col.a].predicted++;
      if (col.b) counts[*col.b].actual++;
      if (col.a && col.b && *col.a == *col.b) counts[*col.a].hits++;
    }
  }
  return macro_f1(counts);
}

double bleu(std::span<const int> pred, std::span<const int> truth, int n) {
  if (n < 1) throw ValidationError("BLEU order must be >= 1");
  if (truth.size() < static_cast<std::size_t>(n)) {
    throw ReferenceTooShort("BLEU-" + std::to_string(n) + " needs a reference of length >= " +
                            std::to_string(n));
  }
  double log_sum = 0.0;
  for (int order = 1; order <= n; ++order) {
    const std::size_t k = static_cast<std::size_t>(order);
    if (pred.size() < k) return 0.0;
    std::map<std::vector<int>, std::size_t> ref_counts, gen_counts;
    for (std::size_t i = 0; i + k <= truth.size(); ++i)
      ref_counts[{truth.begin() + i, truth.begin() + i + k}]++;
    for (std::size_t i = 0; i + k <= pred.size(); ++i)
      gen_counts[{pred.begin() + i, pred.begin() + i + k}]++;
    std::size_t clipped = 0;
    for (const auto& [gram, count] : gen_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) clipped += std::min(count, it->second);
    }
    if (clipped == 0) return 0.0;
    const std::size_t total = pred.size() - k + 1;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
  }
  const double brevity = std::min(1.0, static_cast<double>(pred.size()) /
                                           static_cast<double>(truth.size()));
  double score = brevity * std::exp(log_sum / n);
  return std::min(score, 1.0);
}

MetricReport evaluate_corpus(std::span<const std::pair<PointRoute, PointRoute>> pairs) {
  if (pairs.empty()) throw ValidationError("cannot evaluate an empty corpus");
  MetricReport r;
  for (const auto& [pred, truth] : pairs) {
    const SegmentRoute pred_seg = collapse(pred);
    const SegmentRoute truth_seg = collapse(truth);
    r.ahd_point += ahd_point(pred, truth);
    r.f_point += f_score(pred, truth, Level::Point);
    r.bleu_point += bleu(pred, truth, 3);
    r.ahd_segment += ahd_segment(pred_seg, truth_seg);
    r.f_segment += f_score(pred_seg, truth_seg, Level::Segment);
    r.bleu_segment += bleu(pred_seg, truth_seg, 3);
  }
  const double n = static_cast<double>(pairs.size());
  r.ahd_point /= n;
  r.f_point /= n;
  r.bleu_point /= n;
  r.ahd_segment /= n;
  r.f_segment /= n;
  r.bleu_segment /= n;
  r.n_trajectories = pairs.size();
  return r;
}

std::string metric_csv_rows(const std::string& model, const MetricReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,point,%.10f,%.10f,%.10f,%zu\n%s,segment,%.10f,%.10f,%.10f,%zu",
                model.c_str(), r.ahd_point, r.f_point, r.bleu_point, r.n_trajectories,
                model.c_str(), r.ahd_segment, r.f_segment, r.bleu_segment, r.n_trajectories);
  return buf;
}

}  // namespace mapmatch
