#include "mapmatch/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "mapmatch/corpus_io.hpp"
#include "mapmatch/error.hpp"
#include "mapmatch/model/checkpoint.hpp"

namespace mapmatch::pipeline {

using model::Transformer;

void SplitSpec::validate() const {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw UsageError("train fraction must lie strictly between 0 and 1");
  }
}

Split split_indices(std::size_t n, const SplitSpec& spec) {
  spec.validate();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(spec.seed, "split"));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(n)));
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  // Keep corpus order inside each side so outputs read naturally.
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

Manifest::Manifest(std::string command) : command_(std::move(command)) {}

void Manifest::input(const fs::path& path) {
  inputs_.push_back({{"path", path.generic_string()}, {"sha256", file_sha256(path)}});
}

void Manifest::output(const fs::path& path) {
  outputs_.push_back({{"path", path.generic_string()}, {"sha256", file_sha256(path)}});
}

nlohmann::json Manifest::to_json() const {
  return {{"command", command_},
          {"toolkit_version", kToolkitVersion},
          {"params", params_},
          {"inputs", inputs_},
          {"outputs", outputs_}};
}

void Manifest::write(const fs::path& path) const { write_file(path, to_json().dump(2) + "\n"); }

fs::path sidecar_path(const fs::path& out) {
  fs::path p = out;
  p += ".manifest.json";
  return p;
}

namespace {

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// directory_iterator order is unspecified; manifests must not depend on it.
std::vector<fs::path> sorted_files(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::string sigma_tag(double sigma) {
  char buf[32];
  if (sigma == std::floor(sigma)) {
    std::snprintf(buf, sizeof buf, "sigma%.0f", sigma);
  } else {
    std::snprintf(buf, sizeof buf, "sigma%g", sigma);
  }
  return buf;
}

std::vector<GpsTrajectory> require_corpus(const fs::path& path, bool need_truth) {
  auto corpus = read_corpus(path);
  if (corpus.empty()) throw UsageError("corpus " + path.string() + " is empty");
  if (need_truth) {
    for (const auto& t : corpus)
      if (!t.truth) throw ValidationError("trajectory " + t.traj_id + " has no truth labels");
  }
  return corpus;
}

MetricReport evaluate_routes(const std::vector<PointRoute>& pred,
                             const std::vector<GpsTrajectory>& truth) {
  std::vector<std::pair<PointRoute, PointRoute>> pairs;
  pairs.reserve(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) pairs.emplace_back(pred[i], *truth[i].truth);
  return evaluate_corpus(pairs);
}

std::vector<PointRoute> transformer_routes(const Transformer<float>& m,
                                           const std::vector<GpsTrajectory>& corpus,
                                           const BoundingBox& box) {
  std::vector<PointRoute> out;
  for (auto& r : model::predict_corpus(m, corpus, box)) out.push_back(std::move(r.route));
  return out;
}

std::vector<PointRoute> hmm_routes(const RoadNetwork& net, const HmmConfig& cfg,
                                   const std::vector<GpsTrajectory>& corpus) {
  HmmMatcher matcher(net, cfg);
  std::vector<PointRoute> out;
  out.reserve(corpus.size());
  for (const auto& t : corpus) out.push_back(matcher.match(t));
  return out;
}

std::vector<Prediction> to_predictions(const std::vector<GpsTrajectory>& corpus,
                                       std::vector<PointRoute> routes, Engine engine) {
  std::vector<Prediction> out;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    out.push_back({corpus[i].traj_id, engine_name(engine), std::move(routes[i]), {}});
  return out;
}

/// Per-edge probabilities (index = dense edge id): the padding class is
/// dropped and the rest renormalized.
std::vector<std::vector<double>> edge_probabilities(const model::Mat<double>& p) {
  std::vector<std::vector<double>> rows;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double mass = p.row(i).tail(p.cols() - 1).sum();
    std::vector<double> row(static_cast<std::size_t>(p.cols() - 1));
    for (Eigen::Index c = 1; c < p.cols(); ++c) row[static_cast<std::size_t>(c - 1)] = p(i, c) / mass;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_metric_csv(const fs::path& path,
                      const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::string s = std::string(kMetricCsvHeader) + "\n";
  for (const auto& [name, r] : rows) s += metric_csv_rows(name, r) + "\n";
  ensure_parent(path);
  write_file(path, s);
}

std::string report_columns(const MetricReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.10f,%.10f,%.10f,%.10f,%.10f,%.10f,%zu", r.ahd_point, r.f_point,
                r.bleu_point, r.ahd_segment, r.f_segment, r.bleu_segment, r.n_trajectories);
  return buf;
}

constexpr const char* kWideHeader =
    "ahd_point,fscore_point,bleu_point,ahd_segment,fscore_segment,bleu_segment,n_traj";

void write_attention_matrices(const fs::path& dir, const std::vector<model::AttentionRecord>& recs) {
  fs::create_directories(dir);
  for (const auto& r : recs) {
    char name[96];
    std::snprintf(name, sizeof name, "%s_layer%d_head%d.csv", model::stage_name(r.stage), r.layer,
                  r.head);
    std::string s;
    for (Eigen::Index q = 0; q < r.weights.rows(); ++q) {
      for (Eigen::Index k = 0; k < r.weights.cols(); ++k) {
        char v[32];
        std::snprintf(v, sizeof v, "%.10g", r.weights(q, k));
        if (k) s += ',';
        s += v;
      }
      s += '\n';
    }
    write_file(dir / name, s);
  }
}

void write_ranges(const fs::path& dir, const model::AttentionRanges& ranges,
                  const GpsTrajectory& traj) {
  std::string s = "position,first,last";
  if (traj.truth) s += ",truth_edge";
  s += "\n";
  for (std::size_t i = 0; i < ranges.intervals.size(); ++i) {
    s += std::to_string(i) + "," + std::to_string(ranges.intervals[i].first) + "," +
         std::to_string(ranges.intervals[i].last);
    if (traj.truth) s += "," + std::to_string((*traj.truth)[i]);
    s += "\n";
  }
  write_file(dir / "ranges.csv", s);
  nlohmann::json report{{"traj_id", traj.traj_id},
                        {"threshold", ranges.threshold},
                        {"reference_threshold", -3.15},
                        {"positions", ranges.intervals.size()}};
  write_file(dir / "threshold.json", report.dump(2) + "\n");
}

}  // namespace

// ---- commands ---------------------------------------------------------------

void gen_net(const GenNetOptions& opt) {
  if (opt.out.empty()) throw UsageError("gen-net needs an output path");
  RoadNetwork net = make_grid_network(opt.rows, opt.cols, opt.spacing_m);
  ensure_parent(opt.out);
  save_network(net, opt.out);
  Manifest m("gen-net");
  m.params() = {{"rows", opt.rows}, {"cols", opt.cols}, {"spacing_m", opt.spacing_m}};
  m.output(opt.out);
  m.write(sidecar_path(opt.out));
}

void gen_traj(const GenTrajOptions& opt) {
  if (opt.out.empty()) throw UsageError("gen-traj needs an output path");
  opt.gen.validate();
  RoadNetwork net = load_network(opt.net);
  auto corpus = opt.pseudo_real ? generate_pseudo_real(net, opt.gen, opt.count)
                                : generate_corpus(net, opt.gen, opt.count);
  ensure_parent(opt.out);
  write_corpus(opt.out, corpus);
  Manifest m("gen-traj");
  m.params() = {{"generation", opt.gen.to_json()},
                {"count", opt.count},
                {"pseudo_real", opt.pseudo_real}};
  m.input(opt.net);
  m.output(opt.out);
  m.write(sidecar_path(opt.out));
}

model::TrainOptions TrainSettings::options() const {
  if (epochs < 0) throw UsageError("epochs must be >= 0");
  if (batch_size < 1) throw UsageError("batch size must be >= 1");
  if (!(lr > 0.0)) throw UsageError("learning rate must be > 0");
  model::TrainOptions o;
  o.epochs = epochs;
  o.batch_size = batch_size;
  o.adam.lr = lr;
  o.seed = seed;
  return o;
}

nlohmann::json TrainSettings::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr}, {"seed", seed}};
}

TrainSettings TrainSettings::from_json(const nlohmann::json& j, TrainSettings d) {
  d.epochs = j.value("epochs", d.epochs);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.lr = j.value("lr", d.lr);
  d.seed = j.value("seed", d.seed);
  return d;
}

model::TrainLog pretrain(const PretrainOptions& opt) {
  if (opt.out.empty()) throw UsageError("pretrain needs an output path");
  const model::TrainOptions train_opt = opt.train.options();
  RoadNetwork net = load_network(opt.net);
  auto corpus = require_corpus(opt.corpus, true);
  auto data = model::make_examples(corpus, net.bounding_box());
  Transformer<float> m(model::config_for_network(net, opt.model), opt.init_seed);
  model::TrainLog log = model::train(m, data, train_opt);

  ensure_parent(opt.out);
  model::save_checkpoint(m, opt.out);
  fs::path loss = opt.out;
  loss += ".loss.csv";
  write_file(loss, log.to_csv());
  Manifest man("pretrain");
  man.params() = {{"model", m.config().to_json()},
                  {"train", opt.train.to_json()},
                  {"init_seed", opt.init_seed}};
  man.input(opt.net);
  man.input(opt.corpus);
  man.output(opt.out);
  man.output(loss);
  man.write(sidecar_path(opt.out));
  return log;
}

void finetune(const FinetuneOptions& opt) {
  if (opt.out.empty()) throw UsageError("finetune needs an output path");
  const model::TrainOptions train_opt = opt.train.options();
  RoadNetwork net = load_network(opt.net);
  const BoundingBox box = net.bounding_box();
  auto corpus = require_corpus(opt.corpus, true);
  auto data = model::make_examples(corpus, box);
  const Transformer<float> base = model::load_checkpoint(opt.checkpoint);

  Manifest man(opt.sweep ? "finetune --sweep" : "finetune");
  man.params() = {{"train", opt.train.to_json()}};
  man.input(opt.net);
  man.input(opt.checkpoint);
  man.input(opt.corpus);

  if (!opt.sweep) {
    const model::ComponentMask mask = model::parse_mask(opt.mask);
    man.params()["mask"] = model::mask_name(mask);
    Transformer<float> m = base;
    model::TrainLog log = model::fine_tune(m, data, mask, train_opt);
    ensure_parent(opt.out);
    model::save_checkpoint(m, opt.out);
    fs::path loss = opt.out;
    loss += ".loss.csv";
    write_file(loss, log.to_csv());
    man.output(opt.out);
    man.output(loss);
    man.write(sidecar_path(opt.out));
    return;
  }

  if (!opt.test) throw UsageError("--sweep needs --test to score each mask");
  auto test = require_corpus(*opt.test, true);
  man.input(*opt.test);
  fs::create_directories(opt.out);
  const std::vector<std::string> masks{"output", "output+norm", "output+encoder",
                                       "output+decoder", "output+encoder+decoder", "full"};
  std::string csv = std::string("mask,final_loss,") + kWideHeader + "\n";
  for (const auto& spec : masks) {
    Transformer<float> m = base;
    model::TrainLog log = model::fine_tune(m, data, model::parse_mask(spec), train_opt);
    const fs::path ckpt = opt.out / (spec + ".ckpt");
    model::save_checkpoint(m, ckpt);
    man.output(ckpt);
    const MetricReport r = evaluate_routes(transformer_routes(m, test, box), test);
    char loss[32];
    std::snprintf(loss, sizeof loss, "%.10f", log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back());
    csv += spec + "," + loss + "," + report_columns(r) + "\n";
  }
  const fs::path csv_path = opt.out / "sweep.csv";
  write_file(csv_path, csv);
  man.output(csv_path);
  man.write(opt.out / "manifest.json");
}

Engine parse_engine(const std::string& name) {
  if (name == "hmm") return Engine::Hmm;
  if (name == "transformer") return Engine::Transformer;
  throw UsageError("unknown engine '" + name + "' (expected hmm or transformer)");
}

const char* engine_name(Engine e) { return e == Engine::Hmm ? "hmm" : "transformer"; }

void match(const MatchOptions& opt) {
  if (opt.out.empty()) throw UsageError("match needs an output path");
  if (opt.engine == Engine::Transformer && !opt.checkpoint) {
    throw UsageError("the transformer engine needs --checkpoint");
  }
  if (opt.engine == Engine::Hmm && opt.probs) {
    throw UsageError("--probs is only available for the transformer engine");
  }
  RoadNetwork net = load_network(opt.net);
  auto corpus = read_corpus(opt.corpus);
  Manifest man("match");
  man.params() = {{"engine", engine_name(opt.engine)}, {"probs", opt.probs}};
  man.input(opt.net);
  man.input(opt.corpus);

  std::vector<Prediction> preds;
  if (opt.engine == Engine::Hmm) {
    man.params()["hmm"] = opt.hmm.to_json();
    preds = to_predictions(corpus, hmm_routes(net, opt.hmm, corpus), opt.engine);
  } else {
    const Transformer<float> m = model::load_checkpoint(*opt.checkpoint);
    man.input(*opt.checkpoint);
    auto results = model::predict_corpus(m, corpus, net.bounding_box(), opt.probs);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      Prediction p{corpus[i].traj_id, engine_name(opt.engine), std::move(results[i].route), {}};
      if (opt.probs) p.probs = edge_probabilities(results[i].probabilities);
      preds.push_back(std::move(p));
    }
  }
  ensure_parent(opt.out);
  write_predictions(opt.out, preds);
  man.output(opt.out);
  man.write(sidecar_path(opt.out));
}

MetricReport eval(const EvalOptions& opt) {
  if (opt.out.empty()) throw UsageError("eval needs an output path");
  auto preds = read_predictions(opt.predictions);
  auto truth = read_corpus(opt.truth);
  if (truth.empty()) throw UsageError("truth corpus is empty");

  std::map<std::string, const GpsTrajectory*> by_id;
  for (const auto& t : truth) {
    if (!t.truth) throw ValidationError("trajectory " + t.traj_id + " has no truth labels");
    if (!by_id.emplace(t.traj_id, &t).second) throw DataError("duplicate traj_id " + t.traj_id);
  }
  std::set<std::string> seen;
  std::vector<std::string> extra, missing;
  std::vector<std::pair<PointRoute, PointRoute>> pairs;
  for (const auto& p : preds) {
    if (!seen.insert(p.traj_id).second) throw DataError("duplicate prediction for " + p.traj_id);
    auto it = by_id.find(p.traj_id);
    if (it == by_id.end()) {
      extra.push_back(p.traj_id);
      continue;
    }
    pairs.emplace_back(p.route, *it->second->truth);
  }
  for (const auto& [id, t] : by_id)
    if (!seen.count(id)) missing.push_back(id);
  if (!extra.empty() || !missing.empty()) {
    std::ostringstream msg;
    msg << "prediction and truth ids differ;";
    if (!missing.empty()) {
      msg << " missing predictions:";
      for (const auto& id : missing) msg << ' ' << id;
    }
    if (!extra.empty()) {
      msg << (missing.empty() ? "" : ";") << " predictions without truth:";
      for (const auto& id : extra) msg << ' ' << id;
    }
    throw JoinError(msg.str());
  }
  const MetricReport r = evaluate_corpus(pairs);
  std::string name = opt.model_name;
  if (name.empty()) name = preds.empty() ? "model" : preds.front().engine;
  write_metric_csv(opt.out, {{name, r}});
  Manifest man("eval");
  man.params() = {{"model", name}};
  man.input(opt.predictions);
  man.input(opt.truth);
  man.output(opt.out);
  man.write(sidecar_path(opt.out));
  return r;
}

model::AttentionRanges attn(const AttnOptions& opt) {
  if (opt.out_dir.empty()) throw UsageError("attn needs an output directory");
  RoadNetwork net = load_network(opt.net);
  auto corpus = require_corpus(opt.corpus, false);
  const GpsTrajectory* traj = &corpus.front();
  if (opt.traj_id) {
    auto it = std::find_if(corpus.begin(), corpus.end(),
                           [&](const GpsTrajectory& t) { return t.traj_id == *opt.traj_id; });
    if (it == corpus.end()) throw DataError("no trajectory with id " + *opt.traj_id);
    traj = &*it;
  }
  const Transformer<float> m = model::load_checkpoint(opt.checkpoint);
  const model::MatchResult r = model::predict(m, *traj, net.bounding_box(), true);
  const model::AttentionRanges ranges = model::attention_ranges(r.records);
  write_attention_matrices(opt.out_dir, r.records);
  write_ranges(opt.out_dir, ranges, *traj);

  Manifest man("attn");
  man.params() = {{"traj_id", traj->traj_id}};
  man.input(opt.net);
  man.input(opt.checkpoint);
  man.input(opt.corpus);
  for (const auto& p : sorted_files(opt.out_dir)) {
    if (p.filename() != "manifest.json") man.output(p);
  }
  man.write(opt.out_dir / "manifest.json");
  return ranges;
}

void accumulate_adjacency(const model::AttentionRanges& ranges, const PointRoute& truth,
                          AdjacencyStats& stats) {
  // Segment run index per point (consecutive equal labels form one segment).
  std::vector<int> run(truth.size(), 0);
  for (std::size_t i = 1; i < truth.size(); ++i) run[i] = run[i - 1] + (truth[i] != truth[i - 1]);
  const int n_runs = truth.empty() ? 0 : run.back() + 1;
  for (std::size_t i = 0; i < truth.size() && i < ranges.intervals.size(); ++i) {
    if (run[i] == 0 || run[i] == n_runs - 1) continue;
    ++stats.positions;
    const auto& iv = ranges.intervals[i];
    for (int k = iv.first; k <= iv.last; ++k) {
      if (std::abs(run[static_cast<std::size_t>(k)] - run[i]) == 1) {
        ++stats.with_neighbor;
        break;
      }
    }
  }
  stats.threshold_sum += ranges.threshold;
  ++stats.trajectories;
}

// ---- experiment -------------------------------------------------------------

nlohmann::json ExperimentManifest::to_json() const {
  nlohmann::json net{{"rows", grid_rows}, {"cols", grid_cols}, {"spacing_m", grid_spacing_m}};
  if (network_path) net["path"] = network_path->generic_string();
  if (network_sha256) net["sha256"] = *network_sha256;
  return {{"seed", seed},
          {"network", net},
          {"generation", generation.to_json()},
          {"synthetic_train_count", synthetic_train_count},
          {"synthetic_test_count", synthetic_test_count},
          {"noise_sweep", noise_sweep},
          {"matched_sigma_m", matched_sigma_m},
          {"pseudo_real_count", pseudo_real_count},
          {"pseudo_real_sigma_m", pseudo_real_sigma_m},
          {"split", {{"train_fraction", split.train_fraction}, {"seed", split.seed}}},
          {"model", model.to_json()},
          {"pretrain", pretrain.to_json()},
          {"finetune_from", finetune_from},
          {"finetune_count", finetune_count},
          {"finetune_masks", finetune_masks},
          {"finetune", finetune.to_json()},
          {"hmm", hmm.to_json()},
          {"attention_samples", attention_samples},
          {"toolkit_version", kToolkitVersion}};
}

ExperimentManifest ExperimentManifest::from_json(const nlohmann::json& j) {
  ExperimentManifest m;
  try {
    m.seed = j.value("seed", m.seed);
    if (j.contains("network")) {
      const auto& n = j["network"];
      m.grid_rows = n.value("rows", m.grid_rows);
      m.grid_cols = n.value("cols", m.grid_cols);
      m.grid_spacing_m = n.value("spacing_m", m.grid_spacing_m);
      if (n.contains("path")) m.network_path = n["path"].get<std::string>();
      if (n.contains("sha256")) m.network_sha256 = n["sha256"].get<std::string>();
    }
    if (j.contains("generation")) m.generation = GenerationConfig::from_json(j["generation"]);
    m.synthetic_train_count = j.value("synthetic_train_count", m.synthetic_train_count);
    m.synthetic_test_count = j.value("synthetic_test_count", m.synthetic_test_count);
    m.noise_sweep = j.value("noise_sweep", m.noise_sweep);
    m.matched_sigma_m = j.value("matched_sigma_m", m.matched_sigma_m);
    m.pseudo_real_count = j.value("pseudo_real_count", m.pseudo_real_count);
    m.pseudo_real_sigma_m = j.value("pseudo_real_sigma_m", m.pseudo_real_sigma_m);
    if (j.contains("split")) {
      m.split.train_fraction = j["split"].value("train_fraction", m.split.train_fraction);
      m.split.seed = j["split"].value("seed", m.split.seed);
    }
    if (j.contains("model")) {
      nlohmann::json merged = m.model.to_json();
      merged.update(j["model"]);
      m.model = model::ModelConfig::from_json(merged);
    }
    if (j.contains("pretrain")) m.pretrain = TrainSettings::from_json(j["pretrain"], m.pretrain);
    m.finetune_from = j.value("finetune_from", m.finetune_from);
    m.finetune_count = j.value("finetune_count", m.finetune_count);
    m.finetune_masks = j.value("finetune_masks", m.finetune_masks);
    if (j.contains("finetune")) m.finetune = TrainSettings::from_json(j["finetune"], m.finetune);
    if (j.contains("hmm")) {
      nlohmann::json merged = m.hmm.to_json();
      merged.update(j["hmm"]);
      m.hmm = HmmConfig::from_json(merged);
    }
    m.attention_samples = j.value("attention_samples", m.attention_samples);
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(std::string("experiment manifest: ") + ex.what());
  }
  m.validate();
  return m;
}

void ExperimentManifest::validate() const {
  generation.validate();
  split.validate();
  model.validate();
  hmm.validate();
  pretrain.options();
  finetune.options();
  if (noise_sweep.empty()) throw UsageError("noise_sweep is empty");
  if (std::find(noise_sweep.begin(), noise_sweep.end(), matched_sigma_m) == noise_sweep.end()) {
    throw UsageError("matched_sigma_m must be one of the noise_sweep values");
  }
  for (double s : finetune_from) {
    if (std::find(noise_sweep.begin(), noise_sweep.end(), s) == noise_sweep.end()) {
      throw UsageError("finetune_from values must appear in noise_sweep");
    }
  }
  for (const auto& mask : finetune_masks) model::parse_mask(mask);
  if (synthetic_train_count == 0 || synthetic_test_count == 0 || pseudo_real_count < 2) {
    throw UsageError("corpus sizes must be positive");
  }
}

ExperimentResult experiment(const fs::path& manifest_path, const fs::path& out_dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::parse_error& ex) {
    throw ParseError("manifest " + manifest_path.string() + ": " + ex.what());
  }
  return experiment(ExperimentManifest::from_json(j), out_dir);
}

ExperimentResult experiment(const ExperimentManifest& em, const fs::path& out_dir) {
  em.validate();
  fs::create_directories(out_dir);
  Manifest run("experiment");
  run.params() = em.to_json();
  const std::uint64_t seed = em.seed;

  // Network
  const fs::path net_path = out_dir / "network.json";
  if (em.network_path) {
    if (em.network_sha256 && file_sha256(*em.network_path) != *em.network_sha256) {
      throw DataError("network file hash does not match the manifest");
    }
    run.input(*em.network_path);
    save_network(load_network(*em.network_path), net_path);
  } else {
    save_network(make_grid_network(em.grid_rows, em.grid_cols, em.grid_spacing_m), net_path);
  }
  run.output(net_path);
  const RoadNetwork net = load_network(net_path);
  const BoundingBox box = net.bounding_box();

  auto save_corpus = [&](const std::string& name, const std::vector<GpsTrajectory>& c) {
    const fs::path p = out_dir / "corpora" / (name + ".jsonl");
    ensure_parent(p);
    write_corpus(p, c);
    run.output(p);
  };
  auto save_model = [&](const std::string& name, const Transformer<float>& m,
                        const model::TrainLog* log) {
    const fs::path p = out_dir / "models" / (name + ".ckpt");
    ensure_parent(p);
    model::save_checkpoint(m, p);
    run.output(p);
    if (log) {
      fs::path l = p;
      l += ".loss.csv";
      write_file(l, log->to_csv());
      run.output(l);
    }
  };
  auto save_preds = [&](const std::string& name, const std::vector<GpsTrajectory>& c,
                        const std::vector<PointRoute>& routes, Engine e) {
    const fs::path p = out_dir / "predictions" / (name + ".jsonl");
    ensure_parent(p);
    write_predictions(p, to_predictions(c, routes, e));
    run.output(p);
  };

  // Pseudo-real ground truth, split 70/30; the fine-tuning set is drawn from
  // the train side.
  GenerationConfig pr_cfg = em.generation;
  pr_cfg.sigma_m = em.pseudo_real_sigma_m;
  pr_cfg.seed = derive_seed(seed, "gen.pseudo_real");
  const auto pseudo_real = generate_pseudo_real(net, pr_cfg, em.pseudo_real_count);
  SplitSpec split = em.split;
  split.seed = derive_seed(seed, "split");
  const Split pr_split = split_indices(pseudo_real.size(), split);
  const auto pr_train = take(pseudo_real, pr_split.train);
  const auto pr_test = take(pseudo_real, pr_split.test);
  const std::vector<GpsTrajectory> ft_set(
      pr_train.begin(), pr_train.begin() + static_cast<std::ptrdiff_t>(std::min(em.finetune_count, pr_train.size())));
  save_corpus("pseudo_real", pseudo_real);
  save_corpus("pseudo_real_train", pr_train);
  save_corpus("pseudo_real_test", pr_test);
  save_corpus("finetune", ft_set);

  ExperimentResult res;
  res.out_dir = out_dir;
  const model::ModelConfig cfg = model::config_for_network(net, em.model);
  std::map<double, Transformer<float>> pretrained;

  std::vector<std::pair<std::string, MetricReport>> table2_rows;
  for (double sigma : em.noise_sweep) {
    const std::string tag = sigma_tag(sigma);
    GenerationConfig g = em.generation;
    g.sigma_m = sigma;
    g.seed = derive_seed(seed, "gen.synthetic.train." + tag);
    const auto train_set = generate_corpus(net, g, em.synthetic_train_count);
    g.seed = derive_seed(seed, "gen.synthetic.test." + tag);
    const auto test_set = generate_corpus(net, g, em.synthetic_test_count);
    save_corpus("synthetic_" + tag + "_train", train_set);
    save_corpus("synthetic_" + tag + "_test", test_set);

    Transformer<float> m(cfg, derive_seed(seed, "init"));
    model::TrainOptions topt = em.pretrain.options();
    topt.seed = derive_seed(em.pretrain.seed ^ seed, "pretrain." + tag);
    const auto t0 = std::chrono::steady_clock::now();
    const model::TrainLog log = model::train(m, model::make_examples(train_set, box), topt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_model("pretrained_" + tag, m, &log);

    if (sigma == em.matched_sigma_m) {
      res.matched_pretrain_seconds = secs;
      const auto tr = transformer_routes(m, test_set, box);
      const auto hr = hmm_routes(net, em.hmm, test_set);
      save_preds("table1_transformer", test_set, tr, Engine::Transformer);
      save_preds("table1_hmm", test_set, hr, Engine::Hmm);
      res.table1_transformer = evaluate_routes(tr, test_set);
      res.table1_hmm = evaluate_routes(hr, test_set);
      write_metric_csv(out_dir / "table1.csv",
                       {{"transformer", res.table1_transformer}, {"hmm", res.table1_hmm}});
      run.output(out_dir / "table1.csv");
    }

    const MetricReport r = evaluate_routes(transformer_routes(m, pr_test, box), pr_test);
    res.table2.emplace_back(sigma, r);
    table2_rows.emplace_back(tag, r);
    pretrained.emplace(sigma, std::move(m));
  }
  write_metric_csv(out_dir / "table2.csv", table2_rows);
  run.output(out_dir / "table2.csv");

  // Both engines on the pseudo-real test set.
  {
    const Transformer<float>& m = pretrained.at(em.matched_sigma_m);
    const auto tr = transformer_routes(m, pr_test, box);
    const auto hr = hmm_routes(net, em.hmm, pr_test);
    save_preds("pseudo_real_test_transformer", pr_test, tr, Engine::Transformer);
    save_preds("pseudo_real_test_hmm", pr_test, hr, Engine::Hmm);
    write_metric_csv(out_dir / "pseudo_real_engines.csv",
                     {{"transformer_" + sigma_tag(em.matched_sigma_m), evaluate_routes(tr, pr_test)},
                      {"hmm", evaluate_routes(hr, pr_test)}});
    run.output(out_dir / "pseudo_real_engines.csv");
  }

  // Fine-tuning sweep.
  std::string t3 = "pretrained,mask,level,ahd,fscore,bleu,n_traj\n";
  const auto ft_data = model::make_examples(ft_set, box);
  auto add_t3 = [&](double sigma, const std::string& mask, const MetricReport& r) {
    res.table3.push_back({sigma, mask, r});
    std::istringstream rows(metric_csv_rows(mask, r));
    std::string line;
    while (std::getline(rows, line)) t3 += sigma_tag(sigma) + "," + line + "\n";
  };
  for (double sigma : em.finetune_from) {
    const Transformer<float>& base = pretrained.at(sigma);
    add_t3(sigma, "origin", res.table2[static_cast<std::size_t>(
                                std::find(em.noise_sweep.begin(), em.noise_sweep.end(), sigma) -
                                em.noise_sweep.begin())]
                                .second);
    for (const auto& spec : em.finetune_masks) {
      Transformer<float> m = base;
      model::TrainOptions fopt = em.finetune.options();
      fopt.seed = derive_seed(em.finetune.seed ^ seed, "finetune." + sigma_tag(sigma) + "." + spec);
      const model::TrainLog log = model::fine_tune(m, ft_data, model::parse_mask(spec), fopt);
      save_model("finetuned_" + sigma_tag(sigma) + "_" + spec, m, &log);
      add_t3(sigma, model::mask_name(model::parse_mask(spec)),
             evaluate_routes(transformer_routes(m, pr_test, box), pr_test));
    }
  }
  write_file(out_dir / "table3.csv", t3);
  run.output(out_dir / "table3.csv");

  // Attention: one exported sample plus the adjacency statistic over a
  // sample of matched-noise synthetic test trajectories.
  {
    const Transformer<float>& m = pretrained.at(em.matched_sigma_m);
    GenerationConfig g = em.generation;
    g.sigma_m = em.matched_sigma_m;
    g.seed = derive_seed(seed, "gen.synthetic.test." + sigma_tag(em.matched_sigma_m));
    const auto sample = generate_corpus(net, g, std::min(em.attention_samples, em.synthetic_test_count));
    AdjacencyStats stats;
    for (std::size_t i = 0; i < sample.size(); ++i) {
      const model::MatchResult r = model::predict(m, sample[i], box, true);
      const model::AttentionRanges ranges = model::attention_ranges(r.records);
      accumulate_adjacency(ranges, *sample[i].truth, stats);
      if (i == 0) {
        const fs::path dir = out_dir / "attention";
        write_attention_matrices(dir, r.records);
        write_ranges(dir, ranges, sample[i]);
        for (const auto& p : sorted_files(dir)) run.output(p);
      }
    }
    res.attention_positions = stats.positions;
    res.attention_adjacent_fraction =
        stats.positions ? static_cast<double>(stats.with_neighbor) / static_cast<double>(stats.positions) : 0.0;
    res.attention_threshold = stats.trajectories ? stats.threshold_sum / static_cast<double>(stats.trajectories) : 0.0;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "trajectories,interior_positions,with_neighbor,fraction,mean_threshold\n%zu,%zu,%zu,%.10f,%.10f\n",
                  stats.trajectories, stats.positions, stats.with_neighbor,
                  res.attention_adjacent_fraction, res.attention_threshold);
    write_file(out_dir / "attention_summary.csv", buf);
    run.output(out_dir / "attention_summary.csv");
  }

  // Wall-clock numbers vary between runs, so they live outside the hashed
  // artifacts.
  write_file(out_dir / "timings.json",
             nlohmann::json{{"matched_pretrain_seconds", res.matched_pretrain_seconds}}.dump(2) + "\n");
  run.write(out_dir / "run_manifest.json");
  return res;
}

}  // namespace mapmatch::pipeline
