// Command-line front end for the map-matching toolkit.

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "mapmatch/corpus_io.hpp"
#include "mapmatch/error.hpp"
#include "mapmatch/pipeline.hpp"

using namespace mapmatch;
namespace pl = mapmatch::pipeline;

namespace {

void add_generation_flags(CLI::App* cmd, GenerationConfig& g) {
  cmd->add_option("--route-length", g.route_length, "Segments per route (N)");
  cmd->add_option("--spacing", g.spacing_m, "Distance between generated points in meters (D)");
  cmd->add_option("--select-min", g.select_min, "Minimum points kept per segment (r1)");
  cmd->add_option("--select-max", g.select_max, "Maximum points kept per segment (r2)");
  cmd->add_option("--sigma", g.sigma_m, "Gaussian noise per axis in meters");
  cmd->add_option("--seed", g.seed, "Generation seed");
  cmd->add_flag("!--allow-uturn", g.exclude_uturn, "Allow immediate U-turns in routes");
}

void add_train_flags(CLI::App* cmd, pl::TrainSettings& t) {
  cmd->add_option("--epochs", t.epochs, "Training epochs");
  cmd->add_option("--batch-size", t.batch_size, "Mini-batch size");
  cmd->add_option("--lr", t.lr, "Adam learning rate");
  cmd->add_option("--train-seed", t.seed, "Shuffle and dropout seed");
}

void add_hmm_flags(CLI::App* cmd, HmmConfig& h) {
  cmd->add_option("--hmm-sigma", h.sigma_emission_m, "Emission sigma in meters");
  cmd->add_option("--hmm-beta", h.beta_transition, "Transition scale in meters");
  cmd->add_option("--hmm-k", h.k_candidates, "Candidate edges per point");
  cmd->add_option("--hmm-radius", h.radius_m, "Candidate search radius in meters");
  cmd->add_flag("--hmm-nearest-fallback", h.nearest_fallback,
                "Use the nearest edges when none lie inside the radius");
}

void print_report(const MetricReport& r) {
  std::printf("%s\n%s\n", kMetricCsvHeader, metric_csv_rows("result", r).c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Map matching with a Transformer and an HMM baseline"};
  app.require_subcommand(1);

  pl::GenNetOptions net_opt;
  auto* gen_net = app.add_subcommand("gen-net", "Write a rows x cols grid road network");
  gen_net->add_option("--rows", net_opt.rows)->default_val(5);
  gen_net->add_option("--cols", net_opt.cols)->default_val(5);
  gen_net->add_option("--spacing", net_opt.spacing_m, "Block length in meters")->default_val(200.0);
  gen_net->add_option("--out", net_opt.out)->required();

  pl::GenTrajOptions traj_opt;
  auto* gen_traj = app.add_subcommand("gen-traj", "Generate a labeled trajectory corpus");
  gen_traj->add_option("--net", traj_opt.net)->required()->check(CLI::ExistingFile);
  gen_traj->add_option("--count", traj_opt.count)->default_val(2000);
  gen_traj->add_flag("--pseudo-real", traj_opt.pseudo_real, "Use the shifted-statistics generator");
  gen_traj->add_option("--out", traj_opt.out)->required();
  add_generation_flags(gen_traj, traj_opt.gen);

  pl::PretrainOptions pre_opt;
  auto* pretrain = app.add_subcommand("pretrain", "Train a Transformer from scratch");
  pretrain->add_option("--net", pre_opt.net)->required()->check(CLI::ExistingFile);
  pretrain->add_option("--corpus", pre_opt.corpus)->required()->check(CLI::ExistingFile);
  pretrain->add_option("--out", pre_opt.out, "Checkpoint path")->required();
  pretrain->add_option("--d-model", pre_opt.model.d_model);
  pretrain->add_option("--heads", pre_opt.model.n_heads);
  pretrain->add_option("--layers", pre_opt.model.n_layers, "Layers per stack");
  pretrain->add_option("--d-ffn", pre_opt.model.d_ffn);
  pretrain->add_option("--dropout", pre_opt.model.dropout);
  pretrain->add_option("--max-len", pre_opt.model.max_len);
  pretrain->add_option("--init-seed", pre_opt.init_seed);
  add_train_flags(pretrain, pre_opt.train);

  pl::FinetuneOptions ft_opt;
  ft_opt.train.epochs = 10;
  ft_opt.train.batch_size = 16;
  auto* finetune = app.add_subcommand("finetune", "Fine-tune selected components of a checkpoint");
  finetune->add_option("--net", ft_opt.net)->required()->check(CLI::ExistingFile);
  finetune->add_option("--checkpoint", ft_opt.checkpoint)->required()->check(CLI::ExistingFile);
  finetune->add_option("--corpus", ft_opt.corpus)->required()->check(CLI::ExistingFile);
  finetune->add_option("--out", ft_opt.out, "Checkpoint, or output directory with --sweep")->required();
  finetune->add_option("--mask", ft_opt.mask,
                       "output, output+norm, output+encoder, output+decoder, "
                       "output+encoder+decoder or full");
  finetune->add_flag("--sweep", ft_opt.sweep, "Run all six masks and write sweep.csv");
  finetune->add_option("--test", ft_opt.test, "Labeled corpus scored per mask with --sweep");
  add_train_flags(finetune, ft_opt.train);

  pl::MatchOptions match_opt;
  std::string engine = "transformer";
  auto* match = app.add_subcommand("match", "Match a corpus with one engine");
  match->add_option("--engine", engine)->check(CLI::IsMember({"hmm", "transformer"}));
  match->add_option("--net", match_opt.net)->required()->check(CLI::ExistingFile);
  match->add_option("--corpus", match_opt.corpus)->required()->check(CLI::ExistingFile);
  match->add_option("--checkpoint", match_opt.checkpoint);
  match->add_option("--out", match_opt.out)->required();
  match->add_flag("--probs", match_opt.probs, "Include per-point edge probabilities");
  add_hmm_flags(match, match_opt.hmm);

  pl::EvalOptions eval_opt;
  auto* eval = app.add_subcommand("eval", "Score predictions against a labeled corpus");
  eval->add_option("--predictions", eval_opt.predictions)->required()->check(CLI::ExistingFile);
  eval->add_option("--truth", eval_opt.truth)->required()->check(CLI::ExistingFile);
  eval->add_option("--out", eval_opt.out)->required();
  eval->add_option("--model", eval_opt.model_name, "Name in the model column");

  pl::AttnOptions attn_opt;
  auto* attn = app.add_subcommand("attn", "Export attention matrices and threshold ranges");
  attn->add_option("--net", attn_opt.net)->required()->check(CLI::ExistingFile);
  attn->add_option("--checkpoint", attn_opt.checkpoint)->required()->check(CLI::ExistingFile);
  attn->add_option("--corpus", attn_opt.corpus)->required()->check(CLI::ExistingFile);
  attn->add_option("--traj-id", attn_opt.traj_id);
  attn->add_option("--out", attn_opt.out_dir, "Output directory")->required();

  std::string manifest_path, out_dir, write_default;
  auto* exp = app.add_subcommand("experiment", "Run the full study from a manifest");
  exp->add_option("--manifest", manifest_path, "Manifest JSON (defaults when omitted)");
  exp->add_option("--out", out_dir, "Output directory");
  exp->add_option("--write-default", write_default, "Write the default manifest here and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_net) {
      pl::gen_net(net_opt);
    } else if (*gen_traj) {
      pl::gen_traj(traj_opt);
    } else if (*pretrain) {
      const auto log = pl::pretrain(pre_opt);
      if (!log.epoch_loss.empty()) std::printf("final epoch loss %.6f\n", log.epoch_loss.back());
    } else if (*finetune) {
      pl::finetune(ft_opt);
    } else if (*match) {
      match_opt.engine = pl::parse_engine(engine);
      pl::match(match_opt);
    } else if (*eval) {
      print_report(pl::eval(eval_opt));
    } else if (*attn) {
      const auto r = pl::attn(attn_opt);
      std::printf("threshold %.6f over %zu positions\n", r.threshold, r.intervals.size());
    } else if (*exp) {
      if (!write_default.empty()) {
        write_file(write_default, pl::ExperimentManifest{}.to_json().dump(2) + "\n");
        return 0;
      }
      if (out_dir.empty()) throw UsageError("experiment needs --out");
      const auto r = manifest_path.empty() ? pl::experiment(pl::ExperimentManifest{}, out_dir)
                                           : pl::experiment(manifest_path, out_dir);
      std::printf("transformer vs hmm, segment AHD: %.4f vs %.4f\n", r.table1_transformer.ahd_segment,
                  r.table1_hmm.ahd_segment);
      std::printf("outputs in %s\n", out_dir.c_str());
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 4;
  }
  return 0;
}
