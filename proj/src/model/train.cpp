#include "mapmatch/model/train.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "mapmatch/error.hpp"
#include "mapmatch/model/checkpoint.hpp"

namespace mapmatch::model {

std::string TrainLog::to_csv() const {
  std::ostringstream out;
  out << "epoch,step,loss\n";
  char buf[96];
  for (const auto& e : steps) {
    std::snprintf(buf, sizeof buf, "%d,%ld,%.9g\n", e.epoch, e.step, e.loss);
    out << buf;
  }
  return out.str();
}

ComponentMask full_mask() {
  return {Component::Output, Component::Norm, Component::Encoder, Component::Decoder,
          Component::Embedding};
}

ComponentMask parse_mask(const std::string& spec) {
  if (spec == "full") return full_mask();
  ComponentMask mask;
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, '+')) {
    auto c = component_from_name(part);
    if (!c) throw UsageError("unknown component '" + part + "' in mask '" + spec + "'");
    mask.insert(*c);
  }
  if (mask.empty()) throw EmptyMask("fine-tuning mask is empty");
  return mask;
}

std::string mask_name(const ComponentMask& mask) {
  if (mask == full_mask()) return "full";
  std::string out;
  for (Component c : {Component::Output, Component::Norm, Component::Encoder,
                      Component::Decoder, Component::Embedding}) {
    if (!mask.contains(c)) continue;
    if (!out.empty()) out += '+';
    out += component_name(c);
  }
  return out;
}

namespace {

TrainLog run(Transformer<float>& model, const std::vector<TrainingExample>& data,
             const std::vector<bool>& trainable, const TrainOptions& opt) {
  TrainLog log;
  if (opt.epochs <= 0) return log;
  if (data.empty()) throw UsageError("training corpus is empty");
  if (opt.batch_size < 1) throw UsageError("batch size must be >= 1");

  Rng shuffle_rng(derive_seed(opt.seed, "shuffle"));
  Rng dropout_rng(derive_seed(opt.seed, "dropout"));
  AdamState<float> state;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  std::vector<TrainingExample> batch;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double weighted = 0.0;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(data[order[i]]);
      auto lg = model.loss_and_gradients(batch, &dropout_rng);
      adam_step(model.parameters(), lg.gradients, state, opt.adam, trainable);
      ++step;
      log.steps.push_back({epoch, step, lg.loss});
      weighted += lg.loss * static_cast<double>(lg.tokens);
      tokens += lg.tokens;
    }
    const double mean = tokens ? weighted / static_cast<double>(tokens) : 0.0;
    log.epoch_loss.push_back(mean);
    if (opt.checkpoint_path) save_checkpoint(model, *opt.checkpoint_path);
    if (opt.on_epoch) opt.on_epoch(epoch, mean);
  }
  return log;
}

}  // namespace

TrainLog train(Transformer<float>& model, const std::vector<TrainingExample>& data,
               const TrainOptions& opt) {
  return run(model, data, {}, opt);
}

TrainLog fine_tune(Transformer<float>& model, const std::vector<TrainingExample>& data,
                   const ComponentMask& mask, const TrainOptions& opt) {
  if (mask.empty()) throw EmptyMask("fine-tuning mask is empty");
  std::vector<bool> trainable;
  for (const auto& t : model.parameters().tensors()) trainable.push_back(mask.contains(t.tag));
  return run(model, data, trainable, opt);
}

}  // namespace mapmatch::model
