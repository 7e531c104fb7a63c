#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "mapmatch/error.hpp"
#include "mapmatch/metrics.hpp"
#include "mapmatch/model/checkpoint.hpp"
#include "mapmatch/model/inference.hpp"
#include "mapmatch/model/optimizer.hpp"
#include "mapmatch/model/train.hpp"
#include "mapmatch/trajgen.hpp"
#include "model_fixtures.hpp"

using namespace mapmatch;
using namespace mapmatch::model;

TEST_SUITE("model") {

TEST_CASE("config validation") {
  ModelConfig c;
  c.validate();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.n_classes = 1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  CHECK(ModelConfig::from_json(c.to_json()) == c);
}

TEST_CASE("every tensor carries one tag and the expected shape") {
  ModelConfig cfg = fixtures::tiny_config();
  ParameterStore<float> p(cfg);
  CHECK(p.find("embed.spatial.w1"));
  CHECK(p[*p.find("embed.spatial.w1")].rows() == 2);
  CHECK(p[*p.find("embed.position")].rows() == cfg.max_len);
  CHECK(p[*p.find("output.w")].cols() == cfg.n_classes);
  CHECK(p.tensors()[*p.find("output.w")].tag == Component::Output);
  CHECK(p.tensors()[*p.find("encoder.0.norm1.gain")].tag == Component::Norm);
  CHECK(p.tensors()[*p.find("decoder.0.cross_attn.wq")].tag == Component::Decoder);
  CHECK(p.tensors()[*p.find("encoder.0.ffn.w1")].tag == Component::Encoder);
  CHECK(p.tensors()[*p.find("embed.query")].tag == Component::Embedding);
  std::set<std::string> names;
  for (const auto& t : p.tensors()) CHECK(names.insert(t.name).second);
}

TEST_CASE("forward shapes and determinism") {
  ModelConfig cfg = fixtures::tiny_config();
  Transformer<float> m(cfg, 3);
  std::mt19937_64 rng(1);
  auto batch = fixtures::random_inputs(rng, 4, 2, cfg.max_len);
  auto a = m.forward(batch, true);
  auto b = m.forward(batch);
  std::size_t rows = 0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    CHECK(a.sequence_logits(s).rows() == static_cast<Eigen::Index>(batch[s].size()));
    CHECK(a.sequence_logits(s).cols() == cfg.n_classes);
    rows += batch[s].size();
  }
  CHECK(a.logits.rows() == static_cast<Eigen::Index>(rows));
  CHECK(a.logits == b.logits);
  CHECK(b.records.empty());
  // encoder self + decoder self + decoder cross, per layer and head.
  CHECK(a.records[0].size() == static_cast<std::size_t>(3 * cfg.n_layers * cfg.n_heads));
}

TEST_CASE("too long input") {
  ModelConfig cfg = fixtures::tiny_config();
  Transformer<float> m(cfg, 1);
  NormalizedTrajectory t;
  t.values.assign(cfg.max_len + 1, {0.5, 0.5});
  t.pad_mask.assign(cfg.max_len + 1, 0);
  CHECK_THROWS_AS(m.forward(std::span(&t, 1)), TooLong);
}

TEST_CASE("attention records are row-stochastic over real keys") {
  ModelConfig cfg = fixtures::tiny_config();
  Transformer<double> m(cfg, 5);
  std::mt19937_64 rng(2);
  auto batch = fixtures::random_inputs(rng, 20, 3, cfg.max_len, true);
  auto out = m.forward(batch, true);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    for (const auto& rec : out.records[s]) {
      for (Eigen::Index q = 0; q < rec.weights.rows(); ++q) {
        double sum = 0;
        for (Eigen::Index k = 0; k < rec.weights.cols(); ++k) {
          CHECK(rec.weights(q, k) >= 0.0);
          if (batch[s].pad_mask[k]) CHECK(rec.weights(q, k) == 0.0);
          sum += rec.weights(q, k);
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("padding neutrality") {
  ModelConfig cfg = fixtures::tiny_config();
  Transformer<float> m(cfg, 8);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    auto one = fixtures::random_inputs(rng, 1, 3, cfg.max_len - 6);
    NormalizedTrajectory padded = one[0];
    padded.pad(1 + rng() % 6);
    auto a = m.forward(one).logits;
    auto b = m.forward(std::span(&padded, 1)).logits;
    CHECK((a - b.topRows(a.rows())).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("batch composition does not change a sequence's logits") {
  ModelConfig cfg = fixtures::tiny_config();
  Transformer<double> m(cfg, 8);
  std::mt19937_64 rng(13);
  auto batch = fixtures::random_inputs(rng, 5, 3, cfg.max_len);
  auto all = m.forward(batch);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    auto alone = m.forward(std::span(&batch[s], 1)).logits;
    CHECK((alone - all.sequence_logits(s)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("position enters only through the position table") {
  ModelConfig cfg = fixtures::tiny_config();
  Transformer<double> m(cfg, 9);
  std::mt19937_64 rng(4);
  auto batch = fixtures::random_inputs(rng, 10, 4, cfg.max_len);

  auto permuted_logits = [&](const NormalizedTrajectory& t, std::vector<std::size_t> perm) {
    NormalizedTrajectory p = t;
    for (std::size_t i = 0; i < perm.size(); ++i) p.values[i] = t.values[perm[i]];
    return m.forward(std::span(&p, 1)).logits;
  };
  auto rows_sorted = [](const Mat<double>& l) {
    std::vector<std::vector<double>> rows;
    for (Eigen::Index r = 0; r < l.rows(); ++r) rows.emplace_back(l.row(r).data(), l.row(r).data() + l.cols());
    std::sort(rows.begin(), rows.end());
    return rows;
  };

  double changed = 0;
  for (const auto& t : batch) {
    std::vector<std::size_t> perm(t.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    changed = std::max(changed, (m.forward(std::span(&t, 1)).logits - permuted_logits(t, perm))
                                    .cwiseAbs()
                                    .maxCoeff());
  }
  CHECK(changed > 1e-4);

  m.parameters()[m.parameters().layout().position].setZero();
  for (const auto& t : batch) {
    std::vector<std::size_t> perm(t.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat<double> base = m.forward(std::span(&t, 1)).logits;
    Mat<double> perm_l = permuted_logits(t, perm);
    auto a = rows_sorted(base), b = rows_sorted(perm_l);
    for (std::size_t r = 0; r < a.size(); ++r)
      for (std::size_t c = 0; c < a[r].size(); ++c) CHECK(std::abs(a[r][c] - b[r][c]) < 1e-6);
  }
}

TEST_CASE("loss values") {
  ModelConfig cfg = fixtures::tiny_config();
  std::mt19937_64 rng(5);
  auto batch = fixtures::random_examples(rng, 3, cfg);
  SUBCASE("uniform logits give ln C") {
    Transformer<double> m(cfg, 1);
    m.parameters()[m.parameters().layout().out_w].setZero();
    m.parameters()[m.parameters().layout().out_b].setZero();
    CHECK(m.loss_and_gradients(batch).loss == doctest::Approx(std::log(cfg.n_classes)).epsilon(1e-12));
  }
  SUBCASE("large correct margin drives the loss to zero") {
    // One example, every position labeled class 1, output bias strongly favoring it.
    Transformer<double> m(cfg, 1);
    auto ex = batch[0];
    for (std::size_t i = 0; i < ex.labels.size(); ++i) ex.labels[i] = ex.input.pad_mask[i] ? 0 : 1;
    m.parameters()[m.parameters().layout().out_w].setZero();
    auto& b = m.parameters()[m.parameters().layout().out_b];
    b.setZero();
    b(0, 1) = 60.0;
    CHECK(m.loss_and_gradients(std::span(&ex, 1)).loss < 1e-20);
  }
  SUBCASE("labels are checked") {
    Transformer<double> m(cfg, 1);
    auto ex = batch[0];
    ex.labels[0] = cfg.n_classes;
    CHECK_THROWS_AS(m.loss_and_gradients(std::span(&ex, 1)), LabelOutOfRange);
    ex.labels[0] = 0;
    CHECK_THROWS_AS(m.loss_and_gradients(std::span(&ex, 1)), LabelOutOfRange);
  }
  SUBCASE("padded positions carry no gradient signal") {
    Transformer<double> m(cfg, 2);
    auto ex = batch[0];
    auto padded = ex;
    padded.input.pad(3);
    padded.labels.insert(padded.labels.end(), 3, 0);
    auto a = m.loss_and_gradients(std::span(&ex, 1));
    auto b = m.loss_and_gradients(std::span(&padded, 1));
    CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-12));
    CHECK(a.tokens == b.tokens);
    for (std::size_t t = 0; t < a.gradients.size(); ++t) {
      if (m.parameters().tensors()[t].name == "embed.position" ||
          m.parameters().tensors()[t].name == "embed.query") {
        // Rows past the real length must stay zero.
        CHECK(b.gradients[t].bottomRows(b.gradients[t].rows() - ex.input.size())
                  .cwiseAbs()
                  .maxCoeff() == 0.0);
        continue;
      }
      CHECK((a.gradients[t] - b.gradients[t]).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("gradients match central differences") {
  for (std::uint64_t seed = 1; seed <= 2; ++seed) {
    auto r = fixtures::gradient_check(seed);
    INFO("seed " << seed << " worst " << r.worst << " at " << r.where);
    CHECK(r.worst < 1e-4);
    CHECK(r.checked > 1000);
  }
}

TEST_CASE("adam") {
  AdamOptions opt;
  SUBCASE("zero gradient leaves parameters") {
    std::vector<double> p{1.0, -2.0}, g{0, 0}, m{0, 0}, v{0, 0};
    adam_update<double>(p, g, m, v, 1, opt);
    CHECK(p == std::vector<double>{1.0, -2.0});
  }
  SUBCASE("first step moves by lr against the gradient sign") {
    std::vector<double> p{0, 0, 0}, g{3.0, -0.01, 250.0}, m(3, 0), v(3, 0);
    adam_update<double>(p, g, m, v, 1, opt);
    CHECK(p[0] == doctest::Approx(-opt.lr).epsilon(1e-6));
    CHECK(p[1] == doctest::Approx(opt.lr).epsilon(1e-5));
    CHECK(p[2] == doctest::Approx(-opt.lr).epsilon(1e-6));
  }
  SUBCASE("scalar quadratic converges") {
    AdamOptions fast;
    fast.lr = 0.1;
    std::vector<double> x{5.0}, m{0}, v{0};
    for (long step = 1; step <= 200; ++step) {
      std::vector<double> g{2.0 * (x[0] - 1.5)};
      adam_update<double>(x, g, m, v, step, fast);
    }
    CHECK(std::abs(x[0] - 1.5) < 1e-2);
  }
  SUBCASE("frozen tensors are untouched") {
    ParameterStore<float> p(fixtures::tiny_config());
    p.initialize(3);
    auto before = p;
    auto grads = p.zeros_like();
    for (auto& g : grads) g.setConstant(1.0f);
    AdamState<float> st;
    std::vector<bool> trainable(p.size(), false);
    trainable[0] = true;
    adam_step(p, grads, st, opt, trainable);
    CHECK(p[0] != before[0]);
    for (std::size_t i = 1; i < p.size(); ++i) CHECK(p[i] == before[i]);
  }
}

TEST_CASE("training") {
  RoadNetwork net = make_grid_network(3, 3, 150);
  GenerationConfig g;
  g.route_length = 3;
  g.sigma_m = 5;
  auto corpus = generate_corpus(net, g, 50);
  auto data = make_examples(corpus, net.bounding_box());
  ModelConfig cfg = config_for_network(net, fixtures::small_config());

  SUBCASE("zero epochs changes nothing") {
    Transformer<float> m(cfg, 4);
    auto before = m.parameters();
    TrainOptions o;
    o.epochs = 0;
    train(m, data, o);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(m.parameters()[i] == before[i]);
    fine_tune(m, data, full_mask(), o);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(m.parameters()[i] == before[i]);
  }
  SUBCASE("overfit loss log is non-increasing within 5%") {
    Transformer<float> m(cfg, 4);
    TrainOptions o;
    o.epochs = 25;
    o.batch_size = 10;
    o.adam.lr = 3e-3;
    TrainLog log = train(m, data, o);
    REQUIRE(log.epoch_loss.size() == 25);
    for (std::size_t e = 1; e < log.epoch_loss.size(); ++e)
      CHECK(log.epoch_loss[e] <= 1.05 * log.epoch_loss[e - 1]);
    CHECK(log.epoch_loss.back() < 0.5 * log.epoch_loss.front());
    CHECK(log.steps.size() == 125);
    CHECK(log.to_csv().rfind("epoch,step,loss\n", 0) == 0);
  }
  SUBCASE("same seed, same parameters") {
    TrainOptions o;
    o.epochs = 2;
    o.seed = 9;
    Transformer<float> a(cfg, 4), b(cfg, 4);
    train(a, data, o);
    train(b, data, o);
    for (std::size_t i = 0; i < a.parameters().size(); ++i) CHECK(a.parameters()[i] == b.parameters()[i]);
    Transformer<float> c(cfg, 4);
    o.seed = 10;
    train(c, data, o);
    bool differs = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) differs = differs || a.parameters()[i] != c.parameters()[i];
    CHECK(differs);
  }
  SUBCASE("empty corpus") {
    Transformer<float> m(cfg, 4);
    CHECK_THROWS_AS(train(m, {}, TrainOptions{}), UsageError);
  }
}

TEST_CASE("fine-tuning masks") {
  CHECK(parse_mask("full") == full_mask());
  CHECK(parse_mask("output+norm") == ComponentMask{Component::Output, Component::Norm});
  CHECK(mask_name(parse_mask("norm+output")) == "output+norm");
  CHECK_THROWS_AS(parse_mask(""), EmptyMask);
  CHECK_THROWS_AS(parse_mask("wheels"), UsageError);

  RoadNetwork net = make_grid_network(3, 3, 150);
  GenerationConfig g;
  g.route_length = 3;
  auto data = make_examples(generate_corpus(net, g, 30), net.bounding_box());
  ModelConfig cfg = config_for_network(net, fixtures::small_config());
  TrainOptions o;
  o.epochs = 2;
  o.batch_size = 8;

  Transformer<float> base(cfg, 6);
  CHECK_THROWS_AS(fine_tune(base, data, {}, o), EmptyMask);

  for (const char* spec : {"output", "output+norm", "output+encoder", "output+decoder",
                           "output+encoder+decoder", "full"}) {
    ComponentMask mask = parse_mask(spec);
    Transformer<float> m = base;
    fine_tune(m, data, mask, o);
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
      const auto& t = m.parameters().tensors()[i];
      const bool same = t.value == base.parameters()[i];
      INFO(spec << " " << t.name);
      if (mask.contains(t.tag)) {
        CHECK_FALSE(same);
      } else {
        // Bit-identical, not merely close.
        CHECK(std::memcmp(t.value.data(), base.parameters()[i].data(),
                          sizeof(float) * static_cast<std::size_t>(t.value.size())) == 0);
      }
    }
  }
}

TEST_CASE("checkpoint round trip and rejection") {
  ModelConfig cfg = fixtures::small_config();
  cfg.n_classes = 9;
  Transformer<float> m(cfg, 12);
  std::string bytes = encode_checkpoint(m);
  Transformer<float> back = decode_checkpoint(bytes);
  CHECK(back.config() == cfg);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) CHECK(back.parameters()[i] == m.parameters()[i]);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(bytes.substr(0, 4) == "MMTC");

  auto dir = testutil::temp_dir("ckpt");
  save_checkpoint(m, dir / "m.ckpt");
  CHECK(encode_checkpoint(load_checkpoint(dir / "m.ckpt")) == bytes);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), VersionError);
  std::string bad_version = bytes;
  bad_version[4] = 2;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), VersionError);
  std::string bad_header = bytes;
  bad_header[16] = '#';
  CHECK_THROWS_AS(decode_checkpoint(bad_header), VersionError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), VersionError);
  CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), VersionError);

  ModelConfig other = cfg;
  other.d_ffn = 32;
  CHECK_THROWS_AS(Transformer<float>(other, m.parameters()), VersionError);
}

TEST_CASE("normalize") {
  BoundingBox box{37.0, 37.01, 127.0, 127.02};
  GpsTrajectory t;
  t.points = {{127.0, 37.0}, {127.01, 37.005}, {127.0, 36.99}};
  auto n = normalize(t, box);
  CHECK(n.values[0] == std::array<double, 2>{0.0, 0.0});
  CHECK(n.values[1][0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(n.values[1][1] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(n.values[2][0] == 0.0);
  CHECK(n.clamped == 1);
  BoundingBox flat{37.0, 37.0, 127.0, 127.02};
  CHECK_THROWS_AS(normalize(t, flat), DegenerateBounds);
}

TEST_CASE("predict contract") {
  RoadNetwork net = make_grid_network(3, 3, 150);
  ModelConfig cfg = config_for_network(net, fixtures::small_config());
  Transformer<float> m(cfg, 2);
  GenerationConfig g;
  g.route_length = 3;
  for (const auto& t : generate_corpus(net, g, 20)) {
    auto r = predict(m, t, net.bounding_box(), true);
    CHECK(r.route.size() == t.size());
    for (EdgeId e : r.route) CHECK(net.has_edge(e));
    for (Eigen::Index i = 0; i < r.probabilities.rows(); ++i)
      CHECK(std::abs(r.probabilities.row(i).sum() - 1.0) < 1e-6);
    CHECK_FALSE(r.records.empty());
  }
  auto all = predict_corpus(m, generate_corpus(net, g, 20), net.bounding_box(), true, 7);
  CHECK(all.size() == 20);
  GpsTrajectory huge;
  huge.points.assign(cfg.max_len + 1, net.point_along(0, 1));
  CHECK_THROWS_AS(predict(m, huge, net.bounding_box()), TooLong);
}

TEST_CASE("converged toy model on noiseless input") {
  RoadNetwork net = make_grid_network(3, 3, 150);
  GenerationConfig g;
  g.route_length = 3;
  g.sigma_m = 0;
  auto train_set = generate_corpus(net, g, 1500);
  g.seed = 99;
  auto test_set = generate_corpus(net, g, 200);
  Transformer<float> m(config_for_network(net, fixtures::small_config()), 1);
  TrainOptions o;
  o.epochs = 12;
  o.adam.lr = 2e-3;
  train(m, make_examples(train_set, net.bounding_box()), o);
  auto preds = predict_corpus(m, test_set, net.bounding_box());
  std::vector<std::pair<PointRoute, PointRoute>> pairs;
  for (std::size_t i = 0; i < test_set.size(); ++i) pairs.push_back({preds[i].route, *test_set[i].truth});
  const double ahd = evaluate_corpus(pairs).ahd_point;
  MESSAGE("toy point AHD " << ahd);
  CHECK(ahd >= 0.95);
}

TEST_CASE("attention ranges") {
  AttentionRecord one_hot{AttentionStage::DecoderCross, 0, 0, Mat<double>(1, 4)};
  one_hot.weights << 0, 1, 0, 0;
  auto r = attention_ranges(std::span(&one_hot, 1));
  REQUIRE(r.intervals.size() == 1);
  CHECK(r.intervals[0] == Interval{1, 1});

  AttentionRecord uniform{AttentionStage::DecoderCross, 0, 0, Mat<double>::Constant(3, 5, 0.2)};
  auto u = attention_ranges(std::span(&uniform, 1));
  for (const auto& iv : u.intervals) CHECK(iv == Interval{0, 4});
  CHECK(u.threshold == doctest::Approx(std::log(0.2)).epsilon(1e-12));

  // Threshold is the mean of (mean, median) of the log weights.
  AttentionRecord mixed{AttentionStage::DecoderCross, 0, 0, Mat<double>(2, 3)};
  mixed.weights << 0.7, 0.2, 0.1, 0.1, 0.3, 0.6;
  auto x = attention_ranges(std::span(&mixed, 1));
  std::vector<double> logs{std::log(0.7), std::log(0.2), std::log(0.1),
                           std::log(0.1), std::log(0.3), std::log(0.6)};
  double mean = std::accumulate(logs.begin(), logs.end(), 0.0) / 6;
  std::sort(logs.begin(), logs.end());
  double median = 0.5 * (logs[2] + logs[3]);
  CHECK(x.threshold == doctest::Approx(0.5 * (mean + median)).epsilon(1e-12));

  // Heads and layers are averaged; encoder records are ignored.
  AttentionRecord a{AttentionStage::DecoderCross, 0, 0, Mat<double>(1, 2)};
  AttentionRecord b{AttentionStage::DecoderCross, 1, 1, Mat<double>(1, 2)};
  AttentionRecord enc{AttentionStage::EncoderSelf, 0, 0, Mat<double>(1, 2)};
  a.weights << 1, 0;
  b.weights << 0, 1;
  enc.weights << 1, 0;
  std::vector<AttentionRecord> recs{a, b, enc};
  auto avg = attention_ranges(recs);
  CHECK(avg.log_weights(0, 0) == doctest::Approx(std::log(0.5)).epsilon(1e-12));

  std::vector<AttentionRecord> none{enc};
  CHECK_THROWS_AS(attention_ranges(none), NoCapture);
}

}  // TEST_SUITE
