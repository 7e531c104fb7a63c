#include "mapmatch/model/transformer.hpp"

#include <algorithm>
#include <cmath>

#include "mapmatch/error.hpp"

namespace mapmatch::model {

std::size_t NormalizedTrajectory::real_length() const {
  return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), 0));
}

void NormalizedTrajectory::pad(std::size_t count) {
  values.resize(values.size() + count, {0.0, 0.0});
  pad_mask.resize(pad_mask.size() + count, 1);
}

const char* stage_name(AttentionStage s) {
  switch (s) {
    case AttentionStage::EncoderSelf: return "encoder_self";
    case AttentionStage::DecoderSelf: return "decoder_self";
    case AttentionStage::DecoderCross: return "decoder_cross";
  }
  return "unknown";
}

namespace {

template <typename T>
struct MhaCache {
  Mat<T> xq;
  Mat<T> xkv;  // empty for self-attention (keys/values come from xq)
  Mat<T> q, k, v, concat;
  std::vector<Mat<T>> weights;  // [sequence * heads + head]
};

template <typename T>
struct EncoderCache {
  MhaCache<T> attn;
  Mat<T> drop1, drop2;
  NormCache<T> norm1, norm2;
  FfnCache<T> ffn;
};

template <typename T>
struct DecoderCache {
  MhaCache<T> self_attn, cross_attn;
  Mat<T> drop1, drop2, drop3;
  NormCache<T> norm1, norm2, norm3;
  FfnCache<T> ffn;
};

struct Packing {
  std::vector<Eigen::Index> offsets, lengths;
  std::vector<std::uint8_t> pad;
  std::vector<int> position;

  std::span<const std::uint8_t> pad_of(std::size_t s) const {
    return {pad.data() + offsets[s], static_cast<std::size_t>(lengths[s])};
  }
};

template <typename T>
void apply_dropout(Mat<T>& x, Mat<T>& mask, double p, Rng* rng) {
  if (rng == nullptr || p <= 0.0) {
    mask.resize(0, 0);
    return;
  }
  std::bernoulli_distribution keep(1.0 - p);
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  mask.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? scale : T(0);
  x.array() *= mask.array();
}

template <typename T>
void dropout_backward(Mat<T>& d, const Mat<T>& mask) {
  if (mask.size() != 0) d.array() *= mask.array();
}

template <typename T>
Mat<T> mha_forward(const ParameterStore<T>& p, const AttentionSlots& s, int heads,
                   const Packing& pk, const Mat<T>& xq, const Mat<T>* xkv, MhaCache<T>& c) {
  const Mat<T>& kv = xkv ? *xkv : xq;
  c.q.noalias() = xq * p[s.wq];
  c.k.noalias() = kv * p[s.wk];
  c.v.noalias() = kv * p[s.wv];
  const Eigen::Index width = c.q.cols() / heads;
  c.concat.resize(c.q.rows(), c.q.cols());
  c.weights.resize(pk.offsets.size() * static_cast<std::size_t>(heads));
  for (std::size_t seq = 0; seq < pk.offsets.size(); ++seq) {
    const Eigen::Index r0 = pk.offsets[seq], len = pk.lengths[seq];
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * width;
      auto res = attention<T>(c.q.block(r0, c0, len, width), c.k.block(r0, c0, len, width),
                              c.v.block(r0, c0, len, width), pk.pad_of(seq));
      c.concat.block(r0, c0, len, width) = res.output;
      c.weights[seq * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)] =
          std::move(res.weights);
    }
  }
  c.xq = xq;
  if (xkv) c.xkv = *xkv;
  return c.concat * p[s.wo];
}

/// Returns d(xq); for cross-attention also accumulates into *d_xkv.
template <typename T>
Mat<T> mha_backward(const ParameterStore<T>& p, const AttentionSlots& s, int heads,
                    const Packing& pk, const MhaCache<T>& c, const Mat<T>& d_out,
                    std::vector<Mat<T>>& g, Mat<T>* d_xkv) {
  g[s.wo].noalias() += c.concat.transpose() * d_out;
  const Mat<T> d_concat = d_out * p[s.wo].transpose();
  Mat<T> dq = Mat<T>::Zero(c.q.rows(), c.q.cols());
  Mat<T> dk = Mat<T>::Zero(c.k.rows(), c.k.cols());
  Mat<T> dv = Mat<T>::Zero(c.v.rows(), c.v.cols());
  const Eigen::Index width = c.q.cols() / heads;
  for (std::size_t seq = 0; seq < pk.offsets.size(); ++seq) {
    const Eigen::Index r0 = pk.offsets[seq], len = pk.lengths[seq];
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * width;
      auto dqb = dq.block(r0, c0, len, width);
      auto dkb = dk.block(r0, c0, len, width);
      auto dvb = dv.block(r0, c0, len, width);
      attention_backward<T>(c.q.block(r0, c0, len, width), c.k.block(r0, c0, len, width),
                            c.v.block(r0, c0, len, width),
                            c.weights[seq * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)],
                            d_concat.block(r0, c0, len, width), dqb, dkb, dvb);
    }
  }
  const Mat<T>& kv = c.xkv.size() != 0 ? c.xkv : c.xq;
  g[s.wq].noalias() += c.xq.transpose() * dq;
  g[s.wk].noalias() += kv.transpose() * dk;
  g[s.wv].noalias() += kv.transpose() * dv;
  Mat<T> d_xq = dq * p[s.wq].transpose();
  Mat<T> d_kv = dk * p[s.wk].transpose();
  d_kv.noalias() += dv * p[s.wv].transpose();
  if (d_xkv) {
    *d_xkv += d_kv;
  } else {
    d_xq += d_kv;
  }
  return d_xq;
}

template <typename T>
RowVec<T> row_of(const Mat<T>& m) {
  return m.row(0);
}

}  // namespace

template <typename T>
struct Transformer<T>::Pass {
  Packing pk;
  Mat<T> input;           // rows x 2
  Mat<T> spatial_hidden;  // after ReLU
  Mat<T> embed_drop, query_drop;
  Mat<T> enc_in, dec_in;
  std::vector<EncoderCache<T>> enc;
  std::vector<DecoderCache<T>> dec;
  Mat<T> enc_out, dec_out;
  Mat<T> logits;
};

template <typename T>
Transformer<T>::Transformer(ModelConfig cfg) : cfg_(cfg), params_(cfg) {}

template <typename T>
Transformer<T>::Transformer(ModelConfig cfg, std::uint64_t init_seed)
    : cfg_(cfg), params_(cfg) {
  params_.initialize(init_seed);
}

template <typename T>
Transformer<T>::Transformer(ModelConfig cfg, ParameterStore<T> params)
    : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  ParameterStore<T> expected(cfg_);
  if (expected.size() != params_.size()) {
    throw VersionError("parameter set does not match the model config");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& a = expected.tensors()[i];
    const auto& b = params_.tensors()[i];
    if (a.name != b.name || a.tag != b.tag || a.value.rows() != b.value.rows() ||
        a.value.cols() != b.value.cols()) {
      throw VersionError("tensor " + b.name + " does not match the model config");
    }
  }
}

template <typename T>
void Transformer<T>::run_forward(Pass& ps, Rng* rng) const {
  const auto& p = params_;
  const auto& lay = p.layout();
  const Packing& pk = ps.pk;
  const Eigen::Index rows = ps.input.rows();
  const double rate = cfg_.dropout;

  // Spatial lift 2 -> d -> d plus the learned position table.
  ps.spatial_hidden.noalias() = ps.input * p[lay.spatial_w1];
  ps.spatial_hidden.rowwise() += row_of(p[lay.spatial_b1]);
  ps.spatial_hidden = ps.spatial_hidden.cwiseMax(T(0));
  ps.enc_in.noalias() = ps.spatial_hidden * p[lay.spatial_w2];
  ps.enc_in.rowwise() += row_of(p[lay.spatial_b2]);
  ps.dec_in.resize(rows, cfg_.d_model);
  for (Eigen::Index r = 0; r < rows; ++r) {
    ps.enc_in.row(r) += p[lay.position].row(pk.position[static_cast<std::size_t>(r)]);
    ps.dec_in.row(r) = p[lay.query].row(pk.position[static_cast<std::size_t>(r)]);
  }
  apply_dropout(ps.enc_in, ps.embed_drop, rate, rng);
  apply_dropout(ps.dec_in, ps.query_drop, rate, rng);

  Mat<T> x = ps.enc_in;
  ps.enc.resize(lay.encoder.size());
  for (std::size_t l = 0; l < lay.encoder.size(); ++l) {
    const EncoderSlots& s = lay.encoder[l];
    EncoderCache<T>& c = ps.enc[l];
    Mat<T> a = mha_forward<T>(p, s.self_attn, cfg_.n_heads, pk, x, nullptr, c.attn);
    apply_dropout(a, c.drop1, rate, rng);
    Mat<T> h1 = layer_norm<T>(x + a, row_of(p[s.norm1.gain]), row_of(p[s.norm1.bias]), &c.norm1);
    Mat<T> f = ffn<T>(h1, p[s.ffn.w1], row_of(p[s.ffn.b1]), p[s.ffn.w2], row_of(p[s.ffn.b2]), &c.ffn);
    apply_dropout(f, c.drop2, rate, rng);
    x = layer_norm<T>(h1 + f, row_of(p[s.norm2.gain]), row_of(p[s.norm2.bias]), &c.norm2);
  }
  ps.enc_out = std::move(x);

  Mat<T> y = ps.dec_in;
  ps.dec.resize(lay.decoder.size());
  for (std::size_t l = 0; l < lay.decoder.size(); ++l) {
    const DecoderSlots& s = lay.decoder[l];
    DecoderCache<T>& c = ps.dec[l];
    Mat<T> a = mha_forward<T>(p, s.self_attn, cfg_.n_heads, pk, y, nullptr, c.self_attn);
    apply_dropout(a, c.drop1, rate, rng);
    Mat<T> h1 = layer_norm<T>(y + a, row_of(p[s.norm1.gain]), row_of(p[s.norm1.bias]), &c.norm1);
    Mat<T> b = mha_forward<T>(p, s.cross_attn, cfg_.n_heads, pk, h1, &ps.enc_out, c.cross_attn);
    apply_dropout(b, c.drop2, rate, rng);
    Mat<T> h2 = layer_norm<T>(h1 + b, row_of(p[s.norm2.gain]), row_of(p[s.norm2.bias]), &c.norm2);
    Mat<T> f = ffn<T>(h2, p[s.ffn.w1], row_of(p[s.ffn.b1]), p[s.ffn.w2], row_of(p[s.ffn.b2]), &c.ffn);
    apply_dropout(f, c.drop3, rate, rng);
    y = layer_norm<T>(h2 + f, row_of(p[s.norm3.gain]), row_of(p[s.norm3.bias]), &c.norm3);
  }
  ps.dec_out = std::move(y);

  ps.logits.noalias() = ps.dec_out * p[lay.out_w];
  ps.logits.rowwise() += row_of(p[lay.out_b]);
}

namespace {

template <typename T>
Packing pack(std::span<const NormalizedTrajectory> batch, int max_len, Mat<T>& input) {
  Packing pk;
  Eigen::Index rows = 0;
  for (const auto& seq : batch) {
    if (seq.size() > static_cast<std::size_t>(max_len)) {
      throw TooLong("sequence of length " + std::to_string(seq.size()) +
                    " exceeds max_len " + std::to_string(max_len));
    }
    if (seq.pad_mask.size() != seq.values.size()) {
      throw ValidationError("pad mask length differs from sequence length");
    }
    pk.offsets.push_back(rows);
    pk.lengths.push_back(static_cast<Eigen::Index>(seq.size()));
    rows += static_cast<Eigen::Index>(seq.size());
  }
  input.resize(rows, 2);
  pk.pad.reserve(static_cast<std::size_t>(rows));
  pk.position.reserve(static_cast<std::size_t>(rows));
  Eigen::Index r = 0;
  for (const auto& seq : batch) {
    for (std::size_t i = 0; i < seq.size(); ++i, ++r) {
      input(r, 0) = static_cast<T>(seq.values[i][0]);
      input(r, 1) = static_cast<T>(seq.values[i][1]);
      pk.pad.push_back(seq.pad_mask[i] ? 1 : 0);
      pk.position.push_back(static_cast<int>(i));
    }
  }
  return pk;
}

}  // namespace

template <typename T>
ForwardOutput<T> Transformer<T>::forward(std::span<const NormalizedTrajectory> batch,
                                         bool capture) const {
  Pass ps;
  ps.pk = pack<T>(batch, cfg_.max_len, ps.input);
  run_forward(ps, nullptr);

  ForwardOutput<T> out;
  out.logits = std::move(ps.logits);
  out.offsets = ps.pk.offsets;
  if (capture) {
    const auto heads = static_cast<std::size_t>(cfg_.n_heads);
    out.records.resize(batch.size());
    auto collect = [&](std::size_t seq, AttentionStage stage, int layer, const MhaCache<T>& c) {
      for (std::size_t h = 0; h < heads; ++h) {
        out.records[seq].push_back(
            {stage, layer, static_cast<int>(h), c.weights[seq * heads + h].template cast<double>()});
      }
    };
    for (std::size_t seq = 0; seq < batch.size(); ++seq) {
      for (std::size_t l = 0; l < ps.enc.size(); ++l)
        collect(seq, AttentionStage::EncoderSelf, static_cast<int>(l), ps.enc[l].attn);
      for (std::size_t l = 0; l < ps.dec.size(); ++l) {
        collect(seq, AttentionStage::DecoderSelf, static_cast<int>(l), ps.dec[l].self_attn);
        collect(seq, AttentionStage::DecoderCross, static_cast<int>(l), ps.dec[l].cross_attn);
      }
    }
  }
  return out;
}

template <typename T>
LossAndGradients<T> Transformer<T>::loss_and_gradients(std::span<const TrainingExample> batch,
                                                       Rng* dropout_rng) const {
  std::vector<NormalizedTrajectory> inputs;
  inputs.reserve(batch.size());
  for (const auto& ex : batch) {
    if (ex.labels.size() != ex.input.size()) {
      throw LabelOutOfRange("label count differs from sequence length");
    }
    for (std::size_t i = 0; i < ex.labels.size(); ++i) {
      const int y = ex.labels[i];
      const bool padded = ex.input.pad_mask[i] != 0;
      if (padded ? y != 0 : (y < 1 || y >= cfg_.n_classes)) {
        throw LabelOutOfRange("label " + std::to_string(y) + " invalid at position " +
                              std::to_string(i));
      }
    }
    inputs.push_back(ex.input);
  }

  Pass ps;
  ps.pk = pack<T>(inputs, cfg_.max_len, ps.input);
  run_forward(ps, dropout_rng);

  const auto& p = params_;
  const auto& lay = p.layout();
  const Packing& pk = ps.pk;
  LossAndGradients<T> out;
  out.gradients = p.zeros_like();
  auto& g = out.gradients;

  // Softmax cross-entropy; padded rows contribute nothing.
  std::vector<int> labels;
  labels.reserve(pk.pad.size());
  for (const auto& ex : batch) labels.insert(labels.end(), ex.labels.begin(), ex.labels.end());
  for (std::uint8_t pad : pk.pad) out.tokens += pad == 0;
  if (out.tokens == 0) return out;

  const T inv_tokens = T(1) / static_cast<T>(out.tokens);
  Mat<T> d_logits = Mat<T>::Zero(ps.logits.rows(), ps.logits.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < ps.logits.rows(); ++r) {
    if (pk.pad[static_cast<std::size_t>(r)]) continue;
    const auto row = ps.logits.row(r);
    const T peak = row.maxCoeff();
    const auto shifted = (row.array() - peak).eval();
    const T log_z = std::log(shifted.exp().sum());
    const int y = labels[static_cast<std::size_t>(r)];
    total -= static_cast<double>(shifted(y) - log_z);
    d_logits.row(r) = (shifted - log_z).exp().matrix() * inv_tokens;
    d_logits(r, y) -= inv_tokens;
  }
  out.loss = total / static_cast<double>(out.tokens);

  g[lay.out_w].noalias() += ps.dec_out.transpose() * d_logits;
  g[lay.out_b].row(0) += d_logits.colwise().sum();
  Mat<T> dy = d_logits * p[lay.out_w].transpose();
  Mat<T> d_enc = Mat<T>::Zero(ps.enc_out.rows(), ps.enc_out.cols());

  for (std::size_t l = lay.decoder.size(); l-- > 0;) {
    const DecoderSlots& s = lay.decoder[l];
    const DecoderCache<T>& c = ps.dec[l];
    Mat<T> d_r3 = layer_norm_backward<T>(c.norm3, row_of(p[s.norm3.gain]), dy, g[s.norm3.gain],
                                         g[s.norm3.bias]);
    Mat<T> d_f = d_r3;
    dropout_backward(d_f, c.drop3);
    Mat<T> d_h2 = d_r3 + ffn_backward<T>(c.ffn, p[s.ffn.w1], p[s.ffn.w2], d_f, g[s.ffn.w1],
                                         g[s.ffn.b1], g[s.ffn.w2], g[s.ffn.b2]);
    Mat<T> d_r2 = layer_norm_backward<T>(c.norm2, row_of(p[s.norm2.gain]), d_h2, g[s.norm2.gain],
                                         g[s.norm2.bias]);
    Mat<T> d_b = d_r2;
    dropout_backward(d_b, c.drop2);
    Mat<T> d_h1 = d_r2 + mha_backward<T>(p, s.cross_attn, cfg_.n_heads, pk, c.cross_attn, d_b, g, &d_enc);
    Mat<T> d_r1 = layer_norm_backward<T>(c.norm1, row_of(p[s.norm1.gain]), d_h1, g[s.norm1.gain],
                                         g[s.norm1.bias]);
    Mat<T> d_a = d_r1;
    dropout_backward(d_a, c.drop1);
    dy = d_r1 + mha_backward<T>(p, s.self_attn, cfg_.n_heads, pk, c.self_attn, d_a, g, nullptr);
  }
  dropout_backward(dy, ps.query_drop);
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    g[lay.query].row(pk.position[static_cast<std::size_t>(r)]) += dy.row(r);
  }

  Mat<T> dx = std::move(d_enc);
  for (std::size_t l = lay.encoder.size(); l-- > 0;) {
    const EncoderSlots& s = lay.encoder[l];
    const EncoderCache<T>& c = ps.enc[l];
    Mat<T> d_r2 = layer_norm_backward<T>(c.norm2, row_of(p[s.norm2.gain]), dx, g[s.norm2.gain],
                                         g[s.norm2.bias]);
    Mat<T> d_f = d_r2;
    dropout_backward(d_f, c.drop2);
    Mat<T> d_h1 = d_r2 + ffn_backward<T>(c.ffn, p[s.ffn.w1], p[s.ffn.w2], d_f, g[s.ffn.w1],
                                         g[s.ffn.b1], g[s.ffn.w2], g[s.ffn.b2]);
    Mat<T> d_r1 = layer_norm_backward<T>(c.norm1, row_of(p[s.norm1.gain]), d_h1, g[s.norm1.gain],
                                         g[s.norm1.bias]);
    Mat<T> d_a = d_r1;
    dropout_backward(d_a, c.drop1);
    dx = d_r1 + mha_backward<T>(p, s.self_attn, cfg_.n_heads, pk, c.attn, d_a, g, nullptr);
  }
  dropout_backward(dx, ps.embed_drop);
  for (Eigen::Index r = 0; r < dx.rows(); ++r) {
    g[lay.position].row(pk.position[static_cast<std::size_t>(r)]) += dx.row(r);
  }
  g[lay.spatial_b2].row(0) += dx.colwise().sum();
  g[lay.spatial_w2].noalias() += ps.spatial_hidden.transpose() * dx;
  Mat<T> d_hidden = dx * p[lay.spatial_w2].transpose();
  d_hidden = (ps.spatial_hidden.array() > T(0)).select(d_hidden, T(0));
  g[lay.spatial_w1].noalias() += ps.input.transpose() * d_hidden;
  g[lay.spatial_b1].row(0) += d_hidden.colwise().sum();
  return out;
}

template class Transformer<float>;
template class Transformer<double>;

}  // namespace mapmatch::model
