#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "mapmatch/model/parameters.hpp"

namespace mapmatch::model {

template <typename T>
using ConstRef = Eigen::Ref<const Mat<T>>;
template <typename T>
using MutRef = Eigen::Ref<Mat<T>>;

template <typename T>
struct AttentionResult {
  Mat<T> output;
  Mat<T> weights;  // query rows x key columns, each row sums to 1
};

/// Row-wise softmax of `scores`; columns flagged in `key_pad` get weight 0.
template <typename T>
Mat<T> masked_softmax(const Mat<T>& scores, std::span<const std::uint8_t> key_pad) {
  Mat<T> out(scores.rows(), scores.cols());
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    T peak = -std::numeric_limits<T>::infinity();
    for (Eigen::Index c = 0; c < scores.cols(); ++c)
      if (key_pad.empty() || !key_pad[static_cast<std::size_t>(c)]) peak = std::max(peak, scores(r, c));
    T total = 0;
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
      const bool masked = !key_pad.empty() && key_pad[static_cast<std::size_t>(c)];
      const T e = masked ? T(0) : std::exp(scores(r, c) - peak);
      out(r, c) = e;
      total += e;
    }
    if (total > T(0)) out.row(r) /= total;
  }
  return out;
}

/// Scaled dot-product attention: A = softmax(Q K^T / sqrt(width)), out = A V.
template <typename T>
AttentionResult<T> attention(const ConstRef<T>& q, const ConstRef<T>& k, const ConstRef<T>& v,
                             std::span<const std::uint8_t> key_pad = {}) {
  const T scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
  Mat<T> scores = (q * k.transpose()) * scale;
  AttentionResult<T> r;
  r.weights = masked_softmax<T>(scores, key_pad);
  r.output = r.weights * v;
  return r;
}

/// Accumulates gradients of attention() given its weights and d(output).
template <typename T>
void attention_backward(const ConstRef<T>& q, const ConstRef<T>& k, const ConstRef<T>& v,
                        const Mat<T>& weights, const ConstRef<T>& d_out, MutRef<T> d_q,
                        MutRef<T> d_k, MutRef<T> d_v) {
  const T scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
  d_v.noalias() += weights.transpose() * d_out;
  Mat<T> d_a = d_out * v.transpose();
  // Softmax Jacobian, row by row: dS = A o (dA - sum(dA o A)).
  Eigen::Matrix<T, Eigen::Dynamic, 1> dot = (d_a.cwiseProduct(weights)).rowwise().sum();
  Mat<T> d_s = weights.cwiseProduct(d_a.colwise() - dot) * scale;
  d_q.noalias() += d_s * k;
  d_k.noalias() += d_s.transpose() * q;
}

template <typename T>
struct NormCache {
  Mat<T> normalized;                         // (x - mean) / std, before gain/bias
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std;
};

inline constexpr double kNormEpsilon = 1e-5;

/// Per-row layer normalization followed by elementwise gain and bias.
template <typename T>
Mat<T> layer_norm(const ConstRef<T>& x, const RowVec<T>& gain, const RowVec<T>& bias,
                  NormCache<T>* cache = nullptr, double eps = kNormEpsilon) {
  const Eigen::Index n = x.rows();
  const T width = static_cast<T>(x.cols());
  Mat<T> normalized(n, x.cols());
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = x.row(r).sum() / width;
    const auto centered = (x.row(r).array() - mean).matrix();
    const T var = centered.squaredNorm() / width;
    inv_std(r) = T(1) / std::sqrt(var + static_cast<T>(eps));
    normalized.row(r) = centered * inv_std(r);
  }
  Mat<T> y = (normalized.array().rowwise() * gain.array()).matrix();
  y.rowwise() += bias;
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

/// Returns d(x); accumulates d(gain) and d(bias).
template <typename T>
Mat<T> layer_norm_backward(const NormCache<T>& cache, const RowVec<T>& gain, const Mat<T>& d_y,
                           Mat<T>& d_gain, Mat<T>& d_bias) {
  d_gain.row(0) += d_y.cwiseProduct(cache.normalized).colwise().sum();
  d_bias.row(0) += d_y.colwise().sum();
  const T width = static_cast<T>(d_y.cols());
  Mat<T> d_hat = (d_y.array().rowwise() * gain.array()).matrix();
  Mat<T> d_x(d_y.rows(), d_y.cols());
  for (Eigen::Index r = 0; r < d_y.rows(); ++r) {
    const T mean_d = d_hat.row(r).sum() / width;
    const T mean_dx = d_hat.row(r).dot(cache.normalized.row(r)) / width;
    d_x.row(r) = ((d_hat.row(r).array() - mean_d) -
                  cache.normalized.row(r).array() * mean_dx) *
                 cache.inv_std(r);
  }
  return d_x;
}

template <typename T>
struct FfnCache {
  Mat<T> input;
  Mat<T> hidden;  // after ReLU
};

/// Position-wise W2 * relu(W1 * x + b1) + b2, rows are positions.
template <typename T>
Mat<T> ffn(const ConstRef<T>& x, const Mat<T>& w1, const RowVec<T>& b1, const Mat<T>& w2,
           const RowVec<T>& b2, FfnCache<T>* cache = nullptr) {
  Mat<T> hidden = x * w1;
  hidden.rowwise() += b1;
  hidden = hidden.cwiseMax(T(0));
  Mat<T> y = hidden * w2;
  y.rowwise() += b2;
  if (cache) {
    cache->input = x;
    cache->hidden = std::move(hidden);
  }
  return y;
}

template <typename T>
Mat<T> ffn_backward(const FfnCache<T>& cache, const Mat<T>& w1, const Mat<T>& w2,
                    const Mat<T>& d_y, Mat<T>& d_w1, Mat<T>& d_b1, Mat<T>& d_w2,
                    Mat<T>& d_b2) {
  d_w2.noalias() += cache.hidden.transpose() * d_y;
  d_b2.row(0) += d_y.colwise().sum();
  Mat<T> d_h = d_y * w2.transpose();
  d_h = (cache.hidden.array() > T(0)).select(d_h, T(0));
  d_w1.noalias() += cache.input.transpose() * d_h;
  d_b1.row(0) += d_h.colwise().sum();
  return d_h * w1.transpose();
}

/// Weights of one multi-head attention block.
template <typename T>
struct AttentionWeights {
  const Mat<T>& wq;
  const Mat<T>& wk;
  const Mat<T>& wv;
  const Mat<T>& wo;
};

template <typename T>
struct MultiHeadResult {
  Mat<T> output;
  std::vector<Mat<T>> head_weights;
};

/// H heads over column slices of the projected inputs, concatenated and
/// projected by W^O. Single sequence; `key_pad` masks key rows.
template <typename T>
MultiHeadResult<T> multi_head_attention(const AttentionWeights<T>& w, int n_heads,
                                        const ConstRef<T>& q_in, const ConstRef<T>& k_in,
                                        const ConstRef<T>& v_in,
                                        std::span<const std::uint8_t> key_pad = {}) {
  const Mat<T> q = q_in * w.wq;
  const Mat<T> k = k_in * w.wk;
  const Mat<T> v = v_in * w.wv;
  const Eigen::Index width = q.cols() / n_heads;
  Mat<T> concat(q.rows(), q.cols());
  MultiHeadResult<T> r;
  for (int h = 0; h < n_heads; ++h) {
    const Eigen::Index c0 = h * width;
    auto head = attention<T>(q.middleCols(c0, width), k.middleCols(c0, width),
                             v.middleCols(c0, width), key_pad);
    concat.middleCols(c0, width) = head.output;
    r.head_weights.push_back(std::move(head.weights));
  }
  r.output = concat * w.wo;
  return r;
}

}  // namespace mapmatch::model
