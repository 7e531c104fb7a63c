#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "mapmatch/model/config.hpp"
#include "mapmatch/random.hpp"

namespace mapmatch::model {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// Which part of the network a tensor belongs to; fine-tuning masks select
/// tensors by this tag.
enum class Component : std::uint8_t {
  Output = 0,
  Norm = 1,
  Encoder = 2,
  Decoder = 3,
  Embedding = 4,
};

std::string_view component_name(Component c);
std::optional<Component> component_from_name(std::string_view name);

template <typename T>
struct Tensor {
  std::string name;
  Component tag = Component::Output;
  int rank = 2;  // 1 for bias/gain vectors, stored as 1 x n
  Mat<T> value;
};

struct AttentionSlots {
  std::size_t wq, wk, wv, wo;
};
struct NormSlots {
  std::size_t gain, bias;
};
struct FfnSlots {
  std::size_t w1, b1, w2, b2;
};
struct EncoderSlots {
  AttentionSlots self_attn;
  NormSlots norm1, norm2;
  FfnSlots ffn;
};
struct DecoderSlots {
  AttentionSlots self_attn, cross_attn;
  NormSlots norm1, norm2, norm3;
  FfnSlots ffn;
};

/// Tensor indices for every named weight, fixed by the config.
struct ParameterLayout {
  std::size_t spatial_w1, spatial_b1, spatial_w2, spatial_b2;
  std::size_t position, query;
  std::vector<EncoderSlots> encoder;
  std::vector<DecoderSlots> decoder;
  std::size_t out_w, out_b;
};

/// Ordered, named tensor store for all trainable weights.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  /// Allocates every tensor for `cfg`, zero-filled, and records the layout.
  explicit ParameterStore(const ModelConfig& cfg);

  /// Xavier-uniform matrices, N(0, 0.02) embedding tables, unit norm gains,
  /// zero biases.
  void initialize(std::uint64_t seed);

  const ParameterLayout& layout() const { return layout_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }
  Mat<T>& operator[](std::size_t slot) { return tensors_[slot].value; }
  const Mat<T>& operator[](std::size_t slot) const { return tensors_[slot].value; }
  std::size_t size() const { return tensors_.size(); }
  std::size_t parameter_count() const;
  std::optional<std::size_t> find(std::string_view name) const;

  /// Same tensors converted to another scalar type.
  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    out.layout_ = layout_;
    for (const auto& t : tensors_) {
      out.tensors_.push_back({t.name, t.tag, t.rank, t.value.template cast<U>()});
    }
    return out;
  }

  /// Zero-filled tensors with this store's shapes (gradient buffers).
  std::vector<Mat<T>> zeros_like() const;

 private:
  template <typename>
  friend class ParameterStore;

  std::size_t add(std::string name, Component tag, int rows, int cols, int rank);

  std::vector<Tensor<T>> tensors_;
  ParameterLayout layout_{};
};

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;

}  // namespace mapmatch::model
