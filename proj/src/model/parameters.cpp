#include "mapmatch/model/parameters.hpp"

#include <cmath>

#include "mapmatch/error.hpp"

namespace mapmatch::model {

void ModelConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
    throw ValidationError("d_model must be a positive multiple of n_heads");
  }
  if (n_layers < 1 || d_ffn < 1 || max_len < 1) {
    throw ValidationError("n_layers, d_ffn and max_len must be positive");
  }
  if (n_classes < 2) throw ValidationError("n_classes must be >= 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must lie in [0, 1)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_model", d_model}, {"n_heads", n_heads},     {"n_layers", n_layers},
          {"d_ffn", d_ffn},     {"n_classes", n_classes}, {"dropout", dropout},
          {"max_len", max_len}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_ffn = j.value("d_ffn", c.d_ffn);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.dropout = j.value("dropout", c.dropout);
  c.max_len = j.value("max_len", c.max_len);
  return c;
}

std::string_view component_name(Component c) {
  switch (c) {
    case Component::Output: return "output";
    case Component::Norm: return "norm";
    case Component::Encoder: return "encoder";
    case Component::Decoder: return "decoder";
    case Component::Embedding: return "embedding";
  }
  return "unknown";
}

std::optional<Component> component_from_name(std::string_view name) {
  for (Component c : {Component::Output, Component::Norm, Component::Encoder,
                      Component::Decoder, Component::Embedding}) {
    if (component_name(c) == name) return c;
  }
  return std::nullopt;
}

template <typename T>
std::size_t ParameterStore<T>::add(std::string name, Component tag, int rows, int cols,
                                   int rank) {
  tensors_.push_back({std::move(name), tag, rank, Mat<T>::Zero(rows, cols)});
  return tensors_.size() - 1;
}

template <typename T>
ParameterStore<T>::ParameterStore(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  const int f = cfg.d_ffn;
  auto attention = [&](const std::string& p, Component tag) {
    return AttentionSlots{add(p + ".wq", tag, d, d, 2), add(p + ".wk", tag, d, d, 2),
                          add(p + ".wv", tag, d, d, 2), add(p + ".wo", tag, d, d, 2)};
  };
  auto norm = [&](const std::string& p) {
    return NormSlots{add(p + ".gain", Component::Norm, 1, d, 1),
                     add(p + ".bias", Component::Norm, 1, d, 1)};
  };
  auto ffn = [&](const std::string& p, Component tag) {
    return FfnSlots{add(p + ".w1", tag, d, f, 2), add(p + ".b1", tag, 1, f, 1),
                    add(p + ".w2", tag, f, d, 2), add(p + ".b2", tag, 1, d, 1)};
  };

  layout_.spatial_w1 = add("embed.spatial.w1", Component::Embedding, 2, d, 2);
  layout_.spatial_b1 = add("embed.spatial.b1", Component::Embedding, 1, d, 1);
  layout_.spatial_w2 = add("embed.spatial.w2", Component::Embedding, d, d, 2);
  layout_.spatial_b2 = add("embed.spatial.b2", Component::Embedding, 1, d, 1);
  layout_.position = add("embed.position", Component::Embedding, cfg.max_len, d, 2);
  layout_.query = add("embed.query", Component::Embedding, cfg.max_len, d, 2);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    EncoderSlots s{};
    s.self_attn = attention(p + ".self_attn", Component::Encoder);
    s.norm1 = norm(p + ".norm1");
    s.ffn = ffn(p + ".ffn", Component::Encoder);
    s.norm2 = norm(p + ".norm2");
    layout_.encoder.push_back(s);
  }
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    DecoderSlots s{};
    s.self_attn = attention(p + ".self_attn", Component::Decoder);
    s.norm1 = norm(p + ".norm1");
    s.cross_attn = attention(p + ".cross_attn", Component::Decoder);
    s.norm2 = norm(p + ".norm2");
    s.ffn = ffn(p + ".ffn", Component::Decoder);
    s.norm3 = norm(p + ".norm3");
    layout_.decoder.push_back(s);
  }
  layout_.out_w = add("output.w", Component::Output, d, cfg.n_classes, 2);
  layout_.out_b = add("output.b", Component::Output, 1, cfg.n_classes, 1);
}

template <typename T>
void ParameterStore<T>::initialize(std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> embed(0.0, 0.02);
  for (Tensor<T>& t : tensors_) {
    const bool table = t.name == "embed.position" || t.name == "embed.query";
    if (table) {
      for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = static_cast<T>(embed(rng));
    } else if (t.rank == 2) {
      const double limit = std::sqrt(6.0 / static_cast<double>(t.value.rows() + t.value.cols()));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = static_cast<T>(u(rng));
    } else if (t.name.ends_with(".gain")) {
      t.value.setOnes();
    } else {
      t.value.setZero();
    }
  }
}

template <typename T>
std::size_t ParameterStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
  return n;
}

template <typename T>
std::optional<std::size_t> ParameterStore<T>::find(std::string_view name) const {
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    if (tensors_[i].name == name) return i;
  return std::nullopt;
}

template <typename T>
std::vector<Mat<T>> ParameterStore<T>::zeros_like() const {
  std::vector<Mat<T>> out;
  out.reserve(tensors_.size());
  for (const auto& t : tensors_) out.push_back(Mat<T>::Zero(t.value.rows(), t.value.cols()));
  return out;
}

template class ParameterStore<float>;
template class ParameterStore<double>;

}  // namespace mapmatch::model
