#pragma once

#include "json.hpp"

namespace mapmatch::model {

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;   // per stack (encoder and decoder each)
  int d_ffn = 256;
  int n_classes = 2;  // |E| + 1, class 0 reserved for padding
  double dropout = 0.1;
  int max_len = 64;

  int head_width() const { return d_model / n_heads; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

}  // namespace mapmatch::model
