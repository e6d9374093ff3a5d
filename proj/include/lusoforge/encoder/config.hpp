#pragma once

#include <cstddef>
#include <string>

#include <nlohmann/json.hpp>

#include "lusoforge/core/error.hpp"

namespace lusoforge::encoder {

struct EncoderConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_size = 128;
  std::size_t num_heads = 4;
  std::size_t ffn_size = 512;
  std::size_t vocab_size = 8192;
  std::size_t max_seq_len = 128;
  std::size_t relative_window = 32;  // k: relative distances clip to [-k, k-1]
  double dropout_rate = 0.1;
  std::size_t emd_layers = 1;
  std::size_t conv_kernel_size = 3;
  std::size_t type_vocab_size = 2;
  double layer_norm_eps = 1e-7;
  double init_std = 0.02;

  std::size_t head_size() const { return hidden_size / num_heads; }

  void validate() const {
    auto fail = [](const std::string& what) { throw contract_error("invalid encoder config: " + what); };
    if (num_layers < 1) fail("num_layers must be >= 1");
    if (num_heads < 1 || hidden_size % num_heads != 0) fail("hidden_size must be divisible by num_heads");
    if (relative_window < 1) fail("relative_window must be >= 1");
    if (emd_layers < 1) fail("emd_layers must be >= 1");
    if (conv_kernel_size % 2 == 0) fail("conv_kernel_size must be odd");
    if (vocab_size < 6) fail("vocab_size must exceed the special tokens");
    if (max_seq_len < 2) fail("max_seq_len must be >= 2");
    if (ffn_size < 1) fail("ffn_size must be >= 1");
    if (type_vocab_size < 1) fail("type_vocab_size must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) fail("dropout_rate must lie in [0, 1)");
  }

  /// Named size presets. `micro` and `tiny` are trainable on a desk; `base` and
  /// `xlarge` mirror the 100M and 900M models and are only constructed.
  static EncoderConfig preset(const std::string& name, std::size_t vocab_size) {
    EncoderConfig c;
    c.vocab_size = vocab_size;
    if (name == "micro") {
      c.num_layers = 2;
      c.hidden_size = 64;
      c.num_heads = 4;
      c.ffn_size = 256;
    } else if (name == "tiny") {
      // defaults
    } else if (name == "base") {
      c.num_layers = 12;
      c.hidden_size = 768;
      c.num_heads = 12;
      c.ffn_size = 3072;
      c.max_seq_len = 512;
      c.relative_window = 256;
    } else if (name == "xlarge") {
      c.num_layers = 24;
      c.hidden_size = 1536;
      c.num_heads = 24;
      c.ffn_size = 6144;
      c.max_seq_len = 512;
      c.relative_window = 256;
    } else {
      throw contract_error("unknown encoder preset '" + name + "' (expected micro, tiny, base or xlarge)");
    }
    c.validate();
    return c;
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline void to_json(nlohmann::ordered_json& j, const EncoderConfig& c) {
  j = nlohmann::ordered_json{{"num_layers", c.num_layers},
                             {"hidden_size", c.hidden_size},
                             {"num_heads", c.num_heads},
                             {"ffn_size", c.ffn_size},
                             {"vocab_size", c.vocab_size},
                             {"max_seq_len", c.max_seq_len},
                             {"relative_window", c.relative_window},
                             {"dropout_rate", c.dropout_rate},
                             {"emd_layers", c.emd_layers},
                             {"conv_kernel_size", c.conv_kernel_size},
                             {"type_vocab_size", c.type_vocab_size},
                             {"layer_norm_eps", c.layer_norm_eps},
                             {"init_std", c.init_std}};
}

template <class Json>
void from_json(const Json& j, EncoderConfig& c) {
  c.num_layers = j.at("num_layers").template get<std::size_t>();
  c.hidden_size = j.at("hidden_size").template get<std::size_t>();
  c.num_heads = j.at("num_heads").template get<std::size_t>();
  c.ffn_size = j.at("ffn_size").template get<std::size_t>();
  c.vocab_size = j.at("vocab_size").template get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").template get<std::size_t>();
  c.relative_window = j.at("relative_window").template get<std::size_t>();
  c.dropout_rate = j.at("dropout_rate").template get<double>();
  c.emd_layers = j.at("emd_layers").template get<std::size_t>();
  c.conv_kernel_size = j.at("conv_kernel_size").template get<std::size_t>();
  c.type_vocab_size = j.value("type_vocab_size", std::size_t{2});
  c.layer_norm_eps = j.value("layer_norm_eps", 1e-7);
  c.init_std = j.value("init_std", 0.02);
  c.validate();
}

}  // namespace lusoforge::encoder
