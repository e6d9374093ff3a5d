#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lusoforge/core/error.hpp"
#include "lusoforge/core/graph.hpp"
#include "lusoforge/core/ops.hpp"
#include "lusoforge/core/parameters.hpp"
#include "lusoforge/core/random.hpp"
#include "lusoforge/encoder/config.hpp"

namespace lusoforge::encoder {

using ad::Graph;
using ad::Var;

/// Bucket of the relative distance i - j, clipped to a window of 2k slots.
inline std::size_t relative_bucket(std::int64_t i, std::int64_t j, std::size_t k) {
  if (k < 1) throw contract_error("relative window must be >= 1");
  const auto kk = static_cast<std::int64_t>(k);
  const std::int64_t d = i - j;
  if (d <= -kk) return 0;
  if (d >= kk) return 2 * k - 1;
  return static_cast<std::size_t>(d + kk);
}

/// A padded batch. mask is 1 for real tokens and 0 for padding.
struct EncoderInput {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int64_t> ids;
  std::vector<std::int64_t> segments;
  std::vector<std::uint8_t> mask;

  /// Right-pads variable-length rows with `pad_id`. Missing segments default to 0.
  static EncoderInput pad(const std::vector<std::vector<std::int64_t>>& rows,
                          const std::vector<std::vector<std::int64_t>>& segment_rows = {}, std::int64_t pad_id = 0) {
    EncoderInput in;
    in.batch = rows.size();
    for (const auto& r : rows) in.seq = std::max(in.seq, r.size());
    in.ids.assign(in.batch * in.seq, pad_id);
    in.segments.assign(in.batch * in.seq, 0);
    in.mask.assign(in.batch * in.seq, 0);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      for (std::size_t t = 0; t < rows[b].size(); ++t) {
        in.ids[b * in.seq + t] = rows[b][t];
        in.mask[b * in.seq + t] = 1;
        if (b < segment_rows.size() && t < segment_rows[b].size()) in.segments[b * in.seq + t] = segment_rows[b][t];
      }
    }
    return in;
  }
};

struct RunMode {
  bool training = false;
  Rng* rng = nullptr;  // dropout stream; required when training with dropout
};

template <class T>
struct AttentionResult {
  Var<T> context;  // [batch, seq, hidden], before the output projection
  Var<T> scores;   // A: [batch, heads, seq, seq], scaled, before masking
  Var<T> content_to_content;
  Var<T> content_to_position;
  Var<T> position_to_content;
  Var<T> probs;
};

/// Outputs of the embedding layer (index 0) and of every layer after it.
template <class T>
struct HiddenStates {
  std::vector<Var<T>> layers;
  Var<T> final() const { return layers.back(); }
};

namespace detail {

template <class T>
Var<T> gather_flat(Var<T> x, std::span<const std::int64_t> idx, const Shape& shape) {
  auto column = ad::reshape(x, Shape{x.size(), 1});
  return ad::reshape(ad::embedding(column, idx, shape), shape);
}

}  // namespace detail

template <class T>
class Encoder {
 public:
  Encoder(EncoderConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    build(seed);
  }

  const EncoderConfig& config() const noexcept { return config_; }
  ParameterSet<T>& parameters() noexcept { return params_; }
  const ParameterSet<T>& parameters() const noexcept { return params_; }

  void check_input(const EncoderInput& in) const {
    const std::size_t n = in.batch * in.seq;
    if (in.batch == 0 || in.seq == 0) throw contract_error("empty encoder batch");
    if (in.ids.size() != n || in.segments.size() != n || in.mask.size() != n) {
      throw shape_error("encoder input arrays do not match batch " + std::to_string(in.batch) + " x seq " +
                        std::to_string(in.seq));
    }
    if (in.seq > config_.max_seq_len) {
      throw contract_error("sequence length " + std::to_string(in.seq) + " exceeds max_seq_len " +
                           std::to_string(config_.max_seq_len));
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (in.ids[i] < 0 || static_cast<std::size_t>(in.ids[i]) >= config_.vocab_size) {
        throw contract_error("token id " + std::to_string(in.ids[i]) + " outside vocabulary of " +
                             std::to_string(config_.vocab_size));
      }
      if (in.segments[i] < 0 || static_cast<std::size_t>(in.segments[i]) >= config_.type_vocab_size) {
        throw contract_error("segment id " + std::to_string(in.segments[i]) + " out of range");
      }
    }
    for (std::size_t b = 0; b < in.batch; ++b) {
      bool any = false;
      for (std::size_t t = 0; t < in.seq; ++t) any = any || in.mask[b * in.seq + t];
      if (!any) throw contract_error("sequence " + std::to_string(b) + " of the batch is fully masked");
    }
  }

  Var<T> embed(Graph<T>& g, const EncoderInput& in, RunMode mode) {
    check_input(in);
    const Shape ids_shape{in.batch, in.seq};
    auto x = ad::add(ad::embedding(param(g, "embeddings.word"), in.ids, ids_shape),
                     ad::embedding(param(g, "embeddings.segment"), in.segments, ids_shape));
    x = norm(g, "embeddings.norm", x);
    return drop(x, mode);
  }

  /// Disentangled attention of `query_in` over `kv_in` using the weights under `prefix`
  /// (e.g. "layer.0.attn"). Position projections reuse the content Wq/Wk without bias.
  AttentionResult<T> attention(Graph<T>& g, const std::string& prefix, Var<T> query_in, Var<T> kv_in,
                               const EncoderInput& in, RunMode mode) {
    const std::size_t B = in.batch, S = in.seq, H = config_.num_heads, d = config_.head_size();
    const std::size_t k2 = 2 * config_.relative_window;
    if (S > config_.max_seq_len) {
      throw contract_error("sequence length " + std::to_string(S) + " exceeds max_seq_len " +
                           std::to_string(config_.max_seq_len));
    }
    auto wq = param(g, prefix + ".query.weight");
    auto wk = param(g, prefix + ".key.weight");
    auto split_heads = [&](Var<T> x) { return ad::permute(ad::reshape(x, Shape{B, S, H, d}), {0, 2, 1, 3}); };
    auto q = split_heads(ad::linear(query_in, wq, param(g, prefix + ".query.bias")));
    auto k = split_heads(ad::linear(kv_in, wk, param(g, prefix + ".key.bias")));
    auto v = split_heads(ad::linear(kv_in, param(g, prefix + ".value.weight"), param(g, prefix + ".value.bias")));

    auto rel = param(g, "rel_embeddings");
    auto pos_heads = [&](Var<T> x) { return ad::permute(ad::reshape(x, Shape{k2, H, d}), {1, 0, 2}); };
    auto qr = pos_heads(ad::matmul(rel, wq));  // [H, 2k, d]
    auto kr = pos_heads(ad::matmul(rel, wk));

    auto cc = ad::matmul(q, k, ad::Transpose::no, ad::Transpose::yes);        // [B, H, S, S]
    auto c2p_all = ad::matmul(q, kr, ad::Transpose::no, ad::Transpose::yes);  // [B, H, S(i), 2k]
    auto p2c_all = ad::matmul(k, qr, ad::Transpose::no, ad::Transpose::yes);  // [B, H, S(j), 2k]

    const Shape score_shape{B, H, S, S};
    std::vector<std::int64_t> c2p_idx(B * H * S * S), p2c_idx(B * H * S * S);
    for (std::size_t bh = 0; bh < B * H; ++bh) {
      for (std::size_t i = 0; i < S; ++i) {
        for (std::size_t j = 0; j < S; ++j) {
          const std::size_t o = (bh * S + i) * S + j;
          const auto si = static_cast<std::int64_t>(i), sj = static_cast<std::int64_t>(j);
          c2p_idx[o] = static_cast<std::int64_t>((bh * S + i) * k2 + relative_bucket(si, sj, config_.relative_window));
          p2c_idx[o] = static_cast<std::int64_t>((bh * S + j) * k2 + relative_bucket(sj, si, config_.relative_window));
        }
      }
    }
    auto c2p = detail::gather_flat(c2p_all, c2p_idx, score_shape);
    auto p2c = detail::gather_flat(p2c_all, p2c_idx, score_shape);

    const T inv = static_cast<T>(1.0 / std::sqrt(3.0 * static_cast<double>(d)));
    auto a = ad::scale(ad::add(ad::add(cc, c2p), p2c), inv);

    Tensor<T> bias(Shape{B, 1, 1, S});
    for (std::size_t i = 0; i < B * S; ++i) bias[i] = in.mask[i] ? T{} : static_cast<T>(-1e9);
    auto probs = ad::softmax(ad::add(a, g.constant(std::move(bias))), -1);
    probs = drop(probs, mode);
    auto ctx = ad::reshape(ad::permute(ad::matmul(probs, v), {0, 2, 1, 3}), Shape{B, S, H * d});
    return {ctx, a, ad::scale(cc, inv), ad::scale(c2p, inv), ad::scale(p2c, inv), probs};
  }

  /// One post-norm block: attention (+ convolution over `query_in` when with_conv),
  /// residual + norm, feed-forward, residual + norm.
  Var<T> block(Graph<T>& g, const std::string& prefix, Var<T> query_in, Var<T> kv_in, const EncoderInput& in,
               RunMode mode, bool with_conv) {
    auto att = attention(g, prefix + ".attn", query_in, kv_in, in, mode);
    auto a = ad::linear(att.context, param(g, prefix + ".attn.output.weight"), param(g, prefix + ".attn.output.bias"));
    if (with_conv) {
      a = ad::add(a, ad::conv1d(query_in, param(g, prefix + ".conv.weight"), param(g, prefix + ".conv.bias"),
                                std::span<const std::uint8_t>(in.mask)));
    }
    auto h = norm(g, prefix + ".attn.norm", ad::add(query_in, drop(a, mode)));
    auto f = ad::gelu(ad::linear(h, param(g, prefix + ".ffn.in.weight"), param(g, prefix + ".ffn.in.bias")));
    f = ad::linear(f, param(g, prefix + ".ffn.out.weight"), param(g, prefix + ".ffn.out.bias"));
    return norm(g, prefix + ".ffn.norm", ad::add(h, drop(f, mode)));
  }

  HiddenStates<T> forward(Graph<T>& g, const EncoderInput& in, RunMode mode = {}) {
    HiddenStates<T> hs;
    hs.layers.push_back(embed(g, in, mode));
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      auto x = hs.layers.back();
      hs.layers.push_back(block(g, "layer." + std::to_string(l), x, x, in, mode, l == 0));
    }
    return hs;
  }

  /// Enhanced mask decoder: queries start from absolute position + final hidden
  /// state; keys and values are the final hidden state. Returns [batch, seq, hidden].
  Var<T> decode(Graph<T>& g, const HiddenStates<T>& hs, const EncoderInput& in, RunMode mode = {}) {
    std::vector<std::int64_t> positions(in.batch * in.seq);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int64_t>(i % in.seq);
    auto h = hs.final();
    auto q = ad::add(ad::embedding(param(g, "emd.abs_pos"), positions, Shape{in.batch, in.seq}), h);
    for (std::size_t t = 0; t < config_.emd_layers; ++t) q = block(g, "emd." + std::to_string(t), q, h, in, mode, false);
    return q;
  }

  /// Transform + vocabulary projection tied to the word embedding table. x: [..., hidden].
  Var<T> mlm_head(Graph<T>& g, Var<T> x) {
    auto t = ad::gelu(ad::linear(x, param(g, "mlm.dense.weight"), param(g, "mlm.dense.bias")));
    t = norm(g, "mlm.norm", t);
    return ad::add(ad::matmul(t, param(g, "embeddings.word"), ad::Transpose::no, ad::Transpose::yes),
                   param(g, "mlm.bias"));
  }

  /// Full MLM logits [batch, seq, vocab].
  Var<T> mlm_logits(Graph<T>& g, const EncoderInput& in, RunMode mode = {}) {
    auto hs = forward(g, in, mode);
    return mlm_head(g, decode(g, hs, in, mode));
  }

  /// MLM loss over positions whose label is not ignore_label. Only those rows
  /// go through the head. `denominator` overrides the masked-token count.
  Var<T> mlm_loss(Graph<T>& g, const EncoderInput& in, std::span<const std::int64_t> labels, RunMode mode = {},
                  std::optional<double> denominator = std::nullopt) {
    if (labels.size() != in.batch * in.seq) throw shape_error("MLM labels do not match the batch");
    std::vector<std::int64_t> rows, targets;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == ad::ignore_label) continue;
      rows.push_back(static_cast<std::int64_t>(i));
      targets.push_back(labels[i]);
    }
    if (rows.empty()) throw contract_error("empty loss: no masked positions in the batch");
    auto hs = forward(g, in, mode);
    auto dec = ad::reshape(decode(g, hs, in, mode), Shape{in.batch * in.seq, config_.hidden_size});
    auto picked = ad::embedding(dec, rows, Shape{rows.size()});
    return ad::cross_entropy(mlm_head(g, picked), targets, ad::ignore_label, denominator);
  }

  /// Final hidden state at the first position of every row: [batch, hidden].
  Var<T> pooled(const HiddenStates<T>& hs, const EncoderInput& in) {
    std::vector<std::int64_t> rows(in.batch);
    for (std::size_t b = 0; b < in.batch; ++b) rows[b] = static_cast<std::int64_t>(b * in.seq);
    auto flat = ad::reshape(hs.final(), Shape{in.batch * in.seq, config_.hidden_size});
    return ad::embedding(flat, rows, Shape{in.batch});
  }

  Var<T> param(Graph<T>& g, const std::string& name) { return g.parameter(params_.at(name)); }

 private:
  Var<T> norm(Graph<T>& g, const std::string& prefix, Var<T> x) {
    return ad::layer_norm(x, param(g, prefix + ".gain"), param(g, prefix + ".bias"),
                          static_cast<T>(config_.layer_norm_eps));
  }

  Var<T> drop(Var<T> x, RunMode mode) {
    if (!mode.training || config_.dropout_rate <= 0.0) return x;
    if (!mode.rng) throw contract_error("training with dropout needs an rng");
    return ad::dropout(x, config_.dropout_rate, *mode.rng, true);
  }

  void add_normal(Rng& base, const std::string& name, Shape shape) {
    Rng r = base.split(name);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.storage()) v = static_cast<T>(r.normal(0.0, config_.init_std));
    params_.add(name, std::move(t), true);
  }
  void add_const(const std::string& name, std::size_t n, T value) { params_.add(name, Tensor<T>(Shape{n}, value), false); }

  void add_norm(const std::string& prefix) {
    add_const(prefix + ".gain", config_.hidden_size, T{1});
    add_const(prefix + ".bias", config_.hidden_size, T{});
  }

  void add_block(Rng& rng, const std::string& prefix, bool with_conv) {
    const std::size_t h = config_.hidden_size, f = config_.ffn_size;
    for (const char* p : {".attn.query", ".attn.key", ".attn.value", ".attn.output"}) {
      add_normal(rng, prefix + p + ".weight", Shape{h, h});
      add_const(prefix + p + ".bias", h, T{});
    }
    add_norm(prefix + ".attn.norm");
    if (with_conv) {
      add_normal(rng, prefix + ".conv.weight", Shape{config_.conv_kernel_size, h, h});
      add_const(prefix + ".conv.bias", h, T{});
    }
    add_normal(rng, prefix + ".ffn.in.weight", Shape{h, f});
    add_const(prefix + ".ffn.in.bias", f, T{});
    add_normal(rng, prefix + ".ffn.out.weight", Shape{f, h});
    add_const(prefix + ".ffn.out.bias", h, T{});
    add_norm(prefix + ".ffn.norm");
  }

  void build(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t h = config_.hidden_size;
    add_normal(rng, "embeddings.word", Shape{config_.vocab_size, h});
    add_normal(rng, "embeddings.segment", Shape{config_.type_vocab_size, h});
    add_norm("embeddings.norm");
    add_normal(rng, "rel_embeddings", Shape{2 * config_.relative_window, h});
    for (std::size_t l = 0; l < config_.num_layers; ++l) add_block(rng, "layer." + std::to_string(l), l == 0);
    add_normal(rng, "emd.abs_pos", Shape{config_.max_seq_len, h});
    for (std::size_t t = 0; t < config_.emd_layers; ++t) add_block(rng, "emd." + std::to_string(t), false);
    add_normal(rng, "mlm.dense.weight", Shape{h, h});
    add_const("mlm.dense.bias", h, T{});
    add_norm("mlm.norm");
    add_const("mlm.bias", config_.vocab_size, T{});
  }

  EncoderConfig config_;
  ParameterSet<T> params_;
};

}  // namespace lusoforge::encoder
