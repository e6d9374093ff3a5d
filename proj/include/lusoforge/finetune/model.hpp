#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "lusoforge/core/half.hpp"
#include "lusoforge/core/optimizer.hpp"
#include "lusoforge/encoder/checkpoint.hpp"
#include "lusoforge/encoder/model.hpp"
#include "lusoforge/finetune/metrics.hpp"
#include "lusoforge/finetune/task.hpp"
#include "lusoforge/tokenizer/bpe.hpp"

namespace lusoforge::finetune {

struct EncodedExample {
  std::vector<std::int64_t> ids;
  std::vector<std::int64_t> segments;
  double label = 0.0;
};

inline std::vector<EncodedExample> encode_examples(const tokenizer::TokenizerModel& tok,
                                                   const std::vector<TaskExample>& xs, std::size_t max_len) {
  std::vector<EncodedExample> out;
  out.reserve(xs.size());
  for (const auto& x : xs) {
    auto s = tok.encode_pair(x.sentence_a, x.sentence_b, max_len);
    out.push_back({{s.ids.begin(), s.ids.end()}, {s.segments.begin(), s.segments.end()}, x.label});
  }
  return out;
}

inline encoder::EncoderInput make_input(const std::vector<EncodedExample>& xs, std::span<const std::size_t> idx) {
  std::vector<std::vector<std::int64_t>> rows, segs;
  for (auto i : idx) {
    rows.push_back(xs[i].ids);
    segs.push_back(xs[i].segments);
  }
  return encoder::EncoderInput::pad(rows, segs, tokenizer::SpecialIds::pad);
}

/// Encoder plus a linear head on the final CLS state. The head lives in the
/// encoder's parameter set as head.weight / head.bias.
template <class T>
class TaskModel {
 public:
  TaskModel(encoder::Encoder<T> enc, const TaskSpec& spec, std::uint64_t seed)
      : enc_(std::move(enc)), spec_(spec) {
    const auto h = enc_.config().hidden_size;
    Rng rng = Rng(seed).split("head");
    Tensor<T> w(Shape{h, spec_.outputs()});
    for (auto& v : w.data()) v = static_cast<T>(rng.normal(0.0, enc_.config().init_std));
    enc_.parameters().add("head.weight", std::move(w), true);
    // regression starts mid-range; at 0 every prediction would clip to label_min
    const T b0 = spec_.head == HeadType::regression ? static_cast<T>((spec_.label_min + spec_.label_max) / 2) : T{0};
    enc_.parameters().add("head.bias", Tensor<T>(Shape{spec_.outputs()}, b0), false);
  }

  /// Encoder weights from `ckpt` (config dropout replaced by `dropout`), fresh seeded head.
  static TaskModel attach(const encoder::Checkpoint& ckpt, const TaskSpec& spec, double dropout, std::uint64_t seed) {
    auto cfg = ckpt.config;
    cfg.dropout_rate = dropout;
    encoder::Encoder<T> enc(cfg, seed);
    encoder::load_parameters(enc.parameters(), ckpt);
    return TaskModel(std::move(enc), spec, seed);
  }

  encoder::Encoder<T>& encoder() noexcept { return enc_; }
  const TaskSpec& spec() const noexcept { return spec_; }
  ParameterSet<T>& parameters() noexcept { return enc_.parameters(); }

  /// [batch, 1] for regression, [batch, 2] logits for classification.
  ad::Var<T> forward(ad::Graph<T>& g, const encoder::EncoderInput& in, encoder::RunMode mode = {}) {
    auto hs = enc_.forward(g, in, mode);
    auto pooled = enc_.pooled(hs, in);
    if (mode.training && enc_.config().dropout_rate > 0.0) {
      pooled = ad::dropout(pooled, enc_.config().dropout_rate, *mode.rng, true);
    }
    return ad::linear(pooled, enc_.param(g, "head.weight"), enc_.param(g, "head.bias"));
  }

  ad::Var<T> loss(ad::Graph<T>& g, const std::vector<EncodedExample>& xs, std::span<const std::size_t> idx,
                  encoder::RunMode mode) {
    auto out = forward(g, make_input(xs, idx), mode);
    if (spec_.head == HeadType::regression) {
      Tensor<T> target(Shape{idx.size(), 1});
      for (std::size_t i = 0; i < idx.size(); ++i) target[i] = static_cast<T>(xs[idx[i]].label);
      return ad::mse(out, g.constant(std::move(target)));
    }
    std::vector<std::int64_t> labels;
    for (auto i : idx) labels.push_back(static_cast<std::int64_t>(xs[i].label));
    return ad::cross_entropy(out, labels);
  }

  /// Regression scores clipped to the label range, or argmax class ids (as doubles).
  std::vector<double> predict(const std::vector<EncodedExample>& xs, std::size_t batch = 64) {
    std::vector<double> out;
    out.reserve(xs.size());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < xs.size(); start += batch) {
      idx.resize(std::min(batch, xs.size() - start));
      std::iota(idx.begin(), idx.end(), start);
      ad::Graph<T> g;
      g.set_grad_enabled(false);
      auto v = forward(g, make_input(xs, idx)).value().data();
      const auto k = spec_.outputs();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        if (k == 1) {
          out.push_back(std::clamp(static_cast<double>(v[r]), spec_.label_min, spec_.label_max));
        } else {
          out.push_back(v[r * 2 + 1] > v[r * 2] ? 1.0 : 0.0);
        }
      }
    }
    return out;
  }

  double score(const std::vector<EncodedExample>& xs) {
    const auto pred = predict(xs);
    return score_predictions(spec_, pred, xs);
  }

  static double score_predictions(const TaskSpec& spec, const std::vector<double>& pred,
                                  const std::vector<EncodedExample>& xs) {
    if (spec.metric == Metric::pearson) {
      std::vector<double> gold;
      for (const auto& x : xs) gold.push_back(x.label);
      return pearson(pred, gold);
    }
    std::vector<std::int64_t> p, gold;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      p.push_back(static_cast<std::int64_t>(pred[i]));
      gold.push_back(static_cast<std::int64_t>(xs[i].label));
    }
    return spec.metric == Metric::accuracy ? accuracy(p, gold) : f1_binary(p, gold, 1);
  }

 private:
  encoder::Encoder<T> enc_;
  TaskSpec spec_;
};

enum class Precision { fp32, fp16 };

inline std::string_view precision_name(Precision p) { return p == Precision::fp32 ? "fp32" : "fp16"; }

struct FinetuneOptions {
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  double weight_decay = 0.0;
};

struct FinetuneOutcome {
  double dev_score = 0.0;
  std::size_t best_epoch = 0;  // 1-based
  std::vector<double> dev_by_epoch;
};

/// Constant-lr fine-tuning of the whole model. Dev is scored after every epoch;
/// the model is left holding the best epoch's weights (earliest on ties).
/// fp16 keeps parameters snapped to binary16 values; arithmetic stays in T.
template <class T>
FinetuneOutcome finetune(TaskModel<T>& model, const std::vector<EncodedExample>& train,
                         const std::vector<EncodedExample>& dev, double lr, Precision precision, std::uint64_t seed,
                         const FinetuneOptions& opt = {}) {
  if (dev.empty()) throw data_error("fine-tuning needs a non-empty dev split");
  if (train.empty()) throw data_error("fine-tuning needs training examples");
  if (opt.batch_size == 0 || opt.epochs == 0) throw contract_error("epochs and batch_size must be > 0");
  auto& params = model.parameters();
  if (precision == Precision::fp16) round_parameters_to_half(params);
  AdamConfig ac;
  ac.weight_decay = opt.weight_decay;
  Adam<T> adam(ac);
  Rng dropout_rng = Rng(seed).split("finetune-dropout");

  FinetuneOutcome res;
  std::vector<std::vector<T>> best;
  auto snapshot = [&] {
    best.clear();
    for (const auto& p : params) best.emplace_back(p.value.data().begin(), p.value.data().end());
  };
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = Rng(seed).split("finetune-shuffle", {epoch});
    shuffle.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(opt.batch_size, order.size() - start));
      params.zero_grad();
      ad::Graph<T> g;
      auto l = model.loss(g, train, idx, {true, &dropout_rng});
      if (!std::isfinite(static_cast<double>(l.value().data()[0]))) {
        throw numerical_error("non-finite fine-tuning loss in epoch " + std::to_string(epoch + 1));
      }
      g.backward(l);
      adam.step(params, lr);
      if (precision == Precision::fp16) round_parameters_to_half(params);
    }
    const double s = model.score(dev);
    res.dev_by_epoch.push_back(s);
    if (res.best_epoch == 0 || s > res.dev_score) {
      res.dev_score = s;
      res.best_epoch = epoch + 1;
      snapshot();
    }
  }
  std::size_t k = 0;
  for (auto& p : params) {
    std::copy(best[k].begin(), best[k].end(), p.value.data().begin());
    ++k;
  }
  return res;
}

}  // namespace lusoforge::finetune
