#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lusoforge/core/error.hpp"
#include "lusoforge/core/io.hpp"
#include "lusoforge/core/optimizer.hpp"
#include "lusoforge/encoder/checkpoint.hpp"
#include "lusoforge/encoder/model.hpp"
#include "lusoforge/pretrain/batching.hpp"
#include "lusoforge/pretrain/masking.hpp"
#include "lusoforge/pretrain/schedule.hpp"

namespace lusoforge::pretrain {

struct TrainRunConfig {
  std::uint64_t seed = 0;
  std::size_t seq_len = 128;
  std::size_t micro_batch_size = 8;
  std::size_t accumulation_steps = 4;
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 2000;
  std::size_t epochs = 0;  // > 0 derives total_steps from the corpus size
  double mask_rate = 0.15;
  std::string preset = "tiny";
  std::optional<double> dropout_rate;  // overrides the preset
  double weight_decay = 0.01;
  std::size_t min_tokens = 8;
  std::size_t checkpoint_every = 500;
  std::string output_dir;  // empty: nothing is written
  std::string init_checkpoint;

  std::size_t effective_batch() const { return micro_batch_size * accumulation_steps; }

  void validate() const {
    if (micro_batch_size == 0 || accumulation_steps == 0) throw contract_error("batch sizes must be > 0");
    if (seq_len < 3) throw contract_error("seq_len must be >= 3");
    if (warmup_steps > total_steps && epochs == 0) throw contract_error("warmup_steps must not exceed total_steps");
    if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw contract_error("mask_rate must lie in [0, 1]");
    if (!(peak_lr >= 0.0)) throw contract_error("peak_lr must be >= 0");
    if (dropout_rate && !(*dropout_rate >= 0.0 && *dropout_rate < 1.0)) throw contract_error("dropout must lie in [0, 1)");
  }

  /// Full-scale reference runs, for documentation only. The GPU count is folded into accumulation.
  static TrainRunConfig reference_run(const std::string& name) {
    TrainRunConfig c;
    c.peak_lr = 1e-5;
    c.warmup_steps = 10000;
    c.accumulation_steps = 16;
    if (name == "xlarge-ptbr") {
      c.preset = "xlarge";
      c.micro_batch_size = 56;
      c.total_steps = 200000;
      c.epochs = 50;
    } else if (name == "xlarge-ptpt") {
      c.preset = "xlarge";
      c.micro_batch_size = 52;
      c.total_steps = 245000;
      c.epochs = 25;
    } else if (name == "base-ptbr" || name == "base-ptpt") {
      c.preset = "base";
      c.micro_batch_size = 192;
      c.total_steps = 180000;
      c.epochs = name == "base-ptbr" ? 150 : 200;
    } else {
      throw contract_error("unknown reference run '" + name + "'");
    }
    return c;
  }
};

inline void to_json(nlohmann::ordered_json& j, const TrainRunConfig& c) {
  j = nlohmann::ordered_json{{"seed", c.seed},
                             {"seq_len", c.seq_len},
                             {"micro_batch_size", c.micro_batch_size},
                             {"accumulation_steps", c.accumulation_steps},
                             {"peak_lr", c.peak_lr},
                             {"warmup_steps", c.warmup_steps},
                             {"total_steps", c.total_steps},
                             {"epochs", c.epochs},
                             {"mask_rate", c.mask_rate},
                             {"preset", c.preset},
                             {"weight_decay", c.weight_decay},
                             {"min_tokens", c.min_tokens},
                             {"checkpoint_every", c.checkpoint_every},
                             {"output_dir", c.output_dir},
                             {"init_checkpoint", c.init_checkpoint}};
  if (c.dropout_rate) j["dropout_rate"] = *c.dropout_rate;
}

/// Reads only the keys present; unknown keys are an error.
template <class Json>
void update_from_json(TrainRunConfig& c, const Json& j) {
  if (!j.is_object()) throw data_error("training config must be a JSON object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const auto& v = it.value();
      if (k == "seed") c.seed = v.template get<std::uint64_t>();
      else if (k == "seq_len") c.seq_len = v.template get<std::size_t>();
      else if (k == "micro_batch_size") c.micro_batch_size = v.template get<std::size_t>();
      else if (k == "accumulation_steps") c.accumulation_steps = v.template get<std::size_t>();
      else if (k == "peak_lr") c.peak_lr = v.template get<double>();
      else if (k == "warmup_steps") c.warmup_steps = v.template get<std::size_t>();
      else if (k == "total_steps") c.total_steps = v.template get<std::size_t>();
      else if (k == "epochs") c.epochs = v.template get<std::size_t>();
      else if (k == "mask_rate") c.mask_rate = v.template get<double>();
      else if (k == "preset") c.preset = v.template get<std::string>();
      else if (k == "dropout_rate") c.dropout_rate = v.template get<double>();
      else if (k == "weight_decay") c.weight_decay = v.template get<double>();
      else if (k == "min_tokens") c.min_tokens = v.template get<std::size_t>();
      else if (k == "checkpoint_every") c.checkpoint_every = v.template get<std::size_t>();
      else if (k == "output_dir") c.output_dir = v.template get<std::string>();
      else if (k == "init_checkpoint") c.init_checkpoint = v.template get<std::string>();
      else throw data_error("unknown training config key '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw data_error(std::string("bad training config value: ") + e.what());
  }
}

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double ema = 0.0;
};

/// Raw loss per optimizer step plus its exponential moving average.
class LossLog {
 public:
  static constexpr double smoothing = 0.95;

  const LossRecord& add(std::size_t step, std::size_t epoch, double lr, double loss) {
    const double ema = records_.empty() ? loss : smoothing * records_.back().ema + (1.0 - smoothing) * loss;
    records_.push_back({step, epoch, lr, loss, ema});
    return records_.back();
  }

  const std::vector<LossRecord>& records() const noexcept { return records_; }
  bool empty() const noexcept { return records_.empty(); }
  const LossRecord& back() const { return records_.back(); }

  std::string to_csv() const {
    std::string out = "step,epoch,lr,loss,ema_loss\n";
    char buf[160];
    for (const auto& r : records_) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g\n", r.step, r.epoch, r.lr, r.loss, r.ema);
      out += buf;
    }
    return out;
  }

 private:
  std::vector<LossRecord> records_;
};

enum class TrainStatus { completed, aborted };

template <class T>
struct TrainHooks {
  std::function<void(std::size_t step, encoder::Encoder<T>&)> before_step;
  std::function<void(const LossRecord&)> on_record;
};

template <class T>
struct TrainResult {
  encoder::Encoder<T> model;
  LossLog log;
  TrainStatus status = TrainStatus::completed;
  std::size_t steps_done = 0;
  std::string message;
  std::optional<std::filesystem::path> last_checkpoint;
};

inline encoder::EncoderConfig resolve_encoder(const TrainRunConfig& cfg, std::size_t vocab_size) {
  auto ec = encoder::EncoderConfig::preset(cfg.preset, vocab_size);
  if (cfg.dropout_rate) ec.dropout_rate = *cfg.dropout_rate;
  ec.max_seq_len = std::max(ec.max_seq_len, cfg.seq_len);
  return ec;
}

/// Optimizer steps covering `epochs` passes; accumulation groups may straddle epochs.
inline std::size_t steps_for_epochs(const TrainRunConfig& cfg, std::size_t n_sequences, std::size_t epochs) {
  const std::size_t batches = (n_sequences + cfg.micro_batch_size - 1) / cfg.micro_batch_size;
  return (epochs * batches + cfg.accumulation_steps - 1) / cfg.accumulation_steps;
}

/// Masked-LM training over `seqs` (token ids with CLS/SEP). One optimizer step
/// per `accumulation_steps` micro-batches; each micro-batch loss is divided by
/// the masked-token count of the whole group, so the summed gradient equals
/// that of one large batch.
template <class T>
TrainResult<T> train(TrainRunConfig cfg, const std::vector<Sequence>& seqs, std::size_t vocab_size,
                     const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  if (seqs.empty()) throw data_error("empty training corpus");
  if (cfg.epochs > 0) cfg.total_steps = steps_for_epochs(cfg, seqs.size(), cfg.epochs);
  if (cfg.warmup_steps > cfg.total_steps) throw contract_error("warmup_steps must not exceed total_steps");

  const auto ec = resolve_encoder(cfg, vocab_size);
  TrainResult<T> res{encoder::Encoder<T>(ec, cfg.seed), {}, TrainStatus::completed, 0, {}, std::nullopt};
  auto& model = res.model;
  if (!cfg.init_checkpoint.empty()) {
    auto ck = encoder::load_checkpoint(cfg.init_checkpoint);
    if (ck.config.hidden_size != ec.hidden_size || ck.config.num_layers != ec.num_layers ||
        ck.config.vocab_size != ec.vocab_size) {
      throw data_error("initial checkpoint does not match the '" + cfg.preset + "' preset");
    }
    encoder::load_parameters(model.parameters(), ck);
  }
  AdamConfig ac;
  ac.weight_decay = cfg.weight_decay;
  Adam<T> opt(ac);
  Rng dropout_rng = Rng(cfg.seed).split("dropout");
  const MaskingVocab mv{vocab_size};

  const std::filesystem::path out_dir = cfg.output_dir;
  const bool write = !cfg.output_dir.empty();
  auto save = [&](const std::string& file, std::size_t step, std::size_t epoch) {
    nlohmann::ordered_json meta{{"kind", "pretrain"}, {"step", step}, {"epoch", epoch}, {"seed", cfg.seed}};
    const auto path = out_dir / file;
    encoder::save_checkpoint(path, encoder::make_checkpoint(ec, model.parameters(), meta));
    return path;
  };

  std::size_t epoch = 0, cursor = 0;
  auto order = epoch_order(seqs.size(), cfg.micro_batch_size, cfg.seed, epoch);

  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    if (hooks.before_step) hooks.before_step(step, model);

    struct Prepared {
      encoder::EncoderInput input;
      std::vector<std::int64_t> labels;
      std::size_t count = 0;
    };
    std::vector<Prepared> group;
    std::size_t denom = 0;
    for (std::size_t a = 0; a < cfg.accumulation_steps; ++a) {
      if (cursor == order.size()) {
        order = epoch_order(seqs.size(), cfg.micro_batch_size, cfg.seed, ++epoch);
        cursor = 0;
      }
      std::vector<std::vector<std::int64_t>> rows, labels;
      for (auto i : order[cursor]) {
        const auto& s = seqs[i];
        const std::span<const std::int32_t> ids(s.data(), std::min(s.size(), cfg.seq_len));
        Rng r = Rng(cfg.seed).split("mask", {epoch, i});
        auto m = apply_mlm_masking(ids, mv, cfg.mask_rate, r);
        rows.push_back(std::move(m.input_ids));
        labels.push_back(std::move(m.labels));
      }
      ++cursor;
      Prepared p{pad_rows(rows, cfg.seq_len), {}, 0};
      p.labels.assign(p.input.batch * p.input.seq, ad::ignore_label);
      for (std::size_t b = 0; b < labels.size(); ++b) {
        for (std::size_t t = 0; t < labels[b].size(); ++t) {
          p.labels[b * p.input.seq + t] = labels[b][t];
          if (labels[b][t] != ad::ignore_label) ++p.count;
        }
      }
      denom += p.count;
      if (p.count > 0) group.push_back(std::move(p));
    }
    res.steps_done = step + 1;
    if (denom == 0) continue;  // nothing to predict in this group

    model.parameters().zero_grad();
    double loss = 0.0;
    for (auto& p : group) {
      ad::Graph<T> g;
      auto l = model.mlm_loss(g, p.input, p.labels, {true, &dropout_rng}, static_cast<double>(denom));
      loss += static_cast<double>(l.value().data()[0]);
      g.backward(l);
    }
    const double lr = lr_at(step, cfg.warmup_steps, cfg.total_steps, cfg.peak_lr);
    std::string failure;
    if (!std::isfinite(loss)) {
      failure = "non-finite loss at step " + std::to_string(step);
    } else {
      try {
        opt.step(model.parameters(), lr);
      } catch (const numerical_error& e) {
        failure = "step " + std::to_string(step) + ": " + e.what();
      }
    }
    if (!failure.empty()) {
      res.status = TrainStatus::aborted;
      res.steps_done = step;
      res.message = failure;
      if (write) write_file_atomic(out_dir / "loss.csv", res.log.to_csv());
      return res;
    }
    const auto& rec = res.log.add(step, epoch, lr, loss);
    if (hooks.on_record) hooks.on_record(rec);
    if (write && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      res.last_checkpoint = save("checkpoint.ckpt", step + 1, epoch);
    }
  }
  if (write) {
    res.last_checkpoint = save("model.ckpt", cfg.total_steps, epoch);
    write_file_atomic(out_dir / "loss.csv", res.log.to_csv());
  }
  return res;
}

/// Tokenizes documents, then trains.
template <class T>
TrainResult<T> train(const TrainRunConfig& cfg, const std::vector<corpus::Document>& docs,
                     const tokenizer::TokenizerModel& tok, const TrainHooks<T>& hooks = {}) {
  auto seqs = prepare_sequences(docs, tok, cfg.seq_len, cfg.min_tokens);
  if (seqs.empty()) throw data_error("no document has at least " + std::to_string(cfg.min_tokens) + " tokens");
  return train<T>(cfg, seqs, tok.vocab_size(), hooks);
}

}  // namespace lusoforge::pretrain
