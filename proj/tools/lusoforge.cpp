// lusoforge command-line driver: corpus filtering, tokenizer training,
// pre-training, fine-tuning sweeps and report assembly.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "lusoforge/core/io.hpp"
#include "lusoforge/corpus/document.hpp"
#include "lusoforge/corpus/pipeline.hpp"
#include "lusoforge/encoder/checkpoint.hpp"
#include "lusoforge/finetune/assin2.hpp"
#include "lusoforge/finetune/grid.hpp"
#include "lusoforge/pretrain/loss_curve.hpp"
#include "lusoforge/pretrain/trainer.hpp"
#include "lusoforge/tokenizer/bpe.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace lusoforge;

namespace {

constexpr int exit_usage = 1;
constexpr int exit_data = 2;
constexpr int exit_numerical = 3;

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw error("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Resolved settings for one command: built-in default < config file < flag.
class Settings {
 public:
  explicit Settings(json defaults) : values_(std::move(defaults)) {
    for (auto it = values_.begin(); it != values_.end(); ++it) sources_[it.key()] = "default";
  }

  void apply(const json& section, const std::string& source) {
    if (!section.is_object()) throw data_error("config section must be a JSON object");
    for (auto it = section.begin(); it != section.end(); ++it) {
      if (!values_.contains(it.key())) throw data_error("unknown config key '" + it.key() + "'");
      values_[it.key()] = it.value();
      sources_[it.key()] = source;
    }
  }

  const json& values() const { return values_; }
  const json& sources() const { return sources_; }
  const json& operator[](const std::string& k) const { return values_.at(k); }

  template <class T>
  T get(const std::string& k) const {
    try {
      return values_.at(k).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw data_error("setting '" + k + "' has the wrong type");
    }
  }

 private:
  json values_;
  json sources_ = json::object();
};

// A flag that overrides one settings key when given.
struct Override {
  std::string key;
  std::string raw;
  enum Kind { number, text, switch_on, switch_off } kind = number;
  CLI::Option* opt = nullptr;
};

class Overrides {
 public:
  void value(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help,
             Override::Kind kind = Override::number) {
    auto& o = items_.emplace_back(Override{key, {}, kind, nullptr});
    o.opt = app->add_option(flag, o.raw, help);
  }
  void on(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto& o = items_.emplace_back(Override{key, {}, Override::switch_on, nullptr});
    o.opt = app->add_flag(flag, help);
  }
  void off(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto& o = items_.emplace_back(Override{key, {}, Override::switch_off, nullptr});
    o.opt = app->add_flag(flag, help);
  }

  json given() const {
    json j = json::object();
    for (const auto& o : items_) {
      if (o.opt->count() == 0) continue;
      switch (o.kind) {
        case Override::switch_on: j[o.key] = true; break;
        case Override::switch_off: j[o.key] = false; break;
        case Override::text: j[o.key] = o.raw; break;
        case Override::number:
          try {
            j[o.key] = json::parse(o.raw);
          } catch (const nlohmann::json::exception&) {
            throw contract_error("flag for '" + o.key + "' expects a number, got '" + o.raw + "'");
          }
          if (!j[o.key].is_number()) throw contract_error("flag for '" + o.key + "' expects a number");
          break;
      }
    }
    return j;
  }

 private:
  std::deque<Override> items_;
};

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<std::size_t> threads;
  json config = json::object();

  json section(const std::string& name) const {
    return config.contains(name) ? config.at(name) : json::object();
  }

  std::uint64_t resolved_seed() const {
    if (seed) return *seed;
    if (config.contains("seed")) return config.at("seed").get<std::uint64_t>();
    return 0;
  }

  std::size_t resolved_threads() const {
    if (threads) return std::max<std::size_t>(1, *threads);
    if (config.contains("threads")) return std::max<std::size_t>(1, config.at("threads").get<std::size_t>());
    if (const char* env = std::getenv("LUSOFORGE_THREADS")) {
      try {
        return std::max<std::size_t>(1, std::stoul(env));
      } catch (const std::exception&) {
        throw contract_error(std::string("LUSOFORGE_THREADS is not a number: ") + env);
      }
    }
    return 1;
  }
};

// Records inputs and outputs and writes manifest.json when the command ends.
class Run {
 public:
  Run(std::string command, const Globals& g) : command_(std::move(command)), g_(g), started_(utc_now()) {}

  std::string read_input(const fs::path& p) {
    auto bytes = read_file(p);
    inputs_.push_back({{"path", p.string()}, {"sha256", sha256_hex(bytes)}});
    return bytes;
  }
  void note_input(const fs::path& p) { read_input(p); }

  fs::path out(const std::string& name) const { return fs::path(g_.out) / name; }

  void write(const std::string& name, const std::string& bytes) {
    const auto p = out(name);
    write_file_atomic(p, bytes);
    note_output(p);
  }
  void note_output(const fs::path& p) {
    outputs_.push_back({{"path", p.string()}, {"sha256", sha256_hex(read_file(p))}});
  }

  void settings(const Settings& s) {
    config_ = s.values();
    sources_ = s.sources();
  }

  void finish(int code, const std::string& message = {}) {
    json m;
    m["command"] = command_;
    m["status"] = code == 0 ? "ok" : "failed";
    m["exit_code"] = code;
    if (!message.empty()) m["message"] = message;
    m["seed"] = g_.resolved_seed();
    m["threads"] = g_.resolved_threads();
    m["code_version"] = LUSOFORGE_VERSION;
    m["config_file"] = g_.config_path;
    m["config"] = config_;
    m["config_sources"] = sources_;
    m["inputs"] = inputs_;
    m["outputs"] = outputs_;
    m["started_at"] = started_;
    m["finished_at"] = utc_now();
    write_file_atomic(out("manifest.json"), m.dump(2) + "\n");
  }

 private:
  std::string command_;
  const Globals& g_;
  std::string started_;
  json inputs_ = json::array();
  json outputs_ = json::array();
  json config_ = json::object();
  json sources_ = json::object();
};

Settings resolve(json defaults, const Globals& g, const std::string& section, const Overrides& o) {
  Settings s(std::move(defaults));
  s.apply(g.section(section), "config");
  s.apply(o.given(), "flag");
  return s;
}

std::vector<corpus::Document> load_docs(Run& run, const std::string& path) {
  std::istringstream in(run.read_input(path));
  return corpus::read_jsonl(in, path);
}

tokenizer::TokenizerModel load_tokenizer(Run& run, const std::string& path) {
  run.note_input(path);
  return tokenizer::TokenizerModel::load(path);
}

encoder::Checkpoint load_ckpt(Run& run, const std::string& path) {
  return encoder::parse_checkpoint(run.read_input(path));
}

// ---- corpus ---------------------------------------------------------------

json corpus_defaults() {
  corpus::PipelineOptions p;
  const auto& t = p.thresholds;
  return json{{"country_code", nullptr},
              {"tld_sources", "OSCAR"},
              {"quality", p.quality},
              {"dedup", p.dedup},
              {"near_dedup", p.near_dedup},
              {"near_threshold", p.near_threshold},
              {"shingle_size", p.shingle_size},
              {"min_chars", t.min_chars},
              {"min_words", t.min_words},
              {"max_char_repetition", t.max_char_repetition},
              {"max_word_repetition", t.max_word_repetition},
              {"max_non_alpha", t.max_non_alpha},
              {"max_url_ratio", t.max_url_ratio},
              {"tokenizer", ""}};
}

corpus::PipelineOptions pipeline_options(const Settings& s, std::size_t threads) {
  corpus::PipelineOptions p;
  if (!s["country_code"].is_null()) p.country_code = s.get<std::string>("country_code");
  p.tld_sources.clear();
  const auto list = s.get<std::string>("tld_sources");
  if (list != "all") {
    std::stringstream ss(list);
    std::string name;
    while (std::getline(ss, name, ',')) {
      auto src = corpus::parse_source(name);
      if (!src) throw contract_error("unknown source '" + name + "' in tld_sources");
      p.tld_sources.push_back(*src);
    }
  }
  p.quality = s.get<bool>("quality");
  p.dedup = s.get<bool>("dedup");
  p.near_dedup = s.get<bool>("near_dedup");
  p.near_threshold = s.get<double>("near_threshold");
  p.shingle_size = s.get<std::size_t>("shingle_size");
  p.thresholds.min_chars = s.get<std::size_t>("min_chars");
  p.thresholds.min_words = s.get<std::size_t>("min_words");
  p.thresholds.max_char_repetition = s.get<double>("max_char_repetition");
  p.thresholds.max_word_repetition = s.get<double>("max_word_repetition");
  p.thresholds.max_non_alpha = s.get<double>("max_non_alpha");
  p.thresholds.max_url_ratio = s.get<double>("max_url_ratio");
  p.threads = threads;
  return p;
}

void corpus_overrides(CLI::App* c, Overrides& o) {
  o.value(c, "--country", "country_code", "keep OSCAR documents under this ccTLD (e.g. pt, br)", Override::text);
  o.value(c, "--tld-sources", "tld_sources", "comma-separated sources the TLD filter applies to, or 'all'",
          Override::text);
  o.off(c, "--no-quality", "quality", "skip the quality filters");
  o.off(c, "--no-dedup", "dedup", "skip exact deduplication");
  o.on(c, "--near-dedup", "near_dedup", "also drop near-duplicates (shingle Jaccard)");
  o.value(c, "--near-threshold", "near_threshold", "Jaccard threshold for near-duplicates");
  o.value(c, "--shingle-size", "shingle_size", "words per shingle");
  o.value(c, "--min-chars", "min_chars", "minimum characters");
  o.value(c, "--min-words", "min_words", "minimum words");
  o.value(c, "--max-char-repetition", "max_char_repetition", "character repetition ceiling");
  o.value(c, "--max-word-repetition", "max_word_repetition", "word repetition ceiling");
  o.value(c, "--max-non-alpha", "max_non_alpha", "non-letter share ceiling");
  o.value(c, "--max-url-ratio", "max_url_ratio", "URL word share ceiling");
  o.value(c, "--tokenizer", "tokenizer", "vocab.json for subword token counts", Override::text);
}

int cmd_corpus_filter(const Globals& g, const Overrides& o, const std::string& input) {
  Run run("corpus filter", g);
  try {
    auto s = resolve(corpus_defaults(), g, "corpus", o);
    run.settings(s);
    auto docs = load_docs(run, input);
    std::optional<tokenizer::TokenizerModel> tok;
    if (!s.get<std::string>("tokenizer").empty()) tok = load_tokenizer(run, s.get<std::string>("tokenizer"));
    auto res = corpus::run_pipeline(docs, pipeline_options(s, g.resolved_threads()), tok ? &*tok : nullptr);
    std::ostringstream kept;
    corpus::write_jsonl(kept, res.kept);
    run.write("filtered.jsonl", kept.str());
    std::string rejected;
    for (const auto& r : res.rejected) rejected += json{{"id", r.id}, {"stage", r.stage}, {"reason", r.reason}}.dump() + "\n";
    run.write("rejected.jsonl", rejected);
    run.write("filter_report.json", res.report.to_json().dump(2) + "\n");
    std::cout << "kept " << res.kept.size() << " of " << docs.size() << " documents\n";
    run.finish(0);
    return 0;
  } catch (...) {
    run.finish(1, "failed");
    throw;
  }
}

int cmd_corpus_stats(const Globals& g, const std::string& input, const std::string& tokenizer_path) {
  Run run("corpus stats", g);
  try {
    auto docs = load_docs(run, input);
    std::optional<tokenizer::TokenizerModel> tok;
    if (!tokenizer_path.empty()) tok = load_tokenizer(run, tokenizer_path);
    auto report = corpus::corpus_stats(docs, tok ? &*tok : nullptr).to_json();
    run.write("corpus_stats.json", report.dump(2) + "\n");
    for (auto it = report["sources"].begin(); it != report["sources"].end(); ++it) {
      std::printf("%-13s %6zu docs  %.4f\n", it.key().c_str(), it.value()["documents"].get<std::size_t>(),
                  it.value()["document_share"].get<double>());
    }
    run.finish(0);
    return 0;
  } catch (...) {
    run.finish(1, "failed");
    throw;
  }
}

// ---- tokenizer --------------------------------------------------------------

int cmd_tokenizer_train(const Globals& g, const Overrides& o, const std::string& input) {
  Run run("tokenizer train", g);
  try {
    tokenizer::TrainOptions d;
    auto s = resolve(json{{"vocab_size", d.vocab_size}, {"min_frequency", d.min_frequency}, {"max_documents", d.max_documents}},
                     g, "tokenizer", o);
    run.settings(s);
    auto docs = load_docs(run, input);
    tokenizer::TrainOptions opts;
    opts.vocab_size = s.get<std::size_t>("vocab_size");
    opts.min_frequency = s.get<std::size_t>("min_frequency");
    opts.max_documents = s.get<std::size_t>("max_documents");
    opts.seed = g.resolved_seed();
    std::vector<std::string> texts;
    for (const auto& doc : docs) texts.push_back(doc.text);
    auto tok = tokenizer::train_tokenizer(texts, opts);
    const auto path = run.out("vocab.json");
    tok.save(path);
    run.note_output(path);
    std::cout << "vocabulary of " << tok.vocab_size() << " tokens\n";
    run.finish(0);
    return 0;
  } catch (...) {
    run.finish(1, "failed");
    throw;
  }
}

// ---- pretrain ---------------------------------------------------------------

void pretrain_overrides(CLI::App* c, Overrides& o) {
  o.value(c, "--seq-len", "seq_len", "truncation length");
  o.value(c, "--micro-batch", "micro_batch_size", "sequences per micro-batch");
  o.value(c, "--accumulation", "accumulation_steps", "micro-batches per optimizer step");
  o.value(c, "--lr", "peak_lr", "peak learning rate");
  o.value(c, "--warmup", "warmup_steps", "warm-up steps");
  o.value(c, "--steps", "total_steps", "optimizer steps");
  o.value(c, "--epochs", "epochs", "derive the step count from this many passes (0: use --steps)");
  o.value(c, "--mask-rate", "mask_rate", "MLM selection probability");
  o.value(c, "--preset", "preset", "encoder preset (micro, tiny, base, xlarge)", Override::text);
  o.value(c, "--dropout", "dropout_rate", "override the preset dropout");
  o.value(c, "--weight-decay", "weight_decay", "AdamW decoupled weight decay");
  o.value(c, "--min-tokens", "min_tokens", "skip documents with fewer content tokens");
  o.value(c, "--checkpoint-every", "checkpoint_every", "optimizer steps between checkpoints (0: final only)");
  o.value(c, "--init-checkpoint", "init_checkpoint", "continue from these weights", Override::text);
}

int cmd_pretrain(const Globals& g, const Overrides& o, const std::string& input, const std::string& tokenizer_path) {
  Run run("pretrain", g);
  try {
    json defaults = pretrain::TrainRunConfig{};
    defaults.erase("seed");
    defaults.erase("output_dir");
    defaults["dropout_rate"] = nullptr;
    auto s = resolve(defaults, g, "pretrain", o);
    run.settings(s);
    json resolved = s.values();
    if (resolved["dropout_rate"].is_null()) resolved.erase("dropout_rate");
    pretrain::TrainRunConfig cfg;
    pretrain::update_from_json(cfg, resolved);
    cfg.seed = g.resolved_seed();
    cfg.output_dir = g.out;
    if (!cfg.init_checkpoint.empty()) run.note_input(cfg.init_checkpoint);
    auto docs = load_docs(run, input);
    auto tok = load_tokenizer(run, tokenizer_path);
    pretrain::TrainHooks<float> hooks;
    const std::size_t every = std::max<std::size_t>(1, cfg.total_steps / 20);
    hooks.on_record = [&](const pretrain::LossRecord& r) {
      if (r.step % every == 0 || r.step + 1 == cfg.total_steps) {
        std::fprintf(stderr, "step %zu  epoch %zu  lr %.3g  loss %.4f  ema %.4f\n", r.step, r.epoch, r.lr, r.loss, r.ema);
      }
    };
    auto res = pretrain::train<float>(cfg, docs, tok, hooks);
    for (const char* f : {"checkpoint.ckpt", "model.ckpt", "loss.csv"}) {
      if (fs::exists(run.out(f))) run.note_output(run.out(f));
    }
    if (!res.log.empty()) {
      run.write("loss_curve.csv", pretrain::loss_curve_csv(res.log));
      run.write("loss_curve.svg", pretrain::loss_curve_svg(res.log));
    }
    if (res.status == pretrain::TrainStatus::aborted) {
      std::cerr << "error: training aborted: " << res.message << "\n";
      run.finish(exit_numerical, res.message);
      return exit_numerical;
    }
    std::cout << "trained " << res.steps_done << " steps, final loss " << res.log.back().loss << "\n";
    run.finish(0);
    return 0;
  } catch (...) {
    run.finish(1, "failed");
    throw;
  }
}

// ---- fine-tuning ------------------------------------------------------------

struct TaskArgs {
  std::string checkpoint, tokenizer, task, data;
};

void task_args(CLI::App* c, TaskArgs& a) {
  c->add_option("--checkpoint", a.checkpoint, "encoder checkpoint")->required();
  c->add_option("--tokenizer", a.tokenizer, "vocab.json")->required();
  c->add_option("--task", a.task, "sts, rte, stsb, mrpc, wnli or rte-plue")->required();
  c->add_option("--data", a.data, "directory with train.tsv, [dev.tsv,] test.tsv")->required();
}

json finetune_defaults() {
  finetune::FinetuneOptions f;
  return json{{"epochs", f.epochs}, {"batch_size", f.batch_size}, {"weight_decay", f.weight_decay}, {"max_len", 128}};
}

void finetune_common_overrides(CLI::App* c, Overrides& o) {
  o.value(c, "--epochs", "epochs", "fine-tuning epochs");
  o.value(c, "--batch-size", "batch_size", "examples per batch");
  o.value(c, "--weight-decay", "weight_decay", "AdamW weight decay");
  o.value(c, "--max-len", "max_len", "pair truncation length (capped by the checkpoint)");
}

finetune::FinetuneOptions finetune_options(const Settings& s) {
  return {s.get<std::size_t>("epochs"), s.get<std::size_t>("batch_size"), s.get<double>("weight_decay")};
}

finetune::EncodedTask load_encoded_task(Run& run, const TaskArgs& a, const tokenizer::TokenizerModel& tok,
                                        std::size_t max_len, std::uint64_t seed) {
  auto spec = finetune::TaskSpec::builtin(a.task);
  const fs::path dir = a.data;
  for (const char* f : {"train.tsv", "dev.tsv", "test.tsv"}) {
    if (fs::exists(dir / f)) run.note_input(dir / f);
  }
  auto data = finetune::load_task_dir(dir, spec, seed);
  return {spec, finetune::encode_examples(tok, data.train, max_len), finetune::encode_examples(tok, data.dev, max_len),
          finetune::encode_examples(tok, data.test, max_len)};
}

finetune::Precision parse_precision(const std::string& p) {
  if (p == "fp32") return finetune::Precision::fp32;
  if (p == "fp16") return finetune::Precision::fp16;
  throw contract_error("precision must be fp32 or fp16");
}

int cmd_finetune(const Globals& g, const Overrides& o, const TaskArgs& a) {
  Run run("finetune", g);
  try {
    json d = finetune_defaults();
    d["dropout"] = 0.1;
    d["lr"] = 1e-5;
    d["precision"] = "fp32";
    d["run_seed"] = 42;
    auto s = resolve(d, g, "finetune", o);
    run.settings(s);
    auto ckpt = load_ckpt(run, a.checkpoint);
    auto tok = load_tokenizer(run, a.tokenizer);
    const auto max_len = std::min(s.get<std::size_t>("max_len"), ckpt.config.max_seq_len);
    auto task = load_encoded_task(run, a, tok, max_len, g.resolved_seed());
    finetune::GridPoint gp{s.get<double>("dropout"), s.get<double>("lr"), parse_precision(s.get<std::string>("precision")),
                           s.get<std::uint64_t>("run_seed")};
    const std::uint64_t seed = Rng(g.resolved_seed()).split("grid-run", {gp.seed}).seed();
    auto model = finetune::TaskModel<float>::attach(ckpt, task.spec, gp.dropout, seed);
    auto out = finetune::finetune(model, task.train, task.dev, gp.lr, gp.precision, seed, finetune_options(s));
    const double test = model.score(task.test);
    json meta{{"kind", "finetune"}, {"task", task.spec.name}, {"best_epoch", out.best_epoch}};
    const auto path = run.out("finetuned.ckpt");
    encoder::save_checkpoint(path, encoder::make_checkpoint(model.encoder().config(), model.parameters(), meta));
    run.note_output(path);
    json result{{"task", task.spec.name},   {"metric", finetune::metric_name(task.spec.metric)},
                {"dev", out.dev_score},     {"test", test},
                {"best_epoch", out.best_epoch}, {"dev_by_epoch", out.dev_by_epoch}};
    run.write("finetune.json", result.dump(2) + "\n");
    std::cout << task.spec.name << ": dev " << out.dev_score << ", test " << test << "\n";
    run.finish(0);
    return 0;
  } catch (...) {
    run.finish(1, "failed");
    throw;
  }
}

int cmd_sweep(const Globals& g, const Overrides& o, const TaskArgs& a) {
  Run run("sweep", g);
  try {
    json d = finetune_defaults();
    d["grid"] = "full";
    d["model_name"] = "";
    auto s = resolve(d, g, "sweep", o);
    run.settings(s);
    auto ckpt = load_ckpt(run, a.checkpoint);
    auto tok = load_tokenizer(run, a.tokenizer);
    const auto max_len = std::min(s.get<std::size_t>("max_len"), ckpt.config.max_seq_len);
    auto task = load_encoded_task(run, a, tok, max_len, g.resolved_seed());
    auto name = s.get<std::string>("model_name");
    if (name.empty()) name = fs::path(a.checkpoint).stem().string();
    auto rep = finetune::run_grid(ckpt, task, finetune::named_grid(s.get<std::string>("grid")), name,
                                  g.resolved_seed(), g.resolved_threads(), finetune_options(s));
    run.write("metrics_" + task.spec.name + ".json", rep.to_json().dump(2) + "\n");
    std::cout << rep.runs.size() << " runs, " << rep.configs.size() << " configurations, " << rep.failed << " failed\n";
    if (rep.selected) {
      const auto& c = rep.configs[*rep.selected];
      std::cout << "selected dropout " << c.point.dropout << " lr " << c.point.lr << " "
                << finetune::precision_name(c.point.precision) << ": dev " << c.dev_mean << ", test " << c.test_mean
                << "\n";
    }
    run.finish(0);
    return 0;
  } catch (...) {
    run.finish(1, "failed");
    throw;
  }
}

int cmd_eval(const Globals& g, const TaskArgs& a, const std::string& split) {
  Run run("eval", g);
  try {
    auto ckpt = load_ckpt(run, a.checkpoint);
    if (!ckpt.contains("head.weight")) throw data_error("checkpoint has no task head; run finetune first");
    auto tok = load_tokenizer(run, a.tokenizer);
    auto task = load_encoded_task(run, a, tok, ckpt.config.max_seq_len, g.resolved_seed());
    if (ckpt.tensor("head.bias").size() != task.spec.outputs()) throw data_error("checkpoint head does not fit this task");
    auto model = finetune::TaskModel<float>::attach(ckpt, task.spec, 0.0, 0);
    encoder::load_parameters(model.parameters(), ckpt);
    const auto& xs = split == "dev" ? task.dev : split == "train" ? task.train : task.test;
    const double score = model.score(xs);
    json out{{"task", task.spec.name}, {"metric", finetune::metric_name(task.spec.metric)}, {"split", split},
             {"examples", xs.size()}, {"score", score}};
    run.write("eval_" + task.spec.name + ".json", out.dump(2) + "\n");
    std::cout << task.spec.name << " " << split << " " << finetune::metric_name(task.spec.metric) << " " << score << "\n";
    run.finish(0);
    return 0;
  } catch (...) {
    run.finish(1, "failed");
    throw;
  }
}

int cmd_report(const Globals& g, const std::vector<std::string>& inputs) {
  Run run("report", g);
  try {
    std::vector<json> reports;
    for (const auto& p : inputs) {
      try {
        reports.push_back(json::parse(run.read_input(p)));
      } catch (const nlohmann::json::exception& e) {
        throw data_error(p + ": " + e.what());
      }
    }
    std::string csv;
    try {
      csv = finetune::summary_csv(reports);
    } catch (const nlohmann::json::exception& e) {
      throw data_error(std::string("not a metrics report: ") + e.what());
    }
    run.write("summary.csv", csv);
    std::cout << csv;
    run.finish(0);
    return 0;
  } catch (...) {
    run.finish(1, "failed");
    throw;
  }
}

int cmd_import_assin2(const Globals& g, const std::string& input, const std::string& task, const std::string& split) {
  Run run("import-assin2", g);
  try {
    auto spec = finetune::TaskSpec::builtin(task);
    std::istringstream in(run.read_input(input));
    auto xs = finetune::read_assin2_xml(in, spec);
    const auto which = split == "train" ? finetune::Assin2Split::train
                       : split == "dev" ? finetune::Assin2Split::dev
                                        : finetune::Assin2Split::test;
    if (auto w = finetune::assin2_size_warning(which, xs.size())) std::cerr << "warning: " << *w << "\n";
    run.write(split + ".tsv", finetune::task_tsv(xs));
    run.finish(0);
    return 0;
  } catch (...) {
    run.finish(1, "failed");
    throw;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lusoforge: Portuguese encoder pre-training and evaluation toolkit"};
  app.fallthrough();
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON configuration file");
  app.add_option("--seed", g.seed, "seed for every random stream");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads (default: LUSOFORGE_THREADS or 1)");

  auto* corpus_cmd = app.add_subcommand("corpus", "corpus filtering and statistics")->require_subcommand(1);
  std::string input, tokenizer_path;
  Overrides filter_o, tok_o, pre_o, ft_o, sweep_o;

  auto* filter = corpus_cmd->add_subcommand("filter", "TLD, quality and dedup filtering of a JSONL corpus");
  filter->add_option("--input", input, "documents (JSONL)")->required();
  corpus_overrides(filter, filter_o);

  auto* stats = corpus_cmd->add_subcommand("stats", "per-source document and token shares");
  stats->add_option("--input", input, "documents (JSONL)")->required();
  stats->add_option("--tokenizer", tokenizer_path, "count subword tokens with this vocab.json");

  auto* tok_cmd = app.add_subcommand("tokenizer", "tokenizer training")->require_subcommand(1);
  auto* tok_train = tok_cmd->add_subcommand("train", "learn a BPE vocabulary");
  tok_train->add_option("--input", input, "documents (JSONL)")->required();
  tok_o.value(tok_train, "--vocab-size", "vocab_size", "target vocabulary size");
  tok_o.value(tok_train, "--min-frequency", "min_frequency", "minimum pair count to merge");
  tok_o.value(tok_train, "--max-documents", "max_documents", "seeded sample of at most this many documents");

  auto* pre = app.add_subcommand("pretrain", "masked-LM pre-training");
  pre->add_option("--input", input, "documents (JSONL)")->required();
  pre->add_option("--tokenizer", tokenizer_path, "vocab.json")->required();
  pretrain_overrides(pre, pre_o);

  TaskArgs ta;
  auto* ft = app.add_subcommand("finetune", "fine-tune one grid point");
  task_args(ft, ta);
  finetune_common_overrides(ft, ft_o);
  ft_o.value(ft, "--dropout", "dropout", "dropout rate");
  ft_o.value(ft, "--lr", "lr", "constant learning rate");
  ft_o.value(ft, "--precision", "precision", "fp32 or fp16 (emulated)", Override::text);
  ft_o.value(ft, "--run-seed", "run_seed", "grid seed (41, 42, 43 in the full grid)");

  auto* sweep = app.add_subcommand("sweep", "hyper-parameter grid with dev-based selection");
  task_args(sweep, ta);
  finetune_common_overrides(sweep, sweep_o);
  sweep_o.value(sweep, "--grid", "grid", "full (36 runs) or single (3 runs)", Override::text);
  sweep_o.value(sweep, "--model-name", "model_name", "row label in reports", Override::text);

  std::string split = "test";
  auto* eval = app.add_subcommand("eval", "score a fine-tuned checkpoint");
  task_args(eval, ta);
  eval->add_option("--split", split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));

  std::vector<std::string> reports;
  auto* report = app.add_subcommand("report", "models x tasks CSV from metrics reports");
  report->add_option("--input", reports, "metrics_*.json files")->required();

  std::string xml, assin_task = "sts";
  auto* imp = app.add_subcommand("import-assin2", "convert ASSIN 2 XML to the task TSV format");
  imp->add_option("--input", xml, "ASSIN 2 XML file")->required();
  imp->add_option("--task", assin_task, "sts or rte")->check(CLI::IsMember({"sts", "rte"}));
  imp->add_option("--split", split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));

  if (argc <= 1) {
    std::cerr << app.help();
    return exit_usage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    std::cerr << app.help();
    return exit_usage;
  }

  try {
    if (!g.config_path.empty()) {
      try {
        g.config = json::parse(read_file(g.config_path));
      } catch (const nlohmann::json::exception& e) {
        throw data_error(g.config_path + ": " + e.what());
      }
      if (!g.config.is_object()) throw data_error(g.config_path + ": configuration must be a JSON object");
    }
    if (filter->parsed()) return cmd_corpus_filter(g, filter_o, input);
    if (stats->parsed()) return cmd_corpus_stats(g, input, tokenizer_path);
    if (tok_train->parsed()) return cmd_tokenizer_train(g, tok_o, input);
    if (pre->parsed()) return cmd_pretrain(g, pre_o, input, tokenizer_path);
    if (ft->parsed()) return cmd_finetune(g, ft_o, ta);
    if (sweep->parsed()) return cmd_sweep(g, sweep_o, ta);
    if (eval->parsed()) return cmd_eval(g, ta, split);
    if (report->parsed()) return cmd_report(g, reports);
    if (imp->parsed()) return cmd_import_assin2(g, xml, assin_task, split);
    std::cerr << app.help();
    return exit_usage;
  } catch (const data_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_data;
  } catch (const numerical_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_numerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_usage;
  }
}
