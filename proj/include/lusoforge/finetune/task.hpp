#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "lusoforge/core/error.hpp"
#include "lusoforge/core/io.hpp"
#include "lusoforge/core/random.hpp"

namespace lusoforge::finetune {

enum class HeadType { regression, binary_classification };
enum class Metric { pearson, accuracy, f1 };

inline std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::pearson: return "pearson";
    case Metric::accuracy: return "accuracy";
    case Metric::f1: return "f1";
  }
  return "?";
}

struct TaskSpec {
  std::string name;
  HeadType head = HeadType::binary_classification;
  Metric metric = Metric::accuracy;
  double label_min = 0.0;  // regression only
  double label_max = 5.0;

  void validate() const {
    const bool reg = head == HeadType::regression;
    if (reg != (metric == Metric::pearson)) {
      throw contract_error("task '" + name + "': pearson goes with regression, accuracy/f1 with classification");
    }
    if (reg && !(label_min < label_max)) throw contract_error("task '" + name + "': empty label range");
  }

  std::size_t outputs() const { return head == HeadType::regression ? 1 : 2; }

  /// sts/rte are the ASSIN 2 tasks; stsb, mrpc, wnli and rte-plue the GLUE-style ones.
  static TaskSpec builtin(const std::string& name) {
    if (name == "sts") return {name, HeadType::regression, Metric::pearson, 1.0, 5.0};
    if (name == "stsb") return {name, HeadType::regression, Metric::pearson, 0.0, 5.0};
    if (name == "rte" || name == "rte-plue" || name == "wnli") return {name, HeadType::binary_classification, Metric::accuracy};
    if (name == "mrpc") return {name, HeadType::binary_classification, Metric::f1};
    throw contract_error("unknown task '" + name + "' (expected sts, stsb, rte, rte-plue, wnli or mrpc)");
  }
};

struct TaskExample {
  std::string sentence_a;
  std::string sentence_b;
  double label = 0.0;
};

inline void check_label(const TaskSpec& spec, double label, const std::string& where) {
  if (spec.head == HeadType::regression) {
    if (!(label >= spec.label_min && label <= spec.label_max)) {
      throw data_error(where + ": label " + std::to_string(label) + " outside [" + std::to_string(spec.label_min) +
                       ", " + std::to_string(spec.label_max) + "]");
    }
  } else if (label != 0.0 && label != 1.0) {
    throw data_error(where + ": class label must be 0 or 1");
  }
}

/// Tab-separated, header `sentence_a<TAB>sentence_b<TAB>label`.
inline std::vector<TaskExample> read_task_tsv(std::istream& in, const TaskSpec& spec, std::string_view origin = "<tsv>") {
  std::string line;
  std::size_t lineno = 0;
  auto fields = [](const std::string& l) {
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= l.size(); ++i) {
      if (i == l.size() || l[i] == '\t') {
        f.push_back(l.substr(start, i - start));
        start = i + 1;
      }
    }
    if (!f.empty() && !f.back().empty() && f.back().back() == '\r') f.back().pop_back();
    return f;
  };
  if (!std::getline(in, line)) throw data_error(std::string(origin) + ": empty task file");
  ++lineno;
  if (fields(line) != std::vector<std::string>{"sentence_a", "sentence_b", "label"}) {
    throw data_error(std::string(origin) + ":1: expected header sentence_a<TAB>sentence_b<TAB>label");
  }
  std::vector<TaskExample> out;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = std::string(origin) + ":" + std::to_string(lineno);
    if (line.empty() || line == "\r") continue;
    auto f = fields(line);
    if (f.size() != 3) throw data_error(where + ": expected 3 tab-separated fields, got " + std::to_string(f.size()));
    double label = 0.0;
    auto [p, ec] = std::from_chars(f[2].data(), f[2].data() + f[2].size(), label);
    if (ec != std::errc{} || p != f[2].data() + f[2].size() || !std::isfinite(label)) {
      throw data_error(where + ": bad label '" + f[2] + "'");
    }
    check_label(spec, label, where);
    out.push_back({std::move(f[0]), std::move(f[1]), label});
  }
  return out;
}

inline std::vector<TaskExample> load_task_tsv(const std::filesystem::path& path, const TaskSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path.string());
  return read_task_tsv(in, spec, path.string());
}

inline std::string format_label(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string task_tsv(const std::vector<TaskExample>& xs) {
  auto clean = [](std::string s) {
    for (auto& c : s) {
      if (c == '\t' || c == '\n' || c == '\r') c = ' ';
    }
    return s;
  };
  std::string out = "sentence_a\tsentence_b\tlabel\n";
  for (const auto& x : xs) out += clean(x.sentence_a) + "\t" + clean(x.sentence_b) + "\t" + format_label(x.label) + "\n";
  return out;
}

/// Seeded shuffle, then the first floor(n * dev_fraction) examples (at least one) go to dev.
inline std::pair<std::vector<TaskExample>, std::vector<TaskExample>> split_train_dev(
    const std::vector<TaskExample>& xs, double dev_fraction, std::uint64_t seed) {
  if (!(dev_fraction > 0.0 && dev_fraction < 1.0)) throw contract_error("dev_fraction must lie in (0, 1)");
  if (xs.size() < 2) throw data_error("need at least two examples to split off a dev set");
  const std::size_t n = xs.size();
  std::size_t n_dev = static_cast<std::size_t>(std::floor(static_cast<double>(n) * dev_fraction + 1e-9));
  n_dev = std::clamp<std::size_t>(n_dev, 1, n - 1);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = Rng(seed).split("dev-split");
  rng.shuffle(idx.begin(), idx.end());
  std::vector<TaskExample> train, dev;
  for (std::size_t i = 0; i < n; ++i) (i < n_dev ? dev : train).push_back(xs[idx[i]]);
  return {std::move(train), std::move(dev)};
}

struct TaskData {
  TaskSpec spec;
  std::vector<TaskExample> train, dev, test;
};

/// Reads train.tsv, dev.tsv and test.tsv from `dir`. Without dev.tsv, 10% of
/// train is held out as dev.
inline TaskData load_task_dir(const std::filesystem::path& dir, const TaskSpec& spec, std::uint64_t seed) {
  TaskData d{spec, load_task_tsv(dir / "train.tsv", spec), {}, load_task_tsv(dir / "test.tsv", spec)};
  if (std::filesystem::exists(dir / "dev.tsv")) {
    d.dev = load_task_tsv(dir / "dev.tsv", spec);
  } else {
    std::tie(d.train, d.dev) = split_train_dev(d.train, 0.1, seed);
  }
  if (d.train.empty()) throw data_error("task '" + spec.name + "' has no training examples");
  if (d.dev.empty()) throw data_error("task '" + spec.name + "' has an empty dev split");
  if (d.test.empty()) throw data_error("task '" + spec.name + "' has an empty test split");
  return d;
}

}  // namespace lusoforge::finetune
