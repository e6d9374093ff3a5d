#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lusoforge/core/parallel.hpp"
#include "lusoforge/encoder/checkpoint.hpp"
#include "lusoforge/finetune/model.hpp"

namespace lusoforge::finetune {

struct GridPoint {
  double dropout = 0.0;
  double lr = 1e-5;
  Precision precision = Precision::fp32;
  std::uint64_t seed = 42;

  bool same_config(const GridPoint& o) const {
    return dropout == o.dropout && lr == o.lr && precision == o.precision;
  }
};

/// dropout x lr x precision x seed, seed varying fastest: 2*3*2*3 = 36 points.
inline std::vector<GridPoint> full_grid() {
  std::vector<GridPoint> g;
  for (double d : {0.0, 0.1}) {
    for (double lr : {1e-6, 5e-6, 1e-5}) {
      for (auto p : {Precision::fp32, Precision::fp16}) {
        for (std::uint64_t s : {41, 42, 43}) g.push_back({d, lr, p, s});
      }
    }
  }
  return g;
}

/// "full" (36 points) or "single" (the first configuration with its three seeds).
inline std::vector<GridPoint> named_grid(const std::string& name) {
  auto g = full_grid();
  if (name == "full") return g;
  if (name == "single") return {g.begin(), g.begin() + 3};
  throw contract_error("unknown grid '" + name + "' (expected full or single)");
}

struct RunRecord {
  GridPoint point;
  bool ok = false;
  std::string error;
  double dev = 0.0;
  double test = 0.0;
  std::size_t best_epoch = 0;
  std::vector<double> dev_by_epoch;
};

struct ConfigRow {
  GridPoint point;  // seed unused
  std::vector<std::size_t> runs;
  std::size_t ok = 0;
  double dev_mean = 0.0;
  double test_mean = 0.0;
};

struct MetricsReport {
  std::string model;
  TaskSpec task;
  std::vector<RunRecord> runs;
  std::vector<ConfigRow> configs;
  std::optional<std::size_t> selected;  // index into configs
  std::size_t failed = 0;

  nlohmann::ordered_json to_json() const {
    auto point = [](const GridPoint& p, bool with_seed) {
      nlohmann::ordered_json j{{"dropout", p.dropout}, {"lr", p.lr}, {"precision", precision_name(p.precision)}};
      if (with_seed) j["seed"] = p.seed;
      return j;
    };
    nlohmann::ordered_json j;
    j["model"] = model;
    j["task"] = task.name;
    j["metric"] = metric_name(task.metric);
    j["failed_runs"] = failed;
    j["runs"] = nlohmann::ordered_json::array();
    for (const auto& r : runs) {
      nlohmann::ordered_json x{{"grid_point", point(r.point, true)}, {"ok", r.ok}};
      if (r.ok) {
        x["dev"] = r.dev;
        x["test"] = r.test;
        x["best_epoch"] = r.best_epoch;
        x["dev_by_epoch"] = r.dev_by_epoch;
      } else {
        x["error"] = r.error;
      }
      j["runs"].push_back(std::move(x));
    }
    j["configs"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < configs.size(); ++i) {
      const auto& c = configs[i];
      nlohmann::ordered_json x = point(c.point, false);
      x["runs"] = c.runs.size();
      x["ok_runs"] = c.ok;
      if (c.ok > 0) {
        x["dev_mean"] = c.dev_mean;
        x["test_mean"] = c.test_mean;
      }
      x["selected"] = selected == i;
      j["configs"].push_back(std::move(x));
    }
    if (selected) {
      nlohmann::ordered_json s = point(configs[*selected].point, false);
      s["dev_mean"] = configs[*selected].dev_mean;
      s["test_mean"] = configs[*selected].test_mean;
      j["selected"] = std::move(s);
    } else {
      j["selected"] = nullptr;
    }
    return j;
  }
};

/// Groups runs by (dropout, lr, precision) in first-appearance order, averages
/// the successful seeds and selects the best dev mean (first one on ties).
/// Test scores are averaged for reporting only.
inline void summarize(MetricsReport& rep) {
  rep.configs.clear();
  rep.selected.reset();
  rep.failed = 0;
  for (std::size_t i = 0; i < rep.runs.size(); ++i) {
    const auto& r = rep.runs[i];
    rep.failed += !r.ok;
    auto it = std::find_if(rep.configs.begin(), rep.configs.end(),
                           [&](const ConfigRow& c) { return c.point.same_config(r.point); });
    if (it == rep.configs.end()) {
      rep.configs.push_back({r.point, {}, 0, 0.0, 0.0});
      it = rep.configs.end() - 1;
    }
    it->runs.push_back(i);
  }
  for (std::size_t c = 0; c < rep.configs.size(); ++c) {
    auto& row = rep.configs[c];
    double dev = 0.0, test = 0.0;
    for (auto i : row.runs) {
      if (!rep.runs[i].ok) continue;
      ++row.ok;
      dev += rep.runs[i].dev;
      test += rep.runs[i].test;
    }
    if (row.ok == 0) continue;
    row.dev_mean = dev / static_cast<double>(row.ok);
    row.test_mean = test / static_cast<double>(row.ok);
    if (!rep.selected || row.dev_mean > rep.configs[*rep.selected].dev_mean) rep.selected = c;
  }
}

struct EncodedTask {
  TaskSpec spec;
  std::vector<EncodedExample> train, dev, test;
};

/// Fine-tunes one model per grid point (worker threads own their models) and
/// reduces the results in grid order. A run that throws is recorded as failed.
inline MetricsReport run_grid(const encoder::Checkpoint& ckpt, const EncodedTask& task,
                              const std::vector<GridPoint>& grid, const std::string& model_name,
                              std::uint64_t base_seed = 0, std::size_t threads = 1, const FinetuneOptions& opt = {}) {
  if (grid.empty()) throw contract_error("empty hyper-parameter grid");
  task.spec.validate();
  auto runs = parallel_map<RunRecord>(grid.size(), threads, [&](std::size_t i) {
    RunRecord r{grid[i]};
    const std::uint64_t seed = Rng(base_seed).split("grid-run", {grid[i].seed}).seed();
    try {
      auto m = TaskModel<float>::attach(ckpt, task.spec, grid[i].dropout, seed);
      auto out = finetune(m, task.train, task.dev, grid[i].lr, grid[i].precision, seed, opt);
      r.dev = out.dev_score;
      r.best_epoch = out.best_epoch;
      r.dev_by_epoch = out.dev_by_epoch;
      r.test = m.score(task.test);
      r.ok = true;
    } catch (const error& e) {
      r.error = e.what();
    }
    return r;
  });
  MetricsReport rep{model_name, task.spec, std::move(runs), {}, std::nullopt, 0};
  summarize(rep);
  return rep;
}

/// Rows = models, columns = tasks; cells hold the selected configuration's mean test score.
inline std::string summary_csv(const std::vector<nlohmann::ordered_json>& reports) {
  std::vector<std::string> models, tasks;
  std::map<std::pair<std::string, std::string>, std::string> cell;
  auto add_unique = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto& r : reports) {
    const auto model = r.at("model").get<std::string>();
    const auto task = r.at("task").get<std::string>();
    add_unique(models, model);
    add_unique(tasks, task);
    if (!r.at("selected").is_null()) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f", r.at("selected").at("test_mean").get<double>());
      cell[{model, task}] = buf;
    }
  }
  std::string out = "model";
  for (const auto& t : tasks) out += "," + t;
  out += "\n";
  for (const auto& m : models) {
    out += m;
    for (const auto& t : tasks) {
      auto it = cell.find({m, t});
      out += "," + (it == cell.end() ? std::string() : it->second);
    }
    out += "\n";
  }
  return out;
}

}  // namespace lusoforge::finetune
