#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lusoforge/finetune/assin2.hpp"
#include "lusoforge/finetune/grid.hpp"
#include "test_util.hpp"

namespace lusoforge::finetune {
namespace {

// Textbook forms, deliberately different from the library's two-pass code.
double oracle_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

double oracle_f1(const std::vector<std::int64_t>& p, const std::vector<std::int64_t>& g) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 1 && g[i] == 1) tp += 1;
    if (p[i] == 1 && g[i] == 0) fp += 1;
    if (p[i] == 0 && g[i] == 1) fn += 1;
  }
  return tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
}

// metrics

TEST(Metrics, FixedExamplesExactly) {
  EXPECT_EQ(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6}), 1.0);
  EXPECT_EQ(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}), -1.0);
  EXPECT_EQ(pearson(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4}), 0.8);
  // TP=1, FP=1, FN=1
  EXPECT_EQ(f1_binary(std::vector<std::int64_t>{1, 1, 0}, std::vector<std::int64_t>{1, 0, 1}), 0.5);
  EXPECT_EQ(f1_binary(std::vector<std::int64_t>{0, 0}, std::vector<std::int64_t>{0, 0}), 0.0);
  EXPECT_EQ(f1_binary(std::vector<std::int64_t>{1, 0}, std::vector<std::int64_t>{1, 0}), 1.0);
  EXPECT_EQ(accuracy(std::vector<std::int64_t>{1, 0, 1}, std::vector<std::int64_t>{1, 0, 1}), 1.0);
  EXPECT_EQ(accuracy(std::vector<std::int64_t>{1, 0, 1, 1}, std::vector<std::int64_t>{1, 1, 1, 0}), 0.5);
}

TEST(Metrics, ErrorsOnDegenerateInput) {
  EXPECT_THROW(pearson(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), numerical_error);
  EXPECT_THROW(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{2, 2, 2}), numerical_error);
  EXPECT_THROW(pearson(std::vector<double>{1}, std::vector<double>{2}), contract_error);
  EXPECT_THROW(accuracy(std::vector<std::int64_t>{1}, std::vector<std::int64_t>{}), contract_error);
}

TEST(Metrics, AgreeWithBruteForceOn1000Cases) {
  Rng rng(17);
  for (int c = 0; c < 1000; ++c) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<double> x(n), y(n);
    std::vector<std::int64_t> p(n), g(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal(0, 2);
      y[i] = 0.5 * x[i] + rng.normal(0, 1);
      p[i] = static_cast<std::int64_t>(rng.below(2));
      g[i] = static_cast<std::int64_t>(rng.below(2));
    }
    EXPECT_NEAR(pearson(x, y), oracle_pearson(x, y), 1e-9);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) hits += p[i] == g[i];
    EXPECT_NEAR(accuracy(p, g), static_cast<double>(hits) / static_cast<double>(n), 1e-9);
    EXPECT_NEAR(f1_binary(p, g), oracle_f1(p, g), 1e-9);
  }
}

// data

std::vector<TaskExample> numbered(std::size_t n) {
  std::vector<TaskExample> xs;
  for (std::size_t i = 0; i < n; ++i) xs.push_back({"a" + std::to_string(i), "b", static_cast<double>(i % 2)});
  return xs;
}

TEST(Split, FloorForDev) {
  auto [tr, dv] = split_train_dev(numbered(100), 0.1, 1);
  EXPECT_EQ(tr.size(), 90u);
  EXPECT_EQ(dv.size(), 10u);
  auto [tr2, dv2] = split_train_dev(numbered(71), 0.1, 1);
  EXPECT_EQ(tr2.size(), 64u);
  EXPECT_EQ(dv2.size(), 7u);
  auto [tr3, dv3] = split_train_dev(numbered(2), 0.1, 1);
  EXPECT_EQ(dv3.size(), 1u);
}

TEST(Split, DeterministicDisjointExhaustive) {
  auto a = split_train_dev(numbered(50), 0.2, 3);
  auto b = split_train_dev(numbered(50), 0.2, 3);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < a.first.size(); ++i) EXPECT_EQ(a.first[i].sentence_a, b.first[i].sentence_a);
  for (const auto& x : a.first) seen.insert(x.sentence_a);
  for (const auto& x : a.second) EXPECT_TRUE(seen.insert(x.sentence_a).second);
  EXPECT_EQ(seen.size(), 50u);
  EXPECT_THROW(split_train_dev(numbered(1), 0.1, 1), data_error);
  EXPECT_THROW(split_train_dev(numbered(10), 1.0, 1), contract_error);
}

TEST(TaskTsv, RoundTripAndErrors) {
  const auto sts = TaskSpec::builtin("sts");
  std::vector<TaskExample> xs{{"O gato dorme.", "Um gato está a dormir.", 4.5}, {"Chove.", "Faz sol.", 1.0}};
  std::istringstream in(task_tsv(xs));
  auto back = read_task_tsv(in, sts);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].sentence_b, "Um gato está a dormir.");
  EXPECT_EQ(back[0].label, 4.5);
  std::istringstream bad_header("a\tb\tlabel\nx\ty\t1\n");
  EXPECT_THROW(read_task_tsv(bad_header, sts), data_error);
  std::istringstream out_of_range("sentence_a\tsentence_b\tlabel\nx\ty\t0.5\n");
  EXPECT_THROW(read_task_tsv(out_of_range, sts), data_error);
  std::istringstream bad_class("sentence_a\tsentence_b\tlabel\nx\ty\t2\n");
  EXPECT_THROW(read_task_tsv(bad_class, TaskSpec::builtin("rte")), data_error);
  std::istringstream fields("sentence_a\tsentence_b\tlabel\nx\t1\n");
  EXPECT_THROW(read_task_tsv(fields, TaskSpec::builtin("rte")), data_error);
}

TEST(TaskSpecTest, MetricMustMatchHead) {
  TaskSpec s{"x", HeadType::regression, Metric::accuracy};
  EXPECT_THROW(s.validate(), contract_error);
  EXPECT_NO_THROW(TaskSpec::builtin("mrpc").validate());
  EXPECT_THROW(TaskSpec::builtin("cola"), contract_error);
}

TEST(Assin2, ImportsBothTasks) {
  const std::string xml = R"(<?xml version="1.0" encoding="utf-8"?>
<entailment-corpus languages="pt-BR">
  <pair entailment="Entailment" id="1" similarity="4.5">
    <t>Uma mulher está a cortar cebolas.</t>
    <h>Uma mulher corta uma cebola.</h>
  </pair>
  <pair entailment="None" id="2" similarity="1.2">
    <t>Um homem toca guitarra.</t>
    <h>O cão corre no parque.</h>
  </pair>
</entailment-corpus>)";
  std::istringstream a(xml), b(xml);
  auto sts = read_assin2_xml(a, TaskSpec::builtin("sts"));
  auto rte = read_assin2_xml(b, TaskSpec::builtin("rte"));
  ASSERT_EQ(sts.size(), 2u);
  EXPECT_EQ(sts[1].label, 1.2);
  EXPECT_EQ(rte[0].label, 1.0);
  EXPECT_EQ(rte[1].label, 0.0);
  EXPECT_EQ(rte[0].sentence_a, "Uma mulher está a cortar cebolas.");
  EXPECT_TRUE(assin2_size_warning(Assin2Split::train, 2).has_value());
  EXPECT_FALSE(assin2_size_warning(Assin2Split::test, 2448).has_value());
  std::istringstream broken("<entailment-corpus><pair");
  EXPECT_THROW(read_assin2_xml(broken, TaskSpec::builtin("sts")), data_error);
}

// grid and selection

TEST(Grid, FullGridHas36DistinctPoints) {
  auto g = full_grid();
  ASSERT_EQ(g.size(), 36u);
  std::set<std::tuple<double, double, int, std::uint64_t>> seen;
  for (const auto& p : g) seen.insert({p.dropout, p.lr, static_cast<int>(p.precision), p.seed});
  EXPECT_EQ(seen.size(), 36u);
  EXPECT_EQ(named_grid("single").size(), 3u);
}

MetricsReport fake_report(const std::vector<double>& dev, const std::vector<double>& test) {
  MetricsReport r{"m", TaskSpec::builtin("rte"), {}, {}, std::nullopt, 0};
  auto grid = full_grid();
  for (std::size_t i = 0; i < dev.size(); ++i) {
    RunRecord rec{grid[i]};
    rec.ok = true;
    rec.dev = dev[i];
    rec.test = test[i];
    r.runs.push_back(rec);
  }
  summarize(r);
  return r;
}

TEST(Selection, OneConfigAveragesThreeSeeds) {
  auto r = fake_report({0.5, 0.6, 0.7}, {0.1, 0.2, 0.6});
  ASSERT_EQ(r.configs.size(), 1u);
  ASSERT_TRUE(r.selected);
  EXPECT_DOUBLE_EQ(r.configs[0].dev_mean, 0.6);
  EXPECT_DOUBLE_EQ(r.configs[0].test_mean, 0.3);
}

TEST(Selection, DevDecidesNotTest) {
  // config 0 wins on dev, config 1 has far better test scores
  auto r = fake_report({0.9, 0.9, 0.9, 0.5, 0.5, 0.5}, {0.1, 0.1, 0.1, 1.0, 1.0, 1.0});
  ASSERT_EQ(r.configs.size(), 2u);
  EXPECT_EQ(*r.selected, 0u);
  // ties keep the first
  auto t = fake_report({0.5, 0.5, 0.5, 0.5, 0.5, 0.5}, {0, 0, 0, 1, 1, 1});
  EXPECT_EQ(*t.selected, 0u);
}

TEST(Selection, InvariantUnderPositiveAffineDevTransform) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> dev(36), test(36);
    for (auto& v : dev) v = rng.uniform();
    for (auto& v : test) v = rng.uniform();
    auto base = fake_report(dev, test);
    const double a = 0.1 + 3 * rng.uniform(), b = rng.normal(0, 2);
    for (auto& v : dev) v = a * v + b;
    for (auto& v : test) v = rng.uniform();
    auto moved = fake_report(dev, test);
    EXPECT_EQ(base.configs.size(), 12u);
    EXPECT_EQ(*base.selected, *moved.selected);
  }
}

TEST(Selection, FailedRunsAreExcludedAndCounted) {
  auto r = fake_report({0.2, 0.3, 0.4, 0.9, 0.9, 0.9}, {0, 0, 0, 0.5, 0.5, 0.5});
  r.runs[3].ok = r.runs[4].ok = r.runs[5].ok = false;
  r.runs[3].error = "boom";
  summarize(r);
  EXPECT_EQ(r.failed, 3u);
  EXPECT_EQ(*r.selected, 0u);
  auto j = r.to_json();
  EXPECT_EQ(j["failed_runs"], 3);
  EXPECT_FALSE(j["configs"][1].contains("dev_mean"));
  EXPECT_EQ(j["runs"][3]["error"], "boom");
}

TEST(Report, SummaryCsvRowsAreModels) {
  auto a = fake_report({0.5, 0.6, 0.7}, {0.25, 0.25, 0.25}).to_json();
  auto b = a;
  b["task"] = "sts";
  auto c = a;
  c["model"] = "other";
  EXPECT_EQ(summary_csv({a, b, c}), "model,rte,sts\nm,0.2500,0.2500\nother,0.2500,\n");
}

// models

constexpr std::size_t V = 64;

encoder::Checkpoint random_checkpoint(const std::string& preset, std::uint64_t seed) {
  auto cfg = encoder::EncoderConfig::preset(preset, V);
  cfg.max_seq_len = 32;
  encoder::Encoder<float> enc(cfg, seed);
  return encoder::make_checkpoint(cfg, enc.parameters());
}

// [CLS] marker x x [SEP] x x x [SEP]; the marker decides the class
std::vector<EncodedExample> marker_task(std::size_t n, std::uint64_t seed, bool regression = false) {
  Rng rng(seed);
  std::vector<EncodedExample> xs;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = rng.below(2) == 1;
    EncodedExample x;
    x.ids = {2, pos ? 5 : 6};
    for (int k = 0; k < 2; ++k) x.ids.push_back(static_cast<std::int64_t>(7 + rng.below(V - 7)));
    x.ids.push_back(3);
    x.segments.assign(x.ids.size(), 0);
    for (int k = 0; k < 3; ++k) {
      x.ids.push_back(static_cast<std::int64_t>(7 + rng.below(V - 7)));
      x.segments.push_back(1);
    }
    x.ids.push_back(3);
    x.segments.push_back(1);
    x.label = regression ? (pos ? 4.0 + rng.uniform() : 1.0 + rng.uniform()) : (pos ? 1.0 : 0.0);
    xs.push_back(std::move(x));
  }
  return xs;
}

TEST(Head, ShapesAndInitialisation) {
  auto ck = random_checkpoint("micro", 1);
  auto reg = TaskModel<float>::attach(ck, TaskSpec::builtin("sts"), 0.1, 7);
  auto cls = TaskModel<float>::attach(ck, TaskSpec::builtin("rte"), 0.1, 7);
  auto cls2 = TaskModel<float>::attach(ck, TaskSpec::builtin("rte"), 0.1, 8);
  auto xs = marker_task(5, 1);
  std::vector<std::size_t> idx{0, 1, 2, 3, 4};
  ad::Graph<float> g;
  EXPECT_EQ(reg.forward(g, make_input(xs, idx)).shape(), (Shape{5, 1}));
  EXPECT_EQ(cls.forward(g, make_input(xs, idx)).shape(), (Shape{5, 2}));
  for (const auto& t : ck.tensors) {
    const auto& p = cls.parameters().at(t.name).value;
    for (std::size_t i = 0; i < p.size(); ++i) ASSERT_EQ(p[i], t.value[i]) << t.name;
  }
  EXPECT_NE(cls.parameters().at("head.weight").value[0], cls2.parameters().at("head.weight").value[0]);
  EXPECT_EQ(cls.encoder().config().dropout_rate, 0.1);
}

TEST(Finetune, ZeroLrKeepsEncoderAndScore) {
  auto ck = random_checkpoint("micro", 2);
  auto train = marker_task(32, 1), dev = marker_task(16, 2);
  auto m = TaskModel<float>::attach(ck, TaskSpec::builtin("rte"), 0.0, 3);
  const double before = m.score(dev);
  auto out = finetune(m, train, dev, 0.0, Precision::fp32, 3);
  EXPECT_EQ(out.dev_score, before);
  EXPECT_EQ(out.best_epoch, 1u);
  for (double s : out.dev_by_epoch) EXPECT_EQ(s, before);
  for (const auto& t : ck.tensors) {
    const auto& p = m.parameters().at(t.name).value;
    for (std::size_t i = 0; i < p.size(); ++i) ASSERT_EQ(p[i], t.value[i]) << t.name;
  }
}

TEST(Finetune, SameGridPointIsDeterministic) {
  auto ck = random_checkpoint("micro", 2);
  auto train = marker_task(32, 1), dev = marker_task(16, 2);
  auto a = TaskModel<float>::attach(ck, TaskSpec::builtin("sts"), 0.1, 4);
  auto b = TaskModel<float>::attach(ck, TaskSpec::builtin("sts"), 0.1, 4);
  auto train_r = marker_task(32, 1, true), dev_r = marker_task(16, 2, true);
  auto oa = finetune(a, train_r, dev_r, 1e-4, Precision::fp16, 4);
  auto ob = finetune(b, train_r, dev_r, 1e-4, Precision::fp16, 4);
  EXPECT_EQ(oa.dev_by_epoch, ob.dev_by_epoch);
  EXPECT_EQ(testing::relative_difference(a.parameters(), b.parameters()), 0.0);
}

TEST(Finetune, Fp16KeepsParametersOnTheHalfGrid) {
  auto ck = random_checkpoint("micro", 2);
  auto m = TaskModel<float>::attach(ck, TaskSpec::builtin("rte"), 0.0, 5);
  finetune(m, marker_task(32, 1), marker_task(16, 2), 1e-4, Precision::fp16, 5, {1, 16, 0.0});
  for (const auto& p : m.parameters()) {
    for (float v : p.value.data()) ASSERT_EQ(v, round_to_half(v)) << p.name;
  }
}

TEST(Finetune, BestEpochWeightsAreKept) {
  auto ck = random_checkpoint("micro", 2);
  auto train = marker_task(32, 1, true), dev = marker_task(16, 2, true);
  auto m = TaskModel<float>::attach(ck, TaskSpec::builtin("sts"), 0.0, 6);
  auto out = finetune(m, train, dev, 1e-3, Precision::fp32, 6);
  EXPECT_EQ(out.dev_by_epoch.size(), 5u);
  EXPECT_EQ(out.dev_score, *std::max_element(out.dev_by_epoch.begin(), out.dev_by_epoch.end()));
  EXPECT_EQ(m.score(dev), out.dev_score);
  EXPECT_THROW(finetune(m, train, {}, 1e-3, Precision::fp32, 6), data_error);
}

TEST(Finetune, SeparableTaskReachesPerfectDevAccuracy) {
  auto ck = random_checkpoint("tiny", 3);
  auto train = marker_task(64, 11), dev = marker_task(32, 12);
  auto m = TaskModel<float>::attach(ck, TaskSpec::builtin("rte"), 0.0, 7);
  auto out = finetune(m, train, dev, 1e-4, Precision::fp32, 7);
  EXPECT_EQ(out.dev_score, 1.0);
}

TEST(RunGrid, FullSweepCountsAndThreadInvariance) {
  auto ck = random_checkpoint("micro", 4);
  EncodedTask task{TaskSpec::builtin("sts"), marker_task(32, 1, true), marker_task(16, 2, true),
                   marker_task(16, 3, true)};
  auto rep = run_grid(ck, task, full_grid(), "micro", 0, 1);
  EXPECT_EQ(rep.runs.size(), 36u);
  EXPECT_EQ(rep.configs.size(), 12u);
  ASSERT_TRUE(rep.selected);
  for (const auto& c : rep.configs) EXPECT_EQ(c.runs.size(), 3u);
  const auto& best = rep.configs[*rep.selected];
  for (const auto& c : rep.configs) {
    if (c.ok) EXPECT_LE(c.dev_mean, best.dev_mean);
  }
  auto rep2 = run_grid(ck, task, full_grid(), "micro", 0, 3);
  EXPECT_EQ(rep.to_json().dump(), rep2.to_json().dump());

  // scrambled test labels move the reported score but not the selection
  auto scrambled = task;
  for (auto& x : scrambled.test) x.label = 6.0 - x.label;
  auto rep3 = run_grid(ck, scrambled, full_grid(), "micro", 0, 1);
  EXPECT_EQ(rep3.selected, rep.selected);
  EXPECT_NE(rep3.configs[*rep3.selected].test_mean, best.test_mean);
}

}  // namespace
}  // namespace lusoforge::finetune
