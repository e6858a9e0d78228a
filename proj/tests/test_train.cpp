#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cyb/metrics.hpp"
#include "cyb/synthgen.hpp"
#include "cyb/train.hpp"
#include "cyb/verify.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

using namespace cyb;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

std::vector<CountyCropSample> small_dataset(std::vector<int> years, int counties = 2, int crops = 3) {
  SynthConfig sc;
  sc.n_counties = counties;
  sc.n_crops = crops;
  sc.years = std::move(years);
  sc.pixels_n = {3, 6};
  sc.pixels_m = {1, 2};
  sc.noise_fraction = 0.0;
  sc.seed = 11;
  return synthesize(sc).samples;
}

std::vector<int> year_range(int a, int b) {
  std::vector<int> v;
  for (int y = a; y <= b; ++y) v.push_back(y);
  return v;
}

ModelConfig tiny_for(int crops) {
  auto c = ModelConfig::tiny();
  c.n_crops = crops;
  return c;
}

ModelParams one_param(double value) {
  ModelParams p;
  p.weights["w"] = Tensor({1}, {value});
  return p;
}

}  // namespace

TEST_CASE("metrics match brute force and the worked examples") {
  const auto r = check_metric_oracles(1000, 3);
  INFO(r.detail);
  CHECK(r.max_error <= 1e-9);
  CHECK(r2(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 4}) == doctest::Approx(0.5));
  const auto e = rmse_mae(std::vector<double>{0, 0}, std::vector<double>{3, 4});
  CHECK(e.rmse == doctest::Approx(std::sqrt(12.5)));
  CHECK(e.mae == doctest::Approx(3.5));
  CHECK_THROWS_AS(r2(std::vector<double>{2, 2}, std::vector<double>{1, 3}), UndefinedMetric);
  CHECK_THROWS_AS(r2(std::vector<double>{1}, std::vector<double>{1}), UndefinedMetric);
  CHECK_THROWS_AS(rmse_mae(std::vector<double>{1, 2}, std::vector<double>{1}), std::invalid_argument);
}

TEST_CASE("AdamW single step closed form") {
  TrainConfig tc;
  auto p = one_param(1.0);
  AdamWState st;
  adamw_step(p, GradMap{{"w", Tensor({1}, {1.0})}}, st, tc);
  // m_hat = v_hat = 1 after bias correction.
  const double expect = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8)) - 1e-4 * 0.01 * 1.0;
  CHECK(std::abs(p["w"][0] - expect) <= 1e-10);
  CHECK(std::abs(p["w"][0] - 0.9998990) <= 1e-10);
  CHECK(st.step == 1);

  // Second step against a hand-rolled recurrence.
  adamw_step(p, GradMap{{"w", Tensor({1}, {-0.5})}}, st, tc);
  const double m = 0.9 * 0.1 + 0.1 * -0.5, v = 0.999 * 0.001 + 0.001 * 0.25;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  const double expect2 = expect - 1e-4 * mh / (std::sqrt(vh) + 1e-8) - 1e-4 * 0.01 * expect;
  CHECK(std::abs(p["w"][0] - expect2) <= 1e-12);
}

TEST_CASE("AdamW with lr = 0 is the identity") {
  TrainConfig tc;
  tc.lr = 0.0;
  ModelParams p = init_params(tiny_for(2));
  const ModelParams before = p;
  GradMap g;
  CounterRng rng(1);
  for (const auto& [name, t] : p.weights) {
    Tensor gt(t.shape());
    for (Index i = 0; i < gt.numel(); ++i) gt[i] = rng.normal(0.0, 1.0);
    g[name] = gt;
  }
  AdamWState st;
  for (int i = 0; i < 3; ++i) adamw_step(p, g, st, tc);
  for (const auto& [name, t] : before.weights) CHECK(p[name] == t);
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
}

TEST_CASE("parameters without a gradient are left alone") {
  TrainConfig tc;
  ModelParams p = one_param(2.0);
  p.weights["u"] = Tensor({1}, {3.0});
  AdamWState st;
  adamw_step(p, GradMap{{"w", Tensor({1}, {1.0})}}, st, tc);
  CHECK(p["u"][0] == 3.0);
  CHECK_THROWS(adamw_step(p, GradMap{{"w", Tensor({2})}}, st, tc));
}

TEST_CASE("loss weighting examples") {
  Tape tape;
  Tensor pred = Tensor::constant({12}, 1.0);
  pred[11] = 3.0;
  CHECK(loss(tape.constant(pred), 1.0, LossWeighting::final_month_only).value()[0] == doctest::Approx(4.0));
  CHECK(loss(tape.constant(Tensor::constant({12}, 2.0)), 1.0, LossWeighting::mean_over_months).value()[0] ==
        doctest::Approx(1.0));
  CHECK(loss(tape.constant(pred), 1.0, LossWeighting::mean_over_months).value()[0] ==
        doctest::Approx(4.0 / 12.0));
}

TEST_CASE("cross-validation folds") {
  const auto plan = make_cv_split(year_range(2008, 2022), {2021, 2022});
  REQUIRE(plan.folds.size() == 5);
  std::multiset<int> seen_val;
  for (const auto& f : plan.folds) {
    for (int y : f.val_years) {
      seen_val.insert(y);
      CHECK(std::find(f.train_years.begin(), f.train_years.end(), y) == f.train_years.end());
    }
    CHECK(f.train_years.size() + f.val_years.size() == 13);
    for (int y : f.train_years) CHECK((y != 2021 && y != 2022));
  }
  CHECK(seen_val.size() == 13);
  CHECK(std::set<int>(seen_val.begin(), seen_val.end()).size() == 13);

  const auto ten = make_cv_split(year_range(2009, 2018), {});
  for (const auto& f : ten.folds) CHECK(f.val_years.size() == 2);
  CHECK(ten.folds[0].val_years == std::vector<int>{2009, 2010});

  try {
    make_cv_split({2008, 2009, 2010, 2021}, {2021, 2022});
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("3") != std::string::npos);
  }
}

TEST_CASE("fixed split") {
  const auto plan = make_fixed_split(year_range(2008, 2022));
  REQUIRE(plan.folds.size() == 1);
  CHECK(plan.folds[0].train_years == year_range(2008, 2018));
  CHECK(plan.folds[0].val_years == std::vector<int>{2019, 2020});
  CHECK(plan.test_years == std::vector<int>{2021, 2022});
  CHECK_THROWS_AS(make_fixed_split(year_range(2008, 2016)), std::invalid_argument);
}

TEST_CASE("summaries and report files") {
  std::vector<Prediction> preds;
  const std::vector<std::string> crops{"almonds", "grapes", "walnuts"};
  for (int i = 0; i < 12; ++i) {
    preds.push_back({1.0 + i, 1.5 + i, crops[static_cast<std::size_t>(i % 3)], 2021 + i % 2, "C00"});
  }
  const auto rep = summarize("test", preds);
  REQUIRE(rep.per_crop.size() == 3);
  CHECK(rep.per_crop[0].crop == "almonds");
  CHECK(rep.overall.crop == "ALL");
  CHECK(rep.overall.n == 12);
  CHECK(rep.overall.rmse == doctest::Approx(0.5));
  CHECK(rep.overall.mae == doctest::Approx(0.5));
  for (const auto& m : rep.per_crop) CHECK(m.n == 4);

  EvalReport er;
  er.splits.push_back(rep);
  er.splits.push_back(summarize("train", {preds[0]}));
  CHECK(std::isnan(er.at("train").overall.r2));
  CHECK_THROWS(er.at("val"));

  const fs::path a = fs::temp_directory_path() / "cyb_report_a";
  const fs::path b = fs::temp_directory_path() / "cyb_report_b";
  fs::remove_all(a);
  fs::remove_all(b);
  write_report(er, a);
  write_report(er, b);
  CHECK(count_lines(a / "metrics.tsv") == 1 + 4 + 2);
  CHECK(count_lines(a / "scatter_test.tsv") == 12);
  CHECK(count_lines(a / "summary.tsv") == 3);
  for (const char* f : {"metrics.tsv", "summary.tsv", "scatter_test.tsv", "scatter_train.tsv"}) {
    CHECK(slurp(a / f) == slurp(b / f));
  }
  CHECK(slurp(a / "metrics.tsv").rfind("crop\tsplit\tn\tr2\trmse_t_ha\tmae_t_ha\n", 0) == 0);
  CHECK(format_metric(std::nan("")) == "nan");
  CHECK(format_metric(0.5) == "0.500000");
}

TEST_CASE("cross-validation keeps test years out of training and validation") {
  const auto data = small_dataset(year_range(2008, 2022), 2, 2);
  TrainConfig tc;
  tc.epochs = 4;
  tc.eval_every = 2;
  tc.batch_size = 4;
  tc.strata = StrataPlan{2, 4, 0};
  const auto plan = make_cv_split(year_range(2008, 2022), {2021, 2022});
  const auto cv = run_cv(data, plan, tc, tiny_for(2));
  REQUIRE(cv.folds.size() == 5);
  CHECK(cv.checkpoint_epochs == std::vector<int>{2, 4});
  CHECK(cv.mean_val_rmse.size() == 2);
  CHECK(cv.chosen_epochs >= 2);
  for (std::size_t k = 0; k < cv.folds.size(); ++k) {
    std::set<int> train_years, val_years;
    for (const auto& p : cv.folds[k].at("train").scatter) train_years.insert(p.year);
    for (const auto& p : cv.folds[k].at("val").scatter) val_years.insert(p.year);
    for (int y : val_years) CHECK(train_years.count(y) == 0);
    for (int y : {2021, 2022}) {
      CHECK(train_years.count(y) == 0);
      CHECK(val_years.count(y) == 0);
    }
  }
  for (const auto& p : cv.test.at("test").scatter) CHECK((p.year == 2021 || p.year == 2022));
  for (const auto& p : cv.test.at("train").scatter) CHECK(p.year <= 2020);
  CHECK(cv.test.at("test").scatter.size() == 2 * 2 * 2);
}

TEST_CASE("seeded training is bit-identical") {
  const auto data = small_dataset({2010, 2011, 2012});
  std::vector<const CountyCropSample*> set;
  for (const auto& s : data) set.push_back(&s);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 2;
  const auto cfg = tiny_for(3);
  const auto r1 = train_model(cfg, tc, set);
  const auto r2 = train_model(cfg, tc, set);
  const fs::path a = fs::temp_directory_path() / "cyb_det_a";
  const fs::path b = fs::temp_directory_path() / "cyb_det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  save_checkpoint({cfg, r1.params, {}, TargetTransform::identity}, a);
  save_checkpoint({cfg, r2.params, {}, TargetTransform::identity}, b);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    CHECK(slurp(e.path()) == slurp(b / fs::relative(e.path(), a)));
    ++files;
  }
  CHECK(files > 10);
  CHECK(r1.epoch_loss == r2.epoch_loss);

  tc.seed = 1;
  const auto r3 = train_model(cfg, tc, set);
  CHECK(r3.epoch_loss != r1.epoch_loss);
}

TEST_CASE("batch gradient is the mean of per-sample gradients") {
  const auto data = small_dataset({2010});
  const auto cfg = tiny_for(3);
  auto params = init_params(cfg);
  std::vector<const CountyCropSample*> set;
  for (const auto& s : data) set.push_back(&s);
  fit_input_normalizer(params, set);
  TrainConfig tc;
  GradMap all, one, two;
  const double l = batch_gradient(params, cfg, tc, {set[0], set[1]}, all);
  const double l1 = batch_gradient(params, cfg, tc, {set[0]}, one);
  const double l2 = batch_gradient(params, cfg, tc, {set[1]}, two);
  CHECK(l == doctest::Approx((l1 + l2) / 2.0));
  for (const auto& [name, g] : all) {
    const Tensor expect(g.shape(), (one.at(name).data() + two.at(name).data()) / 2.0);
    CHECK((g.data() - expect.data()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("training loss decreases on noiseless data") {
  const auto data = small_dataset(year_range(2008, 2011), 3, 3);
  std::vector<const CountyCropSample*> set;
  for (const auto& s : data) set.push_back(&s);
  TrainConfig tc;
  tc.epochs = 60;
  tc.lr = 1e-3;
  const auto r = train_model(tiny_for(3), tc, set);
  REQUIRE(r.epoch_loss.size() == 60);
  // Means over consecutive 5-epoch windows; transient rises up to 5% allowed.
  std::vector<double> smooth;
  for (std::size_t i = 0; i + 5 <= r.epoch_loss.size(); i += 5) {
    double s = 0.0;
    for (std::size_t k = i; k < i + 5; ++k) s += r.epoch_loss[k];
    smooth.push_back(s / 5.0);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) {
    INFO("window " << i << ": " << smooth[i - 1] << " -> " << smooth[i]);
    CHECK(smooth[i] <= 1.05 * smooth[i - 1]);
  }
  CHECK(smooth.back() < 0.5 * smooth.front());
}

TEST_CASE("config validation") {
  TrainConfig tc;
  CHECK_NOTHROW(tc.validate());
  tc.epochs = 0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.beta2 = 1.0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
}
