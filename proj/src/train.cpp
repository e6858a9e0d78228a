#include "cyb/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

namespace cyb {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
  if (strata.num_strata < 1 || strata.target_k < strata.num_strata) {
    throw std::invalid_argument("sampling needs at least one stratum and K >= num_strata");
  }
}

// ---------------------------------------------------------------------------
// Optimiser and loss

void adamw_step(ModelParams& params, const GradMap& grads, AdamWState& state,
                const TrainConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params.weights) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    if (it->second.shape() != p.shape()) {
      throw DimensionError("gradient for " + name + " has shape " + shape_str(it->second.shape()) +
                           ", parameter is " + shape_str(p.shape()));
    }
    const auto g = it->second.data().array();
    auto [mi, m_new] = state.m.try_emplace(name, Tensor(p.shape()));
    auto [vi, v_new] = state.v.try_emplace(name, Tensor(p.shape()));
    auto m = mi->second.data().array();
    auto v = vi->second.data().array();
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
    auto w = p.data().array();
    w = w - cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * w;
  }
}

Var loss(Var prediction, double target, LossWeighting weighting) {
  Tape& tape = *prediction.tape;
  Var y = prediction;
  if (weighting == LossWeighting::final_month_only) {
    const Index months = prediction.numel();
    y = take_row(reshape(prediction, {months, 1}), months - 1);
  }
  Var err = sub(y, tape.constant(Tensor::scalar(target)));
  return mean_all(mul(err, err));
}

// ---------------------------------------------------------------------------
// Splits

SplitPlan make_cv_split(std::vector<int> years, const std::vector<int>& test_years, int k) {
  if (k < 2) throw std::invalid_argument("cross-validation needs at least 2 folds");
  std::sort(years.begin(), years.end());
  years.erase(std::unique(years.begin(), years.end()), years.end());
  std::vector<int> pool;
  for (int y : years) {
    if (std::find(test_years.begin(), test_years.end(), y) == test_years.end()) pool.push_back(y);
  }
  if (static_cast<int>(pool.size()) < k) {
    throw std::invalid_argument("only " + std::to_string(pool.size()) +
                                " non-test years available for " + std::to_string(k) +
                                " folds; reduce the fold count to at most " +
                                std::to_string(pool.size()));
  }
  SplitPlan plan;
  plan.test_years = test_years;
  const std::size_t n = pool.size();
  const std::size_t base = n / static_cast<std::size_t>(k);
  const std::size_t extra = n % static_cast<std::size_t>(k);
  std::size_t begin = 0;
  for (int f = 0; f < k; ++f) {
    const std::size_t len = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    Fold fold;
    for (std::size_t i = 0; i < n; ++i) {
      (i >= begin && i < begin + len ? fold.val_years : fold.train_years).push_back(pool[i]);
    }
    plan.folds.push_back(std::move(fold));
    begin += len;
  }
  return plan;
}

SplitPlan make_fixed_split(const std::vector<int>& years) {
  SplitPlan plan;
  Fold fold;
  std::set<int> present(years.begin(), years.end());
  for (int y : present) {
    if (y >= 2008 && y <= 2018) fold.train_years.push_back(y);
    else if (y == 2019 || y == 2020) fold.val_years.push_back(y);
  }
  if (fold.train_years.empty() || fold.val_years.empty()) {
    throw std::invalid_argument("fixed split needs years in both 2008-2018 and 2019-2020");
  }
  plan.folds.push_back(std::move(fold));
  return plan;
}

// ---------------------------------------------------------------------------
// Evaluation

const SplitReport& EvalReport::at(const std::string& split) const {
  for (const auto& s : splits) {
    if (s.split == split) return s;
  }
  throw std::out_of_range("no split named '" + split + "' in report");
}

namespace {

SplitMetrics metrics_for(const std::string& label, const std::vector<Prediction>& preds) {
  SplitMetrics m;
  m.crop = label;
  m.n = static_cast<Index>(preds.size());
  if (preds.empty()) {
    m.r2 = m.rmse = m.mae = std::numeric_limits<double>::quiet_NaN();
    return m;
  }
  std::vector<double> obs, pred;
  for (const auto& p : preds) {
    obs.push_back(p.observed);
    pred.push_back(p.predicted);
  }
  const auto e = rmse_mae(obs, pred);
  m.rmse = e.rmse;
  m.mae = e.mae;
  try {
    m.r2 = r2(obs, pred);
  } catch (const UndefinedMetric&) {
    m.r2 = std::numeric_limits<double>::quiet_NaN();
  }
  return m;
}

}  // namespace

SplitReport summarize(const std::string& split, std::vector<Prediction> predictions) {
  SplitReport r;
  r.split = split;
  std::map<std::string, std::vector<Prediction>> by_crop;
  for (const auto& p : predictions) by_crop[p.crop].push_back(p);
  double r2_sum = 0.0;
  int r2_count = 0;
  for (const auto& [crop, preds] : by_crop) {
    r.per_crop.push_back(metrics_for(crop, preds));
    if (std::isfinite(r.per_crop.back().r2)) {
      r2_sum += r.per_crop.back().r2;
      ++r2_count;
    }
  }
  r.overall = metrics_for("ALL", predictions);
  r.macro_r2 = r2_count > 0 ? r2_sum / r2_count : std::numeric_limits<double>::quiet_NaN();
  r.scatter = std::move(predictions);
  return r;
}

SplitReport evaluate_split(const std::string& split, const ModelParams& params,
                           const ModelConfig& config, TargetTransform target,
                           const std::vector<const CountyCropSample*>& samples) {
  std::vector<Prediction> preds;
  preds.reserve(samples.size());
  for (const CountyCropSample* s : samples) {
    const Tensor series = predict(params, config, *s);
    Prediction p;
    p.observed = s->yield_t_ha;
    p.predicted = invert_target_transform(target, series[series.numel() - 1]);
    p.crop = s->crop_name;
    p.year = s->year;
    p.county = s->county_id;
    preds.push_back(std::move(p));
  }
  return summarize(split, std::move(preds));
}

// ---------------------------------------------------------------------------
// Training

double batch_gradient(const ModelParams& params, const ModelConfig& config,
                      const TrainConfig& train, const std::vector<const CountyCropSample*>& batch,
                      GradMap& grads, std::uint64_t dropout_key) {
  grads.clear();
  if (batch.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const CountyCropSample& s = *batch[i];
    Tape tape;
    const ParamVars vars = bind_params(tape, params, true);
    CounterRng rng(combine_key(dropout_key, static_cast<std::uint64_t>(i)));
    CounterRng* dropout_rng = config.dropout > 0.0 ? &rng : nullptr;
    const ForwardTrace tr = predict_series(tape, s, params, vars, config, dropout_rng);
    const Var l = loss(tr.series, apply_target_transform(train.target, s.yield_t_ha),
                       train.loss_weighting);
    total += l.value()[0];
    tape.backward(l);
    for (const auto& [name, var] : vars) {
      auto it = grads.find(name);
      if (it == grads.end()) grads.emplace(name, tape.grad(var));
      else it->second.data() += tape.grad(var).data();
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto& [name, g] : grads) g.data() *= inv;
  return total * inv;
}

namespace {

double rmse_of(const SplitReport& r) { return r.overall.rmse; }

}  // namespace

TrainResult train_model(const ModelConfig& config, const TrainConfig& train,
                        const std::vector<const CountyCropSample*>& train_set,
                        const std::vector<const CountyCropSample*>& val_set,
                        const TrainHooks& hooks) {
  config.validate();
  train.validate();
  if (train_set.empty()) throw std::invalid_argument("empty training set");

  TrainResult result;
  result.params = init_params(config);
  fit_input_normalizer(result.params, train_set);
  result.best_params = result.params;

  AdamWState state;
  GradMap grads;
  std::vector<std::size_t> order(train_set.size());
  std::vector<const CountyCropSample*> batch;
  double best = std::numeric_limits<double>::infinity();
  const std::uint64_t shuffle_key = combine_key(train.seed, std::string_view("shuffle"));
  const std::uint64_t dropout_key = combine_key(train.seed, std::string_view("dropout"));

  for (int epoch = 1; epoch <= train.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(combine_key(shuffle_key, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    double epoch_loss = 0.0;
    std::size_t step = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(train.batch_size)) {
      batch.clear();
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(train.batch_size));
      for (std::size_t i = b; i < end; ++i) batch.push_back(train_set[order[i]]);
      const std::uint64_t key =
          combine_key(combine_key(dropout_key, static_cast<std::uint64_t>(epoch)), step++);
      epoch_loss += batch_gradient(result.params, config, train, batch, grads, key) *
                    static_cast<double>(batch.size());
      adamw_step(result.params, grads, state, train);
    }
    epoch_loss /= static_cast<double>(order.size());
    result.epoch_loss.push_back(epoch_loss);
    if (hooks.on_epoch) hooks.on_epoch(epoch, epoch_loss);
    if (!std::isfinite(epoch_loss)) throw std::runtime_error("training diverged (non-finite loss)");

    if (!val_set.empty() && (epoch % train.eval_every == 0 || epoch == train.epochs)) {
      const double rmse =
          rmse_of(evaluate_split("val", result.params, config, train.target, val_set));
      result.val_epochs.push_back(epoch);
      result.val_rmse.push_back(rmse);
      if (hooks.on_validation) hooks.on_validation(epoch, rmse);
      if (rmse < best) {
        best = rmse;
        result.best_epoch = epoch;
        result.best_params = result.params;
      }
    }
  }
  if (val_set.empty()) {
    result.best_epoch = train.epochs;
    result.best_params = result.params;
  }
  return result;
}

std::vector<CountyCropSample> prepare_samples(const std::vector<CountyCropSample>& samples,
                                              const StrataPlan& plan) {
  std::vector<CountyCropSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(subsample_pixels(s, plan));
  return out;
}

std::vector<const CountyCropSample*> select_years(const std::vector<CountyCropSample>& samples,
                                                  const std::vector<int>& years) {
  std::vector<const CountyCropSample*> out;
  for (const auto& s : samples) {
    if (std::find(years.begin(), years.end(), s.year) != years.end()) out.push_back(&s);
  }
  return out;
}

namespace {

std::vector<int> union_years(const Fold& f) {
  std::vector<int> y = f.train_years;
  y.insert(y.end(), f.val_years.begin(), f.val_years.end());
  std::sort(y.begin(), y.end());
  return y;
}

}  // namespace

CvResult run_cv(const std::vector<CountyCropSample>& samples, const SplitPlan& split,
                const TrainConfig& train, const ModelConfig& config, const TrainHooks& hooks) {
  if (split.folds.empty()) throw std::invalid_argument("split plan has no folds");
  const std::vector<CountyCropSample> prepared = prepare_samples(samples, train.strata);
  CvResult out;
  std::vector<std::vector<double>> curves;
  for (const Fold& fold : split.folds) {
    const auto tr = select_years(prepared, fold.train_years);
    const auto va = select_years(prepared, fold.val_years);
    if (va.empty()) throw std::invalid_argument("a validation fold has no samples");
    TrainResult r = train_model(config, train, tr, va, hooks);
    out.checkpoint_epochs = r.val_epochs;
    curves.push_back(r.val_rmse);
    EvalReport rep;
    rep.splits.push_back(evaluate_split("train", r.params, config, train.target, tr));
    rep.splits.push_back(evaluate_split("val", r.params, config, train.target, va));
    out.folds.push_back(std::move(rep));
  }
  out.mean_val_rmse.assign(out.checkpoint_epochs.size(), 0.0);
  for (const auto& c : curves) {
    for (std::size_t i = 0; i < c.size(); ++i) out.mean_val_rmse[i] += c[i] / curves.size();
  }
  const auto best = std::min_element(out.mean_val_rmse.begin(), out.mean_val_rmse.end());
  out.chosen_epochs = out.checkpoint_epochs.at(static_cast<std::size_t>(best - out.mean_val_rmse.begin()));

  TrainConfig final_cfg = train;
  final_cfg.epochs = out.chosen_epochs;
  const auto all_train = select_years(prepared, union_years(split.folds.front()));
  const auto test = select_years(prepared, split.test_years);
  TrainResult final_run = train_model(config, final_cfg, all_train, {}, hooks);
  out.final_params = std::move(final_run.params);
  out.test.splits.push_back(evaluate_split("train", out.final_params, config, train.target, all_train));
  if (!test.empty()) {
    out.test.splits.push_back(evaluate_split("test", out.final_params, config, train.target, test));
  }
  return out;
}

FixedSplitResult run_fixed_split(const std::vector<CountyCropSample>& samples,
                                 const SplitPlan& split, const TrainConfig& train,
                                 const ModelConfig& config, const TrainHooks& hooks) {
  if (split.folds.empty()) throw std::invalid_argument("split plan has no folds");
  const std::vector<CountyCropSample> prepared = prepare_samples(samples, train.strata);
  const Fold& fold = split.folds.front();
  const auto tr = select_years(prepared, fold.train_years);
  const auto va = select_years(prepared, fold.val_years);
  const auto te = select_years(prepared, split.test_years);
  FixedSplitResult out;
  out.training = train_model(config, train, tr, va, hooks);
  const ModelParams& p = out.training.best_params;
  out.report.splits.push_back(evaluate_split("train", p, config, train.target, tr));
  if (!va.empty()) out.report.splits.push_back(evaluate_split("val", p, config, train.target, va));
  if (!te.empty()) out.report.splits.push_back(evaluate_split("test", p, config, train.target, te));
  return out;
}

// ---------------------------------------------------------------------------
// Reports

std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

namespace {

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + p.string());
  return f;
}

void metrics_row(std::ostream& os, const std::string& split, const SplitMetrics& m) {
  os << m.crop << '\t' << split << '\t' << m.n << '\t' << format_metric(m.r2) << '\t'
     << format_metric(m.rmse) << '\t' << format_metric(m.mae) << '\n';
}

}  // namespace

void write_report(const EvalReport& report, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  {
    auto f = open_out(out_dir / "metrics.tsv");
    f << "crop\tsplit\tn\tr2\trmse_t_ha\tmae_t_ha\n";
    for (const auto& s : report.splits) {
      for (const auto& m : s.per_crop) metrics_row(f, s.split, m);
      metrics_row(f, s.split, s.overall);
    }
  }
  {
    auto f = open_out(out_dir / "summary.tsv");
    f << "split\tn\tpooled_r2\tmacro_r2\trmse_t_ha\tmae_t_ha\n";
    for (const auto& s : report.splits) {
      f << s.split << '\t' << s.overall.n << '\t' << format_metric(s.overall.r2) << '\t'
        << format_metric(s.macro_r2) << '\t' << format_metric(s.overall.rmse) << '\t'
        << format_metric(s.overall.mae) << '\n';
    }
  }
  for (const auto& s : report.splits) {
    auto f = open_out(out_dir / ("scatter_" + s.split + ".tsv"));
    for (const auto& p : s.scatter) {
      f << format_metric(p.observed) << '\t' << format_metric(p.predicted) << '\t' << p.crop << '\t'
        << p.year << '\t' << p.county << '\n';
    }
  }
}

}  // namespace cyb
