#pragma once

#include "cyb/metrics.hpp"
#include "cyb/model.hpp"
#include "cyb/sampling.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace cyb {

enum class LossWeighting { final_month_only, mean_over_months };

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int epochs = 150;
  int batch_size = 1;
  std::uint64_t seed = 0;
  LossWeighting loss_weighting = LossWeighting::mean_over_months;
  TargetTransform target = TargetTransform::identity;
  /// Validation cadence (epochs) for epoch-budget selection.
  int eval_every = 5;
  StrataPlan strata;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Optimiser and loss

using GradMap = std::map<std::string, Tensor>;

struct AdamWState {
  GradMap m;
  GradMap v;
  long step = 0;
};

/// Decoupled weight decay:
/// p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p.
void adamw_step(ModelParams& params, const GradMap& grads, AdamWState& state,
                const TrainConfig& config);

/// Squared error of the monthly series against one label.
Var loss(Var prediction, double target, LossWeighting weighting);

// ---------------------------------------------------------------------------
// Temporal splits

struct Fold {
  std::vector<int> train_years;
  std::vector<int> val_years;
};

struct SplitPlan {
  std::vector<int> test_years{2021, 2022};
  std::vector<Fold> folds;
};

/// Contiguous year blocks of the non-test years; earlier folds take the
/// remainder when the count does not divide evenly.
SplitPlan make_cv_split(std::vector<int> years, const std::vector<int>& test_years, int k = 5);

/// Train 2008-2018, validate 2019-2020, test 2021-2022 (restricted to `years`).
SplitPlan make_fixed_split(const std::vector<int>& years);

// ---------------------------------------------------------------------------
// Evaluation

struct Prediction {
  double observed = 0.0;
  double predicted = 0.0;
  std::string crop;
  int year = 0;
  std::string county;
};

struct SplitMetrics {
  std::string crop;  // crop name, or "ALL" for the pooled row
  Index n = 0;
  double r2 = 0.0;  // NaN when undefined (n < 2 or constant observations)
  double rmse = 0.0;
  double mae = 0.0;
};

struct SplitReport {
  std::string split;
  std::vector<SplitMetrics> per_crop;  // sorted by crop name
  SplitMetrics overall;
  double macro_r2 = 0.0;  // mean of defined per-crop R2
  std::vector<Prediction> scatter;
};

struct EvalReport {
  std::vector<SplitReport> splits;

  const SplitReport& at(const std::string& split) const;
};

/// Final-month predictions, mapped back to t/ha.
SplitReport evaluate_split(const std::string& split, const ModelParams& params,
                           const ModelConfig& config, TargetTransform target,
                           const std::vector<const CountyCropSample*>& samples);

SplitReport summarize(const std::string& split, std::vector<Prediction> predictions);

// ---------------------------------------------------------------------------
// Training

struct TrainHooks {
  std::function<void(int epoch, double mean_loss)> on_epoch;
  std::function<void(int epoch, double val_rmse)> on_validation;
};

struct TrainResult {
  ModelParams params;               // after the last epoch
  std::vector<double> epoch_loss;   // mean training loss per epoch
  std::vector<int> val_epochs;      // epochs at which validation ran
  std::vector<double> val_rmse;     // t/ha, aligned with val_epochs
  int best_epoch = 0;               // argmin of val_rmse (0 without validation)
  ModelParams best_params;          // snapshot at best_epoch
};

/// Mean training loss and gradient over `batch`, summed in order.
double batch_gradient(const ModelParams& params, const ModelConfig& config,
                      const TrainConfig& train, const std::vector<const CountyCropSample*>& batch,
                      GradMap& grads, std::uint64_t dropout_key = 0);

TrainResult train_model(const ModelConfig& config, const TrainConfig& train,
                        const std::vector<const CountyCropSample*>& train_set,
                        const std::vector<const CountyCropSample*>& val_set = {},
                        const TrainHooks& hooks = {});

struct CvResult {
  std::vector<EvalReport> folds;     // each holds "train" and "val" splits
  std::vector<int> checkpoint_epochs;
  std::vector<double> mean_val_rmse;  // across folds, per checkpoint epoch
  int chosen_epochs = 0;
  ModelParams final_params;
  EvalReport test;                    // "train" (all non-test years) and "test"
};

/// Cross-validated epoch budget, then a final model on all non-test years.
CvResult run_cv(const std::vector<CountyCropSample>& samples, const SplitPlan& split,
                const TrainConfig& train, const ModelConfig& config, const TrainHooks& hooks = {});

struct FixedSplitResult {
  TrainResult training;
  EvalReport report;  // "train", "val", "test"
};

/// One model on the first fold's train years, snapshot chosen by validation RMSE.
FixedSplitResult run_fixed_split(const std::vector<CountyCropSample>& samples,
                                 const SplitPlan& split, const TrainConfig& train,
                                 const ModelConfig& config, const TrainHooks& hooks = {});

/// Applies the stratified pixel sampler to every sample.
std::vector<CountyCropSample> prepare_samples(const std::vector<CountyCropSample>& samples,
                                              const StrataPlan& plan);

std::vector<const CountyCropSample*> select_years(const std::vector<CountyCropSample>& samples,
                                                  const std::vector<int>& years);

// ---------------------------------------------------------------------------
// Reports

/// Writes metrics.tsv (per crop and pooled, per split), summary.tsv and one
/// scatter_<split>.tsv per split.
void write_report(const EvalReport& report, const std::filesystem::path& out_dir);

std::string format_metric(double v);

}  // namespace cyb
