#include "cyb/datamodel.hpp"
#include "cyb/model.hpp"
#include "cyb/synthgen.hpp"
#include "cyb/train.hpp"
#include "cyb/verify.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitVerify = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

int verbosity = 1;

void log(int level, const std::string& msg) {
  if (level <= verbosity) std::cerr << msg << '\n';
}

std::string fixed6(double v) { return cyb::format_metric(v); }

// "2008:2015" (inclusive) or "2008,2010,2012".
std::vector<int> parse_years(const std::string& spec) {
  std::vector<int> years;
  try {
    const auto colon = spec.find(':');
    if (colon != std::string::npos) {
      const int a = std::stoi(spec.substr(0, colon));
      const int b = std::stoi(spec.substr(colon + 1));
      if (b < a) throw UsageError("year range " + spec + " runs backwards");
      for (int y = a; y <= b; ++y) years.push_back(y);
    } else {
      std::size_t pos = 0;
      while (pos <= spec.size()) {
        const auto comma = spec.find(',', pos);
        years.push_back(std::stoi(spec.substr(pos, comma - pos)));
        if (comma == std::string::npos) break;
        pos = comma + 1;
      }
    }
  } catch (const std::logic_error&) {
    throw UsageError("cannot parse years '" + spec + "' (use A:B or A,B,C)");
  }
  return years;
}

cyb::IntRange parse_range(const std::string& spec, const std::string& what) {
  const auto colon = spec.find(':');
  try {
    if (colon == std::string::npos) {
      const auto v = std::stol(spec);
      return {v, v};
    }
    cyb::IntRange r{std::stol(spec.substr(0, colon)), std::stol(spec.substr(colon + 1))};
    if (r.hi < r.lo) throw UsageError(what + " range " + spec + " runs backwards");
    return r;
  } catch (const std::invalid_argument&) {
    throw UsageError("cannot parse " + what + " '" + spec + "' (use LO:HI or N)");
  } catch (const std::out_of_range&) {
    throw UsageError("cannot parse " + what + " '" + spec + "' (use LO:HI or N)");
  }
}

cyb::ModelConfig model_preset(const std::string& name) {
  if (name == "desk") return cyb::ModelConfig::desk();
  if (name == "paper") return cyb::ModelConfig::paper();
  if (name == "tiny") return cyb::ModelConfig::tiny();
  throw UsageError("unknown model preset '" + name + "'");
}

/// Rewrites crop codes to the checkpoint's table; unknown crops are an error.
void remap_crops(std::vector<cyb::CountyCropSample>& samples, const std::vector<std::string>& names) {
  std::map<std::string, int> code;
  for (std::size_t i = 0; i < names.size(); ++i) code[names[i]] = static_cast<int>(i);
  for (auto& s : samples) {
    auto it = code.find(s.crop_name);
    if (it == code.end()) {
      throw std::runtime_error("sample crop '" + s.crop_name + "' (" + s.county_id + ", " +
                               std::to_string(s.year) + ") is not in the checkpoint's crop table");
    }
    s.crop_id = it->second;
  }
}

void print_split(const cyb::SplitReport& r) {
  std::cout << r.split << " r2 " << fixed6(r.overall.r2) << " rmse " << fixed6(r.overall.rmse)
            << " mae " << fixed6(r.overall.mae) << " n " << r.overall.n << '\n';
}

void write_lines(const fs::path& path, const std::string& header, const std::vector<std::string>& rows) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw cyb::IoError("cannot write " + path.string());
  os << header << '\n';
  for (const auto& r : rows) os << r << '\n';
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  int counties = 4;
  int crops = 6;
  std::string years = "2008:2022";
  std::string pixels_n = "16:48";
  std::string pixels_m = "1:3";
  double noise = 0.05;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  cyb::SynthConfig c;
  c.n_counties = a.counties;
  c.n_crops = a.crops;
  c.years = parse_years(a.years);
  c.pixels_n = parse_range(a.pixels_n, "--pixels-n");
  c.pixels_m = parse_range(a.pixels_m, "--pixels-m");
  c.noise_fraction = a.noise;
  c.seed = a.seed;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  log(1, "generating " + std::to_string(a.counties * a.crops * static_cast<int>(c.years.size())) +
             " samples");
  const auto data = cyb::synthesize(c);
  cyb::write_dataset(data, a.out);
  std::cout << "manifest " << (fs::path(a.out) / cyb::kManifestFile).string() << '\n';
  std::cout << "samples " << data.samples.size() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  bool fixed_split = false;
  int folds = 5;
  std::string model = "desk";
  int epochs = cyb::TrainConfig{}.epochs;
  double lr = cyb::TrainConfig{}.lr;
  double weight_decay = cyb::TrainConfig{}.weight_decay;
  int batch_size = cyb::TrainConfig{}.batch_size;
  int eval_every = cyb::TrainConfig{}.eval_every;
  double dropout = 0.0;
  std::string loss = "mean";
  std::string target = "identity";
  std::uint64_t seed = 0;
};

int cmd_train(const TrainArgs& a) {
  cyb::TrainConfig tc;
  tc.epochs = a.epochs;
  tc.lr = a.lr;
  tc.weight_decay = a.weight_decay;
  tc.batch_size = a.batch_size;
  tc.eval_every = a.eval_every;
  tc.seed = a.seed;
  tc.loss_weighting = a.loss == "final" ? cyb::LossWeighting::final_month_only
                                        : cyb::LossWeighting::mean_over_months;
  try {
    tc.target = cyb::parse_target_transform(a.target);
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  cyb::ModelConfig mc = model_preset(a.model);
  mc.dropout = a.dropout;
  mc.seed = a.seed;

  const fs::path data_root(a.data), out(a.out);
  const auto manifest = cyb::read_manifest(data_root);
  const auto samples = cyb::load_dataset(data_root, manifest);
  if (samples.empty()) throw std::runtime_error("dataset at " + data_root.string() + " is empty");
  mc.n_crops = static_cast<cyb::Index>(std::max<std::size_t>(1, manifest.crop_names.size()));
  std::vector<int> years;
  for (const auto& s : samples) years.push_back(s.year);
  log(1, "loaded " + std::to_string(samples.size()) + " samples from " + data_root.string());

  cyb::TrainHooks hooks;
  hooks.on_epoch = [&](int epoch, double l) {
    log(2, "epoch " + std::to_string(epoch) + " loss " + fixed6(l));
  };
  hooks.on_validation = [&](int epoch, double rmse) {
    log(1, "epoch " + std::to_string(epoch) + " val rmse " + fixed6(rmse));
  };

  fs::create_directories(out / "reports");
  cyb::Checkpoint ckpt{mc, {}, manifest.crop_names, tc.target};
  if (a.fixed_split) {
    const auto plan = cyb::make_fixed_split(years);
    const auto res = cyb::run_fixed_split(samples, plan, tc, mc, hooks);
    ckpt.params = res.training.best_params;
    cyb::write_report(res.report, out / "reports" / "fixed");
    std::vector<std::string> rows;
    for (std::size_t i = 0; i < res.training.epoch_loss.size(); ++i) {
      rows.push_back(std::to_string(i + 1) + "\t" + fixed6(res.training.epoch_loss[i]));
    }
    write_lines(out / "train_loss.tsv", "epoch\tloss", rows);
    log(1, "best epoch " + std::to_string(res.training.best_epoch));
    for (const auto& s : res.report.splits) print_split(s);
  } else {
    const auto plan = cyb::make_cv_split(years, {2021, 2022}, a.folds);
    const auto res = cyb::run_cv(samples, plan, tc, mc, hooks);
    ckpt.params = res.final_params;
    for (std::size_t k = 0; k < res.folds.size(); ++k) {
      cyb::write_report(res.folds[k], out / "reports" / ("fold_" + std::to_string(k)));
    }
    cyb::write_report(res.test, out / "reports" / "final");
    std::vector<std::string> rows;
    for (std::size_t i = 0; i < res.checkpoint_epochs.size(); ++i) {
      rows.push_back(std::to_string(res.checkpoint_epochs[i]) + "\t" + fixed6(res.mean_val_rmse[i]));
    }
    write_lines(out / "cv_curve.tsv", "epoch\tmean_val_rmse_t_ha", rows);
    std::cout << "chosen_epochs " << res.chosen_epochs << '\n';
    for (const auto& s : res.test.splits) print_split(s);
  }
  cyb::save_checkpoint(ckpt, out / "checkpoint");
  log(1, "checkpoint written to " + (out / "checkpoint").string());
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string data = ".";
  std::string sample;
  int month = 0;
};

int cmd_predict(const PredictArgs& a) {
  const auto ckpt = cyb::load_checkpoint(a.checkpoint);
  std::vector<cyb::CountyCropSample> one{cyb::read_sample(fs::path(a.data) / a.sample)};
  remap_crops(one, ckpt.crop_names);
  const auto prepared = cyb::prepare_samples(one, cyb::StrataPlan{});
  const cyb::Tensor series = cyb::predict(ckpt.params, ckpt.config, prepared.front());
  for (cyb::Index t = 0; t < series.numel(); ++t) {
    if (a.month != 0 && t + 1 != a.month) continue;
    std::cout << fixed6(cyb::invert_target_transform(ckpt.target, series[t])) << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string years = "2021:2022";
  std::string split = "test";
};

int cmd_eval(const EvalArgs& a) {
  const auto years = parse_years(a.years);
  const auto ckpt = cyb::load_checkpoint(a.checkpoint);
  const auto manifest = cyb::read_manifest(a.data);
  auto samples = cyb::load_dataset(a.data, manifest);
  remap_crops(samples, ckpt.crop_names);
  const auto prepared = cyb::prepare_samples(samples, cyb::StrataPlan{});
  const auto selected = cyb::select_years(prepared, years);
  if (selected.empty()) throw std::runtime_error("no samples in the requested years");
  cyb::EvalReport report;
  report.splits.push_back(cyb::evaluate_split(a.split, ckpt.params, ckpt.config, ckpt.target, selected));
  cyb::write_report(report, a.out);
  print_split(report.splits.front());
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
  int trials = 20;
  std::uint64_t seed = 0;
  bool inject = false;
};

int cmd_verify(const VerifyArgs& a) {
  cyb::VerifyOptions opts;
  opts.primitive_trials = a.trials;
  opts.seed = a.seed;
  opts.inject_backward_bug = a.inject;
  const auto start = std::chrono::steady_clock::now();
  const auto results = cyb::run_verification(opts);
  bool ok = true;
  for (const auto& r : results) {
    char err[32];
    std::snprintf(err, sizeof err, "%.3e", r.max_error);
    std::cout << (r.passed ? "PASS" : "FAIL") << "  " << r.name << "  max_error " << err << "  ("
              << r.detail << ")\n";
    ok = ok && r.passed;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log(1, "verification took " + std::to_string(secs) + " s");
  return ok ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal transformer crop yield pipeline"};
  app.set_config("--config", "", "TOML/INI file with the same keys as the flags; flags win");
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  int verbose = 0;
  app.add_flag("-q,--quiet", quiet, "Only errors on stderr");
  app.add_flag("-v,--verbose", verbose, "More progress output on stderr (repeatable)");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with known ground truth");
  synth->add_option("--counties", sa.counties, "Number of counties")->check(CLI::PositiveNumber);
  synth->add_option("--crops", sa.crops, "Number of crops (<= 70)")->check(CLI::Range(1, 70));
  synth->add_option("--years", sa.years, "Years as A:B inclusive or A,B,C")->capture_default_str();
  synth->add_option("--pixels-n", sa.pixels_n, "Landsat/ET/soil pixels per sample, LO:HI")->capture_default_str();
  synth->add_option("--pixels-m", sa.pixels_m, "Climate pixels per sample, LO:HI")->capture_default_str();
  synth->add_option("--noise", sa.noise, "Label noise sd as a fraction of each crop's peak yield")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  synth->add_option("--seed", sa.seed, "Generator seed")->capture_default_str();
  synth->add_option("--out", sa.out, "Dataset root to write")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train with temporal cross-validation or the fixed split");
  train->add_option("--data", ta.data, "Dataset root")->required();
  train->add_option("--out", ta.out, "Run directory for checkpoint and reports")->required();
  train->add_flag("--fixed-split", ta.fixed_split, "Train 2008-2018, validate 2019-2020, test 2021-2022");
  train->add_option("--folds", ta.folds, "Cross-validation folds")->check(CLI::Range(2, 100))->capture_default_str();
  train->add_option("--model", ta.model, "Model preset")
      ->check(CLI::IsMember({"desk", "paper", "tiny"}))
      ->capture_default_str();
  train->add_option("--epochs", ta.epochs, "Training epochs")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--lr", ta.lr, "AdamW learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--weight-decay", ta.weight_decay, "AdamW decoupled weight decay")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  train->add_option("--batch-size", ta.batch_size, "Samples per optimiser step")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train->add_option("--eval-every", ta.eval_every, "Validation cadence in epochs")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train->add_option("--dropout", ta.dropout, "Dropout rate")->check(CLI::Range(0.0, 0.99))->capture_default_str();
  train->add_option("--loss", ta.loss, "Loss over the monthly series")
      ->check(CLI::IsMember({"mean", "final"}))
      ->capture_default_str();
  train->add_option("--target", ta.target, "Training target transform")
      ->check(CLI::IsMember({"identity", "log10p1"}))
      ->capture_default_str();
  train->add_option("--seed", ta.seed, "Initialisation and shuffling seed")->capture_default_str();

  PredictArgs pa;
  auto* pred = app.add_subcommand("predict", "Print the monthly yield series for one sample");
  pred->add_option("--checkpoint", pa.checkpoint, "Checkpoint directory")->required();
  pred->add_option("--data", pa.data, "Dataset root")->capture_default_str();
  pred->add_option("--sample", pa.sample, "Sample stem relative to --data, e.g. samples/C00_almonds_2021")
      ->required();
  pred->add_option("--month", pa.month, "Print only this month (1-12)")->check(CLI::Range(1, 12));

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on chosen years and write reports");
  eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint directory")->required();
  eval->add_option("--data", ea.data, "Dataset root")->required();
  eval->add_option("--out", ea.out, "Report directory")->required();
  eval->add_option("--years", ea.years, "Years as A:B inclusive or A,B,C")->capture_default_str();
  eval->add_option("--split", ea.split, "Split name used in the report")->capture_default_str();

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "Run gradient, metric, sampler and container checks");
  verify->add_option("--trials", va.trials, "Seeded trials per primitive")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  verify->add_option("--seed", va.seed, "Seed for the check inputs")->capture_default_str();
  verify->add_flag("--inject-backward-bug", va.inject,
                   "Add a primitive with a deliberately wrong gradient (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  verbosity = quiet ? 0 : 1 + verbose;

  try {
    if (*synth) return cmd_synth(sa);
    if (*train) return cmd_train(ta);
    if (*pred) return cmd_predict(pa);
    if (*eval) return cmd_eval(ea);
    if (*verify) return cmd_verify(va);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
