#include "cyb/verify.hpp"

#include "cyb/gradcheck.hpp"
#include "cyb/metrics.hpp"
#include "cyb/rng.hpp"
#include "cyb/sampling.hpp"
#include "cyb/synthgen.hpp"
#include "cyb/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace cyb {

namespace {

Tensor random_tensor(CounterRng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

}  // namespace

Var weighted_sum(Tape& tape, Var y, std::uint64_t seed) {
  CounterRng rng(seed);
  Tensor w = random_tensor(rng, y.shape(), -1.0, 1.0);
  return sum_all(mul(y, tape.constant(std::move(w))));
}

std::vector<GradPrimitive> gradient_primitives() {
  using X = std::span<const Var>;
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](Tape&, X x) { return matmul(x[0], x[1]); }},
      {"add", {{2, 3}, {2, 3}}, [](Tape&, X x) { return add(x[0], x[1]); }},
      {"add_broadcast", {{4, 3}, {3}}, [](Tape&, X x) { return add(x[0], x[1]); }},
      {"sub_broadcast", {{2}, {3, 2}}, [](Tape&, X x) { return sub(x[0], x[1]); }},
      {"mul", {{2, 5}, {2, 5}}, [](Tape&, X x) { return mul(x[0], x[1]); }},
      {"mul_broadcast", {{2, 3, 4}, {4}}, [](Tape&, X x) { return mul(x[0], x[1]); }},
      {"mul_scalar", {{1}, {3, 2}}, [](Tape&, X x) { return mul(x[0], x[1]); }},
      {"relu", {{3, 4}}, [](Tape&, X x) { return relu(x[0]); }},
      {"gelu", {{3, 4}}, [](Tape&, X x) { return gelu(x[0]); }},
      {"scale", {{5}}, [](Tape&, X x) { return scale(x[0], -1.7); }},
      {"softplus", {{6}}, [](Tape&, X x) { return softplus(x[0]); }},
      {"reshape", {{2, 6}}, [](Tape&, X x) { return reshape(x[0], {3, 4}); }},
      {"transpose", {{2, 5}}, [](Tape&, X x) { return transpose(x[0]); }},
      {"slice_cols", {{3, 6}}, [](Tape&, X x) { return slice_cols(x[0], 2, 3); }},
      {"concat_cols", {{2, 3}, {2, 1}},
       [](Tape&, X x) { return concat_cols(std::vector<Var>{x[0], x[1], x[0]}); }},
      {"take_row", {{4, 3}}, [](Tape&, X x) { return take_row(x[0], 2); }},
      {"causal_softmax", {{4, 4}}, [](Tape&, X x) { return softmax(causal_mask(x[0]), 1); }},
      {"softmax_rows", {{2, 5}}, [](Tape&, X x) { return softmax(x[0], 1); }},
      {"softmax_cols", {{3, 4}}, [](Tape&, X x) { return softmax(x[0], 0); }},
      {"layernorm", {{3, 5}, {5}, {5}}, [](Tape&, X x) { return layernorm(x[0], x[1], x[2]); }},
      {"mean_pool_mid", {{2, 3, 4}}, [](Tape&, X x) { return mean_pool(x[0], 1); }},
      {"mean_pool_last", {{3, 4}}, [](Tape&, X x) { return mean_pool(x[0], -1); }},
      {"mean_all", {{3, 3}}, [](Tape&, X x) { return mean_all(x[0]); }},
      {"sum_all", {{2, 3}}, [](Tape&, X x) { return sum_all(x[0]); }},
  };
}

GradPrimitive faulty_square_primitive() {
  return {"faulty_square", {{3, 2}}, [](Tape& t, std::span<const Var> x) {
            const Index ix = x[0].id;
            Tensor y(x[0].shape(), x[0].value().data().cwiseAbs2());
            return t.record("faulty_square", std::move(y), {x[0]}, [ix](Tape& tp, const Tensor& g) {
              tp.grad_buffer(ix).data() += 2.02 * g.data().cwiseProduct(tp.value(ix).data());
            });
          }};
}

SuiteResult check_primitive_gradients(const std::vector<GradPrimitive>& prims, int trials,
                                      std::uint64_t seed, double tol) {
  SuiteResult res{"primitive gradients", 0.0, tol, true, ""};
  std::string worst_name;
  for (const auto& p : prims) {
    for (int trial = 0; trial < trials; ++trial) {
      CounterRng rng(combine_key(combine_key(seed, p.name), static_cast<std::uint64_t>(trial)));
      std::vector<Tensor> inputs;
      for (const Shape& s : p.shapes) inputs.push_back(random_tensor(rng, s, -2.0, 2.0));
      const std::uint64_t wseed = rng.next_u64();
      ScalarFn<double> f = [&](Tape& t, std::span<const Var> xs) {
        return weighted_sum(t, p.build(t, xs), wseed);
      };
      const auto r = finite_diff_check(f, std::move(inputs), 1e-5, tol);
      if (r.max_rel_error > res.max_error || worst_name.empty()) {
        res.max_error = std::max(res.max_error, r.max_rel_error);
        worst_name = p.name;
      }
    }
  }
  res.passed = res.max_error < tol;
  res.detail = std::to_string(prims.size()) + " ops x " + std::to_string(trials) +
               " trials, worst " + worst_name;
  return res;
}

SuiteResult check_model_gradient(const ModelConfig& config, Index n_pixels, Index m_pixels,
                                 std::uint64_t seed, double tol, double step) {
  SynthConfig sc;
  sc.n_counties = 1;
  sc.n_crops = 2;
  sc.years = {2015};
  sc.pixels_n = {n_pixels, n_pixels};
  sc.pixels_m = {m_pixels, m_pixels};
  sc.seed = seed;
  const auto data = synthesize(sc);
  const CountyCropSample& sample = data.samples.back();

  ModelConfig cfg = config;
  cfg.n_crops = 2;
  cfg.seed = seed;
  cfg.dropout = 0.0;
  ModelParams params = init_params(cfg);
  fit_input_normalizer(params, {&sample});
  // Non-zero biases and head so no coordinate sits at a trivial point.
  CounterRng rng(combine_key(seed, "verify.perturb"));
  for (auto& [name, t] : params.weights) {
    for (Index i = 0; i < t.numel(); ++i) t[i] += rng.uniform(-0.05, 0.05);
  }

  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  for (const auto& [name, t] : params.weights) {
    names.push_back(name);
    inputs.push_back(t);
  }
  const double target = sample.yield_t_ha;
  ScalarFn<double> f = [&](Tape& tape, std::span<const Var> xs) {
    ParamVars vars;
    for (std::size_t i = 0; i < names.size(); ++i) vars.emplace(names[i], xs[i]);
    const auto trace = predict_series(tape, sample, params, vars, cfg);
    return loss(trace.series, target, LossWeighting::mean_over_months);
  };
  const auto r = finite_diff_check(f, std::move(inputs), step, tol);
  SuiteResult res{"model loss gradient", r.max_rel_error, tol, r.max_rel_error < tol, ""};
  res.detail = std::to_string(r.checked) + " params, worst " + names[r.worst_input] + "[" +
               std::to_string(r.worst_index) + "]";
  return res;
}

SuiteResult check_metric_oracles(int vectors, std::uint64_t seed) {
  SuiteResult res{"metric oracles", 0.0, 1e-9, true, ""};
  for (int v = 0; v < vectors; ++v) {
    CounterRng rng(combine_key(combine_key(seed, "verify.metrics"), static_cast<std::uint64_t>(v)));
    const std::size_t n = 2 + rng.below(60);
    std::vector<double> obs(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      obs[i] = rng.uniform(0.0, 50.0);
      pred[i] = obs[i] + rng.normal(0.0, 3.0);
    }
    long double mean = 0, ss_tot = 0, ss_res = 0, abs_sum = 0;
    for (double o : obs) mean += o;
    mean /= n;
    for (std::size_t i = 0; i < n; ++i) {
      ss_tot += (obs[i] - mean) * (obs[i] - mean);
      ss_res += (obs[i] - pred[i]) * (obs[i] - pred[i]);
      abs_sum += std::abs(obs[i] - pred[i]);
    }
    const double r2_ref = static_cast<double>(1.0L - ss_res / ss_tot);
    const double rmse_ref = static_cast<double>(std::sqrt(ss_res / n));
    const double mae_ref = static_cast<double>(abs_sum / n);
    const auto em = rmse_mae(obs, pred);
    res.max_error = std::max({res.max_error, std::abs(r2(obs, pred) - r2_ref),
                              std::abs(em.rmse - rmse_ref), std::abs(em.mae - mae_ref)});
  }
  const double ex = r2(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 4});
  res.max_error = std::max(res.max_error, std::abs(ex - 0.5));
  res.passed = res.max_error <= res.tolerance;
  res.detail = std::to_string(vectors) + " vectors, worked example R2 " + fmt(ex);
  return res;
}

SuiteResult check_sampler(std::uint64_t seed) {
  SuiteResult res{"stratified sampler", 0.0, 0.0, true, ""};
  // N = 1000 in proportions .5/.25/.125/.125.
  Strata strata;
  strata.num_strata = 4;
  for (int i = 0; i < 1000; ++i) strata.assignment.push_back(i % 8 < 4 ? 0 : i % 8 < 6 ? 1 : 2 + i % 2);
  StrataPlan plan{4, 256, seed};
  const std::vector<Index> want{128, 64, 32, 32};
  bool ok = allocate_quotas(strata.sizes(), 256) == want;

  auto counts = [&](const std::vector<Index>& idx) {
    std::vector<Index> c(4, 0);
    for (Index i : idx) ++c[static_cast<std::size_t>(strata.assignment[static_cast<std::size_t>(i)])];
    return c;
  };
  const SampleKey key{"C00", 0, 2015};
  const auto a = sample_stratified(strata, plan, key);
  ok = ok && counts(a) == want && sample_stratified(strata, plan, key) == a;
  for (std::uint64_t s = 1; s <= 10; ++s) {
    StrataPlan other = plan;
    other.seed = seed + s;
    ok = ok && counts(sample_stratified(strata, other, key)) == want;
  }
  res.passed = ok;
  res.max_error = ok ? 0.0 : 1.0;
  res.detail = "quotas [128,64,32,32], counts seed-independent, deterministic";
  return res;
}

SuiteResult check_containers(int shapes, std::uint64_t seed) {
  SuiteResult res{"binary containers", 0.0, 0.0, true, ""};
  int mismatches = 0, unstructured = 0;
  for (int k = 0; k < shapes; ++k) {
    CounterRng rng(combine_key(combine_key(seed, "verify.containers"), static_cast<std::uint64_t>(k)));
    Shape shape(1 + rng.below(4));
    for (auto& d : shape) d = static_cast<Index>(1 + rng.below(7));
    Tensor t(shape);
    for (Index i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, 1e3);
    auto bytes = encode_container(t);
    const Tensor back = decode_container(bytes);
    if (back.shape() != t.shape() ||
        std::memcmp(back.data().data(), t.data().data(), sizeof(double) * static_cast<std::size_t>(t.numel())) != 0) {
      ++mismatches;
    }
    // Corrupt one header byte or truncate; the decoder must throw ParseError.
    auto bad = bytes;
    const std::size_t header = 8 + 8 * shape.size();
    if (k % 2 == 0) {
      bad[rng.below(header)] ^= static_cast<std::uint8_t>(1 + rng.below(255));
    } else {
      bad.resize(rng.below(bytes.size()));
    }
    try {
      decode_container(bad);
      ++unstructured;  // accepted a damaged buffer
    } catch (const ParseError&) {
    } catch (...) {
      ++unstructured;
    }
  }
  res.passed = mismatches == 0 && unstructured == 0;
  res.max_error = static_cast<double>(mismatches + unstructured);
  res.detail = std::to_string(shapes) + " shapes, " + std::to_string(mismatches) + " mismatches, " +
               std::to_string(unstructured) + " unstructured failures";
  return res;
}

std::vector<SuiteResult> run_verification(const VerifyOptions& opts) {
  auto prims = gradient_primitives();
  if (opts.inject_backward_bug) prims.push_back(faulty_square_primitive());
  std::vector<SuiteResult> out;
  out.push_back(check_primitive_gradients(prims, opts.primitive_trials, opts.seed));
  out.push_back(check_model_gradient(ModelConfig::tiny(), 5, 3, opts.seed));
  out.push_back(check_metric_oracles(1000, opts.seed));
  out.push_back(check_sampler(opts.seed));
  out.push_back(check_containers(100, opts.seed));
  return out;
}

}  // namespace cyb
