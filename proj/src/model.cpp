#include "cyb/model.hpp"

#include "cyb/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace cyb {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || ffn_mult < 1 || months < 1 ||
      extractor_hidden < 1 || n_crops < 1) {
    throw std::invalid_argument("model dimensions and counts must be >= 1");
  }
  if (head_dim() < 1) throw std::invalid_argument("n_heads exceeds d_model");
  if (months != 12) throw std::invalid_argument("the token timeline is monthly (12 steps)");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
}

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.d_model = 48;
  c.n_layers = 2;
  c.n_heads = 6;
  c.ffn_mult = 2;
  c.extractor_hidden = 12;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ffn_mult = 2;
  c.extractor_hidden = 4;
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

Index ModelParams::count() const {
  Index n = 0;
  for (const auto& [name, t] : weights) n += t.numel();
  return n;
}

bool ModelParams::all_finite() const {
  for (const auto& [name, t] : weights) {
    if (!t.all_finite()) return false;
  }
  return true;
}

namespace {

std::string mname(Modality m) { return std::string(modality_spec(m).name); }

Tensor uniform_fan_in(CounterRng& rng, Index fan_in, Shape shape) {
  Tensor t(std::move(shape));
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Index i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-a, a);
  return t;
}

Tensor normal_init(CounterRng& rng, double sd, Shape shape) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, sd);
  return t;
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  auto& w = p.weights;
  const Index d = cfg.d_model, h = cfg.extractor_hidden;
  // Each tensor draws from its own stream so adding one never shifts the others.
  auto rng_for = [&](const std::string& name) { return CounterRng(combine_key(cfg.seed, name)); };
  auto linear = [&](const std::string& prefix, Index in, Index out) {
    auto r = rng_for(prefix + ".w");
    w[prefix + ".w"] = uniform_fan_in(r, in, {in, out});
    w[prefix + ".b"] = Tensor::zeros({out});
  };
  auto norm = [&](const std::string& prefix) {
    w[prefix + ".g"] = Tensor::constant({d}, 1.0);
    w[prefix + ".b"] = Tensor::zeros({d});
  };

  for (Modality m : kPixelModalities) {
    const std::string base = "ext." + mname(m);
    linear(base + ".l1", 1, h);
    linear(base + ".l2", h, h);
    linear(base + ".l3", h, d);
    const Index c = modality_spec(m).channels;
    linear("fuse." + mname(m), c * d, d);
    norm("fuse." + mname(m) + ".ln");
    p.buffers["norm." + mname(m) + ".mean"] = Tensor::zeros({c});
    p.buffers["norm." + mname(m) + ".std"] = Tensor::constant({c}, 1.0);
  }
  {
    auto r = rng_for("emb.crop");
    w["emb.crop"] = normal_init(r, 0.02, {cfg.n_crops, d});
    auto rp = rng_for("emb.pos");
    w["emb.pos"] = normal_init(rp, 0.02, {cfg.months, d});
    auto rt = rng_for("emb.type");
    w["emb.type"] = normal_init(rt, 0.02, {5, d});
  }
  const Index aw = cfg.attn_width();
  for (Index l = 0; l < cfg.n_layers; ++l) {
    const std::string base = "enc." + std::to_string(l);
    norm(base + ".ln1");
    linear(base + ".q", d, aw);
    linear(base + ".k", d, aw);
    linear(base + ".v", d, aw);
    linear(base + ".o", aw, d);
    norm(base + ".ln2");
    linear(base + ".ff1", d, d * cfg.ffn_mult);
    linear(base + ".ff2", d * cfg.ffn_mult, d);
  }
  norm("enc.final");
  linear("head", d, 1);
  return p;
}

void fit_input_normalizer(ModelParams& params, const std::vector<const CountyCropSample*>& samples) {
  for (Modality m : kPixelModalities) {
    const Index c = modality_spec(m).channels;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(c), sq = Eigen::VectorXd::Zero(c);
    Eigen::VectorXd count = Eigen::VectorXd::Zero(c);
    for (const auto* s : samples) {
      const Tensor& x = m == Modality::landsat   ? s->landsat
                        : m == Modality::climate ? s->climate
                        : m == Modality::et      ? s->et
                                                 : s->soil;
      const Index t = x.dim(0), p = x.dim(2);
      for (Index ti = 0; ti < t; ++ti) {
        for (Index ci = 0; ci < c; ++ci) {
          for (Index pi = 0; pi < p; ++pi) {
            const double v = x.at({ti, ci, pi});
            sum[ci] += v;
            sq[ci] += v * v;
          }
          count[ci] += static_cast<double>(p);
        }
      }
    }
    Tensor& mean = params.buffers.at("norm." + mname(m) + ".mean");
    Tensor& sd = params.buffers.at("norm." + mname(m) + ".std");
    for (Index ci = 0; ci < c; ++ci) {
      if (count[ci] == 0) continue;
      const double mu = sum[ci] / count[ci];
      const double var = std::max(0.0, sq[ci] / count[ci] - mu * mu);
      mean[ci] = mu;
      // Near-constant channels are centred but not scaled up.
      sd[ci] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
  }
}

Tensor normalize_input(const ModelParams& params, Modality m, const Tensor& x) {
  const Tensor& mean = params.buffers.at("norm." + mname(m) + ".mean");
  const Tensor& sd = params.buffers.at("norm." + mname(m) + ".std");
  Tensor out = x;
  const Index t = x.dim(0), c = x.dim(1), p = x.dim(2);
  for (Index ti = 0; ti < t; ++ti) {
    for (Index ci = 0; ci < c; ++ci) {
      auto row = Eigen::Map<Eigen::VectorXd>(out.raw() + (ti * c + ci) * p, p);
      row = (row.array() - mean[ci]) / sd[ci];
    }
  }
  return out;
}

ParamVars bind_params(Tape& tape, const ModelParams& params, bool requires_grad) {
  ParamVars vars;
  for (const auto& [name, t] : params.weights) vars.emplace(name, tape.leaf_ref(t, requires_grad));
  return vars;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

Var linear(Var x, const ParamVars& v, const std::string& prefix) {
  return add(matmul(x, v.at(prefix + ".w")), v.at(prefix + ".b"));
}

Var norm(Var x, const ParamVars& v, const std::string& prefix) {
  return layernorm(x, v.at(prefix + ".g"), v.at(prefix + ".b"), 1e-5);
}

Var dropout(Var x, double p, CounterRng* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  Tensor mask(x.shape());
  for (Index i = 0; i < mask.numel(); ++i) mask[i] = rng->uniform() < p ? 0.0 : 1.0 / (1.0 - p);
  return mul(x, x.tape->constant(std::move(mask)));
}

void check_pixels(Var x, Modality m) {
  const auto& spec = modality_spec(m);
  if (x.value().ndim() != 3 || x.value().dim(1) != spec.channels) {
    throw DimensionError(std::string(spec.name) + " input must be T x " +
                         std::to_string(spec.channels) + " x P, got " + shape_str(x.shape()));
  }
  if (x.value().dim(2) < 1) {
    throw DimensionError(std::string(spec.name) + " input has no pixels (P = 0)");
  }
}

}  // namespace

Var extract_pooled(Var x, const ParamVars& v, Modality m) {
  check_pixels(x, m);
  const Index t = x.value().dim(0), c = x.value().dim(1), p = x.value().dim(2);
  const std::string base = "ext." + mname(m);
  Var col = reshape(x, {t * c * p, 1});
  Var h = gelu(linear(col, v, base + ".l1"));
  h = gelu(linear(h, v, base + ".l2"));
  const Index hidden = h.value().dim(1);
  return mean_pool(reshape(h, {t * c, p, hidden}), 1);
}

Var extract_modality(Var x, const ParamVars& v, Modality m) {
  const Index t = x.value().dim(0), c = x.value().dim(1);
  Var pooled = extract_pooled(x, v, m);
  Var out = linear(pooled, v, "ext." + mname(m) + ".l3");
  return reshape(out, {t, c, out.value().dim(1)});
}

const Tensor& month_averaging_matrix() {
  static const Tensor a = [] {
    Tensor m({12, 365});
    for (int mo = 0; mo < 12; ++mo) {
      const int len = kMonthLengths[static_cast<std::size_t>(mo)];
      for (int d = 0; d < len; ++d) m.at({mo, month_start_day(mo) + d}) = 1.0 / len;
    }
    return m;
  }();
  return a;
}

Var align_climate_monthly(Var daily) {
  const auto& dv = daily.value();
  if (dv.ndim() != 3 || dv.dim(0) != 365) {
    throw DimensionError("climate alignment needs 365 x C x D, got " + shape_str(dv.shape()));
  }
  const Index c = dv.dim(1), d = dv.dim(2);
  Var avg = daily.tape->leaf_ref(month_averaging_matrix(), false);
  Var monthly = matmul(avg, reshape(daily, {365, c * d}));
  return reshape(monthly, {12, c, d});
}

Var extract_climate_monthly(Var x, const ParamVars& v) {
  if (x.value().ndim() != 3 || x.value().dim(0) != 365) {
    throw DimensionError("climate input must be 365 x 8 x M, got " + shape_str(x.shape()));
  }
  const Index c = x.value().dim(1);
  Var pooled = extract_pooled(x, v, Modality::climate);  // (365*C) x H
  const Index hidden = pooled.value().dim(1);
  Var avg = x.tape->leaf_ref(month_averaging_matrix(), false);
  Var monthly = reshape(matmul(avg, reshape(pooled, {365, c * hidden})), {12 * c, hidden});
  Var out = linear(monthly, v, "ext.climate.l3");
  return reshape(out, {12, c, out.value().dim(1)});
}

Var crop_embedding(const ParamVars& v, int crop_id, Index d_model) {
  const Var& table = v.at("emb.crop");
  if (crop_id < 0 || crop_id >= table.value().dim(0)) {
    throw std::out_of_range("crop code " + std::to_string(crop_id) + " outside the embedding table (" +
                            std::to_string(table.value().dim(0)) + " crops)");
  }
  Var e = add(take_row(table, crop_id),
              take_row(v.at("emb.type"), static_cast<Index>(Modality::crop_id)));
  return reshape(e, {1, 1, d_model});
}

Var fuse_tokens(Var landsat_e, Var climate_m, Var et_e, Var soil_e, Var crop_e, const ParamVars& v) {
  const Index d = v.at("emb.pos").value().dim(1);
  const Index months = v.at("emb.pos").value().dim(0);
  const std::array<Var, 4> streams{landsat_e, climate_m, et_e, soil_e};
  const std::array<Index, 4> expect_t{months, months, months, 1};
  Var tokens = v.at("emb.pos");
  for (std::size_t k = 0; k < kPixelModalities.size(); ++k) {
    const Modality m = kPixelModalities[k];
    const auto& sv = streams[k].value();
    const Index c = modality_spec(m).channels;
    if (sv.ndim() != 3 || sv.dim(0) != expect_t[k] || sv.dim(1) != c || sv.dim(2) != d) {
      throw DimensionError("fuse_tokens: " + mname(m) + " embedding must be (" +
                           std::to_string(expect_t[k]) + ", " + std::to_string(c) + ", " +
                           std::to_string(d) + "), got " + shape_str(sv.shape()));
    }
    Var proj = linear(reshape(streams[k], {sv.dim(0), c * d}), v, "fuse." + mname(m));
    Var balanced = add(norm(proj, v, "fuse." + mname(m) + ".ln"),
                       take_row(v.at("emb.type"), static_cast<Index>(m)));
    // Static soil (1 x D) is broadcast to every month.
    if (sv.dim(0) == 1) balanced = reshape(balanced, {d});
    tokens = add(tokens, balanced);
  }
  if (crop_e.numel() != d) {
    throw DimensionError("fuse_tokens: crop embedding must hold " + std::to_string(d) +
                         " values, got " + shape_str(crop_e.shape()));
  }
  return add(tokens, reshape(crop_e, {d}));
}

namespace {

Var encode_impl(Var x, const ParamVars& v, const ModelConfig& cfg, CounterRng* rng) {
  const Index dh = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (Index l = 0; l < cfg.n_layers; ++l) {
    const std::string base = "enc." + std::to_string(l);
    Var h = norm(x, v, base + ".ln1");
    Var q = linear(h, v, base + ".q");
    Var k = linear(h, v, base + ".k");
    Var val = linear(h, v, base + ".v");
    std::vector<Var> heads;
    for (Index i = 0; i < cfg.n_heads; ++i) {
      Var qi = slice_cols(q, i * dh, dh);
      Var ki = slice_cols(k, i * dh, dh);
      Var vi = slice_cols(val, i * dh, dh);
      Var scores = scale(matmul(qi, transpose(ki)), inv_sqrt);
      if (cfg.causal) scores = causal_mask(scores);
      heads.push_back(matmul(softmax(scores, 1), vi));
    }
    Var attn = linear(concat_cols(heads), v, base + ".o");
    x = add(x, dropout(attn, cfg.dropout, rng));
    Var f = linear(gelu(linear(norm(x, v, base + ".ln2"), v, base + ".ff1")), v, base + ".ff2");
    x = add(x, dropout(f, cfg.dropout, rng));
  }
  return norm(x, v, "enc.final");
}

}  // namespace

Var encode(Var tokens, const ParamVars& v, const ModelConfig& cfg, CounterRng* dropout_rng) {
  const auto& tv = tokens.value();
  if (tv.ndim() != 2 || tv.dim(0) != cfg.months || tv.dim(1) != cfg.d_model) {
    throw DimensionError("encode expects (" + std::to_string(cfg.months) + ", " +
                         std::to_string(cfg.d_model) + ") tokens, got " + shape_str(tv.shape()));
  }
  return encode_impl(tokens, v, cfg, dropout_rng);
}

Var regression_head(Var encoded, const ParamVars& v) {
  const Index months = encoded.value().dim(0);
  return reshape(softplus(linear(encoded, v, "head")), {months});
}

ForwardTrace predict_series(Tape& tape, const CountyCropSample& s, const ModelParams& params,
                            const ParamVars& v, const ModelConfig& cfg,
                            CounterRng* dropout_rng) {
  auto violations = validate_sample(s);
  if (!violations.empty()) throw InvalidSample(std::move(violations));
  ForwardTrace tr;
  auto input = [&](Modality m, const Tensor& x) {
    return tape.constant(normalize_input(params, m, x));
  };
  tr.landsat = extract_modality(input(Modality::landsat, s.landsat), v, Modality::landsat);
  tr.climate_monthly = extract_climate_monthly(input(Modality::climate, s.climate), v);
  tr.et = extract_modality(input(Modality::et, s.et), v, Modality::et);
  tr.soil = extract_modality(input(Modality::soil, s.soil), v, Modality::soil);
  tr.crop = crop_embedding(v, s.crop_id, cfg.d_model);
  tr.tokens = fuse_tokens(tr.landsat, tr.climate_monthly, tr.et, tr.soil, tr.crop, v);
  tr.encoded = encode(tr.tokens, v, cfg, dropout_rng);
  tr.series = regression_head(tr.encoded, v);
  return tr;
}

Tensor predict(const ModelParams& params, const ModelConfig& cfg, const CountyCropSample& s) {
  Tape tape;
  const ParamVars vars = bind_params(tape, params, false);
  return predict_series(tape, s, params, vars, cfg).series.value();
}

// ---------------------------------------------------------------------------
// Target transform and checkpoints

double apply_target_transform(TargetTransform t, double y) {
  return t == TargetTransform::log10p1 ? std::log10(1.0 + y) : y;
}

double invert_target_transform(TargetTransform t, double v) {
  return t == TargetTransform::log10p1 ? std::pow(10.0, v) - 1.0 : v;
}

std::string to_string(TargetTransform t) {
  return t == TargetTransform::log10p1 ? "log10p1" : "identity";
}

TargetTransform parse_target_transform(const std::string& s) {
  if (s == "identity") return TargetTransform::identity;
  if (s == "log10p1") return TargetTransform::log10p1;
  throw std::invalid_argument("unknown target transform '" + s + "' (identity, log10p1)");
}

namespace {

ojson config_json(const ModelConfig& c) {
  ojson j;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["ffn_mult"] = c.ffn_mult;
  j["months"] = c.months;
  j["extractor_hidden"] = c.extractor_hidden;
  j["dropout"] = c.dropout;
  j["causal"] = c.causal;
  j["n_crops"] = c.n_crops;
  j["seed"] = c.seed;
  return j;
}

ModelConfig config_from_json(const ojson& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<Index>();
  c.n_layers = j.at("n_layers").get<Index>();
  c.n_heads = j.at("n_heads").get<Index>();
  c.ffn_mult = j.at("ffn_mult").get<Index>();
  c.months = j.at("months").get<Index>();
  c.extractor_hidden = j.at("extractor_hidden").get<Index>();
  c.dropout = j.at("dropout").get<double>();
  c.causal = j.at("causal").get<bool>();
  c.n_crops = j.at("n_crops").get<Index>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  fs::create_directories(dir / "params");
  ojson index;
  index["format"] = "cyb-checkpoint";
  index["version"] = 1;
  index["config"] = config_json(ckpt.config);
  index["crop_names"] = ckpt.crop_names;
  index["target_transform"] = to_string(ckpt.target);
  ojson files, buffers;
  for (const auto& [name, t] : ckpt.params.weights) {
    const std::string rel = "params/" + name + ".cyb";
    write_container(t, dir / rel);
    files[name] = rel;
  }
  for (const auto& [name, t] : ckpt.params.buffers) {
    const std::string rel = "params/" + name + ".cyb";
    write_container(t, dir / rel);
    buffers[name] = rel;
  }
  index["params"] = files;
  index["buffers"] = buffers;
  std::ofstream os(dir / kCheckpointIndex, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint index in " + dir.string());
  os << index.dump(2) << '\n';
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream is(dir / kCheckpointIndex, std::ios::binary);
  if (!is) throw IoError("no checkpoint index at " + (dir / kCheckpointIndex).string());
  Checkpoint ckpt;
  ojson index;
  try {
    index = ojson::parse(is);
    ckpt.config = config_from_json(index.at("config"));
    ckpt.crop_names = index.at("crop_names").get<std::vector<std::string>>();
    ckpt.target = parse_target_transform(index.at("target_transform").get<std::string>());
  } catch (const nlohmann::json::exception& ex) {
    throw IoError("bad checkpoint index: " + std::string(ex.what()));
  }
  ckpt.config.validate();
  const ModelParams reference = init_params(ckpt.config);
  for (const auto& [name, rel] : index.at("params").items()) {
    ckpt.params.weights[name] = read_container(dir / rel.get<std::string>());
  }
  for (const auto& [name, rel] : index.at("buffers").items()) {
    ckpt.params.buffers[name] = read_container(dir / rel.get<std::string>());
  }
  // Every tensor the architecture needs must be present with the right shape.
  for (const auto& [name, t] : reference.weights) {
    auto it = ckpt.params.weights.find(name);
    if (it == ckpt.params.weights.end()) throw IoError("checkpoint lacks parameter " + name);
    if (it->second.shape() != t.shape()) {
      throw IoError("checkpoint parameter " + name + " has shape " + shape_str(it->second.shape()) +
                    ", config implies " + shape_str(t.shape()));
    }
  }
  for (const auto& [name, t] : reference.buffers) {
    if (!ckpt.params.buffers.contains(name)) throw IoError("checkpoint lacks buffer " + name);
  }
  return ckpt;
}

}  // namespace cyb
