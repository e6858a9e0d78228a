#pragma once

#include "cyb/autodiff.hpp"
#include "cyb/datamodel.hpp"
#include "cyb/rng.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace cyb {

struct ModelConfig {
  Index d_model = 256;
  Index n_layers = 8;
  Index n_heads = 6;
  Index ffn_mult = 4;
  Index months = 12;
  /// Width of the per-pixel MLP inside each extractor.
  Index extractor_hidden = 64;
  double dropout = 0.0;
  bool causal = true;
  Index n_crops = 1;
  std::uint64_t seed = 0;

  /// Per-head width; heads concatenate to n_heads * head_dim, which need not equal d_model.
  Index head_dim() const { return d_model / n_heads; }
  Index attn_width() const { return head_dim() * n_heads; }

  void validate() const;

  /// 256-wide, 8 layers, 6 heads.
  static ModelConfig paper();
  /// Small enough to train on the synthetic benchmark in minutes on one core.
  static ModelConfig desk();
  /// For finite-difference checks: d=8, 2 heads, 1 layer.
  static ModelConfig tiny();
};

/// Learnable tensors plus fixed input-normalisation buffers, keyed by name.
struct ModelParams {
  std::map<std::string, Tensor> weights;
  std::map<std::string, Tensor> buffers;

  Tensor& operator[](const std::string& name) { return weights.at(name); }
  const Tensor& operator[](const std::string& name) const { return weights.at(name); }
  Index count() const;
  bool all_finite() const;
};

/// The four pixel modalities, in fusion order.
inline constexpr std::array<Modality, 4> kPixelModalities{Modality::landsat, Modality::climate,
                                                          Modality::et, Modality::soil};

ModelParams init_params(const ModelConfig& config);

/// Per-channel standardisation statistics estimated from training samples.
void fit_input_normalizer(ModelParams& params, const std::vector<const CountyCropSample*>& samples);

/// Standardises channel axis (axis 1) of a T x C x P array with the stored statistics.
Tensor normalize_input(const ModelParams& params, Modality m, const Tensor& x);

/// Params registered on a tape, by name.
using ParamVars = std::map<std::string, Var>;

ParamVars bind_params(Tape& tape, const ModelParams& params, bool requires_grad = true);

// ---------------------------------------------------------------------------
// Forward pieces

/// Per-pixel MLP (1 -> H -> H, GELU), mean over pixels, then H -> d_model.
/// x: T x C x P (normalised). Returns T x C x d_model.
Var extract_modality(Var x, const ParamVars& vars, Modality m);

/// Pixel-pooled hidden features before the output projection: (T*C) x H.
Var extract_pooled(Var x, const ParamVars& vars, Modality m);

/// Averaging operator mapping the 365 days onto 12 months (12 x 365).
const Tensor& month_averaging_matrix();

/// Mean of member days per month: 365 x C x D -> 12 x C x D.
Var align_climate_monthly(Var daily);

/// Monthly climate embeddings straight from daily input, pooling days before
/// the output projection. Equal to align_climate_monthly(extract_modality(x)).
Var extract_climate_monthly(Var x, const ParamVars& vars);

/// Sums per-modality channel-fused projections into one token per month.
/// Soil and crop embeddings are broadcast over months.
Var fuse_tokens(Var landsat_e, Var climate_m, Var et_e, Var soil_e, Var crop_e,
                const ParamVars& vars);

/// Pre-layernorm transformer encoder over the month tokens. Dropout is active
/// only when `dropout_rng` is given and config.dropout > 0.
Var encode(Var tokens, const ParamVars& vars, const ModelConfig& config,
           CounterRng* dropout_rng = nullptr);

/// Shared linear + softplus per month token: months x D -> (months,).
Var regression_head(Var encoded, const ParamVars& vars);

/// Crop embedding row (plus the crop modality-type embedding) as 1 x 1 x D.
Var crop_embedding(const ParamVars& vars, int crop_id, Index d_model);

/// Intermediate outputs of one forward pass.
struct ForwardTrace {
  Var landsat;          // 12 x 6 x D
  Var climate_monthly;  // 12 x 8 x D
  Var et;               // 12 x 1 x D
  Var soil;             // 1 x 5 x D
  Var crop;             // 1 x 1 x D
  Var tokens;           // 12 x D
  Var encoded;          // 12 x D
  Var series;           // (12,)
};

/// Thrown when a sample fails validation before prediction.
class InvalidSample : public std::invalid_argument {
 public:
  explicit InvalidSample(std::vector<Violation> v)
      : std::invalid_argument("invalid sample: " + describe(v)), violations(std::move(v)) {}
  std::vector<Violation> violations;
};

/// Full forward pass on `tape`; `sample` holds raw (unnormalised) arrays.
ForwardTrace predict_series(Tape& tape, const CountyCropSample& sample, const ModelParams& params,
                            const ParamVars& vars, const ModelConfig& config,
                            CounterRng* dropout_rng = nullptr);

/// Convenience: evaluates the twelve monthly predictions without gradients.
Tensor predict(const ModelParams& params, const ModelConfig& config, const CountyCropSample& sample);

// ---------------------------------------------------------------------------
// Checkpoints

enum class TargetTransform { identity, log10p1 };

double apply_target_transform(TargetTransform t, double y);
double invert_target_transform(TargetTransform t, double v);
std::string to_string(TargetTransform t);
TargetTransform parse_target_transform(const std::string& s);

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  std::vector<std::string> crop_names;
  TargetTransform target = TargetTransform::identity;
};

inline constexpr std::string_view kCheckpointIndex = "checkpoint.json";

/// One container per tensor under `dir/params/`, indexed by `dir/checkpoint.json`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace cyb
