#pragma once

#include "cyb/datamodel.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace cyb {

struct IntRange {
  Index lo = 1;
  Index hi = 1;
};

struct SynthConfig {
  int n_counties = 4;
  int n_crops = 6;
  std::vector<int> years{2008, 2009, 2010, 2011};
  IntRange pixels_n{16, 48};
  IntRange pixels_m{1, 3};
  /// Label noise sd as a fraction of the crop's y_max.
  double noise_fraction = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Per-crop constants of the generator.
struct CropLatent {
  std::string name;
  double y_max = 0.0;  // t/ha
  int peak_month = 6;  // 1-based, 4..9
};

/// Weather regime of one county in one year.
struct ClimateDriver {
  double temp_offset = 0.0;   // degC added to the seasonal baseline
  double precip_scale = 1.0;  // multiplier on the precipitation climatology
};

/// Season aggregates the yield oracle reads from the generated arrays.
struct OracleInputs {
  double season_temp = 0.0;    // mean of (tmin + tmax) / 2 over Apr..Sep, degC
  double season_precip = 0.0;  // Apr..Sep precipitation total, mm
  double soil_aws = 0.0;       // mean available water storage, cm
};

struct LatentSample {
  std::string county;
  int crop = 0;
  int year = 0;
  double oracle = 0.0;  // noiseless yield, t/ha
  double noise = 0.0;   // label - oracle
};

/// Everything needed to recompute the oracle labels.
struct LatentGround {
  std::vector<std::string> counties;
  std::vector<CropLatent> crops;
  std::map<std::pair<std::string, int>, double> fertility;          // (county, crop) -> f
  std::map<std::pair<std::string, int>, ClimateDriver> climate;     // (county, year)
  std::vector<LatentSample> samples;
};

struct SynthDataset {
  DatasetManifest manifest;
  LatentGround latent;
  std::vector<CountyCropSample> samples;  // same order as manifest.entries
};

inline constexpr double kTempOptimum = 21.0;
inline constexpr double kTempWidth = 7.0;
inline constexpr double kWaterOptimum = 350.0;  // mm
inline constexpr double kWaterWidth = 250.0;

/// Temperature response, 1 at kTempOptimum.
double temperature_response(double season_temp);
/// Water response over soil storage (mm) plus season rain, 1 at kWaterOptimum.
double water_response(double available_water_mm);

/// y = y_max * f * g(T) * h(10 * aws + P).
double oracle_yield(double y_max, double fertility, const OracleInputs& in);

/// Reads the oracle's aggregates from generated climate and soil arrays.
OracleInputs oracle_inputs(const Tensor& climate, const Tensor& soil);

/// In-memory generation; a pure function of `config`.
SynthDataset synthesize(const SynthConfig& config);

/// Writes arrays, manifest and `latent.json` under `root`.
void write_dataset(const SynthDataset& data, const std::filesystem::path& root);

inline constexpr std::string_view kLatentFile = "latent.json";

void write_latent(const LatentGround& latent, const std::filesystem::path& path);
LatentGround read_latent(const std::filesystem::path& path);

}  // namespace cyb
