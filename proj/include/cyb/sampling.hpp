#pragma once

#include "cyb/datamodel.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cyb {

/// Per-pixel crop codes on the 30 m CDL grid, row-major.
struct CdlMask {
  using Grid = Eigen::Array<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Grid codes;
  std::int32_t nodata = 0;
  double pixel_size_m = 30.0;

  Index width() const { return codes.cols(); }
  Index height() const { return codes.rows(); }
};

/// One field: linear pixel indices (row * width + col), ascending.
using Field = std::vector<Index>;

inline constexpr double kMinFieldAreaHa = 10.0;

/// 4-connected components of `crop_code` pixels covering at least `min_area_ha`.
/// Components are ordered by their first pixel in raster order.
std::vector<Field> extract_fields(const CdlMask& mask, std::int32_t crop_code,
                                  double min_area_ha = kMinFieldAreaHa);

/// Smallest pixel count whose area reaches `min_area_ha` at the mask resolution.
Index min_field_pixels(double pixel_size_m, double min_area_ha);

struct StrataPlan {
  int num_strata = 8;
  Index target_k = 256;
  std::uint64_t seed = 0;
};

struct Strata {
  int num_strata = 1;
  std::vector<int> assignment;  // stratum per pixel

  std::vector<Index> sizes() const;
};

/// Quantile bins of `values`: cut points sit at ranks floor(j * n / S); ties
/// always share a stratum, so a constant input yields one non-empty stratum.
Strata stratify_pixels(std::span<const double> values, const StrataPlan& plan);

/// Largest-remainder apportionment of `total` over `sizes` proportionally.
/// Ties in the remainder go to the lower stratum index.
std::vector<Index> allocate_quotas(std::span<const Index> sizes, Index total);

/// Identifies the PRNG stream for one sample.
struct SampleKey {
  std::string county;
  int crop = 0;
  int year = 0;
};

/// Pixel indices, ascending, of length min(target_k, N). Every pixel is
/// returned unchanged when N <= target_k.
std::vector<Index> sample_stratified(const Strata& strata, const StrataPlan& plan,
                                     const SampleKey& key);

/// Temporal mean of the Landsat NIR channel for each pixel.
std::vector<double> nir_temporal_mean(const Tensor& landsat);

/// Keeps `pixels` (along the last axis) of a T x C x P array.
Tensor take_pixels(const Tensor& x, std::span<const Index> pixels);

/// Applies stratified sampling to the N axis of a sample (Landsat, ET, soil).
CountyCropSample subsample_pixels(const CountyCropSample& s, const StrataPlan& plan);

}  // namespace cyb
