#pragma once

#include "cyb/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cyb {

// ---------------------------------------------------------------------------
// Modality schema

enum class Modality { landsat, climate, et, soil, crop_id };

enum class PixelAxis { per_sample_n, per_sample_m, none };

struct ModalitySpec {
  Modality modality;
  std::string_view name;
  Index time_steps;
  Index channels;
  PixelAxis pixel_axis;
  std::array<std::string_view, 8> units;  // first `channels` entries used
  std::array<std::string_view, 8> channel_names;
};

inline constexpr std::array<ModalitySpec, 5> kModalities{{
    {Modality::landsat, "landsat", 12, 6, PixelAxis::per_sample_n,
     {"reflectance", "reflectance", "reflectance", "reflectance", "reflectance", "reflectance"},
     {"blue", "green", "red", "nir", "swir1", "swir2"}},
    {Modality::climate, "climate", 365, 8, PixelAxis::per_sample_m,
     {"degC", "degC", "mm", "s", "W/m2", "kPa", "mm", "mm"},
     {"tmin", "tmax", "prcp", "dayl", "srad", "vp", "snow", "pet"}},
    {Modality::et, "et", 12, 1, PixelAxis::per_sample_n, {"mm"}, {"et"}},
    {Modality::soil, "soil", 1, 5, PixelAxis::per_sample_n,
     {"cm", "%", "cm", "class", "class"},
     {"aws0100wta", "slopegraddcp", "awmmfpwwta", "drclassdcd", "hydgrpdcd"}},
    {Modality::crop_id, "crop_id", 1, 1, PixelAxis::none, {"code"}, {"crop"}},
}};

constexpr const ModalitySpec& modality_spec(Modality m) {
  return kModalities[static_cast<std::size_t>(m)];
}

/// Landsat channel used as the vigour proxy (NIR).
inline constexpr Index kNirChannel = 3;

/// Climate channel indices.
namespace climate {
inline constexpr Index tmin = 0, tmax = 1, prcp = 2, dayl = 3, srad = 4, vp = 5, snow = 6, pet = 7;
}
/// Soil channel indices.
namespace soil {
inline constexpr Index aws = 0, slope = 1, water_supply = 2, drainage = 3, hydgroup = 4;
}

/// 365-day calendar (no leap day), as used by the daily climate grids.
inline constexpr std::array<int, 12> kMonthLengths{31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};

/// First 0-based day of each month in the 365-day calendar.
constexpr int month_start_day(int month0) {
  int d = 0;
  for (int m = 0; m < month0; ++m) d += kMonthLengths[static_cast<std::size_t>(m)];
  return d;
}

inline constexpr int kFirstYear = 2008;
inline constexpr int kLastYear = 2022;
inline constexpr int kMissingYear = 2012;

// ---------------------------------------------------------------------------
// Samples

/// All modality arrays and the yield label of one (county, crop, year).
struct CountyCropSample {
  std::string county_id;
  int crop_id = 0;
  std::string crop_name;
  int year = 0;
  Tensor landsat;  // 12 x 6 x N
  Tensor climate;  // 365 x 8 x M
  Tensor et;       // 12 x 1 x N
  Tensor soil;     // 1 x 5 x N
  double yield_t_ha = 0.0;

  Index n_pixels() const { return landsat.ndim() == 3 ? landsat.dim(2) : 0; }
  Index m_pixels() const { return climate.ndim() == 3 ? climate.dim(2) : 0; }
};

struct Violation {
  std::string field;
  std::string expected;
  std::string actual;
};

struct ValidationOptions {
  /// Enforce the benchmark calendar: years 2008..2022 without 2012.
  bool benchmark_years = false;
};

std::vector<Violation> validate_sample(const CountyCropSample& s, ValidationOptions opts = {});

std::string describe(const std::vector<Violation>& violations);

// ---------------------------------------------------------------------------
// Soil categorical encodings

/// SSURGO drainage class label to its numeric code (5.0 best drained .. 0.0).
double encode_drainage(std::string_view class_label);

/// Hydrologic soil group A..D to 0.0..3.0.
double encode_hydrologic_group(std::string_view group);

/// The drainage classes in decreasing code order.
const std::vector<std::pair<std::string, double>>& drainage_classes();
const std::vector<std::pair<std::string, double>>& hydrologic_groups();

// ---------------------------------------------------------------------------
// Binary tensor container

/// Structured failure while decoding a container; `offset` is the byte where
/// decoding stopped.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::string reason, std::uint64_t offset)
      : std::runtime_error(reason + " at byte " + std::to_string(offset)),
        reason_(std::move(reason)),
        offset_(offset) {}
  const std::string& reason() const { return reason_; }
  std::uint64_t offset() const { return offset_; }

 private:
  std::string reason_;
  std::uint64_t offset_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 4> kContainerMagic{'C', 'Y', 'B', '1'};
inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

std::vector<std::uint8_t> encode_container(const Tensor& t);
Tensor decode_container(const std::vector<std::uint8_t>& bytes);

void write_container(const Tensor& t, const std::filesystem::path& path);
Tensor read_container(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Dataset manifest

inline constexpr int kManifestSchemaVersion = 1;

struct ManifestEntry {
  std::string county;
  int crop = 0;
  std::string crop_name;
  int year = 0;
  std::string path;  // sample stem, relative to the dataset root
  Index n_pixels = 0;
  Index m_pixels = 0;
  double yield_t_ha = 0.0;
};

struct DatasetManifest {
  int schema_version = kManifestSchemaVersion;
  std::uint64_t seed = 0;
  std::vector<std::string> crop_names;  // index = dataset-local crop code
  std::vector<ManifestEntry> entries;

  /// Code for `name`, assigning the next free code on first appearance.
  int intern_crop(const std::string& name);
};

inline constexpr std::string_view kManifestFile = "manifest.jsonl";
inline constexpr std::string_view kManifestMetaFile = "manifest.meta.json";

/// One JSON object per line, keys in a fixed order.
std::string manifest_line(const ManifestEntry& e);
ManifestEntry parse_manifest_line(std::string_view line);

void write_manifest(const DatasetManifest& m, const std::filesystem::path& root);
DatasetManifest read_manifest(const std::filesystem::path& root);

/// Files holding a sample's arrays: `<stem>.<modality>.cyb` plus `<stem>.json`.
std::filesystem::path modality_file(const std::filesystem::path& stem, Modality m);
std::filesystem::path sample_meta_file(const std::filesystem::path& stem);

void write_sample(const CountyCropSample& s, const std::filesystem::path& stem);
CountyCropSample read_sample(const std::filesystem::path& stem);

/// Loads every manifest entry and checks it against its declared shapes.
std::vector<CountyCropSample> load_dataset(const std::filesystem::path& root,
                                           const DatasetManifest& m);

/// Sample stem name used by writers, e.g. "samples/C03_almonds_2011".
std::string sample_stem_name(const std::string& county, const std::string& crop_name, int year);

/// Crop names of the benchmark (70 California crops), used to label synthetic crops.
const std::vector<std::string>& benchmark_crop_names();

}  // namespace cyb
