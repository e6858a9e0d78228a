#include "cyb/synthgen.hpp"

#include "cyb/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace cyb {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Growing season used by the oracle: April 1 .. September 30.
constexpr int kSeasonFirstDay = month_start_day(3);
constexpr int kSeasonLastDay = month_start_day(9) - 1;

// Stream tags keep each random quantity on its own counter stream.
enum class Stream : std::uint64_t {
  fertility = 1,
  climate_driver,
  peak_month,
  pixel_counts,
  weather,
  climate_pixels,
  landsat,
  et,
  soil,
  label_noise,
};

CounterRng stream(std::uint64_t seed, Stream tag, std::string_view county, std::uint64_t a,
                  std::uint64_t b = 0) {
  std::uint64_t k = combine_key(seed, static_cast<std::uint64_t>(tag));
  k = combine_key(k, county);
  k = combine_key(k, a);
  return CounterRng(combine_key(k, b));
}

std::string county_name(int i) {
  std::ostringstream os;
  os << 'C' << (i < 10 ? "0" : "") << i;
  return os.str();
}

double crop_y_max(int k, int n_crops) {
  // Log-spaced over [2, 60] t/ha.
  if (n_crops == 1) return 2.0;
  return 2.0 * std::pow(30.0, static_cast<double>(k) / (n_crops - 1));
}

Index draw_count(CounterRng& rng, IntRange r) {
  return r.lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(r.hi - r.lo + 1)));
}

// Daily climate for one (county, year), M pixels.
Tensor make_climate(const SynthConfig& cfg, const std::string& county, int year,
                    const ClimateDriver& drv, Index m) {
  const auto& spec = modality_spec(Modality::climate);
  Tensor t({spec.time_steps, spec.channels, m});
  CounterRng weather = stream(cfg.seed, Stream::weather, county, static_cast<std::uint64_t>(year));
  CounterRng pix =
      stream(cfg.seed, Stream::climate_pixels, county, static_cast<std::uint64_t>(year));
  for (Index d = 0; d < spec.time_steps; ++d) {
    const double phase = kTwoPi * (static_cast<double>(d) + 0.5 - 15.0) / 365.0;
    const double solar = std::sin(kTwoPi * (static_cast<double>(d) + 0.5 - 80.0) / 365.0);
    const double t_anom = weather.normal(0.0, 2.0);
    const double rain_jitter = weather.uniform(0.5, 1.5);
    const double t_mid = 14.0 + drv.temp_offset - 8.0 * std::cos(phase) + t_anom;
    const double rain = drv.precip_scale * 2.5 * (1.0 + std::cos(phase)) * rain_jitter;
    for (Index p = 0; p < m; ++p) {
      const double tp = t_mid + pix.normal(0.0, 0.3);
      t.at({d, climate::tmin, p}) = tp - 6.0;
      t.at({d, climate::tmax, p}) = tp + 6.0;
      t.at({d, climate::prcp, p}) = std::max(0.0, rain * (1.0 + pix.normal(0.0, 0.05)));
      t.at({d, climate::dayl, p}) = 43200.0 + 9000.0 * solar;
      t.at({d, climate::srad, p}) = 220.0 + 120.0 * solar + pix.normal(0.0, 5.0);
      t.at({d, climate::vp, p}) = std::max(0.1, 1.1 + 0.05 * (tp - 14.0) + pix.normal(0.0, 0.02));
      t.at({d, climate::snow, p}) = std::max(0.0, -2.0 * (tp - 2.0));
      t.at({d, climate::pet, p}) = std::max(0.0, 0.25 * (tp + 6.0) + pix.normal(0.0, 0.1));
    }
  }
  return t;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_counties < 1 || n_crops < 1) throw std::invalid_argument("counties and crops must be >= 1");
  if (n_crops > static_cast<int>(benchmark_crop_names().size())) {
    throw std::invalid_argument("at most " + std::to_string(benchmark_crop_names().size()) +
                                " crops are supported");
  }
  if (years.empty()) throw std::invalid_argument("at least one year is required");
  if (pixels_n.lo < 1 || pixels_n.hi < pixels_n.lo) throw std::invalid_argument("bad N pixel range");
  if (pixels_m.lo < 1 || pixels_m.hi < pixels_m.lo) throw std::invalid_argument("bad M pixel range");
  if (!(noise_fraction >= 0.0)) throw std::invalid_argument("noise fraction must be >= 0");
}

double temperature_response(double season_temp) {
  const double z = (season_temp - kTempOptimum) / kTempWidth;
  return std::exp(-z * z);
}

double water_response(double available_water_mm) {
  const double z = (available_water_mm - kWaterOptimum) / kWaterWidth;
  return std::exp(-z * z);
}

double oracle_yield(double y_max, double fertility, const OracleInputs& in) {
  return y_max * fertility * temperature_response(in.season_temp) *
         water_response(10.0 * in.soil_aws + in.season_precip);
}

OracleInputs oracle_inputs(const Tensor& clim, const Tensor& soil_t) {
  OracleInputs in;
  const Index m = clim.dim(2);
  for (Index d = kSeasonFirstDay; d <= kSeasonLastDay; ++d) {
    double temp = 0.0, rain = 0.0;
    for (Index p = 0; p < m; ++p) {
      temp += 0.5 * (clim.at({d, climate::tmin, p}) + clim.at({d, climate::tmax, p}));
      rain += clim.at({d, climate::prcp, p});
    }
    in.season_temp += temp / static_cast<double>(m);
    in.season_precip += rain / static_cast<double>(m);
  }
  in.season_temp /= static_cast<double>(kSeasonLastDay - kSeasonFirstDay + 1);
  const Index n = soil_t.dim(2);
  for (Index p = 0; p < n; ++p) in.soil_aws += soil_t.at({0, soil::aws, p});
  in.soil_aws /= static_cast<double>(n);
  return in;
}

SynthDataset synthesize(const SynthConfig& cfg) {
  cfg.validate();
  SynthDataset out;
  LatentGround& lat = out.latent;
  out.manifest.seed = cfg.seed;

  for (int c = 0; c < cfg.n_counties; ++c) lat.counties.push_back(county_name(c));
  for (int k = 0; k < cfg.n_crops; ++k) {
    CounterRng r = stream(cfg.seed, Stream::peak_month, "", static_cast<std::uint64_t>(k));
    CropLatent crop;
    crop.name = benchmark_crop_names()[static_cast<std::size_t>(k)];
    crop.y_max = crop_y_max(k, cfg.n_crops);
    crop.peak_month = 4 + static_cast<int>(r.below(6));
    lat.crops.push_back(crop);
    out.manifest.intern_crop(crop.name);
  }
  for (const auto& county : lat.counties) {
    for (int k = 0; k < cfg.n_crops; ++k) {
      CounterRng r = stream(cfg.seed, Stream::fertility, county, static_cast<std::uint64_t>(k));
      lat.fertility[{county, k}] = r.uniform(0.15, 1.0);
    }
    for (int year : cfg.years) {
      CounterRng r = stream(cfg.seed, Stream::climate_driver, county, static_cast<std::uint64_t>(year));
      ClimateDriver drv;
      drv.temp_offset = r.uniform(-6.0, 6.0);
      drv.precip_scale = r.uniform(0.3, 3.0);
      lat.climate[{county, year}] = drv;
    }
  }

  const auto& landsat_spec = modality_spec(Modality::landsat);
  for (const auto& county : lat.counties) {
    for (int k = 0; k < cfg.n_crops; ++k) {
      const CropLatent& crop = lat.crops[static_cast<std::size_t>(k)];
      const double f = lat.fertility.at({county, k});
      for (int year : cfg.years) {
        const auto ky = static_cast<std::uint64_t>(k);
        const auto yy = static_cast<std::uint64_t>(year);
        CounterRng counts = stream(cfg.seed, Stream::pixel_counts, county, ky, yy);
        const Index n = draw_count(counts, cfg.pixels_n);
        const Index m = draw_count(counts, cfg.pixels_m);

        CountyCropSample s;
        s.county_id = county;
        s.crop_id = k;
        s.crop_name = crop.name;
        s.year = year;
        s.climate = make_climate(cfg, county, year, lat.climate.at({county, year}), m);

        // Soil: five static per-pixel properties driven by fertility.
        s.soil = Tensor({1, 5, n});
        CounterRng rs = stream(cfg.seed, Stream::soil, county, ky, yy);
        std::vector<double> f_pix(static_cast<std::size_t>(n));
        for (Index p = 0; p < n; ++p) {
          const double fp = std::clamp(f + rs.normal(0.0, 0.05), 0.0, 1.0);
          f_pix[p] = fp;
          s.soil.at({0, soil::aws, p}) = 5.0 + 20.0 * f + rs.normal(0.0, 0.5);
          s.soil.at({0, soil::slope, p}) = 12.0 * (1.0 - fp) + std::abs(rs.normal(0.0, 0.5));
          s.soil.at({0, soil::water_supply, p}) = 3.0 + 15.0 * f + rs.normal(0.0, 0.5);
          const auto drain_idx = static_cast<std::size_t>(5 - std::lround(5.0 * fp));
          s.soil.at({0, soil::drainage, p}) = encode_drainage(drainage_classes()[drain_idx].first);
          const auto group_idx = static_cast<std::size_t>(std::min(3L, std::lround(3.0 * (1.0 - fp))));
          s.soil.at({0, soil::hydgroup, p}) =
              encode_hydrologic_group(hydrologic_groups()[group_idx].first);
        }

        const OracleInputs in = oracle_inputs(s.climate, s.soil);
        const double gh = temperature_response(in.season_temp) *
                          water_response(10.0 * in.soil_aws + in.season_precip);

        // Landsat and ET follow a vigour bump centred on the crop's peak month.
        s.landsat = Tensor({landsat_spec.time_steps, landsat_spec.channels, n});
        s.et = Tensor({12, 1, n});
        CounterRng rl = stream(cfg.seed, Stream::landsat, county, ky, yy);
        CounterRng re = stream(cfg.seed, Stream::et, county, ky, yy);
        for (Index mo = 0; mo < 12; ++mo) {
          const double z = (static_cast<double>(mo + 1) - crop.peak_month) / 1.5;
          const double bump = std::exp(-z * z);
          for (Index p = 0; p < n; ++p) {
            const double v = f_pix[p] * (0.5 + 0.5 * gh) * bump;
            const double noise[6] = {rl.normal(0.0, 0.005), rl.normal(0.0, 0.005),
                                     rl.normal(0.0, 0.005), rl.normal(0.0, 0.005),
                                     rl.normal(0.0, 0.005), rl.normal(0.0, 0.005)};
            s.landsat.at({mo, 0, p}) = 0.05 + noise[0];
            s.landsat.at({mo, 1, p}) = 0.08 + 0.05 * v + noise[1];
            s.landsat.at({mo, 2, p}) = 0.10 - 0.06 * v + noise[2];
            s.landsat.at({mo, 3, p}) = 0.15 + 0.35 * v + noise[3];
            s.landsat.at({mo, 4, p}) = 0.25 - 0.10 * v + noise[4];
            s.landsat.at({mo, 5, p}) = 0.18 - 0.08 * v + noise[5];
            s.et.at({mo, 0, p}) = std::max(0.0, 15.0 + 140.0 * v + re.normal(0.0, 2.0));
          }
        }

        const double oracle = oracle_yield(crop.y_max, f, in);
        CounterRng rn = stream(cfg.seed, Stream::label_noise, county, ky, yy);
        const double draw = rn.normal(0.0, cfg.noise_fraction * crop.y_max);
        s.yield_t_ha = std::max(0.0, oracle + draw);
        lat.samples.push_back({county, k, year, oracle, s.yield_t_ha - oracle});

        ManifestEntry e;
        e.county = county;
        e.crop = k;
        e.crop_name = crop.name;
        e.year = year;
        e.path = sample_stem_name(county, crop.name, year);
        e.n_pixels = n;
        e.m_pixels = m;
        e.yield_t_ha = s.yield_t_ha;
        out.manifest.entries.push_back(e);
        out.samples.push_back(std::move(s));
      }
    }
  }
  return out;
}

void write_latent(const LatentGround& lat, const fs::path& path) {
  ojson j;
  j["counties"] = lat.counties;
  ojson crops = ojson::array();
  for (const auto& c : lat.crops) {
    crops.push_back({{"name", c.name}, {"y_max", c.y_max}, {"peak_month", c.peak_month}});
  }
  j["crops"] = crops;
  ojson fert = ojson::array();
  for (const auto& [key, f] : lat.fertility) {
    fert.push_back({{"county", key.first}, {"crop", key.second}, {"f", f}});
  }
  j["fertility"] = fert;
  ojson clim = ojson::array();
  for (const auto& [key, d] : lat.climate) {
    clim.push_back({{"county", key.first},
                    {"year", key.second},
                    {"temp_offset", d.temp_offset},
                    {"precip_scale", d.precip_scale}});
  }
  j["climate"] = clim;
  ojson samples = ojson::array();
  for (const auto& s : lat.samples) {
    samples.push_back({{"county", s.county},
                       {"crop", s.crop},
                       {"year", s.year},
                       {"oracle", s.oracle},
                       {"noise", s.noise}});
  }
  j["samples"] = samples;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << j.dump(1) << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

LatentGround read_latent(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  LatentGround lat;
  try {
    const auto j = ojson::parse(is);
    lat.counties = j.at("counties").get<std::vector<std::string>>();
    for (const auto& c : j.at("crops")) {
      lat.crops.push_back({c.at("name").get<std::string>(), c.at("y_max").get<double>(),
                           c.at("peak_month").get<int>()});
    }
    for (const auto& f : j.at("fertility")) {
      lat.fertility[{f.at("county").get<std::string>(), f.at("crop").get<int>()}] =
          f.at("f").get<double>();
    }
    for (const auto& c : j.at("climate")) {
      lat.climate[{c.at("county").get<std::string>(), c.at("year").get<int>()}] = {
          c.at("temp_offset").get<double>(), c.at("precip_scale").get<double>()};
    }
    for (const auto& s : j.at("samples")) {
      lat.samples.push_back({s.at("county").get<std::string>(), s.at("crop").get<int>(),
                             s.at("year").get<int>(), s.at("oracle").get<double>(),
                             s.at("noise").get<double>()});
    }
  } catch (const nlohmann::json::exception& ex) {
    throw IoError("bad latent file " + path.string() + ": " + ex.what());
  }
  return lat;
}

void write_dataset(const SynthDataset& data, const fs::path& root) {
  fs::create_directories(root / "samples");
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    write_sample(data.samples[i], root / data.manifest.entries[i].path);
  }
  write_manifest(data.manifest, root);
  write_latent(data.latent, root / kLatentFile);
}

}  // namespace cyb
