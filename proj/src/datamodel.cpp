#include "cyb/datamodel.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cctype>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace cyb {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Validation

namespace {

std::string join_shape(std::initializer_list<std::string> parts) {
  std::string s = "(";
  bool first = true;
  for (const auto& p : parts) {
    if (!first) s += ", ";
    s += p;
    first = false;
  }
  return s + ")";
}

void check_modality(const Tensor& t, Modality m, Index expected_pixels, std::string_view pixel_name,
                    std::vector<Violation>& out) {
  const ModalitySpec& spec = modality_spec(m);
  const std::string name(spec.name);
  if (t.ndim() != 3) {
    out.push_back({name + ".shape",
                   join_shape({std::to_string(spec.time_steps), std::to_string(spec.channels),
                               std::string(pixel_name)}),
                   shape_str(t.shape())});
    return;
  }
  if (t.dim(0) != spec.time_steps) {
    out.push_back({name + ".time_steps", std::to_string(spec.time_steps), std::to_string(t.dim(0))});
  }
  if (t.dim(1) != spec.channels) {
    out.push_back({name + ".channels", std::to_string(spec.channels), std::to_string(t.dim(1))});
  }
  if (expected_pixels >= 1 && t.dim(2) != expected_pixels) {
    out.push_back({name + ".pixels", std::string(pixel_name) + " = " + std::to_string(expected_pixels),
                   std::to_string(t.dim(2))});
  } else if (t.dim(2) < 1) {
    out.push_back({name + ".pixels", ">= 1", std::to_string(t.dim(2))});
  }
  if (!t.all_finite()) out.push_back({name + ".values", "finite", "non-finite entries"});
}

}  // namespace

std::vector<Violation> validate_sample(const CountyCropSample& s, ValidationOptions opts) {
  std::vector<Violation> out;
  // Landsat defines N for the other 30 m modalities.
  check_modality(s.landsat, Modality::landsat, 0, "N", out);
  const Index n = s.n_pixels();
  check_modality(s.climate, Modality::climate, 0, "M", out);
  check_modality(s.et, Modality::et, n, "N", out);
  check_modality(s.soil, Modality::soil, n, "N", out);
  if (!(s.yield_t_ha >= 0.0) || !std::isfinite(s.yield_t_ha)) {
    out.push_back({"yield_label", ">= 0 t/ha", std::to_string(s.yield_t_ha)});
  }
  if (s.crop_id < 0) out.push_back({"crop_id", ">= 0", std::to_string(s.crop_id)});
  if (opts.benchmark_years &&
      (s.year < kFirstYear || s.year > kLastYear || s.year == kMissingYear)) {
    out.push_back({"year", "2008..2022 excluding 2012", std::to_string(s.year)});
  }
  return out;
}

std::string describe(const std::vector<Violation>& violations) {
  std::ostringstream os;
  for (std::size_t i = 0; i < violations.size(); ++i) {
    if (i) os << "; ";
    os << violations[i].field << ": expected " << violations[i].expected << ", got "
       << violations[i].actual;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Soil encodings

const std::vector<std::pair<std::string, double>>& drainage_classes() {
  static const std::vector<std::pair<std::string, double>> classes{
      {"Excessively drained", 5.0},     {"Well drained", 4.0},   {"Moderately well drained", 3.0},
      {"Somewhat poorly drained", 2.0}, {"Poorly drained", 1.0}, {"Very poorly drained", 0.0},
  };
  return classes;
}

const std::vector<std::pair<std::string, double>>& hydrologic_groups() {
  static const std::vector<std::pair<std::string, double>> groups{
      {"A", 0.0}, {"B", 1.0}, {"C", 2.0}, {"D", 3.0}};
  return groups;
}

namespace {

double lookup(const std::vector<std::pair<std::string, double>>& table, std::string_view key,
              std::string_view what) {
  for (const auto& [label, code] : table) {
    if (label == key) return code;
  }
  std::string msg = "unknown " + std::string(what) + " '" + std::string(key) + "'; valid: ";
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (i) msg += ", ";
    msg += '"' + table[i].first + '"';
  }
  throw std::invalid_argument(msg);
}

}  // namespace

double encode_drainage(std::string_view class_label) {
  return lookup(drainage_classes(), class_label, "drainage class");
}

double encode_hydrologic_group(std::string_view group) {
  return lookup(hydrologic_groups(), group, "hydrologic soil group");
}

// ---------------------------------------------------------------------------
// Container

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  auto bits = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
  out.insert(out.end(), bits.begin(), bits.end());
}

template <typename T>
T get_le(const std::uint8_t* p) {
  std::array<std::uint8_t, sizeof(T)> bits;
  std::memcpy(bits.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
  return std::bit_cast<T>(bits);
}

}  // namespace

std::vector<std::uint8_t> encode_container(const Tensor& t) {
  if (t.ndim() > 255) throw DimensionError("container supports at most 255 axes");
  std::vector<std::uint8_t> out;
  out.reserve(8 + 8 * static_cast<std::size_t>(t.ndim() + t.numel()));
  out.insert(out.end(), kContainerMagic.begin(), kContainerMagic.end());
  put_le<std::uint16_t>(out, kContainerVersion);
  put_le<std::uint8_t>(out, kDtypeF64);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
  for (Index d : t.shape()) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
  for (Index i = 0; i < t.numel(); ++i) put_le<double>(out, t[i]);
  return out;
}

Tensor decode_container(const std::vector<std::uint8_t>& bytes) {
  const std::uint64_t size = bytes.size();
  const std::uint8_t* p = bytes.data();
  if (size < 4 || !std::equal(kContainerMagic.begin(), kContainerMagic.end(), p)) {
    throw ParseError("bad magic", 0);
  }
  if (size < 6) throw ParseError("truncated header: missing version", size);
  const auto version = get_le<std::uint16_t>(p + 4);
  if (version != kContainerVersion) {
    throw ParseError("unsupported version " + std::to_string(version), 4);
  }
  if (size < 8) throw ParseError("truncated header: missing dtype/ndim", size);
  const auto dtype = p[6];
  if (dtype != kDtypeF64) throw ParseError("unsupported dtype " + std::to_string(dtype), 6);
  const auto ndim = p[7];
  if (ndim == 0) throw ParseError("ndim must be at least 1", 7);
  std::uint64_t offset = 8;
  if (size < offset + 8ULL * ndim) throw ParseError("truncated header: dims", size);
  Shape shape;
  std::uint64_t count = 1;
  const std::uint64_t max_values = (size - offset - 8ULL * ndim) / 8;
  for (unsigned i = 0; i < ndim; ++i) {
    const auto d = get_le<std::uint64_t>(p + offset);
    if (d == 0) throw ParseError("zero-length dimension " + std::to_string(i), offset);
    if (d > max_values || count > max_values / d) {
      // Either an absurd header or a payload shorter than declared.
      count = max_values + 1;
    } else {
      count *= d;
    }
    shape.push_back(static_cast<Index>(d));
    offset += 8;
  }
  const std::uint64_t available = size - offset;
  if (count > max_values || available < count * 8) {
    throw ParseError("truncated payload: header declares shape " + shape_str(shape) + ", " +
                         std::to_string(available / 8) + " values present",
                     size);
  }
  if (available != count * 8) {
    throw ParseError("trailing bytes after payload", offset + count * 8);
  }
  Tensor t(shape);
  for (std::uint64_t i = 0; i < count; ++i) {
    t[static_cast<Index>(i)] = get_le<double>(p + offset + 8 * i);
  }
  return t;
}

void write_container(const Tensor& t, const fs::path& path) {
  const auto bytes = encode_container(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

Tensor read_container(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_container(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.reason(), e.offset());
  }
}

// ---------------------------------------------------------------------------
// Manifest

int DatasetManifest::intern_crop(const std::string& name) {
  auto it = std::find(crop_names.begin(), crop_names.end(), name);
  if (it != crop_names.end()) return static_cast<int>(it - crop_names.begin());
  crop_names.push_back(name);
  return static_cast<int>(crop_names.size()) - 1;
}

namespace {

ojson entry_json(const ManifestEntry& e) {
  ojson j;
  j["county"] = e.county;
  j["crop"] = e.crop;
  j["crop_name"] = e.crop_name;
  j["year"] = e.year;
  j["path"] = e.path;
  j["n_pixels"] = e.n_pixels;
  j["m_pixels"] = e.m_pixels;
  j["yield_t_ha"] = e.yield_t_ha;
  return j;
}

ManifestEntry entry_from_json(const ojson& j) {
  ManifestEntry e;
  e.county = j.at("county").get<std::string>();
  e.crop = j.at("crop").get<int>();
  e.crop_name = j.at("crop_name").get<std::string>();
  e.year = j.at("year").get<int>();
  e.path = j.at("path").get<std::string>();
  e.n_pixels = j.at("n_pixels").get<Index>();
  e.m_pixels = j.at("m_pixels").get<Index>();
  e.yield_t_ha = j.at("yield_t_ha").get<double>();
  return e;
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void spit(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace

std::string manifest_line(const ManifestEntry& e) { return entry_json(e).dump(); }

ManifestEntry parse_manifest_line(std::string_view line) {
  try {
    return entry_from_json(ojson::parse(line));
  } catch (const nlohmann::json::exception& ex) {
    throw IoError("bad manifest line: " + std::string(ex.what()));
  }
}

void write_manifest(const DatasetManifest& m, const fs::path& root) {
  fs::create_directories(root);
  std::string lines;
  for (const auto& e : m.entries) lines += manifest_line(e) + "\n";
  spit(root / kManifestFile, lines);
  ojson meta;
  meta["schema_version"] = m.schema_version;
  meta["seed"] = m.seed;
  meta["crop_names"] = m.crop_names;
  spit(root / kManifestMetaFile, meta.dump(2) + "\n");
}

DatasetManifest read_manifest(const fs::path& root) {
  DatasetManifest m;
  const fs::path meta_path = root / kManifestMetaFile;
  try {
    if (fs::exists(meta_path)) {
      const auto meta = ojson::parse(slurp(meta_path));
      m.schema_version = meta.at("schema_version").get<int>();
      m.seed = meta.at("seed").get<std::uint64_t>();
      m.crop_names = meta.at("crop_names").get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& ex) {
    throw IoError("bad manifest metadata " + meta_path.string() + ": " + ex.what());
  }
  if (m.schema_version != kManifestSchemaVersion) {
    throw IoError("unsupported manifest schema version " + std::to_string(m.schema_version));
  }
  std::istringstream is(slurp(root / kManifestFile));
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    m.entries.push_back(parse_manifest_line(line));
  }
  // Manifests without metadata get codes in first-appearance order.
  if (m.crop_names.empty()) {
    for (const auto& e : m.entries) m.intern_crop(e.crop_name);
  }
  return m;
}

fs::path modality_file(const fs::path& stem, Modality m) {
  fs::path p = stem;
  p += "." + std::string(modality_spec(m).name) + ".cyb";
  return p;
}

fs::path sample_meta_file(const fs::path& stem) {
  fs::path p = stem;
  p += ".json";
  return p;
}

void write_sample(const CountyCropSample& s, const fs::path& stem) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  write_container(s.landsat, modality_file(stem, Modality::landsat));
  write_container(s.climate, modality_file(stem, Modality::climate));
  write_container(s.et, modality_file(stem, Modality::et));
  write_container(s.soil, modality_file(stem, Modality::soil));
  ManifestEntry e{s.county_id, s.crop_id, s.crop_name, s.year, stem.filename().string(),
                  s.n_pixels(), s.m_pixels(), s.yield_t_ha};
  spit(sample_meta_file(stem), entry_json(e).dump(2) + "\n");
}

CountyCropSample read_sample(const fs::path& stem) {
  CountyCropSample s;
  ManifestEntry e;
  try {
    e = entry_from_json(ojson::parse(slurp(sample_meta_file(stem))));
  } catch (const nlohmann::json::exception& ex) {
    throw IoError("bad sample metadata for " + stem.string() + ": " + ex.what());
  }
  s.county_id = e.county;
  s.crop_id = e.crop;
  s.crop_name = e.crop_name;
  s.year = e.year;
  s.yield_t_ha = e.yield_t_ha;
  s.landsat = read_container(modality_file(stem, Modality::landsat));
  s.climate = read_container(modality_file(stem, Modality::climate));
  s.et = read_container(modality_file(stem, Modality::et));
  s.soil = read_container(modality_file(stem, Modality::soil));
  return s;
}

std::vector<CountyCropSample> load_dataset(const fs::path& root, const DatasetManifest& m) {
  std::vector<CountyCropSample> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    CountyCropSample s = read_sample(root / e.path);
    // The manifest is authoritative for identity and label.
    s.county_id = e.county;
    s.crop_id = e.crop;
    s.crop_name = e.crop_name;
    s.year = e.year;
    s.yield_t_ha = e.yield_t_ha;
    if (s.n_pixels() != e.n_pixels || s.m_pixels() != e.m_pixels) {
      throw IoError(e.path + ": manifest declares N=" + std::to_string(e.n_pixels) +
                    ", M=" + std::to_string(e.m_pixels) + " but files hold N=" +
                    std::to_string(s.n_pixels()) + ", M=" + std::to_string(s.m_pixels()));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::string sample_stem_name(const std::string& county, const std::string& crop_name, int year) {
  std::string crop;
  for (char c : crop_name) {
    const auto u = static_cast<unsigned char>(c);
    crop += std::isalnum(u) ? static_cast<char>(std::tolower(u)) : '_';
  }
  return "samples/" + county + "_" + crop + "_" + std::to_string(year);
}

const std::vector<std::string>& benchmark_crop_names() {
  static const std::vector<std::string> names{
      "Almonds",        "Grapes",          "Tomatoes",       "Walnuts",        "Pistachios",
      "Rice",           "Corn",            "Wheat",          "Alfalfa",        "Cotton",
      "Strawberries",   "Lettuce",         "Greens",         "Broccoli",       "Carrots",
      "Oranges",        "Lemons",          "Mandarins",      "Avocados",       "Peaches",
      "Plums",          "Prunes",          "Cherries",       "Apricots",       "Nectarines",
      "Pears",          "Apples",          "Olives",         "Figs",           "Dates",
      "Pomegranates",   "Kiwifruit",       "Persimmons",     "Melons",         "Watermelons",
      "Cantaloupes",    "Onions",          "Garlic",         "Potatoes",       "Sweet Potatoes",
      "Peppers",        "Cauliflower",     "Celery",         "Cabbage",        "Spinach",
      "Asparagus",      "Artichokes",      "Cucumbers",      "Squash",         "Pumpkins",
      "Dry Beans",      "Lima Beans",      "Chickpeas",      "Peas",           "Sunflower",
      "Safflower",      "Canola",          "Sorghum",        "Barley",         "Oats",
      "Triticale",      "Rye",             "Sugar Beets",    "Hay",            "Silage Corn",
      "Pasture",        "Blueberries",     "Raspberries",    "Hops",           "Mint",
  };
  return names;
}

}  // namespace cyb
