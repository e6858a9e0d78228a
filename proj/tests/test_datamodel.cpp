#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cyb/datamodel.hpp"
#include "cyb/rng.hpp"

#include <cstring>
#include <functional>
#include <filesystem>
#include <fstream>

using namespace cyb;
namespace fs = std::filesystem;

namespace {

CountyCropSample make_sample(Index n, Index m) {
  CountyCropSample s;
  s.county_id = "C01";
  s.crop_id = 0;
  s.crop_name = "almonds";
  s.year = 2010;
  s.landsat = Tensor::constant({12, 6, n}, 0.3);
  s.climate = Tensor::constant({365, 8, m}, 1.0);
  s.et = Tensor::constant({12, 1, n}, 40.0);
  s.soil = Tensor::constant({1, 5, n}, 2.0);
  s.yield_t_ha = 3.5;
  return s;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cyb_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

template <typename T>
void put(std::vector<std::uint8_t>& b, T v) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  b.insert(b.end(), raw, raw + sizeof(T));
}

std::vector<std::uint8_t> header(std::uint16_t version, std::uint8_t dtype, std::vector<std::uint64_t> dims) {
  std::vector<std::uint8_t> b{'C', 'Y', 'B', '1'};
  put(b, version);
  put(b, dtype);
  put(b, static_cast<std::uint8_t>(dims.size()));
  for (auto d : dims) put(b, d);
  return b;
}

}  // namespace

TEST_CASE("modality schema matches the five inputs") {
  CHECK(kModalities.size() == 5);
  const auto& l = modality_spec(Modality::landsat);
  CHECK(l.time_steps == 12);
  CHECK(l.channels == 6);
  CHECK(modality_spec(Modality::climate).time_steps == 365);
  CHECK(modality_spec(Modality::climate).channels == 8);
  CHECK(modality_spec(Modality::et).time_steps == 12);
  CHECK(modality_spec(Modality::et).channels == 1);
  CHECK(modality_spec(Modality::soil).time_steps == 1);
  CHECK(modality_spec(Modality::soil).channels == 5);
  CHECK(modality_spec(Modality::crop_id).channels == 1);
  CHECK(modality_spec(Modality::climate).pixel_axis == PixelAxis::per_sample_m);
  CHECK(std::string(l.channel_names[kNirChannel]) == "nir");
  int total = 0;
  for (int len : kMonthLengths) total += len;
  CHECK(total == 365);
  CHECK(month_start_day(1) == 31);
  CHECK(month_start_day(11) == 334);
}

TEST_CASE("validate_sample") {
  CHECK(validate_sample(make_sample(7, 2)).empty());

  auto s = make_sample(7, 2);
  s.climate = Tensor({366, 8, 2});
  auto v = validate_sample(s);
  REQUIRE(v.size() == 1);
  CHECK(v[0].field == "climate.time_steps");
  CHECK(v[0].expected == "365");
  CHECK(v[0].actual == "366");

  s = make_sample(7, 2);
  s.yield_t_ha = -1.0;
  v = validate_sample(s);
  REQUIRE(v.size() == 1);
  CHECK(v[0].field == "yield_label");

  s = make_sample(7, 2);
  s.year = 2012;
  CHECK(validate_sample(s).empty());
  v = validate_sample(s, {.benchmark_years = true});
  REQUIRE(v.size() == 1);
  CHECK(v[0].field == "year");
}

TEST_CASE("validate_sample rejects every single-axis perturbation") {
  const auto base = make_sample(5, 3);
  struct Case {
    const char* field;
    std::function<void(CountyCropSample&)> mutate;
  };
  const std::vector<Case> cases{
      {"landsat.time_steps", [](auto& s) { s.landsat = Tensor({11, 6, 5}); }},
      {"landsat.channels", [](auto& s) { s.landsat = Tensor({12, 7, 5}); }},
      {"climate.time_steps", [](auto& s) { s.climate = Tensor({364, 8, 3}); }},
      {"climate.channels", [](auto& s) { s.climate = Tensor({365, 9, 3}); }},
      {"climate.pixels", [](auto& s) { s.climate = Tensor({365, 8, 0}); }},
      {"et.time_steps", [](auto& s) { s.et = Tensor({13, 1, 5}); }},
      {"et.channels", [](auto& s) { s.et = Tensor({12, 2, 5}); }},
      {"et.pixels", [](auto& s) { s.et = Tensor({12, 1, 4}); }},
      {"soil.time_steps", [](auto& s) { s.soil = Tensor({2, 5, 5}); }},
      {"soil.channels", [](auto& s) { s.soil = Tensor({1, 4, 5}); }},
      {"soil.pixels", [](auto& s) { s.soil = Tensor({1, 5, 6}); }},
      {"landsat.shape", [](auto& s) { s.landsat = Tensor({12, 6}); }},
  };
  for (const auto& c : cases) {
    auto s = base;
    c.mutate(s);
    const auto v = validate_sample(s);
    INFO(c.field << ": " << describe(v));
    REQUIRE(v.size() >= 1);
    CHECK(v[0].field == c.field);
  }
  // M is independent of N.
  CHECK(validate_sample(make_sample(9, 1)).empty());
}

TEST_CASE("soil encodings") {
  CHECK(encode_drainage("Excessively drained") == 5.0);
  CHECK(encode_drainage("Well drained") == 4.0);
  CHECK(encode_drainage("Moderately well drained") == 3.0);
  CHECK(encode_drainage("Somewhat poorly drained") == 2.0);
  CHECK(encode_drainage("Poorly drained") == 1.0);
  CHECK(encode_drainage("Very poorly drained") == 0.0);
  CHECK(encode_hydrologic_group("A") == 0.0);
  CHECK(encode_hydrologic_group("B") == 1.0);
  CHECK(encode_hydrologic_group("C") == 2.0);
  CHECK(encode_hydrologic_group("D") == 3.0);

  try {
    encode_drainage("Somewhat excessively drained");
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("Very poorly drained") != std::string::npos);
  }
  CHECK_THROWS_AS(encode_hydrologic_group("E"), std::invalid_argument);
  CHECK_THROWS_AS(encode_hydrologic_group("A/D"), std::invalid_argument);

  // Listed best-drained first, codes strictly decreasing and distinct.
  const auto& classes = drainage_classes();
  REQUIRE(classes.size() == 6);
  for (std::size_t i = 1; i < classes.size(); ++i) CHECK(classes[i].second < classes[i - 1].second);
}

TEST_CASE("container round trip over random shapes") {
  CounterRng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const Index ndim = 1 + static_cast<Index>(rng.below(4));
    Shape shape;
    for (Index d = 0; d < ndim; ++d) shape.push_back(1 + static_cast<Index>(rng.below(7)));
    Tensor t(shape);
    for (Index i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, 1e3);
    if (trial == 0) t[0] = -0.0;
    if (trial == 1) t[0] = std::numeric_limits<double>::denorm_min();
    const Tensor back = decode_container(encode_container(t));
    CHECK(back.shape() == t.shape());
    CHECK(std::memcmp(back.raw(), t.raw(), sizeof(double) * static_cast<std::size_t>(t.numel())) == 0);
  }

  const fs::path dir = scratch_dir("container");
  Tensor big({12, 6, 100});
  for (Index i = 0; i < big.numel(); ++i) big[i] = rng.uniform();
  write_container(big, dir / "x.cyb");
  const Tensor back = read_container(dir / "x.cyb");
  CHECK(std::memcmp(back.raw(), big.raw(), sizeof(double) * static_cast<std::size_t>(big.numel())) == 0);
  CHECK(fs::file_size(dir / "x.cyb") == 4 + 2 + 1 + 1 + 3 * 8 + 7200 * 8);
}

TEST_CASE("corrupted containers produce structured errors") {
  auto expect = [](const std::vector<std::uint8_t>& bytes, const std::string& reason_prefix,
                   std::uint64_t offset) {
    try {
      decode_container(bytes);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      INFO(e.what());
      CHECK(e.reason().rfind(reason_prefix, 0) == 0);
      CHECK(e.offset() == offset);
    }
  };
  expect({}, "bad magic", 0);
  expect({'C', 'Y', 'B', '2', 1, 0, 1, 1}, "bad magic", 0);
  expect(header(2, 1, {1}), "unsupported version", 4);
  expect(header(1, 2, {1}), "unsupported dtype", 6);

  // 2x2 declared, three values present.
  auto b = header(1, 1, {2, 2});
  for (double v : {1.0, 2.0, 3.0}) put(b, v);
  expect(b, "truncated payload", b.size());

  auto dims_cut = header(1, 1, {2, 2});
  dims_cut.resize(dims_cut.size() - 3);
  expect(dims_cut, "truncated header", dims_cut.size());

  auto trailing = header(1, 1, {1});
  put(trailing, 1.0);
  trailing.push_back(0);
  expect(trailing, "trailing bytes", trailing.size() - 1);

  // Absurd dimensions must not allocate or overflow.
  auto huge = header(1, 1, {1ULL << 62, 1ULL << 62});
  CHECK_THROWS_AS(decode_container(huge), ParseError);

  // Every prefix of a valid file and every single-byte header corruption is
  // either decoded or rejected with a ParseError.
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto good = encode_container(t);
  for (std::size_t len = 0; len < good.size(); ++len) {
    CHECK_THROWS_AS(decode_container(std::vector<std::uint8_t>(good.begin(), good.begin() + len)), ParseError);
  }
  for (std::size_t i = 0; i < 24; ++i) {
    for (int bit = 0; bit < 8; ++bit) {
      auto bad = good;
      bad[i] ^= static_cast<std::uint8_t>(1 << bit);
      try {
        decode_container(bad);
      } catch (const ParseError&) {
      }
    }
  }

  const fs::path dir = scratch_dir("corrupt");
  { std::ofstream(dir / "empty.cyb"); }
  try {
    read_container(dir / "empty.cyb");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.reason().find("bad magic") != std::string::npos);
  }
  CHECK_THROWS_AS(read_container(dir / "missing.cyb"), IoError);
}

TEST_CASE("manifest lines round trip") {
  ManifestEntry e{"Fresno", 3, "grapes", 2019, "samples/Fresno_grapes_2019", 120, 4, 12.25};
  const std::string line = manifest_line(e);
  CHECK(line.find('\n') == std::string::npos);
  CHECK(line.rfind("{\"county\":\"Fresno\",\"crop\":3,\"crop_name\":\"grapes\",\"year\":2019", 0) == 0);
  const auto back = parse_manifest_line(line);
  CHECK(back.county == e.county);
  CHECK(back.crop == e.crop);
  CHECK(back.crop_name == e.crop_name);
  CHECK(back.year == e.year);
  CHECK(back.path == e.path);
  CHECK(back.n_pixels == e.n_pixels);
  CHECK(back.m_pixels == e.m_pixels);
  CHECK(back.yield_t_ha == e.yield_t_ha);
  CHECK_THROWS(parse_manifest_line("{\"county\":\"x\"}"));
  CHECK_THROWS(parse_manifest_line("not json"));
}

TEST_CASE("dataset files round trip and are checked against the manifest") {
  const fs::path root = scratch_dir("dataset");
  DatasetManifest m;
  m.seed = 9;
  auto s = make_sample(4, 2);
  s.landsat[5] = 0.125;
  s.crop_id = m.intern_crop("almonds");
  CHECK(m.intern_crop("grapes") == 1);
  CHECK(m.intern_crop("almonds") == 0);
  const std::string stem = sample_stem_name(s.county_id, s.crop_name, s.year);
  write_sample(s, root / stem);
  m.entries.push_back({s.county_id, s.crop_id, s.crop_name, s.year, stem, 4, 2, s.yield_t_ha});
  write_manifest(m, root);

  const auto read = read_manifest(root);
  CHECK(read.seed == 9);
  CHECK(read.crop_names == std::vector<std::string>{"almonds", "grapes"});
  REQUIRE(read.entries.size() == 1);
  const auto samples = load_dataset(root, read);
  REQUIRE(samples.size() == 1);
  CHECK(samples[0].landsat == s.landsat);
  CHECK(samples[0].climate == s.climate);
  CHECK(samples[0].yield_t_ha == s.yield_t_ha);
  CHECK(samples[0].crop_name == "almonds");

  auto wrong = read;
  wrong.entries[0].n_pixels = 5;
  CHECK_THROWS(load_dataset(root, wrong));

  fs::remove(modality_file(root / stem, Modality::et));
  CHECK_THROWS_AS(load_dataset(root, read), IoError);
}

TEST_CASE("benchmark crop table") {
  CHECK(benchmark_crop_names().size() == 70);
}
