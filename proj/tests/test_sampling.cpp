#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cyb/rng.hpp"
#include "cyb/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace cyb;

namespace {

CdlMask blank(Index rows, Index cols) {
  CdlMask m;
  m.codes = CdlMask::Grid::Zero(rows, cols);
  return m;
}

void fill(CdlMask& m, Index r0, Index c0, Index rows, Index cols, std::int32_t code) {
  m.codes.block(r0, c0, rows, cols) = code;
}

// Reference quantile binning: stratum = number of cut values <= v.
std::vector<int> reference_strata(const std::vector<double>& v, int s) {
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = v.size();
  std::vector<int> out;
  for (double x : v) {
    int k = 0;
    for (int j = 1; j < s; ++j) {
      if (sorted[j * n / static_cast<std::size_t>(s)] <= x) ++k;
    }
    out.push_back(k);
  }
  return out;
}

}  // namespace

TEST_CASE("field threshold at 30 m") {
  CHECK(min_field_pixels(30.0, 10.0) == 112);

  auto m = blank(40, 40);
  fill(m, 0, 0, 10, 12, 5);
  auto fields = extract_fields(m, 5);
  REQUIRE(fields.size() == 1);
  CHECK(fields[0].size() == 120);

  auto small = blank(40, 40);
  fill(small, 0, 0, 10, 11, 5);
  CHECK(extract_fields(small, 5).empty());
  CHECK(extract_fields(small, 5, 9.9).size() == 1);
  CHECK(extract_fields(small, 7).empty());
}

TEST_CASE("fields use 4-connectivity") {
  auto m = blank(30, 30);
  fill(m, 0, 0, 12, 12, 3);
  fill(m, 12, 12, 12, 12, 3);  // touches the first block only at a corner
  const auto fields = extract_fields(m, 3);
  REQUIRE(fields.size() == 2);
  CHECK(fields[0].size() == 144);
  CHECK(fields[1].size() == 144);
  CHECK(fields[0].front() == 0);
  CHECK(fields[1].front() == 12 * 30 + 12);

  // An L shape is one component; a single pixel bridge joins two blocks.
  auto l = blank(30, 30);
  fill(l, 0, 0, 12, 10, 4);
  fill(l, 0, 10, 1, 20, 4);
  const auto lf = extract_fields(l, 4);
  REQUIRE(lf.size() == 1);
  CHECK(lf[0].size() == 140);
  CHECK(std::is_sorted(lf[0].begin(), lf[0].end()));
}

TEST_CASE("stratify examples") {
  StrataPlan four{4, 8, 0};
  const std::vector<double> one_to_eight{1, 2, 3, 4, 5, 6, 7, 8};
  CHECK(stratify_pixels(one_to_eight, four).sizes() == std::vector<Index>{2, 2, 2, 2});

  const std::vector<double> flat(50, 3.0);
  const auto s = stratify_pixels(flat, StrataPlan{});
  const auto sizes = s.sizes();
  CHECK(std::count_if(sizes.begin(), sizes.end(), [](Index k) { return k > 0; }) == 1);
  CHECK(std::accumulate(sizes.begin(), sizes.end(), Index{0}) == 50);
}

TEST_CASE("uniform values split into equal quantile bins") {
  CounterRng rng(5);
  std::vector<double> v(10000);
  for (double& x : v) x = rng.uniform();
  const auto strata = stratify_pixels(v, StrataPlan{});
  for (Index k : strata.sizes()) CHECK(std::abs(k - 1250) <= 1);
  CHECK(strata.assignment == reference_strata(v, 8));
}

TEST_CASE("stratify matches the reference on tied data") {
  CounterRng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(40 + rng.below(100));
    for (double& x : v) x = static_cast<double>(rng.below(6));
    const int s = 1 + static_cast<int>(rng.below(8));
    CHECK(stratify_pixels(v, StrataPlan{s, 256, 0}).assignment == reference_strata(v, s));
  }
}

TEST_CASE("largest-remainder quotas") {
  const std::vector<Index> sizes{500, 250, 125, 125};
  CHECK(allocate_quotas(sizes, 256) == std::vector<Index>{128, 64, 32, 32});
  // 10 over 3 equal strata: remainders tie, lower index wins.
  CHECK(allocate_quotas(std::vector<Index>{5, 5, 5}, 10) == std::vector<Index>{4, 3, 3});
  CHECK(allocate_quotas(std::vector<Index>{0, 7, 0}, 4) == std::vector<Index>{0, 4, 0});

  CounterRng rng(8);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Index> sz(1 + rng.below(9));
    Index n = 0;
    for (Index& k : sz) n += (k = static_cast<Index>(rng.below(300)));
    if (n == 0) continue;
    const Index total = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    const auto q = allocate_quotas(sz, total);
    CHECK(std::accumulate(q.begin(), q.end(), Index{0}) == total);
    for (std::size_t i = 0; i < sz.size(); ++i) {
      const double exact = static_cast<double>(total) * static_cast<double>(sz[i]) / static_cast<double>(n);
      CHECK(std::abs(static_cast<double>(q[i]) - exact) < 1.0);
      CHECK(q[i] <= sz[i]);
    }
  }
}

TEST_CASE("stratified sample quotas, determinism and seed independence of counts") {
  // Strata in proportions .5/.25/.125/.125, pixels interleaved.
  Strata strata;
  strata.num_strata = 4;
  for (int i = 0; i < 1000; ++i) strata.assignment.push_back(i % 8 < 4 ? 0 : i % 8 < 6 ? 1 : 2 + i % 2);
  StrataPlan plan{4, 256, 1};
  CHECK(strata.sizes() == std::vector<Index>{500, 250, 125, 125});

  auto counts = [&](const std::vector<Index>& idx) {
    std::vector<Index> c(4, 0);
    for (Index i : idx) ++c[static_cast<std::size_t>(strata.assignment[static_cast<std::size_t>(i)])];
    return c;
  };
  const SampleKey key{"C01", 2, 2015};
  const auto a = sample_stratified(strata, plan, key);
  CHECK(a.size() == 256);
  CHECK(counts(a) == std::vector<Index>{128, 64, 32, 32});
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
  CHECK(sample_stratified(strata, plan, key) == a);

  StrataPlan other = plan;
  other.seed = 2;
  const auto b = sample_stratified(strata, other, key);
  CHECK(b != a);
  CHECK(counts(b) == counts(a));
  CHECK(sample_stratified(strata, plan, SampleKey{"C02", 2, 2015}) != a);

  std::vector<double> few(100);
  std::iota(few.begin(), few.end(), 0.0);
  const auto all = sample_stratified(stratify_pixels(few, plan), plan, key);
  REQUIRE(all.size() == 100);
  for (Index i = 0; i < 100; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("stratified sampling preserves the population mean") {
  CounterRng pop_rng(21);
  std::vector<double> v(4000);
  for (double& x : v) x = std::exp(pop_rng.normal(0.0, 0.8));  // skewed population
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size() - 1);
  const double k = 256.0;
  // Simple-random-sampling standard error with finite-population correction;
  // stratification can only shrink the spread.
  const double se = std::sqrt(var / k * (1.0 - k / static_cast<double>(v.size())));

  const auto strata = stratify_pixels(v, StrataPlan{});
  int within = 0;
  for (int trial = 0; trial < 200; ++trial) {
    StrataPlan plan{8, 256, static_cast<std::uint64_t>(trial)};
    const auto idx = sample_stratified(strata, plan, SampleKey{"C01", 0, 2010});
    double m = 0.0;
    for (Index i : idx) m += v[static_cast<std::size_t>(i)];
    m /= static_cast<double>(idx.size());
    if (std::abs(m - mean) <= 3.0 * se) ++within;
  }
  CHECK(within >= 190);
}

TEST_CASE("subsampling a sample keeps N-axis modalities aligned") {
  CountyCropSample s;
  s.county_id = "C01";
  s.year = 2011;
  const Index n = 600;
  s.landsat = Tensor({12, 6, n});
  s.et = Tensor({12, 1, n});
  s.soil = Tensor({1, 5, n});
  s.climate = Tensor({365, 8, 2});
  for (Index p = 0; p < n; ++p) {
    for (Index t = 0; t < 12; ++t) {
      for (Index c = 0; c < 6; ++c) s.landsat.at({t, c, p}) = static_cast<double>(p) + 0.1 * c;
      s.et.at({t, 0, p}) = static_cast<double>(p);
    }
    for (Index c = 0; c < 5; ++c) s.soil.at({0, c, p}) = static_cast<double>(p);
  }
  const auto nir = nir_temporal_mean(s.landsat);
  REQUIRE(nir.size() == static_cast<std::size_t>(n));
  CHECK(nir[7] == doctest::Approx(7.3));

  const auto sub = subsample_pixels(s, StrataPlan{});
  CHECK(sub.n_pixels() == 256);
  CHECK(sub.m_pixels() == 2);
  CHECK(validate_sample(sub).empty());
  for (Index j = 0; j < 256; ++j) {
    const double p = sub.et.at({3, 0, j});
    CHECK(sub.soil.at({0, 2, j}) == p);
    CHECK(sub.landsat.at({5, 3, j}) == doctest::Approx(p + 0.3));
  }
}
