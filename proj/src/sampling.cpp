#include "cyb/sampling.hpp"

#include "cyb/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cyb {

Index min_field_pixels(double pixel_size_m, double min_area_ha) {
  const double pixel_ha = pixel_size_m * pixel_size_m / 10000.0;
  // Guard against 10 / 0.09 landing a hair above an integer.
  return static_cast<Index>(std::ceil(min_area_ha / pixel_ha - 1e-9));
}

std::vector<Field> extract_fields(const CdlMask& mask, std::int32_t crop_code, double min_area_ha) {
  const Index h = mask.height(), w = mask.width();
  const Index min_pixels = min_field_pixels(mask.pixel_size_m, min_area_ha);
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(h * w), 0);
  std::vector<Field> fields;
  std::vector<Index> stack;
  for (Index start = 0; start < h * w; ++start) {
    if (seen[start] || mask.codes(start / w, start % w) != crop_code) continue;
    Field field;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const Index p = stack.back();
      stack.pop_back();
      field.push_back(p);
      const Index r = p / w, c = p % w;
      const Index nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& rc : nbr) {
        if (rc[0] < 0 || rc[0] >= h || rc[1] < 0 || rc[1] >= w) continue;
        const Index q = rc[0] * w + rc[1];
        if (seen[q] || mask.codes(rc[0], rc[1]) != crop_code) continue;
        seen[q] = 1;
        stack.push_back(q);
      }
    }
    if (static_cast<Index>(field.size()) >= min_pixels) {
      std::sort(field.begin(), field.end());
      fields.push_back(std::move(field));
    }
  }
  return fields;
}

std::vector<Index> Strata::sizes() const {
  std::vector<Index> s(static_cast<std::size_t>(num_strata), 0);
  for (int a : assignment) ++s[static_cast<std::size_t>(a)];
  return s;
}

Strata stratify_pixels(std::span<const double> values, const StrataPlan& plan) {
  if (plan.num_strata < 1) throw std::invalid_argument("num_strata must be >= 1");
  const auto n = static_cast<Index>(values.size());
  if (n < plan.num_strata) {
    throw std::invalid_argument("stratify_pixels needs at least num_strata values (" +
                                std::to_string(plan.num_strata) + "), got " + std::to_string(n));
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> cuts;
  for (int j = 1; j < plan.num_strata; ++j) {
    cuts.push_back(sorted[static_cast<std::size_t>(j * n / plan.num_strata)]);
  }
  Strata s;
  s.num_strata = plan.num_strata;
  s.assignment.reserve(values.size());
  for (double v : values) {
    // Number of cut points <= v.
    s.assignment.push_back(
        static_cast<int>(std::upper_bound(cuts.begin(), cuts.end(), v) - cuts.begin()));
  }
  return s;
}

std::vector<Index> allocate_quotas(std::span<const Index> sizes, Index total) {
  const Index n = std::accumulate(sizes.begin(), sizes.end(), Index{0});
  std::vector<Index> quota(sizes.size(), 0);
  if (n == 0 || total == 0) return quota;
  std::vector<std::pair<Index, std::size_t>> remainders;  // numerator of the fractional part
  Index assigned = 0;
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    // Exact integer arithmetic: share = total * size / n.
    const Index num = total * sizes[s];
    quota[s] = num / n;
    assigned += quota[s];
    remainders.emplace_back(num % n, s);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (Index k = 0; k < total - assigned; ++k) ++quota[remainders[static_cast<std::size_t>(k)].second];
  return quota;
}

std::vector<Index> sample_stratified(const Strata& strata, const StrataPlan& plan,
                                     const SampleKey& key) {
  const auto n = static_cast<Index>(strata.assignment.size());
  if (n == 0) throw std::invalid_argument("sample_stratified needs a non-empty pixel set");
  std::vector<Index> out;
  if (n <= plan.target_k) {
    out.resize(static_cast<std::size_t>(n));
    std::iota(out.begin(), out.end(), Index{0});
    return out;
  }
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(strata.num_strata));
  for (Index i = 0; i < n; ++i) members[static_cast<std::size_t>(strata.assignment[i])].push_back(i);
  std::vector<Index> sizes;
  for (const auto& m : members) sizes.push_back(static_cast<Index>(m.size()));
  const auto quota = allocate_quotas(sizes, plan.target_k);

  std::uint64_t base = combine_key(plan.seed, key.county);
  base = combine_key(base, static_cast<std::uint64_t>(key.crop));
  base = combine_key(base, static_cast<std::uint64_t>(key.year));
  for (std::size_t s = 0; s < members.size(); ++s) {
    auto& pool = members[s];
    CounterRng rng(combine_key(base, static_cast<std::uint64_t>(s)));
    // Partial Fisher-Yates: the first quota[s] slots become the sample.
    for (Index i = 0; i < quota[s]; ++i) {
      const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(pool.size() - i)));
      std::swap(pool[i], pool[j]);
    }
    out.insert(out.end(), pool.begin(), pool.begin() + quota[s]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> nir_temporal_mean(const Tensor& landsat) {
  const Index t = landsat.dim(0), c = landsat.dim(1), p = landsat.dim(2);
  if (c <= kNirChannel) throw DimensionError("landsat has no NIR channel: " + shape_str(landsat.shape()));
  std::vector<double> mean(static_cast<std::size_t>(p), 0.0);
  for (Index ti = 0; ti < t; ++ti) {
    for (Index pi = 0; pi < p; ++pi) mean[pi] += landsat.at({ti, kNirChannel, pi});
  }
  for (double& m : mean) m /= static_cast<double>(t);
  return mean;
}

Tensor take_pixels(const Tensor& x, std::span<const Index> pixels) {
  const Index rows = x.numel() / x.last_dim();
  Tensor out({x.dim(0), x.dim(1), static_cast<Index>(pixels.size())});
  for (Index r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < pixels.size(); ++k) {
      out.matrix()(r, static_cast<Index>(k)) = x.matrix()(r, pixels[k]);
    }
  }
  return out;
}

CountyCropSample subsample_pixels(const CountyCropSample& s, const StrataPlan& plan) {
  if (s.n_pixels() <= plan.target_k) return s;
  const auto stat = nir_temporal_mean(s.landsat);
  const Strata strata = stratify_pixels(stat, plan);
  const auto idx = sample_stratified(strata, plan, {s.county_id, s.crop_id, s.year});
  CountyCropSample out = s;
  out.landsat = take_pixels(s.landsat, idx);
  out.et = take_pixels(s.et, idx);
  out.soil = take_pixels(s.soil, idx);
  return out;
}

}  // namespace cyb
