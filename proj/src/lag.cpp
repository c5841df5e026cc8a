#include "lagdiff/lag.hpp"

#include <algorithm>

#include "lagdiff/ops.hpp"

namespace lagdiff {

Tensor aggregate_concept_maps(const AttentionStack::BlockMaps& maps,
                              const std::vector<int>& concept_indices) {
  if (concept_indices.empty())
    throw ConfigError("aggregate_concept_maps: empty concept index set");
  for (int j : concept_indices)
    if (j < 0 || j >= maps.seq)
      throw ConfigError("aggregate_concept_maps: concept index out of range");
  int hw = maps.h * maps.w;
  Tensor out = Tensor::zeros({maps.h, maps.w});
  double inv_heads = 1.0 / double(maps.heads);
  for (int p = 0; p < hw; ++p) {
    double v = 0.0;
    for (int j : concept_indices) {
      double head_mean = 0.0;
      for (int hd = 0; hd < maps.heads; ++hd) head_mean += maps.at(hd, p, j);
      v += head_mean * inv_heads;
    }
    out.data()[p] = v;
  }
  return out;
}

namespace {

// median = middle element (odd n) or mean of the two middle elements (even n)
double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Mask binarize_values(const double* a, int h, int w) {
  int n = h * w;
  std::vector<double> v(a, a + n);
  Mask m;
  m.h = h;
  m.w = w;
  m.m.assign(size_t(n), 0);
  double lo = *std::min_element(v.begin(), v.end());
  double hi = *std::max_element(v.begin(), v.end());
  if (lo == hi) {
    m.m.assign(size_t(n), 1);
    m.degenerate = true;
    return m;
  }
  double med = median_of(v);
  for (int i = 0; i < n; ++i) m.m[size_t(i)] = a[i] > med ? 1 : 0;
  return m;
}

}  // namespace

Mask binarize_median(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("binarize_median: expected rank-2 map");
  return binarize_values(a.data(), a.dim(0), a.dim(1));
}

Tensor blend_features(const Tensor& f, const Tensor& f_prime, const Mask& m) {
  if (int64_t(m.m.size()) != int64_t(m.h) * m.w)
    throw DimensionError("blend_features: malformed mask");
  Tensor mt = Tensor::zeros({m.h, m.w});
  for (size_t i = 0; i < m.m.size(); ++i) mt.data()[i] = double(m.m[i]);
  return ops::blend_masked(f, f_prime, mt);
}

Mask mask_from_attention(const AttentionStack::BlockMaps& maps,
                         const std::vector<int>& concept_indices, bool median_per_head) {
  if (!median_per_head) return binarize_median(aggregate_concept_maps(maps, concept_indices));

  // Per-head variant: binarize each head's summed concept map by its own
  // median, then take a majority vote across heads.
  if (concept_indices.empty())
    throw ConfigError("mask_from_attention: empty concept index set");
  int hw = maps.h * maps.w;
  std::vector<int> votes(size_t(hw), 0);
  bool any_degenerate = false;
  for (int hd = 0; hd < maps.heads; ++hd) {
    std::vector<double> summed(size_t(hw), 0.0);
    for (int p = 0; p < hw; ++p)
      for (int j : concept_indices) summed[size_t(p)] += maps.at(hd, p, j);
    Mask mh = binarize_values(summed.data(), maps.h, maps.w);
    any_degenerate = any_degenerate || mh.degenerate;
    for (int p = 0; p < hw; ++p) votes[size_t(p)] += mh.m[size_t(p)];
  }
  Mask m;
  m.h = maps.h;
  m.w = maps.w;
  m.degenerate = any_degenerate;
  m.m.assign(size_t(hw), 0);
  int need = (maps.heads + 1) / 2;
  for (int p = 0; p < hw; ++p) m.m[size_t(p)] = votes[size_t(p)] >= need ? 1 : 0;
  return m;
}

}  // namespace lagdiff
