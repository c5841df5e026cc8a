#pragma once

#include <vector>

#include "lagdiff/attention.hpp"
#include "lagdiff/tensor.hpp"

namespace lagdiff {

// Localized attention-guided sampling controls for one forward pass.
struct LagConfig {
  bool enabled = false;
  std::vector<int> concept_indices;  // token positions of V* and macro class
  // Alternative binarization: per-head median then majority vote instead of
  // the default head-mean-then-median. Off by default.
  bool median_per_head = false;

  // Injection hook: when set, the forward uses these masks (one per block)
  // instead of computing them from attention.
  const std::vector<Mask>* inject = nullptr;
  // When set, the forward records the masks it actually applied.
  std::vector<Mask>* capture = nullptr;
};

// Head-mean of the block's cross-attention maps, summed over the concept
// token columns, reshaped to the block's spatial grid.
Tensor aggregate_concept_maps(const AttentionStack::BlockMaps& maps,
                              const std::vector<int>& concept_indices);

// Median binarization: strictly-above-median entries become 1. Even-sized
// inputs use the mean of the two middle values. An all-equal map yields the
// all-ones mask (degenerate policy: apply the concept rather than drop it).
Mask binarize_median(const Tensor& a);

// (1-M) (x) f + M (x) f_prime over channels; exact select on the binary mask.
Tensor blend_features(const Tensor& f, const Tensor& f_prime, const Mask& m);

// Full mask rule for one block, honoring median_per_head.
Mask mask_from_attention(const AttentionStack::BlockMaps& maps,
                         const std::vector<int>& concept_indices, bool median_per_head);

}  // namespace lagdiff
