#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lagdiff/attention.hpp"
#include "lagdiff/lag.hpp"
#include "lagdiff/schedule.hpp"
#include "lagdiff/tensor.hpp"
#include "lagdiff/text.hpp"

namespace lagdiff {

struct ResidualSet;  // residuals.hpp

struct UNetConfig {
  int image_size = 32;
  int in_channels = 3;
  std::vector<int> widths = {32, 64, 64, 32};  // transformer block channel widths
  int heads = 2;
  int d_k = 16;
  int d_txt = 32;
  int t_dim = 32;
  int ff_mult = 2;

  int d_inner() const { return heads * d_k; }
  int num_blocks() const { return int(widths.size()); }
  // Blocks sit at [16,8,8,16] for a 32px image: one level down, two at the
  // bottleneck, one back up.
  int block_res(int i) const {
    int half = image_size / 2, quarter = image_size / 4;
    return (i == 0 || i == 3) ? half : quarter;
  }
};

// One transformer block: proj_in conv, self-attention, cross-attention,
// feed-forward, proj_out conv, plus the per-block timestep map.
struct TransformerBlockWeights {
  Tensor time_w, time_b;          // [t_dim, m], [m]
  Tensor proj_in_w, proj_in_b;    // [m, m, 1], [m]
  Tensor ln1_g, ln1_b;
  Tensor self_q, self_k, self_v;  // [m, d_inner], no bias (A(Q,K) convention)
  Tensor self_o, self_ob;         // [d_inner, m], [m]
  Tensor ln2_g, ln2_b;
  Tensor cross_q;                 // [m, d_inner]
  Tensor cross_k, cross_v;        // [d_txt, d_inner]
  Tensor cross_o, cross_ob;       // [d_inner, m], [m]
  Tensor ln3_g, ln3_b;
  Tensor ff1_w, ff1_b;            // [m, ff_mult*m]
  Tensor ff2_w, ff2_b;            // [ff_mult*m, m]
  Tensor proj_out_w, proj_out_b;  // [m, m, 1], [m]
};

struct UNetWeights {
  UNetConfig cfg;
  Tensor stem_w, stem_b;    // 3 -> widths[0] at full res
  Tensor down1_w, down1_b;  // widths[0] -> widths[0] at half res
  Tensor down2_w, down2_b;  // widths[0] -> widths[1] at quarter res
  Tensor up1_w, up1_b;      // widths[2] -> widths[3] at half res
  Tensor head_w, head_b;    // widths[3] -> 3 at full res
  std::vector<TransformerBlockWeights> blocks;

  static UNetWeights init(const UNetConfig& cfg, uint64_t seed);

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  int64_t param_count() const;
  void set_requires_grad(bool v);
  uint64_t weights_hash() const;
};

struct Conditioning {
  Tensor emb;  // [seq, d_txt]
  int n_valid = 0;
  std::vector<int> concept_indices;
};

struct ForwardOptions {
  const ResidualSet* residuals = nullptr;
  const LagConfig* lag = nullptr;
  bool capture_mid_features = false;
};

struct ForwardResult {
  Tensor eps;  // [3,H,W]
  AttentionStack attn;
  std::vector<Mask> lag_masks;  // per block, set when LAG ran
  Tensor mid_features;          // [widths[1]] spatial mean after the mid block
};

// Pure function of (inputs, weights, residuals, lag, masks).
ForwardResult unet_forward(const Tensor& z_t, int t, const Conditioning& cond,
                           const UNetWeights& w, const ForwardOptions& opts = {});

// One transformer block on an [m,h,w] feature map (proj_in, self-attention,
// cross-attention, feed-forward, proj_out, outer skip). Exposed so the block
// can be gradient-checked and probed in isolation.
Tensor transformer_block_forward(const TransformerBlockWeights& bw, const Tensor& x_map, int t,
                                 const Conditioning& cond, const UNetConfig& cfg,
                                 int block_index = 0, AttentionStack* attn = nullptr,
                                 const ResidualSet* residuals = nullptr,
                                 const LagConfig* lag = nullptr,
                                 std::vector<Mask>* masks_out = nullptr);

TransformerBlockWeights init_block_weights(int m, const UNetConfig& cfg, uint64_t seed);

Conditioning make_conditioning(const Tensor& table, const TokenSequence& toks, int vstar_id = -1,
                               const Tensor* vstar_row = nullptr);

struct TrainItem {
  Tensor z0;  // [3,H,W] in [-1,1]
  TokenSequence tokens;
};

struct LossOptions {
  const ResidualSet* residuals = nullptr;
  double prompt_dropout = 0.0;
  int vstar_id = -1;
  const Tensor* vstar_row = nullptr;
  int* null_cond_counter = nullptr;  // incremented per dropped-out item
};

// Mean over the batch of per-item mean squared noise prediction error.
// t ~ uniform[0,T), eps ~ N(0,1) drawn from rng per item.
Tensor ldm_loss(const std::vector<TrainItem>& batch, const UNetWeights& w, const Tensor& emb_table,
                const NoiseSchedule& s, Rng& rng, const LossOptions& opts = {});

struct PretrainConfig {
  int steps = 1400;
  int batch = 8;
  double lr = 2e-3;
  double prompt_dropout = 0.1;
};

struct PretrainResult {
  std::vector<double> loss_trace;
  int null_cond_count = 0;
  int items_seen = 0;
};

// Trains all UNet weights plus the token embedding table in place.
PretrainResult pretrain(UNetWeights& w, Vocabulary& vocab, const std::vector<TrainItem>& dataset,
                        const NoiseSchedule& s, const PretrainConfig& cfg, uint64_t seed);

}  // namespace lagdiff
