#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lagdiff/tensor.hpp"
#include "lagdiff/unet.hpp"

namespace lagdiff {

// Where low-rank residuals attach inside a transformer block.
enum class ResidualTarget : uint32_t { ProjOut = 0, ProjIn = 1, CrossK = 2, CrossV = 3 };

enum class TargetSelector { ProjOut, KV, ProjIn, KVProjOut, KVProjInProjOut };

TargetSelector target_selector_from_string(const std::string& s);
std::string to_string(TargetSelector s);
std::vector<ResidualTarget> targets_of(TargetSelector s);

struct ResidualEntry {
  ResidualTarget target = ResidualTarget::ProjOut;
  int rows = 0, cols = 0, rank = 0;  // delta W is rows x cols, rank-bounded
  Tensor a;                          // [rows, rank]
  Tensor b;                          // [rank, cols]
};

// One personalized concept: per-block factor pairs plus metadata.
struct ResidualSet {
  std::vector<std::vector<ResidualEntry>> blocks;
  int vstar_id = -1;
  std::string macro_class;
  std::string config_hash;
  Tensor vstar_embedding;  // defined only for update-token-embedding sets

  int64_t param_count() const;
  bool proj_out_only() const;
  void zero();  // zero all factors in place
  std::vector<Tensor> factors() const;
};

struct PersonalizeConfig {
  int iterations = 150;
  int batch = 4;
  double lr = 1e-3;
  TargetSelector targets = TargetSelector::ProjOut;
  bool use_macro_class = true;
  bool use_reg_images = false;
  bool update_token_embedding = false;
  int rank_fixed = -1;      // -1: use rank_for / rank_frac
  double rank_frac = -1.0;  // e.g. 0.05 for the default rule

  std::string hash() const;
};

// r = max(1, round-half-even(0.05 m)).
int rank_for(int m);
int rank_for_frac(int m, double frac);

ResidualSet init_residuals(const UNetWeights& w, const PersonalizeConfig& cfg, uint64_t seed);

// W' = W + reshape(A B) for a conv kernel [m,m,1].
Tensor apply_residual(const Tensor& w, const Tensor& a, const Tensor& b);

struct PersonalizeResult {
  ResidualSet residuals;
  std::vector<double> loss_trace;   // per-iteration training loss
  double eval_loss_initial = 0.0;   // fixed-protocol reference-set loss
  double eval_loss_final = 0.0;
  int reg_slots_used = 0;           // regularization images consumed
  uint64_t base_hash_before = 0;
  uint64_t base_hash_after = 0;
};

// Learns residuals for one concept against a frozen base model. Reference
// images train with the fixed template prompt; no regularization images by
// default. Only the selected targets (plus optionally the V* embedding row)
// receive updates.
PersonalizeResult personalize(const UNetWeights& base, Vocabulary& vocab,
                              const std::vector<Tensor>& refs, const std::string& macro_class,
                              const NoiseSchedule& s, const PersonalizeConfig& cfg, uint64_t seed);

void save_residuals(const ResidualSet& rs, const std::string& path);
ResidualSet load_residuals(const std::string& path);

struct ParamReport {
  int64_t residual_params = 0;
  int64_t base_params = 0;
  double ratio = 0.0;
};
ParamReport param_report(const ResidualSet& rs, const UNetWeights& base);

}  // namespace lagdiff
