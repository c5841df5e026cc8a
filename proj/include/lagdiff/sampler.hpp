#pragma once

#include <string>
#include <vector>

#include "lagdiff/attention.hpp"
#include "lagdiff/residuals.hpp"
#include "lagdiff/schedule.hpp"
#include "lagdiff/unet.hpp"

namespace lagdiff {

// Per-step, per-block masks actually applied during a LAG run. Replaying
// them through the injection hook reproduces the image bitwise.
struct MaskStack {
  std::vector<std::vector<Mask>> steps;  // [step][block]

  bool empty() const { return steps.empty(); }
  void save_pgm_dir(const std::string& dir) const;
  static MaskStack load_pgm_dir(const std::string& dir, int steps, int blocks);
};

// eps_uncond + w (eps_cond - eps_uncond)
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w);

// One DDIM update from timestep t to t_prev (t > t_prev >= 0):
//   z0_pred = (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t)
//   sigma   = eta sqrt((1-abar_prev)/(1-abar_t)) sqrt(1 - abar_t/abar_prev)
//   z_prev  = sqrt(abar_prev) z0_pred + sqrt(1-abar_prev-sigma^2) eps + sigma noise
Tensor ddim_step(const Tensor& z_t, const Tensor& eps_pred, int t, int t_prev,
                 const NoiseSchedule& s, double eta, const Tensor& noise);

// Final update of the trajectory: projects the last state to its predicted
// clean image (the abar -> 1, sigma = 0 limit of the step above).
Tensor ddim_final_project(const Tensor& z_t, const Tensor& eps_pred, int t,
                          const NoiseSchedule& s);

struct SampleParams {
  std::string prompt;
  uint64_t seed = 0;
  int steps = 50;
  double eta = 0.0;
  double guidance = 6.0;
  bool lag = false;
  bool median_per_head = false;
};

struct SampleOutput {
  Tensor image;  // [3,32,32] clamped to [-1,1]
  MaskStack masks;
  int num_evals = 0;  // network evaluations (2 per step under CFG)
  uint64_t z_t_hash = 0;
};

// Full sampling pipeline: seeded z_T, CFG with the unconditional pass always
// on pure base weights, optional residuals in the conditional pass, optional
// LAG blending with per-step masks. Injected masks override computed ones.
SampleOutput sample(const SampleParams& p, const UNetWeights& w, const Vocabulary& vocab,
                    const NoiseSchedule& s, const ResidualSet* residuals = nullptr,
                    const MaskStack* inject = nullptr);

std::vector<int> ddim_timesteps(int T, int n_steps);

}  // namespace lagdiff
