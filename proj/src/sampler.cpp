#include "lagdiff/sampler.hpp"

#include <cmath>
#include <filesystem>

#include "lagdiff/data.hpp"
#include "lagdiff/ops.hpp"

namespace lagdiff {

namespace fs = std::filesystem;
namespace op = ops;

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w) {
  if (!eps_uncond.same_shape(eps_cond))
    throw DimensionError("cfg_combine: shape mismatch " + shape_str(eps_uncond.shape()) + " vs " +
                         shape_str(eps_cond.shape()));
  return op::add(eps_uncond, op::scale(op::sub(eps_cond, eps_uncond), w));
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps_pred, int t, int t_prev,
                 const NoiseSchedule& s, double eta, const Tensor& noise) {
  if (t_prev >= t || t_prev < 0 || t >= s.T) throw InputError("ddim_step: need t > t_prev >= 0");
  double ab_t = s.alpha_bar[size_t(t)];
  double ab_prev = s.alpha_bar[size_t(t_prev)];

  Tensor z0_pred = op::scale(op::sub(z_t, op::scale(eps_pred, std::sqrt(1.0 - ab_t))),
                             1.0 / std::sqrt(ab_t));
  double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
  Tensor out = op::add(op::scale(z0_pred, std::sqrt(ab_prev)),
                       op::scale(eps_pred, std::sqrt(1.0 - ab_prev - sigma * sigma)));
  if (eta != 0.0 && sigma != 0.0) {
    if (!noise.defined() || !noise.same_shape(z_t)) throw InputError("ddim_step: noise shape mismatch");
    out = op::add(out, op::scale(noise, sigma));
  }
  return out;
}

Tensor ddim_final_project(const Tensor& z_t, const Tensor& eps_pred, int t,
                          const NoiseSchedule& s) {
  double ab_t = s.alpha_bar[size_t(t)];
  return op::scale(op::sub(z_t, op::scale(eps_pred, std::sqrt(1.0 - ab_t))), 1.0 / std::sqrt(ab_t));
}

std::vector<int> ddim_timesteps(int T, int n_steps) {
  if (n_steps < 1) throw InputError("sample: steps must be >= 1");
  if (n_steps > T) throw InputError("sample: steps cannot exceed schedule length");
  int stride = T / n_steps;
  std::vector<int> ts(static_cast<size_t>(n_steps));
  for (int k = 0; k < n_steps; ++k) ts[size_t(k)] = (n_steps - 1 - k) * stride;
  return ts;  // descending, ends at 0
}

void MaskStack::save_pgm_dir(const std::string& dir) const {
  fs::create_directories(dir);
  for (size_t step = 0; step < steps.size(); ++step)
    for (size_t blk = 0; blk < steps[step].size(); ++blk) {
      const Mask& m = steps[step][blk];
      std::string name = "mask_b" + std::to_string(blk) + "_t" + std::to_string(step) + ".pgm";
      data::save_pgm(m.m, m.h, m.w, (fs::path(dir) / name).string());
    }
}

MaskStack MaskStack::load_pgm_dir(const std::string& dir, int steps_n, int blocks_n) {
  MaskStack ms;
  ms.steps.resize(size_t(steps_n));
  for (int step = 0; step < steps_n; ++step) {
    ms.steps[size_t(step)].resize(size_t(blocks_n));
    for (int blk = 0; blk < blocks_n; ++blk) {
      std::string name = "mask_b" + std::to_string(blk) + "_t" + std::to_string(step) + ".pgm";
      Mask& m = ms.steps[size_t(step)][size_t(blk)];
      data::load_pgm((fs::path(dir) / name).string(), m.m, m.h, m.w);
    }
  }
  return ms;
}

SampleOutput sample(const SampleParams& p, const UNetWeights& w, const Vocabulary& vocab,
                    const NoiseSchedule& s, const ResidualSet* residuals,
                    const MaskStack* inject) {
  if (p.eta < 0.0 || p.eta > 1.0) throw InputError("sample: eta must be in [0,1]");
  if (p.guidance < 0.0) throw InputError("sample: guidance must be >= 0");

  // V* resolves to the residual file's token, or the first reserved id for
  // base-model runs so base-vs-personalized comparisons share embeddings.
  int vstar_id = residuals ? residuals->vstar_id : vocab.first_reserved_id();
  std::string macro = residuals ? residuals->macro_class : "";
  TokenSequence toks = vocab.tokenize(p.prompt, vstar_id, macro);
  if (p.lag && toks.concept_indices.empty())
    throw ConfigError("lag: prompt contains no concept tokens");

  const Tensor* vrow =
      residuals && residuals->vstar_embedding.defined() ? &residuals->vstar_embedding : nullptr;
  Conditioning cond = make_conditioning(vocab.embedding_table(), toks, vstar_id, vrow);
  Conditioning uncond = make_conditioning(vocab.embedding_table(), vocab.null_sequence());

  Rng z_rng(p.seed, /*stream=*/0x5EED);
  Tensor z = Tensor::randn({w.cfg.in_channels, w.cfg.image_size, w.cfg.image_size}, z_rng);
  Rng noise_rng(p.seed, /*stream=*/0x401E5);

  std::vector<int> ts = ddim_timesteps(s.T, p.steps);
  if (inject && int(inject->steps.size()) != int(ts.size()))
    throw ConfigError("mask injection: expected " + std::to_string(ts.size()) + " steps, got " +
                      std::to_string(inject->steps.size()));

  SampleOutput out;
  out.z_t_hash = z.content_hash();

  for (size_t k = 0; k < ts.size(); ++k) {
    int t = ts[k];

    ForwardOptions fo;
    fo.residuals = residuals;
    LagConfig lag;
    if (p.lag) {
      lag.enabled = true;
      lag.concept_indices = toks.concept_indices;
      lag.median_per_head = p.median_per_head;
      if (inject) lag.inject = &inject->steps[k];
      fo.lag = &lag;
    }
    ForwardResult cond_res = unet_forward(z, t, cond, w, fo);
    ++out.num_evals;
    if (p.lag) out.masks.steps.push_back(cond_res.lag_masks);

    // Unconditional pass on pure base weights: the null prompt carries no
    // concept tokens, so no residuals and no LAG.
    ForwardResult unc_res = unet_forward(z, t, uncond, w, {});
    ++out.num_evals;

    Tensor eps = cfg_combine(unc_res.eps, cond_res.eps, p.guidance);
    if (k + 1 < ts.size()) {
      Tensor noise;
      if (p.eta != 0.0) noise = Tensor::randn(z.shape(), noise_rng);
      z = ddim_step(z, eps, t, ts[k + 1], s, p.eta, noise);
    } else {
      z = ddim_final_project(z, eps, t, s);
    }
  }

  op::clamp_values(z, -1.0, 1.0);
  out.image = z;
  return out;
}

}  // namespace lagdiff
