#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lagdiff/residuals.hpp"
#include "lagdiff/sampler.hpp"
#include "lagdiff/unet.hpp"

namespace lagdiff::eval {

// Identity-attribute descriptor: 4x4x4 color histogram over the extracted
// sprite region plus normalized shape moments. Position-invariant for clean
// sprites.
std::vector<double> identity_descriptor(const Tensor& img);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

// Quantizes through the 8-bit image codec so in-memory sprites and images
// loaded from disk live in the same space.
Tensor quantize_unit(const Tensor& img);

// Frozen-base probe: class signatures are mean mid-block features over 8
// procedurally rendered sprites per class, under null conditioning at t=0.
class Probe {
 public:
  Probe(const UNetWeights& base, const Vocabulary& vocab, const NoiseSchedule& s);

  std::vector<double> feature(const Tensor& img) const;
  const std::vector<double>& class_signature(const std::string& class_word) const;

  // Text alignment: image feature vs. the signature of the prompt's class.
  double text_alignment(const Tensor& image, const std::string& prompt) const;

  // Nearest class word for a reference set; ties break to the lowest token id.
  std::string macro_class_nn(const std::vector<Tensor>& references) const;

 private:
  const UNetWeights& base_;
  const Vocabulary& vocab_;
  const NoiseSchedule& s_;
  std::vector<std::pair<std::string, std::vector<double>>> signatures_;
};

// Image alignment: descriptor of the generated image vs. the mean reference
// descriptor.
double toy_image_alignment(const Tensor& generated, const std::vector<Tensor>& references);

struct EvalRow {
  std::string concept_id;
  std::string prompt;
  std::string variant;
  uint64_t seed = 0;
  double text_align = 0.0;
  double image_align = 0.0;
  double runtime_ms = 0.0;
  std::string config_hash;
  uint64_t z_hash = 0;
  std::string error;  // non-empty marks a failed row

  bool failed() const { return !error.empty(); }
};

struct EvalReport {
  std::vector<EvalRow> rows;
};

// CSV column order is pinned:
// concept,prompt,variant,seed,text_align,image_align,runtime_ms,config_hash
// runtime_ms is written as 0 unless include_timings; measured values go to
// the log so reruns stay bitwise identical.
void emit_report_csv(const EvalReport& r, const std::string& path, bool include_timings = false);
void emit_report_json(const EvalReport& r, const std::string& path, bool include_timings = false);

struct AblationVariant {
  std::string label;
  PersonalizeConfig config;
};

struct RankPoint {
  std::string label;
  int rank_fixed = -1;
  double rank_frac = -1.0;
};

struct AblationPlan {
  std::vector<AblationVariant> variants;  // default row always present
  std::vector<RankPoint> rank_sweep;
  std::vector<std::string> prompts;  // "{class}" expands to the macro class
  std::vector<uint64_t> seeds;

  static AblationPlan load(const std::string& path);
  static AblationPlan builtin_default();
};

struct ConceptJob {
  std::string id;
  std::string macro_class;
  std::vector<Tensor> references;
  uint64_t seed = 0;  // personalization seed
};

// Personalize-then-sample-then-score over variants x concepts x prompts x
// seeds. Identical sampling seeds across variants; per-row failures are
// marked, not fatal. threads <= 1 runs inline.
EvalReport run_ablations(const AblationPlan& plan, const std::vector<ConceptJob>& concepts,
                         const UNetWeights& base, const Vocabulary& vocab,
                         const NoiseSchedule& s, int threads = 1);

// Rank sweep rows (variant = rank label) over the plan's rank list.
EvalReport run_rank_sweep(const AblationPlan& plan, const std::vector<ConceptJob>& concepts,
                          const UNetWeights& base, const Vocabulary& vocab,
                          const NoiseSchedule& s, int threads = 1);

// Fraction of adjacent rank pairs, pooled over (concept, prompt, seed)
// series, where image alignment does not decrease with rank.
double rank_trend_fraction(const EvalReport& sweep, const std::vector<int>& ranks);

int env_threads();  // LAGDIFF_THREADS, default 1

}  // namespace lagdiff::eval
