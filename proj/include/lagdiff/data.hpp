#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lagdiff/tensor.hpp"

namespace lagdiff::data {

using Color = std::array<double, 3>;

// Identity = (shape family, two colors, texture); backgrounds vary across a
// concept's references, identity attributes do not.
struct ConceptSpec {
  std::string id;
  std::string macro_class;
  int shape_family = -1;  // derived from macro_class when negative
  Color color_primary{1, -1, -1};
  Color color_secondary{-1, -1, 1};
  int texture = 0;          // 0 solid, 1 h-stripes, 2 v-stripes, 3 dots
  int background_dist = 0;  // offsets the per-reference background style cycle
  int size = 8;             // sprite radius in pixels
  int reference_count = 4;
};

struct ManifestItem {
  std::string path;  // relative to the manifest
  std::string caption;
  std::string split;       // "pretrain" | "reference"
  std::string concept_id;  // empty for pretrain images
};

struct DatasetManifest {
  int version = 1;
  std::vector<ManifestItem> items;
};

// The eight sprite classes and the full closed vocabulary (template words,
// classes, context words).
const std::vector<std::string>& class_words();
const std::vector<std::string>& vocab_words();
int shape_family_of(const std::string& macro_class);  // VocabularyError when unknown

// P6 binary PPM, 8-bit, [-1,1] <-> [0,255] by affine rounding.
void save_ppm(const Tensor& img, const std::string& path);
Tensor load_ppm(const std::string& path);

// P5 binary PGM for masks: {0,1} stored as {0,255}.
void save_pgm(const std::vector<uint8_t>& mask, int h, int w, const std::string& path);
void load_pgm(const std::string& path, std::vector<uint8_t>& mask, int& h, int& w);

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

ConceptSpec concept_spec_from_json_file(const std::string& path);
void save_concept_spec(const ConceptSpec& spec, const std::string& path);

// Deterministic sprite rasterizer: hard edges, exact palette colors.
Tensor render_sprite(int shape_family, const Color& primary, const Color& secondary, int texture,
                     int bg_style, const Color& bg_a, const Color& bg_b, int cx, int cy, int size,
                     int canvas = 32);

// One random sprite of the given class (random identity/background); used as
// the regularization-image stand-in.
Tensor random_class_sprite(const std::string& macro_class, uint64_t seed);

// Random identity attributes for a new concept.
ConceptSpec random_concept_spec(const std::string& id, const std::string& macro_class,
                                uint64_t seed);

// n pretrain sprites with template captions under out_dir; >= 8 classes and
// >= 4 background styles, deterministic from seed.
DatasetManifest gen_pretrain_corpus(uint64_t seed, int n, const std::string& out_dir);

// reference_count images sharing the spec's identity, differing in background
// style/colors and position.
std::vector<Tensor> gen_concept(const ConceptSpec& spec, uint64_t seed);

// Renders the concept references to disk with a manifest and a spec copy.
DatasetManifest write_concept(const ConceptSpec& spec, uint64_t seed, const std::string& out_dir);

}  // namespace lagdiff::data
