#pragma once

#include <string>

#include "lagdiff/schedule.hpp"
#include "lagdiff/text.hpp"
#include "lagdiff/unet.hpp"

namespace lagdiff {

// A model directory holds manifest.json (architecture + schedule + file
// references), weights.tdmw (binary tensor records), vocab.json and
// vocab.emb (word list + embedding blob).
struct Checkpoint {
  UNetWeights weights;
  Vocabulary vocab;
  NoiseSchedule schedule;
};

void save_checkpoint(const std::string& dir, const UNetWeights& w, const Vocabulary& vocab,
                     const NoiseSchedule& s);
Checkpoint load_checkpoint(const std::string& dir);

// Raw tensor container: magic "TDMW", version u32, count u32, then per tensor
// (name_len u32, name, rank u32, dims u32..., little-endian f64 payload).
void save_tdmw(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_tdmw(const std::string& path);

}  // namespace lagdiff
