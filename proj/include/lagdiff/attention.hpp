#pragma once

#include <cstdint>
#include <vector>

namespace lagdiff {

// Cross-attention maps captured per transformer block: heads x (h*w) x seq,
// plain value snapshots (no graph linkage).
struct AttentionStack {
  struct BlockMaps {
    int heads = 0, h = 0, w = 0, seq = 0;
    std::vector<double> maps;
    double at(int head, int pos, int tok) const {
      return maps[(size_t(head) * size_t(h) * size_t(w) + size_t(pos)) * size_t(seq) + size_t(tok)];
    }
  };
  std::vector<BlockMaps> blocks;
};

// Binary spatial mask at a block's native resolution.
struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> m;  // entries in {0,1}
  bool degenerate = false;

  int64_t ones() const {
    int64_t c = 0;
    for (uint8_t v : m) c += v;
    return c;
  }
  bool all_ones() const { return ones() == int64_t(m.size()); }
};

}  // namespace lagdiff
