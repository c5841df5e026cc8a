#pragma once

#include <string>
#include <vector>

#include "lagdiff/tensor.hpp"

namespace lagdiff {

// Fixed prompt length; shorter prompts are padded, longer ones truncated.
inline constexpr int kSeqLen = 16;
inline constexpr int kReservedTokens = 32;

struct TokenSequence {
  std::vector<int> ids;              // length kSeqLen, padded with pad id
  int n_valid = 0;                   // prefix that participates in attention
  std::vector<int> concept_indices;  // positions of V* and macro-class words
};

// Closed whitespace vocabulary with a reserved rare-token block for concept
// identifiers and one extra pad row at the end of the embedding table.
class Vocabulary {
 public:
  static Vocabulary build(const std::vector<std::string>& words, int d_txt, uint64_t seed);

  int size() const { return int(words_.size()) + kReservedTokens; }  // V
  int word_count() const { return int(words_.size()); }
  int d_txt() const { return d_txt_; }
  int reserved_begin() const { return word_count(); }
  int pad_id() const { return size(); }  // extra table row, not a vocab id

  bool contains(const std::string& word) const;
  int id_of(const std::string& word) const;  // VocabularyError when unknown
  const std::string& word_of(int id) const;

  // Hands out reserved ids in order; the row's random init is the stand-in
  // for a rarely occurring token embedding.
  int register_concept_token();
  int registered_count() const { return registered_; }
  int first_reserved_id() const { return reserved_begin(); }

  Tensor& embedding_table() { return table_; }               // [V+1, d_txt]
  const Tensor& embedding_table() const { return table_; }

  std::string render_template(const std::string& macro_class) const;

  // V* in the prompt resolves to vstar_id; macro_class words (whitespace
  // split) contribute their positions to the concept index set.
  TokenSequence tokenize(const std::string& prompt, int vstar_id = -1,
                         const std::string& macro_class = "") const;
  TokenSequence null_sequence() const;  // the null-prompt conditioning

  void save(const std::string& json_path, const std::string& blob_path) const;
  static Vocabulary load(const std::string& json_path, const std::string& blob_path);

 private:
  std::vector<std::string> words_;
  int d_txt_ = 0;
  int registered_ = 0;
  Tensor table_;
};

// Embedding rows plus fixed sinusoidal positions. When vstar_row is given,
// rows at V* positions come from it instead of the table (the
// update-token-embedding ablation trains that row).
Tensor embed_tokens(const Tensor& table, const TokenSequence& toks, int vstar_id = -1,
                    const Tensor* vstar_row = nullptr);

Tensor text_positional_encoding(int seq_len, int d);

}  // namespace lagdiff
