#include "lagdiff/text.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "lagdiff/ops.hpp"

namespace lagdiff {

namespace {

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream iss(s);
  std::vector<std::string> out;
  std::string w;
  while (iss >> w) out.push_back(w);
  return out;
}

}  // namespace

Vocabulary Vocabulary::build(const std::vector<std::string>& words, int d_txt, uint64_t seed) {
  if (words.empty()) throw InputError("build_vocab: empty word list");
  std::set<std::string> seen;
  for (const auto& w : words) {
    if (w.empty()) throw InputError("build_vocab: empty word");
    if (!seen.insert(w).second) throw InputError("build_vocab: duplicate word '" + w + "'");
  }
  Vocabulary v;
  v.words_ = words;
  v.d_txt_ = d_txt;
  Rng rng(seed, /*stream=*/0x7600CAB);
  v.table_ = Tensor::randn({v.size() + 1, d_txt}, rng, 0.02);
  return v;
}

bool Vocabulary::contains(const std::string& word) const {
  for (const auto& w : words_)
    if (w == word) return true;
  return false;
}

int Vocabulary::id_of(const std::string& word) const {
  for (size_t i = 0; i < words_.size(); ++i)
    if (words_[i] == word) return int(i);
  throw VocabularyError("unknown word '" + word + "'");
}

const std::string& Vocabulary::word_of(int id) const {
  if (id < 0 || id >= word_count()) throw VocabularyError("id out of word range: " + std::to_string(id));
  return words_[size_t(id)];
}

int Vocabulary::register_concept_token() {
  if (registered_ >= kReservedTokens)
    throw CapacityError("reserved token block exhausted (" + std::to_string(kReservedTokens) + " slots)");
  return reserved_begin() + registered_++;
}

std::string Vocabulary::render_template(const std::string& macro_class) const {
  if (macro_class.empty()) throw VocabularyError("empty macro class");
  for (const auto& w : split_ws(macro_class)) {
    if (!contains(w)) throw VocabularyError("macro class word '" + w + "' not in vocabulary");
  }
  return "a photo of a V* " + macro_class;
}

TokenSequence Vocabulary::tokenize(const std::string& prompt, int vstar_id,
                                   const std::string& macro_class) const {
  std::vector<std::string> toks = split_ws(prompt);
  std::set<std::string> macro_words;
  for (const auto& w : split_ws(macro_class)) macro_words.insert(w);

  TokenSequence seq;
  seq.ids.assign(size_t(kSeqLen), pad_id());
  int pos = 0;
  for (const auto& w : toks) {
    if (pos >= kSeqLen) break;  // truncate
    int id;
    if (w == "V*") {
      if (vstar_id < reserved_begin() || vstar_id >= size())
        throw VocabularyError("prompt uses V* but no concept token is registered");
      id = vstar_id;
      seq.concept_indices.push_back(pos);
    } else {
      id = id_of(w);
      if (macro_words.count(w)) seq.concept_indices.push_back(pos);
    }
    seq.ids[size_t(pos)] = id;
    ++pos;
  }
  seq.n_valid = pos;
  if (seq.n_valid == 0) throw InputError("tokenize: empty prompt");
  return seq;
}

TokenSequence Vocabulary::null_sequence() const {
  // All-pad sequence attended in full: the pad row doubles as the learned
  // null-prompt embedding for classifier-free guidance.
  TokenSequence seq;
  seq.ids.assign(size_t(kSeqLen), pad_id());
  seq.n_valid = kSeqLen;
  return seq;
}

void Vocabulary::save(const std::string& json_path, const std::string& blob_path) const {
  nlohmann::json j;
  j["version"] = 1;
  j["d_txt"] = d_txt_;
  j["reserved"] = kReservedTokens;
  j["words"] = words_;
  std::ofstream jf(json_path);
  if (!jf) throw FileError("cannot write " + json_path);
  jf << j.dump(2) << "\n";

  std::ofstream bf(blob_path, std::ios::binary);
  if (!bf) throw FileError("cannot write " + blob_path);
  bf.write(reinterpret_cast<const char*>(table_.data()),
           std::streamsize(size_t(table_.size()) * sizeof(double)));
}

Vocabulary Vocabulary::load(const std::string& json_path, const std::string& blob_path) {
  std::ifstream jf(json_path);
  if (!jf) throw FileError("cannot read " + json_path);
  nlohmann::json j;
  try {
    jf >> j;
  } catch (const std::exception& e) {
    throw FormatError("bad vocabulary json: " + std::string(e.what()));
  }
  Vocabulary v;
  v.words_ = j.at("words").get<std::vector<std::string>>();
  v.d_txt_ = j.at("d_txt").get<int>();
  if (j.at("reserved").get<int>() != kReservedTokens)
    throw FormatError("vocabulary reserved-block size mismatch");

  int rows = v.size() + 1;
  v.table_ = Tensor::zeros({rows, v.d_txt_});
  std::ifstream bf(blob_path, std::ios::binary);
  if (!bf) throw FileError("cannot read " + blob_path);
  bf.read(reinterpret_cast<char*>(v.table_.data()),
          std::streamsize(size_t(v.table_.size()) * sizeof(double)));
  if (bf.gcount() != std::streamsize(size_t(v.table_.size()) * sizeof(double)))
    throw FormatError("embedding blob truncated: " + blob_path);
  return v;
}

Tensor text_positional_encoding(int seq_len, int d) {
  Tensor pe = Tensor::zeros({seq_len, d});
  int half = d / 2;
  for (int p = 0; p < seq_len; ++p) {
    for (int i = 0; i < half; ++i) {
      double freq = std::pow(10000.0, -double(i) / double(half));
      pe.data()[int64_t(p) * d + i] = std::sin(p * freq);
      pe.data()[int64_t(p) * d + half + i] = std::cos(p * freq);
    }
  }
  return pe;
}

Tensor embed_tokens(const Tensor& table, const TokenSequence& toks, int vstar_id,
                    const Tensor* vstar_row) {
  Tensor rows = ops::gather_rows(table, toks.ids);
  if (vstar_row) {
    std::vector<int> positions;
    for (int p = 0; p < int(toks.ids.size()); ++p)
      if (toks.ids[size_t(p)] == vstar_id) positions.push_back(p);
    if (!positions.empty()) rows = ops::replace_rows(rows, positions, *vstar_row);
  }
  return ops::add(rows, text_positional_encoding(int(toks.ids.size()), table.dim(1)));
}

}  // namespace lagdiff
