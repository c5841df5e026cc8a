#include <cstdio>
#include <cstring>
#include <set>

#include "doctest.h"
#include "lagdiff/grad_check.hpp"
#include "lagdiff/ops.hpp"
#include "lagdiff/text.hpp"
#include "test_util.hpp"

using namespace lagdiff;

TEST_CASE("build_vocab sizes and determinism") {
  Vocabulary v = Vocabulary::build({"a", "photo", "of", "dog"}, 16, 42);
  CHECK(v.size() == 4 + 32);
  CHECK(v.word_count() == 4);
  CHECK(v.pad_id() == 36);
  CHECK(v.embedding_table().shape() == std::vector<int>{37, 16});
  CHECK(v.embedding_table().all_finite());

  Vocabulary v2 = Vocabulary::build({"a", "photo", "of", "dog"}, 16, 42);
  CHECK(std::memcmp(v.embedding_table().data(), v2.embedding_table().data(),
                    size_t(v.embedding_table().size()) * sizeof(double)) == 0);

  CHECK_THROWS_AS(Vocabulary::build({}, 16, 0), InputError);
  CHECK_THROWS_AS(Vocabulary::build({"dog", "dog"}, 16, 0), InputError);
}

TEST_CASE("register_concept_token hands out the reserved block in order") {
  Vocabulary v = test_util::tiny_vocab();
  int first = v.register_concept_token();
  CHECK(first == v.reserved_begin());
  int second = v.register_concept_token();
  CHECK(second == first + 1);
  for (int i = 2; i < 32; ++i) v.register_concept_token();
  CHECK_THROWS_AS(v.register_concept_token(), CapacityError);
}

TEST_CASE("render_template") {
  Vocabulary v = test_util::tiny_vocab();
  CHECK(v.render_template("dog") == "a photo of a V* dog");
  CHECK(v.render_template("car") == "a photo of a V* car");
  CHECK_THROWS_AS(v.render_template(""), VocabularyError);
  CHECK_THROWS_AS(v.render_template("zebra"), VocabularyError);
}

TEST_CASE("tokenize template and concept indices") {
  Vocabulary v = test_util::tiny_vocab();
  int vstar = v.register_concept_token();

  TokenSequence seq = v.tokenize("a photo of a V* dog", vstar, "dog");
  CHECK(seq.n_valid == 6);
  CHECK(int(seq.ids.size()) == kSeqLen);
  CHECK(seq.concept_indices == std::vector<int>{4, 5});
  for (int i = 6; i < kSeqLen; ++i) CHECK(seq.ids[size_t(i)] == v.pad_id());

  TokenSequence no_vstar = v.tokenize("a photo of a dog", -1, "");
  CHECK(no_vstar.concept_indices.empty());

  CHECK_THROWS_AS(v.tokenize("a photo of a V* zebra", vstar, ""), VocabularyError);
  CHECK_THROWS_AS(v.tokenize("a photo of a V* dog", -1, "dog"), VocabularyError);
}

TEST_CASE("tokenize of the template always yields two concept indices") {
  Vocabulary v = test_util::tiny_vocab();
  int vstar = v.register_concept_token();
  for (const std::string& macro : {"dog", "cat", "car"}) {
    TokenSequence seq = v.tokenize(v.render_template(macro), vstar, macro);
    CHECK(seq.concept_indices.size() == 2);
  }
}

TEST_CASE("embed adds positions and is injective on sampled id sequences") {
  Vocabulary v = test_util::tiny_vocab();
  const Tensor& table = v.embedding_table();

  TokenSequence a = v.tokenize("a photo", -1, "");
  Tensor ea = embed_tokens(table, a);
  // Row 0 = table row for "a" + position-0 sinusoid.
  Tensor pe = text_positional_encoding(kSeqLen, v.d_txt());
  for (int j = 0; j < v.d_txt(); ++j)
    CHECK(ea.data()[j] ==
          doctest::Approx(table.data()[int64_t(v.id_of("a")) * v.d_txt() + j] + pe.data()[j])
              .epsilon(1e-15));

  // Permuting two tokens changes only their positional additions.
  TokenSequence ab = v.tokenize("photo a", -1, "");
  Tensor eab = embed_tokens(table, ab);
  for (int j = 0; j < v.d_txt(); ++j) {
    double delta_a = ea.data()[j] - pe.data()[j];
    double delta_b = eab.data()[int64_t(1) * v.d_txt() + j] - pe.data()[int64_t(1) * v.d_txt() + j];
    CHECK(delta_a == doctest::Approx(delta_b).epsilon(1e-15));
  }

  // Injectivity probe: distinct id sequences hash to distinct embeddings.
  std::set<uint64_t> hashes;
  Rng rng(5);
  for (int trial = 0; trial < 64; ++trial) {
    TokenSequence s;
    s.ids.assign(size_t(kSeqLen), v.pad_id());
    for (int p = 0; p < 4; ++p) s.ids[size_t(p)] = int(rng.uniform_int(uint64_t(v.word_count())));
    s.n_valid = 4;
    hashes.insert(embed_tokens(table, s).content_hash());
  }
  CHECK(hashes.size() > 60);  // collisions would indicate a broken embed
}

TEST_CASE("embedding row gradient matches finite differences") {
  Vocabulary v = test_util::tiny_vocab();
  int vstar = v.register_concept_token();
  TokenSequence seq = v.tokenize("a photo of a V* dog", vstar, "dog");

  Rng rng(9);
  Tensor row = Tensor::randn({v.d_txt()}, rng);
  double err = grad_check(
      [&](const Tensor& r) {
        Tensor e = embed_tokens(v.embedding_table(), seq, vstar, &r);
        return ops::sum_all(ops::mul(e, e));
      },
      row, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("vocabulary save/load round trip is bitwise") {
  Vocabulary v = test_util::tiny_vocab(3);
  std::string jp = "/tmp/lagdiff_test_vocab.json", bp = "/tmp/lagdiff_test_vocab.emb";
  v.save(jp, bp);
  Vocabulary w = Vocabulary::load(jp, bp);
  CHECK(w.size() == v.size());
  CHECK(w.d_txt() == v.d_txt());
  CHECK(std::memcmp(w.embedding_table().data(), v.embedding_table().data(),
                    size_t(v.embedding_table().size()) * sizeof(double)) == 0);
  std::remove(jp.c_str());
  std::remove(bp.c_str());
}
