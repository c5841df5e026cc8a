#include "lagdiff/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "json.hpp"

namespace lagdiff {

namespace fs = std::filesystem;

namespace {

void put_u32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xFF), (unsigned char)((v >> 8) & 0xFF),
                        (unsigned char)((v >> 16) & 0xFF), (unsigned char)((v >> 24) & 0xFF)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4) throw FormatError("checkpoint truncated");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

}  // namespace

void save_tdmw(const std::string& path,
               const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot write " + path);
  f.write("TDMW", 4);
  put_u32(f, 1);
  put_u32(f, uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(f, uint32_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    put_u32(f, uint32_t(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32(f, uint32_t(t.dim(i)));
    f.write(reinterpret_cast<const char*>(t.data()),
            std::streamsize(size_t(t.size()) * sizeof(double)));
  }
  if (!f) throw FileError("write failed: " + path);
}

std::vector<std::pair<std::string, Tensor>> load_tdmw(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot read " + path);
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, "TDMW", 4) != 0)
    throw FormatError("bad checkpoint magic in " + path);
  uint32_t version = get_u32(f);
  if (version != 1) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  uint32_t count = get_u32(f);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = get_u32(f);
    std::string name(name_len, '\0');
    f.read(name.data(), std::streamsize(name_len));
    if (f.gcount() != std::streamsize(name_len)) throw FormatError("checkpoint truncated");
    uint32_t rank = get_u32(f);
    std::vector<int> shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = int(get_u32(f));
    Tensor t = Tensor::zeros(shape);
    f.read(reinterpret_cast<char*>(t.data()), std::streamsize(size_t(t.size()) * sizeof(double)));
    if (f.gcount() != std::streamsize(size_t(t.size()) * sizeof(double)))
      throw FormatError("checkpoint truncated in tensor '" + name + "'");
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

void save_checkpoint(const std::string& dir, const UNetWeights& w, const Vocabulary& vocab,
                     const NoiseSchedule& s) {
  fs::create_directories(dir);
  save_tdmw((fs::path(dir) / "weights.tdmw").string(), w.named_parameters());
  vocab.save((fs::path(dir) / "vocab.json").string(), (fs::path(dir) / "vocab.emb").string());

  nlohmann::json j;
  j["version"] = 1;
  j["arch"] = {{"image_size", w.cfg.image_size}, {"in_channels", w.cfg.in_channels},
               {"widths", w.cfg.widths},         {"heads", w.cfg.heads},
               {"d_k", w.cfg.d_k},               {"d_txt", w.cfg.d_txt},
               {"t_dim", w.cfg.t_dim},           {"ff_mult", w.cfg.ff_mult}};
  j["schedule"] = {{"T", s.T},
                   {"beta_start", s.beta.front()},
                   {"beta_end", s.beta.back()}};
  j["weights"] = "weights.tdmw";
  j["vocab"] = {{"words", "vocab.json"}, {"embeddings", "vocab.emb"}};
  std::ofstream f((fs::path(dir) / "manifest.json").string());
  if (!f) throw FileError("cannot write manifest in " + dir);
  f << j.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
  std::ifstream mf((fs::path(dir) / "manifest.json").string());
  if (!mf) throw FileError("cannot read manifest in " + dir);
  nlohmann::json j;
  try {
    mf >> j;
  } catch (const std::exception& e) {
    throw FormatError("bad model manifest: " + std::string(e.what()));
  }

  Checkpoint ck;
  UNetConfig cfg;
  const auto& arch = j.at("arch");
  cfg.image_size = arch.at("image_size").get<int>();
  cfg.in_channels = arch.at("in_channels").get<int>();
  cfg.widths = arch.at("widths").get<std::vector<int>>();
  cfg.heads = arch.at("heads").get<int>();
  cfg.d_k = arch.at("d_k").get<int>();
  cfg.d_txt = arch.at("d_txt").get<int>();
  cfg.t_dim = arch.at("t_dim").get<int>();
  cfg.ff_mult = arch.at("ff_mult").get<int>();

  const auto& sj = j.at("schedule");
  ck.schedule = NoiseSchedule::linear(sj.at("T").get<int>(), sj.at("beta_start").get<double>(),
                                      sj.at("beta_end").get<double>());

  ck.vocab = Vocabulary::load((fs::path(dir) / j.at("vocab").at("words").get<std::string>()).string(),
                              (fs::path(dir) / j.at("vocab").at("embeddings").get<std::string>()).string());

  // Rebuild the weight structs, then overwrite every tensor from the file.
  ck.weights = UNetWeights::init(cfg, 0);
  auto tensors = load_tdmw((fs::path(dir) / j.at("weights").get<std::string>()).string());
  std::map<std::string, Tensor> by_name(tensors.begin(), tensors.end());
  auto named = ck.weights.named_parameters();
  for (auto& [name, t] : named) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint missing tensor '" + name + "'");
    if (it->second.shape() != t.shape())
      throw FormatError("checkpoint tensor '" + name + "' has shape " +
                        shape_str(it->second.shape()) + ", expected " + shape_str(t.shape()));
    std::memcpy(t.data(), it->second.data(), size_t(t.size()) * sizeof(double));
  }
  return ck;
}

}  // namespace lagdiff
