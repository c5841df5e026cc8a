#include "lagdiff/residuals.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "lagdiff/adam.hpp"
#include "lagdiff/data.hpp"
#include "lagdiff/ops.hpp"

namespace lagdiff {

TargetSelector target_selector_from_string(const std::string& s) {
  if (s == "proj_out") return TargetSelector::ProjOut;
  if (s == "kv") return TargetSelector::KV;
  if (s == "proj_in") return TargetSelector::ProjIn;
  if (s == "kv+proj_out") return TargetSelector::KVProjOut;
  if (s == "kv+proj_in+proj_out") return TargetSelector::KVProjInProjOut;
  throw ConfigError("unknown target selector '" + s + "'");
}

std::string to_string(TargetSelector s) {
  switch (s) {
    case TargetSelector::ProjOut: return "proj_out";
    case TargetSelector::KV: return "kv";
    case TargetSelector::ProjIn: return "proj_in";
    case TargetSelector::KVProjOut: return "kv+proj_out";
    case TargetSelector::KVProjInProjOut: return "kv+proj_in+proj_out";
  }
  return "?";
}

std::vector<ResidualTarget> targets_of(TargetSelector s) {
  switch (s) {
    case TargetSelector::ProjOut: return {ResidualTarget::ProjOut};
    case TargetSelector::KV: return {ResidualTarget::CrossK, ResidualTarget::CrossV};
    case TargetSelector::ProjIn: return {ResidualTarget::ProjIn};
    case TargetSelector::KVProjOut:
      return {ResidualTarget::CrossK, ResidualTarget::CrossV, ResidualTarget::ProjOut};
    case TargetSelector::KVProjInProjOut:
      return {ResidualTarget::CrossK, ResidualTarget::CrossV, ResidualTarget::ProjIn,
              ResidualTarget::ProjOut};
  }
  return {};
}

namespace {

int round_half_even(double x) {
  double f = std::floor(x);
  double d = x - f;
  if (d < 0.5) return int(f);
  if (d > 0.5) return int(f) + 1;
  int fi = int(f);
  return fi % 2 == 0 ? fi : fi + 1;
}

}  // namespace

int rank_for(int m) { return rank_for_frac(m, 0.05); }

int rank_for_frac(int m, double frac) {
  if (m < 1) throw InputError("rank_for: m must be >= 1");
  return std::max(1, round_half_even(frac * m));
}

int64_t ResidualSet::param_count() const {
  int64_t n = 0;
  for (const auto& blk : blocks)
    for (const auto& e : blk) n += e.a.size() + e.b.size();
  return n;
}

bool ResidualSet::proj_out_only() const {
  for (const auto& blk : blocks) {
    if (blk.size() != 1 || blk[0].target != ResidualTarget::ProjOut) return false;
  }
  return !blocks.empty();
}

void ResidualSet::zero() {
  for (auto& blk : blocks)
    for (auto& e : blk) {
      for (auto& v : e.a.vec()) v = 0.0;
      for (auto& v : e.b.vec()) v = 0.0;
    }
}

std::vector<Tensor> ResidualSet::factors() const {
  std::vector<Tensor> out;
  for (const auto& blk : blocks)
    for (const auto& e : blk) {
      out.push_back(e.a);
      out.push_back(e.b);
    }
  return out;
}

std::string PersonalizeConfig::hash() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "it=%d;bs=%d;lr=%.9g;tg=%s;macro=%d;reg=%d;tok=%d;rf=%d;rq=%.9g",
                iterations, batch, lr, lagdiff::to_string(targets).c_str(), int(use_macro_class),
                int(use_reg_images), int(update_token_embedding), rank_fixed, rank_frac);
  uint64_t h = fnv1a(buf, std::strlen(buf));
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return std::string(hex);
}

ResidualSet init_residuals(const UNetWeights& w, const PersonalizeConfig& cfg, uint64_t seed) {
  ResidualSet rs;
  rs.config_hash = cfg.hash();
  Rng root(seed, /*stream=*/0x10AA);
  auto targets = targets_of(cfg.targets);
  for (int i = 0; i < w.cfg.num_blocks(); ++i) {
    std::vector<ResidualEntry> entries;
    for (ResidualTarget tgt : targets) {
      ResidualEntry e;
      e.target = tgt;
      int m = w.cfg.widths[size_t(i)];
      if (tgt == ResidualTarget::ProjOut || tgt == ResidualTarget::ProjIn) {
        e.rows = m;
        e.cols = m;
      } else {
        e.rows = w.cfg.d_txt;
        e.cols = w.cfg.d_inner();
      }
      int out_dim = e.cols;  // rank rule follows the map's output dimension
      if (cfg.rank_fixed > 0)
        e.rank = cfg.rank_fixed;
      else if (cfg.rank_frac > 0)
        e.rank = rank_for_frac(out_dim, cfg.rank_frac);
      else
        e.rank = rank_for(out_dim);
      if (e.rank > std::min(e.rows, e.cols))
        throw ConfigError("rank override " + std::to_string(e.rank) + " exceeds dimension " +
                          std::to_string(std::min(e.rows, e.cols)) + " at block " +
                          std::to_string(i));
      Rng rng = root.fork(uint64_t(i) * 8 + uint64_t(tgt));
      e.a = Tensor::randn({e.rows, e.rank}, rng, 0.02);
      e.b = Tensor::randn({e.rank, e.cols}, rng, 0.02);
      entries.push_back(std::move(e));
    }
    rs.blocks.push_back(std::move(entries));
  }
  return rs;
}

Tensor apply_residual(const Tensor& w, const Tensor& a, const Tensor& b) {
  if (w.rank() != 3 || w.dim(2) != 1 || a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) ||
      a.dim(0) != w.dim(0) || b.dim(1) != w.dim(1))
    throw DimensionError("apply_residual: W " + shape_str(w.shape()) + ", A " +
                         shape_str(a.shape()) + ", B " + shape_str(b.shape()));
  return ops::add(w, ops::reshape(ops::matmul(a, b), w.shape()));
}

namespace {

Tensor flip_w(const Tensor& img) {
  int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out = Tensor::zeros(img.shape());
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.data()[(int64_t(ch) * h + y) * w + x] = img.data()[(int64_t(ch) * h + y) * w + (w - 1 - x)];
  return out;
}

}  // namespace

PersonalizeResult personalize(const UNetWeights& base, Vocabulary& vocab,
                              const std::vector<Tensor>& refs, const std::string& macro_class,
                              const NoiseSchedule& s, const PersonalizeConfig& cfg, uint64_t seed) {
  if (refs.empty() || refs.size() > 10)
    throw InputError("personalize: need 1-10 reference images, got " + std::to_string(refs.size()));

  std::string prompt;
  std::string macro_for_indices;
  if (cfg.use_macro_class) {
    prompt = vocab.render_template(macro_class);  // validates the macro words
    macro_for_indices = macro_class;
  } else {
    prompt = "a photo of a V*";
  }
  int vstar = vocab.register_concept_token();
  TokenSequence toks = vocab.tokenize(prompt, vstar, macro_for_indices);

  PersonalizeResult result;
  result.base_hash_before = base.weights_hash();

  ResidualSet rs = init_residuals(base, cfg, seed);
  rs.vstar_id = vstar;
  rs.macro_class = macro_class;

  std::vector<Tensor> params = rs.factors();
  for (auto& p : params) p.set_requires_grad(true);
  Tensor vrow;
  if (cfg.update_token_embedding) {
    vrow = ops::gather_rows(vocab.embedding_table(), {vstar});
    vrow = ops::reshape(vrow, {vocab.d_txt()});
    vrow = vrow.clone();
    vrow.set_requires_grad(true);
    params.push_back(vrow);
  }
  const Tensor* vrow_ptr = cfg.update_token_embedding ? &vrow : nullptr;

  // Fixed (t, eps) pairs so the before/after reference-set losses are
  // directly comparable.
  auto eval_loss = [&](const ResidualSet& set) {
    Rng erng(seed, /*stream=*/0xE7A1);
    double total = 0.0;
    int count = 0;
    for (const auto& ref : refs) {
      for (int k = 0; k < 8; ++k) {
        int t = int(erng.uniform_int(uint64_t(s.T)));
        Tensor eps = Tensor::randn(ref.shape(), erng);
        Tensor z_t = q_sample(ref, t, eps, s);
        Conditioning cond = make_conditioning(vocab.embedding_table(), toks, vstar, vrow_ptr);
        ForwardOptions fo;
        fo.residuals = &set;
        ForwardResult fr = unet_forward(z_t, t, cond, base, fo);
        total += ops::mse(eps, fr.eps).item();
        ++count;
      }
    }
    return total / count;
  };
  result.eval_loss_initial = eval_loss(rs);

  TokenSequence reg_toks;
  if (cfg.use_reg_images) {
    std::string reg_prompt = cfg.use_macro_class ? "a photo of a " + macro_class : "a photo of a";
    reg_toks = vocab.tokenize(reg_prompt, -1, "");
  }

  Adam opt(params, {.lr = cfg.lr});
  Rng root(seed, /*stream=*/0x7E45);
  Rng reg_root(seed, /*stream=*/0x4E60);
  for (int it = 0; it < cfg.iterations; ++it) {
    Rng rng = root.fork(uint64_t(it));
    std::vector<TrainItem> batch;
    for (int slot = 0; slot < cfg.batch; ++slot) {
      // 1 regularization slot per batch of 4 (1:3 reg:reference ratio)
      if (cfg.use_reg_images && slot == cfg.batch - 1) {
        TrainItem item;
        item.z0 = data::random_class_sprite(macro_class, reg_root.fork(uint64_t(it)).next_u64());
        item.tokens = reg_toks;
        batch.push_back(std::move(item));
        ++result.reg_slots_used;
        continue;
      }
      size_t idx = size_t(rng.uniform_int(refs.size()));
      bool flip = rng.uniform() < 0.5;
      TrainItem item;
      item.z0 = flip ? flip_w(refs[idx]) : refs[idx];
      item.tokens = toks;
      batch.push_back(std::move(item));
    }

    LossOptions lo;
    lo.residuals = &rs;
    lo.vstar_id = vstar;
    lo.vstar_row = vrow_ptr;
    opt.zero_grad();
    Tensor loss = ldm_loss(batch, base, vocab.embedding_table(), s, rng, lo);
    backward(loss);
    opt.step();
    result.loss_trace.push_back(loss.item());
  }

  result.eval_loss_final = eval_loss(rs);
  if (cfg.update_token_embedding) rs.vstar_embedding = vrow.clone();

  for (auto& p : params) p.set_requires_grad(false);
  result.base_hash_after = base.weights_hash();
  result.residuals = std::move(rs);
  return result;
}

// ---------------------------------------------------------------------------
// Serialization. Version 1 is the proj_out-only layout: per block
// (m u32, r u32, A, B). Version 2 covers ablation target sets and a learned
// V* row: per block (n u32, then per entry target/rows/cols/rank/A/B).
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xFF), (unsigned char)((v >> 8) & 0xFF),
                        (unsigned char)((v >> 16) & 0xFF), (unsigned char)((v >> 24) & 0xFF)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4) throw FormatError("residual file truncated");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

void put_f64(std::ofstream& f, const Tensor& t) {
  f.write(reinterpret_cast<const char*>(t.data()), std::streamsize(size_t(t.size()) * sizeof(double)));
}

void get_f64(std::ifstream& f, Tensor& t) {
  f.read(reinterpret_cast<char*>(t.data()), std::streamsize(size_t(t.size()) * sizeof(double)));
  if (f.gcount() != std::streamsize(size_t(t.size()) * sizeof(double)))
    throw FormatError("residual file truncated");
}

}  // namespace

void save_residuals(const ResidualSet& rs, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot write " + path);
  f.write("PRES", 4);
  bool v1 = rs.proj_out_only() && !rs.vstar_embedding.defined();
  put_u32(f, v1 ? 1u : 2u);

  nlohmann::json meta;
  meta["vstar_id"] = rs.vstar_id;
  meta["macro_class"] = rs.macro_class;
  meta["config_hash"] = rs.config_hash;
  meta["param_count"] = rs.param_count();
  if (rs.vstar_embedding.defined()) meta["vstar_embedding"] = rs.vstar_embedding.vec();
  std::string mstr = meta.dump();
  put_u32(f, uint32_t(mstr.size()));
  f.write(mstr.data(), std::streamsize(mstr.size()));

  put_u32(f, uint32_t(rs.blocks.size()));
  for (const auto& blk : rs.blocks) {
    if (v1) {
      const ResidualEntry& e = blk[0];
      put_u32(f, uint32_t(e.rows));
      put_u32(f, uint32_t(e.rank));
      put_f64(f, e.a);
      put_f64(f, e.b);
    } else {
      put_u32(f, uint32_t(blk.size()));
      for (const auto& e : blk) {
        put_u32(f, uint32_t(e.target));
        put_u32(f, uint32_t(e.rows));
        put_u32(f, uint32_t(e.cols));
        put_u32(f, uint32_t(e.rank));
        put_f64(f, e.a);
        put_f64(f, e.b);
      }
    }
  }
  if (!f) throw FileError("write failed: " + path);
}

ResidualSet load_residuals(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot read " + path);
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, "PRES", 4) != 0)
    throw FormatError("bad residual file magic in " + path);
  uint32_t version = get_u32(f);
  if (version != 1 && version != 2)
    throw FormatError("unsupported residual file version " + std::to_string(version));

  uint32_t mlen = get_u32(f);
  std::string mstr(mlen, '\0');
  f.read(mstr.data(), std::streamsize(mlen));
  if (f.gcount() != std::streamsize(mlen)) throw FormatError("residual file truncated");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(mstr);
  } catch (const std::exception& e) {
    throw FormatError("bad residual metadata: " + std::string(e.what()));
  }

  ResidualSet rs;
  rs.vstar_id = meta.at("vstar_id").get<int>();
  rs.macro_class = meta.at("macro_class").get<std::string>();
  rs.config_hash = meta.at("config_hash").get<std::string>();
  if (meta.contains("vstar_embedding")) {
    auto v = meta["vstar_embedding"].get<std::vector<double>>();
    rs.vstar_embedding = Tensor::from_data({int(v.size())}, std::move(v));
  }

  uint32_t L = get_u32(f);
  for (uint32_t i = 0; i < L; ++i) {
    std::vector<ResidualEntry> blk;
    if (version == 1) {
      ResidualEntry e;
      e.target = ResidualTarget::ProjOut;
      e.rows = int(get_u32(f));
      e.cols = e.rows;
      e.rank = int(get_u32(f));
      e.a = Tensor::zeros({e.rows, e.rank});
      e.b = Tensor::zeros({e.rank, e.cols});
      get_f64(f, e.a);
      get_f64(f, e.b);
      blk.push_back(std::move(e));
    } else {
      uint32_t n = get_u32(f);
      for (uint32_t j = 0; j < n; ++j) {
        ResidualEntry e;
        e.target = ResidualTarget(get_u32(f));
        e.rows = int(get_u32(f));
        e.cols = int(get_u32(f));
        e.rank = int(get_u32(f));
        e.a = Tensor::zeros({e.rows, e.rank});
        e.b = Tensor::zeros({e.rank, e.cols});
        get_f64(f, e.a);
        get_f64(f, e.b);
        blk.push_back(std::move(e));
      }
    }
    rs.blocks.push_back(std::move(blk));
  }

  int64_t declared = meta.at("param_count").get<int64_t>();
  if (declared != rs.param_count())
    throw FormatError("residual file parameter count mismatch: header says " +
                      std::to_string(declared) + ", payload has " +
                      std::to_string(rs.param_count()));
  return rs;
}

ParamReport param_report(const ResidualSet& rs, const UNetWeights& base) {
  ParamReport r;
  r.residual_params = rs.param_count();
  r.base_params = base.param_count();
  r.ratio = double(r.residual_params) / double(r.base_params);
  return r;
}

}  // namespace lagdiff
