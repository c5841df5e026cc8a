#include "lagdiff/unet.hpp"

#include <cmath>

#include "lagdiff/adam.hpp"
#include "lagdiff/ops.hpp"
#include "lagdiff/residuals.hpp"

namespace lagdiff {

namespace op = ops;

namespace {

Tensor linear_init(int in, int out, Rng& rng) {
  return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(double(in)));
}

Tensor conv_init(int co, int ci, Rng& rng) {
  return Tensor::randn({co, ci, 1}, rng, 1.0 / std::sqrt(double(ci)));
}

Tensor sinusoidal_t(int t, int dim) {
  Tensor e = Tensor::zeros({1, dim});
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::pow(10000.0, -double(i) / double(half));
    e.data()[i] = std::sin(t * freq);
    e.data()[half + i] = std::cos(t * freq);
  }
  return e;
}

// Fixed 2D positions: sin/cos of row and column indices over channel quarters.
Tensor posenc_2d(int h, int w, int m) {
  Tensor pe = Tensor::zeros({h * w, m});
  int quarter = m / 4;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double* row = pe.data() + int64_t(y * w + x) * m;
      for (int i = 0; i < quarter; ++i) {
        double freq = std::pow(10000.0, -double(i) / double(quarter));
        row[i] = std::sin(y * freq);
        row[quarter + i] = std::cos(y * freq);
        row[2 * quarter + i] = std::sin(x * freq);
        row[3 * quarter + i] = std::cos(x * freq);
      }
    }
  return pe;
}

}  // namespace

UNetWeights UNetWeights::init(const UNetConfig& cfg, uint64_t seed) {
  if (cfg.num_blocks() != 4 || cfg.widths[0] != cfg.widths[3] || cfg.widths[1] != cfg.widths[2])
    throw ConfigError("unet: widths must be [a,b,b,a], got " + shape_str(cfg.widths));
  if (cfg.image_size % 4 != 0) throw ConfigError("unet: image_size must be divisible by 4");

  UNetWeights w;
  w.cfg = cfg;
  Rng rng(seed, /*stream=*/0x0E7);
  int a = cfg.widths[0], b = cfg.widths[1];

  w.stem_w = conv_init(a, cfg.in_channels, rng);
  w.stem_b = Tensor::zeros({a});
  w.down1_w = conv_init(a, a, rng);
  w.down1_b = Tensor::zeros({a});
  w.down2_w = conv_init(b, a, rng);
  w.down2_b = Tensor::zeros({b});
  w.up1_w = conv_init(a, b, rng);
  w.up1_b = Tensor::zeros({a});
  w.head_w = Tensor::zeros({cfg.in_channels, a, 1});  // zero-init head: eps starts at 0
  w.head_b = Tensor::zeros({cfg.in_channels});

  for (int i = 0; i < cfg.num_blocks(); ++i) {
    int m = cfg.widths[size_t(i)];
    int d = cfg.d_inner();
    TransformerBlockWeights bw;
    bw.time_w = linear_init(cfg.t_dim, m, rng);
    bw.time_b = Tensor::zeros({m});
    bw.proj_in_w = conv_init(m, m, rng);
    bw.proj_in_b = Tensor::zeros({m});
    bw.ln1_g = Tensor::full({m}, 1.0);
    bw.ln1_b = Tensor::zeros({m});
    bw.self_q = linear_init(m, d, rng);
    bw.self_k = linear_init(m, d, rng);
    bw.self_v = linear_init(m, d, rng);
    bw.self_o = linear_init(d, m, rng);
    bw.self_ob = Tensor::zeros({m});
    bw.ln2_g = Tensor::full({m}, 1.0);
    bw.ln2_b = Tensor::zeros({m});
    bw.cross_q = linear_init(m, d, rng);
    bw.cross_k = linear_init(cfg.d_txt, d, rng);
    bw.cross_v = linear_init(cfg.d_txt, d, rng);
    bw.cross_o = linear_init(d, m, rng);
    bw.cross_ob = Tensor::zeros({m});
    bw.ln3_g = Tensor::full({m}, 1.0);
    bw.ln3_b = Tensor::zeros({m});
    bw.ff1_w = linear_init(m, cfg.ff_mult * m, rng);
    bw.ff1_b = Tensor::zeros({cfg.ff_mult * m});
    bw.ff2_w = linear_init(cfg.ff_mult * m, m, rng);
    bw.ff2_b = Tensor::zeros({m});
    bw.proj_out_w = conv_init(m, m, rng);
    bw.proj_out_b = Tensor::zeros({m});
    w.blocks.push_back(std::move(bw));
  }
  return w;
}

std::vector<std::pair<std::string, Tensor>> UNetWeights::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("stem.w", stem_w);
  out.emplace_back("stem.b", stem_b);
  out.emplace_back("down1.w", down1_w);
  out.emplace_back("down1.b", down1_b);
  out.emplace_back("down2.w", down2_w);
  out.emplace_back("down2.b", down2_b);
  out.emplace_back("up1.w", up1_w);
  out.emplace_back("up1.b", up1_b);
  out.emplace_back("head.w", head_w);
  out.emplace_back("head.b", head_b);
  for (size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    std::string p = "blocks." + std::to_string(i) + ".";
    out.emplace_back(p + "time.w", b.time_w);
    out.emplace_back(p + "time.b", b.time_b);
    out.emplace_back(p + "proj_in.w", b.proj_in_w);
    out.emplace_back(p + "proj_in.b", b.proj_in_b);
    out.emplace_back(p + "ln1.g", b.ln1_g);
    out.emplace_back(p + "ln1.b", b.ln1_b);
    out.emplace_back(p + "self.q", b.self_q);
    out.emplace_back(p + "self.k", b.self_k);
    out.emplace_back(p + "self.v", b.self_v);
    out.emplace_back(p + "self.o", b.self_o);
    out.emplace_back(p + "self.ob", b.self_ob);
    out.emplace_back(p + "ln2.g", b.ln2_g);
    out.emplace_back(p + "ln2.b", b.ln2_b);
    out.emplace_back(p + "cross.q", b.cross_q);
    out.emplace_back(p + "cross.k", b.cross_k);
    out.emplace_back(p + "cross.v", b.cross_v);
    out.emplace_back(p + "cross.o", b.cross_o);
    out.emplace_back(p + "cross.ob", b.cross_ob);
    out.emplace_back(p + "ln3.g", b.ln3_g);
    out.emplace_back(p + "ln3.b", b.ln3_b);
    out.emplace_back(p + "ff1.w", b.ff1_w);
    out.emplace_back(p + "ff1.b", b.ff1_b);
    out.emplace_back(p + "ff2.w", b.ff2_w);
    out.emplace_back(p + "ff2.b", b.ff2_b);
    out.emplace_back(p + "proj_out.w", b.proj_out_w);
    out.emplace_back(p + "proj_out.b", b.proj_out_b);
  }
  return out;
}

std::vector<Tensor> UNetWeights::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

int64_t UNetWeights::param_count() const {
  int64_t n = 0;
  for (const auto& t : parameters()) n += t.size();
  return n;
}

void UNetWeights::set_requires_grad(bool v) {
  for (auto& t : parameters()) const_cast<Tensor&>(t).set_requires_grad(v);
}

uint64_t UNetWeights::weights_hash() const {
  uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& [name, t] : named_parameters()) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(t.data(), size_t(t.size()) * sizeof(double), h);
  }
  return h;
}

namespace {

// Finds the (A,B) pair for a block/target in the residual set, if any.
const ResidualEntry* find_entry(const ResidualSet* rs, int block, ResidualTarget target) {
  if (!rs) return nullptr;
  for (const auto& e : rs->blocks[size_t(block)])
    if (e.target == target) return &e;
  return nullptr;
}

Tensor maybe_add_lora_conv(const Tensor& w, const ResidualEntry* e) {
  if (!e) return w;
  Tensor delta = op::reshape(op::matmul(e->a, e->b), w.shape());
  return op::add(w, delta);
}

Tensor maybe_add_lora_mat(const Tensor& w, const ResidualEntry* e) {
  if (!e) return w;
  return op::add(w, op::matmul(e->a, e->b));
}

struct BlockContext {
  const UNetConfig* cfg;
  const Conditioning* cond;
  const ResidualSet* residuals;
  const LagConfig* lag;
  AttentionStack* attn;
  std::vector<Mask>* lag_masks;
  Tensor t_emb;  // [1, t_dim]
};

Tensor multihead(const Tensor& q, const Tensor& k, const Tensor& v, int heads, int d_k,
                 int n_valid, AttentionStack::BlockMaps* capture) {
  Tensor out;
  double sc = 1.0 / std::sqrt(double(d_k));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = op::slice_cols(q, h * d_k, d_k);
    Tensor kh = op::slice_cols(k, h * d_k, d_k);
    Tensor vh = op::slice_cols(v, h * d_k, d_k);
    Tensor scores = op::scale(op::matmul_nt(qh, kh), sc);
    Tensor maps = n_valid > 0 ? op::softmax_rows_masked(scores, n_valid) : op::softmax_rows(scores);
    if (capture) {
      const double* src = maps.data();
      capture->maps.insert(capture->maps.end(), src, src + maps.size());
    }
    Tensor oh = op::matmul(maps, vh);
    out = h == 0 ? oh : op::concat_cols(out, oh);
  }
  return out;
}

Tensor block_forward(const TransformerBlockWeights& bw, const Tensor& x_map, int block_index,
                     const BlockContext& ctx) {
  int m = x_map.dim(0), h = x_map.dim(1), wd = x_map.dim(2);
  int hw = h * wd;
  int heads = ctx.cfg->heads, d_k = ctx.cfg->d_k;

  // timestep conditioning added to the block input
  Tensor tvec = op::reshape(op::add_row_bias(op::matmul(ctx.t_emb, bw.time_w), bw.time_b), {m});
  Tensor xin = op::add_channel_bias(x_map, tvec);

  const ResidualEntry* r_in = find_entry(ctx.residuals, block_index, ResidualTarget::ProjIn);
  Tensor hmap = op::add_channel_bias(op::conv1x1(xin, maybe_add_lora_conv(bw.proj_in_w, r_in)),
                                     bw.proj_in_b);

  Tensor x = op::transpose2d(op::reshape(hmap, {m, hw}));  // [hw, m]
  x = op::add(x, posenc_2d(h, wd, m));

  // self-attention
  {
    Tensor xn = op::layer_norm(x, bw.ln1_g, bw.ln1_b);
    Tensor q = op::matmul(xn, bw.self_q);
    Tensor k = op::matmul(xn, bw.self_k);
    Tensor v = op::matmul(xn, bw.self_v);
    Tensor o = multihead(q, k, v, heads, d_k, -1, nullptr);
    x = op::add(x, op::add_row_bias(op::matmul(o, bw.self_o), bw.self_ob));
  }

  // cross-attention; maps are always captured
  {
    Tensor xn = op::layer_norm(x, bw.ln2_g, bw.ln2_b);
    Tensor q = op::matmul(xn, bw.cross_q);
    const ResidualEntry* r_k = find_entry(ctx.residuals, block_index, ResidualTarget::CrossK);
    const ResidualEntry* r_v = find_entry(ctx.residuals, block_index, ResidualTarget::CrossV);
    Tensor k = op::matmul(ctx.cond->emb, maybe_add_lora_mat(bw.cross_k, r_k));
    Tensor v = op::matmul(ctx.cond->emb, maybe_add_lora_mat(bw.cross_v, r_v));
    AttentionStack::BlockMaps& cap = ctx.attn->blocks[size_t(block_index)];
    cap.heads = heads;
    cap.h = h;
    cap.w = wd;
    cap.seq = ctx.cond->emb.dim(0);
    cap.maps.clear();
    cap.maps.reserve(size_t(heads) * size_t(hw) * size_t(cap.seq));
    Tensor o = multihead(q, k, v, heads, d_k, ctx.cond->n_valid, &cap);
    x = op::add(x, op::add_row_bias(op::matmul(o, bw.cross_o), bw.cross_ob));
  }

  // feed-forward
  {
    Tensor xn = op::layer_norm(x, bw.ln3_g, bw.ln3_b);
    Tensor f = op::silu(op::add_row_bias(op::matmul(xn, bw.ff1_w), bw.ff1_b));
    f = op::add_row_bias(op::matmul(f, bw.ff2_w), bw.ff2_b);
    x = op::add(x, f);
  }

  Tensor feat = op::reshape(op::transpose2d(x), {m, h, wd});

  const ResidualEntry* r_out = find_entry(ctx.residuals, block_index, ResidualTarget::ProjOut);
  bool lag_on = ctx.lag && ctx.lag->enabled;

  Tensor blended;
  if (lag_on) {
    // Base and personalized proj_out are two 1x1 convs of the same block
    // input: LAG adds no network evaluations.
    Tensor f_base = op::add_channel_bias(op::conv1x1(feat, bw.proj_out_w), bw.proj_out_b);
    Tensor f_pers = op::add_channel_bias(
        op::conv1x1(feat, maybe_add_lora_conv(bw.proj_out_w, r_out)), bw.proj_out_b);
    Mask mask = ctx.lag->inject
                    ? (*ctx.lag->inject)[size_t(block_index)]
                    : mask_from_attention(ctx.attn->blocks[size_t(block_index)],
                                          ctx.lag->concept_indices, ctx.lag->median_per_head);
    if (mask.h != h || mask.w != wd)
      throw ConfigError("lag: injected mask resolution mismatch at block " +
                        std::to_string(block_index));
    (*ctx.lag_masks)[size_t(block_index)] = mask;
    blended = blend_features(f_base, f_pers, mask);
  } else {
    blended = op::add_channel_bias(op::conv1x1(feat, maybe_add_lora_conv(bw.proj_out_w, r_out)),
                                   bw.proj_out_b);
  }

  return op::add(x_map, blended);
}

}  // namespace

Tensor transformer_block_forward(const TransformerBlockWeights& bw, const Tensor& x_map, int t,
                                 const Conditioning& cond, const UNetConfig& cfg, int block_index,
                                 AttentionStack* attn, const ResidualSet* residuals,
                                 const LagConfig* lag, std::vector<Mask>* masks_out) {
  AttentionStack local_attn;
  std::vector<Mask> local_masks;
  AttentionStack* a = attn ? attn : &local_attn;
  std::vector<Mask>* mk = masks_out ? masks_out : &local_masks;
  if (int(a->blocks.size()) <= block_index) a->blocks.resize(size_t(block_index) + 1);
  if (int(mk->size()) <= block_index) mk->resize(size_t(block_index) + 1);

  BlockContext ctx;
  ctx.cfg = &cfg;
  ctx.cond = &cond;
  ctx.residuals = residuals;
  ctx.lag = lag;
  ctx.attn = a;
  ctx.lag_masks = mk;
  ctx.t_emb = sinusoidal_t(t, cfg.t_dim);
  return block_forward(bw, x_map, block_index, ctx);
}

TransformerBlockWeights init_block_weights(int m, const UNetConfig& cfg, uint64_t seed) {
  UNetConfig c = cfg;
  c.widths = {m, m, m, m};
  UNetWeights w = UNetWeights::init(c, seed);
  return w.blocks[0];
}

Conditioning make_conditioning(const Tensor& table, const TokenSequence& toks, int vstar_id,
                               const Tensor* vstar_row) {
  Conditioning c;
  c.emb = embed_tokens(table, toks, vstar_id, vstar_row);
  c.n_valid = toks.n_valid;
  c.concept_indices = toks.concept_indices;
  return c;
}

ForwardResult unet_forward(const Tensor& z_t, int t, const Conditioning& cond,
                           const UNetWeights& w, const ForwardOptions& opts) {
  const UNetConfig& cfg = w.cfg;
  if (z_t.rank() != 3 || z_t.dim(0) != cfg.in_channels || z_t.dim(1) != cfg.image_size ||
      z_t.dim(2) != cfg.image_size)
    throw InputError("unet_forward: expected input [" + std::to_string(cfg.in_channels) + "x" +
                     std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) +
                     "], got " + shape_str(z_t.shape()));
  if (opts.residuals && int(opts.residuals->blocks.size()) != cfg.num_blocks())
    throw ConfigError("unet_forward: residual set has " +
                      std::to_string(opts.residuals->blocks.size()) + " blocks, model has " +
                      std::to_string(cfg.num_blocks()));
  if (opts.lag && opts.lag->enabled && opts.lag->concept_indices.empty() && !opts.lag->inject)
    throw ConfigError("lag: prompt contains no concept tokens");

  ForwardResult res;
  res.attn.blocks.resize(size_t(cfg.num_blocks()));
  res.lag_masks.resize(size_t(cfg.num_blocks()));

  BlockContext ctx;
  ctx.cfg = &cfg;
  ctx.cond = &cond;
  ctx.residuals = opts.residuals;
  ctx.lag = opts.lag;
  ctx.attn = &res.attn;
  ctx.lag_masks = &res.lag_masks;
  ctx.t_emb = sinusoidal_t(t, cfg.t_dim);

  Tensor s0 = op::add_channel_bias(op::conv1x1(z_t, w.stem_w), w.stem_b);      // [a,32,32]
  Tensor d1 = op::add_channel_bias(op::conv1x1(op::avg_pool2(s0), w.down1_w), w.down1_b);
  Tensor b1 = block_forward(w.blocks[0], d1, 0, ctx);                          // [a,16,16]
  Tensor d2 = op::add_channel_bias(op::conv1x1(op::avg_pool2(b1), w.down2_w), w.down2_b);
  Tensor b2 = block_forward(w.blocks[1], d2, 1, ctx);                          // [b,8,8]
  Tensor b3 = block_forward(w.blocks[2], b2, 2, ctx);                          // [b,8,8]

  if (opts.capture_mid_features) {
    int mb = b3.dim(0), hwb = b3.dim(1) * b3.dim(2);
    Tensor mf = Tensor::zeros({mb});
    for (int c = 0; c < mb; ++c) {
      double s = 0.0;
      for (int p = 0; p < hwb; ++p) s += b3.data()[int64_t(c) * hwb + p];
      mf.data()[c] = s / hwb;
    }
    res.mid_features = mf;
  }

  Tensor u1 = op::add_channel_bias(op::conv1x1(op::upsample_nearest2(b3), w.up1_w), w.up1_b);
  u1 = op::add(u1, b1);                                                        // skip
  Tensor b4 = block_forward(w.blocks[3], u1, 3, ctx);                          // [a,16,16]
  Tensor u2 = op::add(op::upsample_nearest2(b4), s0);                          // skip to full res
  res.eps = op::add_channel_bias(op::conv1x1(u2, w.head_w), w.head_b);
  return res;
}

Tensor ldm_loss(const std::vector<TrainItem>& batch, const UNetWeights& w, const Tensor& emb_table,
                const NoiseSchedule& s, Rng& rng, const LossOptions& opts) {
  if (batch.empty()) throw InputError("ldm_loss: empty batch");
  Tensor total;
  for (const auto& item : batch) {
    int t = int(rng.uniform_int(uint64_t(s.T)));
    Tensor eps = Tensor::randn(item.z0.shape(), rng);
    Tensor z_t = q_sample(item.z0, t, eps, s);

    bool drop = opts.prompt_dropout > 0.0 && rng.uniform() < opts.prompt_dropout;
    if (drop && opts.null_cond_counter) ++(*opts.null_cond_counter);

    TokenSequence toks = item.tokens;
    if (drop) {
      toks.ids.assign(toks.ids.size(), emb_table.dim(0) - 1);  // pad row
      toks.n_valid = int(toks.ids.size());
      toks.concept_indices.clear();
    }
    Conditioning cond = make_conditioning(emb_table, toks, opts.vstar_id, opts.vstar_row);

    ForwardOptions fo;
    fo.residuals = opts.residuals;
    ForwardResult fr = unet_forward(z_t, t, cond, w, fo);
    Tensor li = op::mse(eps, fr.eps);
    total = total.defined() ? op::add(total, li) : li;
  }
  return op::scale(total, 1.0 / double(batch.size()));
}

PretrainResult pretrain(UNetWeights& w, Vocabulary& vocab, const std::vector<TrainItem>& dataset,
                        const NoiseSchedule& s, const PretrainConfig& cfg, uint64_t seed) {
  if (int(dataset.size()) < 64)
    throw InputError("pretrain: need at least 64 images, got " + std::to_string(dataset.size()));

  w.set_requires_grad(true);
  vocab.embedding_table().set_requires_grad(true);
  std::vector<Tensor> params = w.parameters();
  params.push_back(vocab.embedding_table());
  Adam opt(params, {.lr = cfg.lr});

  PretrainResult out;
  Rng root(seed, /*stream=*/0x9D27A1A);
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng = root.fork(uint64_t(step));
    std::vector<TrainItem> batch;
    for (int i = 0; i < cfg.batch; ++i)
      batch.push_back(dataset[size_t(rng.uniform_int(dataset.size()))]);
    out.items_seen += cfg.batch;

    LossOptions lo;
    lo.prompt_dropout = cfg.prompt_dropout;
    lo.null_cond_counter = &out.null_cond_count;
    opt.zero_grad();
    Tensor loss = ldm_loss(batch, w, vocab.embedding_table(), s, rng, lo);
    backward(loss);
    opt.step();
    out.loss_trace.push_back(loss.item());
  }

  w.set_requires_grad(false);
  vocab.embedding_table().set_requires_grad(false);
  return out;
}

}  // namespace lagdiff
