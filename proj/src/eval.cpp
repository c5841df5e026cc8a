#include "lagdiff/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "lagdiff/data.hpp"

namespace lagdiff::eval {

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

Tensor quantize_unit(const Tensor& img) {
  Tensor out = img.clone();
  for (auto& v : out.vec()) {
    double c = std::clamp(v, -1.0, 1.0);
    long b = std::lround((c + 1.0) * 0.5 * 255.0);
    v = double(std::clamp(b, 0L, 255L)) / 255.0 * 2.0 - 1.0;
  }
  return out;
}

std::vector<double> identity_descriptor(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw InputError("identity_descriptor: expected [3,h,w]");
  int h = img.dim(1), w = img.dim(2);
  auto px = [&](int c, int y, int x) { return img.data()[(int64_t(c) * h + y) * w + x]; };

  // Background estimate: mean of the one-pixel border ring.
  double bg[3] = {0, 0, 0};
  int border = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (y != 0 && y != h - 1 && x != 0 && x != w - 1) continue;
      for (int c = 0; c < 3; ++c) bg[c] += px(c, y, x);
      ++border;
    }
  for (int c = 0; c < 3; ++c) bg[c] /= border;

  const double tau2 = 0.75 * 0.75;
  std::vector<double> hist(64, 0.0);
  double count = 0, sx = 0, sy = 0;
  std::vector<std::pair<int, int>> region;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double d2 = 0;
      for (int c = 0; c < 3; ++c) {
        double d = px(c, y, x) - bg[c];
        d2 += d * d;
      }
      if (d2 <= tau2) continue;
      int bins[3];
      for (int c = 0; c < 3; ++c) {
        int b = int((px(c, y, x) + 1.0) * 0.5 * 4.0);
        bins[c] = std::clamp(b, 0, 3);
      }
      hist[size_t(bins[0] * 16 + bins[1] * 4 + bins[2])] += 1.0;
      region.emplace_back(x, y);
      sx += x;
      sy += y;
      count += 1;
    }

  std::vector<double> desc(hist);
  if (count > 0) {
    for (auto& v : desc) v /= count;
    double cx = sx / count, cy = sy / count;
    double mu20 = 0, mu02 = 0, mu11 = 0;
    for (auto [x, y] : region) {
      double dx = x - cx, dy = y - cy;
      mu20 += dx * dx;
      mu02 += dy * dy;
      mu11 += dx * dy;
    }
    mu20 /= count;
    mu02 /= count;
    mu11 /= count;
    desc.push_back(count / double(h * w));
    desc.push_back(std::sqrt(mu20) / (w / 2.0));
    desc.push_back(std::sqrt(mu02) / (h / 2.0));
    desc.push_back(mu11 / double(w * h / 4.0));
  } else {
    desc.insert(desc.end(), {0.0, 0.0, 0.0, 0.0});
  }
  return desc;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

Probe::Probe(const UNetWeights& base, const Vocabulary& vocab, const NoiseSchedule& s)
    : base_(base), vocab_(vocab), s_(s) {
  for (const auto& cls : data::class_words()) {
    std::vector<double> sig;
    for (int k = 0; k < 8; ++k) {
      uint64_t seed = Rng::mix64(fnv1a(cls.data(), cls.size()) + uint64_t(k) * 0x9E37ull);
      Tensor sprite = quantize_unit(data::random_class_sprite(cls, seed));
      std::vector<double> f = feature(sprite);
      if (sig.empty()) sig.assign(f.size(), 0.0);
      for (size_t i = 0; i < f.size(); ++i) sig[i] += f[i] / 8.0;
    }
    signatures_.emplace_back(cls, std::move(sig));
  }
}

std::vector<double> Probe::feature(const Tensor& img) const {
  Conditioning null_cond =
      make_conditioning(vocab_.embedding_table(), vocab_.null_sequence());
  ForwardOptions fo;
  fo.capture_mid_features = true;
  ForwardResult fr = unet_forward(img, /*t=*/0, null_cond, base_, fo);
  return fr.mid_features.vec();
}

const std::vector<double>& Probe::class_signature(const std::string& class_word) const {
  for (const auto& [cls, sig] : signatures_)
    if (cls == class_word) return sig;
  throw VocabularyError("no signature for class '" + class_word + "'");
}

double Probe::text_alignment(const Tensor& image, const std::string& prompt) const {
  std::istringstream iss(prompt);
  std::string word;
  std::string cls;
  const auto& classes = data::class_words();
  while (iss >> word) {
    if (std::find(classes.begin(), classes.end(), word) != classes.end()) {
      cls = word;
      break;
    }
  }
  if (cls.empty()) throw VocabularyError("prompt contains no known class word: '" + prompt + "'");
  return cosine(feature(image), class_signature(cls));
}

std::string Probe::macro_class_nn(const std::vector<Tensor>& references) const {
  if (references.empty()) throw InputError("macro_class_nn: no references");
  std::vector<double> mean_feat;
  for (const auto& r : references) {
    std::vector<double> f = feature(r);
    if (mean_feat.empty()) mean_feat.assign(f.size(), 0.0);
    for (size_t i = 0; i < f.size(); ++i) mean_feat[i] += f[i] / double(references.size());
  }
  std::string best;
  double best_score = -2.0;
  int best_id = 0;
  for (const auto& [cls, sig] : signatures_) {
    double sc = cosine(mean_feat, sig);
    int id = vocab_.id_of(cls);
    if (sc > best_score || (sc == best_score && id < best_id)) {
      best_score = sc;
      best = cls;
      best_id = id;
    }
  }
  return best;
}

double toy_image_alignment(const Tensor& generated, const std::vector<Tensor>& references) {
  if (references.empty()) throw InputError("toy_image_alignment: no references");
  std::vector<double> mean_desc;
  for (const auto& r : references) {
    std::vector<double> d = identity_descriptor(r);
    if (mean_desc.empty()) mean_desc.assign(d.size(), 0.0);
    for (size_t i = 0; i < d.size(); ++i) mean_desc[i] += d[i] / double(references.size());
  }
  return cosine(identity_descriptor(generated), mean_desc);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

void emit_report_csv(const EvalReport& r, const std::string& path, bool include_timings) {
  if (r.rows.empty()) throw InputError("emit_report: empty report");
  std::ofstream f(path);
  if (!f) throw FileError("cannot write " + path);
  f << "concept,prompt,variant,seed,text_align,image_align,runtime_ms,config_hash\n";
  for (const auto& row : r.rows) {
    f << row.concept_id << ",\"" << row.prompt << "\"," << row.variant << "," << row.seed << ","
      << fmt6(row.text_align) << "," << fmt6(row.image_align) << ","
      << fmt6(include_timings ? row.runtime_ms : 0.0) << "," << row.config_hash << "\n";
  }
  if (!f) throw FileError("write failed: " + path);
}

void emit_report_json(const EvalReport& r, const std::string& path, bool include_timings) {
  if (r.rows.empty()) throw InputError("emit_report: empty report");
  nlohmann::json j;
  j["version"] = 1;
  auto& rows = j["rows"] = nlohmann::json::array();
  std::map<std::string, std::pair<double, int>> text_by_variant, image_by_variant;
  for (const auto& row : r.rows) {
    nlohmann::json e;
    e["concept"] = row.concept_id;
    e["prompt"] = row.prompt;
    e["variant"] = row.variant;
    e["seed"] = row.seed;
    e["text_align"] = row.text_align;
    e["image_align"] = row.image_align;
    e["runtime_ms"] = include_timings ? row.runtime_ms : 0.0;
    e["config_hash"] = row.config_hash;
    e["z_hash"] = row.z_hash;
    if (row.failed()) e["error"] = row.error;
    rows.push_back(e);
    if (!row.failed()) {
      text_by_variant[row.variant].first += row.text_align;
      text_by_variant[row.variant].second += 1;
      image_by_variant[row.variant].first += row.image_align;
      image_by_variant[row.variant].second += 1;
    }
  }
  auto& agg = j["aggregates"] = nlohmann::json::array();
  for (const auto& [variant, acc] : text_by_variant) {
    nlohmann::json e;
    e["variant"] = variant;
    e["mean_text_align"] = acc.first / acc.second;
    e["mean_image_align"] = image_by_variant[variant].first / image_by_variant[variant].second;
    e["rows"] = acc.second;
    agg.push_back(e);
  }
  std::ofstream f(path);
  if (!f) throw FileError("cannot write " + path);
  f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Plans and sweeps
// ---------------------------------------------------------------------------

AblationPlan AblationPlan::builtin_default() {
  AblationPlan p;
  auto add = [&](const std::string& label, auto mutate) {
    AblationVariant v;
    v.label = label;
    mutate(v.config);
    p.variants.push_back(std::move(v));
  };
  add("default", [](PersonalizeConfig&) {});
  add("kv", [](PersonalizeConfig& c) { c.targets = TargetSelector::KV; });
  add("proj_in", [](PersonalizeConfig& c) { c.targets = TargetSelector::ProjIn; });
  add("kv+proj_out", [](PersonalizeConfig& c) { c.targets = TargetSelector::KVProjOut; });
  add("kv+proj_in+proj_out",
      [](PersonalizeConfig& c) { c.targets = TargetSelector::KVProjInProjOut; });
  add("no_macro_class", [](PersonalizeConfig& c) { c.use_macro_class = false; });
  add("reg_images", [](PersonalizeConfig& c) { c.use_reg_images = true; });
  add("update_token_embedding", [](PersonalizeConfig& c) { c.update_token_embedding = true; });
  p.rank_sweep = {{"rank_1", 1, -1},  {"rank_2", 2, -1},       {"rank_4", 4, -1},
                  {"rank_8", 8, -1},  {"rank_16", 16, -1},     {"rank_0.025m", -1, 0.025},
                  {"rank_0.05m", -1, 0.05}};
  p.prompts = {"a photo of a V* {class}"};
  p.seeds = {0};
  return p;
}

AblationPlan AblationPlan::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FileError("cannot read plan " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw FormatError("bad plan json: " + std::string(e.what()));
  }

  AblationPlan p;
  int global_iters = j.value("iterations", -1);
  for (const auto& e : j.value("variants", nlohmann::json::array())) {
    AblationVariant v;
    v.label = e.at("label").get<std::string>();
    if (e.contains("targets")) v.config.targets = target_selector_from_string(e["targets"]);
    v.config.use_macro_class = e.value("use_macro_class", true);
    v.config.use_reg_images = e.value("use_reg_images", false);
    v.config.update_token_embedding = e.value("update_token_embedding", false);
    v.config.iterations = e.value("iterations", global_iters > 0 ? global_iters : 150);
    v.config.lr = e.value("lr", 1e-3);
    v.config.batch = e.value("batch", 4);
    p.variants.push_back(std::move(v));
  }
  for (const auto& e : j.value("rank_sweep", nlohmann::json::array())) {
    RankPoint rp;
    if (e.is_number_integer()) {
      rp.rank_fixed = e.get<int>();
      rp.label = "rank_" + std::to_string(rp.rank_fixed);
    } else {
      std::string s = e.get<std::string>();  // e.g. "0.05m"
      rp.rank_frac = std::stod(s);
      rp.label = "rank_" + s;
    }
    p.rank_sweep.push_back(std::move(rp));
  }
  p.prompts = j.value("prompts", std::vector<std::string>{"a photo of a V* {class}"});
  for (const auto& e : j.value("seeds", nlohmann::json::array({0})))
    p.seeds.push_back(e.get<uint64_t>());

  // The default configuration is the reference row; keep it present exactly once.
  bool has_default = false;
  for (const auto& v : p.variants)
    if (v.label == "default") has_default = true;
  if (!has_default) {
    AblationVariant def;
    def.label = "default";
    if (global_iters > 0) def.config.iterations = global_iters;
    p.variants.insert(p.variants.begin(), std::move(def));
  }
  return p;
}

int env_threads() {
  const char* env = std::getenv("LAGDIFF_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  return n > 0 ? n : 1;
}

namespace {

std::string expand_prompt(const std::string& tpl, const std::string& cls) {
  std::string out = tpl;
  auto pos = out.find("{class}");
  if (pos != std::string::npos) out.replace(pos, 7, cls);
  return out;
}

struct SweepJob {
  std::string variant_label;
  PersonalizeConfig config;
  const ConceptJob* cj = nullptr;
};

// One job = personalize one (variant, concept), then sample and score every
// (prompt, seed). Rows land in a preallocated slot range; no locking needed.
void run_sweep(const std::vector<SweepJob>& jobs, const AblationPlan& plan,
               const UNetWeights& base, const Vocabulary& vocab, const NoiseSchedule& s,
               int threads, EvalReport& report) {
  Probe probe(base, vocab, s);
  size_t rows_per_job = plan.prompts.size() * plan.seeds.size();
  report.rows.assign(jobs.size() * rows_per_job, EvalRow{});

  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      size_t ji = next.fetch_add(1);
      if (ji >= jobs.size()) return;
      const SweepJob& job = jobs[ji];
      const ConceptJob& cj = *job.cj;
      EvalRow* slot = report.rows.data() + ji * rows_per_job;

      ResidualSet rs;
      std::string fail;
      double train_ms = 0.0;
      try {
        Vocabulary vcopy = vocab;  // registration is per-job
        double t0 = now_ms();
        PersonalizeResult pr = personalize(base, vcopy, cj.references, cj.macro_class,
                                           s, job.config, cj.seed);
        train_ms = now_ms() - t0;
        rs = std::move(pr.residuals);
      } catch (const std::exception& e) {
        fail = e.what();
      }

      size_t r = 0;
      for (const auto& tpl : plan.prompts) {
        std::string prompt = expand_prompt(tpl, cj.macro_class);
        for (uint64_t seed : plan.seeds) {
          EvalRow& row = slot[r++];
          row.concept_id = cj.id;
          row.prompt = prompt;
          row.variant = job.variant_label;
          row.seed = seed;
          row.config_hash = job.config.hash();
          if (!fail.empty()) {
            row.error = fail;
            continue;
          }
          try {
            double t0 = now_ms();
            SampleParams sp;
            sp.prompt = prompt;
            sp.seed = seed;
            SampleOutput so = sample(sp, base, vocab, s, &rs);
            Tensor img = quantize_unit(so.image);
            row.text_align = probe.text_alignment(img, prompt);
            std::vector<Tensor> qrefs;
            for (const auto& ref : cj.references) qrefs.push_back(quantize_unit(ref));
            row.image_align = toy_image_alignment(img, qrefs);
            row.z_hash = so.z_t_hash;
            row.runtime_ms = (now_ms() - t0) + train_ms / double(rows_per_job);
          } catch (const std::exception& e) {
            row.error = e.what();
          }
        }
      }
    }
  };

  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
}

}  // namespace

EvalReport run_ablations(const AblationPlan& plan, const std::vector<ConceptJob>& concepts,
                         const UNetWeights& base, const Vocabulary& vocab, const NoiseSchedule& s,
                         int threads) {
  std::vector<SweepJob> jobs;
  for (const auto& v : plan.variants)
    for (const auto& c : concepts) jobs.push_back({v.label, v.config, &c});
  EvalReport report;
  run_sweep(jobs, plan, base, vocab, s, threads, report);
  return report;
}

EvalReport run_rank_sweep(const AblationPlan& plan, const std::vector<ConceptJob>& concepts,
                          const UNetWeights& base, const Vocabulary& vocab,
                          const NoiseSchedule& s, int threads) {
  std::vector<SweepJob> jobs;
  for (const auto& rp : plan.rank_sweep) {
    PersonalizeConfig cfg;
    cfg.rank_fixed = rp.rank_fixed;
    cfg.rank_frac = rp.rank_frac;
    for (const auto& c : concepts) jobs.push_back({rp.label, cfg, &c});
  }
  EvalReport report;
  run_sweep(jobs, plan, base, vocab, s, threads, report);
  return report;
}

double rank_trend_fraction(const EvalReport& sweep, const std::vector<int>& ranks) {
  // series key = (concept, prompt, seed); values indexed by rank
  std::map<std::string, std::map<int, double>> series;
  for (const auto& row : sweep.rows) {
    if (row.failed()) continue;
    for (int r : ranks) {
      if (row.variant == "rank_" + std::to_string(r)) {
        series[row.concept_id + "|" + row.prompt + "|" + std::to_string(row.seed)][r] =
            row.image_align;
      }
    }
  }
  int total = 0, good = 0;
  for (const auto& [key, by_rank] : series) {
    for (size_t i = 0; i + 1 < ranks.size(); ++i) {
      auto a = by_rank.find(ranks[i]);
      auto b = by_rank.find(ranks[i + 1]);
      if (a == by_rank.end() || b == by_rank.end()) continue;
      ++total;
      if (b->second >= a->second) ++good;
    }
  }
  if (total == 0) return 0.0;
  return double(good) / double(total);
}

}  // namespace lagdiff::eval
