#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "lagdiff/checkpoint.hpp"
#include "lagdiff/data.hpp"
#include "lagdiff/eval.hpp"
#include "lagdiff/kernels.hpp"
#include "lagdiff/residuals.hpp"
#include "lagdiff/sampler.hpp"

namespace fs = std::filesystem;
using namespace lagdiff;

namespace {

uint64_t env_seed_default() {
  const char* env = std::getenv("LAGDIFF_SEED");
  if (!env) return 0;
  return std::strtoull(env, nullptr, 10);
}

void log_kv(const std::string& line) { std::cout << line << "\n"; }

std::vector<TrainItem> load_train_items(const std::string& data_dir, const Vocabulary& vocab) {
  auto manifest = data::load_manifest((fs::path(data_dir) / "manifest.json").string());
  std::vector<TrainItem> items;
  for (const auto& it : manifest.items) {
    TrainItem item;
    item.z0 = data::load_ppm((fs::path(data_dir) / it.path).string());
    item.tokens = vocab.tokenize(it.caption);
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<Tensor> load_reference_images(const std::string& refs_dir) {
  std::vector<Tensor> refs;
  fs::path mpath = fs::path(refs_dir) / "manifest.json";
  if (fs::exists(mpath)) {
    auto manifest = data::load_manifest(mpath.string());
    for (const auto& it : manifest.items)
      refs.push_back(data::load_ppm((fs::path(refs_dir) / it.path).string()));
  } else {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(refs_dir))
      if (e.path().extension() == ".ppm") names.push_back(e.path().string());
    std::sort(names.begin(), names.end());
    for (const auto& n : names) refs.push_back(data::load_ppm(n));
  }
  if (refs.empty()) throw InputError("no reference images found in " + refs_dir);
  return refs;
}

std::string macro_from_concept_dir(const std::string& refs_dir) {
  fs::path spath = fs::path(refs_dir) / "concept.json";
  if (!fs::exists(spath)) return "";
  return data::concept_spec_from_json_file(spath.string()).macro_class;
}

std::vector<eval::ConceptJob> load_concept_jobs(const std::string& concepts_dir,
                                                uint64_t base_seed) {
  std::vector<std::string> dirs;
  for (const auto& e : fs::directory_iterator(concepts_dir))
    if (e.is_directory()) dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw InputError("no concept directories under " + concepts_dir);
  std::vector<eval::ConceptJob> jobs;
  for (size_t i = 0; i < dirs.size(); ++i) {
    eval::ConceptJob job;
    job.id = fs::path(dirs[i]).filename().string();
    job.macro_class = macro_from_concept_dir(dirs[i]);
    if (job.macro_class.empty())
      throw InputError("concept dir " + dirs[i] + " has no concept.json with a macro class");
    job.references = load_reference_images(dirs[i]);
    job.seed = Rng::mix64(base_seed + 0x517EC0DE + i);
    jobs.push_back(std::move(job));
  }
  return jobs;
}

void write_coverage_csv(const MaskStack& masks, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw FileError("cannot write " + path);
  f << "block,step,coverage,degenerate\n";
  for (size_t step = 0; step < masks.steps.size(); ++step)
    for (size_t blk = 0; blk < masks.steps[step].size(); ++blk) {
      const Mask& m = masks.steps[step][blk];
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.6f", double(m.ones()) / double(m.m.size()));
      f << blk << "," << step << "," << buf << "," << (m.degenerate ? 1 : 0) << "\n";
    }
}

int run_sample_like(const std::string& model_dir, SampleParams sp,
                    const std::string& residuals_path, const std::string& out_path,
                    const std::string& dump_masks, const std::string& inject_masks,
                    bool write_coverage) {
  Checkpoint ck = load_checkpoint(model_dir);
  ResidualSet rs;
  bool have_rs = !residuals_path.empty();
  if (have_rs) rs = load_residuals(residuals_path);

  MaskStack inject;
  bool have_inject = !inject_masks.empty();
  if (have_inject)
    inject = MaskStack::load_pgm_dir(inject_masks, sp.steps, ck.weights.cfg.num_blocks());

  SampleOutput out = sample(sp, ck.weights, ck.vocab, ck.schedule, have_rs ? &rs : nullptr,
                            have_inject ? &inject : nullptr);
  data::save_ppm(out.image, out_path);
  if (!dump_masks.empty()) {
    out.masks.save_pgm_dir(dump_masks);
    if (write_coverage) write_coverage_csv(out.masks, (fs::path(dump_masks) / "coverage.csv").string());
  }
  log_kv("num_evals=" + std::to_string(out.num_evals));
  log_kv("z_t_hash=" + std::to_string(out.z_t_hash));
  log_kv("out=" + out_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lagdiff: toy text-conditioned diffusion with personalized residuals and "
               "localized attention-guided sampling"};
  app.set_config("--config");
  app.require_subcommand(1);

  uint64_t seed = env_seed_default();
  bool seed_given = false;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate synthetic sprite data");
  std::string gen_kind, gen_out, gen_spec, gen_macro, gen_id = "concept0";
  int gen_n = 256;
  gen->add_option("--kind", gen_kind, "pretrain|concept")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", seed)->each([&](const std::string&) { seed_given = true; });
  gen->add_option("--n", gen_n, "pretrain corpus size");
  gen->add_option("--spec", gen_spec, "concept spec json");
  gen->add_option("--macro", gen_macro, "macro class for a random concept spec");
  gen->add_option("--id", gen_id, "concept id for a random concept spec");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "train the toy base model");
  std::string pre_data, pre_out;
  PretrainConfig pre_cfg;
  pre->add_option("--data", pre_data, "dataset directory (with manifest.json)")->required();
  pre->add_option("--out", pre_out, "model output directory")->required();
  pre->add_option("--steps", pre_cfg.steps);
  pre->add_option("--batch", pre_cfg.batch);
  pre->add_option("--lr", pre_cfg.lr);
  pre->add_option("--dropout", pre_cfg.prompt_dropout);
  pre->add_option("--seed", seed)->each([&](const std::string&) { seed_given = true; });

  // personalize
  auto* per = app.add_subcommand("personalize", "learn residuals for one concept");
  std::string per_model, per_refs, per_macro, per_out, per_targets = "proj_out";
  PersonalizeConfig per_cfg;
  bool per_no_macro = false;
  per->add_option("--model", per_model)->required();
  per->add_option("--refs", per_refs, "reference image directory")->required();
  per->add_option("--macro", per_macro, "macro class word (default: from concept.json)");
  per->add_option("--out", per_out, "residual file (.pres)")->required();
  per->add_option("--iters", per_cfg.iterations);
  per->add_option("--batch", per_cfg.batch);
  per->add_option("--lr", per_cfg.lr);
  per->add_option("--targets", per_targets,
                  "proj_out|kv|proj_in|kv+proj_out|kv+proj_in+proj_out");
  per->add_flag("--no-macro-class", per_no_macro, "drop the macro class from the prompt");
  per->add_flag("--reg-images", per_cfg.use_reg_images, "mix regularization sprites into batches");
  per->add_flag("--update-token-embedding", per_cfg.update_token_embedding);
  per->add_option("--rank", per_cfg.rank_fixed, "fixed rank override");
  per->add_option("--rank-frac", per_cfg.rank_frac, "fractional rank override");
  per->add_option("--seed", seed)->each([&](const std::string&) { seed_given = true; });

  // sample / inspect-masks
  auto add_sample_flags = [&](CLI::App* cmd, SampleParams& sp, std::string& model,
                              std::string& residuals, std::string& out, std::string& dump,
                              std::string& inject) {
    cmd->add_option("--model", model)->required();
    cmd->add_option("--prompt", sp.prompt)->required();
    cmd->add_option("--seed", seed)->each([&](const std::string&) { seed_given = true; });
    cmd->add_option("--steps", sp.steps);
    cmd->add_option("--eta", sp.eta);
    cmd->add_option("--guidance", sp.guidance);
    cmd->add_option("--residuals", residuals, "residual file (.pres)");
    cmd->add_flag("--median-per-head", sp.median_per_head);
    cmd->add_option("--dump-masks", dump, "directory for per-block/step PGM masks");
    cmd->add_option("--inject-masks", inject, "directory of masks to replay");
    cmd->add_option("--out", out, "output PPM path")->required();
  };

  auto* smp = app.add_subcommand("sample", "DDIM sampling with optional residuals and LAG");
  SampleParams smp_params;
  std::string smp_model, smp_res, smp_out, smp_dump, smp_inject;
  smp->add_flag("--lag", smp_params.lag, "localized attention-guided sampling");
  add_sample_flags(smp, smp_params, smp_model, smp_res, smp_out, smp_dump, smp_inject);

  auto* ins = app.add_subcommand("inspect-masks", "LAG sampling with mask dumps and coverage");
  SampleParams ins_params;
  std::string ins_model, ins_res, ins_out, ins_dump, ins_inject;
  bool ins_lag = true;
  ins->add_flag("--lag,!--no-lag", ins_lag, "must stay enabled");
  add_sample_flags(ins, ins_params, ins_model, ins_res, ins_out, ins_dump, ins_inject);

  // ablate
  auto* abl = app.add_subcommand("ablate", "run the ablation or rank sweep");
  std::string abl_model, abl_plan, abl_concepts, abl_out;
  bool abl_rank = false, abl_timings = false;
  int abl_threads = eval::env_threads();
  abl->add_option("--model", abl_model)->required();
  abl->add_option("--plan", abl_plan, "plan json (default: built-in Table-4 mirror)");
  abl->add_option("--concepts", abl_concepts, "directory of concept directories")->required();
  abl->add_option("--out", abl_out, "report path (.csv or .json)")->required();
  abl->add_flag("--rank-sweep", abl_rank, "run the rank sweep instead of the variant list");
  abl->add_flag("--timings", abl_timings, "write measured runtimes into the report");
  abl->add_option("--threads", abl_threads);
  abl->add_option("--seed", seed)->each([&](const std::string&) { seed_given = true; });

  // eval
  auto* evl = app.add_subcommand("eval", "score generated images against references");
  std::string evl_model, evl_images, evl_refs, evl_out;
  bool evl_timings = false;
  evl->add_option("--model", evl_model)->required();
  evl->add_option("--images", evl_images, "directory with manifest.json of generated images")
      ->required();
  evl->add_option("--refs", evl_refs, "reference image directory")->required();
  evl->add_option("--out", evl_out, "report path (.csv or .json)")->required();
  evl->add_flag("--timings", evl_timings);

  // param-report
  auto* par = app.add_subcommand("param-report", "parameter census");
  std::string par_model, par_res;
  par->add_option("--model", par_model)->required();
  par->add_option("--residuals", par_res, "residual file (default: fresh default-config set)");
  par->add_option("--seed", seed)->each([&](const std::string&) { seed_given = true; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  (void)seed_given;

  try {
    log_kv("kernels=" + std::string(kernels::active().name));
    log_kv("seed=" + std::to_string(seed));

    if (gen->parsed()) {
      log_kv("cmd=gen-data kind=" + gen_kind + " out=" + gen_out);
      if (gen_kind == "pretrain") {
        auto m = data::gen_pretrain_corpus(seed, gen_n, gen_out);
        log_kv("images=" + std::to_string(m.items.size()));
      } else if (gen_kind == "concept") {
        data::ConceptSpec spec;
        if (!gen_spec.empty()) {
          spec = data::concept_spec_from_json_file(gen_spec);
        } else {
          if (gen_macro.empty())
            throw InputError("gen-data --kind concept needs --spec or --macro");
          spec = data::random_concept_spec(gen_id, gen_macro, seed);
        }
        auto m = data::write_concept(spec, seed, gen_out);
        log_kv("references=" + std::to_string(m.items.size()) + " macro=" + spec.macro_class);
      } else {
        throw InputError("gen-data: unknown --kind '" + gen_kind + "'");
      }
      return 0;
    }

    if (pre->parsed()) {
      log_kv("cmd=pretrain data=" + pre_data + " out=" + pre_out +
             " steps=" + std::to_string(pre_cfg.steps) + " batch=" + std::to_string(pre_cfg.batch));
      Vocabulary vocab = Vocabulary::build(data::vocab_words(), 32, Rng::mix64(seed + 0xB0CA));
      auto items = load_train_items(pre_data, vocab);
      NoiseSchedule s = NoiseSchedule::linear(1000);
      UNetWeights w = UNetWeights::init(UNetConfig{}, Rng::mix64(seed + 0x11E7));
      PretrainResult pr = pretrain(w, vocab, items, s, pre_cfg, seed);
      save_checkpoint(pre_out, w, vocab, s);
      double first = pr.loss_trace.front(), last = pr.loss_trace.back();
      log_kv("loss_first=" + std::to_string(first) + " loss_last=" + std::to_string(last));
      log_kv("null_cond_count=" + std::to_string(pr.null_cond_count) +
             " items_seen=" + std::to_string(pr.items_seen));
      return 0;
    }

    if (per->parsed()) {
      per_cfg.targets = target_selector_from_string(per_targets);
      per_cfg.use_macro_class = !per_no_macro;
      Checkpoint ck = load_checkpoint(per_model);
      auto refs = load_reference_images(per_refs);
      std::string macro = per_macro.empty() ? macro_from_concept_dir(per_refs) : per_macro;
      if (macro.empty()) throw InputError("personalize: no --macro and no concept.json");
      log_kv("cmd=personalize refs=" + std::to_string(refs.size()) + " macro=" + macro +
             " targets=" + per_targets + " iters=" + std::to_string(per_cfg.iterations) +
             " config_hash=" + per_cfg.hash());
      PersonalizeResult res = personalize(ck.weights, ck.vocab, refs, macro, ck.schedule, per_cfg, seed);
      save_residuals(res.residuals, per_out);
      log_kv("eval_loss_initial=" + std::to_string(res.eval_loss_initial) +
             " eval_loss_final=" + std::to_string(res.eval_loss_final) + " ratio=" +
             std::to_string(res.eval_loss_final / res.eval_loss_initial));
      log_kv("base_hash_before=" + std::to_string(res.base_hash_before) +
             " base_hash_after=" + std::to_string(res.base_hash_after));
      log_kv("residual_params=" + std::to_string(res.residuals.param_count()) + " out=" + per_out);
      return 0;
    }

    if (smp->parsed()) {
      smp_params.seed = seed;
      log_kv("cmd=sample prompt=\"" + smp_params.prompt + "\" steps=" +
             std::to_string(smp_params.steps) + " eta=" + std::to_string(smp_params.eta) +
             " guidance=" + std::to_string(smp_params.guidance) +
             " lag=" + std::to_string(int(smp_params.lag)));
      return run_sample_like(smp_model, smp_params, smp_res, smp_out, smp_dump, smp_inject, false);
    }

    if (ins->parsed()) {
      if (!ins_lag) {
        std::cerr << "inspect-masks requires LAG sampling (drop --no-lag)\n";
        return 1;
      }
      if (ins_dump.empty()) {
        std::cerr << "inspect-masks requires --dump-masks\n";
        return 1;
      }
      ins_params.lag = true;
      ins_params.seed = seed;
      log_kv("cmd=inspect-masks prompt=\"" + ins_params.prompt + "\" dump=" + ins_dump);
      return run_sample_like(ins_model, ins_params, ins_res, ins_out, ins_dump, ins_inject, true);
    }

    if (abl->parsed()) {
      Checkpoint ck = load_checkpoint(abl_model);
      eval::AblationPlan plan = abl_plan.empty() ? eval::AblationPlan::builtin_default()
                                                 : eval::AblationPlan::load(abl_plan);
      auto concepts = load_concept_jobs(abl_concepts, seed);
      log_kv("cmd=ablate variants=" + std::to_string(plan.variants.size()) +
             " rank_points=" + std::to_string(plan.rank_sweep.size()) +
             " concepts=" + std::to_string(concepts.size()) +
             " threads=" + std::to_string(abl_threads) + " rank_sweep=" +
             std::to_string(int(abl_rank)));
      eval::EvalReport report =
          abl_rank ? eval::run_rank_sweep(plan, concepts, ck.weights, ck.vocab, ck.schedule, abl_threads)
                   : eval::run_ablations(plan, concepts, ck.weights, ck.vocab, ck.schedule, abl_threads);
      for (const auto& row : report.rows) {
        log_kv("row concept=" + row.concept_id + " variant=" + row.variant +
               " seed=" + std::to_string(row.seed) + " text=" + std::to_string(row.text_align) +
               " image=" + std::to_string(row.image_align) +
               " runtime_ms=" + std::to_string(row.runtime_ms) +
               (row.failed() ? " error=\"" + row.error + "\"" : ""));
      }
      if (abl_out.size() > 5 && abl_out.substr(abl_out.size() - 5) == ".json")
        eval::emit_report_json(report, abl_out, abl_timings);
      else
        eval::emit_report_csv(report, abl_out, abl_timings);
      log_kv("out=" + abl_out);
      return 0;
    }

    if (evl->parsed()) {
      Checkpoint ck = load_checkpoint(evl_model);
      eval::Probe probe(ck.weights, ck.vocab, ck.schedule);
      auto refs = load_reference_images(evl_refs);
      std::vector<Tensor> qrefs;
      for (const auto& r : refs) qrefs.push_back(eval::quantize_unit(r));
      auto manifest = data::load_manifest((fs::path(evl_images) / "manifest.json").string());
      eval::EvalReport report;
      for (const auto& item : manifest.items) {
        eval::EvalRow row;
        row.concept_id = item.concept_id;
        row.prompt = item.caption;
        row.variant = "eval";
        try {
          Tensor img = data::load_ppm((fs::path(evl_images) / item.path).string());
          row.text_align = probe.text_alignment(img, item.caption);
          row.image_align = eval::toy_image_alignment(img, qrefs);
        } catch (const std::exception& e) {
          row.error = e.what();
        }
        report.rows.push_back(std::move(row));
      }
      if (evl_out.size() > 4 && evl_out.substr(evl_out.size() - 4) == ".csv")
        eval::emit_report_csv(report, evl_out, evl_timings);
      else
        eval::emit_report_json(report, evl_out, evl_timings);
      log_kv("cmd=eval rows=" + std::to_string(report.rows.size()) + " out=" + evl_out);
      return 0;
    }

    if (par->parsed()) {
      Checkpoint ck = load_checkpoint(par_model);
      ResidualSet rs;
      if (!par_res.empty()) {
        rs = load_residuals(par_res);
      } else {
        rs = init_residuals(ck.weights, PersonalizeConfig{}, seed);
      }
      ParamReport rep = param_report(rs, ck.weights);
      nlohmann::json j;
      j["residual_params"] = rep.residual_params;
      j["base_params"] = rep.base_params;
      j["ratio"] = rep.ratio;
      std::cout << j.dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
