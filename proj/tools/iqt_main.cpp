// iqt: phantom corpus generation, low-field simulation, diffusion training,
// enhancement, evaluation, gradient checking and the module ablation table.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "iqt/checkpoint.hpp"
#include "iqt/metrics.hpp"
#include "iqt/sampling.hpp"
#include "iqt/simulator.hpp"
#include "iqt/training.hpp"
#include "iqt/volume.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "runs/out";

  int phantom_n = 10;
  iqt::PhantomSpec phantom;

  iqt::DecimationSpec sim{.factor = 4};
  iqt::NoiseSchedule sched;
  iqt::DenoiserConfig den;
  iqt::TrainConfig train;
  iqt::SamplerConfig sampler;
  iqt::SsimOptions ssim;

  double gc_eps_fd = 1e-4;
  int gc_min_per_class = 14;
  std::string gc_corrupt;
  double gc_tol = 1e-5;

  int ablation_steps = 100;

  std::string path_pred, path_ref, path_checkpoint;
};

void expect_keys(const json& j, const std::string& ctx,
                 std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError("config: " + ctx + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys)
      if (k == key) { known = true; break; }
    if (!known) throw ConfigError("config: unknown key '" + ctx + "." + k + "'");
  }
}

template <class T>
void opt(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

RunConfig parse_config(const json& j) {
  RunConfig c;
  expect_keys(j, "", {"seed", "out", "phantom", "simulate", "schedule",
                      "denoiser", "train", "sampler", "metrics", "gradcheck",
                      "ablation", "paths"});
  opt(j, "seed", c.seed);
  opt(j, "out", c.out);

  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    expect_keys(p, "phantom",
                {"n", "dims", "n_ellipsoids", "n_sheets", "noise_sigma"});
    opt(p, "n", c.phantom_n);
    if (p.contains("dims")) {
      auto d = p.at("dims").get<std::vector<int>>();
      if (d.size() != 3) throw ConfigError("config: phantom.dims needs 3 ints");
      c.phantom.dims = {d[0], d[1], d[2]};
    }
    opt(p, "n_ellipsoids", c.phantom.n_ellipsoids);
    opt(p, "n_sheets", c.phantom.n_sheets);
    opt(p, "noise_sigma", c.phantom.noise_sigma);
  }
  if (j.contains("simulate")) {
    const auto& s = j.at("simulate");
    expect_keys(s, "simulate",
                {"factor", "blur_fwhm_slices", "noise_sigma", "slice_axis"});
    opt(s, "factor", c.sim.factor);
    opt(s, "blur_fwhm_slices", c.sim.blur_fwhm_slices);
    opt(s, "noise_sigma", c.sim.noise_sigma);
    opt(s, "slice_axis", c.sim.slice_axis);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    expect_keys(s, "schedule", {"s_offset", "clip_alpha_min"});
    opt(s, "s_offset", c.sched.s_offset);
    opt(s, "clip_alpha_min", c.sched.clip_alpha_min);
  }
  if (j.contains("denoiser")) {
    const auto& d = j.at("denoiser");
    expect_keys(d, "denoiser",
                {"patch", "in_channels", "filters", "token_size", "heads",
                 "embed_dim", "dfe_depth", "shuffle_r", "halo", "skip_scale",
                 "norm_groups", "use_cross_batch", "cond_residual"});
    opt(d, "patch", c.den.patch);
    opt(d, "in_channels", c.den.in_channels);
    opt(d, "filters", c.den.filters);
    opt(d, "token_size", c.den.token_size);
    opt(d, "heads", c.den.heads);
    opt(d, "embed_dim", c.den.embed_dim);
    opt(d, "dfe_depth", c.den.dfe_depth);
    opt(d, "shuffle_r", c.den.shuffle_r);
    opt(d, "halo", c.den.halo);
    opt(d, "skip_scale", c.den.skip_scale);
    opt(d, "norm_groups", c.den.norm_groups);
    opt(d, "use_cross_batch", c.den.use_cross_batch);
    opt(d, "cond_residual", c.den.cond_residual);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    expect_keys(t, "train",
                {"learning_rate", "steps", "seed", "parametrization", "beta1",
                 "beta2", "adam_eps", "log_every", "grad_accum", "augment"});
    opt(t, "learning_rate", c.train.learning_rate);
    opt(t, "steps", c.train.steps);
    opt(t, "seed", c.train.seed);
    if (t.contains("parametrization"))
      c.train.parametrization =
          iqt::pred_kind_from_string(t.at("parametrization").get<std::string>());
    opt(t, "beta1", c.train.beta1);
    opt(t, "beta2", c.train.beta2);
    opt(t, "adam_eps", c.train.adam_eps);
    opt(t, "log_every", c.train.log_every);
    opt(t, "grad_accum", c.train.grad_accum);
    opt(t, "augment", c.train.augment);
    if (!t.contains("seed")) c.train.seed = c.seed;
  } else {
    c.train.seed = c.seed;
  }
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    expect_keys(s, "sampler", {"timesteps", "seed", "clip_x"});
    opt(s, "timesteps", c.sampler.timesteps);
    opt(s, "seed", c.sampler.seed);
    opt(s, "clip_x", c.sampler.clip_x);
    if (!s.contains("seed")) c.sampler.seed = c.seed;
  } else {
    c.sampler.seed = c.seed;
  }
  if (j.contains("metrics")) {
    const auto& m = j.at("metrics");
    expect_keys(m, "metrics", {"scales", "range", "window", "window_sigma"});
    opt(m, "scales", c.ssim.scales);
    opt(m, "range", c.ssim.range);
    opt(m, "window", c.ssim.window);
    opt(m, "window_sigma", c.ssim.window_sigma);
  }
  if (j.contains("gradcheck")) {
    const auto& g = j.at("gradcheck");
    expect_keys(g, "gradcheck",
                {"eps_fd", "min_per_class", "corrupt_param", "tol"});
    opt(g, "eps_fd", c.gc_eps_fd);
    opt(g, "min_per_class", c.gc_min_per_class);
    opt(g, "corrupt_param", c.gc_corrupt);
    opt(g, "tol", c.gc_tol);
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    expect_keys(a, "ablation", {"steps"});
    opt(a, "steps", c.ablation_steps);
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    expect_keys(p, "paths", {"pred", "ref", "checkpoint"});
    opt(p, "pred", c.path_pred);
    opt(p, "ref", c.path_ref);
    opt(p, "checkpoint", c.path_checkpoint);
  }
  return c;
}

ordered_json resolved_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["phantom"] = {{"n", c.phantom_n},
                  {"dims", {c.phantom.dims[0], c.phantom.dims[1], c.phantom.dims[2]}},
                  {"n_ellipsoids", c.phantom.n_ellipsoids},
                  {"n_sheets", c.phantom.n_sheets},
                  {"noise_sigma", c.phantom.noise_sigma}};
  j["simulate"] = {{"factor", c.sim.factor},
                   {"blur_fwhm_slices", c.sim.blur_fwhm_slices},
                   {"noise_sigma", c.sim.noise_sigma},
                   {"slice_axis", c.sim.slice_axis}};
  j["schedule"] = {{"s_offset", c.sched.s_offset},
                   {"clip_alpha_min", c.sched.clip_alpha_min}};
  j["denoiser"] = json::parse(iqt::denoiser_config_to_json(c.den));
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"steps", c.train.steps},
                {"seed", c.train.seed},
                {"parametrization",
                 iqt::pred_kind_to_string(c.train.parametrization)},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"adam_eps", c.train.adam_eps},
                {"log_every", c.train.log_every},
                {"grad_accum", c.train.grad_accum},
                {"augment", c.train.augment}};
  j["sampler"] = {{"timesteps", c.sampler.timesteps},
                  {"seed", c.sampler.seed},
                  {"clip_x", c.sampler.clip_x}};
  j["metrics"] = {{"scales", c.ssim.scales},
                  {"range", c.ssim.range},
                  {"window", c.ssim.window},
                  {"window_sigma", c.ssim.window_sigma}};
  j["gradcheck"] = {{"eps_fd", c.gc_eps_fd},
                    {"min_per_class", c.gc_min_per_class},
                    {"corrupt_param", c.gc_corrupt},
                    {"tol", c.gc_tol}};
  j["ablation"] = {{"steps", c.ablation_steps}};
  j["paths"] = {{"pred", c.path_pred},
                {"ref", c.path_ref},
                {"checkpoint", c.path_checkpoint}};
  return j;
}

void apply_override(json& j, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must be key=value: " + kv);
  std::string path = kv.substr(0, eq), raw = kv.substr(eq + 1);
  json val;
  try {
    val = json::parse(raw);
  } catch (const json::exception&) {
    val = raw;  // unquoted strings
  }
  json* cur = &j;
  size_t pos = 0;
  while (true) {
    auto dot = path.find('.', pos);
    std::string key = path.substr(pos, dot - pos);
    if (key.empty()) throw ConfigError("bad override path: " + path);
    if (dot == std::string::npos) {
      (*cur)[key] = val;
      return;
    }
    cur = &(*cur)[key];
    pos = dot + 1;
  }
}

std::string fnv1a_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw iqt::VolumeIoError("cannot read " + p.string());
  std::uint64_t h = 1469598103934665603ULL;
  char buf[65536];
  while (f.read(buf, sizeof buf) || f.gcount())
    for (std::streamsize i = 0; i < f.gcount(); ++i) {
      h ^= (unsigned char)buf[i];
      h *= 1099511628211ULL;
    }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", (unsigned long long)h);
  return hex;
}

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw iqt::VolumeIoError("cannot write " + p.string());
  f << s;
}

void emit_resolved(const RunConfig& c, const std::string& cmd) {
  write_text(fs::path(c.out) / ("resolved_config." + cmd + ".json"),
             resolved_json(c).dump(2) + "\n");
}

json read_json_file(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw iqt::VolumeIoError("cannot read " + p.string());
  return json::parse(f);
}

std::string split_of(int i, int n) {
  // 60/20/20 in corpus order
  int n_train = (int)std::lround(0.6 * n);
  int n_val = (int)std::lround(0.2 * n);
  if (i < n_train) return "train";
  if (i < n_train + n_val) return "val";
  return "test";
}

std::string vol_name(int i) {
  char b[32];
  std::snprintf(b, sizeof b, "vol_%03d.iqtv", i);
  return b;
}

int cmd_phantom(const RunConfig& c) {
  emit_resolved(c, "phantom");
  fs::create_directories(fs::path(c.out) / "hf");
  ordered_json manifest;
  manifest["seed"] = c.seed;
  manifest["split_fractions"] = {0.6, 0.2, 0.2};
  manifest["volumes"] = json::array();
  for (int i = 0; i < c.phantom_n; ++i) {
    iqt::PhantomSpec spec = c.phantom;
    spec.seed = c.seed + (std::uint64_t)i;
    iqt::Volume v = iqt::generate_phantom(spec);
    std::string rel = "hf/" + vol_name(i);
    fs::path p = fs::path(c.out) / rel;
    iqt::save_volume(v, p.string());
    manifest["volumes"].push_back({{"path", rel},
                                   {"seed", spec.seed},
                                   {"checksum", fnv1a_file(p)},
                                   {"split", split_of(i, c.phantom_n)}});
  }
  write_text(fs::path(c.out) / "phantom_manifest.json",
             manifest.dump(2) + "\n");
  std::cout << "wrote " << c.phantom_n << " phantoms to " << c.out << "/hf\n";
  return 0;
}

int cmd_simulate(const RunConfig& c) {
  emit_resolved(c, "simulate");
  json pm = read_json_file(fs::path(c.out) / "phantom_manifest.json");
  fs::create_directories(fs::path(c.out) / "lf");
  ordered_json manifest;
  manifest["factor"] = c.sim.factor;
  manifest["pairs"] = json::array();
  int i = 0;
  for (const auto& e : pm.at("volumes")) {
    std::string hf_rel = e.at("path");
    iqt::Volume hf = iqt::load_volume((fs::path(c.out) / hf_rel).string());
    iqt::DecimationSpec spec = c.sim;
    spec.seed = c.seed + 1000 + (std::uint64_t)i;
    iqt::Volume lf = iqt::decimate(hf, spec);
    std::string lf_rel = "lf/" + vol_name(i);
    fs::path lp = fs::path(c.out) / lf_rel;
    iqt::save_volume(lf, lp.string());
    double range = (double)hf.hi - (double)hf.lo;
    bool inf = false;
    double p = iqt::psnr(lf, hf, range > 0 ? range : 1.0, &inf);
    manifest["pairs"].push_back({{"hf", hf_rel},
                                 {"lf", lf_rel},
                                 {"split", e.at("split")},
                                 {"psnr_lf_hf", inf ? 1e9 : p},
                                 {"lf_checksum", fnv1a_file(lp)}});
    ++i;
  }
  write_text(fs::path(c.out) / "pair_manifest.json", manifest.dump(2) + "\n");
  std::cout << "simulated " << i << " low-field volumes (k=" << c.sim.factor
            << ")\n";
  return 0;
}

std::vector<std::pair<iqt::Volume, iqt::Volume>> load_pairs(
    const RunConfig& c, const std::string& split) {
  json pm = read_json_file(fs::path(c.out) / "pair_manifest.json");
  std::vector<std::pair<iqt::Volume, iqt::Volume>> out;
  for (const auto& e : pm.at("pairs")) {
    if (e.at("split") != split) continue;
    iqt::Volume hf =
        iqt::load_volume((fs::path(c.out) / e.at("hf").get<std::string>()).string());
    iqt::Volume lf =
        iqt::load_volume((fs::path(c.out) / e.at("lf").get<std::string>()).string());
    out.emplace_back(iqt::normalize(hf), iqt::normalize(lf));
  }
  return out;
}

int cmd_train(const RunConfig& c) {
  emit_resolved(c, "train");
  auto train_pairs = load_pairs(c, "train");
  auto val_pairs = load_pairs(c, "val");
  if (train_pairs.empty())
    throw ConfigError("train: no volumes in the train split");

  fs::path log_path = fs::path(c.out) / "train_log.jsonl";
  fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path, std::ios::trunc);
  auto on_log = [&](const iqt::FitLogEntry& e) {
    ordered_json r{{"step", e.step},
                   {"t_wall", e.t_wall},
                   {"train_loss", e.train_loss}};
    if (std::isfinite(e.val_loss)) r["val_loss"] = e.val_loss;
    log << r.dump() << "\n";
    log.flush();
    std::cout << "step " << e.step << "  loss " << e.train_loss;
    if (std::isfinite(e.val_loss)) std::cout << "  val " << e.val_loss;
    std::cout << "\n";
  };
  iqt::FitResult res =
      iqt::fit(train_pairs, val_pairs, c.den, c.train, c.sched, on_log);
  std::string ck_path = c.path_checkpoint.empty()
                            ? (fs::path(c.out) / "checkpoint.iqtc").string()
                            : c.path_checkpoint;
  iqt::save_checkpoint(res.checkpoint, ck_path);
  std::cout << "checkpoint: " << ck_path << "\n";
  return 0;
}

int cmd_enhance(const RunConfig& c) {
  emit_resolved(c, "enhance");
  std::string ck_path = c.path_checkpoint.empty()
                            ? (fs::path(c.out) / "checkpoint.iqtc").string()
                            : c.path_checkpoint;
  iqt::Checkpoint ck = iqt::load_checkpoint(ck_path);
  json pm = read_json_file(fs::path(c.out) / "pair_manifest.json");
  fs::create_directories(fs::path(c.out) / "enhanced");
  ordered_json manifest;
  manifest["checkpoint"] = ck_path;
  manifest["volumes"] = json::array();
  for (const auto& e : pm.at("pairs")) {
    if (e.at("split") != "test") continue;
    std::string lf_rel = e.at("lf");
    iqt::Volume lf = iqt::load_volume((fs::path(c.out) / lf_rel).string());
    iqt::Volume enhanced = iqt::enhance(lf, ck, c.sampler, c.sched);
    std::string out_rel =
        "enhanced/" + fs::path(lf_rel).filename().string();
    fs::path op = fs::path(c.out) / out_rel;
    iqt::save_volume(enhanced, op.string());
    manifest["volumes"].push_back({{"lf", lf_rel},
                                   {"hf", e.at("hf")},
                                   {"enhanced", out_rel},
                                   {"checksum", fnv1a_file(op)}});
    std::cout << "enhanced " << lf_rel << " -> " << out_rel << "\n";
  }
  write_text(fs::path(c.out) / "enhanced_manifest.json",
             manifest.dump(2) + "\n");
  return 0;
}

iqt::Volume apply_affine(const iqt::Volume& v, const iqt::Normalization& a) {
  iqt::Volume out = v;
  for (auto& x : out.data)
    x = std::clamp((float)(a.scale * x + a.offset), -1.f, 1.f);
  out.update_range();
  return out;
}

iqt::MetricsReport compute_report(const iqt::Volume& pred,
                                  const iqt::Volume& ref, const RunConfig& c) {
  iqt::Normalization affine;
  iqt::Volume ref_n = iqt::normalize(ref, &affine);
  iqt::Volume pred_n = apply_affine(pred, affine);
  iqt::MetricsReport r;
  r.psnr_db = iqt::psnr(pred_n, ref_n, c.ssim.range, &r.psnr_infinite);
  r.mssim = iqt::mssim(pred_n, ref_n, c.ssim, &r.mssim_single_scale_fallback);
  iqt::PatchGrid grid = iqt::plan_patch_grid(ref.dims, c.den.patch);
  r.seam_score = iqt::seam_score(pred_n, grid);
  return r;
}

int cmd_evaluate(const RunConfig& c) {
  emit_resolved(c, "evaluate");
  if (!c.path_pred.empty() || !c.path_ref.empty()) {
    if (c.path_pred.empty() || c.path_ref.empty())
      throw ConfigError("evaluate: paths.pred and paths.ref must both be set");
    iqt::Volume pred = iqt::load_volume(c.path_pred);
    iqt::Volume ref = iqt::load_volume(c.path_ref);
    iqt::MetricsReport r = compute_report(pred, ref, c);
    std::string js = r.to_json();
    write_text(fs::path(c.out) / "report.json", js + "\n");
    std::cout << js << "\n";
    return 0;
  }
  json em = read_json_file(fs::path(c.out) / "enhanced_manifest.json");
  ordered_json rows = json::array();
  std::vector<double> psnrs, mssims;
  for (const auto& e : em.at("volumes")) {
    iqt::Volume pred = iqt::load_volume(
        (fs::path(c.out) / e.at("enhanced").get<std::string>()).string());
    iqt::Volume ref = iqt::load_volume(
        (fs::path(c.out) / e.at("hf").get<std::string>()).string());
    iqt::MetricsReport r = compute_report(pred, ref, c);
    rows.push_back({{"volume", e.at("hf")},
                    {"report", json::parse(r.to_json())}});
    psnrs.push_back(r.psnr_db);
    mssims.push_back(r.mssim);
  }
  if (rows.empty()) throw ConfigError("evaluate: nothing to evaluate");
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  ordered_json out{{"volumes", rows},
                   {"median_psnr_db", median(psnrs)},
                   {"median_mssim", median(mssims)}};
  write_text(fs::path(c.out) / "report.json", out.dump(2) + "\n");
  std::cout << out.dump(2) << "\n";
  return 0;
}

iqt::DenoiserConfig gradcheck_config() {
  iqt::DenoiserConfig cfg;
  cfg.patch = 8;
  cfg.filters = {4, 8};
  cfg.token_size = {2, 1};
  cfg.heads = 1;
  cfg.embed_dim = 16;
  cfg.dfe_depth = 2;
  return cfg;
}

int cmd_gradcheck(const RunConfig& c) {
  emit_resolved(c, "gradcheck");
  iqt::GradCheckReport rep = iqt::gradient_check(
      gradcheck_config(), c.gc_eps_fd, c.gc_min_per_class, c.gc_corrupt,
      c.seed + 7);
  ordered_json j;
  j["checked"] = rep.entries.size();
  for (const auto& [cls, err] : rep.max_rel_err_by_class)
    j["max_rel_err_by_class"][cls] = err;
  j["max_rel_err"] = rep.max_rel_err;
  j["tol"] = c.gc_tol;
  j["pass"] = rep.max_rel_err <= c.gc_tol;
  write_text(fs::path(c.out) / "gradcheck.json", j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return rep.max_rel_err <= c.gc_tol ? 0 : 3;
}

int cmd_ablation(const RunConfig& c) {
  emit_resolved(c, "ablation");
  auto train_pairs = load_pairs(c, "train");
  auto val_pairs = load_pairs(c, "val");
  if (train_pairs.empty())
    throw ConfigError("ablation: no volumes in the train split");

  json pm = read_json_file(fs::path(c.out) / "pair_manifest.json");
  struct Row {
    const char* name;
    bool dfe, cb;
  };
  const Row rows[] = {{"dfe:x cb:x", false, false},
                      {"dfe:o cb:x", true, false},
                      {"dfe:o cb:o", true, true}};

  ordered_json table = json::array();
  std::cout << "module combo     params      PSNR(dB)   MSSIM     seam\n";
  for (const Row& row : rows) {
    iqt::DenoiserConfig cfg = c.den;
    cfg.dfe_depth = row.dfe ? c.den.dfe_depth : 0;
    cfg.use_cross_batch = row.cb;
    iqt::TrainConfig tc = c.train;
    tc.steps = c.ablation_steps;
    std::int64_t n_params = iqt::param_count(iqt::init_params(cfg, 0));
    iqt::FitResult fr = iqt::fit(train_pairs, val_pairs, cfg, tc, c.sched);

    std::vector<double> psnrs, mssims, seams;
    for (const auto& e : pm.at("pairs")) {
      if (e.at("split") != "test") continue;
      iqt::Volume lf = iqt::load_volume(
          (fs::path(c.out) / e.at("lf").get<std::string>()).string());
      iqt::Volume hf = iqt::load_volume(
          (fs::path(c.out) / e.at("hf").get<std::string>()).string());
      iqt::Volume enhanced = iqt::enhance(lf, fr.checkpoint, c.sampler, c.sched);
      iqt::MetricsReport r = compute_report(enhanced, hf, c);
      psnrs.push_back(r.psnr_db);
      mssims.push_back(r.mssim);
      seams.push_back(r.seam_score);
    }
    auto mean = [](const std::vector<double>& v) {
      double s = 0;
      for (double x : v) s += x;
      return v.empty() ? 0.0 : s / (double)v.size();
    };
    ordered_json rj{{"modules", row.name},
                    {"dfe", row.dfe},
                    {"cross_batch", row.cb},
                    {"num_params", n_params},
                    {"psnr_db", mean(psnrs)},
                    {"mssim", mean(mssims)},
                    {"seam_score", mean(seams)}};
    table.push_back(rj);
    std::printf("%-15s %9lld   %8.3f   %7.4f   %6.4f\n", row.name,
                (long long)n_params, mean(psnrs), mean(mssims), mean(seams));
  }
  write_text(fs::path(c.out) / "ablation.json", table.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D conditional diffusion image quality transfer"};
  app.require_subcommand(1);
  std::string config_path, out_override;
  std::uint64_t seed_override = 0;
  bool seed_set = false;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed_override, "master seed")
      ->each([&](const std::string&) { seed_set = true; });
  app.add_option("--out", out_override, "output directory");
  app.add_option("--override", overrides, "dot-path key=value overrides");

  const char* names[] = {"phantom", "simulate", "train",    "enhance",
                         "evaluate", "gradcheck", "ablation"};
  for (const char* n : names) app.add_subcommand(n);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

#ifdef _OPENMP
  if (const char* t = std::getenv("IQT_THREADS")) {
    int n = std::atoi(t);
    if (n > 0) omp_set_num_threads(n);
  }
#endif

  std::string cmd = app.get_subcommands().front()->get_name();
  try {
    json doc = json::object();
    if (!config_path.empty()) doc = read_json_file(config_path);
    for (const auto& ov : overrides) apply_override(doc, ov);
    if (seed_set) doc["seed"] = seed_override;
    if (!out_override.empty()) doc["out"] = out_override;
    RunConfig cfg;
    try {
      cfg = parse_config(doc);
      cfg.den.validate();
      cfg.train.validate();
    } catch (const std::exception& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return 2;
    }

    if (cmd == "phantom") return cmd_phantom(cfg);
    if (cmd == "simulate") return cmd_simulate(cfg);
    if (cmd == "train") return cmd_train(cfg);
    if (cmd == "enhance") return cmd_enhance(cfg);
    if (cmd == "evaluate") return cmd_evaluate(cfg);
    if (cmd == "gradcheck") return cmd_gradcheck(cfg);
    if (cmd == "ablation") return cmd_ablation(cfg);
    std::cerr << "unknown command\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const std::domain_error& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const iqt::VolumeFormatError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const iqt::VolumeValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
