#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "iqt/checkpoint.hpp"
#include "iqt/metrics.hpp"
#include "iqt/sampling.hpp"
#include "iqt/simulator.hpp"
#include "iqt/training.hpp"
#include "iqt/volume.hpp"

namespace py = pybind11;
using namespace iqt;

namespace {

Volume volume_from_array(py::array_t<float, py::array::c_style | py::array::forcecast> a) {
  if (a.ndim() != 3) throw std::invalid_argument("expected a 3D array");
  Volume v;
  v.dims = {(int)a.shape(0), (int)a.shape(1), (int)a.shape(2)};
  v.data.assign(a.data(), a.data() + a.size());
  v.update_range();
  return v;
}

py::array_t<float> array_from_volume(const Volume& v) {
  py::array_t<float> a({v.dims[0], v.dims[1], v.dims[2]});
  std::copy(v.data.begin(), v.data.end(), a.mutable_data());
  return a;
}

DenoiserConfig config_from_json_str(const std::string& js) {
  DenoiserConfig cfg = denoiser_config_from_json(js);
  cfg.validate();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_iqt3d, m) {
  m.doc() = "3D conditional diffusion image quality transfer (core bindings)";

  m.def("load_volume",
        [](const std::string& p) { return array_from_volume(load_volume(p)); },
        py::arg("path"));
  m.def("save_volume",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> a,
           const std::string& p) { save_volume(volume_from_array(a), p); },
        py::arg("array"), py::arg("path"));

  m.def("generate_phantom",
        [](std::uint64_t seed, std::vector<int> dims, int n_ellipsoids,
           int n_sheets, float noise_sigma) {
          if (dims.size() != 3) throw std::invalid_argument("dims needs 3 ints");
          PhantomSpec spec;
          spec.seed = seed;
          spec.dims = {dims[0], dims[1], dims[2]};
          spec.n_ellipsoids = n_ellipsoids;
          spec.n_sheets = n_sheets;
          spec.noise_sigma = noise_sigma;
          return array_from_volume(generate_phantom(spec));
        },
        py::arg("seed") = 0,
        py::arg("dims") = std::vector<int>{48, 48, 48},
        py::arg("n_ellipsoids") = 6, py::arg("n_sheets") = 4,
        py::arg("noise_sigma") = 0.01f);

  m.def("decimate",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> a,
           int factor, double blur_fwhm_slices, double noise_sigma,
           std::uint64_t seed, int slice_axis) {
          DecimationSpec spec;
          spec.factor = factor;
          spec.blur_fwhm_slices = blur_fwhm_slices;
          spec.noise_sigma = noise_sigma;
          spec.seed = seed;
          spec.slice_axis = slice_axis;
          return array_from_volume(decimate(volume_from_array(a), spec));
        },
        py::arg("array"), py::arg("factor") = 4,
        py::arg("blur_fwhm_slices") = -1.0, py::arg("noise_sigma") = 0.02,
        py::arg("seed") = 0, py::arg("slice_axis") = 0);

  m.def("cubic_baseline",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> a,
           int k, int slice_axis) {
          auto r = interpolation_baseline(volume_from_array(a), k, slice_axis);
          return py::make_tuple(array_from_volume(r.volume), r.linear_fallback);
        },
        py::arg("array"), py::arg("k"), py::arg("slice_axis") = 0);

  m.def("normalize",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> a) {
          Normalization affine;
          Volume n = normalize(volume_from_array(a), &affine);
          return py::make_tuple(array_from_volume(n), affine.scale,
                                affine.offset);
        },
        py::arg("array"));

  m.def("alpha_sigma",
        [](double t, double s_offset, double clip_alpha_min) {
          NoiseSchedule sched{s_offset, clip_alpha_min};
          AlphaSigma as = alpha_sigma(sched, t);
          return py::make_tuple(as.alpha, as.sigma);
        },
        py::arg("t"), py::arg("s_offset") = 0.008,
        py::arg("clip_alpha_min") = 1e-5);

  m.def("posterior_params",
        [](double s, double t, double s_offset, double clip_alpha_min) {
          NoiseSchedule sched{s_offset, clip_alpha_min};
          PosteriorParams p = posterior_params(sched, s, t);
          return py::make_tuple(p.mean_coeff_xt, p.mean_coeff_x, p.sigma2_q);
        },
        py::arg("s"), py::arg("t"), py::arg("s_offset") = 0.008,
        py::arg("clip_alpha_min") = 1e-5);

  m.def("psnr",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> a,
           py::array_t<float, py::array::c_style | py::array::forcecast> b,
           double range) {
          bool inf = false;
          double v = psnr(volume_from_array(a), volume_from_array(b), range, &inf);
          return py::make_tuple(v, inf);
        },
        py::arg("pred"), py::arg("ref"), py::arg("range") = 2.0);

  m.def("mssim",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> a,
           py::array_t<float, py::array::c_style | py::array::forcecast> b,
           double range) {
          SsimOptions o;
          o.range = range;
          return mssim(volume_from_array(a), volume_from_array(b), o);
        },
        py::arg("pred"), py::arg("ref"), py::arg("range") = 2.0);

  m.def("seam_score",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> a,
           int patch) {
          Volume v = volume_from_array(a);
          return seam_score(v, plan_patch_grid(v.dims, patch));
        },
        py::arg("array"), py::arg("patch") = 16);

  m.def("param_count",
        [](const std::string& config_json) {
          return param_count(init_params(config_from_json_str(config_json), 0));
        },
        py::arg("config_json"));

  m.def("default_config_json",
        []() { return denoiser_config_to_json(DenoiserConfig{}); });

  m.def("fit",
        [](std::vector<py::array_t<float, py::array::c_style | py::array::forcecast>> hf,
           std::vector<py::array_t<float, py::array::c_style | py::array::forcecast>> lf,
           const std::string& config_json, int steps, double learning_rate,
           std::uint64_t seed, const std::string& checkpoint_path) {
          if (hf.size() != lf.size() || hf.empty())
            throw std::invalid_argument("need matching non-empty hf/lf lists");
          std::vector<std::pair<Volume, Volume>> pairs;
          for (size_t i = 0; i < hf.size(); ++i)
            pairs.emplace_back(normalize(volume_from_array(hf[i])),
                               normalize(volume_from_array(lf[i])));
          DenoiserConfig cfg = config_from_json_str(config_json);
          TrainConfig tc;
          tc.steps = steps;
          tc.learning_rate = learning_rate;
          tc.seed = seed;
          FitResult r = fit(pairs, {}, cfg, tc, NoiseSchedule{});
          save_checkpoint(r.checkpoint, checkpoint_path);
          std::vector<double> losses;
          for (const auto& e : r.log) losses.push_back(e.train_loss);
          return losses;
        },
        py::arg("hf"), py::arg("lf"), py::arg("config_json"),
        py::arg("steps") = 100, py::arg("learning_rate") = 1e-4,
        py::arg("seed") = 0, py::arg("checkpoint_path") = "checkpoint.iqtc");

  m.def("enhance",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> lf,
           const std::string& checkpoint_path, int timesteps,
           std::uint64_t seed) {
          Checkpoint ck = load_checkpoint(checkpoint_path);
          SamplerConfig sc;
          sc.timesteps = timesteps;
          sc.seed = seed;
          return array_from_volume(
              enhance(volume_from_array(lf), ck, sc, NoiseSchedule{}));
        },
        py::arg("lf"), py::arg("checkpoint_path"), py::arg("timesteps") = 20,
        py::arg("seed") = 0);

  m.def("gradient_check_max_err",
        [](int min_per_class, std::uint64_t seed) {
          DenoiserConfig cfg;
          cfg.patch = 8;
          cfg.filters = {4, 8};
          cfg.token_size = {2, 1};
          cfg.heads = 1;
          cfg.embed_dim = 16;
          cfg.dfe_depth = 2;
          return gradient_check(cfg, 1e-4, min_per_class, "", seed).max_rel_err;
        },
        py::arg("min_per_class") = 2, py::arg("seed") = 7);
}
