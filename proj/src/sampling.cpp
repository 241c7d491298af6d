#include "iqt/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "iqt/rng.hpp"
#include "iqt/training.hpp"

namespace iqt {

namespace {

Tensor<float> stack2(const Tensor<float>& a, const Tensor<float>& b) {
  const int q = a.shape[0];
  Tensor<float> out({2, q, q, q});
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.numel());
  return out;
}

Tensor<float> center3(const Tensor<float>& halo_patch, int p) {
  const int q = halo_patch.shape[0];
  const int w = (q - p) / 2;
  Tensor<float> out({p, p, p});
  for (int z = 0; z < p; ++z)
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x)
        out.v[(size_t)(((std::int64_t)z * p + y) * p + x)] =
            halo_patch.v[(size_t)(((std::int64_t)(z + w) * q + y + w) * q + x + w)];
  return out;
}

}  // namespace

DenoiserFn make_network_denoiser(const Checkpoint& ck,
                                 const NoiseSchedule& sched) {
  auto cfg = ck.config;
  auto params = std::make_shared<ParamStore>(ck.params);
  PredKind kind = ck.train.parametrization;
  return [cfg, params, kind, sched](const std::vector<Tensor<float>>& inputs,
                                    double t) {
    Graph<float> g;
    DenoiserNet<float> net(g, *params, cfg);
    std::vector<Graph<float>::Id> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) ids.push_back(g.input(in));
    auto preds = net.forward(ids, t);

    const int p = cfg.patch;
    std::vector<Tensor<float>> out;
    out.reserve(preds.size());
    for (size_t m = 0; m < preds.size(); ++m) {
      Tensor<float> pred = g.val(preds[m]);
      if (kind != PredKind::X) {
        // the first input channel is x_t with halo; crop its center
        const int q = inputs[m].shape[1];
        Tensor<float> xt_halo({q, q, q});
        std::copy(inputs[m].v.begin(), inputs[m].v.begin() + xt_halo.numel(),
                  xt_halo.v.begin());
        Tensor<float> xt = center3(xt_halo, p);
        xt.shape = {1, p, p, p};
        Prediction<float> pr{kind, std::move(pred)};
        pred = convert(pr, PredKind::X, xt, t, sched).tensor;
      }
      out.push_back(std::move(pred));
    }
    return out;
  };
}

Volume sample_volume(const Volume& lf_normalized, const DenoiserConfig& cfg,
                     const DenoiserFn& denoise, const SamplerConfig& sc,
                     const NoiseSchedule& sched) {
  if (sc.timesteps < 1)
    throw ScheduleDomainError("sampler needs at least one timestep");
  const int p = cfg.patch;
  const int w_h = cfg.effective_halo();
  const int members = cfg.group_size();

  PatchGrid grid = plan_patch_grid(lf_normalized.dims, p);
  Volume lf_padded = reflect_pad(lf_normalized, grid);
  std::vector<PatchGroup> groups;
  if (members == 8) {
    groups = make_groups(grid);
  } else {
    for (int id = 0; id < grid.n_patches(); ++id) {
      PatchGroup g;
      g.member_ids.fill(id);
      g.duplicate.fill(true);
      g.duplicate[0] = false;
      g.group_origin = grid.patch_coord(id);
      groups.push_back(g);
    }
  }

  // initial state: pure noise at t = 1
  Volume x = lf_padded;
  {
    Rng rng = Rng::stream(sc.seed, 0x171f);
    for (auto& v : x.data) v = (float)rng.normal();
    x.lo = -10.f;
    x.hi = 10.f;
  }

  const int T = sc.timesteps;
  std::vector<Tensor<float>> final_xhat((size_t)grid.n_patches());

  for (int step = 0; step < T; ++step) {
    const double t = (double)(T - step) / T;
    const double s = (double)(T - step - 1) / T;
    const bool last = step == T - 1;
    PosteriorParams pq{};
    if (!last) pq = posterior_params(sched, s, t);

    Volume x_next = x;  // lockstep: all groups read x, write x_next
    for (size_t gi = 0; gi < groups.size(); ++gi) {
      const PatchGroup& group = groups[gi];
      // duplicate slots repeat a distinct patch verbatim, so forwarding them
      // is redundant; attention pools over the distinct members (matching
      // training)
      std::vector<int> live;
      for (int m = 0; m < members; ++m)
        if (!group.duplicate[(size_t)m]) live.push_back(m);
      std::vector<Tensor<float>> inputs;
      inputs.reserve(live.size());
      for (int m : live) {
        int pid = group.member_ids[(size_t)m];
        inputs.push_back(stack2(gather_halo(x, grid, pid, w_h),
                                gather_halo(lf_padded, grid, pid, w_h)));
      }
      std::vector<Tensor<float>> xhat = denoise(inputs, t);
      if (xhat.size() != live.size())
        throw ShapeError("denoiser returned wrong member count");

      for (size_t li = 0; li < live.size(); ++li) {
        int m = live[li];
        int pid = group.member_ids[(size_t)m];
        Tensor<float>& xh = xhat[li];
        if (xh.numel() != (std::int64_t)p * p * p)
          throw ShapeError("denoiser returned wrong patch size");
        if (sc.clip_x)
          for (auto& v : xh.v) v = std::clamp(v, -1.f, 1.f);
        if (last) {
          xh.shape = {p, p, p};
          final_xhat[(size_t)pid] = xh;
          continue;
        }
        // ancestral update on the patch center
        auto c = grid.patch_coord(pid);
        Rng zrng = Rng::stream(sc.seed, 0xa9ce, (std::uint64_t)step,
                               (std::uint64_t)pid);
        const double sig_q = std::sqrt(std::max(0.0, pq.sigma2_q));
        for (int z = 0; z < p; ++z)
          for (int y = 0; y < p; ++y)
            for (int xx = 0; xx < p; ++xx) {
              float xt_val = x.at(c[0] * p + z, c[1] * p + y, c[2] * p + xx);
              double mu = pq.mean_coeff_xt * xt_val +
                          pq.mean_coeff_x *
                              xh.v[(size_t)(((std::int64_t)z * p + y) * p + xx)];
              x_next.at(c[0] * p + z, c[1] * p + y, c[2] * p + xx) =
                  (float)(mu + sig_q * zrng.normal());
            }
      }
    }
    if (!last) x = std::move(x_next);
  }

  Volume out = stitch(final_xhat, grid);
  out.spacing = lf_normalized.spacing;
  out.update_range();
  return out;
}

Volume enhance(const Volume& lf, const Checkpoint& ck, const SamplerConfig& sc,
               const NoiseSchedule& sched) {
  Normalization affine;
  Volume lf_n = normalize(lf, &affine);
  DenoiserFn fn = make_network_denoiser(ck, sched);
  Volume out_n = sample_volume(lf_n, ck.config, fn, sc, sched);
  Volume out = denormalize(out_n, affine);
  out.spacing = lf.spacing;
  return out;
}

}  // namespace iqt
