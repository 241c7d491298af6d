#include "iqt/training.hpp"

#include <chrono>
#include <cmath>

#include "iqt/rng.hpp"

namespace iqt {

double group_loss(const std::vector<Tensor<float>>& targets,
                  const std::vector<Tensor<float>>& preds) {
  if (targets.size() != preds.size())
    throw ShapeError("group_loss: member count mismatch");
  double acc = 0;
  std::int64_t n = 0;
  for (size_t m = 0; m < targets.size(); ++m) {
    if (targets[m].shape != preds[m].shape)
      throw ShapeError("group_loss: patch shape mismatch");
    for (std::int64_t i = 0; i < targets[m].numel(); ++i) {
      double d = (double)targets[m][i] - (double)preds[m][i];
      acc += d * d;
    }
    n += targets[m].numel();
  }
  return acc / (double)n;
}

Checkpoint TrainState::to_checkpoint(std::uint64_t rng_state) const {
  Checkpoint ck;
  ck.config = config;
  ck.train = train;
  ck.params = params;
  ck.adam_m = adam_m;
  ck.adam_v = adam_v;
  ck.step = step;
  ck.rng_state = rng_state;
  return ck;
}

TrainState TrainState::from_checkpoint(const Checkpoint& ck) {
  TrainState st;
  st.config = ck.config;
  st.train = ck.train;
  st.params = ck.params;
  st.adam_m = ck.adam_m;
  st.adam_v = ck.adam_v;
  st.step = ck.step;
  return st;
}

TrainState init_train_state(const DenoiserConfig& cfg, const TrainConfig& tc) {
  tc.validate();
  TrainState st;
  st.config = cfg;
  st.train = tc;
  st.params = init_params(cfg, tc.seed);
  for (const auto& [name, t] : st.params) {
    st.adam_m.emplace(name, Tensor<float>(t.shape));
    st.adam_v.emplace(name, Tensor<float>(t.shape));
  }
  return st;
}

PreparedVolume prepare_volume(const Volume& hf_normalized,
                              const Volume& lf_normalized, int patch) {
  if (hf_normalized.dims != lf_normalized.dims)
    throw ShapeError("prepare_volume: HF/LF dims mismatch");
  PreparedVolume pv;
  pv.grid = plan_patch_grid(hf_normalized.dims, patch);
  pv.hf_padded = reflect_pad(hf_normalized, pv.grid);
  pv.lf_padded = reflect_pad(lf_normalized, pv.grid);
  pv.groups = make_groups(pv.grid);
  return pv;
}

namespace {

// In-plane dihedral transform: flips and a transpose of the two axes
// perpendicular to the slice axis (axis 0). These commute with the
// slice-direction degradation, so an augmented (hf, lf) pair obeys the same
// conditional distribution as the original. code bits: 1 = flip h, 2 = flip
// w, 4 = swap h/w (only when h == w).
Volume dihedral_in_plane(const Volume& v, int code) {
  const int D = v.dims[0], H = v.dims[1], W = v.dims[2];
  if ((code & 4) && H != W) code &= 3;
  Volume out = v;
  if (code & 4) std::swap(out.spacing[1], out.spacing[2]);
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int a = (code & 4) ? x : y;
        int b = (code & 4) ? y : x;
        if (code & 1) a = H - 1 - a;
        if (code & 2) b = W - 1 - b;
        out.at(z, y, x) = v.at(z, a, b);
      }
  return out;
}

Volume crop_volume(const Volume& v, std::array<int, 3> o,
                   std::array<int, 3> cs) {
  Volume out;
  out.dims = cs;
  out.spacing = v.spacing;
  out.data.resize((size_t)out.numel());
  for (int z = 0; z < cs[0]; ++z)
    for (int y = 0; y < cs[1]; ++y)
      for (int x = 0; x < cs[2]; ++x)
        out.at(z, y, x) = v.at(z + o[0], y + o[1], x + o[2]);
  out.update_range();
  return out;
}

// Noisy volume + per-group graph inputs for one (t, eps) draw.
struct GroupBatch {
  double t;
  std::vector<Tensor<float>> inputs;     // [2, q, q, q] per member
  std::vector<Tensor<float>> x_target;   // [1, p, p, p]
  std::vector<Tensor<float>> xt_center;  // [1, p, p, p]
  std::vector<Tensor<float>> eps_center; // [1, p, p, p]
};

Tensor<float> with_channel(const Tensor<float>& a, const Tensor<float>& b) {
  // stack two [q,q,q] tensors into [2,q,q,q]
  const int q = a.shape[0];
  Tensor<float> out({2, q, q, q});
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.numel());
  return out;
}

Tensor<float> center_of(const Tensor<float>& halo_patch, int p) {
  const int q = halo_patch.shape[0];
  const int w = (q - p) / 2;
  Tensor<float> out({1, p, p, p});
  for (int z = 0; z < p; ++z)
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x)
        out.v[(size_t)(((std::int64_t)z * p + y) * p + x)] =
            halo_patch.v[(size_t)(((std::int64_t)(z + w) * q + y + w) * q + x + w)];
  return out;
}

GroupBatch build_group_batch(const DenoiserConfig& cfg,
                             const PreparedVolume& vol, int group_index,
                             const NoiseSchedule& sched, Rng& rng) {
  const PatchGroup& group = vol.groups.at((size_t)group_index);
  GroupBatch gb;
  gb.t = rng.uniform();

  AlphaSigma as = alpha_sigma(sched, gb.t);
  Volume noisy = vol.hf_padded;
  Volume eps_vol = vol.hf_padded;
  for (size_t i = 0; i < noisy.data.size(); ++i) {
    float e = (float)rng.normal();
    eps_vol.data[i] = e;
    noisy.data[i] = (float)(as.alpha * vol.hf_padded.data[i] + as.sigma * e);
  }
  noisy.lo = -10.f; noisy.hi = 10.f;
  eps_vol.lo = -10.f; eps_vol.hi = 10.f;

  const int w_h = cfg.effective_halo();
  const int p = cfg.patch;
  // duplicate slots (grid padding for odd grids) would repeat the exact same
  // forward pass; the batch keeps only distinct patches and the attention
  // pools over those
  for (int m = 0; m < 8; ++m) {
    if (group.duplicate[(size_t)m]) continue;
    int pid = group.member_ids[(size_t)m];
    Tensor<float> xt_halo = gather_halo(noisy, vol.grid, pid, w_h);
    Tensor<float> lf_halo = gather_halo(vol.lf_padded, vol.grid, pid, w_h);
    gb.inputs.push_back(with_channel(xt_halo, lf_halo));
    gb.xt_center.push_back(center_of(xt_halo, p));
    gb.eps_center.push_back(center_of(gather_halo(eps_vol, vol.grid, pid, w_h), p));
    Tensor<float> x_halo = gather_halo(vol.hf_padded, vol.grid, pid, w_h);
    gb.x_target.push_back(center_of(x_halo, p));
  }
  return gb;
}

// Build the graph loss for one group in the configured parametrization.
template <class T>
typename Graph<T>::Id group_loss_node(Graph<T>& g, DenoiserNet<T>& net,
                                      const DenoiserConfig& cfg,
                                      const GroupBatch& gb, PredKind kind,
                                      const NoiseSchedule& sched) {
  AlphaSigma as = alpha_sigma(sched, gb.t);
  const bool grouped = cfg.use_cross_batch;
  std::vector<typename Graph<T>::Id> preds;
  if (grouped) {
    std::vector<typename Graph<T>::Id> inputs;
    for (const auto& in : gb.inputs)
      inputs.push_back(g.input(in.template cast<T>()));
    preds = net.forward(inputs, gb.t);
  } else {
    for (const auto& in : gb.inputs) {
      std::vector<typename Graph<T>::Id> one{g.input(in.template cast<T>())};
      preds.push_back(net.forward(one, gb.t)[0]);
    }
  }
  std::vector<typename Graph<T>::Id> losses;
  for (size_t m = 0; m < preds.size(); ++m) {
    typename Graph<T>::Id pred = preds[m];
    Tensor<T> target;
    switch (kind) {
      case PredKind::X:
        target = gb.x_target[m].template cast<T>();
        break;
      case PredKind::Epsilon: {
        // eps_hat = (x_t - alpha * x_hat) / sigma
        pred = g.affine_const(pred, -as.alpha / as.sigma,
                              gb.xt_center[m].template cast<T>(),
                              1.0 / as.sigma);
        target = gb.eps_center[m].template cast<T>();
        break;
      }
      case PredKind::V: {
        // v_hat = (alpha x_t - x_hat) / sigma  (uses alpha^2 + sigma^2 = 1)
        pred = g.affine_const(pred, -1.0 / as.sigma,
                              gb.xt_center[m].template cast<T>(),
                              as.alpha / as.sigma);
        target = Tensor<T>(gb.x_target[m].shape);
        for (std::int64_t i = 0; i < target.numel(); ++i)
          target[i] = (T)(as.alpha * (double)gb.eps_center[m][i] -
                          as.sigma * (double)gb.x_target[m][i]);
        break;
      }
    }
    losses.push_back(g.mse(pred, target));
  }
  return g.scale(g.add_scalars(losses), 1.0 / (double)losses.size());
}

double compute_grads(TrainState& state, const PreparedVolume& vol,
                     int group_index, const NoiseSchedule& sched, Rng& rng,
                     ParamStore& grads) {
  GroupBatch gb = build_group_batch(state.config, vol, group_index, sched, rng);
  Graph<float> g;
  DenoiserNet<float> net(g, state.params, state.config);
  auto loss = group_loss_node(g, net, state.config, gb,
                              state.train.parametrization, sched);
  double loss_value = (double)g.val(loss)[0];
  if (!std::isfinite(loss_value))
    throw CheckpointError("non-finite loss at step " +
                          std::to_string(state.step) + " (t=" +
                          std::to_string(gb.t) + ")");
  g.backward(loss);
  for (const auto& [name, id] : net.binder().bound()) {
    auto it = grads.find(name);
    if (it == grads.end())
      grads.emplace(name, g.grad(id));
    else
      for (size_t i = 0; i < it->second.v.size(); ++i)
        it->second.v[i] += g.grad(id).v[i];
  }
  return loss_value;
}

void adam_update(TrainState& state, const ParamStore& grads) {
  const auto& tc = state.train;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(tc.beta1, (double)state.step);
  const double bc2 = 1.0 - std::pow(tc.beta2, (double)state.step);
  for (auto& [name, g] : grads) {
    auto& p = state.params.at(name);
    auto& m = state.adam_m.at(name);
    auto& v = state.adam_v.at(name);
    for (size_t i = 0; i < p.v.size(); ++i) {
      double gi = (double)g.v[i];
      double mi = tc.beta1 * (double)m.v[i] + (1.0 - tc.beta1) * gi;
      double vi = tc.beta2 * (double)v.v[i] + (1.0 - tc.beta2) * gi * gi;
      m.v[i] = (float)mi;
      v.v[i] = (float)vi;
      double mhat = mi / bc1, vhat = vi / bc2;
      p.v[i] = (float)((double)p.v[i] -
                       tc.learning_rate * mhat / (std::sqrt(vhat) + tc.adam_eps));
    }
  }
  for (const auto& [name, p] : state.params) {
    for (float x : p.v)
      if (!std::isfinite(x))
        throw CheckpointError("non-finite parameter after update: " + name);
  }
}

}  // namespace

double train_step(TrainState& state, const PreparedVolume& vol, int group_index,
                  const NoiseSchedule& sched) {
  Rng rng = Rng::stream(state.train.seed, 0x57e9, (std::uint64_t)state.step);
  ParamStore grads;
  double loss = compute_grads(state, vol, group_index, sched, rng, grads);
  adam_update(state, grads);
  return loss;
}

double validation_loss(const TrainState& state,
                       const std::vector<PreparedVolume>& vols,
                       const NoiseSchedule& sched, std::uint64_t seed) {
  if (vols.empty()) return std::nan("");
  double acc = 0;
  int n = 0;
  // state must stay untouched; run forward only
  for (size_t vi = 0; vi < vols.size(); ++vi) {
    Rng rng = Rng::stream(seed, 0x7a1, vi);
    GroupBatch gb = build_group_batch(state.config, vols[vi], 0, sched, rng);
    Graph<float> g;
    DenoiserNet<float> net(g, state.params, state.config);
    auto loss = group_loss_node(g, net, state.config, gb,
                                state.train.parametrization, sched);
    acc += (double)g.val(loss)[0];
    ++n;
  }
  return acc / (double)n;
}

FitResult fit(const std::vector<std::pair<Volume, Volume>>& train_pairs,
              const std::vector<std::pair<Volume, Volume>>& val_pairs,
              const DenoiserConfig& cfg, const TrainConfig& tc,
              const NoiseSchedule& sched,
              const std::function<void(const FitLogEntry&)>& on_log) {
  if (train_pairs.empty())
    throw CheckpointError("fit: empty training dataset");
  tc.validate();

  std::vector<PreparedVolume> tv, vv;
  if (!tc.augment)
    for (const auto& [hf, lf] : train_pairs)
      tv.push_back(prepare_volume(hf, lf, cfg.patch));
  for (const auto& [hf, lf] : val_pairs)
    vv.push_back(prepare_volume(hf, lf, cfg.patch));

  TrainState state = init_train_state(cfg, tc);
  Rng sched_rng = Rng::stream(tc.seed, 0x5c4e);
  FitResult res;
  auto t0 = std::chrono::steady_clock::now();

  for (int s = 0; s < tc.steps; ++s) {
    Rng step_rng = Rng::stream(tc.seed, 0x57e9, (std::uint64_t)state.step);
    ParamStore grads;
    double loss_acc = 0;
    for (int a = 0; a < tc.grad_accum; ++a) {
      if (tc.augment) {
        // fresh sample from the augmentation orbit: dihedral transform plus a
        // random crop, so patch content never repeats across steps and the
        // network can only fit the shift-invariant degradation inverse
        const auto& [hf, lf] =
            train_pairs[(size_t)sched_rng.uniform_int(train_pairs.size())];
        const int n_codes = hf.dims[1] == hf.dims[2] ? 8 : 4;
        const int code = (int)sched_rng.uniform_int((std::uint64_t)n_codes);
        std::array<int, 3> cs, o;
        for (int ax = 0; ax < 3; ++ax) {
          cs[(size_t)ax] = std::min(2 * cfg.patch, hf.dims[(size_t)ax]);
          o[(size_t)ax] = (int)sched_rng.uniform_int(
              (std::uint64_t)(hf.dims[(size_t)ax] - cs[(size_t)ax] + 1));
        }
        PreparedVolume pv =
            prepare_volume(crop_volume(dihedral_in_plane(hf, code), o, cs),
                           crop_volume(dihedral_in_plane(lf, code), o, cs),
                           cfg.patch);
        int gi = (int)sched_rng.uniform_int(pv.groups.size());
        loss_acc += compute_grads(state, pv, gi, sched, step_rng, grads);
      } else {
        int vi = (int)sched_rng.uniform_int(tv.size());
        int gi = (int)sched_rng.uniform_int(tv[(size_t)vi].groups.size());
        loss_acc += compute_grads(state, tv[(size_t)vi], gi, sched, step_rng, grads);
      }
    }
    if (tc.grad_accum > 1)
      for (auto& [name, g] : grads)
        for (auto& x : g.v) x /= (float)tc.grad_accum;
    adam_update(state, grads);
    double loss = loss_acc / tc.grad_accum;

    if ((s + 1) % tc.log_every == 0 || s + 1 == tc.steps) {
      FitLogEntry e;
      e.step = state.step;
      e.train_loss = loss;
      e.val_loss = vv.empty() ? std::nan("") : validation_loss(state, vv, sched, tc.seed);
      e.t_wall = std::chrono::duration<double>(
                     std::chrono::steady_clock::now() - t0).count();
      res.log.push_back(e);
      if (on_log) on_log(e);
    }
  }
  res.checkpoint = state.to_checkpoint(sched_rng.state());
  return res;
}

std::string classify_param(const std::string& name) {
  if (name.find("norm") != std::string::npos) return "norm";
  if (name.find(".tb.") != std::string::npos) return "attention";
  if (name.find("temb") != std::string::npos ||
      name.find("film") != std::string::npos)
    return "mlp";
  return "conv";
}

GradCheckReport gradient_check(const DenoiserConfig& cfg, double eps_fd,
                               int min_per_class,
                               const std::string& corrupt_param,
                               std::uint64_t seed) {
  // randomize every tensor (zero-inits included) so all paths carry signal
  ParamStore base = init_params(cfg, seed);
  {
    Rng prng = Rng::stream(seed, 0x9a4d);
    for (auto& [name, t] : base)
      for (auto& x : t.v) x += (float)(0.05 * prng.normal());
  }
  ParamMap<double> params = cast_params<double>(base);

  // synthetic group batch
  const int q = cfg.padded_patch();
  const int p = cfg.patch;
  const int members = cfg.group_size();
  Rng drng = Rng::stream(seed, 0xda7a);
  std::vector<Tensor<double>> inputs;
  std::vector<Tensor<double>> targets;
  for (int m = 0; m < members; ++m) {
    Tensor<double> in({2, q, q, q});
    for (auto& x : in.v) x = 0.5 * drng.normal();
    inputs.push_back(std::move(in));
    Tensor<double> tg({1, p, p, p});
    for (auto& x : tg.v) x = 0.5 * drng.normal();
    targets.push_back(std::move(tg));
  }
  const double t = 0.37;

  auto eval_loss = [&](const ParamMap<double>& pm,
                       std::map<std::string, Tensor<double>>* out_grads) {
    Graph<double> g;
    DenoiserNet<double> net(g, pm, cfg);
    std::vector<typename Graph<double>::Id> in_ids;
    for (const auto& in : inputs) in_ids.push_back(g.input(in));
    auto preds = net.forward(in_ids, t);
    std::vector<typename Graph<double>::Id> losses;
    for (size_t m = 0; m < preds.size(); ++m)
      losses.push_back(g.mse(preds[m], targets[m]));
    auto loss = g.scale(g.add_scalars(losses), 1.0 / (double)losses.size());
    double lv = g.val(loss)[0];
    if (out_grads) {
      g.backward(loss);
      for (const auto& [name, id] : net.binder().bound())
        out_grads->emplace(name, g.grad(id));
    }
    return lv;
  };

  std::map<std::string, Tensor<double>> analytic;
  eval_loss(params, &analytic);
  if (!corrupt_param.empty()) {
    auto it = analytic.find(corrupt_param);
    if (it == analytic.end())
      throw AutodiffError("corrupt_param not found: " + corrupt_param);
    for (auto& x : it->second.v) x += 0.1;
  }

  // pick scalars per class, round-robin over that class's tensors
  std::map<std::string, std::vector<std::string>> by_class;
  for (const auto& [name, t] : analytic)
    by_class[classify_param(name)].push_back(name);

  GradCheckReport report;
  Rng pick = Rng::stream(seed, 0x91c4);
  for (const auto& [cls, names] : by_class) {
    for (int i = 0; i < min_per_class; ++i) {
      // a corrupted parameter is always sampled so the harness provably
      // reacts to a wrong analytic gradient
      const std::string& name =
          (!corrupt_param.empty() && i == 0 &&
           cls == classify_param(corrupt_param))
              ? corrupt_param
              : names[(size_t)pick.uniform_int(names.size())];
      auto& pt = params.at(name);
      std::int64_t idx = (std::int64_t)pick.uniform_int((std::uint64_t)pt.numel());
      double orig = pt[idx];
      pt[idx] = orig + eps_fd;
      double lp = eval_loss(params, nullptr);
      pt[idx] = orig - eps_fd;
      double lm = eval_loss(params, nullptr);
      pt[idx] = orig;
      double numeric = (lp - lm) / (2.0 * eps_fd);
      double an = analytic.at(name)[idx];
      double denom = std::max({std::abs(an), std::abs(numeric), 1e-8});
      double rel = std::abs(an - numeric) / denom;
      report.entries.push_back({name, cls, an, numeric, rel});
      auto& mx = report.max_rel_err_by_class[cls];
      mx = std::max(mx, rel);
      report.max_rel_err = std::max(report.max_rel_err, rel);
    }
  }
  return report;
}

}  // namespace iqt
