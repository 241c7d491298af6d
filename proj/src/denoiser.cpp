#include "iqt/denoiser.hpp"

#include <cmath>

namespace iqt {

void DenoiserConfig::validate() const {
  if (filters.empty()) throw AutodiffError("config: filters empty");
  if ((int)token_size.size() != stages())
    throw AutodiffError("config: token_size must match filter stages");
  if (embed_dim % 2 || embed_dim < 2)
    throw AutodiffError("config: embed_dim must be even");
  if (heads < 1 || embed_dim % heads)
    throw AutodiffError("config: heads must divide embed_dim");
  if (halo != 0 && halo != 4)
    throw AutodiffError("config: halo must be 0 or 4 (two valid residual blocks)");
  if (shuffle_r != 2) throw AutodiffError("config: shuffle factor must be 2");
  const int r3 = shuffle_r * shuffle_r * shuffle_r;
  for (int i = 1; i < stages(); ++i)
    if (filters[(size_t)i] % r3)
      throw AutodiffError("config: filters beyond stage 0 must be divisible by r^3");
  int sp = padded_patch();
  for (int i = 0; i < stages(); ++i) {
    int ts = token_size[(size_t)i];
    if (ts < 1 || sp % ts)
      throw AutodiffError("config: stage " + std::to_string(i) +
                          " spatial extent not divisible by token size");
    if (i == 0) sp = patch;  // halo is consumed inside stage 0
    if (sp % shuffle_r)
      throw AutodiffError("config: stage extent not divisible by shuffle factor");
    sp /= shuffle_r;
  }
  if (sp < 1) throw AutodiffError("config: too many stages for patch size");
}

namespace {

void add_tensor(ParamStore& ps, std::uint64_t seed, const std::string& name,
                std::vector<int> shape, double std_dev) {
  Tensor<float> t(std::move(shape));
  if (std_dev > 0) {
    Rng rng = Rng::stream(seed, detail::fnv1a(name));
    for (auto& x : t.v) x = (float)(std_dev * rng.normal());
  }
  ps.emplace(name, std::move(t));
}

void add_const(ParamStore& ps, const std::string& name, std::vector<int> shape,
               float value) {
  Tensor<float> t(std::move(shape));
  for (auto& x : t.v) x = value;
  ps.emplace(name, std::move(t));
}

void add_res_block(ParamStore& ps, std::uint64_t seed, const std::string& name,
                   int c_in, int c_out, int embed) {
  add_const(ps, name + ".norm1.g", {c_in}, 1.f);
  add_const(ps, name + ".norm1.b", {c_in}, 0.f);
  add_tensor(ps, seed, name + ".conv1.w", {c_out, c_in, 3, 3, 3},
             std::sqrt(2.0 / (c_in * 27.0)));
  add_const(ps, name + ".conv1.b", {c_out}, 0.f);
  // FiLM starts at identity modulation
  add_const(ps, name + ".film.w", {embed, 2 * c_out}, 0.f);
  add_const(ps, name + ".film.b", {2 * c_out}, 0.f);
  add_const(ps, name + ".norm2.g", {c_out}, 1.f);
  add_const(ps, name + ".norm2.b", {c_out}, 0.f);
  // zero-init final conv: the block starts as a scaled skip
  add_const(ps, name + ".conv2.w", {c_out, c_out, 3, 3, 3}, 0.f);
  add_const(ps, name + ".conv2.b", {c_out}, 0.f);
  if (c_in != c_out) {
    add_tensor(ps, seed, name + ".proj.w", {c_out, c_in, 1, 1, 1},
               std::sqrt(1.0 / c_in));
    add_const(ps, name + ".proj.b", {c_out}, 0.f);
  }
}

}  // namespace

ParamStore init_params(const DenoiserConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore ps;
  const int E = cfg.embed_dim;
  const int S = cfg.stages();
  const double lin_std = std::sqrt(1.0 / E);

  add_tensor(ps, seed, "temb.mlp1.w", {E, E}, lin_std);
  add_const(ps, "temb.mlp1.b", {E}, 0.f);
  add_tensor(ps, seed, "temb.mlp2.w", {E, E}, lin_std);
  add_const(ps, "temb.mlp2.b", {E}, 0.f);

  add_tensor(ps, seed, "stem.w", {cfg.filters[0], cfg.in_channels, 1, 1, 1},
             std::sqrt(2.0 / cfg.in_channels));
  add_const(ps, "stem.b", {cfg.filters[0]}, 0.f);

  for (int i = 0; i < S; ++i) {
    const int f = cfg.filters[(size_t)i];
    const int ts = cfg.token_size[(size_t)i];
    const std::string tb = "enc" + std::to_string(i) + ".tb";
    add_tensor(ps, seed, tb + ".tok.dw.w", {f, ts, ts, ts},
               std::sqrt(1.0 / (ts * ts * ts)));
    add_const(ps, tb + ".tok.dw.b", {f}, 0.f);
    add_tensor(ps, seed, tb + ".tok.proj.w", {f, E}, std::sqrt(1.0 / f));
    add_const(ps, tb + ".tok.proj.b", {E}, 0.f);
    if (cfg.use_cross_batch) {
      for (const char* tag : {"q", "k", "v"}) {
        add_tensor(ps, seed, tb + "." + tag + "dw.w", {E, 3, 3, 3},
                   std::sqrt(1.0 / 27.0));
        add_const(ps, tb + "." + std::string(tag) + "dw.b", {E}, 0.f);
      }
    }
    for (const char* tag : {"q", "k", "v", "out"}) {
      add_tensor(ps, seed, tb + "." + tag + ".w", {E, E}, lin_std);
      add_const(ps, tb + "." + std::string(tag) + ".b", {E}, 0.f);
    }
    const int dt = f * ts * ts * ts;
    // zero-init de-tokenizer: the transformer block starts as identity
    add_const(ps, tb + ".detok.w", {E, dt}, 0.f);
    add_const(ps, tb + ".detok.b", {dt}, 0.f);

    add_res_block(ps, seed, "enc" + std::to_string(i) + ".res0", f, f, E);
    add_res_block(ps, seed, "enc" + std::to_string(i) + ".res1", f, f, E);

    const int f_next = cfg.filters[(size_t)std::min(i + 1, S - 1)];
    const int r3 = cfg.shuffle_r * cfg.shuffle_r * cfg.shuffle_r;
    add_tensor(ps, seed, "down" + std::to_string(i) + ".proj.w",
               {f_next, f * r3, 1, 1, 1}, std::sqrt(1.0 / (f * r3)));
    add_const(ps, "down" + std::to_string(i) + ".proj.b", {f_next}, 0.f);
  }

  for (int j = 0; j < cfg.dfe_depth; ++j)
    add_res_block(ps, seed, "dfe.res" + std::to_string(j), cfg.filters.back(),
                  cfg.filters.back(), E);

  const int r3 = cfg.shuffle_r * cfg.shuffle_r * cfg.shuffle_r;
  for (int i = S - 1; i >= 0; --i) {
    const int f = cfg.filters[(size_t)i];
    const int c_in = (i == S - 1 ? cfg.filters.back() : cfg.filters[(size_t)i + 1]) / r3;
    add_tensor(ps, seed, "up" + std::to_string(i) + ".proj.w",
               {f, c_in, 1, 1, 1}, std::sqrt(1.0 / c_in));
    add_const(ps, "up" + std::to_string(i) + ".proj.b", {f}, 0.f);
    add_res_block(ps, seed, "dec" + std::to_string(i) + ".res0", 2 * f, f, E);
    add_res_block(ps, seed, "dec" + std::to_string(i) + ".res1", f, f, E);
  }

  add_const(ps, "head.w", {1, cfg.filters[0], 3, 3, 3}, 0.f);
  add_const(ps, "head.b", {1}, 0.f);
  return ps;
}

std::int64_t param_count(const ParamStore& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

Tensor<float> efficient_attention_single(const Tensor<float>& q,
                                         const Tensor<float>& k,
                                         const Tensor<float>& v) {
  Graph<float> g;
  auto qi = g.input(q), ki = g.input(k), vi = g.input(v);
  auto qs = g.softmax_rows(qi);
  auto ks = g.softmax_cols(ki);
  auto ctx = g.matmul(ks, vi, true);
  auto out = g.matmul(qs, ctx);
  return g.val(out);
}

Tensor<float> efficient_attention_naive(const Tensor<float>& q,
                                        const Tensor<float>& k,
                                        const Tensor<float>& v) {
  const int n = q.shape[0], d = q.shape[1];
  const int m = k.shape[0];
  if (k.shape[1] != d || v.shape[0] != m || v.shape[1] != d)
    throw AutodiffError("attention: shape mismatch");

  // softmax over the feature axis of q
  Tensor<float> qs({n, d});
  for (int i = 0; i < n; ++i) {
    double mx = -1e300;
    for (int f = 0; f < d; ++f) mx = std::max(mx, (double)q.v[(size_t)(i * d + f)]);
    double sum = 0;
    for (int f = 0; f < d; ++f) sum += std::exp((double)q.v[(size_t)(i * d + f)] - mx);
    for (int f = 0; f < d; ++f)
      qs.v[(size_t)(i * d + f)] = (float)(std::exp((double)q.v[(size_t)(i * d + f)] - mx) / sum);
  }
  // softmax over the token axis of k
  Tensor<float> ks({m, d});
  for (int f = 0; f < d; ++f) {
    double mx = -1e300;
    for (int i = 0; i < m; ++i) mx = std::max(mx, (double)k.v[(size_t)(i * d + f)]);
    double sum = 0;
    for (int i = 0; i < m; ++i) sum += std::exp((double)k.v[(size_t)(i * d + f)] - mx);
    for (int i = 0; i < m; ++i)
      ks.v[(size_t)(i * d + f)] = (float)(std::exp((double)k.v[(size_t)(i * d + f)] - mx) / sum);
  }
  // context[f][j] = sum_t ks[t][f] * v[t][j], materialized explicitly
  std::vector<double> ctx((size_t)d * d, 0.0);
  for (int f = 0; f < d; ++f)
    for (int j = 0; j < d; ++j) {
      double acc = 0;
      for (int t = 0; t < m; ++t)
        acc += (double)ks.v[(size_t)(t * d + f)] * (double)v.v[(size_t)(t * d + j)];
      ctx[(size_t)(f * d + j)] = acc;
    }
  Tensor<float> out({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = 0;
      for (int f = 0; f < d; ++f)
        acc += (double)qs.v[(size_t)(i * d + f)] * ctx[(size_t)(f * d + j)];
      out.v[(size_t)(i * d + j)] = (float)acc;
    }
  return out;
}

}  // namespace iqt
