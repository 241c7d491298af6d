#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "iqt/autodiff.hpp"
#include "iqt/rng.hpp"
#include "iqt/tensor.hpp"

namespace iqt {

struct DenoiserConfig {
  int patch = 16;
  int in_channels = 2;  // noisy + condition
  std::vector<int> filters = {8, 16, 32};
  std::vector<int> token_size = {4, 2, 1};
  int heads = 2;
  int embed_dim = 32;
  int dfe_depth = 4;
  int shuffle_r = 2;
  int halo = 4;  // 0 when the cross-batch mechanism is off
  double skip_scale = 0.70710678118654752440;
  int norm_groups = 4;
  bool use_cross_batch = true;
  // predict x as condition + correction: the head output is added to the
  // condition channel's patch center, so the zero-initialized network starts
  // as an identity enhancer instead of a constant-zero one
  bool cond_residual = true;

  int stages() const { return (int)filters.size(); }
  int group_size() const { return use_cross_batch ? 8 : 1; }
  int effective_halo() const { return use_cross_batch ? halo : 0; }
  int padded_patch() const { return patch + 2 * effective_halo(); }

  void validate() const;
};

// Named learnable tensors; f32 for training/inference, f64 for the
// finite-difference harness.
template <class T>
using ParamMap = std::map<std::string, Tensor<T>>;
using ParamStore = ParamMap<float>;

template <class T>
ParamMap<T> cast_params(const ParamStore& ps) {
  ParamMap<T> out;
  for (const auto& [name, t] : ps) out.emplace(name, t.template cast<T>());
  return out;
}

ParamStore init_params(const DenoiserConfig& cfg, std::uint64_t seed);
std::int64_t param_count(const ParamStore& params);

// Standalone efficient attention on plain tensors (single head), used by the
// oracle tests and the timing check. K is normalized with softmax over the
// token axis, Q over the feature axis; context = K^T V; out = Q_s context.
Tensor<float> efficient_attention_single(const Tensor<float>& q,
                                         const Tensor<float>& k,
                                         const Tensor<float>& v);

// Reference implementation with explicit loops (no matmul reuse).
Tensor<float> efficient_attention_naive(const Tensor<float>& q,
                                        const Tensor<float>& k,
                                        const Tensor<float>& v);

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= (unsigned char)c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

// Binds ParamStore tensors into a graph, at most once per name.
template <class T>
class ParamBinder {
 public:
  ParamBinder(Graph<T>& g, const ParamMap<T>& params)
      : g_(g), params_(params) {}

  typename Graph<T>::Id operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto pit = params_.find(name);
    if (pit == params_.end())
      throw AutodiffError("missing parameter: " + name);
    typename Graph<T>::Id id = g_.input(pit->second, /*needs_grad=*/true);
    bound_[name] = id;
    return id;
  }

  const std::map<std::string, typename Graph<T>::Id>& bound() const {
    return bound_;
  }

 private:
  Graph<T>& g_;
  const ParamMap<T>& params_;
  std::map<std::string, typename Graph<T>::Id> bound_;
};

// Builds the conditional denoiser forward pass for one patch group.
template <class T>
class DenoiserNet {
 public:
  using Id = typename Graph<T>::Id;

  DenoiserNet(Graph<T>& g, const ParamMap<T>& params, const DenoiserConfig& cfg)
      : g_(g), p_(g, params), cfg_(cfg) {
    cfg_.validate();
  }

  const ParamBinder<T>& binder() const { return p_; }

  Id time_embedding(double t) {
    const int E = cfg_.embed_dim;
    Tensor<T> base({1, E});
    const double pos = 1000.0 * t;
    for (int i = 0; i < E / 2; ++i) {
      double freq = std::exp(-std::log(10000.0) * (double)i / (double)(E / 2));
      base.v[(size_t)(2 * i)] = (T)std::sin(pos * freq);
      base.v[(size_t)(2 * i + 1)] = (T)std::cos(pos * freq);
    }
    Id b = g_.input(std::move(base));
    Id h = g_.linear(b, p_("temb.mlp1.w"), p_("temb.mlp1.b"));
    h = g_.mish(h);
    return g_.linear(h, p_("temb.mlp2.w"), p_("temb.mlp2.b"));
  }

  // norm -> mish -> conv -> film -> norm -> mish -> conv, skip, 1/sqrt(2)
  Id residual_block(const std::string& name, Id x, Id temb, int c_in, int c_out,
                    int pad) {
    Id n1 = g_.groupnorm(x, groups_for(c_in), p_(name + ".norm1.g"),
                         p_(name + ".norm1.b"));
    Id a1 = g_.mish(n1);
    Id c1 = g_.conv3(a1, p_(name + ".conv1.w"), p_(name + ".conv1.b"), pad);
    Id fl = g_.linear(temb, p_(name + ".film.w"), p_(name + ".film.b"));
    Id sc = g_.slice_flat(fl, 0, c_out);
    Id sh = g_.slice_flat(fl, c_out, c_out);
    Id f = g_.film(c1, sc, sh);
    Id n2 = g_.groupnorm(f, groups_for(c_out), p_(name + ".norm2.g"),
                         p_(name + ".norm2.b"));
    Id a2 = g_.mish(n2);
    Id c2 = g_.conv3(a2, p_(name + ".conv2.w"), p_(name + ".conv2.b"), pad);
    Id skip = x;
    if (c_in != c_out)
      skip = g_.conv3(skip, p_(name + ".proj.w"), p_(name + ".proj.b"), 0);
    if (pad == 0) skip = g_.crop_center(skip, 2);
    return g_.scale(g_.add(c2, skip), cfg_.skip_scale);
  }

  // Transformer block over the whole group: per-member Q, pooled K/V.
  std::vector<Id> transformer_block(const std::string& name,
                                    const std::vector<Id>& xs, int channels,
                                    int token_size) {
    const int E = cfg_.embed_dim;
    const auto& s = g_.val(xs[0]).shape;
    if (s[1] % token_size || s[2] % token_size || s[3] % token_size)
      throw AutodiffError(name + ": spatial dims not divisible by token size");
    std::array<int, 3> tg{s[1] / token_size, s[2] / token_size,
                          s[3] / token_size};

    std::vector<Id> tokens(xs.size());
    std::vector<Id> k_parts(xs.size()), v_parts(xs.size());
    std::vector<Id> q_tokens(xs.size());
    for (size_t m = 0; m < xs.size(); ++m) {
      Id tmap = g_.dwconv3(xs[m], p_(name + ".tok.dw.w"),
                           p_(name + ".tok.dw.b"), token_size, 0);
      Id tok = g_.map_to_tokens(tmap);
      tok = g_.linear(tok, p_(name + ".tok.proj.w"), p_(name + ".tok.proj.b"));
      tokens[m] = tok;

      Id qsrc = tok, ksrc = tok, vsrc = tok;
      if (cfg_.use_cross_batch) {
        // depth-wise refiners over the token grid before the projections
        Id tmap2 = g_.tokens_to_map(tok, tg);
        auto refine = [&](const char* tag) {
          Id r = g_.dwconv3(tmap2, p_(name + "." + tag + "dw.w"),
                            p_(name + "." + tag + "dw.b"), 1, 1);
          return g_.map_to_tokens(r);
        };
        qsrc = refine("q");
        ksrc = refine("k");
        vsrc = refine("v");
      }
      q_tokens[m] = g_.linear(qsrc, p_(name + ".q.w"), p_(name + ".q.b"));
      k_parts[m] = g_.linear(ksrc, p_(name + ".k.w"), p_(name + ".k.b"));
      v_parts[m] = g_.linear(vsrc, p_(name + ".v.w"), p_(name + ".v.b"));
    }

    Id k_all = xs.size() == 1 ? k_parts[0] : g_.concat_rows(k_parts);
    Id v_all = xs.size() == 1 ? v_parts[0] : g_.concat_rows(v_parts);

    const int dh = E / cfg_.heads;
    std::vector<Id> outs(xs.size());
    for (size_t m = 0; m < xs.size(); ++m) {
      std::vector<Id> head_outs;
      for (int h = 0; h < cfg_.heads; ++h) {
        Id qh = g_.softmax_rows(g_.slice_cols(q_tokens[m], h * dh, dh));
        Id kh = g_.softmax_cols(g_.slice_cols(k_all, h * dh, dh));
        Id vh = g_.slice_cols(v_all, h * dh, dh);
        Id ctx = g_.matmul(kh, vh, /*ta=*/true);  // [dh, dh]
        head_outs.push_back(g_.matmul(qh, ctx));
      }
      Id cat = cfg_.heads == 1 ? head_outs[0] : g_.concat_cols(head_outs);
      Id proj = g_.linear(cat, p_(name + ".out.w"), p_(name + ".out.b"));
      Id after = g_.add(tokens[m], proj);
      Id detok =
          g_.linear(after, p_(name + ".detok.w"), p_(name + ".detok.b"));
      Id dmap = g_.subpixel_to_map(detok, channels, token_size, tg);
      outs[m] = g_.add(xs[m], g_.scale(dmap, cfg_.skip_scale));
    }
    return outs;
  }

  // Full forward for a group: inputs are [2, q, q, q] concatenated
  // noisy+condition patches (q = padded patch size). Returns [1, p, p, p].
  std::vector<Id> forward(const std::vector<Id>& group_inputs, double t) {
    const int S = cfg_.stages();
    Id temb = time_embedding(t);
    std::vector<Id> cur(group_inputs.size());
    for (size_t m = 0; m < cur.size(); ++m)
      cur[m] = g_.conv3(group_inputs[m], p_("stem.w"), p_("stem.b"), 0);

    std::vector<std::vector<Id>> skips((size_t)S);
    for (int i = 0; i < S; ++i) {
      const int f = cfg_.filters[(size_t)i];
      cur = transformer_block("enc" + std::to_string(i) + ".tb", cur, f,
                              cfg_.token_size[(size_t)i]);
      // the stage-0 residual blocks consume the halo with valid convolutions
      int pad = (i == 0 && cfg_.effective_halo() > 0) ? 0 : 1;
      for (size_t m = 0; m < cur.size(); ++m) {
        Id h = residual_block("enc" + std::to_string(i) + ".res0", cur[m], temb,
                              f, f, pad);
        h = residual_block("enc" + std::to_string(i) + ".res1", h, temb, f, f,
                           pad);
        cur[m] = h;
      }
      skips[(size_t)i] = cur;
      int f_next = cfg_.filters[(size_t)std::min(i + 1, S - 1)];
      for (size_t m = 0; m < cur.size(); ++m) {
        Id d = g_.channel_shuffle_down(cur[m], cfg_.shuffle_r);
        cur[m] = g_.conv3(d, p_("down" + std::to_string(i) + ".proj.w"),
                          p_("down" + std::to_string(i) + ".proj.b"), 0);
        (void)f_next;
      }
    }

    for (int j = 0; j < cfg_.dfe_depth; ++j) {
      const int f = cfg_.filters.back();
      for (size_t m = 0; m < cur.size(); ++m)
        cur[m] = residual_block("dfe.res" + std::to_string(j), cur[m], temb, f,
                                f, 1);
    }

    for (int i = S - 1; i >= 0; --i) {
      const int f = cfg_.filters[(size_t)i];
      for (size_t m = 0; m < cur.size(); ++m) {
        Id u = g_.channel_shuffle_up(cur[m], cfg_.shuffle_r);
        u = g_.conv3(u, p_("up" + std::to_string(i) + ".proj.w"),
                     p_("up" + std::to_string(i) + ".proj.b"), 0);
        Id skip = g_.scale(skips[(size_t)i][m], cfg_.skip_scale);
        Id c = g_.concat_ch(u, skip);
        Id h = residual_block("dec" + std::to_string(i) + ".res0", c, temb,
                              2 * f, f, 1);
        h = residual_block("dec" + std::to_string(i) + ".res1", h, temb, f, f,
                           1);
        cur[m] = h;
      }
    }

    std::vector<Id> out(cur.size());
    const int q = cfg_.padded_patch();
    const std::int64_t qn = (std::int64_t)q * q * q;
    const int w = cfg_.effective_halo();
    for (size_t m = 0; m < cur.size(); ++m) {
      out[m] = g_.conv3(cur[m], p_("head.w"), p_("head.b"), 1);
      if (cfg_.cond_residual) {
        Id cond = g_.reshape(g_.slice_flat(group_inputs[m], qn, qn),
                             {1, q, q, q});
        if (w > 0) cond = g_.crop_center(cond, w);
        out[m] = g_.add(out[m], cond);
      }
    }
    return out;
  }

 private:
  Graph<T>& g_;
  ParamBinder<T> p_;
  DenoiserConfig cfg_;

  int groups_for(int channels) const {
    int g = cfg_.norm_groups;
    while (channels % g) --g;
    return g;
  }
};

}  // namespace iqt
