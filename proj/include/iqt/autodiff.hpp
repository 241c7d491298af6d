#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <functional>
#include <stdexcept>
#include <vector>

#include "iqt/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace iqt {

struct AutodiffError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raw-pointer convolution kernels. Keeping the hot loops behind __restrict__
// function boundaries lets the compiler vectorize without aliasing checks.
namespace kernels {

template <class T, int KF>
__attribute__((noinline)) void conv3_fwd_co(const T* __restrict__ xv, const T* __restrict__ wv_,
                         T bias, T* __restrict__ yc, int Ci, int D, int H,
                         int W, int K_rt, int Do, int Ho, int Wo, int pad) {
  const int K = KF > 0 ? KF : K_rt;
  for (std::int64_t i = 0; i < (std::int64_t)Do * Ho * Wo; ++i) yc[i] = bias;
  for (int ci = 0; ci < Ci; ++ci) {
    const T* __restrict__ xc = xv + (size_t)ci * D * H * W;
    const T* __restrict__ wc = wv_ + (size_t)ci * K * K * K;
    for (int kz = 0; kz < K; ++kz)
      for (int ky = 0; ky < K; ++ky)
        for (int kx = 0; kx < K; ++kx) {
          const T wv = wc[(kz * K + ky) * K + kx];
          if (wv == T(0)) continue;  // 0*x contributes exactly 0
          const int ox0 = std::max(0, pad - kx);
          const int ox1 = std::min(Wo, W + pad - kx);
          for (int oz = 0; oz < Do; ++oz) {
            const int iz = oz + kz - pad;
            if (iz < 0 || iz >= D) continue;
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy + ky - pad;
              if (iy < 0 || iy >= H) continue;
              T* __restrict__ yrow = yc + ((std::int64_t)oz * Ho + oy) * Wo;
              const T* __restrict__ xrow =
                  xc + ((std::int64_t)iz * H + iy) * W + (kx - pad);
#pragma GCC ivdep
              for (int ox = ox0; ox < ox1; ++ox) yrow[ox] += wv * xrow[ox];
            }
          }
        }
  }
}

template <class T, int KF>
__attribute__((noinline)) void conv3_bwd_gw_co(const T* __restrict__ xv,
                            const T* __restrict__ gyc, T* __restrict__ gwc,
                            int Ci, int D, int H, int W, int K_rt, int Do, int Ho,
                            int Wo, int pad) {
  const int K = KF > 0 ? KF : K_rt;
  for (int ci = 0; ci < Ci; ++ci) {
    const T* __restrict__ xc = xv + (size_t)ci * D * H * W;
    for (int kz = 0; kz < K; ++kz)
      for (int ky = 0; ky < K; ++ky)
        for (int kx = 0; kx < K; ++kx) {
          const int ox0 = std::max(0, pad - kx);
          const int ox1 = std::min(Wo, W + pad - kx);
          double acc = 0;
          for (int oz = 0; oz < Do; ++oz) {
            const int iz = oz + kz - pad;
            if (iz < 0 || iz >= D) continue;
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy + ky - pad;
              if (iy < 0 || iy >= H) continue;
              const T* __restrict__ xrow =
                  xc + ((std::int64_t)iz * H + iy) * W + (kx - pad);
              const T* __restrict__ grow =
                  gyc + ((std::int64_t)oz * Ho + oy) * Wo;
              T racc = 0;
#pragma GCC ivdep
              for (int ox = ox0; ox < ox1; ++ox) racc += xrow[ox] * grow[ox];
              acc += (double)racc;
            }
          }
          gwc[((size_t)ci * K * K + (size_t)kz * K + ky) * K + kx] += (T)acc;
        }
  }
}

template <class T, int KF>
__attribute__((noinline)) void conv3_bwd_gx_ci(const T* __restrict__ gyv,
                            const T* __restrict__ wv_, T* __restrict__ gxc,
                            int Co, int Ci, int ci, int D, int H, int W, int K_rt,
                            int Do, int Ho, int Wo, int pad) {
  const int K = KF > 0 ? KF : K_rt;
  for (int co = 0; co < Co; ++co) {
    const T* __restrict__ gyc = gyv + (size_t)co * Do * Ho * Wo;
    const T* __restrict__ wc = wv_ + ((size_t)co * Ci + ci) * K * K * K;
    for (int kz = 0; kz < K; ++kz)
      for (int ky = 0; ky < K; ++ky)
        for (int kx = 0; kx < K; ++kx) {
          const T wv = wc[(kz * K + ky) * K + kx];
          if (wv == T(0)) continue;
          const int ox0 = std::max(0, pad - kx);
          const int ox1 = std::min(Wo, W + pad - kx);
          for (int oz = 0; oz < Do; ++oz) {
            const int iz = oz + kz - pad;
            if (iz < 0 || iz >= D) continue;
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy + ky - pad;
              if (iy < 0 || iy >= H) continue;
              T* __restrict__ gxrow =
                  gxc + ((std::int64_t)iz * H + iy) * W + (kx - pad);
              const T* __restrict__ grow =
                  gyc + ((std::int64_t)oz * Ho + oy) * Wo;
#pragma GCC ivdep
              for (int ox = ox0; ox < ox1; ++ox) gxrow[ox] += wv * grow[ox];
            }
          }
        }
  }
}

// dispatch on the two kernel sizes in use so trip counts are compile-time
template <class F3, class F1, class FG>
inline void dispatch_k(int K, F3&& f3, F1&& f1, FG&& fg) {
  if (K == 3) f3();
  else if (K == 1) f1();
  else fg();
}

}  // namespace kernels

// Define-by-run reverse-mode tape over dense tensors. Feature maps are
// [C, D, H, W]; token matrices are [N, F]. All parallel loops write to
// disjoint outputs so results are independent of thread count.
template <class T>
class Graph {
 public:
  using Id = int;

  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    bool needs_grad = false;
    std::function<void(Graph&)> back;
  };

  const Tensor<T>& val(Id id) const { return nodes_[(size_t)id].val; }
  Tensor<T>& grad(Id id) { return nodes_[(size_t)id].grad; }
  bool needs_grad(Id id) const { return nodes_[(size_t)id].needs_grad; }
  size_t size() const { return nodes_.size(); }

  Id input(Tensor<T> v, bool needs_grad = false) {
    Node n;
    n.val = std::move(v);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return (Id)nodes_.size() - 1;
  }

  void backward(Id loss) {
    if (nodes_[(size_t)loss].val.numel() != 1)
      throw AutodiffError("backward: loss must be scalar");
    for (auto& n : nodes_) {
      n.grad = Tensor<T>(n.val.shape);
    }
    nodes_[(size_t)loss].grad[0] = T(1);
    for (Id i = loss; i >= 0; --i) {
      auto& n = nodes_[(size_t)i];
      if (n.needs_grad && n.back) n.back(*this);
    }
  }

  // ---- elementwise ----

  Id add(Id a, Id b) {
    check_same(a, b, "add");
    Tensor<T> out(val(a).shape);
    const auto& av = val(a).v;
    const auto& bv = val(b).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] + bv[i];
    Id id = make(std::move(out), {a, b});
    nodes_[(size_t)id].back = [id, a, b](Graph& g) {
      const auto& gr = g.grad(id).v;
      if (g.needs_grad(a)) {
        auto& ga = g.grad(a).v;
        for (size_t i = 0; i < gr.size(); ++i) ga[i] += gr[i];
      }
      if (g.needs_grad(b)) {
        auto& gb = g.grad(b).v;
        for (size_t i = 0; i < gr.size(); ++i) gb[i] += gr[i];
      }
    };
    return id;
  }

  Id scale(Id a, double c) {
    Tensor<T> out(val(a).shape);
    const auto& av = val(a).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = (T)(c * av[i]);
    Id id = make(std::move(out), {a});
    nodes_[(size_t)id].back = [id, a, c](Graph& g) {
      if (!g.needs_grad(a)) return;
      const auto& gr = g.grad(id).v;
      auto& ga = g.grad(a).v;
      for (size_t i = 0; i < gr.size(); ++i) ga[i] += (T)(c * gr[i]);
    };
    return id;
  }

  // y = s1*a + s2*c  with c a constant tensor
  Id affine_const(Id a, double s1, const Tensor<T>& c, double s2) {
    if (val(a).shape != c.shape) throw AutodiffError("affine_const: shape");
    Tensor<T> out(val(a).shape);
    const auto& av = val(a).v;
    for (size_t i = 0; i < out.v.size(); ++i)
      out.v[i] = (T)(s1 * av[i] + s2 * c.v[i]);
    Id id = make(std::move(out), {a});
    nodes_[(size_t)id].back = [id, a, s1](Graph& g) {
      if (!g.needs_grad(a)) return;
      const auto& gr = g.grad(id).v;
      auto& ga = g.grad(a).v;
      for (size_t i = 0; i < gr.size(); ++i) ga[i] += (T)(s1 * gr[i]);
    };
    return id;
  }

  Id mish(Id a) {
    Tensor<T> out(val(a).shape);
    const auto& av = val(a).v;
    for (size_t i = 0; i < out.v.size(); ++i) {
      double x = (double)av[i];
      out.v[i] = (T)(x * std::tanh(softplus(x)));
    }
    Id id = make(std::move(out), {a});
    nodes_[(size_t)id].back = [id, a](Graph& g) {
      if (!g.needs_grad(a)) return;
      const auto& gr = g.grad(id).v;
      const auto& av = g.val(a).v;
      auto& ga = g.grad(a).v;
      for (size_t i = 0; i < gr.size(); ++i) {
        double x = (double)av[i];
        double t = std::tanh(softplus(x));
        double sg = 1.0 / (1.0 + std::exp(-x));
        ga[i] += (T)((t + x * (1.0 - t * t) * sg) * (double)gr[i]);
      }
    };
    return id;
  }

  // y[c, s] = x[c, s] * (1 + sc[c]) + sh[c]  (FiLM conditioning)
  Id film(Id x, Id sc, Id sh) {
    const auto& xs = val(x).shape;
    if (xs.size() != 4) throw AutodiffError("film: expects [C,D,H,W]");
    const int C = xs[0];
    const std::int64_t S = (std::int64_t)xs[1] * xs[2] * xs[3];
    if (val(sc).numel() != C || val(sh).numel() != C)
      throw AutodiffError("film: conditioning size mismatch");
    Tensor<T> out(xs);
    const auto& xv = val(x).v;
    const auto& scv = val(sc).v;
    const auto& shv = val(sh).v;
    for (int c = 0; c < C; ++c)
      for (std::int64_t s = 0; s < S; ++s)
        out.v[c * S + s] = (T)(xv[c * S + s] * (T(1) + scv[(size_t)c]) + shv[(size_t)c]);
    Id id = make(std::move(out), {x, sc, sh});
    nodes_[(size_t)id].back = [id, x, sc, sh, C, S](Graph& g) {
      const auto& gr = g.grad(id).v;
      const auto& xv = g.val(x).v;
      const auto& scv = g.val(sc).v;
      if (g.needs_grad(x)) {
        auto& gx = g.grad(x).v;
        for (int c = 0; c < C; ++c)
          for (std::int64_t s = 0; s < S; ++s)
            gx[c * S + s] += gr[c * S + s] * (T(1) + scv[(size_t)c]);
      }
      if (g.needs_grad(sc)) {
        auto& gsc = g.grad(sc).v;
        for (int c = 0; c < C; ++c) {
          T acc = 0;
          for (std::int64_t s = 0; s < S; ++s)
            acc += gr[c * S + s] * xv[c * S + s];
          gsc[(size_t)c] += acc;
        }
      }
      if (g.needs_grad(sh)) {
        auto& gsh = g.grad(sh).v;
        for (int c = 0; c < C; ++c) {
          T acc = 0;
          for (std::int64_t s = 0; s < S; ++s) acc += gr[c * S + s];
          gsh[(size_t)c] += acc;
        }
      }
    };
    return id;
  }

  // ---- shape ops (pure index maps) ----

  Id slice_flat(Id a, std::int64_t off, std::int64_t len) {
    if (off < 0 || off + len > val(a).numel())
      throw AutodiffError("slice_flat: out of range");
    Tensor<T> out({(int)len});
    for (std::int64_t i = 0; i < len; ++i) out[i] = val(a)[off + i];
    Id id = make(std::move(out), {a});
    nodes_[(size_t)id].back = [id, a, off, len](Graph& g) {
      if (!g.needs_grad(a)) return;
      auto& ga = g.grad(a);
      const auto& gr = g.grad(id);
      for (std::int64_t i = 0; i < len; ++i) ga[off + i] += gr[i];
    };
    return id;
  }

  Id reshape(Id a, std::vector<int> shape) {
    if (Tensor<T>::numel_of(shape) != val(a).numel())
      throw AutodiffError("reshape: numel mismatch");
    Tensor<T> out(shape, val(a).v);
    Id id = make(std::move(out), {a});
    nodes_[(size_t)id].back = [id, a](Graph& g) {
      if (!g.needs_grad(a)) return;
      auto& ga = g.grad(a).v;
      const auto& gr = g.grad(id).v;
      for (size_t i = 0; i < gr.size(); ++i) ga[i] += gr[i];
    };
    return id;
  }

  Id concat_ch(Id a, Id b) {
    const auto& as = val(a).shape;
    const auto& bs = val(b).shape;
    if (as.size() != 4 || bs.size() != 4 || as[1] != bs[1] || as[2] != bs[2] ||
        as[3] != bs[3])
      throw AutodiffError("concat_ch: shape mismatch");
    Tensor<T> out({as[0] + bs[0], as[1], as[2], as[3]});
    std::copy(val(a).v.begin(), val(a).v.end(), out.v.begin());
    std::copy(val(b).v.begin(), val(b).v.end(),
              out.v.begin() + val(a).v.size());
    Id id = make(std::move(out), {a, b});
    const std::int64_t na = val(a).numel();
    nodes_[(size_t)id].back = [id, a, b, na](Graph& g) {
      const auto& gr = g.grad(id).v;
      if (g.needs_grad(a)) {
        auto& ga = g.grad(a).v;
        for (std::int64_t i = 0; i < na; ++i) ga[(size_t)i] += gr[(size_t)i];
      }
      if (g.needs_grad(b)) {
        auto& gb = g.grad(b).v;
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += gr[(size_t)na + i];
      }
    };
    return id;
  }

  Id crop_center(Id a, int m) {
    const auto& s = val(a).shape;
    if (s.size() != 4 || s[1] <= 2 * m || s[2] <= 2 * m || s[3] <= 2 * m)
      throw AutodiffError("crop_center: too small");
    std::vector<int> os{s[0], s[1] - 2 * m, s[2] - 2 * m, s[3] - 2 * m};
    Tensor<T> out(os);
    copy_crop(val(a), out, s, os, m, false);
    Id id = make(std::move(out), {a});
    auto ss = s;
    nodes_[(size_t)id].back = [id, a, ss, os, m](Graph& g) {
      if (!g.needs_grad(a)) return;
      copy_crop(g.grad(id), g.grad(a), ss, os, m, true);
    };
    return id;
  }

  // [C,D,H,W] -> [N=D*H*W, C]
  Id map_to_tokens(Id a) {
    const auto& s = val(a).shape;
    if (s.size() != 4) throw AutodiffError("map_to_tokens: expects map");
    const int C = s[0];
    const std::int64_t N = (std::int64_t)s[1] * s[2] * s[3];
    Tensor<T> out({(int)N, C});
    const auto& av = val(a).v;
    for (int c = 0; c < C; ++c)
      for (std::int64_t n = 0; n < N; ++n)
        out.v[(size_t)(n * C + c)] = av[(size_t)(c * N + n)];
    Id id = make(std::move(out), {a});
    nodes_[(size_t)id].back = [id, a, C, N](Graph& g) {
      if (!g.needs_grad(a)) return;
      const auto& gr = g.grad(id).v;
      auto& ga = g.grad(a).v;
      for (int c = 0; c < C; ++c)
        for (std::int64_t n = 0; n < N; ++n)
          ga[(size_t)(c * N + n)] += gr[(size_t)(n * C + c)];
    };
    return id;
  }

  // [N, C] -> [C, d, h, w] with N = d*h*w
  Id tokens_to_map(Id a, std::array<int, 3> dims) {
    const auto& s = val(a).shape;
    if (s.size() != 2) throw AutodiffError("tokens_to_map: expects matrix");
    const int C = s[1];
    const std::int64_t N = (std::int64_t)dims[0] * dims[1] * dims[2];
    if (N != s[0]) throw AutodiffError("tokens_to_map: token count mismatch");
    Tensor<T> out({C, dims[0], dims[1], dims[2]});
    const auto& av = val(a).v;
    for (int c = 0; c < C; ++c)
      for (std::int64_t n = 0; n < N; ++n)
        out.v[(size_t)(c * N + n)] = av[(size_t)(n * C + c)];
    Id id = make(std::move(out), {a});
    nodes_[(size_t)id].back = [id, a, C, N](Graph& g) {
      if (!g.needs_grad(a)) return;
      const auto& gr = g.grad(id).v;
      auto& ga = g.grad(a).v;
      for (int c = 0; c < C; ++c)
        for (std::int64_t n = 0; n < N; ++n)
          ga[(size_t)(n * C + c)] += gr[(size_t)(c * N + n)];
    };
    return id;
  }

  // tokens [N, C*ts^3] -> map [C, gd*ts, gh*ts, gw*ts] (sub-pixel layout)
  Id subpixel_to_map(Id a, int C, int ts, std::array<int, 3> tokens_grid) {
    const auto& s = val(a).shape;
    const int gd = tokens_grid[0], gh = tokens_grid[1], gw = tokens_grid[2];
    if (s.size() != 2 || s[0] != gd * gh * gw || s[1] != C * ts * ts * ts)
      throw AutodiffError("subpixel_to_map: shape mismatch");
    std::vector<int> os{C, gd * ts, gh * ts, gw * ts};
    Tensor<T> out(os);
    subpixel_fwd(val(a), out, C, ts, tokens_grid);
    Id id = make(std::move(out), {a});
    nodes_[(size_t)id].back = [id, a, C, ts, tokens_grid](Graph& g) {
      if (!g.needs_grad(a)) return;
      subpixel_bwd(g.grad(a), g.grad(id), C, ts, tokens_grid);
    };
    return id;
  }

  Id channel_shuffle_down(Id a, int r) {
    Tensor<T> out = shuffle_down_t(val(a), r);
    Id id = make(std::move(out), {a});
    nodes_[(size_t)id].back = [id, a, r](Graph& g) {
      if (!g.needs_grad(a)) return;
      Tensor<T> gi = shuffle_up_t(g.grad(id), r);
      auto& ga = g.grad(a).v;
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += gi.v[i];
    };
    return id;
  }

  Id channel_shuffle_up(Id a, int r) {
    Tensor<T> out = shuffle_up_t(val(a), r);
    Id id = make(std::move(out), {a});
    nodes_[(size_t)id].back = [id, a, r](Graph& g) {
      if (!g.needs_grad(a)) return;
      Tensor<T> gi = shuffle_down_t(g.grad(id), r);
      auto& ga = g.grad(a).v;
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += gi.v[i];
    };
    return id;
  }

  // ---- matrices ----

  Id matmul(Id a, Id b, bool ta = false, bool tb = false) {
    const auto& as = val(a).shape;
    const auto& bs = val(b).shape;
    if (as.size() != 2 || bs.size() != 2) throw AutodiffError("matmul: 2D only");
    int M = ta ? as[1] : as[0];
    int K = ta ? as[0] : as[1];
    int Kb = tb ? bs[1] : bs[0];
    int N = tb ? bs[0] : bs[1];
    if (K != Kb) throw AutodiffError("matmul: inner dim mismatch");
    Tensor<T> out({M, N});
    gemm(ta, tb, M, N, K, val(a).data(), as[1], val(b).data(), bs[1],
         out.data(), false);
    Id id = make(std::move(out), {a, b});
    nodes_[(size_t)id].back = [id, a, b, ta, tb, M, N, K](Graph& g) {
      const auto& as = g.val(a).shape;
      const auto& bs = g.val(b).shape;
      if (g.needs_grad(a)) {
        // dA = (ta ? opB(G)^T arrangement) ...
        if (!ta)
          gemm(false, !tb, M, K, N, g.grad(id).data(), N, g.val(b).data(),
               bs[1], g.grad(a).data(), true);
        else
          gemm(tb, true, K, M, N, g.val(b).data(), bs[1], g.grad(id).data(), N,
               g.grad(a).data(), true);
      }
      if (g.needs_grad(b)) {
        if (!tb)
          gemm(!ta, false, K, N, M, g.val(a).data(), as[1], g.grad(id).data(),
               N, g.grad(b).data(), true);
        else
          gemm(true, ta, N, K, M, g.grad(id).data(), N, g.val(a).data(), as[1],
               g.grad(b).data(), true);
      }
    };
    return id;
  }

  // x[N,F] @ w[F,G] + b[G]
  Id linear(Id x, Id w, Id b) {
    Id y = matmul(x, w);
    return add_row_bias(y, b);
  }

  Id add_row_bias(Id a, Id b) {
    const auto& as = val(a).shape;
    if (as.size() != 2 || val(b).numel() != as[1])
      throw AutodiffError("add_row_bias: shape");
    Tensor<T> out(as);
    const auto& av = val(a).v;
    const auto& bv = val(b).v;
    const int N = as[0], F = as[1];
    for (int n = 0; n < N; ++n)
      for (int f = 0; f < F; ++f)
        out.v[(size_t)(n * F + f)] = av[(size_t)(n * F + f)] + bv[(size_t)f];
    Id id = make(std::move(out), {a, b});
    nodes_[(size_t)id].back = [id, a, b, N, F](Graph& g) {
      const auto& gr = g.grad(id).v;
      if (g.needs_grad(a)) {
        auto& ga = g.grad(a).v;
        for (size_t i = 0; i < gr.size(); ++i) ga[i] += gr[i];
      }
      if (g.needs_grad(b)) {
        auto& gb = g.grad(b).v;
        for (int n = 0; n < N; ++n)
          for (int f = 0; f < F; ++f) gb[(size_t)f] += gr[(size_t)(n * F + f)];
      }
    };
    return id;
  }

  Id slice_cols(Id a, int off, int len) {
    const auto& s = val(a).shape;
    if (s.size() != 2 || off < 0 || off + len > s[1])
      throw AutodiffError("slice_cols: out of range");
    const int N = s[0], F = s[1];
    Tensor<T> out({N, len});
    for (int n = 0; n < N; ++n)
      for (int f = 0; f < len; ++f)
        out.v[(size_t)(n * len + f)] = val(a).v[(size_t)(n * F + off + f)];
    Id id = make(std::move(out), {a});
    nodes_[(size_t)id].back = [id, a, off, len, N, F](Graph& g) {
      if (!g.needs_grad(a)) return;
      const auto& gr = g.grad(id).v;
      auto& ga = g.grad(a).v;
      for (int n = 0; n < N; ++n)
        for (int f = 0; f < len; ++f)
          ga[(size_t)(n * F + off + f)] += gr[(size_t)(n * len + f)];
    };
    return id;
  }

  Id concat_cols(const std::vector<Id>& parts) {
    if (parts.empty()) throw AutodiffError("concat_cols: empty");
    const int N = val(parts[0]).shape[0];
    int F = 0;
    for (Id p : parts) {
      if (val(p).shape.size() != 2 || val(p).shape[0] != N)
        throw AutodiffError("concat_cols: row mismatch");
      F += val(p).shape[1];
    }
    Tensor<T> out({N, F});
    int off = 0;
    for (Id p : parts) {
      int len = val(p).shape[1];
      for (int n = 0; n < N; ++n)
        for (int f = 0; f < len; ++f)
          out.v[(size_t)(n * F + off + f)] = val(p).v[(size_t)(n * len + f)];
      off += len;
    }
    Id id = make(std::move(out), parts);
    auto ps = parts;
    nodes_[(size_t)id].back = [id, ps, N, F](Graph& g) {
      const auto& gr = g.grad(id).v;
      int off = 0;
      for (Id p : ps) {
        int len = g.val(p).shape[1];
        if (g.needs_grad(p)) {
          auto& gp = g.grad(p).v;
          for (int n = 0; n < N; ++n)
            for (int f = 0; f < len; ++f)
              gp[(size_t)(n * len + f)] += gr[(size_t)(n * F + off + f)];
        }
        off += len;
      }
    };
    return id;
  }

  Id concat_rows(const std::vector<Id>& parts) {
    if (parts.empty()) throw AutodiffError("concat_rows: empty");
    const int F = val(parts[0]).shape[1];
    int N = 0;
    for (Id p : parts) {
      if (val(p).shape.size() != 2 || val(p).shape[1] != F)
        throw AutodiffError("concat_rows: col mismatch");
      N += val(p).shape[0];
    }
    Tensor<T> out({N, F});
    std::int64_t off = 0;
    for (Id p : parts) {
      std::copy(val(p).v.begin(), val(p).v.end(), out.v.begin() + off);
      off += val(p).numel();
    }
    Id id = make(std::move(out), parts);
    auto ps = parts;
    nodes_[(size_t)id].back = [id, ps](Graph& g) {
      const auto& gr = g.grad(id).v;
      std::int64_t off = 0;
      for (Id p : ps) {
        std::int64_t n = g.val(p).numel();
        if (g.needs_grad(p)) {
          auto& gp = g.grad(p).v;
          for (std::int64_t i = 0; i < n; ++i) gp[(size_t)i] += gr[(size_t)(off + i)];
        }
        off += n;
      }
    };
    return id;
  }

  // softmax over the last axis of each row
  Id softmax_rows(Id a) { return softmax_impl(a, true); }
  // softmax over the rows of each column (token axis)
  Id softmax_cols(Id a) { return softmax_impl(a, false); }

  // ---- normalization ----

  Id groupnorm(Id x, int groups, Id gamma, Id beta, double eps = 1e-5) {
    const auto& s = val(x).shape;
    if (s.size() != 4) throw AutodiffError("groupnorm: expects map");
    const int C = s[0];
    if (C % groups != 0) throw AutodiffError("groupnorm: C % groups != 0");
    if (val(gamma).numel() != C || val(beta).numel() != C)
      throw AutodiffError("groupnorm: gamma/beta size");
    const std::int64_t S = (std::int64_t)s[1] * s[2] * s[3];
    const int cpg = C / groups;
    const std::int64_t gs = cpg * S;

    Tensor<T> out(s);
    std::vector<double> means((size_t)groups), istds((size_t)groups);
    const auto& xv = val(x).v;
    const auto& gv = val(gamma).v;
    const auto& bv = val(beta).v;
    for (int g = 0; g < groups; ++g) {
      double mean = 0;
      for (std::int64_t i = 0; i < gs; ++i) mean += (double)xv[(size_t)(g * gs + i)];
      mean /= (double)gs;
      double var = 0;
      for (std::int64_t i = 0; i < gs; ++i) {
        double d = (double)xv[(size_t)(g * gs + i)] - mean;
        var += d * d;
      }
      var /= (double)gs;
      double istd = 1.0 / std::sqrt(var + eps);
      means[(size_t)g] = mean;
      istds[(size_t)g] = istd;
      for (int cc = 0; cc < cpg; ++cc) {
        int c = g * cpg + cc;
        for (std::int64_t i = 0; i < S; ++i) {
          double xn = ((double)xv[(size_t)(c * S + i)] - mean) * istd;
          out.v[(size_t)(c * S + i)] = (T)(xn * (double)gv[(size_t)c] + (double)bv[(size_t)c]);
        }
      }
    }
    Id id = make(std::move(out), {x, gamma, beta});
    nodes_[(size_t)id].back = [id, x, gamma, beta, groups, C, S, cpg, gs, means,
                               istds](Graph& g) {
      const auto& gr = g.grad(id).v;
      const auto& xv = g.val(x).v;
      const auto& gv = g.val(gamma).v;
      if (g.needs_grad(gamma) || g.needs_grad(beta)) {
        auto& gg = g.grad(gamma).v;
        auto& gb = g.grad(beta).v;
        for (int c = 0; c < C; ++c) {
          int grp = c / cpg;
          double mean = means[(size_t)grp], istd = istds[(size_t)grp];
          double accg = 0, accb = 0;
          for (std::int64_t i = 0; i < S; ++i) {
            double xn = ((double)xv[(size_t)(c * S + i)] - mean) * istd;
            accg += xn * (double)gr[(size_t)(c * S + i)];
            accb += (double)gr[(size_t)(c * S + i)];
          }
          if (g.needs_grad(gamma)) gg[(size_t)c] += (T)accg;
          if (g.needs_grad(beta)) gb[(size_t)c] += (T)accb;
        }
      }
      if (g.needs_grad(x)) {
        auto& gx = g.grad(x).v;
        for (int grp = 0; grp < groups; ++grp) {
          double mean = means[(size_t)grp], istd = istds[(size_t)grp];
          // dL/dxn and reductions over the group
          double sum_d = 0, sum_dx = 0;
          for (int cc = 0; cc < cpg; ++cc) {
            int c = grp * cpg + cc;
            for (std::int64_t i = 0; i < S; ++i) {
              double d = (double)gr[(size_t)(c * S + i)] * (double)gv[(size_t)c];
              double xn = ((double)xv[(size_t)(c * S + i)] - mean) * istd;
              sum_d += d;
              sum_dx += d * xn;
            }
          }
          double inv_n = 1.0 / (double)gs;
          for (int cc = 0; cc < cpg; ++cc) {
            int c = grp * cpg + cc;
            for (std::int64_t i = 0; i < S; ++i) {
              double d = (double)gr[(size_t)(c * S + i)] * (double)gv[(size_t)c];
              double xn = ((double)xv[(size_t)(c * S + i)] - mean) * istd;
              gx[(size_t)(c * S + i)] +=
                  (T)(istd * (d - inv_n * sum_d - xn * inv_n * sum_dx));
            }
          }
        }
      }
    };
    return id;
  }

  // ---- convolutions ----

  // x[Ci,D,H,W] (*) w[Co,Ci,K,K,K] + b[Co]; pad 0 (valid) or K/2 (same)
  Id conv3(Id x, Id w, Id b, int pad) {
    const auto& xs = val(x).shape;
    const auto& ws = val(w).shape;
    if (xs.size() != 4 || ws.size() != 5 || ws[1] != xs[0])
      throw AutodiffError("conv3: shape mismatch " + shape_str(xs) + " w " +
                          shape_str(ws));
    const int K = ws[2];
    const int Co = ws[0];
    if (val(b).numel() != Co) throw AutodiffError("conv3: bias size");
    std::vector<int> os{Co, xs[1] + 2 * pad - K + 1, xs[2] + 2 * pad - K + 1,
                        xs[3] + 2 * pad - K + 1};
    if (os[1] <= 0 || os[2] <= 0 || os[3] <= 0)
      throw AutodiffError("conv3: output would be empty");
    Tensor<T> out(os);
    conv3_forward(val(x), val(w), val(b), out, pad);
    Id id = make(std::move(out), {x, w, b});
    auto xss = xs;
    nodes_[(size_t)id].back = [id, x, w, b, pad, xss, os](Graph& g) {
      conv3_backward(g.val(x), g.val(w), g.grad(id), pad,
                     g.needs_grad(x) ? &g.grad(x) : nullptr,
                     g.needs_grad(w) ? &g.grad(w) : nullptr,
                     g.needs_grad(b) ? &g.grad(b) : nullptr);
    };
    return id;
  }

  // depthwise conv, kernel k, stride st, pad 0 or k/2 (st==1 only for pad>0)
  Id dwconv3(Id x, Id w, Id b, int stride, int pad) {
    const auto& xs = val(x).shape;
    const auto& ws = val(w).shape;
    if (xs.size() != 4 || ws.size() != 4 || ws[0] != xs[0])
      throw AutodiffError("dwconv3: shape mismatch");
    const int K = ws[1];
    const int C = xs[0];
    if (val(b).numel() != C) throw AutodiffError("dwconv3: bias size");
    std::vector<int> os{C, (xs[1] + 2 * pad - K) / stride + 1,
                        (xs[2] + 2 * pad - K) / stride + 1,
                        (xs[3] + 2 * pad - K) / stride + 1};
    if ((xs[1] + 2 * pad - K) % stride || (xs[2] + 2 * pad - K) % stride ||
        (xs[3] + 2 * pad - K) % stride)
      throw AutodiffError("dwconv3: extent not divisible by stride");
    Tensor<T> out(os);
    dwconv3_forward(val(x), val(w), val(b), out, stride, pad);
    Id id = make(std::move(out), {x, w, b});
    nodes_[(size_t)id].back = [id, x, w, b, stride, pad](Graph& g) {
      dwconv3_backward(g.val(x), g.val(w), g.grad(id), stride, pad,
                       g.needs_grad(x) ? &g.grad(x) : nullptr,
                       g.needs_grad(w) ? &g.grad(w) : nullptr,
                       g.needs_grad(b) ? &g.grad(b) : nullptr);
    };
    return id;
  }

  // ---- loss ----

  // mean squared error against a constant target
  Id mse(Id a, const Tensor<T>& target) {
    if (val(a).shape != target.shape) throw AutodiffError("mse: shape");
    const std::int64_t n = val(a).numel();
    double acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      double d = (double)val(a)[i] - (double)target.v[(size_t)i];
      acc += d * d;
    }
    Tensor<T> out({1});
    out[0] = (T)(acc / (double)n);
    Id id = make(std::move(out), {a});
    auto tgt = target;
    nodes_[(size_t)id].back = [id, a, tgt, n](Graph& g) {
      if (!g.needs_grad(a)) return;
      T gscale = (T)((double)g.grad(id)[0] * 2.0 / (double)n);
      auto& ga = g.grad(a).v;
      const auto& av = g.val(a).v;
      for (std::int64_t i = 0; i < n; ++i)
        ga[(size_t)i] += gscale * (av[(size_t)i] - tgt.v[(size_t)i]);
    };
    return id;
  }

  Id add_scalars(const std::vector<Id>& parts) {
    Tensor<T> out({1});
    for (Id p : parts) {
      if (val(p).numel() != 1) throw AutodiffError("add_scalars: not scalar");
      out[0] += val(p)[0];
    }
    Id id = make(std::move(out), parts);
    auto ps = parts;
    nodes_[(size_t)id].back = [id, ps](Graph& g) {
      for (Id p : ps)
        if (g.needs_grad(p)) g.grad(p)[0] += g.grad(id)[0];
    };
    return id;
  }

  // ---- shared helpers usable without a graph ----

  static Tensor<T> shuffle_down_t(const Tensor<T>& x, int r) {
    const auto& s = x.shape;
    if (s.size() != 4) throw AutodiffError("channel_shuffle: expects map");
    if (r < 1 || s[1] % r || s[2] % r || s[3] % r)
      throw AutodiffError("channel_shuffle: dims not divisible by r");
    const int C = s[0], D = s[1], H = s[2], W = s[3];
    const int d = D / r, h = H / r, w = W / r;
    Tensor<T> out({C * r * r * r, d, h, w});
    for (int c = 0; c < C; ++c)
      for (int dz = 0; dz < r; ++dz)
        for (int dy = 0; dy < r; ++dy)
          for (int dx = 0; dx < r; ++dx) {
            int oc = c * r * r * r + (dz * r + dy) * r + dx;
            for (int i = 0; i < d; ++i)
              for (int j = 0; j < h; ++j)
                for (int k = 0; k < w; ++k)
                  out.v[(size_t)(((std::int64_t)oc * d + i) * h * w + (std::int64_t)j * w + k)] =
                      x.v[(size_t)(((std::int64_t)c * D + i * r + dz) * H * W +
                                   (std::int64_t)(j * r + dy) * W + k * r + dx)];
          }
    return out;
  }

  static Tensor<T> shuffle_up_t(const Tensor<T>& x, int r) {
    const auto& s = x.shape;
    if (s.size() != 4) throw AutodiffError("channel_shuffle: expects map");
    const int r3 = r * r * r;
    if (r < 1 || s[0] % r3) throw AutodiffError("channel_shuffle_up: C % r^3");
    const int C = s[0] / r3, d = s[1], h = s[2], w = s[3];
    Tensor<T> out({C, d * r, h * r, w * r});
    for (int c = 0; c < C; ++c)
      for (int dz = 0; dz < r; ++dz)
        for (int dy = 0; dy < r; ++dy)
          for (int dx = 0; dx < r; ++dx) {
            int ic = c * r3 + (dz * r + dy) * r + dx;
            for (int i = 0; i < d; ++i)
              for (int j = 0; j < h; ++j)
                for (int k = 0; k < w; ++k)
                  out.v[(size_t)(((std::int64_t)c * d * r + i * r + dz) * h * r * w * r +
                                 (std::int64_t)(j * r + dy) * w * r + k * r + dx)] =
                      x.v[(size_t)(((std::int64_t)ic * d + i) * h * w +
                                   (std::int64_t)j * w + k)];
          }
    return out;
  }

 private:
  // deque keeps references to existing nodes stable while ops append new
  // nodes mid-construction
  std::deque<Node> nodes_;

  static double softplus(double x) {
    if (x > 20.0) return x;
    if (x < -20.0) return std::exp(x);
    return std::log1p(std::exp(x));
  }

  Id make(Tensor<T> out, const std::vector<Id>& deps) {
    Node n;
    n.val = std::move(out);
    for (Id d : deps) n.needs_grad |= nodes_[(size_t)d].needs_grad;
    nodes_.push_back(std::move(n));
    return (Id)nodes_.size() - 1;
  }

  Id softmax_impl(Id a, bool rows) {
    const auto& s = val(a).shape;
    if (s.size() != 2) throw AutodiffError("softmax: 2D only");
    const int N = s[0], F = s[1];
    Tensor<T> out(s);
    const auto& av = val(a).v;
    if (rows) {
      for (int n = 0; n < N; ++n) {
        double mx = -1e300;
        for (int f = 0; f < F; ++f) mx = std::max(mx, (double)av[(size_t)(n * F + f)]);
        double sum = 0;
        for (int f = 0; f < F; ++f) {
          double e = std::exp((double)av[(size_t)(n * F + f)] - mx);
          out.v[(size_t)(n * F + f)] = (T)e;
          sum += e;
        }
        for (int f = 0; f < F; ++f) out.v[(size_t)(n * F + f)] = (T)((double)out.v[(size_t)(n * F + f)] / sum);
      }
    } else {
      for (int f = 0; f < F; ++f) {
        double mx = -1e300;
        for (int n = 0; n < N; ++n) mx = std::max(mx, (double)av[(size_t)(n * F + f)]);
        double sum = 0;
        for (int n = 0; n < N; ++n) {
          double e = std::exp((double)av[(size_t)(n * F + f)] - mx);
          out.v[(size_t)(n * F + f)] = (T)e;
          sum += e;
        }
        for (int n = 0; n < N; ++n) out.v[(size_t)(n * F + f)] = (T)((double)out.v[(size_t)(n * F + f)] / sum);
      }
    }
    Id id = make(std::move(out), {a});
    nodes_[(size_t)id].back = [id, a, rows, N, F](Graph& g) {
      if (!g.needs_grad(a)) return;
      const auto& y = g.val(id).v;
      const auto& gr = g.grad(id).v;
      auto& ga = g.grad(a).v;
      if (rows) {
        for (int n = 0; n < N; ++n) {
          double dot = 0;
          for (int f = 0; f < F; ++f)
            dot += (double)y[(size_t)(n * F + f)] * (double)gr[(size_t)(n * F + f)];
          for (int f = 0; f < F; ++f)
            ga[(size_t)(n * F + f)] +=
                (T)((double)y[(size_t)(n * F + f)] * ((double)gr[(size_t)(n * F + f)] - dot));
        }
      } else {
        for (int f = 0; f < F; ++f) {
          double dot = 0;
          for (int n = 0; n < N; ++n)
            dot += (double)y[(size_t)(n * F + f)] * (double)gr[(size_t)(n * F + f)];
          for (int n = 0; n < N; ++n)
            ga[(size_t)(n * F + f)] +=
                (T)((double)y[(size_t)(n * F + f)] * ((double)gr[(size_t)(n * F + f)] - dot));
        }
      }
    };
    return id;
  }

  static void copy_crop(const Tensor<T>& src_or_g, Tensor<T>& dst_or_g,
                        const std::vector<int>& full_shape,
                        const std::vector<int>& crop_shape, int m,
                        bool scatter) {
    const int C = full_shape[0];
    const int D = full_shape[1], H = full_shape[2], W = full_shape[3];
    const int d = crop_shape[1], h = crop_shape[2], w = crop_shape[3];
    for (int c = 0; c < C; ++c)
      for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            std::int64_t fi = ((std::int64_t)c * D + z + m) * H * W +
                              (std::int64_t)(y + m) * W + x + m;
            std::int64_t ci = ((std::int64_t)c * d + z) * h * w +
                              (std::int64_t)y * w + x;
            if (scatter)
              dst_or_g.v[(size_t)fi] += src_or_g.v[(size_t)ci];
            else
              dst_or_g.v[(size_t)ci] = src_or_g.v[(size_t)fi];
          }
  }

  // map[c, tz*ts+dz, ...] <-> tokens[n, c*ts^3 + ...]; fwd writes the map,
  // bwd accumulates into the token gradient.
  static void subpixel_fwd(const Tensor<T>& tokens, Tensor<T>& map, int C,
                           int ts, std::array<int, 3> tg) {
    subpixel_walk(tg, C, ts, [&](std::int64_t token_i, std::int64_t map_i) {
      map.v[(size_t)map_i] = tokens.v[(size_t)token_i];
    });
  }

  static void subpixel_bwd(Tensor<T>& tokens_grad, const Tensor<T>& map_grad,
                           int C, int ts, std::array<int, 3> tg) {
    subpixel_walk(tg, C, ts, [&](std::int64_t token_i, std::int64_t map_i) {
      tokens_grad.v[(size_t)token_i] += map_grad.v[(size_t)map_i];
    });
  }

  template <class F>
  static void subpixel_walk(std::array<int, 3> tg, int C, int ts, F&& fn) {
    const int gd = tg[0], gh = tg[1], gw = tg[2];
    const int D = gd * ts, H = gh * ts, W = gw * ts;
    const int Fdim = C * ts * ts * ts;
    for (int tz = 0; tz < gd; ++tz)
      for (int ty = 0; ty < gh; ++ty)
        for (int tx = 0; tx < gw; ++tx) {
          std::int64_t n = ((std::int64_t)tz * gh + ty) * gw + tx;
          for (int c = 0; c < C; ++c)
            for (int dz = 0; dz < ts; ++dz)
              for (int dy = 0; dy < ts; ++dy)
                for (int dx = 0; dx < ts; ++dx) {
                  std::int64_t f = ((std::int64_t)c * ts * ts * ts) +
                                   ((std::int64_t)dz * ts + dy) * ts + dx;
                  std::int64_t mi = ((std::int64_t)c * D + tz * ts + dz) * H * W +
                                    (std::int64_t)(ty * ts + dy) * W + tx * ts + dx;
                  fn(n * Fdim + f, mi);
                }
        }
  }

 public:
  // C[M,N] (+)= op(A)[M,K] * op(B)[K,N]; lda/ldb are row strides of the
  // stored (untransposed) matrices.
  static void gemm(bool ta, bool tb, int M, int N, int K, const T* A, int lda,
                   const T* B, int ldb, T* C, bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (M * (std::int64_t)N * K > 65536)
#endif
    for (int m = 0; m < M; ++m) {
      for (int n = 0; n < N; ++n) {
        double acc = accumulate ? (double)C[(std::int64_t)m * N + n] : 0.0;
        for (int k = 0; k < K; ++k) {
          double a = ta ? (double)A[(std::int64_t)k * lda + m]
                        : (double)A[(std::int64_t)m * lda + k];
          double b = tb ? (double)B[(std::int64_t)n * ldb + k]
                        : (double)B[(std::int64_t)k * ldb + n];
          acc += a * b;
        }
        C[(std::int64_t)m * N + n] = (T)acc;
      }
    }
  }

  static void conv3_forward(const Tensor<T>& x, const Tensor<T>& w,
                            const Tensor<T>& b, Tensor<T>& y, int pad) {
    const int Ci = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Co = w.shape[0], K = w.shape[2];
    const int Do = y.shape[1], Ho = y.shape[2], Wo = y.shape[3];
    // per-channel kernels with fixed accumulation order: results are
    // independent of the thread count
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int co = 0; co < Co; ++co) {
      auto run = [&](auto kf) {
        kernels::conv3_fwd_co<T, decltype(kf)::value>(
            x.v.data(), w.v.data() + (size_t)co * Ci * K * K * K,
            b.v[(size_t)co], y.v.data() + (size_t)co * Do * Ho * Wo, Ci, D, H,
            W, K, Do, Ho, Wo, pad);
      };
      kernels::dispatch_k(K, [&] { run(std::integral_constant<int, 3>{}); },
                          [&] { run(std::integral_constant<int, 1>{}); },
                          [&] { run(std::integral_constant<int, 0>{}); });
    }
  }

  static void conv3_backward(const Tensor<T>& x, const Tensor<T>& w,
                             const Tensor<T>& gy, int pad, Tensor<T>* gx,
                             Tensor<T>* gw, Tensor<T>* gb) {
    const int Ci = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Co = w.shape[0], K = w.shape[2];
    const int Do = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3];
    if (gb) {
      for (int co = 0; co < Co; ++co) {
        double acc = 0;
        const std::int64_t n = (std::int64_t)Do * Ho * Wo;
        for (std::int64_t i = 0; i < n; ++i) acc += (double)gy.v[(size_t)(co * n + i)];
        gb->v[(size_t)co] += (T)acc;
      }
    }
    if (gw) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int co = 0; co < Co; ++co) {
        auto run = [&](auto kf) {
          kernels::conv3_bwd_gw_co<T, decltype(kf)::value>(
              x.v.data(), gy.v.data() + (size_t)co * Do * Ho * Wo,
              gw->v.data() + (size_t)co * Ci * K * K * K, Ci, D, H, W, K, Do,
              Ho, Wo, pad);
        };
        kernels::dispatch_k(K, [&] { run(std::integral_constant<int, 3>{}); },
                            [&] { run(std::integral_constant<int, 1>{}); },
                            [&] { run(std::integral_constant<int, 0>{}); });
      }
    }
    if (gx) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int ci = 0; ci < Ci; ++ci) {
        auto run = [&](auto kf) {
          kernels::conv3_bwd_gx_ci<T, decltype(kf)::value>(
              gy.v.data(), w.v.data(), gx->v.data() + (size_t)ci * D * H * W,
              Co, Ci, ci, D, H, W, K, Do, Ho, Wo, pad);
        };
        kernels::dispatch_k(K, [&] { run(std::integral_constant<int, 3>{}); },
                            [&] { run(std::integral_constant<int, 1>{}); },
                            [&] { run(std::integral_constant<int, 0>{}); });
      }
    }
  }

  static void dwconv3_forward(const Tensor<T>& x, const Tensor<T>& w,
                              const Tensor<T>& b, Tensor<T>& y, int stride,
                              int pad) {
    const int C = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int K = w.shape[1];
    const int Do = y.shape[1], Ho = y.shape[2], Wo = y.shape[3];
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int c = 0; c < C; ++c)
      for (int oz = 0; oz < Do; ++oz)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            double acc = (double)b.v[(size_t)c];
            for (int kz = 0; kz < K; ++kz) {
              int iz = oz * stride + kz - pad;
              if (iz < 0 || iz >= D) continue;
              for (int ky = 0; ky < K; ++ky) {
                int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < K; ++kx) {
                  int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= W) continue;
                  acc += (double)x.v[(size_t)(((std::int64_t)c * D + iz) * H + iy) * W + ix] *
                         (double)w.v[(size_t)(((std::int64_t)c * K + kz) * K + ky) * K + kx];
                }
              }
            }
            y.v[(size_t)(((std::int64_t)c * Do + oz) * Ho + oy) * Wo + ox] = (T)acc;
          }
  }

  static void dwconv3_backward(const Tensor<T>& x, const Tensor<T>& w,
                               const Tensor<T>& gy, int stride, int pad,
                               Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
    const int C = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int K = w.shape[1];
    const int Do = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3];
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int c = 0; c < C; ++c) {
      double bacc = 0;
      for (int oz = 0; oz < Do; ++oz)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            double gyv = (double)gy.v[(size_t)(((std::int64_t)c * Do + oz) * Ho + oy) * Wo + ox];
            bacc += gyv;
            for (int kz = 0; kz < K; ++kz) {
              int iz = oz * stride + kz - pad;
              if (iz < 0 || iz >= D) continue;
              for (int ky = 0; ky < K; ++ky) {
                int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < K; ++kx) {
                  int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= W) continue;
                  if (gw)
                    gw->v[(size_t)(((std::int64_t)c * K + kz) * K + ky) * K + kx] +=
                        (T)(gyv * (double)x.v[(size_t)(((std::int64_t)c * D + iz) * H + iy) * W + ix]);
                  if (gx)
                    gx->v[(size_t)(((std::int64_t)c * D + iz) * H + iy) * W + ix] +=
                        (T)(gyv * (double)w.v[(size_t)(((std::int64_t)c * K + kz) * K + ky) * K + kx]);
                }
              }
            }
          }
      if (gb) gb->v[(size_t)c] += (T)bacc;
    }
  }

  void check_same(Id a, Id b, const char* what) {
    if (!val(a).same_shape(val(b)))
      throw AutodiffError(std::string(what) + ": shape mismatch " +
                          shape_str(val(a).shape) + " vs " +
                          shape_str(val(b).shape));
  }
};

}  // namespace iqt
