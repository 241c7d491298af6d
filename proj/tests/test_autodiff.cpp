#include <chrono>
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "iqt/autodiff.hpp"
#include "iqt/denoiser.hpp"
#include "iqt/rng.hpp"

using namespace iqt;
using G = Graph<double>;
using Id = G::Id;

namespace {

// Generic central-finite-difference checker for a scalar-valued graph
// builder. Every element of every input is perturbed (capped per input).
void fd_check(const std::vector<std::vector<int>>& shapes,
              const std::function<Id(G&, const std::vector<Id>&)>& build,
              double tol = 1e-5, std::uint64_t seed = 1, int cap = 64) {
  Rng r(seed);
  std::vector<Tensor<double>> vals;
  for (const auto& s : shapes) {
    Tensor<double> t(s);
    for (auto& x : t.v) x = 0.5 * r.normal();
    vals.push_back(std::move(t));
  }

  auto forward = [&](int pi, std::int64_t pj, double delta) {
    G g;
    std::vector<Id> ids;
    for (int i = 0; i < (int)vals.size(); ++i) {
      Tensor<double> t = vals[(size_t)i];
      if (i == pi) t[pj] += delta;
      ids.push_back(g.input(std::move(t), true));
    }
    return g.val(build(g, ids))[0];
  };

  G g;
  std::vector<Id> ids;
  for (const auto& t : vals) ids.push_back(g.input(t, true));
  Id loss = build(g, ids);
  REQUIRE(g.val(loss).numel() == 1);
  g.backward(loss);

  const double eps = 1e-5;
  for (int i = 0; i < (int)vals.size(); ++i) {
    std::int64_t n = vals[(size_t)i].numel();
    std::int64_t stride = std::max<std::int64_t>(1, n / cap);
    for (std::int64_t j = 0; j < n; j += stride) {
      double up = forward(i, j, eps);
      double dn = forward(i, j, -eps);
      double num = (up - dn) / (2 * eps);
      double ana = g.grad(ids[(size_t)i])[j];
      double denom = std::max({std::abs(num), std::abs(ana), 1e-5});
      CHECK_MESSAGE(std::abs(num - ana) / denom <= tol,
                    "input ", i, " elem ", j, " analytic ", ana, " numeric ",
                    num);
    }
  }
}

Tensor<double> rand_t(std::vector<int> shape, std::uint64_t seed) {
  Tensor<double> t(std::move(shape));
  Rng r(seed);
  for (auto& x : t.v) x = 0.5 * r.normal();
  return t;
}

}  // namespace

TEST_CASE("elementwise op gradients") {
  Tensor<double> tgt = rand_t({2, 3, 3, 3}, 99);
  fd_check({{2, 3, 3, 3}, {2, 3, 3, 3}},
           [&](G& g, const std::vector<Id>& in) {
             return g.mse(g.add(in[0], in[1]), tgt);
           });
  fd_check({{2, 3, 3, 3}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.scale(in[0], -1.7), tgt);
  });
  fd_check({{2, 3, 3, 3}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.mish(in[0]), tgt);
  });
  Tensor<double> c = rand_t({2, 3, 3, 3}, 98);
  fd_check({{2, 3, 3, 3}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.affine_const(in[0], 0.7, c, -1.3), tgt);
  });
}

TEST_CASE("film gradient") {
  Tensor<double> tgt = rand_t({4, 3, 3, 3}, 97);
  fd_check({{4, 3, 3, 3}, {4}, {4}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.film(in[0], in[1], in[2]), tgt);
  });
}

TEST_CASE("shape op gradients") {
  Tensor<double> tgt6 = rand_t({6}, 96);
  fd_check({{2, 2, 3}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.slice_flat(in[0], 3, 6), tgt6);
  });
  Tensor<double> tgt_r = rand_t({3, 4}, 95);
  fd_check({{2, 2, 3}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.reshape(in[0], {3, 4}), tgt_r);
  });
  Tensor<double> tgt_cat = rand_t({5, 2, 2, 2}, 94);
  fd_check({{2, 2, 2, 2}, {3, 2, 2, 2}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.concat_ch(in[0], in[1]), tgt_cat);
  });
  Tensor<double> tgt_crop = rand_t({2, 2, 2, 2}, 93);
  fd_check({{2, 6, 6, 6}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.crop_center(in[0], 2), tgt_crop);
  });
}

TEST_CASE("token op gradients") {
  Tensor<double> tgt_tok = rand_t({8, 3}, 92);
  fd_check({{3, 2, 2, 2}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.map_to_tokens(in[0]), tgt_tok);
  });
  Tensor<double> tgt_map = rand_t({3, 2, 2, 2}, 91);
  fd_check({{8, 3}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.tokens_to_map(in[0], {2, 2, 2}), tgt_map);
  });
  Tensor<double> tgt_sub = rand_t({2, 4, 4, 4}, 90);
  fd_check({{8, 16}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.subpixel_to_map(in[0], 2, 2, {2, 2, 2}), tgt_sub);
  });
}

TEST_CASE("matrix op gradients") {
  Tensor<double> tgt = rand_t({3, 5}, 89);
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb) {
      std::vector<int> sa = ta ? std::vector<int>{4, 3} : std::vector<int>{3, 4};
      std::vector<int> sb = tb ? std::vector<int>{5, 4} : std::vector<int>{4, 5};
      fd_check({sa, sb}, [&](G& g, const std::vector<Id>& in) {
        return g.mse(g.matmul(in[0], in[1], ta != 0, tb != 0), tgt);
      });
    }
  fd_check({{3, 4}, {4, 5}, {5}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.linear(in[0], in[1], in[2]), tgt);
  });
  Tensor<double> tgt2 = rand_t({4, 2}, 88);
  fd_check({{4, 6}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.slice_cols(in[0], 1, 2), tgt2);
  });
  Tensor<double> tgt_cc = rand_t({4, 5}, 87);
  fd_check({{4, 2}, {4, 3}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.concat_cols({in[0], in[1]}), tgt_cc);
  });
  Tensor<double> tgt_cr = rand_t({5, 3}, 86);
  fd_check({{2, 3}, {3, 3}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.concat_rows({in[0], in[1]}), tgt_cr);
  });
}

TEST_CASE("softmax gradients") {
  Tensor<double> tgt = rand_t({4, 5}, 85);
  fd_check({{4, 5}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.softmax_rows(in[0]), tgt);
  });
  fd_check({{4, 5}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.softmax_cols(in[0]), tgt);
  });
}

TEST_CASE("groupnorm gradient") {
  Tensor<double> tgt = rand_t({4, 3, 3, 3}, 84);
  fd_check(
      {{4, 3, 3, 3}, {4}, {4}},
      [&](G& g, const std::vector<Id>& in) {
        return g.mse(g.groupnorm(in[0], 2, in[1], in[2]), tgt);
      });
}

TEST_CASE("conv gradients") {
  Tensor<double> tgt1 = rand_t({4, 5, 5, 5}, 83);
  fd_check({{3, 5, 5, 5}, {4, 3, 3, 3, 3}, {4}},
           [&](G& g, const std::vector<Id>& in) {
             return g.mse(g.conv3(in[0], in[1], in[2], 1), tgt1);
           });
  Tensor<double> tgt0 = rand_t({4, 3, 3, 3}, 82);
  fd_check({{3, 5, 5, 5}, {4, 3, 3, 3, 3}, {4}},
           [&](G& g, const std::vector<Id>& in) {
             return g.mse(g.conv3(in[0], in[1], in[2], 0), tgt0);
           });
  // 1x1x1 projection
  Tensor<double> tgtp = rand_t({2, 4, 4, 4}, 81);
  fd_check({{3, 4, 4, 4}, {2, 3, 1, 1, 1}, {2}},
           [&](G& g, const std::vector<Id>& in) {
             return g.mse(g.conv3(in[0], in[1], in[2], 0), tgtp);
           });
}

TEST_CASE("depthwise conv gradients") {
  // tokenizer form: kernel = stride = 2, pad 0
  Tensor<double> tgt_tok = rand_t({3, 2, 2, 2}, 80);
  fd_check({{3, 4, 4, 4}, {3, 2, 2, 2}, {3}},
           [&](G& g, const std::vector<Id>& in) {
             return g.mse(g.dwconv3(in[0], in[1], in[2], 2, 0), tgt_tok);
           });
  // refiner form: kernel 3, stride 1, pad 1
  Tensor<double> tgt_ref = rand_t({3, 4, 4, 4}, 79);
  fd_check({{3, 4, 4, 4}, {3, 3, 3, 3}, {3}},
           [&](G& g, const std::vector<Id>& in) {
             return g.mse(g.dwconv3(in[0], in[1], in[2], 1, 1), tgt_ref);
           });
}

TEST_CASE("conv3 forward equals a naive triple-loop oracle") {
  Rng r(42);
  const int Ci = 3, Co = 4, D = 6, H = 5, W = 7, K = 3, pad = 1;
  Tensor<double> x({Ci, D, H, W}), w({Co, Ci, K, K, K}), b({Co});
  for (auto& v : x.v) v = r.normal();
  for (auto& v : w.v) v = r.normal();
  for (auto& v : b.v) v = r.normal();
  G g;
  Id y = g.conv3(g.input(x), g.input(w), g.input(b), pad);
  const auto& yv = g.val(y);
  REQUIRE(yv.shape == std::vector<int>{Co, D, H, W});
  for (int co = 0; co < Co; ++co)
    for (int z = 0; z < D; ++z)
      for (int yy = 0; yy < H; ++yy)
        for (int xx = 0; xx < W; ++xx) {
          double acc = b[co];
          for (int ci = 0; ci < Ci; ++ci)
            for (int kz = 0; kz < K; ++kz)
              for (int ky = 0; ky < K; ++ky)
                for (int kx = 0; kx < K; ++kx) {
                  int iz = z + kz - pad, iy = yy + ky - pad, ix = xx + kx - pad;
                  if (iz < 0 || iz >= D || iy < 0 || iy >= H || ix < 0 ||
                      ix >= W)
                    continue;
                  acc += w[(((std::int64_t)co * Ci + ci) * K + kz) * K * K +
                           (std::int64_t)ky * K + kx] *
                         x[((std::int64_t)ci * D + iz) * H * W +
                           (std::int64_t)iy * W + ix];
                }
          double got = yv[((std::int64_t)co * D + z) * H * W +
                          (std::int64_t)yy * W + xx];
          CHECK(got == doctest::Approx(acc).epsilon(1e-10));
        }
}

TEST_CASE("channel shuffle round trips bit-exactly and matches index oracle") {
  Rng r(17);
  for (int trial = 0; trial < 10; ++trial) {
    int C = 1 + (int)r.uniform_int(4);
    int d = 2 * (1 + (int)r.uniform_int(3));
    Tensor<double> x({C, d, d, d});
    for (auto& v : x.v) v = r.normal();
    G g;
    Id a = g.input(x);
    Id down = g.channel_shuffle_down(a, 2);
    Id up = g.channel_shuffle_up(down, 2);
    const auto& back = g.val(up);
    REQUIRE(back.shape == x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(back[i] == x[i]);

    // nested-loop index oracle for the down mapping:
    // out[c*r^3 + (dz*r+dy)*r+dx][z][y][x] = in[c][z*r+dz][y*r+dy][x*r+dx]
    const auto& dn = g.val(down);
    const int hd = d / 2;
    REQUIRE(dn.shape == std::vector<int>{C * 8, hd, hd, hd});
    for (int c = 0; c < C; ++c)
      for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            for (int z = 0; z < hd; ++z)
              for (int y = 0; y < hd; ++y)
                for (int xx = 0; xx < hd; ++xx) {
                  int oc = c * 8 + (dz * 2 + dy) * 2 + dx;
                  double got = dn[(((std::int64_t)oc * hd + z) * hd + y) * hd +
                                  xx];
                  double want = x[(((std::int64_t)c * d + (2 * z + dz)) * d +
                                   (2 * y + dy)) *
                                      d +
                                  (2 * xx + dx)];
                  CHECK(got == want);
                }
  }
  // shuffle gradients
  Tensor<double> tgt = rand_t({16, 2, 2, 2}, 78);
  fd_check({{2, 4, 4, 4}}, [&](G& g, const std::vector<Id>& in) {
    return g.mse(g.channel_shuffle_down(in[0], 2), tgt);
  });
}

TEST_CASE("efficient attention equals the naive reference") {
  Rng r(23);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 1 + (int)r.uniform_int(512);
    int m = 1 + (int)r.uniform_int(512);
    int dk = 1 + (int)r.uniform_int(32);
    Tensor<float> q({n, dk}), k({m, dk}), v({m, dk});
    for (auto& x : q.v) x = (float)r.normal();
    for (auto& x : k.v) x = (float)r.normal();
    for (auto& x : v.v) x = (float)r.normal();
    Tensor<float> fast = efficient_attention_single(q, k, v);
    Tensor<float> ref = efficient_attention_naive(q, k, v);
    REQUIRE(fast.shape == ref.shape);
    for (std::int64_t i = 0; i < fast.numel(); ++i)
      CHECK(std::abs(fast[i] - ref[i]) <= 1e-6);
  }
}

TEST_CASE("attention context stage scales linearly in token count") {
  // median-of-5 runtime at 2n tokens must be <= 2.2x the runtime at n
  const int n = 4096, dk = 32;
  auto run = [&](int tokens) {
    Tensor<float> q({tokens, dk}), k({tokens, dk}), v({tokens, dk});
    Rng r(3);
    for (auto& x : q.v) x = (float)r.normal();
    for (auto& x : k.v) x = (float)r.normal();
    for (auto& x : v.v) x = (float)r.normal();
    std::vector<double> times;
    for (int rep = 0; rep < 5; ++rep) {
      auto t0 = std::chrono::steady_clock::now();
      double sink = 0;
      for (int it = 0; it < 20; ++it) {
        Tensor<float> out = efficient_attention_single(q, k, v);
        sink += out[0];
      }
      times.push_back(std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - t0)
                          .count() +
                      1e-12 * sink);
    }
    std::sort(times.begin(), times.end());
    return times[2];
  };
  run(n);  // warm up
  double t1 = run(n);
  double t2 = run(2 * n);
  CHECK(t2 <= 2.2 * t1);
}

TEST_CASE("graph rejects invalid uses") {
  G g;
  Id a = g.input(rand_t({2, 3}, 1), true);
  CHECK_THROWS_AS(g.backward(a), AutodiffError);  // non-scalar loss
  CHECK_THROWS_AS(g.slice_flat(a, 0, 99), AutodiffError);
  CHECK_THROWS_AS(g.reshape(a, {5, 5}), AutodiffError);
  CHECK_THROWS_AS(g.matmul(a, g.input(rand_t({5, 2}, 2))), AutodiffError);
}
