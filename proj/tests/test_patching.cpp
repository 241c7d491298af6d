#include <set>
#include <vector>

#include "doctest.h"
#include "iqt/patching.hpp"
#include "iqt/rng.hpp"

using namespace iqt;

namespace {

Volume random_volume(std::array<int, 3> dims, std::uint64_t seed) {
  Volume v;
  v.dims = dims;
  v.data.resize((size_t)v.numel());
  Rng r(seed);
  for (auto& x : v.data) x = (float)r.normal();
  v.update_range();
  return v;
}

}  // namespace

TEST_CASE("grid plan covers the volume with minimal padding") {
  PatchGrid g = plan_patch_grid({48, 50, 33}, 16);
  CHECK(g.grid == std::array<int, 3>{3, 4, 3});
  CHECK(g.pad_before[0] + g.pad_after[0] == 0);
  CHECK(g.pad_before[1] + g.pad_after[1] == 14);
  CHECK(g.pad_before[2] + g.pad_after[2] == 15);
  auto pd = g.padded_dims();
  CHECK(pd == std::array<int, 3>{48, 64, 48});
  CHECK(g.n_patches() == 36);
  // coord <-> id round trip
  for (int id = 0; id < g.n_patches(); ++id) {
    auto c = g.patch_coord(id);
    CHECK(g.patch_id(c[0], c[1], c[2]) == id);
  }
  CHECK_THROWS_AS(plan_patch_grid({48, 48, 48}, 4), ShapeError);
  CHECK_THROWS_AS(plan_patch_grid({8, 8, 8}, 16), ShapeError);  // pad >= dims
}

TEST_CASE("stitch is the exact inverse of extract on random shapes") {
  Rng r(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::array<int, 3> dims;
    for (auto& d : dims) d = 17 + (int)r.uniform_int(40);  // 17..56
    Volume v = random_volume(dims, 100 + (std::uint64_t)trial);
    PatchExtraction pe = extract_patches(v, 16);
    Volume back = stitch(pe.patches, pe.grid);
    REQUIRE(back.dims == v.dims);
    for (size_t i = 0; i < v.data.size(); ++i)
      CHECK(back.data[i] == v.data[i]);  // bit-exact
  }
}

TEST_CASE("stitch accepts only identity order and matching shapes") {
  Volume v = random_volume({32, 32, 32}, 5);
  PatchExtraction pe = extract_patches(v, 16);
  std::vector<int> identity(pe.patches.size());
  for (size_t i = 0; i < identity.size(); ++i) identity[i] = (int)i;
  CHECK_NOTHROW(stitch(pe.patches, pe.grid, identity));
  std::swap(identity[0], identity[1]);
  CHECK_THROWS_AS(stitch(pe.patches, pe.grid, identity), ShapeError);
  auto fewer = pe.patches;
  fewer.pop_back();
  CHECK_THROWS_AS(stitch(fewer, pe.grid), ShapeError);
}

TEST_CASE("reflect padding mirrors without repeating the edge") {
  Volume v;
  v.dims = {5, 5, 5};
  v.data.resize(125);
  for (int i = 0; i < 125; ++i) v.data[i] = (float)i;
  v.update_range();
  PatchGrid g = plan_patch_grid({5, 5, 5}, 8);  // pad 3 -> 1 before, 2 after
  Volume p = reflect_pad(v, g);
  CHECK(p.dims == std::array<int, 3>{8, 8, 8});
  // source index -1 reflects to 1 (no edge repeat); 5 -> 3, 6 -> 2
  CHECK(p.at(1, 1, 1) == v.at(0, 0, 0));
  CHECK(p.at(0, 1, 1) == v.at(1, 0, 0));
  CHECK(p.at(5, 1, 1) == v.at(4, 0, 0));
  CHECK(p.at(6, 1, 1) == v.at(3, 0, 0));
  CHECK(p.at(7, 1, 1) == v.at(2, 0, 0));
}

TEST_CASE("halo slabs equal the neighbouring patch slabs exactly") {
  Volume v = random_volume({48, 48, 48}, 9);
  PatchGrid g = plan_patch_grid(v.dims, 16);
  Volume padded = reflect_pad(v, g);
  auto patches = extract_patches(padded, g);
  const int w = 4, p = 16, q = p + 2 * w;

  // patch (1,1,1) is interior: its halo must reproduce neighbour voxels
  int id = g.patch_id(1, 1, 1);
  Tensor<float> h = gather_halo(padded, g, id, w);
  REQUIRE(h.shape == std::vector<int>{q, q, q});
  // core equals the patch itself
  const auto& core = patches[(size_t)id];
  for (int z = 0; z < p; ++z)
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x)
        CHECK(h[((std::int64_t)(z + w) * q + y + w) * q + x + w] ==
              core[((std::int64_t)z * p + y) * p + x]);
  // left halo slab equals the right edge of the -x neighbour
  int nid = g.patch_id(1, 1, 0);
  const auto& nb = patches[(size_t)nid];
  for (int z = 0; z < p; ++z)
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < w; ++x)
        CHECK(h[((std::int64_t)(z + w) * q + y + w) * q + x] ==
              nb[((std::int64_t)z * p + y) * p + (p - w + x)]);
}

TEST_CASE("halo beyond the padded volume replicates the border") {
  Volume v = random_volume({16, 16, 16}, 11);
  PatchGrid g = plan_patch_grid(v.dims, 16);  // single patch, no padding
  Volume padded = reflect_pad(v, g);
  Tensor<float> h = gather_halo(padded, g, 0, 4);
  const int q = 24;
  // voxels outside clamp to the border voxel
  CHECK(h[0] == v.at(0, 0, 0));
  CHECK(h[((std::int64_t)0 * q + 0) * q + 5] == v.at(0, 0, 1));
  CHECK(h[((std::int64_t)23 * q + 23) * q + 23] == v.at(15, 15, 15));
}

TEST_CASE("groups partition the grid and flag duplicates") {
  for (auto dims : {std::array<int, 3>{48, 48, 48},   // grid 3x3x3 (odd)
                    std::array<int, 3>{64, 64, 32}})  // grid 4x4x2 (even)
  {
    PatchGrid g = plan_patch_grid(dims, 16);
    auto groups = make_groups(g);
    std::multiset<int> distinct;
    for (const auto& gr : groups)
      for (int m = 0; m < 8; ++m) {
        CHECK(gr.member_ids[m] >= 0);
        CHECK(gr.member_ids[m] < g.n_patches());
        if (!gr.duplicate[m]) distinct.insert(gr.member_ids[m]);
      }
    // every patch appears exactly once as a non-duplicate member
    CHECK((int)distinct.size() == g.n_patches());
    for (int id = 0; id < g.n_patches(); ++id)
      CHECK(distinct.count(id) == 1);
  }
}

TEST_CASE("even grids have no duplicate members") {
  PatchGrid g = plan_patch_grid({32, 32, 32}, 16);
  auto groups = make_groups(g);
  CHECK(groups.size() == 1);
  for (const auto& gr : groups)
    for (int m = 0; m < 8; ++m) CHECK_FALSE(gr.duplicate[m]);
}

TEST_CASE("2x2x2 group members are spatially adjacent") {
  PatchGrid g = plan_patch_grid({64, 64, 64}, 16);
  auto groups = make_groups(g);
  for (const auto& gr : groups) {
    int m = 0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx, ++m) {
          auto c = g.patch_coord(gr.member_ids[m]);
          CHECK(c[0] == gr.group_origin[0] + dz);
          CHECK(c[1] == gr.group_origin[1] + dy);
          CHECK(c[2] == gr.group_origin[2] + dx);
        }
  }
}
