#include "iqt/patching.hpp"

#include <algorithm>
#include <cmath>

namespace iqt {

namespace {

// Reflect index (no edge repeat) into [0, n), e.g. n=4: -1 -> 1, 4 -> 2.
int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

}  // namespace

PatchGrid plan_patch_grid(const std::array<int, 3>& dims, int p) {
  if (p < 8) throw ShapeError("patch size must be >= 8");
  PatchGrid g;
  g.patch = p;
  g.source_dims = dims;
  for (int a = 0; a < 3; ++a) {
    int n = (dims[a] + p - 1) / p;
    int pad = n * p - dims[a];
    if (pad >= dims[a])
      throw ShapeError("patch size too large for reflect padding");
    g.grid[a] = n;
    g.pad_before[a] = pad / 2;
    g.pad_after[a] = pad - pad / 2;
  }
  return g;
}

Volume reflect_pad(const Volume& v, const PatchGrid& grid) {
  auto pd = grid.padded_dims();
  Volume out;
  out.dims = pd;
  out.spacing = v.spacing;
  out.lo = v.lo;
  out.hi = v.hi;
  out.data.resize((size_t)out.numel());
  for (int z = 0; z < pd[0]; ++z) {
    int sz = reflect_index(z - grid.pad_before[0], v.dims[0]);
    for (int y = 0; y < pd[1]; ++y) {
      int sy = reflect_index(y - grid.pad_before[1], v.dims[1]);
      for (int x = 0; x < pd[2]; ++x) {
        int sx = reflect_index(x - grid.pad_before[2], v.dims[2]);
        out.at(z, y, x) = v.at(sz, sy, sx);
      }
    }
  }
  return out;
}

std::vector<Tensor<float>> extract_patches(const Volume& v_padded,
                                           const PatchGrid& grid) {
  auto pd = grid.padded_dims();
  if (v_padded.dims != pd)
    throw ShapeError("extract_patches: volume is not grid-padded");
  const int p = grid.patch;
  std::vector<Tensor<float>> patches;
  patches.reserve((size_t)grid.n_patches());
  for (int gz = 0; gz < grid.grid[0]; ++gz)
    for (int gy = 0; gy < grid.grid[1]; ++gy)
      for (int gx = 0; gx < grid.grid[2]; ++gx) {
        Tensor<float> t({p, p, p});
        for (int z = 0; z < p; ++z)
          for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x)
              t[((std::int64_t)z * p + y) * p + x] =
                  v_padded.at(gz * p + z, gy * p + y, gx * p + x);
        patches.push_back(std::move(t));
      }
  return patches;
}

PatchExtraction extract_patches(const Volume& v, int p) {
  PatchExtraction pe;
  pe.grid = plan_patch_grid(v.dims, p);
  pe.padded = reflect_pad(v, pe.grid);
  pe.patches = extract_patches(pe.padded, pe.grid);
  return pe;
}

std::vector<PatchGroup> make_groups(const PatchGrid& grid) {
  // pad odd grid extents by duplicating the last slab of patches
  std::array<int, 3> ge;
  for (int a = 0; a < 3; ++a) ge[a] = grid.grid[a] + (grid.grid[a] & 1);
  std::vector<PatchGroup> groups;
  for (int gz = 0; gz < ge[0]; gz += 2)
    for (int gy = 0; gy < ge[1]; gy += 2)
      for (int gx = 0; gx < ge[2]; gx += 2) {
        PatchGroup g;
        g.group_origin = {gz, gy, gx};
        int m = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx, ++m) {
              int cz = gz + dz, cy = gy + dy, cx = gx + dx;
              bool dup = false;
              if (cz >= grid.grid[0]) { cz = grid.grid[0] - 1; dup = true; }
              if (cy >= grid.grid[1]) { cy = grid.grid[1] - 1; dup = true; }
              if (cx >= grid.grid[2]) { cx = grid.grid[2] - 1; dup = true; }
              g.member_ids[m] = grid.patch_id(cz, cy, cx);
              g.duplicate[m] = dup;
            }
        groups.push_back(g);
      }
  return groups;
}

Tensor<float> gather_halo(const Volume& v_padded, const PatchGrid& grid,
                          int patch_id, int w_h) {
  if (w_h < 0) throw ShapeError("gather_halo: negative halo width");
  auto pd = grid.padded_dims();
  if (v_padded.dims != pd)
    throw ShapeError("gather_halo: volume is not grid-padded");
  const int p = grid.patch;
  auto gc = grid.patch_coord(patch_id);
  const int q = p + 2 * w_h;
  Tensor<float> t({q, q, q});
  for (int z = 0; z < q; ++z) {
    int sz = std::clamp(gc[0] * p + z - w_h, 0, pd[0] - 1);
    for (int y = 0; y < q; ++y) {
      int sy = std::clamp(gc[1] * p + y - w_h, 0, pd[1] - 1);
      for (int x = 0; x < q; ++x) {
        int sx = std::clamp(gc[2] * p + x - w_h, 0, pd[2] - 1);
        t[((std::int64_t)z * q + y) * q + x] = v_padded.at(sz, sy, sx);
      }
    }
  }
  return t;
}

Volume stitch(const std::vector<Tensor<float>>& patches, const PatchGrid& grid,
              const std::vector<int>& order) {
  if ((int)patches.size() != grid.n_patches())
    throw ShapeError("stitch: patch count does not match grid");
  if (!order.empty()) {
    if ((int)order.size() != grid.n_patches())
      throw ShapeError("stitch: order length mismatch");
    for (int i = 0; i < (int)order.size(); ++i)
      if (order[i] != i)
        throw ShapeError("stitch: patches must arrive in grid order");
  }
  const int p = grid.patch;
  for (const auto& t : patches)
    if (t.shape != std::vector<int>{p, p, p} &&
        t.shape != std::vector<int>{1, p, p, p})
      throw ShapeError("stitch: patch shape mismatch");

  auto pd = grid.padded_dims();
  Volume padded;
  padded.dims = pd;
  padded.data.resize((size_t)padded.numel());
  int id = 0;
  for (int gz = 0; gz < grid.grid[0]; ++gz)
    for (int gy = 0; gy < grid.grid[1]; ++gy)
      for (int gx = 0; gx < grid.grid[2]; ++gx, ++id) {
        const auto& t = patches[id];
        for (int z = 0; z < p; ++z)
          for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x)
              padded.at(gz * p + z, gy * p + y, gx * p + x) =
                  t[((std::int64_t)z * p + y) * p + x];
      }

  Volume out;
  out.dims = grid.source_dims;
  out.data.resize((size_t)out.numel());
  for (int z = 0; z < out.dims[0]; ++z)
    for (int y = 0; y < out.dims[1]; ++y)
      for (int x = 0; x < out.dims[2]; ++x)
        out.at(z, y, x) = padded.at(z + grid.pad_before[0],
                                    y + grid.pad_before[1],
                                    x + grid.pad_before[2]);
  out.update_range();
  return out;
}

}  // namespace iqt
