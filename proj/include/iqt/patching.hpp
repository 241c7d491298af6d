#pragma once

#include <array>
#include <vector>

#include "iqt/simulator.hpp"  // ShapeError
#include "iqt/tensor.hpp"
#include "iqt/volume.hpp"

namespace iqt {

// Decomposition of a volume into adjacent non-overlapping cubic patches.
struct PatchGrid {
  int patch = 0;                       // patch edge p
  std::array<int, 3> grid{0, 0, 0};    // (gd, gh, gw)
  std::array<int, 3> pad_before{0, 0, 0};
  std::array<int, 3> pad_after{0, 0, 0};
  std::array<int, 3> source_dims{0, 0, 0};

  int n_patches() const { return grid[0] * grid[1] * grid[2]; }
  std::array<int, 3> padded_dims() const {
    return {source_dims[0] + pad_before[0] + pad_after[0],
            source_dims[1] + pad_before[1] + pad_after[1],
            source_dims[2] + pad_before[2] + pad_after[2]};
  }
  int patch_id(int gz, int gy, int gx) const {
    return (gz * grid[1] + gy) * grid[2] + gx;
  }
  std::array<int, 3> patch_coord(int id) const {
    return {id / (grid[1] * grid[2]), (id / grid[2]) % grid[1], id % grid[2]};
  }
};

// 2x2x2 block of adjacent patches; the cross-batch mini-batch.
struct PatchGroup {
  std::array<int, 8> member_ids{};       // row-major over the 2x2x2 block
  std::array<bool, 8> duplicate{};       // true for grid-padding duplicates
  std::array<int, 3> group_origin{0, 0, 0};  // in grid coordinates
};

PatchGrid plan_patch_grid(const std::array<int, 3>& dims, int p);

// Reflect-pads v to the grid's padded dims.
Volume reflect_pad(const Volume& v, const PatchGrid& grid);

// Patches in grid row-major order, each a (p,p,p) tensor.
std::vector<Tensor<float>> extract_patches(const Volume& v_padded,
                                           const PatchGrid& grid);

struct PatchExtraction {
  PatchGrid grid;
  Volume padded;
  std::vector<Tensor<float>> patches;
};
PatchExtraction extract_patches(const Volume& v, int p);

std::vector<PatchGroup> make_groups(const PatchGrid& grid);

// Patch padded with a w_h-voxel halo gathered from the padded source volume
// (replicate fallback beyond the volume); shape (p+2w_h)^3.
Tensor<float> gather_halo(const Volume& v_padded, const PatchGrid& grid,
                          int patch_id, int w_h);

// Inverse of extract_patches; trims the reflect padding. When `order` is
// given it must be the identity (grid order); anything else is rejected.
Volume stitch(const std::vector<Tensor<float>>& patches, const PatchGrid& grid,
              const std::vector<int>& order = {});

}  // namespace iqt
