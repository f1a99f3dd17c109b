#pragma once
#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "svfreg/errors.hpp"

namespace svfreg {

struct GridMeta {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  GridMeta() = default;
  GridMeta(int nx, int ny, int nz) : dims{nx, ny, nz} {}

  std::size_t voxel_count() const {
    return std::size_t(dims[0]) * std::size_t(dims[1]) * std::size_t(dims[2]);
  }
  void validate() const;  // dims >= 2 per axis, spacing > 0
  bool operator==(const GridMeta& o) const { return dims == o.dims && spacing == o.spacing; }
  bool operator!=(const GridMeta& o) const { return !(*this == o); }
};

// Scalar volume, x fastest: index = x + nx*(y + ny*z).
struct Volume {
  GridMeta meta;
  std::vector<double> values;

  static Volume zeros(const GridMeta& m);
  double& at(int x, int y, int z) {
    return values[std::size_t(x) + std::size_t(meta.dims[0]) *
                                       (std::size_t(y) + std::size_t(meta.dims[1]) * std::size_t(z))];
  }
  double at(int x, int y, int z) const {
    return values[std::size_t(x) + std::size_t(meta.dims[0]) *
                                       (std::size_t(y) + std::size_t(meta.dims[1]) * std::size_t(z))];
  }
};

struct LabelMap {
  GridMeta meta;
  std::vector<std::uint16_t> labels;
  int class_count = 0;
};

// Displacement/velocity field in voxel units, component-planar storage.
struct VectorField {
  GridMeta meta;
  std::array<std::vector<double>, 3> comp;

  static VectorField zeros(const GridMeta& m);
};

double sample_trilinear(const Volume& vol, double x, double y, double z);
void sample_field(const VectorField& f, double x, double y, double z, double out[3]);

// out(x) = vol sampled at x + disp(x)
Volume warp_volume(const Volume& vol, const VectorField& disp);
LabelMap warp_labels_nn(const LabelMap& lab, const VectorField& disp);

// result(x) = inner(x) + outer sampled at x + inner(x)
VectorField compose(const VectorField& outer, const VectorField& inner);

Volume downsample_volume(const Volume& vol);      // 2x2x2 box average, even dims required
VectorField downsample_field(const VectorField& f);  // box average, magnitudes halved
VectorField upsample_field(const VectorField& f);    // trilinear x2, magnitudes doubled

// Central differences in the interior, one-sided at the boundary.
VectorField spatial_gradient(const Volume& vol);

Volume gaussian_smooth(const Volume& vol, double sigma);
// taper_boundary samples zero outside the grid instead of replicating the
// edge; keeps noise variance stationary so the field max lands interior
VectorField gaussian_smooth(const VectorField& f, double sigma, bool taper_boundary = false);

}  // namespace svfreg
