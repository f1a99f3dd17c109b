#pragma once
#include <algorithm>
#include <cstddef>

namespace svfreg::detail {

// Shared trilinear kernel.  Every sampling path in the project (grid ops,
// integrators, differentiable warp) goes through these helpers so that the
// arithmetic is identical everywhere.  Out-of-range coordinates clamp to the
// edge; `active` marks axes whose derivative survives the clamp.

struct TrilinearCell {
  int i0[3];
  double frac[3];
  bool active[3];
};

inline TrilinearCell locate(double x, double y, double z, int nx, int ny, int nz) {
  TrilinearCell c;
  const double co[3] = {x, y, z};
  const int n[3] = {nx, ny, nz};
  for (int a = 0; a < 3; ++a) {
    double v = co[a];
    const double hi = double(n[a] - 1);
    c.active[a] = (v > 0.0 && v < hi);
    v = std::clamp(v, 0.0, hi);
    int i = int(v);
    if (i > n[a] - 2) i = n[a] - 2;
    c.i0[a] = i;
    c.frac[a] = v - double(i);
  }
  return c;
}

inline std::size_t cell_base(const TrilinearCell& c, int nx, int ny) {
  return std::size_t(c.i0[0]) +
         std::size_t(nx) * (std::size_t(c.i0[1]) + std::size_t(ny) * std::size_t(c.i0[2]));
}

template <class T>
inline double cell_sample(const T* plane, int nx, int ny, const TrilinearCell& c) {
  const double wx[2] = {1.0 - c.frac[0], c.frac[0]};
  const double wy[2] = {1.0 - c.frac[1], c.frac[1]};
  const double wz[2] = {1.0 - c.frac[2], c.frac[2]};
  const std::size_t base = cell_base(c, nx, ny);
  const std::size_t sy = std::size_t(nx);
  const std::size_t sz = std::size_t(nx) * std::size_t(ny);
  double acc = 0.0;
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 2; ++i)
        acc += wz[k] * wy[j] * wx[i] *
               double(plane[base + std::size_t(k) * sz + std::size_t(j) * sy + std::size_t(i)]);
  return acc;
}

// d(sample)/d(coordinate) per axis; zero on clamped axes.
template <class T>
inline void cell_partials(const T* plane, int nx, int ny, const TrilinearCell& c, double out[3]) {
  const double wx[2] = {1.0 - c.frac[0], c.frac[0]};
  const double wy[2] = {1.0 - c.frac[1], c.frac[1]};
  const double wz[2] = {1.0 - c.frac[2], c.frac[2]};
  const std::size_t base = cell_base(c, nx, ny);
  const std::size_t sy = std::size_t(nx);
  const std::size_t sz = std::size_t(nx) * std::size_t(ny);
  double dx = 0.0, dy = 0.0, dz = 0.0;
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j) {
      const double p0 = double(plane[base + std::size_t(k) * sz + std::size_t(j) * sy]);
      const double p1 = double(plane[base + std::size_t(k) * sz + std::size_t(j) * sy + 1]);
      dx += wz[k] * wy[j] * (p1 - p0);
    }
  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < 2; ++i) {
      const double p0 = double(plane[base + std::size_t(k) * sz + std::size_t(i)]);
      const double p1 = double(plane[base + std::size_t(k) * sz + sy + std::size_t(i)]);
      dy += wz[k] * wx[i] * (p1 - p0);
    }
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i < 2; ++i) {
      const double p0 = double(plane[base + std::size_t(j) * sy + std::size_t(i)]);
      const double p1 = double(plane[base + sz + std::size_t(j) * sy + std::size_t(i)]);
      dz += wy[j] * wx[i] * (p1 - p0);
    }
  out[0] = c.active[0] ? dx : 0.0;
  out[1] = c.active[1] ? dy : 0.0;
  out[2] = c.active[2] ? dz : 0.0;
}

// g[corner] += v * w_corner  (adjoint of cell_sample w.r.t. the plane)
template <class T>
inline void cell_scatter(T* grad_plane, int nx, int ny, const TrilinearCell& c, double v) {
  const double wx[2] = {1.0 - c.frac[0], c.frac[0]};
  const double wy[2] = {1.0 - c.frac[1], c.frac[1]};
  const double wz[2] = {1.0 - c.frac[2], c.frac[2]};
  const std::size_t base = cell_base(c, nx, ny);
  const std::size_t sy = std::size_t(nx);
  const std::size_t sz = std::size_t(nx) * std::size_t(ny);
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 2; ++i)
        grad_plane[base + std::size_t(k) * sz + std::size_t(j) * sy + std::size_t(i)] +=
            T(wz[k] * wy[j] * wx[i] * v);
}

}  // namespace svfreg::detail
