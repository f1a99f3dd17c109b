#pragma once

#include <svfreg/grid.hpp>
#include <svfreg/rng.hpp>
#include <svfreg/synth.hpp>

#include <cmath>

namespace testutil {

inline svfreg::Volume random_volume(svfreg::GridMeta meta, std::uint64_t seed,
                                    double lo = 0.0, double hi = 1.0) {
  svfreg::Volume v = svfreg::Volume::zeros(meta);
  svfreg::Rng rng(seed);
  for (auto& x : v.values) x = rng.uniform(lo, hi);
  return v;
}

inline svfreg::VectorField random_smooth_field(svfreg::GridMeta meta, std::uint64_t seed,
                                               double sigma, double max_mag) {
  return svfreg::smooth_random_field(meta, sigma, max_mag, seed);
}

// x-ramp: value equals the x coordinate
inline svfreg::Volume ramp_x(svfreg::GridMeta meta, double scale = 1.0) {
  svfreg::Volume v = svfreg::Volume::zeros(meta);
  for (int z = 0; z < meta.dims[2]; ++z)
    for (int y = 0; y < meta.dims[1]; ++y)
      for (int x = 0; x < meta.dims[0]; ++x) v.at(x, y, z) = scale * x;
  return v;
}

inline svfreg::VectorField constant_field(svfreg::GridMeta meta, double cx, double cy,
                                          double cz) {
  svfreg::VectorField f = svfreg::VectorField::zeros(meta);
  for (std::size_t i = 0; i < f.comp[0].size(); ++i) {
    f.comp[0][i] = cx;
    f.comp[1][i] = cy;
    f.comp[2][i] = cz;
  }
  return f;
}

inline double rms_interior_diff(const svfreg::VectorField& a, const svfreg::VectorField& b,
                                int margin) {
  const auto& d = a.meta.dims;
  double acc = 0.0;
  std::size_t n = 0;
  for (int z = margin; z < d[2] - margin; ++z)
    for (int y = margin; y < d[1] - margin; ++y)
      for (int x = margin; x < d[0] - margin; ++x) {
        std::size_t id = std::size_t(x) +
                         std::size_t(d[0]) * (std::size_t(y) + std::size_t(d[1]) * z);
        for (int c = 0; c < 3; ++c) {
          double e = a.comp[c][id] - b.comp[c][id];
          acc += e * e;
        }
        ++n;
      }
  return std::sqrt(acc / (3.0 * double(n)));
}

inline double max_interior_diff(const svfreg::VectorField& a, const svfreg::VectorField& b,
                                int margin) {
  const auto& d = a.meta.dims;
  double m = 0.0;
  for (int z = margin; z < d[2] - margin; ++z)
    for (int y = margin; y < d[1] - margin; ++y)
      for (int x = margin; x < d[0] - margin; ++x) {
        std::size_t id = std::size_t(x) +
                         std::size_t(d[0]) * (std::size_t(y) + std::size_t(d[1]) * z);
        for (int c = 0; c < 3; ++c)
          m = std::max(m, std::abs(a.comp[c][id] - b.comp[c][id]));
      }
  return m;
}

}  // namespace testutil
