#include "doctest.h"
#include "helpers.hpp"

#include <svfreg/errors.hpp>
#include <svfreg/grid.hpp>
#include <svfreg/rng.hpp>

#include <cmath>

using namespace svfreg;
using namespace testutil;

namespace {
GridMeta meta_of(int nx, int ny, int nz) {
  GridMeta m;
  m.dims = {nx, ny, nz};
  return m;
}
}  // namespace

TEST_CASE("trilinear sample of an x-ramp is the x coordinate") {
  Volume v = ramp_x(meta_of(4, 4, 4));
  CHECK(sample_trilinear(v, 2.5, 3.0, 3.0) == doctest::Approx(2.5).epsilon(1e-14));
  CHECK(sample_trilinear(v, 0.25, 1.0, 2.0) == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("trilinear sample at lattice points returns stored values exactly") {
  Volume v = random_volume(meta_of(4, 4, 4), 11);
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        CHECK(sample_trilinear(v, x, y, z) == v.at(x, y, z));
}

TEST_CASE("trilinear sample matches the 8-corner expansion") {
  Volume v = random_volume(meta_of(4, 4, 4), 7);
  const double x = 1.25, y = 0.5, z = 2.75;
  const int i = 1, j = 0, k = 2;
  const double fx = 0.25, fy = 0.5, fz = 0.75;
  double expect = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
        expect += w * v.at(i + dx, j + dy, k + dz);
      }
  CHECK(std::abs(sample_trilinear(v, x, y, z) - expect) <= 1e-12);
}

TEST_CASE("trilinear sample clamps to the boundary") {
  Volume v = random_volume(meta_of(4, 4, 4), 3);
  CHECK(sample_trilinear(v, -2.0, -5.0, -1.0) == v.at(0, 0, 0));
  CHECK(sample_trilinear(v, 9.0, 3.0, 8.5) == v.at(3, 3, 3));
  CHECK(sample_trilinear(v, -1.0, 1.5, 2.0) ==
        doctest::Approx(0.5 * v.at(0, 1, 2) + 0.5 * v.at(0, 2, 2)).epsilon(1e-14));
}

TEST_CASE("trilinear sample stays within the hull of its 8 corners") {
  Volume v = random_volume(meta_of(6, 5, 7), 19);
  Rng rng(101);
  for (int t = 0; t < 200; ++t) {
    double x = rng.uniform(0.0, 5.0), y = rng.uniform(0.0, 4.0), z = rng.uniform(0.0, 6.0);
    int i = std::min(int(x), 4), j = std::min(int(y), 3), k = std::min(int(z), 5);
    double lo = 1e300, hi = -1e300;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          double c = v.at(i + dx, j + dy, k + dz);
          lo = std::min(lo, c);
          hi = std::max(hi, c);
        }
    double s = sample_trilinear(v, x, y, z);
    CHECK(s >= lo - 1e-12);
    CHECK(s <= hi + 1e-12);
  }
}

TEST_CASE("warp with zero displacement is a bitwise identity") {
  Volume v = random_volume(meta_of(8, 6, 7), 23);
  VectorField zero = VectorField::zeros(v.meta);
  Volume w = warp_volume(v, zero);
  for (std::size_t i = 0; i < v.values.size(); ++i) CHECK(w.values[i] == v.values[i]);
}

TEST_CASE("warping an x-ramp by a +0.5 x-shift adds 0.5 away from the far edge") {
  GridMeta m = meta_of(8, 8, 8);
  Volume v = ramp_x(m);
  VectorField d = constant_field(m, 0.5, 0.0, 0.0);
  Volume w = warp_volume(v, d);
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 7; ++x)
        CHECK(w.at(x, y, z) == doctest::Approx(x + 0.5).epsilon(1e-13));
  // the last column samples past the edge and clamps
  CHECK(w.at(7, 0, 0) == doctest::Approx(7.0).epsilon(1e-13));
}

TEST_CASE("warp agrees with per-voxel trilinear sampling") {
  GridMeta m = meta_of(9, 8, 7);
  Volume v = random_volume(m, 31);
  VectorField d = random_smooth_field(m, 33, 2.0, 1.5);
  Volume w = warp_volume(v, d);
  for (int z = 0; z < m.dims[2]; ++z)
    for (int y = 0; y < m.dims[1]; ++y)
      for (int x = 0; x < m.dims[0]; ++x) {
        std::size_t id = std::size_t(x) + 9 * (std::size_t(y) + 8 * std::size_t(z));
        double expect =
            sample_trilinear(v, x + d.comp[0][id], y + d.comp[1][id], z + d.comp[2][id]);
        CHECK(w.at(x, y, z) == expect);
      }
}

TEST_CASE("warp rejects a displacement on a different grid") {
  Volume v = random_volume(meta_of(8, 8, 8), 5);
  VectorField d = VectorField::zeros(meta_of(4, 4, 4));
  CHECK_THROWS_AS(warp_volume(v, d), shape_error);
}

TEST_CASE("nearest-neighbour label warp keeps labels intact under small shifts") {
  GridMeta m = meta_of(6, 6, 6);
  LabelMap lm;
  lm.meta = m;
  lm.class_count = 3;
  lm.labels.assign(m.voxel_count(), 0);
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x)
        lm.labels[std::size_t(x) + 6 * (std::size_t(y) + 6 * std::size_t(z))] =
            std::uint16_t(x / 2);
  VectorField d = constant_field(m, 0.3, 0.0, 0.0);
  LabelMap w = warp_labels_nn(lm, d);
  // 0.3 rounds to the same voxel, so labels are unchanged
  for (std::size_t i = 0; i < lm.labels.size(); ++i) CHECK(w.labels[i] == lm.labels[i]);
  VectorField d2 = constant_field(m, 1.0, 0.0, 0.0);
  LabelMap w2 = warp_labels_nn(lm, d2);
  CHECK(w2.labels[0] == lm.labels[1]);
}

TEST_CASE("composing with a zero outer field reproduces the inner field") {
  GridMeta m = meta_of(8, 8, 8);
  VectorField inner = random_smooth_field(m, 41, 2.0, 1.5);
  VectorField zero = VectorField::zeros(m);
  VectorField c = compose(zero, inner);
  for (int comp = 0; comp < 3; ++comp)
    for (std::size_t i = 0; i < c.comp[comp].size(); ++i)
      CHECK(c.comp[comp][i] == inner.comp[comp][i]);
}

TEST_CASE("composing two constant fields adds them") {
  GridMeta m = meta_of(8, 8, 8);
  VectorField a = constant_field(m, 0.4, -0.3, 0.2);
  VectorField b = constant_field(m, -0.1, 0.2, 0.3);
  VectorField c = compose(a, b);
  for (std::size_t i = 0; i < c.comp[0].size(); ++i) {
    CHECK(c.comp[0][i] == doctest::Approx(0.3).epsilon(1e-14));
    CHECK(c.comp[1][i] == doctest::Approx(-0.1).epsilon(1e-14));
    CHECK(c.comp[2][i] == doctest::Approx(0.5).epsilon(1e-14));
  }
}

TEST_CASE("warping by a composition matches warping twice") {
  GridMeta m = meta_of(16, 16, 16);
  VectorField outer = random_smooth_field(m, 51, 3.0, 1.0);
  VectorField inner = random_smooth_field(m, 52, 3.0, 1.0);
  Volume v = gaussian_smooth(random_volume(m, 53), 2.0);
  Volume once = warp_volume(v, compose(outer, inner));
  Volume twice = warp_volume(warp_volume(v, outer), inner);
  double acc = 0.0;
  std::size_t n = 0;
  for (int z = 3; z < 13; ++z)
    for (int y = 3; y < 13; ++y)
      for (int x = 3; x < 13; ++x) {
        double e = once.at(x, y, z) - twice.at(x, y, z);
        acc += e * e;
        ++n;
      }
  CHECK(std::sqrt(acc / double(n)) <= 1e-3);
}

TEST_CASE("composition is associative up to interpolation error") {
  GridMeta m = meta_of(16, 16, 16);
  VectorField a = random_smooth_field(m, 61, 3.0, 0.8);
  VectorField b = random_smooth_field(m, 62, 3.0, 0.8);
  VectorField c = random_smooth_field(m, 63, 3.0, 0.8);
  VectorField left = compose(compose(a, b), c);
  VectorField right = compose(a, compose(b, c));
  CHECK(rms_interior_diff(left, right, 3) <= 1e-2);
}

TEST_CASE("downsampling a constant volume keeps the constant") {
  Volume v = Volume::zeros(meta_of(8, 8, 8));
  for (auto& x : v.values) x = 3.25;
  Volume d = downsample_volume(v);
  CHECK(d.meta.dims[0] == 4);
  CHECK(d.meta.spacing[0] == doctest::Approx(2.0));
  for (auto x : d.values) CHECK(x == doctest::Approx(3.25).epsilon(1e-15));
}

TEST_CASE("downsampling matches a direct 2x2x2 block average") {
  GridMeta m = meta_of(8, 6, 4);
  Volume v = random_volume(m, 71);
  Volume d = downsample_volume(v);
  REQUIRE(d.meta.dims[0] == 4);
  REQUIRE(d.meta.dims[1] == 3);
  REQUIRE(d.meta.dims[2] == 2);
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 4; ++x) {
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) acc += v.at(2 * x + dx, 2 * y + dy, 2 * z + dz);
        CHECK(d.at(x, y, z) == doctest::Approx(acc / 8.0).epsilon(1e-14));
      }
}

TEST_CASE("downsampling rejects odd dimensions") {
  Volume v = random_volume(meta_of(7, 8, 8), 3);
  CHECK_THROWS_AS(downsample_volume(v), shape_error);
}

TEST_CASE("downsampling a field halves displacement magnitude") {
  GridMeta m = meta_of(8, 8, 8);
  VectorField f = constant_field(m, 2.0, -4.0, 1.0);
  VectorField d = downsample_field(f);
  CHECK(d.meta.dims[0] == 4);
  for (std::size_t i = 0; i < d.comp[0].size(); ++i) {
    CHECK(d.comp[0][i] == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(d.comp[1][i] == doctest::Approx(-2.0).epsilon(1e-14));
    CHECK(d.comp[2][i] == doctest::Approx(0.5).epsilon(1e-14));
  }
}

TEST_CASE("upsampling a constant field doubles displacement magnitude") {
  GridMeta m = meta_of(8, 8, 8);
  VectorField f = constant_field(m, 1.0, 0.0, -0.5);
  VectorField u = upsample_field(f);
  CHECK(u.meta.dims[0] == 16);
  CHECK(u.meta.spacing[0] == doctest::Approx(0.5));
  for (std::size_t i = 0; i < u.comp[0].size(); ++i) {
    CHECK(u.comp[0][i] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(u.comp[1][i] == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(u.comp[2][i] == doctest::Approx(-1.0).epsilon(1e-14));
  }
}

TEST_CASE("upsample then downsample approximately round-trips") {
  GridMeta m = meta_of(24, 24, 24);
  VectorField f = VectorField::zeros(m);
  const double tau = 2.0 * 3.14159265358979323846;
  for (int z = 0; z < 24; ++z)
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 24; ++x) {
        std::size_t id = std::size_t(x) + 24 * (std::size_t(y) + 24 * std::size_t(z));
        f.comp[0][id] = 0.8 * std::sin(tau * x / 24.0) * std::cos(tau * y / 24.0);
        f.comp[1][id] = 0.8 * std::cos(tau * z / 24.0);
        f.comp[2][id] = 0.8 * std::sin(tau * (x + y) / 24.0 + 0.3);
      }
  VectorField u = upsample_field(f);
  VectorField back = downsample_field(u);
  CHECK(rms_interior_diff(f, back, 1) <= 1e-2);
}

TEST_CASE("spatial gradient of a constant volume is zero") {
  GridMeta m = meta_of(6, 6, 6);
  Volume v = Volume::zeros(m);
  for (auto& x : v.values) x = 5.0;
  VectorField g = spatial_gradient(v);
  for (int a = 0; a < 3; ++a)
    for (auto x : g.comp[a]) CHECK(x == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("spatial gradient of a ramp is its slope everywhere") {
  GridMeta m = meta_of(6, 6, 6);
  Volume v = ramp_x(m, 2.0);
  VectorField g = spatial_gradient(v);
  // one-sided stencils are exact on linear data, so edges match too
  for (auto x : g.comp[0]) CHECK(x == doctest::Approx(2.0).epsilon(1e-13));
  for (auto x : g.comp[1]) CHECK(x == doctest::Approx(0.0).epsilon(1e-13));
  for (auto x : g.comp[2]) CHECK(x == doctest::Approx(0.0).epsilon(1e-13));
}

TEST_CASE("spatial gradient matches central differences on random data") {
  GridMeta m = meta_of(7, 6, 5);
  Volume v = random_volume(m, 91, -1.0, 1.0);
  VectorField g = spatial_gradient(v);
  auto idx = [&](int x, int y, int z) {
    return std::size_t(x) + 7 * (std::size_t(y) + 6 * std::size_t(z));
  };
  for (int z = 1; z < 4; ++z)
    for (int y = 1; y < 5; ++y)
      for (int x = 1; x < 6; ++x) {
        double ex = 0.5 * (v.at(x + 1, y, z) - v.at(x - 1, y, z));
        CHECK(g.comp[0][idx(x, y, z)] == doctest::Approx(ex).epsilon(1e-13));
        double ez = 0.5 * (v.at(x, y, z + 1) - v.at(x, y, z - 1));
        CHECK(g.comp[2][idx(x, y, z)] == doctest::Approx(ez).epsilon(1e-13));
      }
}

TEST_CASE("gaussian smoothing preserves constants and reduces variance") {
  GridMeta m = meta_of(10, 10, 10);
  Volume c = Volume::zeros(m);
  for (auto& x : c.values) x = 2.5;
  Volume sc = gaussian_smooth(c, 2.0);
  for (auto x : sc.values) CHECK(x == doctest::Approx(2.5).epsilon(1e-12));

  Volume v = random_volume(m, 95, -1.0, 1.0);
  Volume sv = gaussian_smooth(v, 1.5);
  auto var = [](const Volume& a) {
    double mean = 0.0;
    for (auto x : a.values) mean += x;
    mean /= double(a.values.size());
    double acc = 0.0;
    for (auto x : a.values) acc += (x - mean) * (x - mean);
    return acc / double(a.values.size());
  };
  CHECK(var(sv) < var(v));
}

TEST_CASE("grid metadata validation rejects degenerate shapes") {
  GridMeta m = meta_of(1, 4, 4);
  CHECK_THROWS_AS(m.validate(), shape_error);
  GridMeta m2 = meta_of(4, 4, 4);
  m2.spacing[1] = 0.0;
  CHECK_THROWS_AS(m2.validate(), shape_error);
  GridMeta ok = meta_of(2, 2, 2);
  CHECK_NOTHROW(ok.validate());
}
