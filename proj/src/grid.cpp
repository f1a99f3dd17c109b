#include "svfreg/grid.hpp"

#include <cmath>
#include <string>

#include "svfreg/interp.hpp"

namespace svfreg {

void GridMeta::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 2) throw shape_error("grid dims must be >= 2 per axis");
    if (!(spacing[a] > 0.0)) throw shape_error("grid spacing must be positive");
  }
}

Volume Volume::zeros(const GridMeta& m) {
  m.validate();
  Volume v;
  v.meta = m;
  v.values.assign(m.voxel_count(), 0.0);
  return v;
}

VectorField VectorField::zeros(const GridMeta& m) {
  m.validate();
  VectorField f;
  f.meta = m;
  for (auto& c : f.comp) c.assign(m.voxel_count(), 0.0);
  return f;
}

double sample_trilinear(const Volume& vol, double x, double y, double z) {
  const auto& d = vol.meta.dims;
  const auto c = detail::locate(x, y, z, d[0], d[1], d[2]);
  return detail::cell_sample(vol.values.data(), d[0], d[1], c);
}

void sample_field(const VectorField& f, double x, double y, double z, double out[3]) {
  const auto& d = f.meta.dims;
  const auto c = detail::locate(x, y, z, d[0], d[1], d[2]);
  for (int a = 0; a < 3; ++a) out[a] = detail::cell_sample(f.comp[a].data(), d[0], d[1], c);
}

Volume warp_volume(const Volume& vol, const VectorField& disp) {
  if (vol.meta != disp.meta) throw shape_error("warp_volume: volume/field meta mismatch");
  const auto& d = vol.meta.dims;
  Volume out = Volume::zeros(vol.meta);
  std::size_t idx = 0;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x, ++idx) {
        const auto c = detail::locate(double(x) + disp.comp[0][idx], double(y) + disp.comp[1][idx],
                                      double(z) + disp.comp[2][idx], d[0], d[1], d[2]);
        out.values[idx] = detail::cell_sample(vol.values.data(), d[0], d[1], c);
      }
  return out;
}

LabelMap warp_labels_nn(const LabelMap& lab, const VectorField& disp) {
  if (lab.meta != disp.meta) throw shape_error("warp_labels_nn: meta mismatch");
  const auto& d = lab.meta.dims;
  LabelMap out;
  out.meta = lab.meta;
  out.class_count = lab.class_count;
  out.labels.assign(lab.labels.size(), 0);
  std::size_t idx = 0;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x, ++idx) {
        const double co[3] = {double(x) + disp.comp[0][idx], double(y) + disp.comp[1][idx],
                              double(z) + disp.comp[2][idx]};
        int ic[3];
        for (int a = 0; a < 3; ++a) {
          double v = std::clamp(co[a], 0.0, double(d[a] - 1));
          ic[a] = int(std::lround(v));
        }
        out.labels[idx] =
            lab.labels[std::size_t(ic[0]) +
                       std::size_t(d[0]) * (std::size_t(ic[1]) + std::size_t(d[1]) * std::size_t(ic[2]))];
      }
  return out;
}

VectorField compose(const VectorField& outer, const VectorField& inner) {
  if (outer.meta != inner.meta) throw shape_error("compose: field meta mismatch");
  const auto& d = outer.meta.dims;
  VectorField out = VectorField::zeros(outer.meta);
  std::size_t idx = 0;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x, ++idx) {
        const auto c = detail::locate(double(x) + inner.comp[0][idx], double(y) + inner.comp[1][idx],
                                      double(z) + inner.comp[2][idx], d[0], d[1], d[2]);
        for (int a = 0; a < 3; ++a)
          out.comp[a][idx] =
              inner.comp[a][idx] + detail::cell_sample(outer.comp[a].data(), d[0], d[1], c);
      }
  return out;
}

Volume downsample_volume(const Volume& vol) {
  const auto& d = vol.meta.dims;
  for (int a = 0; a < 3; ++a)
    if (d[a] % 2 != 0) throw shape_error("downsample_volume: dims must be even");
  GridMeta m(d[0] / 2, d[1] / 2, d[2] / 2);
  m.spacing = {vol.meta.spacing[0] * 2, vol.meta.spacing[1] * 2, vol.meta.spacing[2] * 2};
  Volume out = Volume::zeros(m);
  std::size_t idx = 0;
  for (int z = 0; z < m.dims[2]; ++z)
    for (int y = 0; y < m.dims[1]; ++y)
      for (int x = 0; x < m.dims[0]; ++x, ++idx) {
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) acc += vol.at(2 * x + dx, 2 * y + dy, 2 * z + dz);
        out.values[idx] = acc * 0.125;
      }
  return out;
}

VectorField downsample_field(const VectorField& f) {
  const auto& d = f.meta.dims;
  for (int a = 0; a < 3; ++a)
    if (d[a] % 2 != 0) throw shape_error("downsample_field: dims must be even");
  GridMeta m(d[0] / 2, d[1] / 2, d[2] / 2);
  m.spacing = {f.meta.spacing[0] * 2, f.meta.spacing[1] * 2, f.meta.spacing[2] * 2};
  VectorField out = VectorField::zeros(m);
  for (int a = 0; a < 3; ++a) {
    std::size_t idx = 0;
    for (int z = 0; z < m.dims[2]; ++z)
      for (int y = 0; y < m.dims[1]; ++y)
        for (int x = 0; x < m.dims[0]; ++x, ++idx) {
          double acc = 0.0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                acc += f.comp[a][std::size_t(2 * x + dx) +
                                 std::size_t(d[0]) * (std::size_t(2 * y + dy) +
                                                      std::size_t(d[1]) * std::size_t(2 * z + dz))];
          // box average, then halve: displacement magnitude shrinks with the grid
          out.comp[a][idx] = acc * 0.125 * 0.5;
        }
  }
  return out;
}

VectorField upsample_field(const VectorField& f) {
  const auto& d = f.meta.dims;
  GridMeta m(d[0] * 2, d[1] * 2, d[2] * 2);
  m.spacing = {f.meta.spacing[0] * 0.5, f.meta.spacing[1] * 0.5, f.meta.spacing[2] * 0.5};
  VectorField out = VectorField::zeros(m);
  std::size_t idx = 0;
  for (int z = 0; z < m.dims[2]; ++z)
    for (int y = 0; y < m.dims[1]; ++y)
      for (int x = 0; x < m.dims[0]; ++x, ++idx) {
        // cell-centered alignment with the 2x box average
        const auto c = detail::locate(0.5 * x - 0.25, 0.5 * y - 0.25, 0.5 * z - 0.25, d[0], d[1], d[2]);
        for (int a = 0; a < 3; ++a)
          out.comp[a][idx] = 2.0 * detail::cell_sample(f.comp[a].data(), d[0], d[1], c);
      }
  return out;
}

VectorField spatial_gradient(const Volume& vol) {
  const auto& d = vol.meta.dims;
  for (int a = 0; a < 3; ++a)
    if (d[a] < 3) throw shape_error("spatial_gradient: dims must be >= 3");
  VectorField g = VectorField::zeros(vol.meta);
  const int step[3] = {1, d[0], d[0] * d[1]};
  std::size_t idx = 0;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x, ++idx) {
        const int co[3] = {x, y, z};
        for (int a = 0; a < 3; ++a) {
          const std::size_t s = std::size_t(step[a]);
          if (co[a] == 0)
            g.comp[a][idx] = vol.values[idx + s] - vol.values[idx];
          else if (co[a] == d[a] - 1)
            g.comp[a][idx] = vol.values[idx] - vol.values[idx - s];
          else
            g.comp[a][idx] = 0.5 * (vol.values[idx + s] - vol.values[idx - s]);
        }
      }
  return g;
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> k(std::size_t(2 * r + 1));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[std::size_t(i + r)] = std::exp(-0.5 * double(i) * double(i) / (sigma * sigma));
    sum += k[std::size_t(i + r)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

void smooth_axis(std::vector<double>& vals, const std::array<int, 3>& d, int axis,
                 const std::vector<double>& kernel, bool zero_pad) {
  const int r = int(kernel.size() / 2);
  const int step[3] = {1, d[0], d[0] * d[1]};
  std::vector<double> line(std::size_t(d[axis]));
  const int n = d[axis];
  const int oa = (axis + 1) % 3, ob = (axis + 2) % 3;
  for (int b = 0; b < d[ob]; ++b)
    for (int a = 0; a < d[oa]; ++a) {
      const std::size_t base = std::size_t(a) * std::size_t(step[oa]) + std::size_t(b) * std::size_t(step[ob]);
      for (int i = 0; i < n; ++i) line[std::size_t(i)] = vals[base + std::size_t(i) * std::size_t(step[axis])];
      for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = -r; j <= r; ++j) {
          const int s = i + j;
          if (s < 0 || s >= n) {
            if (!zero_pad) acc += kernel[std::size_t(j + r)] * line[std::size_t(std::clamp(s, 0, n - 1))];
          } else {
            acc += kernel[std::size_t(j + r)] * line[std::size_t(s)];
          }
        }
        vals[base + std::size_t(i) * std::size_t(step[axis])] = acc;
      }
    }
}

}  // namespace

Volume gaussian_smooth(const Volume& vol, double sigma) {
  Volume out = vol;
  if (sigma <= 0.0) return out;
  const auto k = gaussian_kernel(sigma);
  for (int axis = 0; axis < 3; ++axis) smooth_axis(out.values, out.meta.dims, axis, k, false);
  return out;
}

VectorField gaussian_smooth(const VectorField& f, double sigma, bool taper_boundary) {
  VectorField out = f;
  if (sigma <= 0.0) return out;
  const auto k = gaussian_kernel(sigma);
  for (auto& c : out.comp)
    for (int axis = 0; axis < 3; ++axis) smooth_axis(c, out.meta.dims, axis, k, taper_boundary);
  return out;
}

}  // namespace svfreg
