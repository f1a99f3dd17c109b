#pragma once
#include <array>
#include <cstddef>
#include <vector>

#include "svfreg/errors.hpp"
#include "svfreg/grid.hpp"

namespace svfreg {

// Dense channel-planar block: index = c*nx*ny*nz + x + nx*(y + ny*z).
// Conv kernels pack as channels = cout*cin with dims {3,3,3} (kx fastest);
// biases and scalars use dims {1,1,1}.
template <class T>
struct Tensor {
  int channels = 0;
  std::array<int, 3> dims{1, 1, 1};
  std::vector<T> v;

  Tensor() = default;
  Tensor(int c, std::array<int, 3> d)
      : channels(c),
        dims(d),
        v(std::size_t(c) * std::size_t(d[0]) * std::size_t(d[1]) * std::size_t(d[2]), T(0)) {
    if (c < 1 || d[0] < 1 || d[1] < 1 || d[2] < 1) throw shape_error("tensor: bad shape");
  }

  static Tensor scalar(double s) {
    Tensor t(1, {1, 1, 1});
    t.v[0] = T(s);
    return t;
  }

  std::size_t spatial() const {
    return std::size_t(dims[0]) * std::size_t(dims[1]) * std::size_t(dims[2]);
  }
  std::size_t size() const { return std::size_t(channels) * spatial(); }
  bool same_shape(const Tensor& o) const { return channels == o.channels && dims == o.dims; }
  bool is_scalar() const { return size() == 1; }

  T* chan(int c) { return v.data() + std::size_t(c) * spatial(); }
  const T* chan(int c) const { return v.data() + std::size_t(c) * spatial(); }

  double item() const {
    if (!is_scalar()) throw shape_error("tensor item: not a scalar");
    return double(v[0]);
  }
};

template <class T>
Tensor<T> tensor_from_volume(const Volume& vol) {
  Tensor<T> t(1, vol.meta.dims);
  for (std::size_t i = 0; i < vol.values.size(); ++i) t.v[i] = T(vol.values[i]);
  return t;
}

template <class T>
Tensor<T> tensor_from_field(const VectorField& f) {
  Tensor<T> t(3, f.meta.dims);
  for (int a = 0; a < 3; ++a) {
    T* dst = t.chan(a);
    for (std::size_t i = 0; i < f.comp[a].size(); ++i) dst[i] = T(f.comp[a][i]);
  }
  return t;
}

// Spacing comes from the caller; tensors carry dims only.
template <class T>
Volume volume_from_tensor(const Tensor<T>& t, const GridMeta& m) {
  if (t.channels != 1 || t.dims != m.dims) throw shape_error("volume_from_tensor: shape mismatch");
  Volume vol = Volume::zeros(m);
  for (std::size_t i = 0; i < vol.values.size(); ++i) vol.values[i] = double(t.v[i]);
  return vol;
}

template <class T>
VectorField field_from_tensor(const Tensor<T>& t, const GridMeta& m) {
  if (t.channels != 3 || t.dims != m.dims) throw shape_error("field_from_tensor: shape mismatch");
  VectorField f = VectorField::zeros(m);
  for (int a = 0; a < 3; ++a) {
    const T* src = t.chan(a);
    for (std::size_t i = 0; i < f.comp[a].size(); ++i) f.comp[a][i] = double(src[i]);
  }
  return f;
}

}  // namespace svfreg
