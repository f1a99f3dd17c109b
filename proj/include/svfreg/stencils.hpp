#pragma once
#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "svfreg/errors.hpp"

namespace svfreg::detail {

// Numeric kernels shared by the plain metrics (double) and the differentiable
// tape ops (float/double).  All reductions accumulate in double.

inline double det3(const double j[3][3]) {
  return j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
         j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
         j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
}

// cof[p][q] = d(det)/d(j[p][q])
inline void cofactor3(const double j[3][3], double cof[3][3]) {
  cof[0][0] = j[1][1] * j[2][2] - j[1][2] * j[2][1];
  cof[0][1] = -(j[1][0] * j[2][2] - j[1][2] * j[2][0]);
  cof[0][2] = j[1][0] * j[2][1] - j[1][1] * j[2][0];
  cof[1][0] = -(j[0][1] * j[2][2] - j[0][2] * j[2][1]);
  cof[1][1] = j[0][0] * j[2][2] - j[0][2] * j[2][0];
  cof[1][2] = -(j[0][0] * j[2][1] - j[0][1] * j[2][0]);
  cof[2][0] = j[0][1] * j[1][2] - j[0][2] * j[1][1];
  cof[2][1] = -(j[0][0] * j[1][2] - j[0][2] * j[1][0]);
  cof[2][2] = j[0][0] * j[1][1] - j[0][1] * j[1][0];
}

// J(x) = I + grad(u) at an interior voxel, central differences.
template <class T>
inline void jacobian_at(const T* const u[3], const int d[3], std::size_t idx, double j[3][3]) {
  const std::size_t step[3] = {1, std::size_t(d[0]), std::size_t(d[0]) * std::size_t(d[1])};
  for (int p = 0; p < 3; ++p)
    for (int q = 0; q < 3; ++q) {
      const double g = 0.5 * (double(u[p][idx + step[q]]) - double(u[p][idx - step[q]]));
      j[p][q] = (p == q) ? 1.0 + g : g;
    }
}

template <class Fn>
inline void for_each_interior(const int d[3], Fn&& fn) {
  for (int z = 1; z < d[2] - 1; ++z)
    for (int y = 1; y < d[1] - 1; ++y) {
      std::size_t idx = std::size_t(1) + std::size_t(d[0]) * (std::size_t(y) + std::size_t(d[1]) * std::size_t(z));
      for (int x = 1; x < d[0] - 1; ++x, ++idx) fn(idx);
    }
}

// mean over interior voxels of max(0, -det(I + grad u)); ties (det == 0) are active folds
// but contribute 0 to the hinge value.
template <class T>
inline double hinge_mean(const T* const u[3], const int d[3]) {
  for (int a = 0; a < 3; ++a)
    if (d[a] < 3) throw shape_error("jacobian hinge: dims must be >= 3");
  double acc = 0.0;
  std::size_t count = 0;
  for_each_interior(d, [&](std::size_t idx) {
    double j[3][3];
    jacobian_at(u, d, idx, j);
    const double det = det3(j);
    if (det < 0.0) acc += -det;
    ++count;
  });
  return acc / double(count);
}

// grad_u += coeff * d(hinge_mean)/d(u)
template <class T>
inline void hinge_backward(const T* const u[3], T* const grad[3], const int d[3], double coeff) {
  const std::size_t step[3] = {1, std::size_t(d[0]), std::size_t(d[0]) * std::size_t(d[1])};
  std::size_t count = std::size_t(d[0] - 2) * std::size_t(d[1] - 2) * std::size_t(d[2] - 2);
  const double c = coeff / double(count);
  for_each_interior(d, [&](std::size_t idx) {
    double j[3][3];
    jacobian_at(u, d, idx, j);
    if (det3(j) >= 0.0) return;
    double cof[3][3];
    cofactor3(j, cof);
    for (int p = 0; p < 3; ++p)
      for (int q = 0; q < 3; ++q) {
        const double w = -c * cof[p][q] * 0.5;  // d(-det)/d(central difference) * stencil
        grad[p][idx + step[q]] += T(w);
        grad[p][idx - step[q]] -= T(w);
      }
  });
}

// Per-axis derivative matching spatial_gradient: central interior, one-sided boundary.
// Returns mean over voxels of the sum of all nine squared partials.
template <class T>
inline double diffusion_mean(const T* const u[3], const int d[3]) {
  for (int a = 0; a < 3; ++a)
    if (d[a] < 3) throw shape_error("diffusion energy: dims must be >= 3");
  const std::size_t step[3] = {1, std::size_t(d[0]), std::size_t(d[0]) * std::size_t(d[1])};
  double acc = 0.0;
  std::size_t idx = 0;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x, ++idx) {
        const int co[3] = {x, y, z};
        for (int p = 0; p < 3; ++p)
          for (int q = 0; q < 3; ++q) {
            const std::size_t s = step[q];
            double g;
            if (co[q] == 0)
              g = double(u[p][idx + s]) - double(u[p][idx]);
            else if (co[q] == d[q] - 1)
              g = double(u[p][idx]) - double(u[p][idx - s]);
            else
              g = 0.5 * (double(u[p][idx + s]) - double(u[p][idx - s]));
            acc += g * g;
          }
      }
  return acc / double(std::size_t(d[0]) * std::size_t(d[1]) * std::size_t(d[2]));
}

template <class T>
inline void diffusion_backward(const T* const u[3], T* const grad[3], const int d[3], double coeff) {
  const std::size_t step[3] = {1, std::size_t(d[0]), std::size_t(d[0]) * std::size_t(d[1])};
  const double c = coeff / double(std::size_t(d[0]) * std::size_t(d[1]) * std::size_t(d[2]));
  std::size_t idx = 0;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x, ++idx) {
        const int co[3] = {x, y, z};
        for (int p = 0; p < 3; ++p)
          for (int q = 0; q < 3; ++q) {
            const std::size_t s = step[q];
            if (co[q] == 0) {
              const double g = double(u[p][idx + s]) - double(u[p][idx]);
              grad[p][idx + s] += T(2.0 * c * g);
              grad[p][idx] -= T(2.0 * c * g);
            } else if (co[q] == d[q] - 1) {
              const double g = double(u[p][idx]) - double(u[p][idx - s]);
              grad[p][idx] += T(2.0 * c * g);
              grad[p][idx - s] -= T(2.0 * c * g);
            } else {
              const double g = 0.5 * (double(u[p][idx + s]) - double(u[p][idx - s]));
              grad[p][idx + s] += T(c * g);
              grad[p][idx - s] -= T(c * g);
            }
          }
      }
}

// ---- windowed squared correlation ----

struct LnccCache {
  int window = 0;
  std::size_t n_valid = 0;
  std::vector<double> sa, sb, saa, sbb, sab;  // full-window sums at valid centers
};

// 1D sliding full-window sum; entries whose window does not fit are zeroed.
inline void window_sum_axis(std::vector<double>& vals, const int d[3], int axis, int h) {
  const int step[3] = {1, d[0], d[0] * d[1]};
  const int n = d[axis];
  const int oa = (axis + 1) % 3, ob = (axis + 2) % 3;
  std::vector<double> line(static_cast<std::size_t>(n));
  for (int b = 0; b < d[ob]; ++b)
    for (int a = 0; a < d[oa]; ++a) {
      const std::size_t base =
          std::size_t(a) * std::size_t(step[oa]) + std::size_t(b) * std::size_t(step[ob]);
      for (int i = 0; i < n; ++i) line[std::size_t(i)] = vals[base + std::size_t(i) * std::size_t(step[axis])];
      double run = 0.0;
      for (int i = 0; i < 2 * h + 1 && i < n; ++i) run += line[std::size_t(i)];
      for (int i = 0; i < n; ++i) {
        double out = 0.0;
        if (i >= h && i < n - h) {
          out = run;
          if (i + h + 1 < n) run += line[std::size_t(i + h + 1)];
          run -= line[std::size_t(i - h)];
        }
        vals[base + std::size_t(i) * std::size_t(step[axis])] = out;
      }
    }
}

inline void window_sum_3d(std::vector<double>& vals, const int d[3], int h) {
  for (int axis = 0; axis < 3; ++axis) window_sum_axis(vals, d, axis, h);
}

inline constexpr double kVarianceGuard = 1e-5;

// mean over valid centers of squared windowed correlation; windows whose
// variance falls below the guard contribute 0 but still count in the mean.
template <class T>
inline double lncc_mean_sq(const T* a, const T* b, const int d[3], int w, LnccCache* cache) {
  if (w < 3 || w % 2 == 0) throw shape_error("local ncc: window must be odd and >= 3");
  if (w > std::min({d[0], d[1], d[2]})) throw shape_error("local ncc: window exceeds volume");
  const int h = (w - 1) / 2;
  const std::size_t n = std::size_t(d[0]) * std::size_t(d[1]) * std::size_t(d[2]);
  std::vector<double> sa(n), sb(n), saa(n), sbb(n), sab(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double av = double(a[i]), bv = double(b[i]);
    sa[i] = av;
    sb[i] = bv;
    saa[i] = av * av;
    sbb[i] = bv * bv;
    sab[i] = av * bv;
  }
  window_sum_3d(sa, d, h);
  window_sum_3d(sb, d, h);
  window_sum_3d(saa, d, h);
  window_sum_3d(sbb, d, h);
  window_sum_3d(sab, d, h);

  const double wn = double(w) * double(w) * double(w);
  double acc = 0.0;
  std::size_t n_valid = 0;
  for (int z = h; z < d[2] - h; ++z)
    for (int y = h; y < d[1] - h; ++y)
      for (int x = h; x < d[0] - h; ++x) {
        const std::size_t i =
            std::size_t(x) + std::size_t(d[0]) * (std::size_t(y) + std::size_t(d[1]) * std::size_t(z));
        const double ca = saa[i] - sa[i] * sa[i] / wn;
        const double cb = sbb[i] - sb[i] * sb[i] / wn;
        if (ca / wn < kVarianceGuard || cb / wn < kVarianceGuard) {
          ++n_valid;
          continue;
        }
        const double cab = sab[i] - sa[i] * sb[i] / wn;
        double cc = (cab * cab) / (ca * cb);
        if (cc > 1.0) cc = 1.0;  // Cauchy-Schwarz holds exactly; clip roundoff overshoot
        acc += cc;
        ++n_valid;
      }
  if (cache) {
    cache->window = w;
    cache->n_valid = n_valid;
    cache->sa = std::move(sa);
    cache->sb = std::move(sb);
    cache->saa = std::move(saa);
    cache->sbb = std::move(sbb);
    cache->sab = std::move(sab);
  }
  return acc / double(n_valid);
}

// grad_a/grad_b += coeff * d(lncc_mean_sq)/d(a or b)
template <class T>
inline void lncc_backward(const T* a, const T* b, T* ga, T* gb, const int d[3],
                          const LnccCache& cache, double coeff) {
  const int w = cache.window;
  const int h = (w - 1) / 2;
  const double wn = double(w) * double(w) * double(w);
  const double scale = coeff / double(cache.n_valid);
  for (int z = h; z < d[2] - h; ++z)
    for (int y = h; y < d[1] - h; ++y)
      for (int x = h; x < d[0] - h; ++x) {
        const std::size_t i =
            std::size_t(x) + std::size_t(d[0]) * (std::size_t(y) + std::size_t(d[1]) * std::size_t(z));
        const double ca = cache.saa[i] - cache.sa[i] * cache.sa[i] / wn;
        const double cb = cache.sbb[i] - cache.sb[i] * cache.sb[i] / wn;
        if (ca / wn < kVarianceGuard || cb / wn < kVarianceGuard) continue;
        const double cab = cache.sab[i] - cache.sa[i] * cache.sb[i] / wn;
        const double cc = (cab * cab) / (ca * cb);
        if (cc >= 1.0) continue;  // clipped plateau, zero slope
        const double am = cache.sa[i] / wn, bm = cache.sb[i] / wn;
        const double ka = 2.0 * cab / (ca * cb);
        const double ra = cab / ca, rb = cab / cb;
        for (int kz = -h; kz <= h; ++kz)
          for (int ky = -h; ky <= h; ++ky)
            for (int kx = -h; kx <= h; ++kx) {
              const std::size_t j =
                  std::size_t(x + kx) +
                  std::size_t(d[0]) * (std::size_t(y + ky) + std::size_t(d[1]) * std::size_t(z + kz));
              const double ad = double(a[j]) - am, bd = double(b[j]) - bm;
              if (ga) ga[j] += T(scale * ka * (bd - ra * ad));
              if (gb) gb[j] += T(scale * ka * (ad - rb * bd));
            }
      }
}

}  // namespace svfreg::detail
