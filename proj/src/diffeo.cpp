#include "svfreg/diffeo.hpp"

#include <cmath>
#include <limits>

#include "svfreg/interp.hpp"
#include "svfreg/stencils.hpp"

namespace svfreg {

VectorField integrate_ss(const VectorField& velocity, const IntegrationConfig& cfg) {
  cfg.validate();
  velocity.meta.validate();
  const double factor = std::ldexp(1.0, -cfg.steps);
  VectorField d = VectorField::zeros(velocity.meta);
  for (int a = 0; a < 3; ++a)
    for (std::size_t i = 0; i < d.comp[a].size(); ++i) d.comp[a][i] = velocity.comp[a][i] * factor;
  for (int s = 0; s < cfg.steps; ++s) d = compose(d, d);
  return d;
}

VectorField integrate_euler(const VectorField& velocity, int n_steps) {
  if (n_steps < 1) throw shape_error("integrate_euler: n_steps must be >= 1");
  velocity.meta.validate();
  const auto& dm = velocity.meta.dims;
  const double h = 1.0 / double(n_steps);
  VectorField d = VectorField::zeros(velocity.meta);
  VectorField next = VectorField::zeros(velocity.meta);
  for (int s = 0; s < n_steps; ++s) {
    std::size_t idx = 0;
    for (int z = 0; z < dm[2]; ++z)
      for (int y = 0; y < dm[1]; ++y)
        for (int x = 0; x < dm[0]; ++x, ++idx) {
          const auto c = detail::locate(double(x) + d.comp[0][idx], double(y) + d.comp[1][idx],
                                        double(z) + d.comp[2][idx], dm[0], dm[1], dm[2]);
          for (int a = 0; a < 3; ++a)
            next.comp[a][idx] =
                d.comp[a][idx] + h * detail::cell_sample(velocity.comp[a].data(), dm[0], dm[1], c);
        }
    std::swap(d, next);
  }
  return d;
}

FoldReport jacobian_analysis(const VectorField& disp) {
  const auto& dm = disp.meta.dims;
  for (int a = 0; a < 3; ++a)
    if (dm[a] < 3) throw shape_error("jacobian_analysis: dims must be >= 3");
  FoldReport report;
  report.det_volume = Volume::zeros(disp.meta);
  for (auto& v : report.det_volume.values) v = 1.0;
  report.min_det = std::numeric_limits<double>::infinity();
  const double* u[3] = {disp.comp[0].data(), disp.comp[1].data(), disp.comp[2].data()};
  const int d[3] = {dm[0], dm[1], dm[2]};
  detail::for_each_interior(d, [&](std::size_t idx) {
    double j[3][3];
    detail::jacobian_at(u, d, idx, j);
    const double det = detail::det3(j);
    report.det_volume.values[idx] = det;
    if (det <= 0.0) ++report.fold_count;
    if (det < report.min_det) report.min_det = det;
  });
  return report;
}

}  // namespace svfreg
