#pragma once
#include "svfreg/grid.hpp"

namespace svfreg {

struct IntegrationConfig {
  int steps = 7;  // scaling-and-squaring count, valid range [1, 12]
  void validate() const {
    if (steps < 1 || steps > 12) throw shape_error("integration steps must be in [1, 12]");
  }
};

struct FoldReport {
  long fold_count = 0;   // interior voxels with det <= 0
  double min_det = 0.0;  // over interior voxels
  Volume det_volume;     // boundary entries set to 1 and excluded from the stats
};

// Flow of the stationary velocity for unit time:
// d <- velocity / 2^steps, then d <- compose(d, d) exactly `steps` times.
VectorField integrate_ss(const VectorField& velocity, const IntegrationConfig& cfg = {});

// Reference integrator: n_steps explicit Euler passes of
// d <- d + (1/n_steps) * sample(velocity at x + d).
VectorField integrate_euler(const VectorField& velocity, int n_steps);

// Determinants of I + grad(disp), central differences on interior voxels.
FoldReport jacobian_analysis(const VectorField& disp);

}  // namespace svfreg
