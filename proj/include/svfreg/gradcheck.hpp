#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "svfreg/rng.hpp"
#include "svfreg/tape.hpp"

namespace svfreg {

struct GradCheckOptions {
  double step = 1e-5;      // central-difference perturbation
  double floor_tau = 1e-6; // relative-error denominator floor
  std::size_t exhaustive_limit = 10000;  // per-tensor cap before switching to probes
  int probes = 5;          // random directional probes past the cap
  double refine_above = 1e-6;  // re-measure suspicious coordinates at scaled steps
  double refine_factor = 0.1;
  int refine_levels = 2;  // ladder rungs in each direction
  std::uint64_t seed = 0x5eedc0de;
  double corrupt_scale = 1.0;  // test hook: != 1 scales the largest analytic entry
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
  int worst_leaf = -1;
  std::size_t worst_coord = 0;
};

namespace detail {
inline double rel_err(double a, double n, double tau) {
  return std::abs(a - n) / std::max({tau, std::abs(a), std::abs(n)});
}
}  // namespace detail

// Analytic tape gradients of a scalar build at the given leaves, widened to
// double.  `build` reconstructs the graph on a fresh tape from leaf ids.
template <class T, class Build>
std::vector<Tensor<double>> tape_gradients(const std::vector<Tensor<T>>& leaves, Build&& build) {
  using Id = typename Tape<T>::Id;
  Tape<T> tape;
  std::vector<Id> ids;
  ids.reserve(leaves.size());
  for (const auto& v : leaves) ids.push_back(tape.leaf(v));
  tape.backward(build(tape, ids));
  std::vector<Tensor<double>> out;
  out.reserve(leaves.size());
  for (Id id : ids) {
    const Tensor<T>& g = tape.grad(id);
    Tensor<double> d(g.channels, g.dims);
    for (std::size_t j = 0; j < g.v.size(); ++j) d.v[j] = double(g.v[j]);
    out.push_back(std::move(d));
  }
  return out;
}

// Checks a supplied gradient against central differences of `build`; the
// gradient may come from a different arithmetic width than the objective, so
// a reduced-precision adjoint can be measured against an accurate reference.
// `build` must be deterministic; small leaves are checked coordinate by
// coordinate, large ones by directional probes.  A high error is re-measured
// on a ladder of smaller and larger steps before it counts: truncation near
// an activation kink shrinks with the step, roundoff on a near-zero gradient
// shrinks as it widens, a wrong adjoint budges for neither.
template <class T, class Build>
GradCheckReport grad_check_against(const std::vector<Tensor<T>>& leaves, Build&& build,
                                   std::vector<Tensor<double>> analytic,
                                   const GradCheckOptions& opt = {}) {
  using Id = typename Tape<T>::Id;
  auto evaluate = [&](const std::vector<Tensor<T>>& vals) {
    Tape<T> tape;
    std::vector<Id> ids;
    ids.reserve(vals.size());
    for (const auto& v : vals) ids.push_back(tape.constant(v));
    return tape.val(build(tape, ids)).item();
  };

  if (opt.corrupt_scale != 1.0 && !analytic.empty()) {
    std::size_t bl = 0, bj = 0;
    double best = -1.0;
    for (std::size_t l = 0; l < analytic.size(); ++l)
      for (std::size_t j = 0; j < analytic[l].size(); ++j)
        if (std::abs(analytic[l].v[j]) > best) {
          best = std::abs(analytic[l].v[j]);
          bl = l;
          bj = j;
        }
    analytic[bl].v[bj] *= opt.corrupt_scale;
  }

  GradCheckReport rep;
  std::vector<Tensor<T>> work = leaves;
  const bool can_refine = opt.refine_factor > 0.0 && opt.refine_factor < 1.0;
  auto record = [&](double e, int leaf, std::size_t coord) {
    ++rep.coords_checked;
    if (e > rep.max_rel_err) {
      rep.max_rel_err = e;
      rep.worst_leaf = leaf;
      rep.worst_coord = coord;
    }
  };
  auto refined = [&](double a, double e, auto&& fd_at) {
    if (!can_refine) return e;
    double h = opt.step;
    for (int i = 0; i < opt.refine_levels && e > opt.refine_above; ++i) {
      h *= opt.refine_factor;
      e = std::min(e, detail::rel_err(a, fd_at(h), opt.floor_tau));
    }
    h = opt.step;
    for (int i = 0; i < opt.refine_levels && e > opt.refine_above; ++i) {
      h /= opt.refine_factor;
      e = std::min(e, detail::rel_err(a, fd_at(h), opt.floor_tau));
    }
    return e;
  };

  for (std::size_t l = 0; l < leaves.size(); ++l) {
    const std::size_t n = leaves[l].size();
    if (n <= opt.exhaustive_limit) {
      auto fd = [&](std::size_t j, double step) {
        const T keep = work[l].v[j];
        work[l].v[j] = T(double(keep) + step);
        const double fp = evaluate(work);
        work[l].v[j] = T(double(keep) - step);
        const double fm = evaluate(work);
        work[l].v[j] = keep;
        return (fp - fm) / (2.0 * step);
      };
      for (std::size_t j = 0; j < n; ++j) {
        const double a = analytic[l].v[j];
        const double e = detail::rel_err(a, fd(j, opt.step), opt.floor_tau);
        record(refined(a, e, [&](double h) { return fd(j, h); }), int(l), j);
      }
    } else {
      Rng rng(seed_mix(opt.seed, std::uint64_t(l)));
      auto fd = [&](const std::vector<double>& dir, double step) {
        for (std::size_t j = 0; j < n; ++j)
          work[l].v[j] = T(double(leaves[l].v[j]) + step * dir[j]);
        const double fp = evaluate(work);
        for (std::size_t j = 0; j < n; ++j)
          work[l].v[j] = T(double(leaves[l].v[j]) - step * dir[j]);
        const double fm = evaluate(work);
        work[l] = leaves[l];
        return (fp - fm) / (2.0 * step);
      };
      for (int p = 0; p < opt.probes; ++p) {
        std::vector<double> dir(n);
        double a_dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          dir[j] = rng.next_u64() & 1 ? 1.0 : -1.0;
          a_dot += dir[j] * analytic[l].v[j];
        }
        const double e = detail::rel_err(a_dot, fd(dir, opt.step), opt.floor_tau);
        record(refined(a_dot, e, [&](double h) { return fd(dir, h); }), int(l), std::size_t(p));
      }
    }
  }
  return rep;
}

// Central-difference check of a scalar graph against its own tape gradients.
template <class T, class Build>
GradCheckReport grad_check(const std::vector<Tensor<T>>& leaves, Build&& build,
                           const GradCheckOptions& opt = {}) {
  return grad_check_against(leaves, build, tape_gradients(leaves, build), opt);
}

}  // namespace svfreg
