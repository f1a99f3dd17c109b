#pragma once
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "svfreg/grid.hpp"

namespace svfreg {

struct HyperParams {
  std::vector<double> lambda_sta;  // one per stage
  double lambda_mat = 1.0;
  double lambda_reg = 1.0;
  double lambda_jac = 1.0;

  // flat order matches the history CSV: sta_0..K-1, mat, reg, jac
  std::vector<double> flat() const;
  static HyperParams from_flat(std::span<const double> v, int stages);
  void validate(int stages) const;
};

// mean over valid window centers of the squared local correlation coefficient
double local_ncc(const Volume& a, const Volume& b, int window);

struct DiceResult {
  std::vector<std::optional<double>> per_class;  // absent classes have no value
  double mean = 0.0;                             // over present classes
};
DiceResult dice(const LabelMap& a, const LabelMap& b);

// mean over voxels of the nine squared partial derivatives of the field
double diffusion_energy(const VectorField& v);

// lambda_jac * mean over interior voxels of max(0, -det(I + grad v))
double jacobian_hinge(const VectorField& v, double lambda_jac);

// KL(N(mu, diag(sigma)) || N(0, I)); sigma holds variances.
double kl_closed_form(std::span<const double> mu, std::span<const double> sigma);

// window sizes 3,5,7,9 indexed by distance from the finest stage, clipped to
// the largest odd width the stage grid admits
int stage_window(int fineness, int min_dim);

struct StageLossInput {
  std::vector<double> mu, sigma;  // posterior over the stage's latent coordinates
  VectorField velocity;
  VectorField disp;  // integrated stage field at the same resolution
};

struct LossBreakdown {
  std::vector<double> kl, ncc, deficit, diffusion, hinge;  // per stage
  std::vector<double> stage_term;
  double total = 0.0;
};

// Sum over stages of lambda_sta^k * (kl + lambda_mat*(1 - ncc)
//                                    + lambda_reg*(diffusion + lambda_jac*hinge)).
// src_levels/tgt_levels are the per-stage downsampled images, stage order.
double total_loss(const std::vector<StageLossInput>& stages, const std::vector<Volume>& src_levels,
                  const std::vector<Volume>& tgt_levels, const HyperParams& h,
                  LossBreakdown* breakdown = nullptr);

struct MetricReport {
  std::vector<std::optional<double>> dice_per_class;
  std::optional<double> dice_mean;
  std::optional<double> ncc;
  std::optional<long> fold_count;
  std::optional<double> min_det;
  std::optional<std::array<int, 3>> fold_dims;
  std::vector<std::pair<std::string, double>> loss_terms;
};

// one metric per line, name=value
std::string to_kv(const MetricReport& r);

}  // namespace svfreg
