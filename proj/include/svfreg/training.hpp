#pragma once
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

namespace svfreg {

enum class EpsMode {
  upper_lr,       // stencil eps equals the upper step size
  fixed,          // eps_value as given
  grad_relative,  // eps_value / ||dF/dy1||
};

struct TuneConfig {
  long budget = 0;
  int upper_every = 1;  // hyper update cadence in lower steps; 0 freezes the upper problem
  double lower_lr = 1e-3;
  double upper_lr = 1e-2;
  EpsMode eps_mode = EpsMode::upper_lr;
  double eps_value = 1e-3;
  bool adam = true;  // lower steps only; the unroll always uses the plain rule
  double lambda_floor = 0.0;
  int log_every = 1;
};

struct HistoryRow {
  long iter = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::vector<double> x;
};

// Two nested objectives over flat coordinate vectors: f (lower, training
// split) in y with hyper x, F (upper, validation split) in the same pair.
// Callbacks must be pure in (x, y, iter) so trajectories replay bitwise.
struct BilevelProblem {
  std::size_t n_lower = 0;
  std::size_t n_upper = 0;
  // returns f; fills gy (size n_lower) when non-null
  std::function<double(const std::vector<double>& x, const std::vector<double>& y, long iter,
                       std::vector<double>* gy)>
      lower;
  // df/dx on the same batch as `iter` draws (common random numbers)
  std::function<void(const std::vector<double>& x, const std::vector<double>& y, long iter,
                     std::vector<double>* gx)>
      lower_grad_x;
  // returns F; fills gy when non-null
  std::function<double(const std::vector<double>& x, const std::vector<double>& y,
                       std::vector<double>* gy)>
      upper;
  // direct dF/dx term; leave empty when F has no explicit x dependence
  std::function<void(const std::vector<double>& x, const std::vector<double>& y,
                     std::vector<double>* gx)>
      upper_grad_x;
};

struct TuneResult {
  std::vector<double> x, y;
  std::vector<HistoryRow> history;
};

struct AdamState {
  std::vector<double> m, v;
  long t = 0;
};

void adam_step(AdamState* st, std::vector<double>* y, const std::vector<double>& g, double lr);

// Stencil width for the mixed-partial central difference.
double hyper_eps(const TuneConfig& cfg, double d_norm);

// One-step-unrolled hypergradient with the Hessian-vector product replaced by
// a central difference of df/dx around y0 along d = dF/dy1, y1 = y0 - s1*gy0:
//   dF/dx(direct) - s1 * [df/dx(x, y0 + eps d) - df/dx(x, y0 - eps d)] / (2 eps)
std::vector<double> hypergradient_fd(const BilevelProblem& p, const std::vector<double>& x,
                                     const std::vector<double>& y0, const std::vector<double>& gy0,
                                     long iter, double s1, double eps,
                                     double* val_at_y1 = nullptr);

// Alternating loop: each iteration evaluates f once, folds that gradient into
// the hyper update (when due) and into the lower step.  x is clamped to the
// floor after every hyper update.  History rows are appended every log_every
// iterations and at the end.
TuneResult tune(const BilevelProblem& p, std::vector<double> x, std::vector<double> y,
                const TuneConfig& cfg);

// Frozen-x baseline; identical trajectories to tune with upper step size 0.
TuneResult train_fixed(const BilevelProblem& p, std::vector<double> x, std::vector<double> y,
                       const TuneConfig& cfg);

// header: iter,train_loss,val_loss,lambda_sta_0..{K-1},lambda_mat,lambda_reg,lambda_jac
void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows,
                       int stages);

}  // namespace svfreg
