#include "svfreg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "svfreg/errors.hpp"

namespace svfreg {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void check_finite(double v, const char* what, long iter) {
  if (!std::isfinite(v))
    throw numeric_error(std::string(what) + " is not finite", iter);
}

void check_finite(const std::vector<double>& v, const char* what, long iter) {
  for (double e : v) check_finite(e, what, iter);
}

}  // namespace

void adam_step(AdamState* st, std::vector<double>* y, const std::vector<double>& g, double lr) {
  if (st->m.empty()) {
    st->m.assign(y->size(), 0.0);
    st->v.assign(y->size(), 0.0);
  }
  ++st->t;
  const double c1 = 1.0 - std::pow(kBeta1, double(st->t));
  const double c2 = 1.0 - std::pow(kBeta2, double(st->t));
  for (std::size_t i = 0; i < y->size(); ++i) {
    st->m[i] = kBeta1 * st->m[i] + (1.0 - kBeta1) * g[i];
    st->v[i] = kBeta2 * st->v[i] + (1.0 - kBeta2) * g[i] * g[i];
    (*y)[i] -= lr * (st->m[i] / c1) / (std::sqrt(st->v[i] / c2) + kAdamEps);
  }
}

double hyper_eps(const TuneConfig& cfg, double d_norm) {
  switch (cfg.eps_mode) {
    case EpsMode::upper_lr:
      return cfg.upper_lr > 0.0 ? cfg.upper_lr : 1e-3;  // finite stencil even when frozen
    case EpsMode::fixed:
      return cfg.eps_value;
    case EpsMode::grad_relative:
      return cfg.eps_value / std::max(d_norm, 1e-12);
  }
  return cfg.eps_value;
}

std::vector<double> hypergradient_fd(const BilevelProblem& p, const std::vector<double>& x,
                                     const std::vector<double>& y0, const std::vector<double>& gy0,
                                     long iter, double s1, double eps, double* val_at_y1) {
  if (!(eps > 0.0)) throw numeric_error("hypergradient stencil eps must be positive", iter);

  std::vector<double> y1(y0.size());
  for (std::size_t i = 0; i < y0.size(); ++i) y1[i] = y0[i] - s1 * gy0[i];

  std::vector<double> d(y0.size());
  const double val = p.upper(x, y1, &d);
  if (val_at_y1) *val_at_y1 = val;
  check_finite(val, "validation loss", iter);

  std::vector<double> yp(y0.size()), ym(y0.size());
  for (std::size_t i = 0; i < y0.size(); ++i) {
    yp[i] = y0[i] + eps * d[i];
    ym[i] = y0[i] - eps * d[i];
  }
  std::vector<double> gxp(x.size(), 0.0), gxm(x.size(), 0.0);
  p.lower_grad_x(x, yp, iter, &gxp);
  p.lower_grad_x(x, ym, iter, &gxm);

  std::vector<double> hg(x.size(), 0.0);
  if (p.upper_grad_x) p.upper_grad_x(x, y1, &hg);
  for (std::size_t i = 0; i < x.size(); ++i) hg[i] -= s1 * (gxp[i] - gxm[i]) / (2.0 * eps);
  check_finite(hg, "hypergradient", iter);
  return hg;
}

TuneResult tune(const BilevelProblem& p, std::vector<double> x, std::vector<double> y,
                const TuneConfig& cfg) {
  TuneResult res;
  AdamState adam;
  std::vector<double> gy(p.n_lower, 0.0);

  for (long it = 1; it <= cfg.budget; ++it) {
    const double train = p.lower(x, y, it, &gy);
    check_finite(train, "training loss", it);
    check_finite(gy, "training gradient", it);

    if (cfg.upper_every > 0 && it % cfg.upper_every == 0) {
      double d_norm = 0.0;
      if (cfg.eps_mode == EpsMode::grad_relative) {
        // probe dF/dy1 once to scale the stencil
        std::vector<double> y1(y.size()), d(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) y1[i] = y[i] - cfg.lower_lr * gy[i];
        p.upper(x, y1, &d);
        for (double e : d) d_norm += e * e;
        d_norm = std::sqrt(d_norm);
      }
      const double eps = hyper_eps(cfg, d_norm);
      const std::vector<double> hg = hypergradient_fd(p, x, y, gy, it, cfg.lower_lr, eps);
      for (std::size_t i = 0; i < x.size(); ++i)
        x[i] = std::max(x[i] - cfg.upper_lr * hg[i], cfg.lambda_floor);
    }

    if (cfg.adam) {
      adam_step(&adam, &y, gy, cfg.lower_lr);
    } else {
      for (std::size_t i = 0; i < y.size(); ++i) y[i] -= cfg.lower_lr * gy[i];
    }

    if (cfg.log_every > 0 && (it % cfg.log_every == 0 || it == cfg.budget)) {
      HistoryRow row;
      row.iter = it;
      row.train_loss = train;
      row.val_loss = p.upper(x, y, nullptr);
      row.x = x;
      res.history.push_back(std::move(row));
    }
  }

  res.x = std::move(x);
  res.y = std::move(y);
  return res;
}

TuneResult train_fixed(const BilevelProblem& p, std::vector<double> x, std::vector<double> y,
                       const TuneConfig& cfg) {
  TuneConfig frozen = cfg;
  frozen.upper_every = 0;
  return tune(p, std::move(x), std::move(y), frozen);
}

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows,
                       int stages) {
  std::ofstream out(path);
  if (!out) throw io_error(io_error::kind::open_failed, "cannot write " + path.string());
  out << "iter,train_loss,val_loss";
  for (int k = 0; k < stages; ++k) out << ",lambda_sta_" << k;
  out << ",lambda_mat,lambda_reg,lambda_jac\n";
  char buf[32];
  for (const HistoryRow& r : rows) {
    out << r.iter;
    auto put = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << ',' << buf;
    };
    put(r.train_loss);
    put(r.val_loss);
    for (double v : r.x) put(v);
    out << '\n';
  }
  if (!out) throw io_error(io_error::kind::open_failed, "short write to " + path.string());
}

}  // namespace svfreg
