#include "svfreg/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "svfreg/stencils.hpp"

namespace svfreg {

std::vector<double> HyperParams::flat() const {
  std::vector<double> v(lambda_sta);
  v.push_back(lambda_mat);
  v.push_back(lambda_reg);
  v.push_back(lambda_jac);
  return v;
}

HyperParams HyperParams::from_flat(std::span<const double> v, int stages) {
  if (int(v.size()) != stages + 3) throw shape_error("hyperparameter vector has wrong length");
  HyperParams h;
  h.lambda_sta.assign(v.begin(), v.begin() + stages);
  h.lambda_mat = v[std::size_t(stages)];
  h.lambda_reg = v[std::size_t(stages) + 1];
  h.lambda_jac = v[std::size_t(stages) + 2];
  return h;
}

void HyperParams::validate(int stages) const {
  if (int(lambda_sta.size()) != stages) throw shape_error("lambda_sta length must equal stage count");
  for (double v : lambda_sta)
    if (!(v >= 0.0)) throw numeric_error("lambda_sta must be non-negative");
  if (!(lambda_mat >= 0.0) || !(lambda_reg >= 0.0) || !(lambda_jac >= 0.0))
    throw numeric_error("lambda values must be non-negative");
}

double local_ncc(const Volume& a, const Volume& b, int window) {
  if (a.meta != b.meta) throw shape_error("local_ncc: meta mismatch");
  const int d[3] = {a.meta.dims[0], a.meta.dims[1], a.meta.dims[2]};
  return detail::lncc_mean_sq(a.values.data(), b.values.data(), d, window, nullptr);
}

DiceResult dice(const LabelMap& a, const LabelMap& b) {
  if (a.meta != b.meta) throw shape_error("dice: meta mismatch");
  if (a.class_count != b.class_count || a.class_count < 1)
    throw shape_error("dice: class_count mismatch");
  const int k = a.class_count;
  std::vector<long> na(std::size_t(k), 0), nb(std::size_t(k), 0), nab(std::size_t(k), 0);
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    const int la = a.labels[i], lb = b.labels[i];
    if (la >= k || lb >= k) throw shape_error("dice: label out of range");
    ++na[std::size_t(la)];
    ++nb[std::size_t(lb)];
    if (la == lb) ++nab[std::size_t(la)];
  }
  DiceResult r;
  r.per_class.resize(std::size_t(k));
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    if (na[std::size_t(c)] + nb[std::size_t(c)] == 0) continue;
    const double v = 2.0 * double(nab[std::size_t(c)]) / double(na[std::size_t(c)] + nb[std::size_t(c)]);
    r.per_class[std::size_t(c)] = v;
    sum += v;
    ++present;
  }
  if (present == 0) throw data_error("dice: no classes present");
  r.mean = sum / double(present);
  return r;
}

double diffusion_energy(const VectorField& v) {
  const double* u[3] = {v.comp[0].data(), v.comp[1].data(), v.comp[2].data()};
  const int d[3] = {v.meta.dims[0], v.meta.dims[1], v.meta.dims[2]};
  return detail::diffusion_mean(u, d);
}

double jacobian_hinge(const VectorField& v, double lambda_jac) {
  const double* u[3] = {v.comp[0].data(), v.comp[1].data(), v.comp[2].data()};
  const int d[3] = {v.meta.dims[0], v.meta.dims[1], v.meta.dims[2]};
  return lambda_jac * detail::hinge_mean(u, d);
}

double kl_closed_form(std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw shape_error("kl_closed_form: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(sigma[i] > 0.0)) throw numeric_error("kl_closed_form: non-positive variance");
    acc += sigma[i] + mu[i] * mu[i] - std::log(sigma[i]) - 1.0;
  }
  return 0.5 * acc;
}

int stage_window(int fineness, int min_dim) {
  int w = 3 + 2 * fineness;
  int cap = (min_dim % 2 == 0) ? min_dim - 1 : min_dim;
  if (w > cap) w = cap;
  if (w < 3) throw shape_error("stage grid too small for any ncc window");
  return w;
}

double total_loss(const std::vector<StageLossInput>& stages, const std::vector<Volume>& src_levels,
                  const std::vector<Volume>& tgt_levels, const HyperParams& h,
                  LossBreakdown* breakdown) {
  const int k = int(stages.size());
  if (k == 0) throw data_error("total_loss: no stages");
  if (int(src_levels.size()) != k || int(tgt_levels.size()) != k)
    throw shape_error("total_loss: image level count mismatch");
  h.validate(k);

  LossBreakdown local;
  LossBreakdown& bd = breakdown ? *breakdown : local;
  bd = LossBreakdown{};
  double total = 0.0;
  for (int j = 0; j < k; ++j) {
    const auto& st = stages[std::size_t(j)];
    if (st.disp.meta != src_levels[std::size_t(j)].meta ||
        st.disp.meta != tgt_levels[std::size_t(j)].meta || st.velocity.meta != st.disp.meta)
      throw shape_error("total_loss: stage resolution mismatch");
    const double kl = kl_closed_form(st.mu, st.sigma);
    const int min_dim =
        std::min({st.disp.meta.dims[0], st.disp.meta.dims[1], st.disp.meta.dims[2]});
    const int w = stage_window(k - 1 - j, min_dim);
    const Volume warped = warp_volume(src_levels[std::size_t(j)], st.disp);
    const double ncc = local_ncc(warped, tgt_levels[std::size_t(j)], w);
    const double deficit = 1.0 - ncc;
    const double diff = diffusion_energy(st.velocity);
    const double hinge = jacobian_hinge(st.velocity, 1.0);
    // assembly order mirrors the differentiable graph
    const double reg = diff + h.lambda_jac * hinge;
    const double inner = kl + (h.lambda_mat * deficit + h.lambda_reg * reg);
    const double term = h.lambda_sta[std::size_t(j)] * inner;
    bd.kl.push_back(kl);
    bd.ncc.push_back(ncc);
    bd.deficit.push_back(deficit);
    bd.diffusion.push_back(diff);
    bd.hinge.push_back(hinge);
    bd.stage_term.push_back(term);
    total += term;
  }
  bd.total = total;
  return total;
}

namespace {
std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

std::string to_kv(const MetricReport& r) {
  std::ostringstream os;
  if (r.dice_mean) os << "dice_mean=" << fmt(*r.dice_mean) << "\n";
  for (std::size_t c = 0; c < r.dice_per_class.size(); ++c) {
    os << "dice_class_" << c << "=";
    if (r.dice_per_class[c])
      os << fmt(*r.dice_per_class[c]);
    else
      os << "absent";
    os << "\n";
  }
  if (r.ncc) os << "ncc=" << fmt(*r.ncc) << "\n";
  if (r.fold_count) os << "fold_count=" << *r.fold_count << "\n";
  if (r.min_det) os << "min_det=" << fmt(*r.min_det) << "\n";
  if (r.fold_dims)
    os << "fold_dims=" << (*r.fold_dims)[0] << "x" << (*r.fold_dims)[1] << "x" << (*r.fold_dims)[2]
       << "\n";
  for (const auto& [name, value] : r.loss_terms) os << name << "=" << fmt(value) << "\n";
  return os.str();
}

}  // namespace svfreg
