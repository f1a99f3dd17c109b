#include "doctest.h"
#include "helpers.hpp"

#include <svfreg/diffeo.hpp>
#include <svfreg/errors.hpp>
#include <svfreg/metrics.hpp>
#include <svfreg/rng.hpp>

#include <cmath>
#include <cstring>

using namespace svfreg;
using namespace testutil;

namespace {

GridMeta meta_of(int n) {
  GridMeta m;
  m.dims = {n, n, n};
  return m;
}

// Independent per-window loop, no sliding sums.
double lncc_brute_force(const Volume& a, const Volume& b, int w) {
  const int h = (w - 1) / 2;
  const auto& d = a.meta.dims;
  const double wn = double(w) * double(w) * double(w);
  double acc = 0.0;
  long n_valid = 0;
  for (int z = h; z < d[2] - h; ++z)
    for (int y = h; y < d[1] - h; ++y)
      for (int x = h; x < d[0] - h; ++x) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int kz = -h; kz <= h; ++kz)
          for (int ky = -h; ky <= h; ++ky)
            for (int kx = -h; kx <= h; ++kx) {
              double av = a.at(x + kx, y + ky, z + kz);
              double bv = b.at(x + kx, y + ky, z + kz);
              sa += av;
              sb += bv;
              saa += av * av;
              sbb += bv * bv;
              sab += av * bv;
            }
        double ca = saa - sa * sa / wn;
        double cb = sbb - sb * sb / wn;
        ++n_valid;
        if (ca / wn < 1e-5 || cb / wn < 1e-5) continue;
        double cab = sab - sa * sb / wn;
        double cc = cab * cab / (ca * cb);
        if (cc > 1.0) cc = 1.0;
        acc += cc;
      }
  return acc / double(n_valid);
}

LabelMap make_labels(GridMeta m, int classes, const std::vector<std::uint16_t>& vals) {
  LabelMap lm;
  lm.meta = m;
  lm.class_count = classes;
  lm.labels = vals;
  return lm;
}

}  // namespace

TEST_CASE("local ncc of a volume with itself is 1") {
  Volume a = random_volume(meta_of(9), 401);
  CHECK(local_ncc(a, a, 3) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(local_ncc(a, a, 5) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("local ncc is invariant to affine intensity remapping") {
  Volume a = random_volume(meta_of(9), 403);
  Volume b = a;
  for (auto& v : b.values) v = 2.0 * v + 3.0;
  CHECK(local_ncc(a, b, 3) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("local ncc matches a brute-force window loop") {
  Volume a = random_volume(meta_of(9), 405);
  Volume b = random_volume(meta_of(9), 406);
  for (int w : {3, 5}) {
    double fast = local_ncc(a, b, w);
    double slow = lncc_brute_force(a, b, w);
    CHECK(std::abs(fast - slow) <= 1e-10);
  }
}

TEST_CASE("local ncc stays within [0, 1]") {
  Rng rng(77);
  for (int t = 0; t < 10; ++t) {
    Volume a = random_volume(meta_of(8), rng.next_u64());
    Volume b = random_volume(meta_of(8), rng.next_u64());
    double v = local_ncc(a, b, 3);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("constant windows are guarded, counted, and contribute zero") {
  GridMeta m = meta_of(5);
  Volume a = Volume::zeros(m);
  for (auto& v : a.values) v = 0.5;  // every window constant
  Volume b = random_volume(m, 407);
  CHECK(local_ncc(a, b, 3) == 0.0);
}

TEST_CASE("local ncc rejects bad windows") {
  Volume a = random_volume(meta_of(6), 1);
  CHECK_THROWS_AS(local_ncc(a, a, 2), shape_error);
  CHECK_THROWS_AS(local_ncc(a, a, 1), shape_error);
  CHECK_THROWS_AS(local_ncc(a, a, 7), shape_error);
  Volume bad = random_volume(meta_of(8), 2);
  CHECK_THROWS_AS(local_ncc(a, bad, 3), shape_error);
}

TEST_CASE("dice of identical maps is 1 and of disjoint maps is 0") {
  GridMeta m = meta_of(4);
  std::vector<std::uint16_t> la(m.voxel_count(), 0);
  for (std::size_t i = 0; i < la.size() / 2; ++i) la[i] = 1;
  LabelMap a = make_labels(m, 2, la);
  DiceResult same = dice(a, a);
  CHECK(same.mean == doctest::Approx(1.0));
  REQUIRE(same.per_class.size() == 2);
  CHECK(*same.per_class[0] == doctest::Approx(1.0));
  CHECK(*same.per_class[1] == doctest::Approx(1.0));

  std::vector<std::uint16_t> lb(m.voxel_count(), 1);
  for (std::size_t i = 0; i < lb.size() / 2; ++i) lb[i] = 0;
  // flip: B assigns class 1 exactly where A assigns class 0
  LabelMap b = make_labels(m, 2, lb);
  DiceResult none = dice(a, b);
  CHECK(none.mean == doctest::Approx(0.0));
}

TEST_CASE("dice of a 4-4-2 overlap is one half") {
  GridMeta m;
  m.dims = {2, 2, 2};
  LabelMap a = make_labels(m, 2, {1, 1, 1, 1, 0, 0, 0, 0});
  LabelMap b = make_labels(m, 2, {0, 0, 1, 1, 1, 1, 0, 0});
  DiceResult r = dice(a, b);
  CHECK(*r.per_class[1] == doctest::Approx(0.5));
  CHECK(*r.per_class[0] == doctest::Approx(0.5));
  CHECK(r.mean == doctest::Approx(0.5));
}

TEST_CASE("dice is symmetric") {
  GridMeta m = meta_of(6);
  Rng rng(55);
  std::vector<std::uint16_t> la(m.voxel_count()), lb(m.voxel_count());
  for (auto& v : la) v = std::uint16_t(rng.uniform_int(3));
  for (auto& v : lb) v = std::uint16_t(rng.uniform_int(3));
  LabelMap a = make_labels(m, 3, la), b = make_labels(m, 3, lb);
  DiceResult ab = dice(a, b), ba = dice(b, a);
  CHECK(ab.mean == doctest::Approx(ba.mean).epsilon(1e-15));
}

TEST_CASE("dice flags absent classes instead of averaging them") {
  GridMeta m;
  m.dims = {2, 2, 2};
  LabelMap a = make_labels(m, 3, {0, 0, 0, 0, 1, 1, 1, 1});
  LabelMap b = make_labels(m, 3, {0, 0, 0, 0, 1, 1, 1, 1});
  DiceResult r = dice(a, b);
  CHECK_FALSE(r.per_class[2].has_value());
  CHECK(r.mean == doctest::Approx(1.0));
}

TEST_CASE("dice rejects mismatched class counts and out-of-range labels") {
  GridMeta m;
  m.dims = {2, 2, 2};
  LabelMap a = make_labels(m, 2, {0, 0, 0, 0, 1, 1, 1, 1});
  LabelMap b = make_labels(m, 3, {0, 0, 0, 0, 1, 1, 1, 1});
  CHECK_THROWS_AS(dice(a, b), shape_error);
  LabelMap c = make_labels(m, 2, {0, 0, 0, 0, 1, 1, 1, 2});
  CHECK_THROWS_AS(dice(a, c), shape_error);
}

TEST_CASE("diffusion energy of a constant field is zero") {
  VectorField f = constant_field(meta_of(6), 1.0, -2.0, 0.5);
  CHECK(diffusion_energy(f) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("diffusion energy of a linear ramp equals its squared slope") {
  GridMeta m = meta_of(6);
  VectorField f = VectorField::zeros(m);
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x)
        f.comp[0][std::size_t(x) + 6 * (std::size_t(y) + 6 * std::size_t(z))] = 2.0 * x;
  // du_x/dx = 2 everywhere (one-sided edges exact on linear data), others 0
  CHECK(diffusion_energy(f) == doctest::Approx(4.0).epsilon(1e-13));
}

TEST_CASE("diffusion energy matches an explicit gradient-based oracle") {
  GridMeta m = meta_of(7);
  VectorField f = VectorField::zeros(m);
  Rng rng(601);
  for (int c = 0; c < 3; ++c)
    for (auto& v : f.comp[c]) v = rng.uniform(-1.0, 1.0);
  double acc = 0.0;
  for (int c = 0; c < 3; ++c) {
    Volume comp;
    comp.meta = m;
    comp.values = f.comp[std::size_t(c)];
    VectorField g = spatial_gradient(comp);
    for (int a = 0; a < 3; ++a)
      for (double v : g.comp[std::size_t(a)]) acc += v * v;
  }
  double expect = acc / double(m.voxel_count());
  CHECK(diffusion_energy(f) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("jacobian hinge is zero on fold-free fields") {
  CHECK(jacobian_hinge(VectorField::zeros(meta_of(6)), 5.0) == 0.0);
  VectorField v = random_smooth_field(meta_of(16), 611, 3.0, 2.0);
  VectorField d = integrate_ss(v, {});
  FoldReport r = jacobian_analysis(d);
  REQUIRE(r.fold_count == 0);
  CHECK(jacobian_hinge(d, 5.0) == 0.0);
}

TEST_CASE("jacobian hinge of a reflection is lambda times one") {
  GridMeta m = meta_of(8);
  VectorField f = VectorField::zeros(m);
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        f.comp[0][std::size_t(x) + 8 * (std::size_t(y) + 8 * std::size_t(z))] = -2.0 * x;
  // det = -1 at every interior voxel, so the hinge mean is 1
  CHECK(jacobian_hinge(f, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(jacobian_hinge(f, 2.5) == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("hinge and fold counting agree on where folds are") {
  GridMeta m = meta_of(12);
  // strong compression: u_x = -0.9 * sin-like bump creates folds somewhere
  VectorField f = VectorField::zeros(m);
  for (int z = 0; z < 12; ++z)
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x)
        f.comp[0][std::size_t(x) + 12 * (std::size_t(y) + 12 * std::size_t(z))] =
            3.0 * std::sin(2.0 * 3.14159265358979 * x / 12.0);
  FoldReport r = jacobian_analysis(f);
  double h = jacobian_hinge(f, 1.0);
  CHECK(r.fold_count > 0);
  CHECK(h > 0.0);
  CHECK(r.min_det < 0.0);
}

TEST_CASE("closed-form kl of a standard normal posterior is zero") {
  std::vector<double> mu = {0.0, 0.0, 0.0};
  std::vector<double> sigma = {1.0, 1.0, 1.0};
  CHECK(kl_closed_form(mu, sigma) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("closed-form kl of a unit-shifted mean is one half") {
  std::vector<double> mu = {1.0, 0.0};
  std::vector<double> sigma = {1.0, 1.0};
  CHECK(kl_closed_form(mu, sigma) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("closed-form kl matches a monte carlo estimate") {
  std::vector<double> mu = {0.5, -0.3, 1.2, 0.0};
  std::vector<double> var = {0.7, 1.5, 1.0, 2.0};
  double closed = kl_closed_form(mu, var);

  Rng rng(12345);
  const int n = 100000;
  double sum = 0.0, sumsq = 0.0;
  for (int t = 0; t < n; ++t) {
    double s = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
      double xi = rng.normal();
      double z = mu[i] + std::sqrt(var[i]) * xi;
      s += 0.5 * (z * z - xi * xi - std::log(var[i]));
    }
    sum += s;
    sumsq += s * s;
  }
  double mean = sum / n;
  double se = std::sqrt((sumsq / n - mean * mean) / n);
  CHECK(std::abs(closed - mean) <= 3.0 * se);
}

TEST_CASE("kl is non-negative and rejects non-positive variances") {
  Rng rng(888);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> mu(5), var(5);
    for (auto& m : mu) m = rng.uniform(-2.0, 2.0);
    for (auto& v : var) v = rng.uniform(0.1, 3.0);
    CHECK(kl_closed_form(mu, var) >= 0.0);
  }
  std::vector<double> mu = {0.0};
  std::vector<double> bad = {0.0};
  CHECK_THROWS_AS(kl_closed_form(mu, bad), numeric_error);
  bad[0] = -1.0;
  CHECK_THROWS_AS(kl_closed_form(mu, bad), numeric_error);
}

TEST_CASE("window schedule widens toward coarse stages and clips to the grid") {
  CHECK(stage_window(0, 32) == 3);
  CHECK(stage_window(1, 32) == 5);
  CHECK(stage_window(2, 32) == 7);
  CHECK(stage_window(3, 32) == 9);
  CHECK(stage_window(2, 6) == 5);
  CHECK(stage_window(3, 4) == 3);
  CHECK(stage_window(2, 7) == 7);
  CHECK_THROWS_AS(stage_window(0, 2), shape_error);
}

TEST_CASE("hyperparameter vectors round-trip through the flat layout") {
  HyperParams h;
  h.lambda_sta = {0.1, 0.2, 0.3};
  h.lambda_mat = 4.0;
  h.lambda_reg = 5.0;
  h.lambda_jac = 6.0;
  auto v = h.flat();
  REQUIRE(v.size() == 6);
  CHECK(v[0] == 0.1);
  CHECK(v[3] == 4.0);
  CHECK(v[5] == 6.0);
  HyperParams back = HyperParams::from_flat(v, 3);
  CHECK(back.lambda_sta == h.lambda_sta);
  CHECK(back.lambda_jac == 6.0);
  CHECK_THROWS_AS(HyperParams::from_flat(v, 2), shape_error);
  HyperParams bad = h;
  bad.lambda_mat = -1.0;
  CHECK_THROWS_AS(bad.validate(3), numeric_error);
  CHECK_THROWS_AS(h.validate(2), shape_error);
}

namespace {
StageLossInput identity_stage(GridMeta m, std::size_t latent) {
  StageLossInput s;
  s.mu.assign(latent, 0.0);
  s.sigma.assign(latent, 1.0);
  s.velocity = VectorField::zeros(m);
  s.disp = VectorField::zeros(m);
  return s;
}
}  // namespace

TEST_CASE("total loss of a perfectly matched identity stage is zero") {
  GridMeta m = meta_of(8);
  Volume img = random_volume(m, 701);
  HyperParams h;
  h.lambda_sta = {1.0};
  h.lambda_mat = 10.0;
  h.lambda_reg = 3.0;
  h.lambda_jac = 2.0;
  LossBreakdown bd;
  double total = total_loss({identity_stage(m, 16)}, {img}, {img}, h, &bd);
  CHECK(std::abs(total) <= 1e-9);
  CHECK(bd.kl[0] == 0.0);
  CHECK(bd.ncc[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(bd.diffusion[0] == 0.0);
  CHECK(bd.hinge[0] == 0.0);
}

TEST_CASE("a zero stage weight removes that stage from the total") {
  GridMeta fine = meta_of(8), mid = meta_of(8), coarse = meta_of(8);
  Rng rng(702);
  std::vector<StageLossInput> stages;
  std::vector<Volume> src, tgt;
  for (GridMeta m : {fine, mid, coarse}) {
    StageLossInput s;
    s.mu = {0.3, -0.2};
    s.sigma = {0.8, 1.3};
    s.velocity = random_smooth_field(m, rng.next_u64(), 2.0, 1.0);
    s.disp = integrate_ss(s.velocity, {});
    stages.push_back(std::move(s));
    src.push_back(random_volume(m, rng.next_u64()));
    tgt.push_back(random_volume(m, rng.next_u64()));
  }
  HyperParams h;
  h.lambda_sta = {1.0, 0.0, 0.0};
  h.lambda_mat = 2.0;
  h.lambda_reg = 0.5;
  h.lambda_jac = 1.0;
  LossBreakdown bd;
  double total = total_loss(stages, src, tgt, h, &bd);
  CHECK(bd.stage_term[1] == 0.0);
  CHECK(bd.stage_term[2] == 0.0);
  CHECK(total == doctest::Approx(bd.stage_term[0]).epsilon(1e-15));
}

TEST_CASE("total loss equals a hand-assembled sum of its published terms") {
  GridMeta m = meta_of(9);
  Rng rng(703);
  StageLossInput s;
  s.mu = {0.4, 0.1, -0.7};
  s.sigma = {1.2, 0.6, 0.9};
  s.velocity = random_smooth_field(m, 7031, 2.0, 1.2);
  s.disp = integrate_ss(s.velocity, {});
  Volume src = random_volume(m, 7032);
  Volume tgt = random_volume(m, 7033);
  HyperParams h;
  h.lambda_sta = {0.7};
  h.lambda_mat = 3.0;
  h.lambda_reg = 1.5;
  h.lambda_jac = 4.0;

  double kl = kl_closed_form(s.mu, s.sigma);
  Volume warped = warp_volume(src, s.disp);
  double ncc = local_ncc(warped, tgt, stage_window(0, 9));
  double diff = diffusion_energy(s.velocity);
  double hinge = jacobian_hinge(s.velocity, 1.0);
  double reg = diff + h.lambda_jac * hinge;
  double expect = h.lambda_sta[0] * (kl + (h.lambda_mat * (1.0 - ncc) + h.lambda_reg * reg));

  LossBreakdown bd;
  double total = total_loss({s}, {src}, {tgt}, h, &bd);
  CHECK(total == doctest::Approx(expect).epsilon(1e-14));
  CHECK(bd.kl[0] == doctest::Approx(kl).epsilon(1e-15));
  CHECK(bd.ncc[0] == doctest::Approx(ncc).epsilon(1e-15));
  CHECK(bd.diffusion[0] == doctest::Approx(diff).epsilon(1e-15));
  CHECK(bd.hinge[0] == doctest::Approx(hinge).epsilon(1e-15));
}

TEST_CASE("setting a lambda to zero removes exactly that term") {
  GridMeta m = meta_of(9);
  StageLossInput s;
  s.mu = {0.4};
  s.sigma = {1.5};
  s.velocity = random_smooth_field(m, 7041, 2.0, 1.2);
  s.disp = integrate_ss(s.velocity, {});
  Volume src = random_volume(m, 7042);
  Volume tgt = random_volume(m, 7043);
  HyperParams h;
  h.lambda_sta = {1.0};
  h.lambda_mat = 0.0;
  h.lambda_reg = 2.0;
  h.lambda_jac = 0.0;
  LossBreakdown bd;
  double total = total_loss({s}, {src}, {tgt}, h, &bd);
  double expect = kl_closed_form(s.mu, s.sigma) + 2.0 * diffusion_energy(s.velocity);
  CHECK(total == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("metric reports render one name per line with absent classes marked") {
  MetricReport r;
  r.dice_mean = 0.75;
  r.dice_per_class = {std::optional<double>(0.5), std::nullopt};
  r.fold_count = 3;
  r.fold_dims = std::array<int, 3>{16, 16, 16};
  r.loss_terms.push_back({"total", 1.5});
  std::string s = to_kv(r);
  CHECK(s.find("dice_mean=0.75\n") != std::string::npos);
  CHECK(s.find("dice_class_0=0.5\n") != std::string::npos);
  CHECK(s.find("dice_class_1=absent\n") != std::string::npos);
  CHECK(s.find("fold_count=3\n") != std::string::npos);
  CHECK(s.find("fold_dims=16x16x16\n") != std::string::npos);
  CHECK(s.find("total=1.5\n") != std::string::npos);
}
