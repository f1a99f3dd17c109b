#include "doctest.h"
#include "helpers.hpp"

#include <svfreg/diffeo.hpp>
#include <svfreg/errors.hpp>
#include <svfreg/metrics.hpp>
#include <svfreg/synth.hpp>

#include <algorithm>

using namespace svfreg;

TEST_CASE("the same seed reproduces a pair bitwise") {
  SynthConfig cfg;
  cfg.dims = {16, 16, 16};
  cfg.deform_magnitude = 2.0;
  SynthPair a = synth_pair(cfg, 42);
  SynthPair b = synth_pair(cfg, 42);
  CHECK(a.source.values == b.source.values);
  CHECK(a.target.values == b.target.values);
  CHECK(a.source_labels.labels == b.source_labels.labels);
  CHECK(a.true_field.comp[0] == b.true_field.comp[0]);
  SynthPair c = synth_pair(cfg, 43);
  CHECK(a.source.values != c.source.values);
}

TEST_CASE("every class occupies at least two percent of the template") {
  SynthConfig cfg;
  cfg.dims = {24, 24, 24};
  cfg.class_count = 4;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SynthTemplate t = synth_template(cfg, seed);
    std::vector<long> hist(4, 0);
    for (auto l : t.labels.labels) ++hist[l];
    const double total = double(t.labels.labels.size());
    for (int c = 0; c < 4; ++c) CHECK(double(hist[std::size_t(c)]) / total >= 0.02);
  }
}

TEST_CASE("intensities stay inside the unit interval") {
  SynthConfig cfg;
  cfg.dims = {16, 16, 16};
  cfg.deform_magnitude = 2.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthPair p = synth_pair(cfg, seed);
    for (double v : p.source.values) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    for (double v : p.target.values) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("zero deformation magnitude aligns source and target labels exactly") {
  SynthConfig cfg;
  cfg.dims = {16, 16, 16};
  cfg.deform_magnitude = 0.0;
  SynthPair p = synth_pair(cfg, 7);
  CHECK(p.source_labels.labels == p.target_labels.labels);
  CHECK(dice(p.source_labels, p.target_labels).mean == doctest::Approx(1.0));
  for (int c = 0; c < 3; ++c)
    for (double v : p.true_field.comp[c]) CHECK(v == 0.0);
}

TEST_CASE("generated deformations are fold-free across one hundred seeds") {
  SynthConfig cfg;
  cfg.dims = {16, 16, 16};
  cfg.deform_magnitude = 2.0;
  long worst = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SynthPair p = synth_pair(cfg, seed);
    FoldReport r = jacobian_analysis(p.true_field);
    worst = std::max(worst, r.fold_count);
  }
  CHECK(worst == 0);
}

TEST_CASE("default deformations leave a moderate initial overlap to recover") {
  SynthConfig cfg;
  cfg.dims = {32, 32, 32};
  cfg.deform_magnitude = 3.0;
  double lo = 1.0, hi = 0.0, mean = 0.0;
  const int n = 100;
  for (std::uint64_t seed = 0; seed < n; ++seed) {
    SynthPair p = synth_pair(cfg, seed);
    double d = dice(p.source_labels, p.target_labels).mean;
    lo = std::min(lo, d);
    hi = std::max(hi, d);
    mean += d;
  }
  mean /= n;
  MESSAGE("initial dice: min=", lo, " mean=", mean, " max=", hi);
  CHECK(lo >= 0.5);
  CHECK(hi <= 0.9);
}

TEST_CASE("deformation magnitudes beyond an eighth of the grid are rejected") {
  SynthConfig cfg;
  cfg.dims = {16, 16, 16};
  cfg.deform_magnitude = 2.1;  // cap is 16/8 = 2
  CHECK_THROWS_AS(cfg.validate(), data_error);
  cfg.deform_magnitude = 2.0;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("smooth random fields honor the requested peak magnitude") {
  GridMeta m;
  m.dims = {16, 16, 16};
  VectorField f = smooth_random_field(m, 3.0, 2.5, 99);
  double peak = 0.0;
  for (std::size_t i = 0; i < f.comp[0].size(); ++i) {
    double n = std::sqrt(f.comp[0][i] * f.comp[0][i] + f.comp[1][i] * f.comp[1][i] +
                         f.comp[2][i] * f.comp[2][i]);
    peak = std::max(peak, n);
  }
  CHECK(peak == doctest::Approx(2.5).epsilon(1e-9));
}

TEST_CASE("the true field is the integral of the hidden velocity") {
  // fold-free and invertible: composing with its inverse flow is near-identity
  SynthConfig cfg;
  cfg.dims = {16, 16, 16};
  cfg.deform_magnitude = 2.0;
  SynthPair p = synth_pair(cfg, 5);
  FoldReport r = jacobian_analysis(p.true_field);
  CHECK(r.fold_count == 0);
  CHECK(r.min_det > 0.05);
}

TEST_CASE("splits partition the requested counts") {
  SplitIndices s = split(10, {0.6, 0.2, 0.2}, 1);
  CHECK(s.train.size() == 6);
  CHECK(s.val.size() == 2);
  CHECK(s.test.size() == 2);
  std::vector<int> all;
  for (auto v : {&s.train, &s.val, &s.test}) all.insert(all.end(), v->begin(), v->end());
  std::sort(all.begin(), all.end());
  for (int i = 0; i < 10; ++i) CHECK(all[std::size_t(i)] == i);
}

TEST_CASE("a unit ratio takes everything and zero ratios take nothing") {
  SplitIndices s = split(5, {1.0, 0.0, 0.0}, 3);
  CHECK(s.train.size() == 5);
  CHECK(s.val.empty());
  CHECK(s.test.empty());
}

TEST_CASE("degenerate split requests are rejected") {
  CHECK_THROWS_AS(split(10, {0.5, 0.2, 0.2}, 1), data_error);
  CHECK_THROWS_AS(split(10, {-0.2, 1.0, 0.2}, 1), data_error);
  // a nonzero ratio that rounds to zero elements cannot be satisfied
  CHECK_THROWS_AS(split(1, {0.4, 0.3, 0.3}, 1), data_error);
}

TEST_CASE("splits are deterministic per seed and differ across seeds") {
  SplitIndices a = split(20, {0.6, 0.2, 0.2}, 11);
  SplitIndices b = split(20, {0.6, 0.2, 0.2}, 11);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
  SplitIndices c = split(20, {0.6, 0.2, 0.2}, 12);
  CHECK(a.train != c.train);
}
