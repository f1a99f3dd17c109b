#include "svfreg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "svfreg/diffeo.hpp"
#include "svfreg/rng.hpp"

namespace svfreg {

void SynthConfig::validate() const {
  GridMeta m(dims[0], dims[1], dims[2]);
  m.validate();
  if (class_count < 2) throw data_error("synth: class_count must be >= 2");
  const int min_dim = std::min({dims[0], dims[1], dims[2]});
  if (deform_magnitude < 0.0 || deform_magnitude > double(min_dim) / 8.0)
    throw data_error("synth: deform_magnitude must be in [0, min(dims)/8]");
  if (deform_smoothness <= 0.0) throw data_error("synth: deform_smoothness must be positive");
  if (intensity_jitter < 0.0) throw data_error("synth: intensity_jitter must be >= 0");
}

namespace {

Volume noise_volume(const GridMeta& meta, Rng& rng) {
  Volume v = Volume::zeros(meta);
  for (auto& x : v.values) x = rng.normal();
  return v;
}

}  // namespace

VectorField smooth_random_field(const GridMeta& meta, double sigma, double magnitude,
                                std::uint64_t seed) {
  meta.validate();
  VectorField f = VectorField::zeros(meta);
  Rng rng(seed_mix(seed, 0x76656c6f63697479ull));
  for (auto& c : f.comp)
    for (auto& x : c) x = rng.normal();
  f = gaussian_smooth(f, sigma, true);
  double max_mag = 0.0;
  for (std::size_t i = 0; i < meta.voxel_count(); ++i) {
    const double m = std::sqrt(f.comp[0][i] * f.comp[0][i] + f.comp[1][i] * f.comp[1][i] +
                               f.comp[2][i] * f.comp[2][i]);
    max_mag = std::max(max_mag, m);
  }
  if (max_mag > 0.0 && magnitude >= 0.0) {
    const double s = magnitude / max_mag;
    for (auto& c : f.comp)
      for (auto& x : c) x *= s;
  }
  return f;
}

SynthTemplate synth_template(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  GridMeta meta(cfg.dims[0], cfg.dims[1], cfg.dims[2]);

  Rng rng(seed_mix(seed, 0x74656d706c617465ull));
  Volume shape = noise_volume(meta, rng);
  // structure scale calibrated so default-magnitude pairs start at dice ~0.6-0.75
  shape = gaussian_smooth(shape, 2.0);

  // quantile bands give every class roughly equal volume
  std::vector<double> sorted(shape.values);
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> cuts;
  for (int c = 1; c < cfg.class_count; ++c)
    cuts.push_back(sorted[std::size_t(double(sorted.size()) * double(c) / cfg.class_count)]);

  SynthTemplate out;
  out.labels.meta = meta;
  out.labels.class_count = cfg.class_count;
  out.labels.labels.resize(meta.voxel_count());
  out.image = Volume::zeros(meta);

  Volume texture = noise_volume(meta, rng);
  texture = gaussian_smooth(texture, 1.2);

  for (std::size_t i = 0; i < meta.voxel_count(); ++i) {
    int label = 0;
    while (label < cfg.class_count - 1 && shape.values[i] >= cuts[std::size_t(label)]) ++label;
    out.labels.labels[i] = std::uint16_t(label);
    const double base = (double(label) + 0.5) / double(cfg.class_count);
    out.image.values[i] = std::clamp(base + 0.35 * texture.values[i], 0.0, 1.0);
  }
  return out;
}

SynthPair synth_pair(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SynthTemplate tpl = synth_template(cfg, seed);
  const GridMeta meta = tpl.image.meta;

  SynthPair pair;
  VectorField velocity =
      smooth_random_field(meta, cfg.deform_smoothness, cfg.deform_magnitude, seed_mix(seed, 1));
  pair.true_field = integrate_ss(velocity);
  pair.source = warp_volume(tpl.image, pair.true_field);
  pair.source_labels = warp_labels_nn(tpl.labels, pair.true_field);

  pair.target = tpl.image;
  pair.target_labels = tpl.labels;
  if (cfg.intensity_jitter > 0.0) {
    Rng jrng(seed_mix(seed, 2));
    Volume jitter = noise_volume(meta, jrng);
    jitter = gaussian_smooth(jitter, 1.0);
    for (std::size_t i = 0; i < meta.voxel_count(); ++i)
      pair.target.values[i] =
          std::clamp(pair.target.values[i] + cfg.intensity_jitter * jitter.values[i], 0.0, 1.0);
  }
  return pair;
}

SplitIndices split(int n_pairs, const std::array<double, 3>& ratios, std::uint64_t seed) {
  if (n_pairs <= 0) throw data_error("split: no pairs");
  double sum = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw data_error("split: negative ratio");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw data_error("split: ratios must sum to 1");

  std::vector<int> order(static_cast<std::size_t>(n_pairs));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed_mix(seed, 0x73706c6974ull));
  for (int i = n_pairs - 1; i > 0; --i)
    std::swap(order[std::size_t(i)], order[std::size_t(rng.uniform_int(i + 1))]);

  std::array<int, 3> sizes{};
  int assigned = 0;
  for (int p = 0; p < 3; ++p) {
    sizes[std::size_t(p)] = int(std::floor(ratios[std::size_t(p)] * n_pairs));
    assigned += sizes[std::size_t(p)];
  }
  for (int p = 0; assigned < n_pairs; p = (p + 1) % 3) {
    if (ratios[std::size_t(p)] > 0.0) {
      ++sizes[std::size_t(p)];
      ++assigned;
    }
  }
  for (int p = 0; p < 3; ++p)
    if (ratios[std::size_t(p)] > 0.0 && sizes[std::size_t(p)] == 0)
      throw data_error("split: a non-zero ratio produced an empty partition");

  SplitIndices s;
  auto it = order.begin();
  s.train.assign(it, it + sizes[0]);
  it += sizes[0];
  s.val.assign(it, it + sizes[1]);
  it += sizes[1];
  s.test.assign(it, it + sizes[2]);
  return s;
}

}  // namespace svfreg
