#pragma once
#include <array>
#include <cstdint>
#include <vector>

#include "svfreg/grid.hpp"

namespace svfreg {

struct SynthConfig {
  std::array<int, 3> dims{32, 32, 32};
  int class_count = 4;
  double deform_magnitude = 3.0;   // max velocity in voxels, capped at min(dims)/8
  double deform_smoothness = 5.0;  // gaussian sigma of the random velocity
  double intensity_jitter = 0.02;
  void validate() const;
};

struct SynthTemplate {
  Volume image;
  LabelMap labels;
};

struct SynthPair {
  Volume source, target;
  LabelMap source_labels, target_labels;
  VectorField true_field;  // displacement applied to the template to make the source
};

// Nested smooth blobs: quantile bands of a smoothed noise field define the
// classes, each with a distinct mean intensity plus fine texture.
SynthTemplate synth_template(const SynthConfig& cfg, std::uint64_t seed);

SynthPair synth_pair(const SynthConfig& cfg, std::uint64_t seed);

// White noise smoothed per component, rescaled so max |v| equals magnitude.
VectorField smooth_random_field(const GridMeta& meta, double sigma, double magnitude,
                                std::uint64_t seed);

struct SplitIndices {
  std::vector<int> train, val, test;
};

// Seeded shuffle, then contiguous floor-then-distribute partition.
SplitIndices split(int n_pairs, const std::array<double, 3>& ratios, std::uint64_t seed);

}  // namespace svfreg
