#pragma once
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "svfreg/grid.hpp"
#include "svfreg/synth.hpp"

namespace svfreg {

struct RegPair {
  Volume source, target;
  LabelMap source_labels, target_labels;  // evaluation only; may be empty
};

// Relative header paths in fixed order: source, target, source_labels,
// target_labels, true_field.
struct PairEntry {
  std::uint64_t seed = 0;
  std::array<std::string, 5> files;
};

struct Dataset {
  std::filesystem::path root;  // directory holding manifest.json, not serialized
  std::uint64_t seed = 0;
  SynthConfig config;
  std::vector<PairEntry> pairs;
};

// Writes pair_### directories plus manifest.json; pair i is drawn from
// seed_mix(seed, i) and its true field is rejected if it folds.
Dataset generate_dataset(const std::filesystem::path& dir, const SynthConfig& cfg, int n_pairs,
                         std::uint64_t seed);

// Accepts the manifest path or the directory containing manifest.json.
Dataset open_dataset(const std::filesystem::path& path);

RegPair load_pair(const Dataset& ds, int index);
VectorField load_true_field(const Dataset& ds, int index);

}  // namespace svfreg
