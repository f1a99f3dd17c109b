#pragma once
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "svfreg/grid.hpp"
#include "svfreg/metrics.hpp"

namespace svfreg {

// Two-file container: <stem>.json header + <stem>.raw little-endian payload.
// Pass the header path; the payload path is derived by swapping the extension.

void save_volume(const std::filesystem::path& header, const Volume& vol,
                 const std::string& dtype = "f64");
Volume load_volume(const std::filesystem::path& header);

void save_labels(const std::filesystem::path& header, const LabelMap& lab);
LabelMap load_labels(const std::filesystem::path& header);

// component-planar payload: all x, then all y, then all z
void save_field(const std::filesystem::path& header, const VectorField& f,
                const std::string& dtype = "f64");
VectorField load_field(const std::filesystem::path& header);

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
};

struct CheckpointData {
  int stages = 0;
  std::vector<int> channels;
  int hidden = 0;
  int ss_steps = 7;
  std::string precision = "double";  // payload dtype: single -> f32, double -> f64
  HyperParams hyper;
  long iteration = 0;
  std::uint64_t seed = 0;
  std::vector<NamedTensor> tensors;
};

void save_checkpoint(const std::filesystem::path& header, const CheckpointData& ckpt);
CheckpointData load_checkpoint(const std::filesystem::path& header);

// P2 portable graymap of the mid-z slice, 4x4 checkerboard of a vs b.
void write_checkerboard_pgm(const std::filesystem::path& path, const Volume& a, const Volume& b);

}  // namespace svfreg
