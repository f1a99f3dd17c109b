#include "svfreg/dataset.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>

#include "svfreg/diffeo.hpp"
#include "svfreg/errors.hpp"
#include "svfreg/io.hpp"
#include "svfreg/rng.hpp"

namespace svfreg {

using nlohmann::json;

namespace {

constexpr const char* kFileKeys[5] = {"source", "target", "source_labels", "target_labels",
                                      "true_field"};

std::filesystem::path manifest_path(const std::filesystem::path& path) {
  if (std::filesystem::is_directory(path)) return path / "manifest.json";
  return path;
}

}  // namespace

Dataset generate_dataset(const std::filesystem::path& dir, const SynthConfig& cfg, int n_pairs,
                         std::uint64_t seed) {
  cfg.validate();
  if (n_pairs < 1) throw data_error("dataset needs at least one pair");
  std::filesystem::create_directories(dir);

  Dataset ds;
  ds.root = dir;
  ds.seed = seed;
  ds.config = cfg;

  for (int i = 0; i < n_pairs; ++i) {
    const std::uint64_t pair_seed = seed_mix(seed, std::uint64_t(i));
    const SynthPair sp = synth_pair(cfg, pair_seed);
    const FoldReport folds = jacobian_analysis(sp.true_field);
    if (folds.fold_count != 0)
      throw numeric_error("generated deformation folds at pair " + std::to_string(i), i);

    char name[32];
    std::snprintf(name, sizeof name, "pair_%03d", i);
    const std::filesystem::path sub = dir / name;

    PairEntry entry;
    entry.seed = pair_seed;
    entry.files = {std::string(name) + "/source.json", std::string(name) + "/target.json",
                   std::string(name) + "/source_labels.json",
                   std::string(name) + "/target_labels.json",
                   std::string(name) + "/true_field.json"};
    save_volume(sub / "source.json", sp.source);
    save_volume(sub / "target.json", sp.target);
    save_labels(sub / "source_labels.json", sp.source_labels);
    save_labels(sub / "target_labels.json", sp.target_labels);
    save_field(sub / "true_field.json", sp.true_field);
    ds.pairs.push_back(std::move(entry));
  }

  json j;
  j["seed"] = seed;
  j["config"] = {{"dims", cfg.dims},
                 {"class_count", cfg.class_count},
                 {"deform_magnitude", cfg.deform_magnitude},
                 {"deform_smoothness", cfg.deform_smoothness},
                 {"intensity_jitter", cfg.intensity_jitter}};
  j["pairs"] = json::array();
  for (const PairEntry& e : ds.pairs) {
    json files;
    for (int k = 0; k < 5; ++k) files[kFileKeys[k]] = e.files[std::size_t(k)];
    j["pairs"].push_back({{"seed", e.seed}, {"files", files}});
  }

  const std::filesystem::path mpath = dir / "manifest.json";
  std::ofstream out(mpath);
  if (!out) throw io_error(io_error::kind::open_failed, "cannot write " + mpath.string());
  out << j.dump(2) << "\n";
  if (!out) throw io_error(io_error::kind::open_failed, "write failed: " + mpath.string());
  return ds;
}

Dataset open_dataset(const std::filesystem::path& path) {
  const std::filesystem::path mpath = manifest_path(path);
  std::ifstream in(mpath);
  if (!in) throw io_error(io_error::kind::open_failed, "cannot open " + mpath.string());
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw io_error(io_error::kind::malformed_header, mpath.string() + ": " + e.what());
  }

  Dataset ds;
  ds.root = mpath.parent_path();
  try {
    ds.seed = j.at("seed").get<std::uint64_t>();
    const json& c = j.at("config");
    ds.config.dims = c.at("dims").get<std::array<int, 3>>();
    ds.config.class_count = c.at("class_count").get<int>();
    ds.config.deform_magnitude = c.at("deform_magnitude").get<double>();
    ds.config.deform_smoothness = c.at("deform_smoothness").get<double>();
    ds.config.intensity_jitter = c.at("intensity_jitter").get<double>();
    for (const json& p : j.at("pairs")) {
      PairEntry e;
      e.seed = p.at("seed").get<std::uint64_t>();
      const json& files = p.at("files");
      if (files.size() != 5)
        throw io_error(io_error::kind::bad_header_value, "pair must list exactly 5 files");
      for (int k = 0; k < 5; ++k) e.files[std::size_t(k)] = files.at(kFileKeys[k]).get<std::string>();
      ds.pairs.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw io_error(io_error::kind::malformed_header, mpath.string() + ": " + e.what());
  }
  return ds;
}

namespace {

const PairEntry& entry_at(const Dataset& ds, int index) {
  if (index < 0 || std::size_t(index) >= ds.pairs.size())
    throw data_error("pair index " + std::to_string(index) + " outside dataset of " +
                     std::to_string(ds.pairs.size()));
  return ds.pairs[std::size_t(index)];
}

}  // namespace

RegPair load_pair(const Dataset& ds, int index) {
  const PairEntry& e = entry_at(ds, index);
  RegPair p;
  p.source = load_volume(ds.root / e.files[0]);
  p.target = load_volume(ds.root / e.files[1]);
  p.source_labels = load_labels(ds.root / e.files[2]);
  p.target_labels = load_labels(ds.root / e.files[3]);
  return p;
}

VectorField load_true_field(const Dataset& ds, int index) {
  const PairEntry& e = entry_at(ds, index);
  return load_field(ds.root / e.files[4]);
}

}  // namespace svfreg
