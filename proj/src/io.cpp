#include "svfreg/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little, "payloads are little-endian");

namespace svfreg {

using nlohmann::json;

namespace {

std::filesystem::path raw_path(const std::filesystem::path& header) {
  std::filesystem::path p = header;
  p.replace_extension(".raw");
  return p;
}

json read_header(const std::filesystem::path& header) {
  std::ifstream in(header);
  if (!in) throw io_error(io_error::kind::open_failed, "cannot open " + header.string());
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw io_error(io_error::kind::malformed_header, header.string() + ": " + e.what());
  }
  if (!j.is_object()) throw io_error(io_error::kind::malformed_header, "header is not an object");
  return j;
}

void write_header(const std::filesystem::path& header, const json& j) {
  std::filesystem::create_directories(header.parent_path().empty() ? "." : header.parent_path());
  std::ofstream out(header);
  if (!out) throw io_error(io_error::kind::open_failed, "cannot write " + header.string());
  out << j.dump(2) << "\n";
  if (!out) throw io_error(io_error::kind::open_failed, "write failed: " + header.string());
}

void write_bytes(const std::filesystem::path& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error(io_error::kind::open_failed, "cannot write " + path.string());
  out.write(static_cast<const char*>(data), std::streamsize(n));
  if (!out) throw io_error(io_error::kind::open_failed, "write failed: " + path.string());
}

std::vector<char> read_bytes(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw io_error(io_error::kind::open_failed, "cannot open " + path.string());
  const auto size = std::size_t(in.tellg());
  if (size != expected)
    throw io_error(io_error::kind::length_mismatch,
                   path.string() + ": payload holds " + std::to_string(size) + " bytes, expected " +
                       std::to_string(expected));
  std::vector<char> buf(size);
  in.seekg(0);
  in.read(buf.data(), std::streamsize(size));
  if (!in) throw io_error(io_error::kind::open_failed, "read failed: " + path.string());
  return buf;
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  if (dtype == "u16") return 2;
  throw io_error(io_error::kind::unknown_dtype, "unknown dtype: " + dtype);
}

void pack_reals(const std::vector<double>& vals, const std::string& dtype, std::vector<char>& out) {
  if (dtype == "f64") {
    out.resize(vals.size() * 8);
    std::memcpy(out.data(), vals.data(), out.size());
  } else if (dtype == "f32") {
    out.resize(vals.size() * 4);
    float* p = reinterpret_cast<float*>(out.data());
    for (std::size_t i = 0; i < vals.size(); ++i) p[i] = float(vals[i]);
  } else {
    throw io_error(io_error::kind::unknown_dtype, "real payload cannot use dtype " + dtype);
  }
}

void unpack_reals(const std::vector<char>& bytes, const std::string& dtype,
                  std::vector<double>& out) {
  if (dtype == "f64") {
    out.resize(bytes.size() / 8);
    std::memcpy(out.data(), bytes.data(), bytes.size());
  } else if (dtype == "f32") {
    out.resize(bytes.size() / 4);
    const float* p = reinterpret_cast<const float*>(bytes.data());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = double(p[i]);
  } else {
    throw io_error(io_error::kind::unknown_dtype, "real payload cannot use dtype " + dtype);
  }
}

json base_header(const GridMeta& meta, const std::string& dtype, const std::string& kind) {
  json j;
  j["dims"] = meta.dims;
  j["spacing"] = meta.spacing;
  j["dtype"] = dtype;
  j["kind"] = kind;
  j["endianness"] = "little";
  return j;
}

struct ParsedHeader {
  GridMeta meta;
  std::string dtype, kind;
};

ParsedHeader parse_grid_header(const json& j, const std::string& expected_kind) {
  for (const char* key : {"dims", "spacing", "dtype", "kind", "endianness"})
    if (!j.contains(key))
      throw io_error(io_error::kind::malformed_header, std::string("missing header key: ") + key);
  ParsedHeader h;
  try {
    h.meta.dims = j.at("dims").get<std::array<int, 3>>();
    h.meta.spacing = j.at("spacing").get<std::array<double, 3>>();
    h.dtype = j.at("dtype").get<std::string>();
    h.kind = j.at("kind").get<std::string>();
  } catch (const json::exception& e) {
    throw io_error(io_error::kind::malformed_header, e.what());
  }
  if (j.at("endianness").get<std::string>() != "little")
    throw io_error(io_error::kind::bad_header_value, "payload must be little-endian");
  if (h.kind != expected_kind)
    throw io_error(io_error::kind::bad_header_value,
                   "expected kind " + expected_kind + ", found " + h.kind);
  try {
    h.meta.validate();
  } catch (const shape_error& e) {
    throw io_error(io_error::kind::bad_header_value, e.what());
  }
  dtype_size(h.dtype);
  return h;
}

}  // namespace

void save_volume(const std::filesystem::path& header, const Volume& vol, const std::string& dtype) {
  vol.meta.validate();
  if (vol.values.size() != vol.meta.voxel_count())
    throw shape_error("save_volume: value count mismatch");
  for (double v : vol.values)
    if (!std::isfinite(v)) throw numeric_error("save_volume: non-finite value");
  write_header(header, base_header(vol.meta, dtype, "scalar"));
  std::vector<char> bytes;
  pack_reals(vol.values, dtype, bytes);
  write_bytes(raw_path(header), bytes.data(), bytes.size());
}

Volume load_volume(const std::filesystem::path& header) {
  const auto h = parse_grid_header(read_header(header), "scalar");
  const auto bytes = read_bytes(raw_path(header), h.meta.voxel_count() * dtype_size(h.dtype));
  Volume vol;
  vol.meta = h.meta;
  unpack_reals(bytes, h.dtype, vol.values);
  for (double v : vol.values)
    if (!std::isfinite(v)) throw numeric_error("load_volume: non-finite value");
  return vol;
}

void save_labels(const std::filesystem::path& header, const LabelMap& lab) {
  lab.meta.validate();
  if (lab.labels.size() != lab.meta.voxel_count())
    throw shape_error("save_labels: label count mismatch");
  if (lab.class_count < 1) throw shape_error("save_labels: class_count must be >= 1");
  for (auto l : lab.labels)
    if (int(l) >= lab.class_count) throw shape_error("save_labels: label exceeds class_count");
  json j = base_header(lab.meta, "u16", "labels");
  j["class_count"] = lab.class_count;
  write_header(header, j);
  write_bytes(raw_path(header), lab.labels.data(), lab.labels.size() * 2);
}

LabelMap load_labels(const std::filesystem::path& header) {
  const json j = read_header(header);
  const auto h = parse_grid_header(j, "labels");
  if (h.dtype != "u16") throw io_error(io_error::kind::bad_header_value, "labels must be u16");
  const auto bytes = read_bytes(raw_path(header), h.meta.voxel_count() * 2);
  LabelMap lab;
  lab.meta = h.meta;
  lab.labels.resize(h.meta.voxel_count());
  std::memcpy(lab.labels.data(), bytes.data(), bytes.size());
  int max_label = 0;
  for (auto l : lab.labels) max_label = std::max(max_label, int(l));
  lab.class_count = j.contains("class_count") ? j.at("class_count").get<int>() : max_label + 1;
  if (max_label >= lab.class_count)
    throw io_error(io_error::kind::bad_header_value, "label exceeds class_count");
  return lab;
}

void save_field(const std::filesystem::path& header, const VectorField& f, const std::string& dtype) {
  f.meta.validate();
  for (const auto& c : f.comp) {
    if (c.size() != f.meta.voxel_count()) throw shape_error("save_field: component size mismatch");
    for (double v : c)
      if (!std::isfinite(v)) throw numeric_error("save_field: non-finite value");
  }
  write_header(header, base_header(f.meta, dtype, "vector3"));
  const std::size_t es = dtype_size(dtype);
  std::vector<char> bytes(f.meta.voxel_count() * 3 * es);
  std::vector<char> plane;
  for (int a = 0; a < 3; ++a) {
    pack_reals(f.comp[std::size_t(a)], dtype, plane);
    std::memcpy(bytes.data() + std::size_t(a) * plane.size(), plane.data(), plane.size());
  }
  write_bytes(raw_path(header), bytes.data(), bytes.size());
}

VectorField load_field(const std::filesystem::path& header) {
  const auto h = parse_grid_header(read_header(header), "vector3");
  const std::size_t es = dtype_size(h.dtype);
  const auto bytes = read_bytes(raw_path(header), h.meta.voxel_count() * 3 * es);
  VectorField f;
  f.meta = h.meta;
  const std::size_t plane_bytes = h.meta.voxel_count() * es;
  for (int a = 0; a < 3; ++a) {
    std::vector<char> plane(bytes.begin() + std::ptrdiff_t(std::size_t(a) * plane_bytes),
                            bytes.begin() + std::ptrdiff_t(std::size_t(a + 1) * plane_bytes));
    unpack_reals(plane, h.dtype, f.comp[std::size_t(a)]);
    for (double v : f.comp[std::size_t(a)])
      if (!std::isfinite(v)) throw numeric_error("load_field: non-finite value");
  }
  return f;
}

void save_checkpoint(const std::filesystem::path& header, const CheckpointData& ckpt) {
  const std::string dtype = ckpt.precision == "single" ? "f32" : "f64";
  json j;
  j["kind"] = "checkpoint";
  j["endianness"] = "little";
  j["dtype"] = dtype;
  j["stages"] = ckpt.stages;
  j["channels"] = ckpt.channels;
  j["hidden"] = ckpt.hidden;
  j["ss_steps"] = ckpt.ss_steps;
  j["precision"] = ckpt.precision;
  j["iteration"] = ckpt.iteration;
  j["seed"] = ckpt.seed;
  j["lambda_sta"] = ckpt.hyper.lambda_sta;
  j["lambda_mat"] = ckpt.hyper.lambda_mat;
  j["lambda_reg"] = ckpt.hyper.lambda_reg;
  j["lambda_jac"] = ckpt.hyper.lambda_jac;
  json tensors = json::array();
  std::size_t offset = 0;
  std::vector<double> all;
  for (const auto& t : ckpt.tensors) {
    json tj;
    tj["name"] = t.name;
    tj["shape"] = t.shape;
    tj["offset"] = offset;
    tj["count"] = t.values.size();
    tensors.push_back(tj);
    all.insert(all.end(), t.values.begin(), t.values.end());
    offset += t.values.size();
  }
  j["tensors"] = tensors;
  write_header(header, j);
  std::vector<char> bytes;
  pack_reals(all, dtype, bytes);
  write_bytes(raw_path(header), bytes.data(), bytes.size());
}

CheckpointData load_checkpoint(const std::filesystem::path& header) {
  const json j = read_header(header);
  try {
    if (j.at("kind").get<std::string>() != "checkpoint")
      throw io_error(io_error::kind::bad_header_value, "not a checkpoint header");
    if (j.at("endianness").get<std::string>() != "little")
      throw io_error(io_error::kind::bad_header_value, "payload must be little-endian");
    CheckpointData ckpt;
    ckpt.stages = j.at("stages").get<int>();
    ckpt.channels = j.at("channels").get<std::vector<int>>();
    ckpt.hidden = j.at("hidden").get<int>();
    ckpt.ss_steps = j.at("ss_steps").get<int>();
    ckpt.precision = j.at("precision").get<std::string>();
    ckpt.iteration = j.at("iteration").get<long>();
    ckpt.seed = j.at("seed").get<std::uint64_t>();
    ckpt.hyper.lambda_sta = j.at("lambda_sta").get<std::vector<double>>();
    ckpt.hyper.lambda_mat = j.at("lambda_mat").get<double>();
    ckpt.hyper.lambda_reg = j.at("lambda_reg").get<double>();
    ckpt.hyper.lambda_jac = j.at("lambda_jac").get<double>();
    const std::string dtype = j.at("dtype").get<std::string>();
    std::size_t total = 0;
    for (const auto& tj : j.at("tensors")) total += tj.at("count").get<std::size_t>();
    const auto bytes = read_bytes(raw_path(header), total * dtype_size(dtype));
    std::vector<double> all;
    unpack_reals(bytes, dtype, all);
    for (const auto& tj : j.at("tensors")) {
      NamedTensor t;
      t.name = tj.at("name").get<std::string>();
      t.shape = tj.at("shape").get<std::vector<int>>();
      const auto offset = tj.at("offset").get<std::size_t>();
      const auto count = tj.at("count").get<std::size_t>();
      if (offset + count > all.size())
        throw io_error(io_error::kind::length_mismatch, "tensor extends past payload");
      t.values.assign(all.begin() + std::ptrdiff_t(offset),
                      all.begin() + std::ptrdiff_t(offset + count));
      ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
  } catch (const json::exception& e) {
    throw io_error(io_error::kind::malformed_header, e.what());
  }
}

void write_checkerboard_pgm(const std::filesystem::path& path, const Volume& a, const Volume& b) {
  if (a.meta != b.meta) throw shape_error("checkerboard: meta mismatch");
  const auto& d = a.meta.dims;
  const int z = d[2] / 2;
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path);
  if (!out) throw io_error(io_error::kind::open_failed, "cannot write " + path.string());
  out << "P2\n" << d[0] << " " << d[1] << "\n255\n";
  for (int y = 0; y < d[1]; ++y) {
    for (int x = 0; x < d[0]; ++x) {
      const bool pick_a = ((x / 4) + (y / 4)) % 2 == 0;
      const double v = pick_a ? a.at(x, y, z) : b.at(x, y, z);
      const int g = std::clamp(int(std::lround(v * 255.0)), 0, 255);
      out << g << (x + 1 == d[0] ? "" : " ");
    }
    out << "\n";
  }
  if (!out) throw io_error(io_error::kind::open_failed, "write failed: " + path.string());
}

}  // namespace svfreg
