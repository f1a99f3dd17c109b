#pragma once
#include <stdexcept>
#include <string>

namespace svfreg {

// Error taxonomy maps onto the CLI exit-code contract:
//   2 = I/O failure, 3 = empty dataset, 4 = numerical failure, 5 = shape mismatch.

struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  long iteration = -1;
  explicit numeric_error(const std::string& msg, long iter = -1)
      : std::runtime_error(msg), iteration(iter) {}
};

struct io_error : std::runtime_error {
  enum class kind {
    open_failed,
    malformed_header,
    bad_header_value,
    length_mismatch,
    unknown_dtype,
  };
  kind code;
  io_error(kind k, const std::string& msg) : std::runtime_error(msg), code(k) {}
};

}  // namespace svfreg
