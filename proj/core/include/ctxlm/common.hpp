#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctxlm {

// Extents of a row-major array. Ops treat the last extent as the feature
// axis and the product of the leading extents as rows unless stated
// otherwise.
using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s);

// ---- error taxonomy -------------------------------------------------------
// Dimension/shape violations carry both offending shapes in the message.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Precondition violations (bad argument values, misuse of an API).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite input is required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A verification identity failed beyond its tolerance.
struct VerificationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File I/O and serialization faults.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user configuration (CLI maps these to exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Worker-thread cap, read once from CTXLM_THREADS (default 1; 1 keeps every
// reduction on a single deterministic path).
int worker_threads();

}  // namespace ctxlm
