#pragma once

#include <stdexcept>
#include <string>

namespace deed {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GraphError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Raised when a layer is fed hidden states that do not start where its
// key-value cache ends. Unreachable from the decode strategies.
struct CacheContiguityError : std::logic_error {
  using std::logic_error::logic_error;
};

// Checkpoint / artifact level problems (bad magic, truncated blobs, config
// mismatch).
struct ArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace deed
