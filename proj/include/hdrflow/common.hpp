// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hdrflow {

/// Raised when an operation produces NaN/Inf from finite inputs, or when a
/// numeric contract (e.g. finite loss) is violated.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on malformed or truncated files and unsupported formats.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents, outermost first. Image tensors are C,H,W; batched
/// tensors are N,C,H,W. Row-major storage throughout.
using Dims = std::vector<int>;

inline long long numel_of(const Dims& dims) {
  long long n = 1;
  for (int d : dims) n *= d;
  return n;
}

std::string dims_to_string(const Dims& dims);

}  // namespace hdrflow
