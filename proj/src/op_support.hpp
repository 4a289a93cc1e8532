// SPDX-License-Identifier: Apache-2.0
//
// Internal helpers shared by operation implementations. Not installed.

#pragma once

#include <cmath>
#include <initializer_list>
#include <memory>

#include "hdrflow/tensor.hpp"

namespace hdrflow::detail {

template <typename T>
Tape<T>* tape_of(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : inputs) {
    Tape<T>* tt = t->tape();
    if (tt == nullptr) continue;
    if (tape == nullptr) {
      tape = tt;
    } else if (tape != tt) {
      throw std::invalid_argument("operation mixes tensors from two tapes");
    }
  }
  return tape;
}

template <typename T>
void ensure_finite(const char* op, const Tensor<T>& t) {
  for (T v : t.values()) {
    if (!std::isfinite(v))
      throw NumericFault(std::string(op) + ": non-finite value in output");
  }
}

template <typename T>
void check_same_dims(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_dims(b))
    throw std::invalid_argument(std::string(op) + ": dims mismatch " +
                                dims_to_string(a.dims()) + " vs " +
                                dims_to_string(b.dims()));
}

template <typename T>
void accumulate(const std::shared_ptr<TensorNode<T>>& dst, const T* src) {
  dst->ensure_grad();
  T* g = dst->grad.data();
  const size_t n = dst->values.size();
  for (size_t i = 0; i < n; ++i) g[i] += src[i];
}

}  // namespace hdrflow::detail
