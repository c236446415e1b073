// Copyright (c) 2026 The sdmt Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "sdmt/tensor.hpp"

#include <cmath>
#include <numeric>

namespace sdmt {

Tensor::Tensor(std::vector<int> dims, double fill) : dims_(std::move(dims)) {
  size_t n = 1;
  for (int d : dims_) {
    if (d <= 0) throw DimensionError("tensor dimension must be positive");
    n *= static_cast<size_t>(d);
  }
  v_.assign(n, fill);
}

Tensor Tensor::scalar(double v) {
  Tensor t(std::vector<int>{1});
  t.v_[0] = v;
  return t;
}

Tensor Tensor::from(std::vector<int> dims, std::vector<double> data) {
  Tensor t(std::move(dims));
  if (t.v_.size() != data.size())
    throw DimensionError("tensor data size does not match dims");
  t.v_ = std::move(data);
  return t;
}

void Tensor::fill(double v) { std::fill(v_.begin(), v_.end(), v); }

bool Tensor::all_finite() const {
  for (double x : v_)
    if (!std::isfinite(x)) return false;
  return true;
}

double Tensor::item() const {
  if (v_.size() != 1) throw DimensionError("item() on non-scalar tensor");
  return v_[0];
}

}  // namespace sdmt
