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

#pragma once

#include <cstddef>
#include <vector>

#include "sdmt/common.hpp"

namespace sdmt {

/// Dense row-major double tensor of rank <= 4. All network math runs in
/// double precision so analytic gradients can be checked against central
/// finite differences directly.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> dims, double fill = 0.0);

  static Tensor scalar(double v);
  static Tensor from(std::vector<int> dims, std::vector<double> data);

  bool empty() const { return v_.empty(); }
  int rank() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_[static_cast<size_t>(i)]; }
  const std::vector<int>& dims() const { return dims_; }
  size_t size() const { return v_.size(); }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  double& operator[](size_t i) { return v_[i]; }
  double operator[](size_t i) const { return v_[i]; }

  double& at(int i) { return v_[static_cast<size_t>(i)]; }
  double at(int i) const { return v_[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return v_[static_cast<size_t>(i) * dims_[1] + j]; }
  double at(int i, int j) const {
    return v_[static_cast<size_t>(i) * dims_[1] + j];
  }
  double& at(int i, int j, int k) {
    return v_[(static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k];
  }
  double at(int i, int j, int k) const {
    return v_[(static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k];
  }
  double& at(int i, int j, int k, int l) {
    return v_[((static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k) *
                  dims_[3] +
              l];
  }
  double at(int i, int j, int k, int l) const {
    return v_[((static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k) *
                  dims_[3] +
              l];
  }

  void fill(double v);
  bool same_dims(const Tensor& o) const { return dims_ == o.dims_; }
  bool all_finite() const;

  /// Value of a size-1 tensor.
  double item() const;

 private:
  std::vector<int> dims_;
  std::vector<double> v_;
};

}  // namespace sdmt
