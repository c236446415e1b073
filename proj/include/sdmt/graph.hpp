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

#include <functional>
#include <vector>

#include "sdmt/tensor.hpp"

namespace sdmt::ad {

/// Handle to a node in a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Eager reverse-mode tape. Each op computes its value immediately and
/// records a closure that routes output gradients to its inputs. A Graph is
/// built per forward pass and discarded after backward(); leaves accumulate
/// their gradients into caller-owned sink tensors.
///
/// Feature maps are [C,H,W], vectors [N], point lists [N,2]. Motion fields
/// on the graph side are [2,H,W] with plane 0 = normalized x (column) and
/// plane 1 = normalized y (row); pixel index i maps to (2i+1)/N - 1.
class Graph {
 public:
  Var constant(Tensor v);
  Var leaf(const Tensor& v, Tensor* grad_sink);

  const Tensor& val(Var x) const { return nodes_[x.id].value; }
  bool needs_grad(Var x) const { return nodes_[x.id].needs; }

  // elementwise
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var relu(Var a);
  Var leaky_relu(Var a, double slope);
  Var sigmoid(Var a);
  Var abs(Var a);
  Var square(Var a);
  Var sqrt(Var a);

  // vector / matrix
  Var linear(Var x, Var w, Var b);  // y[m] = W[m,n] x[n] (+ b[m]); b may be invalid
  Var concat_vec(Var a, Var b);
  Var stack_rows(const std::vector<Var>& rows);  // k tensors [n] -> [k,n]

  // conv and feature-map shape ops
  Var conv2d(Var x, Var w, Var b, int stride, int pad);
  Var upsample_nearest2(Var x);
  Var concat_ch(Var a, Var b);
  Var channel(Var x, int c);                     // [C,H,W] -> [H,W]
  Var crop(Var x, int y0, int x0, int h, int w); // [C,H,W] -> [C,h,w]
  Var paste(Var base, Var patch, int y0, int x0);
  Var add_channel(Var x, Var b);   // + b[c] broadcast over H,W
  Var mul_channel(Var x, Var s);   // * s[c] broadcast over H,W
  Var mul_mask(Var x, Var m);      // [C,H,W] * [1,H,W]
  Var instance_norm(Var x, double eps);

  // warping
  Var grid_sample(Var img, Var field);           // border clamp, bilinear
  Var sample_points(Var field, Var pts);         // field [K,H,W], pts [N,2] px -> [N,K]

  // reductions and geometry
  Var mean_all(Var x);
  Var sum_all(Var x);
  Var mean_hw(Var x);            // [C,H,W] -> [C]
  Var dsnt(Var hm);              // [H,W] -> [2] normalized (x,y)
  Var mean_point_dist(Var a, Var b);  // [N,2],[N,2] -> scalar mean Euclidean

  void backward(Var scalar_loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;               // allocated on demand during backward
    bool needs = false;
    Tensor* sink = nullptr;
    std::function<void(Graph&, int)> back;
  };

  int push(Tensor value, bool needs, std::function<void(Graph&, int)> back);
  Tensor& grad_buf(int id);
  bool has_grad(int id) const { return !nodes_[id].grad.empty(); }

  std::vector<Node> nodes_;
};

/// y = scale[c] * instance_norm(x)[c] + bias[c]; the AdaIN core used by the
/// motion network conditioning sites.
Var adain_apply(Graph& g, Var feat, Var scale, Var bias, double eps);

Tensor identity_field_chw(int h, int w);

}  // namespace sdmt::ad
