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

#include "sdmt/graph.hpp"

#include <Eigen/Core>

#include <cmath>
#include <utility>

namespace sdmt::ad {

namespace {

using MatMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                   Eigen::Dynamic,
                                                   Eigen::RowMajor>>;

void check_same_dims(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_dims(b))
    throw DimensionError(std::string(op) + ": operand shapes differ");
}

// x [C,H,W] -> col [C*kh*kw, ho*wo]
void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int ho,
            int wo, std::vector<double>& col) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  col.assign(static_cast<size_t>(c) * kh * kw * ho * wo, 0.0);
  const size_t ncols = static_cast<size_t>(ho) * wo;
  for (int ch = 0; ch < c; ++ch) {
    for (int di = 0; di < kh; ++di) {
      for (int dj = 0; dj < kw; ++dj) {
        const size_t row = (static_cast<size_t>(ch) * kh + di) * kw + dj;
        double* out = col.data() + row * ncols;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + di;
          if (iy < 0 || iy >= h) {
            out += wo;
            continue;
          }
          const double* src = x.data() + (static_cast<size_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox, ++out) {
            const int ix = ox * stride - pad + dj;
            if (ix >= 0 && ix < w) *out = src[ix];
          }
        }
      }
    }
  }
}

// scatter-add of col [C*kh*kw, ho*wo] back into gx [C,H,W]
void col2im_add(const std::vector<double>& col, int kh, int kw, int stride,
                int pad, int ho, int wo, Tensor& gx) {
  const int c = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
  const size_t ncols = static_cast<size_t>(ho) * wo;
  for (int ch = 0; ch < c; ++ch) {
    for (int di = 0; di < kh; ++di) {
      for (int dj = 0; dj < kw; ++dj) {
        const size_t row = (static_cast<size_t>(ch) * kh + di) * kw + dj;
        const double* src = col.data() + row * ncols;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + di;
          if (iy < 0 || iy >= h) {
            src += wo;
            continue;
          }
          double* dst = gx.data() + (static_cast<size_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox, ++src) {
            const int ix = ox * stride - pad + dj;
            if (ix >= 0 && ix < w) dst[ix] += *src;
          }
        }
      }
    }
  }
}

}  // namespace

int Graph::push(Tensor value, bool needs,
                std::function<void(Graph&, int)> back) {
  Node n;
  n.value = std::move(value);
  n.needs = needs;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Graph::grad_buf(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.dims());
  return n.grad;
}

Var Graph::constant(Tensor v) { return {push(std::move(v), false, nullptr)}; }

Var Graph::leaf(const Tensor& v, Tensor* grad_sink) {
  int id = push(v, grad_sink != nullptr, nullptr);
  nodes_[id].sink = grad_sink;
  return {id};
}

void Graph::backward(Var loss) {
  if (val(loss).size() != 1)
    throw DimensionError("backward: loss must be a scalar");
  if (!nodes_[loss.id].needs) return;
  grad_buf(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs || n.grad.empty()) continue;
    if (n.back) n.back(*this, id);
    if (n.sink) {
      if (!n.sink->same_dims(n.value))
        throw DimensionError("backward: grad sink shape mismatch");
      for (size_t i = 0; i < n.grad.size(); ++i) (*n.sink)[i] += n.grad[i];
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise

Var Graph::add(Var a, Var b) {
  check_same_dims(val(a), val(b), "add");
  Tensor out = val(a);
  const Tensor& vb = val(b);
  for (size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
  bool needs = needs_grad(a) || needs_grad(b);
  int ia = a.id, ib = b.id;
  return {push(std::move(out), needs, [ia, ib](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            if (g.nodes_[ia].needs) {
              Tensor& ga = g.grad_buf(ia);
              for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (g.nodes_[ib].needs) {
              Tensor& gb = g.grad_buf(ib);
              for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
          })};
}

Var Graph::sub(Var a, Var b) {
  check_same_dims(val(a), val(b), "sub");
  Tensor out = val(a);
  const Tensor& vb = val(b);
  for (size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
  bool needs = needs_grad(a) || needs_grad(b);
  int ia = a.id, ib = b.id;
  return {push(std::move(out), needs, [ia, ib](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            if (g.nodes_[ia].needs) {
              Tensor& ga = g.grad_buf(ia);
              for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (g.nodes_[ib].needs) {
              Tensor& gb = g.grad_buf(ib);
              for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
            }
          })};
}

Var Graph::mul(Var a, Var b) {
  check_same_dims(val(a), val(b), "mul");
  Tensor out = val(a);
  const Tensor& vb = val(b);
  for (size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
  bool needs = needs_grad(a) || needs_grad(b);
  int ia = a.id, ib = b.id;
  return {push(std::move(out), needs, [ia, ib](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            const Tensor& va = g.nodes_[ia].value;
            const Tensor& vb2 = g.nodes_[ib].value;
            if (g.nodes_[ia].needs) {
              Tensor& ga = g.grad_buf(ia);
              for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * vb2[i];
            }
            if (g.nodes_[ib].needs) {
              Tensor& gb = g.grad_buf(ib);
              for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * va[i];
            }
          })};
}

Var Graph::scale(Var a, double s) {
  Tensor out = val(a);
  for (size_t i = 0; i < out.size(); ++i) out[i] *= s;
  int ia = a.id;
  return {push(std::move(out), needs_grad(a), [ia, s](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            Tensor& ga = g.grad_buf(ia);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += s * go[i];
          })};
}

Var Graph::add_scalar(Var a, double s) {
  Tensor out = val(a);
  for (size_t i = 0; i < out.size(); ++i) out[i] += s;
  int ia = a.id;
  return {push(std::move(out), needs_grad(a), [ia](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            Tensor& ga = g.grad_buf(ia);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
          })};
}

Var Graph::relu(Var a) { return leaky_relu(a, 0.0); }

Var Graph::leaky_relu(Var a, double slope) {
  Tensor out = val(a);
  for (size_t i = 0; i < out.size(); ++i)
    if (out[i] < 0.0) out[i] *= slope;
  int ia = a.id;
  return {push(std::move(out), needs_grad(a), [ia, slope](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            const Tensor& va = g.nodes_[ia].value;
            Tensor& ga = g.grad_buf(ia);
            for (size_t i = 0; i < go.size(); ++i)
              ga[i] += go[i] * (va[i] > 0.0 ? 1.0 : slope);
          })};
}

Var Graph::sigmoid(Var a) {
  Tensor out = val(a);
  for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  int ia = a.id;
  return {push(std::move(out), needs_grad(a), [ia](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            const Tensor& vo = g.nodes_[id].value;
            Tensor& ga = g.grad_buf(ia);
            for (size_t i = 0; i < go.size(); ++i)
              ga[i] += go[i] * vo[i] * (1.0 - vo[i]);
          })};
}

Var Graph::abs(Var a) {
  Tensor out = val(a);
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(out[i]);
  int ia = a.id;
  return {push(std::move(out), needs_grad(a), [ia](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            const Tensor& va = g.nodes_[ia].value;
            Tensor& ga = g.grad_buf(ia);
            for (size_t i = 0; i < go.size(); ++i) {
              if (va[i] > 0.0)
                ga[i] += go[i];
              else if (va[i] < 0.0)
                ga[i] -= go[i];
            }
          })};
}

Var Graph::square(Var a) {
  Tensor out = val(a);
  for (size_t i = 0; i < out.size(); ++i) out[i] *= out[i];
  int ia = a.id;
  return {push(std::move(out), needs_grad(a), [ia](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            const Tensor& va = g.nodes_[ia].value;
            Tensor& ga = g.grad_buf(ia);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += 2.0 * va[i] * go[i];
          })};
}

Var Graph::sqrt(Var a) {
  Tensor out = val(a);
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(out[i]);
  int ia = a.id;
  return {push(std::move(out), needs_grad(a), [ia](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            const Tensor& vo = g.nodes_[id].value;
            Tensor& ga = g.grad_buf(ia);
            for (size_t i = 0; i < go.size(); ++i)
              if (vo[i] > 0.0) ga[i] += go[i] * 0.5 / vo[i];
          })};
}

// ---------------------------------------------------------------------------
// vector / matrix

Var Graph::linear(Var x, Var w, Var b) {
  const Tensor& vx = val(x);
  const Tensor& vw = val(w);
  if (vx.rank() != 1 || vw.rank() != 2 || vw.dim(1) != vx.dim(0))
    throw DimensionError("linear: shape mismatch");
  const int m = vw.dim(0), n = vw.dim(1);
  Tensor out(std::vector<int>{m});
  {
    ConstMatMap W(vw.data(), m, n);
    Eigen::Map<const Eigen::VectorXd> X(vx.data(), n);
    Eigen::Map<Eigen::VectorXd> Y(out.data(), m);
    Y = W * X;
  }
  bool needs = needs_grad(x) || needs_grad(w);
  if (b.valid()) {
    const Tensor& vb = val(b);
    if (vb.rank() != 1 || vb.dim(0) != m)
      throw DimensionError("linear: bias shape mismatch");
    for (int i = 0; i < m; ++i) out[static_cast<size_t>(i)] += vb[static_cast<size_t>(i)];
    needs = needs || needs_grad(b);
  }
  int ix = x.id, iw = w.id, ib = b.valid() ? b.id : -1;
  return {push(std::move(out), needs, [ix, iw, ib, m, n](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            Eigen::Map<const Eigen::VectorXd> Gy(go.data(), m);
            if (g.nodes_[ix].needs) {
              ConstMatMap W(g.nodes_[iw].value.data(), m, n);
              Eigen::Map<Eigen::VectorXd> Gx(g.grad_buf(ix).data(), n);
              Gx += W.transpose() * Gy;
            }
            if (g.nodes_[iw].needs) {
              Eigen::Map<const Eigen::VectorXd> X(g.nodes_[ix].value.data(), n);
              MatMap Gw(g.grad_buf(iw).data(), m, n);
              Gw += Gy * X.transpose();
            }
            if (ib >= 0 && g.nodes_[ib].needs) {
              Eigen::Map<Eigen::VectorXd> Gb(g.grad_buf(ib).data(), m);
              Gb += Gy;
            }
          })};
}

Var Graph::concat_vec(Var a, Var b) {
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  if (va.rank() != 1 || vb.rank() != 1)
    throw DimensionError("concat_vec: rank-1 operands required");
  const int n = va.dim(0), m = vb.dim(0);
  Tensor out(std::vector<int>{n + m});
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = va[static_cast<size_t>(i)];
  for (int i = 0; i < m; ++i) out[static_cast<size_t>(n + i)] = vb[static_cast<size_t>(i)];
  bool needs = needs_grad(a) || needs_grad(b);
  int ia = a.id, ib = b.id;
  return {push(std::move(out), needs, [ia, ib, n, m](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            if (g.nodes_[ia].needs) {
              Tensor& ga = g.grad_buf(ia);
              for (int i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)];
            }
            if (g.nodes_[ib].needs) {
              Tensor& gb = g.grad_buf(ib);
              for (int i = 0; i < m; ++i) gb[static_cast<size_t>(i)] += go[static_cast<size_t>(n + i)];
            }
          })};
}

Var Graph::stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: empty input");
  const int n = val(rows[0]).dim(0);
  const int k = static_cast<int>(rows.size());
  Tensor out(std::vector<int>{k, n});
  bool needs = false;
  std::vector<int> ids(rows.size());
  for (int r = 0; r < k; ++r) {
    const Tensor& v = val(rows[static_cast<size_t>(r)]);
    if (v.rank() != 1 || v.dim(0) != n)
      throw DimensionError("stack_rows: row shape mismatch");
    for (int i = 0; i < n; ++i) out.at(r, i) = v[static_cast<size_t>(i)];
    needs = needs || needs_grad(rows[static_cast<size_t>(r)]);
    ids[static_cast<size_t>(r)] = rows[static_cast<size_t>(r)].id;
  }
  return {push(std::move(out), needs, [ids, n](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            for (int r = 0; r < static_cast<int>(ids.size()); ++r) {
              int p = ids[static_cast<size_t>(r)];
              if (!g.nodes_[p].needs) continue;
              Tensor& gp = g.grad_buf(p);
              for (int i = 0; i < n; ++i) gp[static_cast<size_t>(i)] += go.at(r, i);
            }
          })};
}

// ---------------------------------------------------------------------------
// conv and feature-map shape ops

Var Graph::conv2d(Var x, Var w, Var b, int stride, int pad) {
  const Tensor& vx = val(x);
  const Tensor& vw = val(w);
  if (vx.rank() != 3 || vw.rank() != 4 || vw.dim(1) != vx.dim(0))
    throw DimensionError("conv2d: shape mismatch");
  const int c = vx.dim(0), h = vx.dim(1), wdt = vx.dim(2);
  const int k = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wdt + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw DimensionError("conv2d: empty output");

  std::vector<double> col;
  im2col(vx, kh, kw, stride, pad, ho, wo, col);
  const int krows = c * kh * kw;
  const size_t ncols = static_cast<size_t>(ho) * wo;

  Tensor out(std::vector<int>{k, ho, wo});
  {
    ConstMatMap W(vw.data(), k, krows);
    ConstMatMap Col(col.data(), krows, static_cast<Eigen::Index>(ncols));
    MatMap Y(out.data(), k, static_cast<Eigen::Index>(ncols));
    Y = W * Col;
  }
  bool needs = needs_grad(x) || needs_grad(w);
  if (b.valid()) {
    const Tensor& vb = val(b);
    if (vb.rank() != 1 || vb.dim(0) != k)
      throw DimensionError("conv2d: bias shape mismatch");
    for (int oc = 0; oc < k; ++oc) {
      double* p = out.data() + static_cast<size_t>(oc) * ncols;
      for (size_t i = 0; i < ncols; ++i) p[i] += vb[static_cast<size_t>(oc)];
    }
    needs = needs || needs_grad(b);
  }
  int ix = x.id, iw = w.id, ib = b.valid() ? b.id : -1;
  return {push(std::move(out), needs,
               [ix, iw, ib, stride, pad, k, kh, kw, krows, ho, wo](Graph& g,
                                                                  int id) {
                 const Tensor& go = g.nodes_[id].grad;
                 const size_t nc = static_cast<size_t>(ho) * wo;
                 ConstMatMap Gy(go.data(), k, static_cast<Eigen::Index>(nc));
                 if (ib >= 0 && g.nodes_[ib].needs) {
                   Tensor& gb = g.grad_buf(ib);
                   for (int oc = 0; oc < k; ++oc)
                     gb[static_cast<size_t>(oc)] += Gy.row(oc).sum();
                 }
                 // col recomputed from the stored input to keep tape memory
                 // proportional to activations
                 if (g.nodes_[iw].needs) {
                   std::vector<double> col;
                   im2col(g.nodes_[ix].value, kh, kw, stride, pad, ho, wo, col);
                   ConstMatMap Col(col.data(), krows,
                                   static_cast<Eigen::Index>(nc));
                   MatMap Gw(g.grad_buf(iw).data(), k, krows);
                   Gw += Gy * Col.transpose();
                 }
                 if (g.nodes_[ix].needs) {
                   std::vector<double> gcol(static_cast<size_t>(krows) * nc);
                   MatMap Gcol(gcol.data(), krows,
                               static_cast<Eigen::Index>(nc));
                   ConstMatMap W(g.nodes_[iw].value.data(), k, krows);
                   Gcol = W.transpose() * Gy;
                   col2im_add(gcol, kh, kw, stride, pad, ho, wo,
                              g.grad_buf(ix));
                 }
               })};
}

Var Graph::upsample_nearest2(Var x) {
  const Tensor& vx = val(x);
  if (vx.rank() != 3) throw DimensionError("upsample_nearest2: rank-3 input");
  const int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
  Tensor out(std::vector<int>{c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j)
        out.at(ch, i, j) = vx.at(ch, i / 2, j / 2);
  int ix = x.id;
  return {push(std::move(out), needs_grad(x), [ix, c, h, w](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            Tensor& gx = g.grad_buf(ix);
            for (int ch = 0; ch < c; ++ch)
              for (int i = 0; i < 2 * h; ++i)
                for (int j = 0; j < 2 * w; ++j)
                  gx.at(ch, i / 2, j / 2) += go.at(ch, i, j);
          })};
}

Var Graph::concat_ch(Var a, Var b) {
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  if (va.rank() != 3 || vb.rank() != 3 || va.dim(1) != vb.dim(1) ||
      va.dim(2) != vb.dim(2))
    throw DimensionError("concat_ch: spatial shapes differ");
  const int ca = va.dim(0), cb = vb.dim(0), h = va.dim(1), w = va.dim(2);
  Tensor out(std::vector<int>{ca + cb, h, w});
  const size_t plane = static_cast<size_t>(h) * w;
  std::copy(va.data(), va.data() + static_cast<size_t>(ca) * plane, out.data());
  std::copy(vb.data(), vb.data() + static_cast<size_t>(cb) * plane,
            out.data() + static_cast<size_t>(ca) * plane);
  bool needs = needs_grad(a) || needs_grad(b);
  int ia = a.id, ib = b.id;
  return {push(std::move(out), needs, [ia, ib, ca, cb, plane](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            if (g.nodes_[ia].needs) {
              Tensor& ga = g.grad_buf(ia);
              for (size_t i = 0; i < static_cast<size_t>(ca) * plane; ++i)
                ga[i] += go[i];
            }
            if (g.nodes_[ib].needs) {
              Tensor& gb = g.grad_buf(ib);
              const size_t off = static_cast<size_t>(ca) * plane;
              for (size_t i = 0; i < static_cast<size_t>(cb) * plane; ++i)
                gb[i] += go[off + i];
            }
          })};
}

Var Graph::channel(Var x, int c) {
  const Tensor& vx = val(x);
  if (vx.rank() != 3 || c < 0 || c >= vx.dim(0))
    throw DimensionError("channel: index out of range");
  const int h = vx.dim(1), w = vx.dim(2);
  Tensor out(std::vector<int>{h, w});
  const size_t plane = static_cast<size_t>(h) * w;
  std::copy(vx.data() + static_cast<size_t>(c) * plane,
            vx.data() + static_cast<size_t>(c + 1) * plane, out.data());
  int ix = x.id;
  return {push(std::move(out), needs_grad(x), [ix, c, plane](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            Tensor& gx = g.grad_buf(ix);
            double* dst = gx.data() + static_cast<size_t>(c) * plane;
            for (size_t i = 0; i < plane; ++i) dst[i] += go[i];
          })};
}

Var Graph::crop(Var x, int y0, int x0, int h, int w) {
  const Tensor& vx = val(x);
  if (vx.rank() != 3) throw DimensionError("crop: rank-3 input");
  const int c = vx.dim(0), hh = vx.dim(1), ww = vx.dim(2);
  if (y0 < 0 || x0 < 0 || y0 + h > hh || x0 + w > ww)
    throw RegionError("crop: region outside image");
  Tensor out(std::vector<int>{c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        out.at(ch, i, j) = vx.at(ch, y0 + i, x0 + j);
  int ix = x.id;
  return {push(std::move(out), needs_grad(x),
               [ix, y0, x0, c, h, w](Graph& g, int id) {
                 const Tensor& go = g.nodes_[id].grad;
                 Tensor& gx = g.grad_buf(ix);
                 for (int ch = 0; ch < c; ++ch)
                   for (int i = 0; i < h; ++i)
                     for (int j = 0; j < w; ++j)
                       gx.at(ch, y0 + i, x0 + j) += go.at(ch, i, j);
               })};
}

Var Graph::paste(Var base, Var patch, int y0, int x0) {
  const Tensor& vb = val(base);
  const Tensor& vp = val(patch);
  if (vb.rank() != 3 || vp.rank() != 3 || vb.dim(0) != vp.dim(0))
    throw DimensionError("paste: shape mismatch");
  const int c = vb.dim(0), h = vp.dim(1), w = vp.dim(2);
  if (y0 < 0 || x0 < 0 || y0 + h > vb.dim(1) || x0 + w > vb.dim(2))
    throw RegionError("paste: patch outside image");
  Tensor out = vb;
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        out.at(ch, y0 + i, x0 + j) = vp.at(ch, i, j);
  bool needs = needs_grad(base) || needs_grad(patch);
  int ib = base.id, ip = patch.id;
  return {push(std::move(out), needs,
               [ib, ip, y0, x0, c, h, w](Graph& g, int id) {
                 const Tensor& go = g.nodes_[id].grad;
                 if (g.nodes_[ib].needs) {
                   Tensor& gb = g.grad_buf(ib);
                   for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
                   // pixels covered by the patch were overwritten
                   for (int ch = 0; ch < c; ++ch)
                     for (int i = 0; i < h; ++i)
                       for (int j = 0; j < w; ++j)
                         gb.at(ch, y0 + i, x0 + j) -= go.at(ch, y0 + i, x0 + j);
                 }
                 if (g.nodes_[ip].needs) {
                   Tensor& gp = g.grad_buf(ip);
                   for (int ch = 0; ch < c; ++ch)
                     for (int i = 0; i < h; ++i)
                       for (int j = 0; j < w; ++j)
                         gp.at(ch, i, j) += go.at(ch, y0 + i, x0 + j);
                 }
               })};
}

Var Graph::add_channel(Var x, Var b) {
  const Tensor& vx = val(x);
  const Tensor& vb = val(b);
  if (vx.rank() != 3 || vb.rank() != 1 || vb.dim(0) != vx.dim(0))
    throw DimensionError("add_channel: shape mismatch");
  const int c = vx.dim(0);
  const size_t plane = static_cast<size_t>(vx.dim(1)) * vx.dim(2);
  Tensor out = vx;
  for (int ch = 0; ch < c; ++ch) {
    double* p = out.data() + static_cast<size_t>(ch) * plane;
    const double bias = vb[static_cast<size_t>(ch)];
    for (size_t i = 0; i < plane; ++i) p[i] += bias;
  }
  bool needs = needs_grad(x) || needs_grad(b);
  int ix = x.id, ib = b.id;
  return {push(std::move(out), needs, [ix, ib, c, plane](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            if (g.nodes_[ix].needs) {
              Tensor& gx = g.grad_buf(ix);
              for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
            }
            if (g.nodes_[ib].needs) {
              Tensor& gb = g.grad_buf(ib);
              for (int ch = 0; ch < c; ++ch) {
                const double* p = go.data() + static_cast<size_t>(ch) * plane;
                double s = 0.0;
                for (size_t i = 0; i < plane; ++i) s += p[i];
                gb[static_cast<size_t>(ch)] += s;
              }
            }
          })};
}

Var Graph::mul_channel(Var x, Var s) {
  const Tensor& vx = val(x);
  const Tensor& vs = val(s);
  if (vx.rank() != 3 || vs.rank() != 1 || vs.dim(0) != vx.dim(0))
    throw DimensionError("mul_channel: shape mismatch");
  const int c = vx.dim(0);
  const size_t plane = static_cast<size_t>(vx.dim(1)) * vx.dim(2);
  Tensor out = vx;
  for (int ch = 0; ch < c; ++ch) {
    double* p = out.data() + static_cast<size_t>(ch) * plane;
    const double k = vs[static_cast<size_t>(ch)];
    for (size_t i = 0; i < plane; ++i) p[i] *= k;
  }
  bool needs = needs_grad(x) || needs_grad(s);
  int ix = x.id, is = s.id;
  return {push(std::move(out), needs, [ix, is, c, plane](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            const Tensor& vx2 = g.nodes_[ix].value;
            const Tensor& vs2 = g.nodes_[is].value;
            if (g.nodes_[ix].needs) {
              Tensor& gx = g.grad_buf(ix);
              for (int ch = 0; ch < c; ++ch) {
                const double k = vs2[static_cast<size_t>(ch)];
                const size_t off = static_cast<size_t>(ch) * plane;
                for (size_t i = 0; i < plane; ++i)
                  gx[off + i] += go[off + i] * k;
              }
            }
            if (g.nodes_[is].needs) {
              Tensor& gs = g.grad_buf(is);
              for (int ch = 0; ch < c; ++ch) {
                const size_t off = static_cast<size_t>(ch) * plane;
                double acc = 0.0;
                for (size_t i = 0; i < plane; ++i)
                  acc += go[off + i] * vx2[off + i];
                gs[static_cast<size_t>(ch)] += acc;
              }
            }
          })};
}

Var Graph::mul_mask(Var x, Var m) {
  const Tensor& vx = val(x);
  const Tensor& vm = val(m);
  if (vx.rank() != 3 || vm.rank() != 3 || vm.dim(0) != 1 ||
      vm.dim(1) != vx.dim(1) || vm.dim(2) != vx.dim(2))
    throw DimensionError("mul_mask: shape mismatch");
  const int c = vx.dim(0);
  const size_t plane = static_cast<size_t>(vx.dim(1)) * vx.dim(2);
  Tensor out = vx;
  for (int ch = 0; ch < c; ++ch) {
    double* p = out.data() + static_cast<size_t>(ch) * plane;
    for (size_t i = 0; i < plane; ++i) p[i] *= vm[i];
  }
  bool needs = needs_grad(x) || needs_grad(m);
  int ix = x.id, im = m.id;
  return {push(std::move(out), needs, [ix, im, c, plane](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            const Tensor& vx2 = g.nodes_[ix].value;
            const Tensor& vm2 = g.nodes_[im].value;
            if (g.nodes_[ix].needs) {
              Tensor& gx = g.grad_buf(ix);
              for (int ch = 0; ch < c; ++ch) {
                const size_t off = static_cast<size_t>(ch) * plane;
                for (size_t i = 0; i < plane; ++i)
                  gx[off + i] += go[off + i] * vm2[i];
              }
            }
            if (g.nodes_[im].needs) {
              Tensor& gm = g.grad_buf(im);
              for (int ch = 0; ch < c; ++ch) {
                const size_t off = static_cast<size_t>(ch) * plane;
                for (size_t i = 0; i < plane; ++i)
                  gm[i] += go[off + i] * vx2[off + i];
              }
            }
          })};
}

Var Graph::instance_norm(Var x, double eps) {
  const Tensor& vx = val(x);
  if (vx.rank() != 3) throw DimensionError("instance_norm: rank-3 input");
  const int c = vx.dim(0);
  const size_t plane = static_cast<size_t>(vx.dim(1)) * vx.dim(2);
  if (plane < 2)
    throw DegenerateError(
        "instance_norm: spatial size 1 gives degenerate statistics");
  Tensor out(vx.dims());
  std::vector<double> inv_std(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    const double* p = vx.data() + static_cast<size_t>(ch) * plane;
    double mu = 0.0;
    for (size_t i = 0; i < plane; ++i) mu += p[i];
    mu /= static_cast<double>(plane);
    double var = 0.0;
    for (size_t i = 0; i < plane; ++i) {
      const double d = p[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(plane);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(ch)] = inv;
    double* q = out.data() + static_cast<size_t>(ch) * plane;
    for (size_t i = 0; i < plane; ++i) q[i] = (p[i] - mu) * inv;
  }
  int ix = x.id;
  return {push(std::move(out), needs_grad(x),
               [ix, c, plane, inv_std](Graph& g, int id) {
                 const Tensor& go = g.nodes_[id].grad;
                 const Tensor& vo = g.nodes_[id].value;  // normalized values
                 Tensor& gx = g.grad_buf(ix);
                 const double n = static_cast<double>(plane);
                 for (int ch = 0; ch < c; ++ch) {
                   const size_t off = static_cast<size_t>(ch) * plane;
                   double gmean = 0.0, gdot = 0.0;
                   for (size_t i = 0; i < plane; ++i) {
                     gmean += go[off + i];
                     gdot += go[off + i] * vo[off + i];
                   }
                   gmean /= n;
                   gdot /= n;
                   const double inv = inv_std[static_cast<size_t>(ch)];
                   for (size_t i = 0; i < plane; ++i)
                     gx[off + i] +=
                         inv * (go[off + i] - gmean - vo[off + i] * gdot);
                 }
               })};
}

// ---------------------------------------------------------------------------
// warping

namespace {

struct Tap {
  int i0, i1, j0, j1;
  double fy, fx;
  bool clamp_u, clamp_v;
};

inline Tap make_tap(double xn, double yn, int h, int w) {
  Tap t{};
  double u = ((xn + 1.0) * w - 1.0) * 0.5;
  double v = ((yn + 1.0) * h - 1.0) * 0.5;
  t.clamp_u = u < 0.0 || u > w - 1.0;
  t.clamp_v = v < 0.0 || v > h - 1.0;
  u = std::min(std::max(u, 0.0), static_cast<double>(w - 1));
  v = std::min(std::max(v, 0.0), static_cast<double>(h - 1));
  t.j0 = static_cast<int>(std::floor(u));
  t.i0 = static_cast<int>(std::floor(v));
  if (t.j0 > w - 1) t.j0 = w - 1;
  if (t.i0 > h - 1) t.i0 = h - 1;
  t.j1 = std::min(t.j0 + 1, w - 1);
  t.i1 = std::min(t.i0 + 1, h - 1);
  t.fx = u - t.j0;
  t.fy = v - t.i0;
  return t;
}

}  // namespace

Var Graph::grid_sample(Var img, Var field) {
  const Tensor& vi = val(img);
  const Tensor& vf = val(field);
  if (vi.rank() != 3 || vf.rank() != 3 || vf.dim(0) != 2 ||
      vf.dim(1) != vi.dim(1) || vf.dim(2) != vi.dim(2))
    throw DimensionError("grid_sample: image/field shape mismatch");
  const int c = vi.dim(0), h = vi.dim(1), w = vi.dim(2);
  Tensor out(vi.dims());
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const Tap t = make_tap(vf.at(0, i, j), vf.at(1, i, j), h, w);
      for (int ch = 0; ch < c; ++ch) {
        const double v00 = vi.at(ch, t.i0, t.j0);
        const double v01 = vi.at(ch, t.i0, t.j1);
        const double v10 = vi.at(ch, t.i1, t.j0);
        const double v11 = vi.at(ch, t.i1, t.j1);
        out.at(ch, i, j) = (1.0 - t.fy) * ((1.0 - t.fx) * v00 + t.fx * v01) +
                           t.fy * ((1.0 - t.fx) * v10 + t.fx * v11);
      }
    }
  }
  bool needs = needs_grad(img) || needs_grad(field);
  int ii = img.id, ifd = field.id;
  return {push(std::move(out), needs, [ii, ifd, c, h, w](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            const Tensor& vi2 = g.nodes_[ii].value;
            const Tensor& vf2 = g.nodes_[ifd].value;
            const bool need_img = g.nodes_[ii].needs;
            const bool need_field = g.nodes_[ifd].needs;
            Tensor* gi = need_img ? &g.grad_buf(ii) : nullptr;
            Tensor* gf = need_field ? &g.grad_buf(ifd) : nullptr;
            for (int i = 0; i < h; ++i) {
              for (int j = 0; j < w; ++j) {
                const Tap t = make_tap(vf2.at(0, i, j), vf2.at(1, i, j), h, w);
                double du = 0.0, dv = 0.0;
                for (int ch = 0; ch < c; ++ch) {
                  const double gp = go.at(ch, i, j);
                  if (gp == 0.0) continue;
                  if (need_img) {
                    gi->at(ch, t.i0, t.j0) += gp * (1.0 - t.fy) * (1.0 - t.fx);
                    gi->at(ch, t.i0, t.j1) += gp * (1.0 - t.fy) * t.fx;
                    gi->at(ch, t.i1, t.j0) += gp * t.fy * (1.0 - t.fx);
                    gi->at(ch, t.i1, t.j1) += gp * t.fy * t.fx;
                  }
                  if (need_field) {
                    const double v00 = vi2.at(ch, t.i0, t.j0);
                    const double v01 = vi2.at(ch, t.i0, t.j1);
                    const double v10 = vi2.at(ch, t.i1, t.j0);
                    const double v11 = vi2.at(ch, t.i1, t.j1);
                    du += gp * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                    dv += gp * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                  }
                }
                if (need_field) {
                  if (!t.clamp_u) gf->at(0, i, j) += du * 0.5 * w;
                  if (!t.clamp_v) gf->at(1, i, j) += dv * 0.5 * h;
                }
              }
            }
          })};
}

Var Graph::sample_points(Var field, Var pts) {
  const Tensor& vf = val(field);
  const Tensor& vp = val(pts);
  if (vf.rank() != 3 || vp.rank() != 2 || vp.dim(1) != 2)
    throw DimensionError("sample_points: shape mismatch");
  const int k = vf.dim(0), h = vf.dim(1), w = vf.dim(2);
  const int n = vp.dim(0);
  Tensor out(std::vector<int>{n, k});
  auto tap_px = [h, w](double x, double y) {
    Tap t{};
    t.clamp_u = x < 0.0 || x > w - 1.0;
    t.clamp_v = y < 0.0 || y > h - 1.0;
    double u = std::min(std::max(x, 0.0), static_cast<double>(w - 1));
    double v = std::min(std::max(y, 0.0), static_cast<double>(h - 1));
    t.j0 = static_cast<int>(std::floor(u));
    t.i0 = static_cast<int>(std::floor(v));
    t.j1 = std::min(t.j0 + 1, w - 1);
    t.i1 = std::min(t.i0 + 1, h - 1);
    t.fx = u - t.j0;
    t.fy = v - t.i0;
    return t;
  };
  for (int p = 0; p < n; ++p) {
    const Tap t = tap_px(vp.at(p, 0), vp.at(p, 1));
    for (int ch = 0; ch < k; ++ch) {
      const double v00 = vf.at(ch, t.i0, t.j0);
      const double v01 = vf.at(ch, t.i0, t.j1);
      const double v10 = vf.at(ch, t.i1, t.j0);
      const double v11 = vf.at(ch, t.i1, t.j1);
      out.at(p, ch) = (1.0 - t.fy) * ((1.0 - t.fx) * v00 + t.fx * v01) +
                      t.fy * ((1.0 - t.fx) * v10 + t.fx * v11);
    }
  }
  bool needs = needs_grad(field) || needs_grad(pts);
  int ifd = field.id, ip = pts.id;
  return {push(std::move(out), needs,
               [ifd, ip, k, h, w, n, tap_px](Graph& g, int id) {
                 const Tensor& go = g.nodes_[id].grad;
                 const Tensor& vf2 = g.nodes_[ifd].value;
                 const Tensor& vp2 = g.nodes_[ip].value;
                 const bool need_f = g.nodes_[ifd].needs;
                 const bool need_p = g.nodes_[ip].needs;
                 Tensor* gf = need_f ? &g.grad_buf(ifd) : nullptr;
                 Tensor* gp = need_p ? &g.grad_buf(ip) : nullptr;
                 for (int p = 0; p < n; ++p) {
                   const Tap t = tap_px(vp2.at(p, 0), vp2.at(p, 1));
                   double du = 0.0, dv = 0.0;
                   for (int ch = 0; ch < k; ++ch) {
                     const double gg = go.at(p, ch);
                     if (gg == 0.0) continue;
                     if (need_f) {
                       gf->at(ch, t.i0, t.j0) += gg * (1.0 - t.fy) * (1.0 - t.fx);
                       gf->at(ch, t.i0, t.j1) += gg * (1.0 - t.fy) * t.fx;
                       gf->at(ch, t.i1, t.j0) += gg * t.fy * (1.0 - t.fx);
                       gf->at(ch, t.i1, t.j1) += gg * t.fy * t.fx;
                     }
                     if (need_p) {
                       const double v00 = vf2.at(ch, t.i0, t.j0);
                       const double v01 = vf2.at(ch, t.i0, t.j1);
                       const double v10 = vf2.at(ch, t.i1, t.j0);
                       const double v11 = vf2.at(ch, t.i1, t.j1);
                       du += gg * ((1.0 - t.fy) * (v01 - v00) +
                                   t.fy * (v11 - v10));
                       dv += gg * ((1.0 - t.fx) * (v10 - v00) +
                                   t.fx * (v11 - v01));
                     }
                   }
                   if (need_p) {
                     if (!t.clamp_u) gp->at(p, 0) += du;
                     if (!t.clamp_v) gp->at(p, 1) += dv;
                   }
                 }
               })};
}

// ---------------------------------------------------------------------------
// reductions and geometry

Var Graph::mean_all(Var x) {
  const Tensor& vx = val(x);
  double s = 0.0;
  for (size_t i = 0; i < vx.size(); ++i) s += vx[i];
  const double n = static_cast<double>(vx.size());
  int ix = x.id;
  return {push(Tensor::scalar(s / n), needs_grad(x), [ix, n](Graph& g, int id) {
            const double go = g.nodes_[id].grad[0];
            Tensor& gx = g.grad_buf(ix);
            const double k = go / n;
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += k;
          })};
}

Var Graph::sum_all(Var x) {
  const Tensor& vx = val(x);
  double s = 0.0;
  for (size_t i = 0; i < vx.size(); ++i) s += vx[i];
  int ix = x.id;
  return {push(Tensor::scalar(s), needs_grad(x), [ix](Graph& g, int id) {
            const double go = g.nodes_[id].grad[0];
            Tensor& gx = g.grad_buf(ix);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += go;
          })};
}

Var Graph::mean_hw(Var x) {
  const Tensor& vx = val(x);
  if (vx.rank() != 3) throw DimensionError("mean_hw: rank-3 input");
  const int c = vx.dim(0);
  const size_t plane = static_cast<size_t>(vx.dim(1)) * vx.dim(2);
  Tensor out(std::vector<int>{c});
  for (int ch = 0; ch < c; ++ch) {
    const double* p = vx.data() + static_cast<size_t>(ch) * plane;
    double s = 0.0;
    for (size_t i = 0; i < plane; ++i) s += p[i];
    out[static_cast<size_t>(ch)] = s / static_cast<double>(plane);
  }
  int ix = x.id;
  return {push(std::move(out), needs_grad(x), [ix, c, plane](Graph& g, int id) {
            const Tensor& go = g.nodes_[id].grad;
            Tensor& gx = g.grad_buf(ix);
            for (int ch = 0; ch < c; ++ch) {
              const double k =
                  go[static_cast<size_t>(ch)] / static_cast<double>(plane);
              double* p = gx.data() + static_cast<size_t>(ch) * plane;
              for (size_t i = 0; i < plane; ++i) p[i] += k;
            }
          })};
}

Var Graph::dsnt(Var hm) {
  const Tensor& vh = val(hm);
  if (vh.rank() != 2) throw DimensionError("dsnt: rank-2 heatmap required");
  const int h = vh.dim(0), w = vh.dim(1);
  const size_t n = vh.size();
  size_t argmin = 0;
  double m = vh[0];
  for (size_t i = 1; i < n; ++i)
    if (vh[i] < m) {
      m = vh[i];
      argmin = i;
    }
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += vh[i] - m;
  if (s <= 0.0)
    throw DegenerateError("dsnt: heatmap is constant after rectification");
  double ox = 0.0, oy = 0.0;
  for (int i = 0; i < h; ++i) {
    const double cy = (2.0 * i + 1.0) / h - 1.0;
    for (int j = 0; j < w; ++j) {
      const double cx = (2.0 * j + 1.0) / w - 1.0;
      const double p = (vh.at(i, j) - m) / s;
      ox += p * cx;
      oy += p * cy;
    }
  }
  Tensor out = Tensor::from({2}, {ox, oy});
  int ih = hm.id;
  return {push(std::move(out), needs_grad(hm),
               [ih, h, w, s, argmin, ox, oy](Graph& g, int id) {
                 const Tensor& go = g.nodes_[id].grad;
                 Tensor& gh = g.grad_buf(ih);
                 const double nn = static_cast<double>(h) * w;
                 // coordinate-grid sums used by the argmin term
                 double sum_cx = 0.0, sum_cy = 0.0;
                 for (int j = 0; j < w; ++j)
                   sum_cx += (2.0 * j + 1.0) / w - 1.0;
                 sum_cx *= h;
                 for (int i = 0; i < h; ++i)
                   sum_cy += (2.0 * i + 1.0) / h - 1.0;
                 sum_cy *= w;
                 size_t idx = 0;
                 for (int i = 0; i < h; ++i) {
                   const double cy = (2.0 * i + 1.0) / h - 1.0;
                   for (int j = 0; j < w; ++j, ++idx) {
                     const double cx = (2.0 * j + 1.0) / w - 1.0;
                     double dx, dy;
                     if (idx == argmin) {
                       dx = (cx - sum_cx - (1.0 - nn) * ox) / s;
                       dy = (cy - sum_cy - (1.0 - nn) * oy) / s;
                     } else {
                       dx = (cx - ox) / s;
                       dy = (cy - oy) / s;
                     }
                     gh[idx] += go[0] * dx + go[1] * dy;
                   }
                 }
               })};
}

Var Graph::mean_point_dist(Var a, Var b) {
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  if (va.rank() != 2 || va.dim(1) != 2 || !va.same_dims(vb))
    throw DimensionError("mean_point_dist: [N,2] operands required");
  const int n = va.dim(0);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double dx = va.at(i, 0) - vb.at(i, 0);
    const double dy = va.at(i, 1) - vb.at(i, 1);
    loss += std::sqrt(dx * dx + dy * dy);
  }
  loss /= static_cast<double>(n);
  bool needs = needs_grad(a) || needs_grad(b);
  int ia = a.id, ib = b.id;
  return {push(Tensor::scalar(loss), needs, [ia, ib, n](Graph& g, int id) {
            const double go = g.nodes_[id].grad[0];
            const Tensor& va2 = g.nodes_[ia].value;
            const Tensor& vb2 = g.nodes_[ib].value;
            const bool na = g.nodes_[ia].needs;
            const bool nb = g.nodes_[ib].needs;
            Tensor* ga = na ? &g.grad_buf(ia) : nullptr;
            Tensor* gb = nb ? &g.grad_buf(ib) : nullptr;
            for (int i = 0; i < n; ++i) {
              const double dx = va2.at(i, 0) - vb2.at(i, 0);
              const double dy = va2.at(i, 1) - vb2.at(i, 1);
              const double r = std::sqrt(dx * dx + dy * dy);
              if (r <= 0.0) continue;
              const double k = go / (r * static_cast<double>(n));
              if (na) {
                ga->at(i, 0) += k * dx;
                ga->at(i, 1) += k * dy;
              }
              if (nb) {
                gb->at(i, 0) -= k * dx;
                gb->at(i, 1) -= k * dy;
              }
            }
          })};
}

// ---------------------------------------------------------------------------

Var adain_apply(Graph& g, Var feat, Var scale, Var bias, double eps) {
  return g.add_channel(g.mul_channel(g.instance_norm(feat, eps), scale), bias);
}

Tensor identity_field_chw(int h, int w) {
  Tensor f(std::vector<int>{2, h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      f.at(0, i, j) = (2.0 * j + 1.0) / w - 1.0;
      f.at(1, i, j) = (2.0 * i + 1.0) / h - 1.0;
    }
  return f;
}

}  // namespace sdmt::ad
