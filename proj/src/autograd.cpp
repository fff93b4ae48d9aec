// Copyright 2026 The mtlc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mtlc/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "mtlc/errors.hpp"

namespace mtlc::ag {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

using BackwardFn = std::function<void(Node&)>;

Var make(Tensor value, std::vector<Var> inputs, const char* op, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  for (const Var& in : inputs) {
    if (in.defined() && in.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->inputs.reserve(inputs.size());
    for (Var& in : inputs) node->inputs.push_back(in.ptr());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

// Input k of `self`, when it wants a gradient.
Node* wants(Node& self, std::size_t k) {
  if (k >= self.inputs.size()) return nullptr;
  Node* in = self.inputs[k].get();
  return (in && in->requires_grad) ? in : nullptr;
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(op, to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_rank4(const char* op, const Var& x) {
  if (x.value().rank() != 4) {
    throw ShapeMismatch(op, "expected (B,C,H,W), got " + to_string(x.shape()));
  }
}

std::size_t pooled_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t pad,
                          const char* op) {
  const long long span = static_cast<long long>(in) + 2 * static_cast<long long>(pad) -
                         static_cast<long long>(k);
  if (span < 0 || s == 0) {
    throw ShapeMismatch(op, "window " + std::to_string(k) + " larger than padded input " +
                                std::to_string(in + 2 * pad));
  }
  return static_cast<std::size_t>(span) / s + 1;
}

}  // namespace

void Node::accumulate(const Tensor& g) {
  if (grad.empty()) {
    grad = g;
  } else {
    grad.add_(g);
  }
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor::zeros_like(value);
  return grad;
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

void Var::backward() const {
  if (value().size() != 1) {
    throw ShapeMismatch("backward", "implicit seed needs a scalar, got " +
                                        to_string(shape()));
  }
  backward(Tensor(shape(), 1.0));
}

void Var::backward(const Tensor& seed) const {
  if (!node_->requires_grad) return;
  // Iterative post-order DFS gives a topological order of the subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior gradients are only needed during the sweep.
  for (Node* n : order) {
    if (n->backward) n->grad = Tensor();
  }
}

// --- elementwise ---

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  out.add_(b.value());
  return make(std::move(out), {a, b}, "add", [](Node& self) {
    if (Node* x = wants(self, 0)) x->accumulate(self.grad);
    if (Node* y = wants(self, 1)) y->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make(std::move(out), {a, b}, "sub", [](Node& self) {
    if (Node* x = wants(self, 0)) x->accumulate(self.grad);
    if (Node* y = wants(self, 1)) {
      Tensor g = self.grad;
      g.scale_(-1.0);
      y->accumulate(g);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make(std::move(out), {a, b}, "mul", [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Node* x = wants(self, 0)) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= bv[i];
      x->accumulate(g);
    }
    if (Node* y = wants(self, 1)) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= av[i];
      y->accumulate(g);
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  out.scale_(s);
  return make(std::move(out), {a}, "scale", [s](Node& self) {
    Tensor g = self.grad;
    g.scale_(s);
    self.inputs[0]->accumulate(g);
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v += s;
  return make(std::move(out), {a}, "add_scalar",
              [](Node& self) { self.inputs[0]->accumulate(self.grad); });
}

Var add_constant(const Var& a, const Tensor& c) {
  if (c.size() != a.value().size()) {
    throw ShapeMismatch("add_constant", to_string(a.shape()) + " vs " + to_string(c.shape()));
  }
  Tensor out = a.value();
  out.add_(c);
  return make(std::move(out), {a}, "add_constant",
              [](Node& self) { self.inputs[0]->accumulate(self.grad); });
}

Var sum(const Var& a) {
  return make(Tensor::scalar(a.value().sum()), {a}, "sum", [](Node& self) {
    self.inputs[0]->accumulate(Tensor(self.inputs[0]->value.shape(), self.grad[0]));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return make(Tensor::scalar(a.value().sum() / n), {a}, "mean", [n](Node& self) {
    self.inputs[0]->accumulate(Tensor(self.inputs[0]->value.shape(), self.grad[0] / n));
  });
}

Var exp(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::exp(v);
  return make(std::move(out), {a}, "exp", [](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= self.value[i];
    self.inputs[0]->accumulate(g);
  });
}

Var log(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::log(v);
  return make(std::move(out), {a}, "log", [](Node& self) {
    const Tensor& x = self.inputs[0]->value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] /= x[i];
    self.inputs[0]->accumulate(g);
  });
}

Var clamp_min(const Var& a, double floor) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::max(v, floor);
  return make(std::move(out), {a}, "clamp_min", [floor](Node& self) {
    const Tensor& x = self.inputs[0]->value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] < floor) g[i] = 0.0;
    }
    self.inputs[0]->accumulate(g);
  });
}

Var softplus(const Var& a) {
  Tensor out = a.value();
  // log1p(exp(x)) without overflow for large x.
  for (double& v : out.data()) v = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
  return make(std::move(out), {a}, "softplus", [](Node& self) {
    const Tensor& x = self.inputs[0]->value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 / (1.0 + std::exp(-x[i]));
    self.inputs[0]->accumulate(g);
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return make(std::move(out), {a}, "relu", [](Node& self) {
    const Tensor& x = self.inputs[0]->value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!(x[i] > 0.0)) g[i] = 0.0;
    }
    self.inputs[0]->accumulate(g);
  });
}

Var softmax(const Var& a) {
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.value().size() / cols;
  Tensor out = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.raw() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) row[c] /= z;
  }
  return make(std::move(out), {a}, "softmax", [rows, cols](Node& self) {
    Tensor g(self.value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.raw() + r * cols;
      const double* dy = self.grad.raw() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] = y[c] * (dy[c] - dot);
    }
    self.inputs[0]->accumulate(g);
  });
}

Var log_softmax(const Var& a) {
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.value().size() / cols;
  Tensor out = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.raw() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) row[c] -= lz;
  }
  return make(std::move(out), {a}, "log_softmax", [rows, cols](Node& self) {
    Tensor g(self.value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.raw() + r * cols;
      const double* dy = self.grad.raw() + r * cols;
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) total += dy[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] = dy[c] - std::exp(y[c]) * total;
    }
    self.inputs[0]->accumulate(g);
  });
}

Var pick(const Var& a, std::size_t index) { return slice(a, index, 1); }

Var slice(const Var& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.value().size()) {
    throw ShapeMismatch("slice", "range [" + std::to_string(begin) + ", " +
                                     std::to_string(begin + count) + ") exceeds " +
                                     to_string(a.shape()));
  }
  std::vector<double> vals(a.value().data().begin() + static_cast<std::ptrdiff_t>(begin),
                           a.value().data().begin() + static_cast<std::ptrdiff_t>(begin + count));
  return make(Tensor({count}, std::move(vals)), {a}, "slice", [begin, count](Node& self) {
    Tensor g = Tensor::zeros_like(self.inputs[0]->value);
    for (std::size_t i = 0; i < count; ++i) g[begin + i] = self.grad[i];
    self.inputs[0]->accumulate(g);
  });
}

Var stack(std::span<const Var> parts) {
  std::vector<double> vals;
  std::vector<std::size_t> sizes;
  for (const Var& p : parts) {
    sizes.push_back(p.value().size());
    vals.insert(vals.end(), p.value().data().begin(), p.value().data().end());
  }
  const std::size_t n = vals.size();
  return make(Tensor({n}, std::move(vals)), std::vector<Var>(parts.begin(), parts.end()),
              "stack", [sizes](Node& self) {
                std::size_t off = 0;
                for (std::size_t k = 0; k < sizes.size(); ++k) {
                  if (Node* in = wants(self, k)) {
                    Tensor g(in->value.shape());
                    std::copy_n(self.grad.raw() + off, sizes[k], g.raw());
                    in->accumulate(g);
                  }
                  off += sizes[k];
                }
              });
}

Var weighted_sum(std::span<const Var> branches, const Var& weights) {
  if (branches.empty() || weights.value().size() != branches.size()) {
    throw ShapeMismatch("weighted_sum", std::to_string(branches.size()) + " branches vs " +
                                            to_string(weights.shape()) + " weights");
  }
  Tensor out = Tensor::zeros_like(branches[0].value());
  for (std::size_t k = 0; k < branches.size(); ++k) {
    require_same_shape("weighted_sum", branches[0], branches[k]);
    const double w = weights.value()[k];
    const Tensor& b = branches[k].value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * b[i];
  }
  std::vector<Var> inputs(branches.begin(), branches.end());
  inputs.push_back(weights);
  const std::size_t k_count = branches.size();
  return make(std::move(out), std::move(inputs), "weighted_sum", [k_count](Node& self) {
    const Tensor& w = self.inputs[k_count]->value;
    for (std::size_t k = 0; k < k_count; ++k) {
      if (Node* b = wants(self, k)) {
        Tensor g = self.grad;
        g.scale_(w[k]);
        b->accumulate(g);
      }
    }
    if (Node* wn = wants(self, k_count)) {
      Tensor gw(w.shape());
      for (std::size_t k = 0; k < k_count; ++k) {
        const Tensor& b = self.inputs[k]->value;
        double dot = 0.0;
        for (std::size_t i = 0; i < b.size(); ++i) dot += self.grad[i] * b[i];
        gw[k] = dot;
      }
      wn->accumulate(gw);
    }
  });
}

Var straight_through(const Var& soft) {
  Tensor hard = Tensor::zeros_like(soft.value());
  const auto& d = soft.value().data();
  hard[static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin())] = 1.0;
  return make(std::move(hard), {soft}, "straight_through",
              [](Node& self) { self.inputs[0]->accumulate(self.grad); });
}

Var add_all(std::span<const Var> scalars) {
  double total = 0.0;
  for (const Var& s : scalars) {
    if (s.value().size() != 1) throw ShapeMismatch("add_all", "non-scalar term");
    total += s.value()[0];
  }
  return make(Tensor::scalar(total), std::vector<Var>(scalars.begin(), scalars.end()),
              "add_all", [](Node& self) {
                for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                  if (Node* in = wants(self, k)) in->accumulate(Tensor::scalar(self.grad[0]));
                }
              });
}

// --- convolution ---

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride,
           std::size_t pad) {
  require_rank4("conv2d", x);
  const Dims& xs = x.shape();
  const Dims& ws = weight.shape();
  if (ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3]) {
    throw ShapeMismatch("conv2d", "weight " + to_string(ws) + " vs input " + to_string(xs));
  }
  const std::size_t batch = xs[0], in_c = xs[1], in_h = xs[2], in_w = xs[3];
  const std::size_t out_c = ws[0], k = ws[2];
  const std::size_t out_h = pooled_extent(in_h, k, stride, pad, "conv2d");
  const std::size_t out_w = pooled_extent(in_w, k, stride, pad, "conv2d");
  const std::size_t patch = in_c * k * k;
  const std::size_t positions = out_h * out_w;
  if (bias.defined() && bias.value().size() != out_c) {
    throw ShapeMismatch("conv2d", "bias " + to_string(bias.shape()));
  }

  // im2col for the whole batch: (B, patch, positions).
  auto cols = std::make_shared<std::vector<double>>(batch * patch * positions, 0.0);
  for (std::size_t n = 0; n < batch; ++n) {
    double* col = cols->data() + n * patch * positions;
    for (std::size_t c = 0; c < in_c; ++c) {
      const double* plane = x.value().raw() + (n * in_c + c) * in_h * in_w;
      for (std::size_t ki = 0; ki < k; ++ki) {
        for (std::size_t kj = 0; kj < k; ++kj) {
          double* row = col + ((c * k + ki) * k + kj) * positions;
          for (std::size_t oh = 0; oh < out_h; ++oh) {
            const long long ih = static_cast<long long>(oh * stride + ki) - static_cast<long long>(pad);
            if (ih < 0 || ih >= static_cast<long long>(in_h)) continue;
            for (std::size_t ow = 0; ow < out_w; ++ow) {
              const long long iw = static_cast<long long>(ow * stride + kj) - static_cast<long long>(pad);
              if (iw < 0 || iw >= static_cast<long long>(in_w)) continue;
              row[oh * out_w + ow] = plane[static_cast<std::size_t>(ih) * in_w + static_cast<std::size_t>(iw)];
            }
          }
        }
      }
    }
  }

  Tensor out({batch, out_c, out_h, out_w});
  ConstMatMap w_mat(weight.value().raw(), static_cast<Eigen::Index>(out_c),
                    static_cast<Eigen::Index>(patch));
  for (std::size_t n = 0; n < batch; ++n) {
    ConstMatMap col(cols->data() + n * patch * positions, static_cast<Eigen::Index>(patch),
                    static_cast<Eigen::Index>(positions));
    MatMap o(out.raw() + n * out_c * positions, static_cast<Eigen::Index>(out_c),
             static_cast<Eigen::Index>(positions));
    o.noalias() = w_mat * col;
    if (bias.defined()) {
      for (std::size_t c = 0; c < out_c; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bias.value()[c];
    }
  }

  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make(std::move(out), std::move(inputs), "conv2d",
              [=](Node& self) {
                const Tensor& w = self.inputs[1]->value;
                ConstMatMap wm(w.raw(), static_cast<Eigen::Index>(out_c),
                               static_cast<Eigen::Index>(patch));
                Node* xn = wants(self, 0);
                Node* wn = wants(self, 1);
                Node* bn = wants(self, 2);
                Tensor gw = wn ? Tensor(w.shape()) : Tensor();
                Tensor gb = bn ? Tensor({out_c}) : Tensor();
                Tensor gx = xn ? Tensor(xn->value.shape()) : Tensor();
                RowMatrix dcol;
                for (std::size_t n = 0; n < batch; ++n) {
                  ConstMatMap dout(self.grad.raw() + n * out_c * positions,
                                   static_cast<Eigen::Index>(out_c),
                                   static_cast<Eigen::Index>(positions));
                  ConstMatMap col(cols->data() + n * patch * positions,
                                  static_cast<Eigen::Index>(patch),
                                  static_cast<Eigen::Index>(positions));
                  if (wn) {
                    MatMap gwm(gw.raw(), static_cast<Eigen::Index>(out_c),
                               static_cast<Eigen::Index>(patch));
                    gwm.noalias() += dout * col.transpose();
                  }
                  if (bn) {
                    for (std::size_t c = 0; c < out_c; ++c) gb[c] += dout.row(static_cast<Eigen::Index>(c)).sum();
                  }
                  if (xn) {
                    dcol.noalias() = wm.transpose() * dout;
                    for (std::size_t c = 0; c < in_c; ++c) {
                      double* plane = gx.raw() + (n * in_c + c) * in_h * in_w;
                      for (std::size_t ki = 0; ki < k; ++ki) {
                        for (std::size_t kj = 0; kj < k; ++kj) {
                          const double* row = dcol.data() + ((c * k + ki) * k + kj) * positions;
                          for (std::size_t oh = 0; oh < out_h; ++oh) {
                            const long long ih = static_cast<long long>(oh * stride + ki) - static_cast<long long>(pad);
                            if (ih < 0 || ih >= static_cast<long long>(in_h)) continue;
                            for (std::size_t ow = 0; ow < out_w; ++ow) {
                              const long long iw = static_cast<long long>(ow * stride + kj) - static_cast<long long>(pad);
                              if (iw < 0 || iw >= static_cast<long long>(in_w)) continue;
                              plane[static_cast<std::size_t>(ih) * in_w + static_cast<std::size_t>(iw)] +=
                                  row[oh * out_w + ow];
                            }
                          }
                        }
                      }
                    }
                  }
                }
                if (xn) xn->accumulate(gx);
                if (wn) wn->accumulate(gw);
                if (bn) bn->accumulate(gb);
              });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const std::size_t batch = x.shape()[0];
  const std::size_t in_f = x.value().size() / batch;
  const Dims& ws = weight.shape();
  if (ws.size() != 2 || ws[1] != in_f) {
    throw ShapeMismatch("linear", "weight " + to_string(ws) + " vs input " + to_string(x.shape()));
  }
  const std::size_t out_f = ws[0];
  if (bias.defined() && bias.value().size() != out_f) {
    throw ShapeMismatch("linear", "bias " + to_string(bias.shape()));
  }
  Tensor out({batch, out_f});
  ConstMatMap xm(x.value().raw(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(in_f));
  ConstMatMap wm(weight.value().raw(), static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in_f));
  MatMap om(out.raw(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(out_f));
  om.noalias() = xm * wm.transpose();
  if (bias.defined()) {
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t o = 0; o < out_f; ++o) out[n * out_f + o] += bias.value()[o];
    }
  }
  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make(std::move(out), std::move(inputs), "linear", [=](Node& self) {
    ConstMatMap g(self.grad.raw(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(out_f));
    if (Node* xn = wants(self, 0)) {
      ConstMatMap w(self.inputs[1]->value.raw(), static_cast<Eigen::Index>(out_f),
                    static_cast<Eigen::Index>(in_f));
      Tensor gx(xn->value.shape());
      MatMap gxm(gx.raw(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(in_f));
      gxm.noalias() = g * w;
      xn->accumulate(gx);
    }
    if (Node* wn = wants(self, 1)) {
      ConstMatMap xv(self.inputs[0]->value.raw(), static_cast<Eigen::Index>(batch),
                     static_cast<Eigen::Index>(in_f));
      Tensor gw(wn->value.shape());
      MatMap gwm(gw.raw(), static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in_f));
      gwm.noalias() = g.transpose() * xv;
      wn->accumulate(gw);
    }
    if (Node* bn = wants(self, 2)) {
      Tensor gb({out_f});
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t o = 0; o < out_f; ++o) gb[o] += self.grad[n * out_f + o];
      }
      bn->accumulate(gb);
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
               bool training, double eps, double moving_average_fraction) {
  const Dims& xs = x.shape();
  if (xs.size() != 2 && xs.size() != 4) {
    throw ShapeMismatch("batch_norm", "expected (B,C) or (B,C,H,W), got " + to_string(xs));
  }
  const std::size_t batch = xs[0], channels = xs[1];
  const std::size_t spatial = xs.size() == 4 ? xs[2] * xs[3] : 1;
  const std::size_t count = batch * spatial;
  if (gamma.value().size() != channels || beta.value().size() != channels) {
    throw ShapeMismatch("batch_norm", "affine params do not match " + std::to_string(channels) +
                                          " channels");
  }
  if (state.mean_sum.size() != channels) {
    state.mean_sum = Tensor({channels});
    state.var_sum = Tensor({channels});
    state.weight = 0.0;
  }
  auto idx = [channels, spatial](std::size_t n, std::size_t c, std::size_t s) {
    return (n * channels + c) * spatial + s;
  };

  Tensor mu({channels});
  Tensor inv_std({channels});
  if (training) {
    if (count < 2) throw ShapeMismatch("batch_norm", "batch statistics need more than one value");
    for (std::size_t c = 0; c < channels; ++c) {
      double m = 0.0;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t s = 0; s < spatial; ++s) m += x.value()[idx(n, c, s)];
      m /= static_cast<double>(count);
      double v = 0.0;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t s = 0; s < spatial; ++s) {
          const double d = x.value()[idx(n, c, s)] - m;
          v += d * d;
        }
      v /= static_cast<double>(count);
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(v + eps);
      const double unbiased = v * static_cast<double>(count) / static_cast<double>(count - 1);
      state.mean_sum[c] = moving_average_fraction * state.mean_sum[c] + m;
      state.var_sum[c] = moving_average_fraction * state.var_sum[c] + unbiased;
    }
    state.weight = moving_average_fraction * state.weight + 1.0;
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = state.mean(c);
      inv_std[c] = 1.0 / std::sqrt(state.var(c) + eps);
    }
  }

  Tensor xhat(xs);
  Tensor out(xs);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t s = 0; s < spatial; ++s) {
        const std::size_t i = idx(n, c, s);
        xhat[i] = (x.value()[i] - mu[c]) * inv_std[c];
        out[i] = gamma.value()[c] * xhat[i] + beta.value()[c];
      }

  return make(std::move(out), {x, gamma, beta}, "batch_norm",
              [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                const Tensor& g = self.grad;
                const Tensor& gam = self.inputs[1]->value;
                Tensor dgamma({channels});
                Tensor dbeta({channels});
                for (std::size_t n = 0; n < batch; ++n)
                  for (std::size_t c = 0; c < channels; ++c)
                    for (std::size_t s = 0; s < spatial; ++s) {
                      const std::size_t i = idx(n, c, s);
                      dgamma[c] += g[i] * xhat[i];
                      dbeta[c] += g[i];
                    }
                if (Node* xn = wants(self, 0)) {
                  Tensor gx(xs);
                  const double m = static_cast<double>(count);
                  for (std::size_t c = 0; c < channels; ++c) {
                    for (std::size_t n = 0; n < batch; ++n)
                      for (std::size_t s = 0; s < spatial; ++s) {
                        const std::size_t i = idx(n, c, s);
                        if (training) {
                          // d xhat summed terms are gamma * dbeta and gamma * dgamma.
                          gx[i] = gam[c] * inv_std[c] *
                                  (g[i] - dbeta[c] / m - xhat[i] * dgamma[c] / m);
                        } else {
                          gx[i] = gam[c] * inv_std[c] * g[i];
                        }
                      }
                  }
                  xn->accumulate(gx);
                }
                if (Node* gn = wants(self, 1)) gn->accumulate(dgamma);
                if (Node* bn = wants(self, 2)) bn->accumulate(dbeta);
              });
}

Var max_pool2d(const Var& x, std::size_t kh, std::size_t kw, std::size_t stride_h,
               std::size_t stride_w, std::size_t pad) {
  require_rank4("max_pool2d", x);
  const Dims& xs = x.shape();
  const std::size_t batch = xs[0], ch = xs[1], in_h = xs[2], in_w = xs[3];
  const std::size_t out_h = pooled_extent(in_h, kh, stride_h, pad, "max_pool2d");
  const std::size_t out_w = pooled_extent(in_w, kw, stride_w, pad, "max_pool2d");
  Tensor out({batch, ch, out_h, out_w});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t oh = 0; oh < out_h; ++oh)
        for (std::size_t ow = 0; ow < out_w; ++ow, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = 0;
          bool found = false;
          for (std::size_t i = 0; i < kh; ++i) {
            const long long ih = static_cast<long long>(oh * stride_h + i) - static_cast<long long>(pad);
            if (ih < 0 || ih >= static_cast<long long>(in_h)) continue;
            for (std::size_t j = 0; j < kw; ++j) {
              const long long iw = static_cast<long long>(ow * stride_w + j) - static_cast<long long>(pad);
              if (iw < 0 || iw >= static_cast<long long>(in_w)) continue;
              const std::size_t flat = ((n * ch + c) * in_h + static_cast<std::size_t>(ih)) * in_w +
                                       static_cast<std::size_t>(iw);
              if (!found || x.value()[flat] > best) {
                best = x.value()[flat];
                best_i = flat;
                found = true;
              }
            }
          }
          out[o] = best;
          (*argmax)[o] = best_i;
        }
  return make(std::move(out), {x}, "max_pool2d", [argmax](Node& self) {
    Tensor gx = Tensor::zeros_like(self.inputs[0]->value);
    for (std::size_t o = 0; o < argmax->size(); ++o) gx[(*argmax)[o]] += self.grad[o];
    self.inputs[0]->accumulate(gx);
  });
}

Var avg_pool2d(const Var& x, std::size_t kh, std::size_t kw, std::size_t stride_h,
               std::size_t stride_w, std::size_t pad) {
  require_rank4("avg_pool2d", x);
  const Dims xs = x.shape();
  const std::size_t batch = xs[0], ch = xs[1], in_h = xs[2], in_w = xs[3];
  const std::size_t out_h = pooled_extent(in_h, kh, stride_h, pad, "avg_pool2d");
  const std::size_t out_w = pooled_extent(in_w, kw, stride_w, pad, "avg_pool2d");
  const double inv = 1.0 / static_cast<double>(kh * kw);
  // Visits every in-bounds (output, input) pair of the pooling windows.
  auto for_each_window = [=](auto&& fn) {
    std::size_t o = 0;
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t oh = 0; oh < out_h; ++oh)
          for (std::size_t ow = 0; ow < out_w; ++ow, ++o)
            for (std::size_t i = 0; i < kh; ++i) {
              const long long ih = static_cast<long long>(oh * stride_h + i) - static_cast<long long>(pad);
              if (ih < 0 || ih >= static_cast<long long>(in_h)) continue;
              for (std::size_t j = 0; j < kw; ++j) {
                const long long iw = static_cast<long long>(ow * stride_w + j) - static_cast<long long>(pad);
                if (iw < 0 || iw >= static_cast<long long>(in_w)) continue;
                fn(o, ((n * ch + c) * in_h + static_cast<std::size_t>(ih)) * in_w +
                          static_cast<std::size_t>(iw));
              }
            }
  };
  Tensor out({batch, ch, out_h, out_w});
  for_each_window([&](std::size_t o, std::size_t i) { out[o] += x.value()[i] * inv; });
  return make(std::move(out), {x}, "avg_pool2d", [=](Node& self) {
    Tensor gx = Tensor::zeros_like(self.inputs[0]->value);
    for_each_window([&](std::size_t o, std::size_t i) { gx[i] += self.grad[o] * inv; });
    self.inputs[0]->accumulate(gx);
  });
}

Var global_avg_pool(const Var& x) {
  require_rank4("global_avg_pool", x);
  return avg_pool2d(x, x.shape()[2], x.shape()[3], 1, 1, 0);
}

Var concat(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeMismatch("concat", "no inputs");
  const Dims& first = xs[0].shape();
  std::size_t channels = 0;
  for (const Var& v : xs) {
    const Dims& s = v.shape();
    if (s.size() != first.size() || s[0] != first[0] ||
        !std::equal(s.begin() + 2, s.end(), first.begin() + 2)) {
      throw ShapeMismatch("concat", to_string(s) + " vs " + to_string(first));
    }
    channels += s[1];
  }
  Dims out_shape = first;
  out_shape[1] = channels;
  const std::size_t batch = first[0];
  const std::size_t inner = numel(Dims(first.begin() + 2, first.end()));
  Tensor out(out_shape);
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const Var& v : xs) {
    const std::size_t c = v.shape()[1];
    widths.push_back(c);
    for (std::size_t n = 0; n < batch; ++n) {
      std::copy_n(v.value().raw() + n * c * inner, c * inner,
                  out.raw() + (n * channels + off) * inner);
    }
    off += c;
  }
  return make(std::move(out), std::vector<Var>(xs.begin(), xs.end()), "concat",
              [=](Node& self) {
                std::size_t off = 0;
                for (std::size_t k = 0; k < widths.size(); ++k) {
                  const std::size_t c = widths[k];
                  if (Node* in = wants(self, k)) {
                    Tensor g(in->value.shape());
                    for (std::size_t n = 0; n < batch; ++n) {
                      std::copy_n(self.grad.raw() + (n * channels + off) * inner, c * inner,
                                  g.raw() + n * c * inner);
                    }
                    in->accumulate(g);
                  }
                  off += c;
                }
              });
}

Var dropout(const Var& x, double ratio, Rng& rng, bool training) {
  if (!training || ratio <= 0.0) return x;
  auto mask = std::make_shared<Tensor>(x.shape());
  const double keep = 1.0 - ratio;
  for (double& m : mask->data()) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
  return make(std::move(out), {x}, "dropout", [mask](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= (*mask)[i];
    self.inputs[0]->accumulate(g);
  });
}

Var channel_adjust(const Var& x, std::size_t channels) {
  const Dims& xs = x.shape();
  if (xs.size() < 2) throw ShapeMismatch("channel_adjust", "rank < 2");
  const std::size_t batch = xs[0], in_c = xs[1];
  const std::size_t inner = x.value().size() / (batch * in_c);
  const std::size_t kept = std::min(in_c, channels);
  Dims out_shape = xs;
  out_shape[1] = channels;
  Tensor out(out_shape);
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(x.value().raw() + n * in_c * inner, kept * inner, out.raw() + n * channels * inner);
  }
  return make(std::move(out), {x}, "channel_adjust", [=](Node& self) {
    Tensor g(self.inputs[0]->value.shape());
    for (std::size_t n = 0; n < batch; ++n) {
      std::copy_n(self.grad.raw() + n * channels * inner, kept * inner, g.raw() + n * in_c * inner);
    }
    self.inputs[0]->accumulate(g);
  });
}

Var reshape(const Var& x, Dims shape) {
  if (numel(shape) != x.value().size()) {
    throw ShapeMismatch("reshape", to_string(x.shape()) + " -> " + to_string(shape));
  }
  return make(x.value().reshaped(std::move(shape)), {x}, "reshape", [](Node& self) {
    self.inputs[0]->accumulate(self.grad.reshaped(self.inputs[0]->value.shape()));
  });
}

// --- losses ---

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const Dims& s = logits.shape();
  if (s.size() != 2 && s.size() != 4) {
    throw ShapeMismatch("cross_entropy", "logits must be (B,K) or (B,K,H,W)");
  }
  const std::size_t batch = s[0], classes = s[1];
  const std::size_t spatial = s.size() == 4 ? s[2] * s[3] : 1;
  const std::size_t count = batch * spatial;
  if (labels.size() != count) {
    throw ShapeMismatch("cross_entropy", std::to_string(labels.size()) + " labels for " +
                                             std::to_string(count) + " positions");
  }
  // probs laid out like logits.
  auto probs = std::make_shared<Tensor>(s);
  double loss = 0.0;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t p = 0; p < spatial; ++p) {
      const int label = labels[n * spatial + p];
      if (label < 0 || static_cast<std::size_t>(label) >= classes) {
        throw LabelOutOfRange("label " + std::to_string(label) + " outside [0, " +
                              std::to_string(classes) + ")");
      }
      auto at = [&](std::size_t k) { return (n * classes + k) * spatial + p; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < classes; ++k) mx = std::max(mx, logits.value()[at(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < classes; ++k) z += std::exp(logits.value()[at(k)] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t k = 0; k < classes; ++k) (*probs)[at(k)] = std::exp(logits.value()[at(k)] - lz);
      loss += lz - logits.value()[at(static_cast<std::size_t>(label))];
    }
  std::vector<int> owned(labels.begin(), labels.end());
  const double inv = 1.0 / static_cast<double>(count);
  return make(Tensor::scalar(loss * inv), {logits}, "cross_entropy",
              [=, owned = std::move(owned)](Node& self) {
                Tensor g = *probs;
                for (std::size_t n = 0; n < batch; ++n)
                  for (std::size_t p = 0; p < spatial; ++p) {
                    const auto label = static_cast<std::size_t>(owned[n * spatial + p]);
                    g[(n * classes + label) * spatial + p] -= 1.0;
                  }
                g.scale_(self.grad[0] * inv);
                self.inputs[0]->accumulate(g);
              });
}

Var l1_loss(const Var& pred, const Tensor& target) {
  if (pred.value().size() != target.size()) {
    throw ShapeMismatch("l1_loss", to_string(pred.shape()) + " vs " + to_string(target.shape()));
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) loss += std::abs(pred.value()[i] - target[i]);
  const double inv = 1.0 / static_cast<double>(target.size());
  return make(Tensor::scalar(loss * inv), {pred}, "l1_loss", [target, inv](Node& self) {
    const Tensor& p = self.inputs[0]->value;
    Tensor g(p.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double d = p[i] - target[i];
      g[i] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * inv * self.grad[0];
    }
    self.inputs[0]->accumulate(g);
  });
}

Var cosine_inverse_loss(const Var& pred, const Tensor& target) {
  const Dims& s = pred.shape();
  if (s != target.shape() || s.size() < 2) {
    throw ShapeMismatch("cosine_inverse_loss", to_string(s) + " vs " + to_string(target.shape()));
  }
  const std::size_t batch = s[0], dim = s[1];
  const std::size_t spatial = pred.value().size() / (batch * dim);
  const std::size_t count = batch * spatial;
  constexpr double kNormFloor = 1e-12;
  auto at = [=](std::size_t n, std::size_t d, std::size_t p) { return (n * dim + d) * spatial + p; };
  double loss = 0.0;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t p = 0; p < spatial; ++p) {
      double dot = 0.0, pp = 0.0, tt = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double a = pred.value()[at(n, d, p)], b = target[at(n, d, p)];
        dot += a * b;
        pp += a * a;
        tt += b * b;
      }
      const double denom = std::max(std::sqrt(pp) * std::sqrt(tt), kNormFloor);
      loss += 1.0 - dot / denom;
    }
  const double inv = 1.0 / static_cast<double>(count);
  return make(Tensor::scalar(loss * inv), {pred}, "cosine_inverse_loss",
              [=](Node& self) {
                const Tensor& pv = self.inputs[0]->value;
                Tensor g(pv.shape());
                for (std::size_t n = 0; n < batch; ++n)
                  for (std::size_t p = 0; p < spatial; ++p) {
                    double dot = 0.0, pp = 0.0, tt = 0.0;
                    for (std::size_t d = 0; d < dim; ++d) {
                      const double a = pv[at(n, d, p)], b = target[at(n, d, p)];
                      dot += a * b;
                      pp += a * a;
                      tt += b * b;
                    }
                    const double np = std::max(std::sqrt(pp), kNormFloor);
                    const double nt = std::max(std::sqrt(tt), kNormFloor);
                    const double cos = dot / (np * nt);
                    for (std::size_t d = 0; d < dim; ++d) {
                      const double dcos = target[at(n, d, p)] / (np * nt) - cos * pv[at(n, d, p)] / (np * np);
                      g[at(n, d, p)] = -dcos * inv * self.grad[0];
                    }
                  }
                self.inputs[0]->accumulate(g);
              });
}

}  // namespace mtlc::ag
