#include "ranp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "ranp/errors.hpp"

namespace ranp::ad {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::conv3d: return "conv3d";
    case OpKind::relu: return "relu";
    case OpKind::maxpool3d: return "maxpool3d";
    case OpKind::upsample_nearest3d: return "upsample_nearest3d";
    case OpKind::concat_channels: return "concat_channels";
    case OpKind::linear: return "linear";
    case OpKind::softmax: return "softmax";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::scale_channels: return "scale_channels";
    case OpKind::reshape: return "reshape";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
  }
  return "?";
}

Tensor& Node::ensure_grad() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var Var::constant(Tensor value) {
  Var v;
  v.node_ = std::make_shared<Node>();
  v.node_->value = std::move(value);
  return v;
}

Var Var::parameter(Tensor value) {
  Var v = constant(std::move(value));
  v.node_->requires_grad = true;
  return v;
}

const Tensor& Var::grad() const {
  return node_->ensure_grad();
}

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

Var make_op(OpKind op, Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  Var out;
  out.node_ = std::make_shared<Node>();
  out.node_->op = op;
  out.node_->value = std::move(value);
  bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
  if (needs) {
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (auto& v : inputs) out.node_->inputs.push_back(v.node());
    out.node_->backward_fn = std::move(backward_fn);
  }
  return out;
}

void backward(const Var& loss) {
  if (!loss) throw ContractError("backward on an empty Var");
  if (loss.value().size() != 1)
    throw ContractError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* node : order)
    if (!node->is_leaf() && !node->grad.empty()) node->grad.fill(0.0);
  loss.node()->ensure_grad()[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->is_leaf() && node->backward_fn) node->backward_fn(*node);
  }
}

long window_extent(long extent, long kernel, long stride, long padding) {
  long span = extent + 2 * padding - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

namespace {

void require_rank(const Var& v, std::size_t rank, const char* op, const char* what) {
  if (v.value().rank() != rank)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     to_string(v.shape()));
}

// Cubic-stride conv geometry plus the valid output range along W for each
// kernel column, so the innermost loop never branches.
struct ConvGeom {
  std::size_t n, cin, d, h, w;
  std::size_t cout, kd, kh, kw;
  long stride, pad;
  std::size_t od, oh, ow;
  std::vector<long> ow_lo, ow_hi;  // inclusive; lo > hi means empty

  void plan_columns() {
    ow_lo.resize(kw);
    ow_hi.resize(kw);
    for (std::size_t c = 0; c < kw; ++c) {
      long first = pad - static_cast<long>(c);
      long lo = first <= 0 ? 0 : (first + stride - 1) / stride;
      long last = static_cast<long>(w) - 1 + pad - static_cast<long>(c);
      long hi = last < 0 ? -1 : std::min<long>(static_cast<long>(ow) - 1, last / stride);
      ow_lo[c] = lo;
      ow_hi[c] = hi;
    }
  }
};

// Visits every (output row, input row) pair that a kernel tap touches. The
// callback receives base offsets into the input and output volumes and the tap
// column; it is responsible for the W loop.
template <typename F>
void for_each_conv_row(const ConvGeom& g, std::size_t n, std::size_t co, std::size_t ci, F&& f) {
  const std::size_t in_plane = g.h * g.w;
  const std::size_t out_plane = g.oh * g.ow;
  const std::size_t in_base = (n * g.cin + ci) * g.d * in_plane;
  const std::size_t out_base = (n * g.cout + co) * g.od * out_plane;
  for (std::size_t a = 0; a < g.kd; ++a) {
    for (std::size_t b = 0; b < g.kh; ++b) {
      for (std::size_t c = 0; c < g.kw; ++c) {
        for (std::size_t z = 0; z < g.od; ++z) {
          long iz = static_cast<long>(z) * g.stride + static_cast<long>(a) - g.pad;
          if (iz < 0 || iz >= static_cast<long>(g.d)) continue;
          for (std::size_t y = 0; y < g.oh; ++y) {
            long iy = static_cast<long>(y) * g.stride + static_cast<long>(b) - g.pad;
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            f(a, b, c, in_base + static_cast<std::size_t>(iz) * in_plane + static_cast<std::size_t>(iy) * g.w,
              out_base + z * out_plane + y * g.ow);
          }
        }
      }
    }
  }
}

}  // namespace

Var conv3d(const Var& input, const Var& weight, const Var& bias, int stride, int padding) {
  require_rank(input, 5, "conv3d", "input");
  require_rank(weight, 5, "conv3d", "weight");
  if (stride < 1) throw ConfigError("conv3d: stride must be positive, got " + std::to_string(stride));
  if (padding < 0) throw ConfigError("conv3d: padding must be non-negative, got " + std::to_string(padding));
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (xs[1] != ws[1])
    throw ShapeError("conv3d: input has " + std::to_string(xs[1]) + " channels but weight expects " +
                     std::to_string(ws[1]) + " (input " + to_string(xs) + ", weight " + to_string(ws) + ")");
  if (bias && (bias.value().rank() != 1 || bias.shape()[0] != ws[0]))
    throw ShapeError("conv3d: bias shape " + to_string(bias.shape()) + " does not match " + std::to_string(ws[0]) +
                     " output channels");

  ConvGeom g{xs[0], xs[1], xs[2], xs[3], xs[4], ws[0], ws[2], ws[3], ws[4], stride, padding, 0, 0, 0, {}, {}};
  long od = window_extent(static_cast<long>(g.d), static_cast<long>(g.kd), stride, padding);
  long oh = window_extent(static_cast<long>(g.h), static_cast<long>(g.kh), stride, padding);
  long ow = window_extent(static_cast<long>(g.w), static_cast<long>(g.kw), stride, padding);
  if (od < 1 || oh < 1 || ow < 1)
    throw ConfigError("conv3d: kernel " + to_string({g.kd, g.kh, g.kw}) + " with stride " + std::to_string(stride) +
                      " and padding " + std::to_string(padding) + " does not fit input " + to_string(xs));
  g.od = static_cast<std::size_t>(od);
  g.oh = static_cast<std::size_t>(oh);
  g.ow = static_cast<std::size_t>(ow);
  g.plan_columns();

  Tensor out({g.n, g.cout, g.od, g.oh, g.ow}, 0.0);
  const double* x = input.value().data().data();
  const double* w = weight.value().data().data();
  double* y = out.data().data();
  const std::size_t out_vol = g.od * g.oh * g.ow;
  const std::size_t taps = g.kd * g.kh * g.kw;

  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t co = 0; co < g.cout; ++co) {
      if (bias) std::fill_n(y + (n * g.cout + co) * out_vol, out_vol, bias.value()[co]);
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const double* wk = w + (co * g.cin + ci) * taps;
        for_each_conv_row(g, n, co, ci, [&](std::size_t a, std::size_t b, std::size_t c, std::size_t in_row,
                                            std::size_t out_row) {
          const double wv = wk[(a * g.kh + b) * g.kw + c];
          const long shift = static_cast<long>(c) - g.pad;
          double* dst = y + out_row;
          const double* src = x + in_row;
          if (g.stride == 1) {
            const long lo = g.ow_lo[c], len = g.ow_hi[c] - lo + 1;
            if (len > 0) {
              const double* s1 = src + (lo + shift);
              double* d1 = dst + lo;
              for (long q = 0; q < len; ++q) d1[q] += wv * s1[q];
            }
          } else {
            for (long q = g.ow_lo[c]; q <= g.ow_hi[c]; ++q) dst[q] += wv * src[q * g.stride + shift];
          }
        });
      }
    }
  }

  std::vector<Var> inputs{input, weight};
  if (bias) inputs.push_back(bias);
  const bool has_bias = static_cast<bool>(bias);
  return make_op(OpKind::conv3d, std::move(out), std::move(inputs), [g, has_bias, taps, out_vol](Node& self) {
    Node& xn = *self.inputs[0];
    Node& wn = *self.inputs[1];
    const double* gy = self.grad.data().data();
    const double* x = xn.value.data().data();
    const double* w = wn.value.data().data();
    double* gx = xn.requires_grad ? xn.ensure_grad().data().data() : nullptr;
    double* gw = wn.requires_grad ? wn.ensure_grad().data().data() : nullptr;
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t co = 0; co < g.cout; ++co) {
        for (std::size_t ci = 0; ci < g.cin; ++ci) {
          const double* wk = w + (co * g.cin + ci) * taps;
          double* gwk = gw ? gw + (co * g.cin + ci) * taps : nullptr;
          for_each_conv_row(g, n, co, ci, [&](std::size_t a, std::size_t b, std::size_t c, std::size_t in_row,
                                              std::size_t out_row) {
            const std::size_t tap = (a * g.kh + b) * g.kw + c;
            const long shift = static_cast<long>(c) - g.pad;
            const double* dy = gy + out_row;
            if (gx) {
              const double wv = wk[tap];
              double* dx = gx + in_row;
              if (g.stride == 1) {
                const long lo = g.ow_lo[c], len = g.ow_hi[c] - lo + 1;
                if (len > 0) {
                  double* d1 = dx + (lo + shift);
                  const double* e1 = dy + lo;
                  for (long q = 0; q < len; ++q) d1[q] += wv * e1[q];
                }
              } else {
                for (long q = g.ow_lo[c]; q <= g.ow_hi[c]; ++q) dx[q * g.stride + shift] += wv * dy[q];
              }
            }
            if (gwk) {
              const double* src = x + in_row;
              double acc = 0.0;
              if (g.stride == 1) {
                const long lo = g.ow_lo[c], len = g.ow_hi[c] - lo + 1;
                if (len > 0) {
                  const double* s1 = src + (lo + shift);
                  const double* e1 = dy + lo;
                  for (long q = 0; q < len; ++q) acc += e1[q] * s1[q];
                }
              } else {
                for (long q = g.ow_lo[c]; q <= g.ow_hi[c]; ++q) acc += dy[q] * src[q * g.stride + shift];
              }
              gwk[tap] += acc;
            }
          });
        }
      }
    }
    if (has_bias && self.inputs[2]->requires_grad) {
      double* gb = self.inputs[2]->ensure_grad().data().data();
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t co = 0; co < g.cout; ++co) {
          const double* dy = gy + (n * g.cout + co) * out_vol;
          double acc = 0.0;
          for (std::size_t i = 0; i < out_vol; ++i) acc += dy[i];
          gb[co] += acc;
        }
    }
  });
}

Var relu(const Var& input) {
  Tensor out = input.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return make_op(OpKind::relu, std::move(out), {input}, [](Node& self) {
    Node& xn = *self.inputs[0];
    auto gx = xn.ensure_grad().data();
    auto x = xn.value.data();
    auto gy = self.grad.data();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (x[i] > 0.0) gx[i] += gy[i];
  });
}

Var maxpool3d(const Var& input, int window, int stride) {
  require_rank(input, 5, "maxpool3d", "input");
  if (window < 1 || stride < 1) throw ConfigError("maxpool3d: window and stride must be positive");
  const Shape& xs = input.shape();
  long od = window_extent(static_cast<long>(xs[2]), window, stride, 0);
  long oh = window_extent(static_cast<long>(xs[3]), window, stride, 0);
  long ow = window_extent(static_cast<long>(xs[4]), window, stride, 0);
  if (od < 1 || oh < 1 || ow < 1)
    throw ConfigError("maxpool3d: window " + std::to_string(window) + " does not fit input " + to_string(xs));
  Shape os{xs[0], xs[1], static_cast<std::size_t>(od), static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)};
  Tensor out(os, 0.0);
  std::vector<std::size_t> argmax(out.size());
  const auto& x = input.value();
  const std::size_t planes = xs[0] * xs[1];
  std::size_t o = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * xs[2] * xs[3] * xs[4];
    for (std::size_t z = 0; z < os[2]; ++z)
      for (std::size_t y = 0; y < os[3]; ++y)
        for (std::size_t w = 0; w < os[4]; ++w, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_at = 0;
          bool found = false;
          for (int a = 0; a < window; ++a)
            for (int b = 0; b < window; ++b)
              for (int c = 0; c < window; ++c) {
                std::size_t at = base + ((z * stride + a) * xs[3] + (y * stride + b)) * xs[4] + (w * stride + c);
                if (!found || x[at] > best) {
                  best = x[at];
                  best_at = at;
                  found = true;
                }
              }
          out[o] = best;
          argmax[o] = best_at;
        }
  }
  return make_op(OpKind::maxpool3d, std::move(out), {input}, [argmax = std::move(argmax)](Node& self) {
    auto gx = self.inputs[0]->ensure_grad().data();
    auto gy = self.grad.data();
    for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i]] += gy[i];
  });
}

Var upsample_nearest3d(const Var& input, int factor) {
  require_rank(input, 5, "upsample_nearest3d", "input");
  if (factor < 1) throw ConfigError("upsample_nearest3d: factor must be positive");
  const Shape& xs = input.shape();
  const std::size_t f = static_cast<std::size_t>(factor);
  Shape os{xs[0], xs[1], xs[2] * f, xs[3] * f, xs[4] * f};
  Tensor out(os, 0.0);
  const auto& x = input.value();
  const std::size_t planes = xs[0] * xs[1];
  // Source index of every output cell; reused by backward.
  std::vector<std::size_t> source(out.size());
  std::size_t o = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * xs[2] * xs[3] * xs[4];
    for (std::size_t z = 0; z < os[2]; ++z)
      for (std::size_t y = 0; y < os[3]; ++y)
        for (std::size_t w = 0; w < os[4]; ++w, ++o) {
          source[o] = base + ((z / f) * xs[3] + y / f) * xs[4] + w / f;
          out[o] = x[source[o]];
        }
  }
  return make_op(OpKind::upsample_nearest3d, std::move(out), {input}, [source = std::move(source)](Node& self) {
    auto gx = self.inputs[0]->ensure_grad().data();
    auto gy = self.grad.data();
    for (std::size_t i = 0; i < gy.size(); ++i) gx[source[i]] += gy[i];
  });
}

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  const Shape& first = parts[0].shape();
  if (first.size() < 2) throw ShapeError("concat_channels: inputs need a channel axis");
  std::size_t channels = 0;
  for (const Var& part : parts) {
    const Shape& s = part.shape();
    bool same = s.size() == first.size() && s[0] == first[0] && std::equal(s.begin() + 2, s.end(), first.begin() + 2);
    if (!same)
      throw ShapeError("concat_channels: " + to_string(s) + " is incompatible with " + to_string(first) +
                       " (all extents except channels must match)");
    channels += s[1];
  }
  Shape os = first;
  os[1] = channels;
  const std::size_t batch = first[0];
  const std::size_t inner = numel(Shape(first.begin() + 2, first.end()));
  Tensor out(os, 0.0);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var& part : parts) {
    offsets.push_back(offset);
    const std::size_t c = part.shape()[1];
    for (std::size_t n = 0; n < batch; ++n)
      std::copy_n(part.value().data().data() + n * c * inner, c * inner,
                  out.data().data() + (n * channels + offset) * inner);
    offset += c;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_op(OpKind::concat_channels, std::move(out), std::move(inputs),
                 [offsets, batch, inner, channels](Node& self) {
                   const double* gy = self.grad.data().data();
                   for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                     Node& part = *self.inputs[k];
                     if (!part.requires_grad) continue;
                     const std::size_t c = part.value.shape()[1];
                     double* gx = part.ensure_grad().data().data();
                     for (std::size_t n = 0; n < batch; ++n) {
                       const double* src = gy + (n * channels + offsets[k]) * inner;
                       double* dst = gx + n * c * inner;
                       for (std::size_t i = 0; i < c * inner; ++i) dst[i] += src[i];
                     }
                   }
                 });
}

Var concat_channels(const Var& a, const Var& b) {
  const Var parts[] = {a, b};
  return concat_channels(std::span<const Var>(parts));
}

Var linear(const Var& input, const Var& weight, const Var& bias) {
  require_rank(input, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const std::size_t batch = input.shape()[0];
  const std::size_t in = input.shape()[1];
  const std::size_t out_features = weight.shape()[0];
  if (weight.shape()[1] != in)
    throw ShapeError("linear: input has " + std::to_string(in) + " features but weight expects " +
                     std::to_string(weight.shape()[1]));
  if (bias && (bias.value().rank() != 1 || bias.shape()[0] != out_features))
    throw ShapeError("linear: bias shape " + to_string(bias.shape()) + " does not match " +
                     std::to_string(out_features) + " outputs");
  Tensor out({batch, out_features}, 0.0);
  const auto& x = input.value();
  const auto& w = weight.value();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < out_features; ++o) {
      double acc = bias ? bias.value()[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += w[o * in + i] * x[n * in + i];
      out[n * out_features + o] = acc;
    }
  std::vector<Var> inputs{input, weight};
  if (bias) inputs.push_back(bias);
  return make_op(OpKind::linear, std::move(out), std::move(inputs), [batch, in, out_features](Node& self) {
    Node& xn = *self.inputs[0];
    Node& wn = *self.inputs[1];
    const auto& gy = self.grad;
    if (xn.requires_grad) {
      auto& gx = xn.ensure_grad();
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t o = 0; o < out_features; ++o)
          for (std::size_t i = 0; i < in; ++i) gx[n * in + i] += gy[n * out_features + o] * wn.value[o * in + i];
    }
    if (wn.requires_grad) {
      auto& gw = wn.ensure_grad();
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t o = 0; o < out_features; ++o)
          for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += gy[n * out_features + o] * xn.value[n * in + i];
    }
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->ensure_grad();
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t o = 0; o < out_features; ++o) gb[o] += gy[n * out_features + o];
    }
  });
}

namespace {

struct AxisSplit {
  std::size_t outer, length, inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Numerically stable softmax along one axis; writes into `out`.
void softmax_into(const Tensor& x, Tensor& out, const AxisSplit& s) {
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.length * s.inner + i;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.length; ++k) peak = std::max(peak, x[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.length; ++k) {
        double e = std::exp(x[base + k * s.inner] - peak);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.length; ++k) out[base + k * s.inner] /= total;
    }
}

}  // namespace

Var softmax(const Var& input, std::size_t axis) {
  const AxisSplit s = split_at(input.shape(), axis);
  Tensor out(input.shape(), 0.0);
  softmax_into(input.value(), out, s);
  return make_op(OpKind::softmax, std::move(out), {input}, [s](Node& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    const auto& y = self.value;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.length * s.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.length; ++k) dot += gy[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.length; ++k) {
          const std::size_t at = base + k * s.inner;
          gx[at] += y[at] * (gy[at] - dot);
        }
      }
  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  if (logits.value().rank() < 2) throw ShapeError("cross_entropy: logits need [N, C, ...]");
  const AxisSplit s = split_at(logits.shape(), 1);
  if (targets.size() != s.outer * s.inner)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     to_string(logits.shape()));
  Tensor probs(logits.shape(), 0.0);
  softmax_into(logits.value(), probs, s);
  const auto& x = logits.value();
  double total = 0.0;
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const int t = targets[o * s.inner + i];
      if (t < 0 || static_cast<std::size_t>(t) >= s.length)
        throw ContractError("cross_entropy: class index " + std::to_string(t) + " outside [0, " +
                            std::to_string(s.length) + ")");
      const std::size_t base = o * s.length * s.inner + i;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.length; ++k) peak = std::max(peak, x[base + k * s.inner]);
      double lse = 0.0;
      for (std::size_t k = 0; k < s.length; ++k) lse += std::exp(x[base + k * s.inner] - peak);
      total += peak + std::log(lse) - x[base + static_cast<std::size_t>(t) * s.inner];
    }
  const double count = static_cast<double>(s.outer * s.inner);
  std::vector<int> labels(targets.begin(), targets.end());
  return make_op(OpKind::cross_entropy, Tensor::scalar(total / count), {logits},
                 [s, count, probs = std::move(probs), labels = std::move(labels)](Node& self) {
                   auto& gx = self.inputs[0]->ensure_grad();
                   const double g = self.grad[0] / count;
                   for (std::size_t o = 0; o < s.outer; ++o)
                     for (std::size_t i = 0; i < s.inner; ++i) {
                       const std::size_t base = o * s.length * s.inner + i;
                       const std::size_t t = static_cast<std::size_t>(labels[o * s.inner + i]);
                       for (std::size_t k = 0; k < s.length; ++k) {
                         const std::size_t at = base + k * s.inner;
                         gx[at] += g * (probs[at] - (k == t ? 1.0 : 0.0));
                       }
                     }
                 });
}

Var scale_channels(const Var& input, const Var& scales) {
  if (input.value().rank() < 2) throw ShapeError("scale_channels: input needs a channel axis");
  const AxisSplit s = split_at(input.shape(), 1);
  if (scales.value().rank() != 1 || scales.shape()[0] != s.length)
    throw ShapeError("scale_channels: " + to_string(scales.shape()) + " scales for " + std::to_string(s.length) +
                     " channels");
  Tensor out = input.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.length; ++c) {
      const double k = scales.value()[c];
      double* row = out.data().data() + (o * s.length + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) row[i] *= k;
    }
  return make_op(OpKind::scale_channels, std::move(out), {input, scales}, [s](Node& self) {
    Node& xn = *self.inputs[0];
    Node& cn = *self.inputs[1];
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t c = 0; c < s.length; ++c) {
        const std::size_t base = (o * s.length + c) * s.inner;
        if (xn.requires_grad) {
          auto& gx = xn.ensure_grad();
          const double k = cn.value[c];
          for (std::size_t i = 0; i < s.inner; ++i) gx[base + i] += gy[base + i] * k;
        }
        if (cn.requires_grad) {
          double acc = 0.0;
          for (std::size_t i = 0; i < s.inner; ++i) acc += gy[base + i] * xn.value[base + i];
          cn.ensure_grad()[c] += acc;
        }
      }
  });
}

Var reshape(const Var& input, Shape shape) {
  Tensor out = input.value().reshaped(std::move(shape));
  return make_op(OpKind::reshape, std::move(out), {input}, [](Node& self) {
    auto gx = self.inputs[0]->ensure_grad().data();
    auto gy = self.grad.data();
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " differ");
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op(OpKind::add, std::move(out), {a, b}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto gx = in->ensure_grad().data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op(OpKind::mul, std::move(out), {a, b}, [](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    if (an.requires_grad) {
      auto& ga = an.ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      auto& gb = bn.ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * an.value[i];
    }
  });
}

Var scale(const Var& input, double factor) {
  Tensor out = input.value();
  for (double& v : out.data()) v *= factor;
  return make_op(OpKind::scale, std::move(out), {input}, [factor](Node& self) {
    auto gx = self.inputs[0]->ensure_grad().data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * factor;
  });
}

Var sum(const Var& input) {
  double total = 0.0;
  for (double v : input.value().data()) total += v;
  return make_op(OpKind::sum, Tensor::scalar(total), {input}, [](Node& self) {
    auto gx = self.inputs[0]->ensure_grad().data();
    const double g = self.grad[0];
    for (double& v : gx) v += g;
  });
}

Var mean(const Var& input) {
  const double count = static_cast<double>(input.value().size());
  return scale(sum(input), 1.0 / count);
}

}  // namespace ranp::ad
