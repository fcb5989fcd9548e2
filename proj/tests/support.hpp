#pragma once

// Oracles and random generators shared by the unit tests and the acceptance
// binary. Everything here is written independently of the library code it
// checks: plain loops, no shared helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ranp/autodiff.hpp"
#include "ranp/netgraph.hpp"
#include "ranp/tensor.hpp"

namespace testing_support {

using ranp::Shape;
using ranp::Tensor;
namespace ad = ranp::ad;

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double lo = -1.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(gen_); }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape, 0.0);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Seven nested loops over (n, co, z, y, x, ci, taps) with explicit bounds checks.
inline Tensor naive_conv3d(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad) {
  const long N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const long O = w.dim(0), KD = w.dim(2), KH = w.dim(3), KW = w.dim(4);
  const long OD = (D + 2 * pad - KD) / stride + 1;
  const long OH = (H + 2 * pad - KH) / stride + 1;
  const long OW = (W + 2 * pad - KW) / stride + 1;
  Tensor y({static_cast<size_t>(N), static_cast<size_t>(O), static_cast<size_t>(OD), static_cast<size_t>(OH),
            static_cast<size_t>(OW)},
           0.0);
  auto xat = [&](long n, long c, long z, long yy, long xx) { return x[(((n * C + c) * D + z) * H + yy) * W + xx]; };
  auto wat = [&](long o, long c, long a, long bb, long cc) { return w[(((o * C + c) * KD + a) * KH + bb) * KW + cc]; };
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o)
      for (long z = 0; z < OD; ++z)
        for (long yy = 0; yy < OH; ++yy)
          for (long xx = 0; xx < OW; ++xx) {
            double acc = b ? (*b)[o] : 0.0;
            for (long c = 0; c < C; ++c)
              for (long a = 0; a < KD; ++a)
                for (long bb = 0; bb < KH; ++bb)
                  for (long cc = 0; cc < KW; ++cc) {
                    const long iz = z * stride + a - pad, iy = yy * stride + bb - pad, ix = xx * stride + cc - pad;
                    if (iz < 0 || iz >= D || iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                    acc += wat(o, c, a, bb, cc) * xat(n, c, iz, iy, ix);
                  }
            y[(((n * O + o) * OD + z) * OH + yy) * OW + xx] = acc;
          }
  return y;
}

// Norm-wise relative error ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

// Central-difference gradient check of a scalar function of several inputs.
// Returns the worst norm-wise relative error over the inputs.
inline double gradient_check(const std::function<ad::Var(const std::vector<ad::Var>&)>& f,
                             const std::vector<Tensor>& inputs, double h = 1e-6) {
  std::vector<ad::Var> vars;
  for (const auto& t : inputs) vars.push_back(ad::Var::parameter(t));
  ad::Var loss = f(vars);
  ad::backward(loss);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor numeric(inputs[k].shape(), 0.0);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      std::vector<ad::Var> plus, minus;
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        Tensor p = inputs[j], m = inputs[j];
        if (j == k) {
          p[i] += h;
          m[i] -= h;
        }
        plus.push_back(ad::Var::constant(p));
        minus.push_back(ad::Var::constant(m));
      }
      numeric[i] = (f(plus).value().item() - f(minus).value().item()) / (2.0 * h);
    }
    worst = std::max(worst, relative_error(vars[k].grad(), numeric));
  }
  return worst;
}

struct FdResult {
  std::string op;
  double error = 0.0;
};

// Randomised finite-difference checks for every differentiable operator,
// `per_op` configurations each.
inline std::vector<FdResult> finite_difference_sweep(int per_op, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<FdResult> out;
  auto sz = [&](int lo, int hi) { return static_cast<std::size_t>(rng.integer(lo, hi)); };
  // Random linear functional of the output.
  auto probe = [](const ad::Var& y, std::uint64_t s) {
    Rng r(s);
    return ad::sum(ad::mul(y, ad::Var::constant(random_tensor(y.shape(), r))));
  };
  for (int t = 0; t < per_op; ++t) {
    const std::uint64_t ps = rng.engine()();
    {
      const int k = rng.integer(1, 3), stride = rng.integer(1, 2), pad = rng.integer(0, 1);
      const std::size_t ci = sz(1, 2), co = sz(1, 3), kk = static_cast<std::size_t>(k);
      Shape xs{sz(1, 2), ci, sz(k, 4), sz(k, 4), sz(k, 4)};
      const bool bias = rng.coin();
      std::vector<Tensor> in{random_tensor(xs, rng), random_tensor({co, ci, kk, kk, kk}, rng)};
      if (bias) in.push_back(random_tensor({co}, rng));
      out.push_back({"conv3d", gradient_check(
                                   [&](const std::vector<ad::Var>& v) {
                                     return probe(ad::conv3d(v[0], v[1], bias ? v[2] : ad::Var{}, stride, pad), ps);
                                   },
                                   in)});
    }
    {
      // Keep entries away from the kink so the central difference is valid.
      Tensor x = random_tensor({sz(1, 3), sz(1, 4), sz(1, 4)}, rng);
      for (double& v : x.data())
        if (std::abs(v) < 1e-3) v = 0.5;
      out.push_back({"relu", gradient_check([&](const auto& v) { return probe(ad::relu(v[0]), ps); }, {x})});
    }
    {
      const int window = rng.integer(1, 3), stride = rng.integer(1, 2);
      Shape xs{sz(1, 2), sz(1, 2), sz(window, 5), sz(window, 5), sz(window, 5)};
      out.push_back({"maxpool3d", gradient_check([&](const auto& v) { return probe(ad::maxpool3d(v[0], window, stride), ps); },
                                                 {random_tensor(xs, rng)})});
    }
    {
      const int factor = rng.integer(1, 3);
      out.push_back({"upsample_nearest3d",
                     gradient_check([&](const auto& v) { return probe(ad::upsample_nearest3d(v[0], factor), ps); },
                                    {random_tensor({sz(1, 2), sz(1, 2), sz(1, 3), sz(1, 3), sz(1, 3)}, rng)})});
    }
    {
      const std::size_t n = sz(1, 2), d = sz(1, 3), h = sz(1, 3), w = sz(1, 3);
      std::vector<Tensor> in;
      const int parts = rng.integer(2, 3);
      for (int p = 0; p < parts; ++p) in.push_back(random_tensor({n, sz(1, 3), d, h, w}, rng));
      out.push_back({"concat_channels",
                     gradient_check([&](const auto& v) { return probe(ad::concat_channels(std::span<const ad::Var>(v)), ps); },
                                    in)});
    }
    {
      const std::size_t n = sz(1, 3), fin = sz(1, 5), fout = sz(1, 4);
      const bool bias = rng.coin();
      std::vector<Tensor> in{random_tensor({n, fin}, rng), random_tensor({fout, fin}, rng)};
      if (bias) in.push_back(random_tensor({fout}, rng));
      out.push_back({"linear", gradient_check(
                                   [&](const auto& v) { return probe(ad::linear(v[0], v[1], bias ? v[2] : ad::Var{}), ps); },
                                   in)});
    }
    {
      Shape xs{sz(1, 3), sz(2, 4), sz(1, 3)};
      const std::size_t axis = sz(0, 2);
      out.push_back({"softmax", gradient_check([&](const auto& v) { return probe(ad::softmax(v[0], axis), ps); },
                                               {random_tensor(xs, rng, -3, 3)})});
    }
    {
      const std::size_t n = sz(1, 2), c = sz(2, 4);
      Shape xs{n, c, sz(1, 3), sz(1, 2), sz(1, 2)};
      std::vector<int> targets(n * xs[2] * xs[3] * xs[4]);
      for (int& v : targets) v = rng.integer(0, static_cast<int>(c) - 1);
      out.push_back({"cross_entropy", gradient_check([&](const auto& v) { return ad::cross_entropy(v[0], targets); },
                                                     {random_tensor(xs, rng, -3, 3)})});
    }
    {
      const std::size_t c = sz(1, 4);
      out.push_back({"scale_channels",
                     gradient_check([&](const auto& v) { return probe(ad::scale_channels(v[0], v[1]), ps); },
                                    {random_tensor({sz(1, 2), c, sz(1, 3), sz(1, 3), sz(1, 3)}, rng), random_tensor({c}, rng)})});
    }
    {
      Tensor x = random_tensor({sz(1, 3), sz(1, 4), 2}, rng);
      Shape to{x.size() / 2, 2};
      out.push_back({"reshape", gradient_check([&](const auto& v) { return probe(ad::reshape(v[0], to), ps); }, {x})});
    }
    {
      Shape xs{sz(1, 3), sz(1, 4)};
      std::vector<Tensor> in{random_tensor(xs, rng), random_tensor(xs, rng)};
      out.push_back({"add", gradient_check([&](const auto& v) { return probe(ad::add(v[0], v[1]), ps); }, in)});
      out.push_back({"mul", gradient_check([&](const auto& v) { return probe(ad::mul(v[0], v[1]), ps); }, in)});
    }
    {
      const double f = rng.uniform(-2, 2);
      Tensor x = random_tensor({sz(1, 3), sz(1, 4)}, rng);
      out.push_back({"scale", gradient_check([&](const auto& v) { return probe(ad::scale(v[0], f), ps); }, {x})});
      out.push_back({"sum", gradient_check([&](const auto& v) { return ad::scale(ad::sum(v[0]), 1.7); }, {x})});
      out.push_back({"mean", gradient_check([&](const auto& v) { return ad::scale(ad::mean(v[0]), 1.3); }, {x})});
    }
  }
  return out;
}

// Random ReLU network: a conv/relu chain with optional pooling, an optional
// upsample + skip concat, and a protected 1x1 head.
inline ranp::NetSpec random_relu_net(Rng& rng, bool allow_skip = true) {
  using ranp::LayerKind;
  using ranp::LayerSpec;
  ranp::NetSpec spec;
  const int extent = 2 * rng.integer(2, 3);
  spec.input_shape = {rng.integer(1, 2), extent, extent, extent};
  spec.class_count = rng.integer(2, 3);
  auto conv = [&](std::string id, std::string from, int out, int k) {
    LayerSpec l;
    l.id = std::move(id);
    l.kind = LayerKind::conv3d;
    l.out_channels = out;
    l.kernel = {k, k, k};
    l.padding = k / 2;
    l.bias = rng.coin(0.8);
    l.inputs = {std::move(from)};
    spec.layers.push_back(l);
  };
  auto simple = [&](std::string id, LayerKind kind, std::vector<std::string> from) {
    LayerSpec l;
    l.id = std::move(id);
    l.kind = kind;
    l.inputs = std::move(from);
    if (kind == LayerKind::maxpool) {
      l.kernel = {2, 2, 2};
      l.stride = 2;
    }
    spec.layers.push_back(l);
  };
  conv("c0", "input", rng.integer(2, 4), rng.coin() ? 3 : 1);
  simple("r0", LayerKind::relu, {"c0"});
  std::string last = "r0";
  const bool skip = allow_skip && rng.coin();
  if (skip) {
    simple("p0", LayerKind::maxpool, {"r0"});
    conv("c1", "p0", rng.integer(2, 4), 3);
    simple("r1", LayerKind::relu, {"c1"});
    LayerSpec up;
    up.id = "u1";
    up.kind = LayerKind::upsample;
    up.factor = 2;
    up.inputs = {"r1"};
    spec.layers.push_back(up);
    simple("cat", LayerKind::concat, {"u1", "r0"});
    last = "cat";
  }
  const int extra = rng.integer(0, 2);
  for (int i = 0; i < extra; ++i) {
    const std::string c = "m" + std::to_string(i), r = "mr" + std::to_string(i);
    conv(c, last, rng.integer(2, 4), rng.coin() ? 3 : 1);
    simple(r, LayerKind::relu, {c});
    last = r;
  }
  conv("head", last, spec.class_count, 1);
  spec.layers.back().is_protected = true;
  simple("scores", LayerKind::softmax_head, {"head"});
  ranp::infer_shapes(spec);
  return spec;
}

// Parameters with nonzero biases so bias terms take part in every identity.
inline ranp::ParamSet random_params(const ranp::NetSpec& spec, Rng& rng) {
  ranp::ParamSet params = ranp::init_params(spec, ranp::InitScheme::glorot, rng.engine()());
  for (auto& p : params.layers)
    if (p.bias)
      for (double& v : p.bias->data()) v = rng.uniform(-0.2, 0.2);
  return params;
}

inline std::vector<int> random_targets(const ranp::NetSpec& spec, std::size_t batch, Rng& rng) {
  const auto& out = spec.layers.back().out_shape;
  std::vector<int> t(batch * out[1] * out[2] * out[3]);
  for (int& v : t) v = rng.integer(0, spec.class_count - 1);
  return t;
}

inline std::string config_path(const std::string& name) { return std::string(RANP_CONFIG_DIR) + "/" + name; }

}  // namespace testing_support
