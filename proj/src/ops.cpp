#include "crossing/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>

#include "crossing/tape.hpp"

namespace crossing {

BatchNormState BatchNormState::make(std::size_t channels) {
  BatchNormState s;
  s.running_mean = Tensor::zeros({channels});
  s.running_var = Tensor::filled({channels}, 1.0);
  return s;
}

namespace ops {

namespace {

using ImplPtr = std::shared_ptr<detail::TensorImpl>;
using GradFn = std::function<void(std::span<const double>)>;

[[noreturn]] void fail(const std::string& kind, const std::string& what) {
  throw ShapeError(kind + ": " + what);
}

void require_rank(const std::string& kind, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    fail(kind, "expected rank " + std::to_string(rank) + ", got shape " + shape_string(x.shape()));
  }
}

void require_same(const std::string& kind, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(kind, "shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

// Builds the output tensor and, when recording, its tape entry.
Tensor finish(const char* kind, Shape shape, std::vector<double> values,
              std::vector<Tensor> inputs, GradFn grad_fn) {
  Tensor out(std::move(shape), std::move(values));
  Tape* tape = active_tape();
  if (!tape) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.set_requires_grad(true);
  detail::TensorImpl* raw = out.impl().get();
  tape->record(Tape::Entry{kind, std::move(inputs), out,
                           [raw, fn = std::move(grad_fn)] { fn(raw->grad); }});
  return out;
}

bool wants(const ImplPtr& p) { return p->requires_grad; }

// out (m,n) += a (m,k) * b (k,n)
void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out (m,k) += g (m,n) * b^T where b is (k,n)
void gemm_nt(const double* g, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* orow = out + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      orow[p] += s;
    }
  }
}

// out (k,n) += a^T g where a is (m,k), g is (m,n)
void gemm_tn(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

template <typename F, typename D>
Tensor unary(const char* kind, const Tensor& x, F f, D deriv) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  ImplPtr xi = x.impl();
  auto values = std::make_shared<std::vector<double>>(out);
  return finish(kind, x.shape(), std::move(out), {x},
                [xi, values, deriv](std::span<const double> g) {
                  if (!wants(xi)) return;
                  auto& gx = xi->ensure_grad();
                  for (std::size_t i = 0; i < gx.size(); ++i) {
                    gx[i] += g[i] * deriv(xi->data[i], (*values)[i]);
                  }
                });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const char* kind = "matmul";
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3)) {
    fail(kind, "expected two rank-2 or two rank-3 operands, got " + shape_string(a.shape()) +
                   " and " + shape_string(b.shape()));
  }
  const bool batched = a.rank() == 3;
  const std::size_t batch = batched ? a.extent(0) : 1;
  const std::size_t m = a.extent(a.rank() - 2), k = a.extent(a.rank() - 1);
  const std::size_t kb = b.extent(b.rank() - 2), n = b.extent(b.rank() - 1);
  if (k != kb || (batched && b.extent(0) != batch)) {
    fail(kind, "incompatible extents " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t t = 0; t < batch; ++t) {
    gemm_nn(a.data().data() + t * m * k, b.data().data() + t * k * n, out.data() + t * m * n, m, k,
            n);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(kind, std::move(shape), std::move(out), {a, b},
                [ai, bi, batch, m, k, n](std::span<const double> g) {
                  for (std::size_t t = 0; t < batch; ++t) {
                    const double* gt = g.data() + t * m * n;
                    if (wants(ai)) {
                      gemm_nt(gt, bi->data.data() + t * k * n, ai->ensure_grad().data() + t * m * k,
                              m, k, n);
                    }
                    if (wants(bi)) {
                      gemm_tn(ai->data.data() + t * m * k, gt, bi->ensure_grad().data() + t * k * n,
                              m, k, n);
                    }
                  }
                });
}

Tensor transpose_last2(const Tensor& x) {
  const char* kind = "transpose";
  require_rank(kind, x, 3);
  const std::size_t batch = x.extent(0), r = x.extent(1), c = x.extent(2);
  std::vector<double> out(x.numel());
  const auto xs = x.data();
  for (std::size_t t = 0; t < batch; ++t)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = xs[t * r * c + i * c + j];
  ImplPtr xi = x.impl();
  return finish(kind, {batch, c, r}, std::move(out), {x}, [xi, batch, r, c](std::span<const double> g) {
    if (!wants(xi)) return;
    auto& gx = xi->ensure_grad();
    for (std::size_t t = 0; t < batch; ++t)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[t * r * c + i * c + j] += g[t * r * c + j * r + i];
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const char* kind = "linear";
  if (x.rank() < 1) fail(kind, "input must have rank >= 1");
  require_rank(kind, weight, 2);
  require_rank(kind, bias, 1);
  const std::size_t in = x.extent(x.rank() - 1);
  const std::size_t out_dim = weight.extent(1);
  if (weight.extent(0) != in || bias.extent(0) != out_dim) {
    fail(kind, "input " + shape_string(x.shape()) + " weight " + shape_string(weight.shape()) +
                   " bias " + shape_string(bias.shape()));
  }
  const std::size_t rows = x.numel() / in;
  std::vector<double> out(rows * out_dim);
  const auto bs = bias.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy(bs.begin(), bs.end(), out.begin() + r * out_dim);
  gemm_nn(x.data().data(), weight.data().data(), out.data(), rows, in, out_dim);
  Shape shape = x.shape();
  shape.back() = out_dim;
  ImplPtr xi = x.impl(), wi = weight.impl(), bi = bias.impl();
  return finish(kind, std::move(shape), std::move(out), {x, weight, bias},
                [xi, wi, bi, rows, in, out_dim](std::span<const double> g) {
                  if (wants(xi)) gemm_nt(g.data(), wi->data.data(), xi->ensure_grad().data(), rows, in, out_dim);
                  if (wants(wi)) gemm_tn(xi->data.data(), g.data(), wi->ensure_grad().data(), rows, in, out_dim);
                  if (wants(bi)) {
                    auto& gb = bi->ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
                  }
                });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dParams params) {
  const char* kind = "conv2d";
  require_rank(kind, x, 4);
  require_rank(kind, weight, 4);
  require_rank(kind, bias, 1);
  const std::size_t n = x.extent(0), h = x.extent(1), w = x.extent(2), cin = x.extent(3);
  const std::size_t kh = weight.extent(0), kw = weight.extent(1), cout = weight.extent(3);
  const std::size_t stride = params.stride, pad = params.pad;
  if (weight.extent(2) != cin || bias.extent(0) != cout) {
    fail(kind, "input " + shape_string(x.shape()) + " weight " + shape_string(weight.shape()) +
                   " bias " + shape_string(bias.shape()));
  }
  if (stride == 0) fail(kind, "stride must be positive");
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    fail(kind, "kernel " + shape_string(weight.shape()) + " larger than padded input " +
                   shape_string(x.shape()));
  }
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  const std::size_t patch = kh * kw * cin;
  const std::size_t rows = n * ho * wo;

  // im2col: each row holds the (kh,kw,cin) window of one output location.
  auto cols = std::make_shared<std::vector<double>>(rows * patch, 0.0);
  const auto xs = x.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double* row = cols->data() + ((b * ho + oy) * wo + ox) * patch;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const double* src = xs.data() + ((b * h + iy) * w + ix) * cin;
            std::copy(src, src + cin, row + (ky * kw + kx) * cin);
          }
        }
      }

  std::vector<double> out(rows * cout);
  const auto bs = bias.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy(bs.begin(), bs.end(), out.begin() + r * cout);
  gemm_nn(cols->data(), weight.data().data(), out.data(), rows, patch, cout);

  ImplPtr xi = x.impl(), wi = weight.impl(), bi = bias.impl();
  return finish(kind, {n, ho, wo, cout}, std::move(out), {x, weight, bias},
                [=](std::span<const double> g) {
                  if (wants(wi)) gemm_tn(cols->data(), g.data(), wi->ensure_grad().data(), rows, patch, cout);
                  if (wants(bi)) {
                    auto& gb = bi->ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < cout; ++j) gb[j] += g[r * cout + j];
                  }
                  if (!wants(xi)) return;
                  std::vector<double> dcols(rows * patch, 0.0);
                  gemm_nt(g.data(), wi->data.data(), dcols.data(), rows, patch, cout);
                  auto& gx = xi->ensure_grad();
                  for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t oy = 0; oy < ho; ++oy)
                      for (std::size_t ox = 0; ox < wo; ++ox) {
                        const double* row = dcols.data() + ((b * ho + oy) * wo + ox) * patch;
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                          if (iy < 0 || iy >= static_cast<long>(h)) continue;
                          for (std::size_t kx = 0; kx < kw; ++kx) {
                            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                            if (ix < 0 || ix >= static_cast<long>(w)) continue;
                            double* dst = gx.data() + ((b * h + iy) * w + ix) * cin;
                            const double* src = row + (ky * kw + kx) * cin;
                            for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
                          }
                        }
                      }
                });
}

Tensor relu(const Tensor& x) {
  // Subgradient at zero is zero.
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  Mode mode) {
  const char* kind = "batch_norm";
  if (x.rank() < 1) fail(kind, "input must have rank >= 1");
  const std::size_t c = x.extent(x.rank() - 1);
  require_rank(kind, gamma, 1);
  require_rank(kind, beta, 1);
  if (gamma.extent(0) != c || beta.extent(0) != c || state.running_mean.numel() != c ||
      state.running_var.numel() != c) {
    fail(kind, "channel mismatch: input " + shape_string(x.shape()) + " gamma " +
                   shape_string(gamma.shape()) + " beta " + shape_string(beta.shape()) +
                   " running " + shape_string(state.running_mean.shape()));
  }
  const std::size_t rows = x.numel() / c;
  const auto xs = x.data();
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  if (mode == Mode::train) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) mean[j] += xs[r * c + j];
    for (auto& m : mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = xs[r * c + j] - mean[j];
        var[j] += d * d;
      }
    for (auto& v : var) v /= static_cast<double>(rows);
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    const double unbias = rows > 1 ? static_cast<double>(rows) / static_cast<double>(rows - 1) : 1.0;
    for (std::size_t j = 0; j < c; ++j) {
      rm[j] = (1.0 - state.momentum) * rm[j] + state.momentum * mean[j];
      rv[j] = (1.0 - state.momentum) * rv[j] + state.momentum * var[j] * unbias;
    }
  } else {
    const auto rm = state.running_mean.data();
    const auto rv = state.running_var.data();
    std::copy(rm.begin(), rm.end(), mean.begin());
    std::copy(rv.begin(), rv.end(), var.begin());
  }
  auto inv_std = std::make_shared<std::vector<double>>(c);
  for (std::size_t j = 0; j < c; ++j) (*inv_std)[j] = 1.0 / std::sqrt(var[j] + state.eps);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  const auto gs = gamma.data(), bs = beta.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double v = (xs[r * c + j] - mean[j]) * (*inv_std)[j];
      (*xhat)[r * c + j] = v;
      out[r * c + j] = gs[j] * v + bs[j];
    }
  ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  const bool train = mode == Mode::train;
  return finish(kind, x.shape(), std::move(out), {x, gamma, beta},
                [=](std::span<const double> g) {
                  std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < c; ++j) {
                      sum_g[j] += g[r * c + j];
                      sum_gx[j] += g[r * c + j] * (*xhat)[r * c + j];
                    }
                  if (wants(gi)) {
                    auto& gg = gi->ensure_grad();
                    for (std::size_t j = 0; j < c; ++j) gg[j] += sum_gx[j];
                  }
                  if (wants(bi)) {
                    auto& gb = bi->ensure_grad();
                    for (std::size_t j = 0; j < c; ++j) gb[j] += sum_g[j];
                  }
                  if (!wants(xi)) return;
                  auto& gx = xi->ensure_grad();
                  const auto& gam = gi->data;
                  if (!train) {
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < c; ++j)
                        gx[r * c + j] += g[r * c + j] * gam[j] * (*inv_std)[j];
                    return;
                  }
                  const double inv_n = 1.0 / static_cast<double>(rows);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < c; ++j) {
                      const double dxhat = g[r * c + j] * gam[j];
                      const double mean_dxhat = sum_g[j] * gam[j] * inv_n;
                      const double mean_dxhat_xhat = sum_gx[j] * gam[j] * inv_n;
                      gx[r * c + j] += (*inv_std)[j] *
                                       (dxhat - mean_dxhat - (*xhat)[r * c + j] * mean_dxhat_xhat);
                    }
                });
}

Tensor maxpool2x2_stride2(const Tensor& x) {
  const char* kind = "maxpool2x2_stride2";
  if (x.rank() < 2) fail(kind, "input must have rank >= 2, got " + shape_string(x.shape()));
  const bool plain = x.rank() == 2;
  const std::size_t h = x.extent(plain ? 0 : x.rank() - 3);
  const std::size_t w = x.extent(plain ? 1 : x.rank() - 2);
  const std::size_t c = plain ? 1 : x.extent(x.rank() - 1);
  if (h % 2 != 0 || w % 2 != 0) {
    fail(kind, "spatial extents must be even, got " + shape_string(x.shape()));
  }
  const std::size_t outer = x.numel() / (h * w * c);
  const std::size_t ho = h / 2, wo = w / 2;
  Shape shape = x.shape();
  if (plain) {
    shape = {ho, wo};
  } else {
    shape[x.rank() - 3] = ho;
    shape[x.rank() - 2] = wo;
  }
  std::vector<double> out(outer * ho * wo * c);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto xs = x.data();
  for (std::size_t b = 0; b < outer; ++b)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
              if (xs[idx] > xs[best]) best = idx;
            }
          const std::size_t o = ((b * ho + oy) * wo + ox) * c + ch;
          out[o] = xs[best];
          (*arg)[o] = best;
        }
  ImplPtr xi = x.impl();
  return finish(kind, std::move(shape), std::move(out), {x}, [xi, arg](std::span<const double> g) {
    if (!wants(xi)) return;
    auto& gx = xi->ensure_grad();
    for (std::size_t o = 0; o < arg->size(); ++o) gx[(*arg)[o]] += g[o];
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const char* kind = "softmax";
  if (x.rank() == 0) fail(kind, "empty axis: input is a scalar");
  if (axis >= x.rank()) fail(kind, "axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
  const std::size_t len = x.extent(axis);
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.extent(a);
  const std::size_t outer = x.numel() / (len * inner);
  const auto xs = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, xs[base + t * inner]);
      double s = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double e = std::exp(xs[base + t * inner] - mx);
        out[base + t * inner] = e;
        s += e;
      }
      for (std::size_t t = 0; t < len; ++t) out[base + t * inner] /= s;
    }
  auto probs = std::make_shared<std::vector<double>>(out);
  ImplPtr xi = x.impl();
  return finish(kind, x.shape(), std::move(out), {x},
                [xi, probs, outer, len, inner](std::span<const double> g) {
                  if (!wants(xi)) return;
                  auto& gx = xi->ensure_grad();
                  const auto& p = *probs;
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < inner; ++i) {
                      const std::size_t base = o * len * inner + i;
                      double dot = 0.0;
                      for (std::size_t t = 0; t < len; ++t) dot += g[base + t * inner] * p[base + t * inner];
                      for (std::size_t t = 0; t < len; ++t) {
                        const std::size_t idx = base + t * inner;
                        gx[idx] += p[idx] * (g[idx] - dot);
                      }
                    }
                });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) fail("softmax", "empty axis: input is a scalar");
  return softmax(x, x.rank() - 1);
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  const char* kind = "hadamard";
  require_same(kind, a, b);
  const auto as = a.data(), bs = b.data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(kind, a.shape(), std::move(out), {a, b}, [ai, bi](std::span<const double> g) {
    if (wants(ai)) {
      auto& ga = ai->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bi->data[i];
    }
    if (wants(bi)) {
      auto& gb = bi->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * ai->data[i];
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const char* kind = "add";
  require_same(kind, a, b);
  const auto as = a.data(), bs = b.data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] + bs[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(kind, a.shape(), std::move(out), {a, b}, [ai, bi](std::span<const double> g) {
    if (wants(ai)) ai->accumulate_grad(g);
    if (wants(bi)) bi->accumulate_grad(g);
  });
}

Tensor scale(const Tensor& x, double factor) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] * factor;
  ImplPtr xi = x.impl();
  return finish("scale", x.shape(), std::move(out), {x}, [xi, factor](std::span<const double> g) {
    if (!wants(xi)) return;
    auto& gx = xi->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * factor;
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  const char* kind = "concat";
  if (parts.empty()) fail(kind, "no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) fail(kind, "axis " + std::to_string(axis) + " out of range for " + shape_string(first));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t a = 0; ok && a < s.size(); ++a) ok = a == axis || s[a] == first[a];
    if (!ok) fail(kind, "incompatible parts " + shape_string(first) + " and " + shape_string(s));
    total += s[axis];
  }
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < first.size(); ++a) inner *= first[a];
  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= first[a];
  Shape shape = first;
  shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t width = p.extent(axis) * inner;
    const auto ps = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(ps.begin() + o * width, ps.begin() + (o + 1) * width,
                out.begin() + o * total * inner + offset);
    widths.push_back(width);
    offset += width;
  }
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return finish(kind, std::move(shape), std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                [impls, widths, outer, total, inner](std::span<const double> g) {
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < impls.size(); ++k) {
                    if (wants(impls[k])) {
                      auto& gp = impls[k]->ensure_grad();
                      for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < widths[k]; ++i)
                          gp[o * widths[k] + i] += g[o * total * inner + off + i];
                    }
                    off += widths[k];
                  }
                });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    fail("reshape", "cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  ImplPtr xi = x.impl();
  return finish("reshape", std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {x},
                [xi](std::span<const double> g) {
                  if (wants(xi)) xi->accumulate_grad(g);
                });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  ImplPtr xi = x.impl();
  return finish("sum", {}, {s}, {x}, [xi](std::span<const double> g) {
    if (!wants(xi)) return;
    auto& gx = xi->ensure_grad();
    for (auto& v : gx) v += g[0];
  });
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const char* kind = "sum_axis";
  if (axis >= x.rank()) fail(kind, "axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
  const std::size_t len = x.extent(axis);
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.extent(a);
  const std::size_t outer = x.numel() / (len * inner);
  const auto xs = x.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xs[(o * len + t) * inner + i];
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<long>(axis));
  ImplPtr xi = x.impl();
  return finish(kind, std::move(shape), std::move(out), {x}, [xi, outer, len, inner](std::span<const double> g) {
    if (!wants(xi)) return;
    auto& gx = xi->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t i = 0; i < inner; ++i) gx[(o * len + t) * inner + i] += g[o * inner + i];
  });
}

Tensor global_avg_pool(const Tensor& x) {
  const char* kind = "global_avg_pool";
  require_rank(kind, x, 4);
  const std::size_t n = x.extent(0), hw = x.extent(1) * x.extent(2), c = x.extent(3);
  const auto xs = x.data();
  std::vector<double> out(n * c, 0.0);
  const double inv = 1.0 / static_cast<double>(hw);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t j = 0; j < c; ++j) out[b * c + j] += xs[(b * hw + p) * c + j];
    for (std::size_t j = 0; j < c; ++j) out[b * c + j] *= inv;
  }
  ImplPtr xi = x.impl();
  return finish(kind, {n, c}, std::move(out), {x}, [xi, n, hw, c, inv](std::span<const double> g) {
    if (!wants(xi)) return;
    auto& gx = xi->ensure_grad();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t j = 0; j < c; ++j) gx[(b * hw + p) * c + j] += g[b * c + j] * inv;
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const char* kind = "slice";
  if (axis >= x.rank()) fail(kind, "axis out of range for " + shape_string(x.shape()));
  const std::size_t len = x.extent(axis);
  if (length == 0 || start + length > len) {
    fail(kind, "range [" + std::to_string(start) + "," + std::to_string(start + length) +
                   ") outside extent " + std::to_string(len));
  }
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.extent(a);
  const std::size_t outer = x.numel() / (len * inner);
  const auto xs = x.data();
  std::vector<double> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(xs.begin() + (o * len + start) * inner, xs.begin() + (o * len + start + length) * inner,
              out.begin() + o * length * inner);
  Shape shape = x.shape();
  shape[axis] = length;
  ImplPtr xi = x.impl();
  return finish(kind, std::move(shape), std::move(out), {x},
                [xi, outer, len, start, length, inner](std::span<const double> g) {
                  if (!wants(xi)) return;
                  auto& gx = xi->ensure_grad();
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < length * inner; ++i)
                      gx[(o * len + start) * inner + i] += g[o * length * inner + i];
                });
}

Tensor unfold_footprint(const Tensor& x, std::size_t k) {
  const char* kind = "footprint";
  require_rank(kind, x, 4);
  if (k % 2 == 0) fail(kind, "footprint size must be odd, got " + std::to_string(k));
  const std::size_t n = x.extent(0), h = x.extent(1), w = x.extent(2), c = x.extent(3);
  const long r = static_cast<long>(k / 2);
  const std::size_t m = k * k;
  const std::size_t locations = n * h * w;
  std::vector<double> out(locations * m * c, 0.0);
  const auto xs = x.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t loc = (b * h + y) * w + xx;
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx) {
            const long sy = static_cast<long>(y) + dy, sx = static_cast<long>(xx) + dx;
            if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
            const std::size_t j = static_cast<std::size_t>((dy + r) * static_cast<long>(k) + (dx + r));
            const double* src = xs.data() + ((b * h + sy) * w + sx) * c;
            std::copy(src, src + c, out.begin() + (loc * m + j) * c);
          }
      }
  ImplPtr xi = x.impl();
  return finish(kind, {locations, m, c}, std::move(out), {x},
                [xi, n, h, w, c, k, r, m](std::span<const double> g) {
                  if (!wants(xi)) return;
                  auto& gx = xi->ensure_grad();
                  for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t y = 0; y < h; ++y)
                      for (std::size_t xx = 0; xx < w; ++xx) {
                        const std::size_t loc = (b * h + y) * w + xx;
                        for (long dy = -r; dy <= r; ++dy)
                          for (long dx = -r; dx <= r; ++dx) {
                            const long sy = static_cast<long>(y) + dy, sx = static_cast<long>(xx) + dx;
                            if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                            const std::size_t j = static_cast<std::size_t>((dy + r) * static_cast<long>(k) + (dx + r));
                            double* dst = gx.data() + ((b * h + sy) * w + sx) * c;
                            const double* src = g.data() + (loc * m + j) * c;
                            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                          }
                      }
                });
}

Tensor expand_groups(const Tensor& x, std::size_t group) {
  const char* kind = "expand_groups";
  require_rank(kind, x, 3);
  if (group == 0) fail(kind, "group size must be positive");
  const std::size_t rows = x.extent(0) * x.extent(1), gin = x.extent(2), cout = gin * group;
  const auto xs = x.data();
  std::vector<double> out(rows * cout);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < cout; ++ch) out[r * cout + ch] = xs[r * gin + ch / group];
  ImplPtr xi = x.impl();
  return finish(kind, {x.extent(0), x.extent(1), cout}, std::move(out), {x},
                [xi, rows, gin, cout, group](std::span<const double> g) {
                  if (!wants(xi)) return;
                  auto& gx = xi->ensure_grad();
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t ch = 0; ch < cout; ++ch) gx[r * gin + ch / group] += g[r * cout + ch];
                });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  const char* kind = "softmax_cross_entropy";
  require_rank(kind, logits, 2);
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  if (labels.size() != n) {
    fail(kind, std::to_string(labels.size()) + " labels for logits " + shape_string(logits.shape()));
  }
  const auto zs = logits.data();
  auto probs = std::make_shared<std::vector<double>>(n * k);
  double loss = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    if (labels[b] >= k) fail(kind, "label " + std::to_string(labels[b]) + " out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, zs[b * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(zs[b * k + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) (*probs)[b * k + j] = std::exp(zs[b * k + j] - lse);
    loss += lse - zs[b * k + labels[b]];
  }
  loss /= static_cast<double>(n);
  ImplPtr zi = logits.impl();
  std::vector<std::size_t> ys(labels.begin(), labels.end());
  return finish(kind, {}, {loss}, {logits}, [zi, probs, ys, n, k](std::span<const double> g) {
    if (!wants(zi)) return;
    auto& gz = zi->ensure_grad();
    const double s = g[0] / static_cast<double>(n);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t j = 0; j < k; ++j) {
        const double t = j == ys[b] ? 1.0 : 0.0;
        gz[b * k + j] += s * ((*probs)[b * k + j] - t);
      }
  });
}

}  // namespace ops
}  // namespace crossing
