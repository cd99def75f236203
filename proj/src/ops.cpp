// SPDX-License-Identifier: Apache-2.0
#include "qsat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "kernels.hpp"

namespace qsat {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return record("add", out, {a, b}, [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return record("sub", out, {a, b}, [](const Tensor& g) {
    return std::vector<Tensor>{g, scale(g, -1.0)};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor sa = a.detach(), sb = b.detach();
  return record("mul", out, {a, b}, [sa, sb](const Tensor& g) {
    Tensor ga(g.shape()), gb(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] = g[i] * sb[i];
      gb[i] = g[i] * sa[i];
    }
    return std::vector<Tensor>{ga, gb};
  });
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = map_unary(a, [factor](double v) { return v * factor; });
  return record("scale", out, {a}, [factor](const Tensor& g) {
    return std::vector<Tensor>{map_unary(g, [factor](double v) { return v * factor; })};
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  Tensor out = map_unary(a, [value](double v) { return v + value; });
  return record("add_scalar", out, {a}, [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor div_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("div_by: divisor must have one element, got " + shape_str(s.shape()));
  const double d = s[0];
  if (d == 0.0) throw DomainError("div_by: division by zero");
  Tensor out = map_unary(a, [d](double v) { return v / d; });
  Tensor sa = a.detach();
  return record("div_by", out, {a, s}, [sa, d](const Tensor& g) {
    Tensor ga = map_unary(g, [d](double v) { return v / d; });
    double acc = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * sa[i];
    return std::vector<Tensor>{ga, Tensor::scalar(-acc / (d * d))};
  });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw DomainError("sqrt of negative value");
  }
  Tensor out = map_unary(a, [](double v) { return std::sqrt(v); });
  Tensor so = out.detach();
  return record("sqrt", out, {a}, [so](const Tensor& g) {
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * 0.5 / so[i];
    return std::vector<Tensor>{ga};
  });
}

Tensor tanh(const Tensor& a) {
  Tensor out = map_unary(a, [](double v) { return std::tanh(v); });
  Tensor so = out.detach();
  return record("tanh", out, {a}, [so](const Tensor& g) {
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (1.0 - so[i] * so[i]);
    return std::vector<Tensor>{ga};
  });
}

Tensor relu(const Tensor& a) {
  Tensor out = map_unary(a, [](double v) { return v > 0.0 ? v : 0.0; });
  Tensor sa = a.detach();
  return record("relu", out, {a}, [sa](const Tensor& g) {
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = sa[i] > 0.0 ? g[i] : 0.0;
    return std::vector<Tensor>{ga};
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Shape shape = a.shape();
  return record("sum", Tensor::scalar(acc), {a}, [shape](const Tensor& g) {
    return std::vector<Tensor>{Tensor(shape, g[0])};
  });
}

Tensor mean(const Tensor& a) {
  if (a.empty()) throw DomainError("mean of empty tensor");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const double n = static_cast<double>(a.size());
  Shape shape = a.shape();
  return record("mean", Tensor::scalar(acc / n), {a}, [shape, n](const Tensor& g) {
    return std::vector<Tensor>{Tensor(shape, g[0] / n)};
  });
}

double mean_square_value(std::span<const double> values) {
  if (values.empty()) throw DomainError("mean_square of empty tensor");
  double acc = 0.0;
  for (double v : values) acc += v * v;
  return acc / static_cast<double>(values.size());
}

Tensor mean_square(const Tensor& a) {
  const double ms = mean_square_value(a.data());
  const double n = static_cast<double>(a.size());
  Tensor sa = a.detach();
  return record("mean_square", Tensor::scalar(ms), {a}, [sa, n](const Tensor& g) {
    const double f = 2.0 * g[0] / n;
    return std::vector<Tensor>{map_unary(sa, [f](double v) { return f * v; })};
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data().data(), false);
  Tensor sa = a.detach(), sb = b.detach();
  return record("matmul", out, {a, b}, [sa, sb, m, k, n](const Tensor& g) {
    Tensor ga({m, k}), gb({k, n});
    kernels::gemm_nt(m, k, n, g.data().data(), sb.data().data(), ga.data().data(), false);
    kernels::gemm_tn(k, n, m, sa.data().data(), g.data().data(), gb.data().data(), false);
    return std::vector<Tensor>{ga, gb};
  });
}

Tensor linear(const Tensor& x, const Tensor& weight) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t batch = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  Tensor out({batch, out_f});
  kernels::gemm_nt(batch, out_f, in, x.data().data(), weight.data().data(), out.data().data(), false);
  Tensor sx = x.detach(), sw = weight.detach();
  return record("linear", out, {x, weight}, [sx, sw, batch, in, out_f](const Tensor& g) {
    Tensor gx({batch, in}), gw({out_f, in});
    kernels::gemm_nn(batch, in, out_f, g.data().data(), sw.data().data(), gx.data().data(), false);
    kernels::gemm_tn(out_f, in, batch, g.data().data(), sx.data().data(), gw.data().data(), false);
    return std::vector<Tensor>{gx, gw};
  });
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad) {
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t padded = in + 2 * pad;
  if (kernel > padded) {
    throw ShapeError("conv2d: kernel " + std::to_string(kernel) + " exceeds padded extent " +
                     std::to_string(padded));
  }
  if ((padded - kernel) % stride != 0) {
    throw ShapeError("conv2d: non-integral output extent (" + std::to_string(padded) + " - " +
                     std::to_string(kernel) + ") / " + std::to_string(stride));
  }
  return (padded - kernel) / stride + 1;
}

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, co, k, stride, pad, ho, wo;
  std::size_t ckk() const { return c * k * k; }
  std::size_t hw_out() const { return ho * wo; }
};

// Output columns [lo, hi) whose input column ox*stride + kx - pad lies inside.
void valid_span(const ConvGeom& g, std::size_t kx, std::size_t& lo, std::size_t& hi) {
  lo = 0;
  while (lo < g.wo && lo * g.stride + kx < g.pad) ++lo;
  hi = lo;
  while (hi < g.wo && hi * g.stride + kx < g.pad + g.w) ++hi;
}

// cols[(ci*k + ky)*k + kx][oy*wo + ox]
void im2col(const ConvGeom& g, const double* img, double* cols) {
  const std::size_t hw = g.hw_out();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((ci * g.k + ky) * g.k + kx) * hw;
        std::size_t lo, hi;
        valid_span(g, kx, lo, hi);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          double* dst = row + oy * g.wo;
          const std::size_t yy = oy * g.stride + ky;
          if (yy < g.pad || yy >= g.pad + g.h || lo >= hi) {
            for (std::size_t ox = 0; ox < g.wo; ++ox) dst[ox] = 0.0;
            continue;
          }
          const double* src = img + (ci * g.h + (yy - g.pad)) * g.w;
          for (std::size_t ox = 0; ox < lo; ++ox) dst[ox] = 0.0;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + kx - g.pad];
          for (std::size_t ox = hi; ox < g.wo; ++ox) dst[ox] = 0.0;
        }
      }
    }
  }
}

void col2im(const ConvGeom& g, const double* cols, double* img) {
  const std::size_t hw = g.hw_out();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((ci * g.k + ky) * g.k + kx) * hw;
        std::size_t lo, hi;
        valid_span(g, kx, lo, hi);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::size_t yy = oy * g.stride + ky;
          if (yy < g.pad || yy >= g.pad + g.h) continue;
          double* dst = img + (ci * g.h + (yy - g.pad)) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + kx - g.pad] += src[ox];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d: expected 4-d input and kernel, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d: input channels " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(w.shape()));
  }
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: kernel must be square, got " + shape_str(w.shape()));
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
  g.ho = conv_output_extent(g.h, g.k, stride, pad);
  g.wo = conv_output_extent(g.w, g.k, stride, pad);

  const std::size_t ckk = g.ckk(), hw = g.hw_out(), in_sz = g.c * g.h * g.w;
  const bool keep = grad_enabled() && (x.requires_grad() || w.requires_grad());
  auto cols = std::make_shared<std::vector<double>>(g.n * ckk * hw);
  Tensor out({g.n, g.co, g.ho, g.wo});
  const double* xp = x.data().data();
  const double* wp = w.data().data();
  double* op = out.data().data();
  double* cp = cols->data();
  parallel_for(g.n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t s = lo; s < hi; ++s) {
      im2col(g, xp + s * in_sz, cp + s * ckk * hw);
      kernels::gemm_nn(g.co, hw, ckk, wp, cp + s * ckk * hw, op + s * g.co * hw, false);
    }
  });
  if (!keep) return out;

  Tensor sw = w.detach();
  const bool need_gx = x.requires_grad();
  const bool need_gw = w.requires_grad();
  return record("conv2d", out, {x, w}, [g, cols, sw, need_gx, need_gw](const Tensor& grad) {
    const std::size_t ckk = g.ckk(), hw = g.hw_out(), in_sz = g.c * g.h * g.w;
    const double* gp = grad.data().data();
    Tensor gx, gw;
    if (need_gx) {
      gx = Tensor({g.n, g.c, g.h, g.w});
      double* gxp = gx.data().data();
      const double* wp = sw.data().data();
      parallel_for(g.n, [&](std::size_t lo, std::size_t hi) {
        std::vector<double> dcols(ckk * hw);
        for (std::size_t s = lo; s < hi; ++s) {
          kernels::gemm_tn(ckk, hw, g.co, wp, gp + s * g.co * hw, dcols.data(), false);
          col2im(g, dcols.data(), gxp + s * in_sz);
        }
      });
    }
    if (need_gw) {
      gw = Tensor({g.co, g.c, g.k, g.k});
      // Transpose columns once so the weight gradient is a row-major product.
      std::vector<double> cols_t(g.n * hw * ckk);
      const double* cp = cols->data();
      parallel_for(g.n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t s = lo; s < hi; ++s) {
          const double* src = cp + s * ckk * hw;
          double* dst = cols_t.data() + s * hw * ckk;
          for (std::size_t r = 0; r < ckk; ++r)
            for (std::size_t q = 0; q < hw; ++q) dst[q * ckk + r] = src[r * hw + q];
        }
      });
      double* gwp = gw.data().data();
      parallel_for(g.co, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t s = 0; s < g.n; ++s) {
          kernels::gemm_nn(hi - lo, ckk, hw, gp + s * g.co * hw + lo * hw,
                           cols_t.data() + s * hw * ckk, gwp + lo * ckk, true);
        }
      });
    }
    return std::vector<Tensor>{gx, gw};
  });
}

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d: expected 4-d input, got " + shape_str(x.shape()));
  if (k == 0 || x.dim(2) % k != 0 || x.dim(3) % k != 0) {
    throw ShapeError("avg_pool2d: window " + std::to_string(k) + " does not tile " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h / k, wo = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out({n, c, ho, wo});
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = x.data().data() + p * h * w;
    double* dst = out.data().data() + p * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) acc += src[(oy * k + dy) * w + ox * k + dx];
        dst[oy * wo + ox] = acc * inv;
      }
    }
  }
  Shape in_shape = x.shape();
  return record("avg_pool2d", out, {x}, [in_shape, k, inv](const Tensor& g) {
    const std::size_t n = in_shape[0], c = in_shape[1], h = in_shape[2], w = in_shape[3];
    const std::size_t ho = h / k, wo = w / k;
    Tensor gx(in_shape);
    for (std::size_t p = 0; p < n * c; ++p) {
      const double* src = g.data().data() + p * ho * wo;
      double* dst = gx.data().data() + p * h * w;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) dst[y * w + xx] = src[(y / k) * wo + xx / k] * inv;
    }
    return std::vector<Tensor>{gx};
  });
}

Tensor max_pool2d(const Tensor& x, std::size_t k) {
  if (x.rank() != 4) throw ShapeError("max_pool2d: expected 4-d input, got " + shape_str(x.shape()));
  if (k == 0 || x.dim(2) % k != 0 || x.dim(3) % k != 0) {
    throw ShapeError("max_pool2d: window " + std::to_string(k) + " does not tile " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h / k, wo = w / k;
  Tensor out({n, c, ho, wo});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = x.data().data() + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (oy * k) * w + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t idx = (oy * k + dy) * w + ox * k + dx;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = p * ho * wo + oy * wo + ox;
        out[o] = src[best];
        argmax[o] = p * h * w + best;
      }
    }
  }
  Shape in_shape = x.shape();
  return record("max_pool2d", out, {x}, [in_shape, argmax](const Tensor& g) {
    Tensor gx(in_shape);
    for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
    return std::vector<Tensor>{gx};
  });
}

Tensor flatten(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("flatten: expected at least 2-d input, got " + shape_str(x.shape()));
  return x.reshape({x.dim(0), x.size() / x.dim(0)});
}

namespace {
std::size_t plane_size(const Tensor& x) {
  std::size_t s = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) s *= x.dim(i);
  return s;
}
void require_channel_vector(const char* op, const Tensor& x, const Tensor& v) {
  if (x.rank() < 2 || v.size() != x.dim(1)) {
    throw ShapeError(std::string(op) + ": vector " + shape_str(v.shape()) +
                     " does not match channels of " + shape_str(x.shape()));
  }
}
}  // namespace

Tensor mul_channel(const Tensor& x, const Tensor& v) {
  require_channel_vector("mul_channel", x, v);
  const std::size_t n = x.dim(0), c = x.dim(1), plane = plane_size(x);
  Tensor out(x.shape());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (s * c + ch) * plane + i;
        out[idx] = x[idx] * v[ch];
      }
  Tensor sx = x.detach(), sv = v.detach();
  return record("mul_channel", out, {x, v}, [sx, sv, n, c, plane](const Tensor& g) {
    Tensor gx(sx.shape()), gv(sv.shape());
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t idx = (s * c + ch) * plane + i;
          gx[idx] = g[idx] * sv[ch];
          gv[ch] += g[idx] * sx[idx];
        }
    return std::vector<Tensor>{gx, gv};
  });
}

Tensor add_channel(const Tensor& x, const Tensor& v) {
  require_channel_vector("add_channel", x, v);
  const std::size_t n = x.dim(0), c = x.dim(1), plane = plane_size(x);
  Tensor out(x.shape());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (s * c + ch) * plane + i;
        out[idx] = x[idx] + v[ch];
      }
  Shape vshape = v.shape();
  return record("add_channel", out, {x, v}, [vshape, n, c, plane](const Tensor& g) {
    Tensor gv(vshape);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) gv[ch] += g[(s * c + ch) * plane + i];
    return std::vector<Tensor>{g, gv};
  });
}

}  // namespace qsat
