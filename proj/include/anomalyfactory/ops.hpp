#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Core>

#include "anomalyfactory/autograd.hpp"

namespace af::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;

inline void require_same(const std::array<int, 4>& a, const std::array<int, 4>& b, const char* op) {
  if (a != b) throw ContractError(std::string(op) + ": shape mismatch");
}

template <typename T>
void im2col(const T* x, int channels, int height, int width, int k, int stride, int pad, int out_h,
            int out_w, T* cols) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * plane;
        const T* src = x + static_cast<std::size_t>(c) * height * width;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill_n(dst, out_w, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < width) ? srow[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, T* dx) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * plane;
        T* dst = dx + static_cast<std::size_t>(c) * height * width;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          T* drow = dst + static_cast<std::size_t>(iy) * width;
          const T* srow = row + oy * out_w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < width) drow[ix] += srow[ox];
          }
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      accumulate(self, k, [&](Tensor<T>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    accumulate(self, 0, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    accumulate(self, 1, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    accumulate(self, 0, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    });
    accumulate(self, 1, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    });
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    accumulate(self, 0, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
  });
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(T s, const Var<T>& a) { return scale(a, s); }

// Sum of all elements -> scalar.
template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  return make_result<T>(Tensor<T>::scalar(acc), {a}, [](Node<T>& self) {
    const T g0 = self.grad[0];
    accumulate(self, 0, [&](Tensor<T>& g) {
      for (auto& v : g.values()) v += g0;
    });
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    accumulate(self, 0, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > T(0)) g[i] += self.grad[i];
    });
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : slope * v;
  return make_result<T>(std::move(out), {a}, [slope](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    accumulate(self, 0, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += x[i] > T(0) ? self.grad[i] : slope * self.grad[i];
    });
  });
}

template <typename T>
T sigmoid_scalar(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = sigmoid_scalar(v);
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    const auto& y = self.value;
    accumulate(self, 0, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i] * (T(1) - y[i]);
    });
  });
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  const auto& s0 = parts.front().shape();
  int channels = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ContractError("concat_channels: spatial/batch mismatch");
    channels += s[1];
  }
  Tensor<T> out(s0[0], channels, s0[2], s0[3]);
  const std::size_t plane = out.plane();
  for (int n = 0; n < s0[0]; ++n) {
    int offset = 0;
    for (const auto& p : parts) {
      const int c = p.shape()[1];
      std::copy_n(p.value().data() + static_cast<std::size_t>(n) * c * plane, c * plane,
                  out.data() + (static_cast<std::size_t>(n) * channels + offset) * plane);
      offset += c;
    }
  }
  return make_result<T>(std::move(out), parts, [](Node<T>& self) {
    const int batch = self.value.n();
    const int channels = self.value.c();
    const std::size_t plane = self.value.plane();
    int offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const int c = self.parents[k]->value.c();
      accumulate(self, k, [&](Tensor<T>& g) {
        for (int n = 0; n < batch; ++n) {
          const T* src = self.grad.data() + (static_cast<std::size_t>(n) * channels + offset) * plane;
          T* dst = g.data() + static_cast<std::size_t>(n) * c * plane;
          for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
        }
      });
      offset += c;
    }
  });
}

// 2x2 average pooling with stride 2 (odd trailing rows/columns are dropped).
template <typename T>
Var<T> avg_pool2(const Var<T>& a) {
  const auto& x = a.value();
  const int oh = x.h() / 2, ow = x.w() / 2;
  if (oh == 0 || ow == 0) throw ContractError("avg_pool2: input too small");
  Tensor<T> out(x.n(), x.c(), oh, ow);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
          out.at(n, c, y, xx) = T(0.25) * (x.at(n, c, 2 * y, 2 * xx) + x.at(n, c, 2 * y, 2 * xx + 1) +
                                           x.at(n, c, 2 * y + 1, 2 * xx) +
                                           x.at(n, c, 2 * y + 1, 2 * xx + 1));
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    accumulate(self, 0, [&](Tensor<T>& g) {
      const auto& go = self.grad;
      for (int n = 0; n < go.n(); ++n)
        for (int c = 0; c < go.c(); ++c)
          for (int y = 0; y < go.h(); ++y)
            for (int x = 0; x < go.w(); ++x) {
              const T v = T(0.25) * go.at(n, c, y, x);
              g.at(n, c, 2 * y, 2 * x) += v;
              g.at(n, c, 2 * y, 2 * x + 1) += v;
              g.at(n, c, 2 * y + 1, 2 * x) += v;
              g.at(n, c, 2 * y + 1, 2 * x + 1) += v;
            }
    });
  });
}

// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample2(const Var<T>& a) {
  const auto& x = a.value();
  Tensor<T> out(x.n(), x.c(), x.h() * 2, x.w() * 2);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int y = 0; y < out.h(); ++y)
        for (int xx = 0; xx < out.w(); ++xx) out.at(n, c, y, xx) = x.at(n, c, y / 2, xx / 2);
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    accumulate(self, 0, [&](Tensor<T>& g) {
      const auto& go = self.grad;
      for (int n = 0; n < go.n(); ++n)
        for (int c = 0; c < go.c(); ++c)
          for (int y = 0; y < go.h(); ++y)
            for (int x = 0; x < go.w(); ++x) g.at(n, c, y / 2, x / 2) += go.at(n, c, y, x);
    });
  });
}

// ---------------------------------------------------------------------------
// Convolution: weight [Cout, Cin, k, k], bias [1, Cout, 1, 1], square kernel.

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  const auto& x = input.value();
  const auto& w = weight.value();
  const int cout = w.n(), cin = w.c(), k = w.h();
  if (x.c() != cin) throw ContractError("conv2d: channel mismatch " + x.shape_string() + " vs " + w.shape_string());
  const int oh = (x.h() + 2 * pad - k) / stride + 1;
  const int ow = (x.w() + 2 * pad - k) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ContractError("conv2d: output would be empty for " + x.shape_string());
  const int kdim = cin * k * k;
  const int plane = oh * ow;
  Tensor<T> out(x.n(), cout, oh, ow);
  AlignedVector<T> cols(static_cast<std::size_t>(kdim) * plane);
  detail::ConstRowMap<T> wm(w.data(), cout, kdim);
  const auto& b = bias.value();
  for (int n = 0; n < x.n(); ++n) {
    detail::im2col(x.data() + static_cast<std::size_t>(n) * cin * x.plane(), cin, x.h(), x.w(), k,
                   stride, pad, oh, ow, cols.data());
    detail::ConstRowMap<T> cm(cols.data(), kdim, plane);
    detail::RowMap<T> om(out.data() + static_cast<std::size_t>(n) * cout * plane, cout, plane);
    om.noalias() = wm * cm;
    for (int c = 0; c < cout; ++c) om.row(c).array() += b[c];
  }
  return make_result<T>(std::move(out), {input, weight, bias}, [stride, pad](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    const auto& w = self.parents[1]->value;
    const int cout = w.n(), cin = w.c(), k = w.h();
    const int oh = self.value.h(), ow = self.value.w();
    const int kdim = cin * k * k;
    const int plane = oh * ow;
    const bool need_x = self.parents[0]->requires_grad;
    const bool need_w = self.parents[1]->requires_grad;
    const bool need_b = self.parents[2]->requires_grad;
    AlignedVector<T> cols(static_cast<std::size_t>(kdim) * plane);
    detail::ConstRowMap<T> wm(w.data(), cout, kdim);
    for (int n = 0; n < x.n(); ++n) {
      detail::ConstRowMap<T> gm(self.grad.data() + static_cast<std::size_t>(n) * cout * plane, cout,
                                plane);
      if (need_w) {
        detail::im2col(x.data() + static_cast<std::size_t>(n) * cin * x.plane(), cin, x.h(), x.w(),
                       k, stride, pad, oh, ow, cols.data());
        detail::ConstRowMap<T> cm(cols.data(), kdim, plane);
        detail::RowMap<T> gw(self.parents[1]->ensure_grad().data(), cout, kdim);
        gw.noalias() += gm * cm.transpose();
      }
      if (need_b) {
        auto& gb = self.parents[2]->ensure_grad();
        for (int c = 0; c < cout; ++c) gb[c] += gm.row(c).sum();
      }
      if (need_x) {
        detail::RowMap<T> dcols(cols.data(), kdim, plane);
        dcols.noalias() = wm.transpose() * gm;
        detail::col2im(cols.data(), cin, x.h(), x.w(), k, stride, pad, oh, ow,
                       self.parents[0]->ensure_grad().data() +
                           static_cast<std::size_t>(n) * cin * x.plane());
      }
    }
  });
}

// Instance normalisation without affine parameters.
template <typename T>
Var<T> instance_norm(const Var<T>& a, T eps = T(1e-5)) {
  const auto& x = a.value();
  Tensor<T> out(x.shape());
  std::vector<T> rstd(static_cast<std::size_t>(x.n()) * x.c());
  const std::size_t plane = x.plane();
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const T* src = x.data() + (static_cast<std::size_t>(n) * x.c() + c) * plane;
      T* dst = out.data() + (static_cast<std::size_t>(n) * x.c() + c) * plane;
      T m = 0;
      for (std::size_t i = 0; i < plane; ++i) m += src[i];
      m /= static_cast<T>(plane);
      T var = 0;
      for (std::size_t i = 0; i < plane; ++i) var += (src[i] - m) * (src[i] - m);
      var /= static_cast<T>(plane);
      const T r = T(1) / std::sqrt(var + eps);
      rstd[static_cast<std::size_t>(n) * x.c() + c] = r;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = (src[i] - m) * r;
    }
  return make_result<T>(std::move(out), {a}, [rstd = std::move(rstd)](Node<T>& self) {
    accumulate(self, 0, [&](Tensor<T>& g) {
      const auto& y = self.value;
      const std::size_t plane = y.plane();
      const std::size_t groups = static_cast<std::size_t>(y.n()) * y.c();
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const T* gy = self.grad.data() + gi * plane;
        const T* yy = y.data() + gi * plane;
        T* gx = g.data() + gi * plane;
        T mg = 0, mgy = 0;
        for (std::size_t i = 0; i < plane; ++i) {
          mg += gy[i];
          mgy += gy[i] * yy[i];
        }
        mg /= static_cast<T>(plane);
        mgy /= static_cast<T>(plane);
        for (std::size_t i = 0; i < plane; ++i) gx[i] += rstd[gi] * (gy[i] - mg - yy[i] * mgy);
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Fusion and loss primitives

// out = base * (1 - h) + texture * h, with the single-channel h broadcast over channels.
template <typename T>
Var<T> fuse(const Var<T>& base, const Var<T>& texture, const Var<T>& h) {
  const auto& b = base.value();
  const auto& t = texture.value();
  const auto& hv = h.value();
  detail::require_same(b.shape(), t.shape(), "fuse");
  if (hv.n() != b.n() || hv.c() != 1 || hv.h() != b.h() || hv.w() != b.w())
    throw ContractError("fuse: heatmap shape " + hv.shape_string() + " incompatible with " +
                        b.shape_string());
  Tensor<T> out(b.shape());
  const std::size_t plane = b.plane();
  for (int n = 0; n < b.n(); ++n)
    for (int c = 0; c < b.c(); ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t j = (static_cast<std::size_t>(n) * b.c() + c) * plane + i;
        const T w = hv[static_cast<std::size_t>(n) * plane + i];
        out[j] = b[j] * (T(1) - w) + t[j] * w;
      }
  return make_result<T>(std::move(out), {base, texture, h}, [](Node<T>& self) {
    const auto& b = self.parents[0]->value;
    const auto& t = self.parents[1]->value;
    const auto& hv = self.parents[2]->value;
    const std::size_t plane = b.plane();
    const int channels = b.c();
    auto each = [&](auto&& f) {
      for (int n = 0; n < b.n(); ++n)
        for (int c = 0; c < channels; ++c)
          for (std::size_t i = 0; i < plane; ++i)
            f((static_cast<std::size_t>(n) * channels + c) * plane + i,
              static_cast<std::size_t>(n) * plane + i);
    };
    accumulate(self, 0, [&](Tensor<T>& g) {
      each([&](std::size_t j, std::size_t k) { g[j] += self.grad[j] * (T(1) - hv[k]); });
    });
    accumulate(self, 1, [&](Tensor<T>& g) {
      each([&](std::size_t j, std::size_t k) { g[j] += self.grad[j] * hv[k]; });
    });
    accumulate(self, 2, [&](Tensor<T>& g) {
      each([&](std::size_t j, std::size_t k) { g[k] += self.grad[j] * (t[j] - b[j]); });
    });
  });
}

// mean |a - b|
template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mean_abs_diff");
  const auto& av = a.value();
  const auto& bv = b.value();
  T acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += std::abs(av[i] - bv[i]);
  const T inv = T(1) / static_cast<T>(av.size());
  return make_result<T>(Tensor<T>::scalar(acc * inv), {a, b}, [inv](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const T g0 = self.grad[0] * inv;
    auto sgn = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
    accumulate(self, 0, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * sgn(av[i] - bv[i]);
    });
    accumulate(self, 1, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * sgn(av[i] - bv[i]);
    });
  });
}

// mean (a - b)^2
template <typename T>
Var<T> mean_squared_diff(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mean_squared_diff");
  const auto& av = a.value();
  const auto& bv = b.value();
  T acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
  const T inv = T(1) / static_cast<T>(av.size());
  return make_result<T>(Tensor<T>::scalar(acc * inv), {a, b}, [inv](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const T g0 = T(2) * self.grad[0] * inv;
    accumulate(self, 0, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * (av[i] - bv[i]);
    });
    accumulate(self, 1, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * (av[i] - bv[i]);
    });
  });
}

// mean softplus(sign * clamp(x, -limit, limit)); softplus(z) = log(1 + e^z) = -log sigmoid(-z).
template <typename T>
Var<T> mean_softplus(const Var<T>& x, T sign, T limit) {
  const auto& xv = x.value();
  T acc = 0;
  for (T v : xv.values()) {
    if (!std::isfinite(v)) throw NumericalError("non-finite discriminator logit");
    const T z = sign * std::clamp(v, -limit, limit);
    acc += z > T(0) ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
  }
  const T inv = T(1) / static_cast<T>(xv.size());
  return make_result<T>(Tensor<T>::scalar(acc * inv), {x}, [sign, limit, inv](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const T g0 = self.grad[0] * inv;
    accumulate(self, 0, [&](Tensor<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] < -limit || xv[i] > limit) continue;
        g[i] += g0 * sign * sigmoid_scalar(sign * xv[i]);
      }
    });
  });
}

// Adds a constant tensor (no gradient flows into it).
template <typename T>
Var<T> add_constant(const Var<T>& a, const Tensor<T>& c) {
  return add(a, Var<T>(c, false));
}

}  // namespace af::ops
