#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numbers>

#include "slotid/autodiff.hpp"

namespace slotid::ad {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;  // strides into a / b per output axis (0 on broadcast axes)
};

inline Broadcast broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Broadcast r;
  r.out.assign(nd, 1);
  r.sa.assign(nd, 0);
  r.sb.assign(nd, 0);
  auto dim_of = [nd](const Shape& s, std::size_t i) -> std::size_t {
    const std::size_t off = nd - s.size();
    return i < off ? 1 : s[i - off];
  };
  for (std::size_t i = 0; i < nd; ++i) {
    const auto da = dim_of(a, i), db = dim_of(b, i);
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    r.out[i] = std::max(da, db);
  }
  std::size_t st_a = 1, st_b = 1;
  for (std::size_t i = nd; i-- > 0;) {
    const auto da = dim_of(a, i), db = dim_of(b, i);
    r.sa[i] = da == 1 ? 0 : st_a;
    r.sb[i] = db == 1 ? 0 : st_b;
    st_a *= da;
    st_b *= db;
  }
  return r;
}

/// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t nd = bc.out.size();
  const std::size_t total = numel(bc.out);
  if (nd == 0) {
    f(0, 0, 0);
    return;
  }
  // Innermost axis handled as a tight loop.
  const std::size_t inner = bc.out[nd - 1];
  const std::size_t ia = bc.sa[nd - 1], ib = bc.sb[nd - 1];
  std::vector<std::size_t> idx(nd, 0);
  std::size_t pa = 0, pb = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(o + k, pa + k * ia, pb + k * ib);
    for (std::size_t k = nd - 1; k-- > 0;) {
      if (++idx[k] < bc.out[k]) {
        pa += bc.sa[k];
        pb += bc.sb[k];
        break;
      }
      pa -= bc.sa[k] * (bc.out[k] - 1);
      pb -= bc.sb[k] * (bc.out[k] - 1);
      idx[k] = 0;
    }
  }
}

template <class T, class Fwd, class DA, class DB>
Var<T> binary(const Var<T>& a, const Var<T>& b, Fwd fwd, DA da, DB db) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return make_result<T>(std::move(out), {a, b}, [da, db](Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const auto& g = self.grad;
      if (pa.requires_grad) {
        auto& ga = pa.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(pa.value[i], pb.value[i]);
      }
      if (pb.requires_grad) {
        auto& gb = pb.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(pa.value[i], pb.value[i]);
      }
    });
  }
  auto bc = broadcast_shapes(av.shape(), bv.shape());
  Tensor<T> out(bc.out);
  for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
  return make_result<T>(std::move(out), {a, b}, [bc, da, db](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
        ga[i] += g[o] * da(pa.value[i], pb.value[j]);
      });
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
        gb[j] += g[o] * db(pa.value[i], pb.value[j]);
      });
    }
  });
}

template <class T, class Fwd, class Deriv>
Var<T> unary(const Var<T>& x, Fwd fwd, Deriv deriv) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_result<T>(std::move(out), {x}, [deriv](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
  });
}

inline void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& n, std::size_t& inner) {
  if (axis >= s.size()) throw ShapeError("axis out of range for " + shape_str(s));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

template <class T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t));
}

template <class T>
Var<T> parameter(Tensor<T> t) {
  return Var<T>(std::move(t), true);
}

// ---- elementwise --------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}
template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <class T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }

template <class T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::unary<T>(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}
template <class T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return detail::unary<T>(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}
template <class T>
Var<T> exp(const Var<T>& x) {
  return detail::unary<T>(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
template <class T>
Var<T> log(const Var<T>& x) {
  return detail::unary<T>(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}
template <class T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary<T>(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}
template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}
template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}
template <class T>
Var<T> square(const Var<T>& x) {
  return detail::unary<T>(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(const Var<T>& x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  return detail::unary<T>(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v))); },
      [](T v, T) {
        const T u = k * (v + c * v * v * v);
        const T th = std::tanh(u);
        return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * k * (T(1) + T(3) * c * v * v);
      });
}

// ---- shape ops ----------------------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  auto out = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

template <class T>
Var<T> permute(const Var<T>& x, std::vector<std::size_t> perm) {
  auto out = slotid::permute(x.value(), perm);
  return make_result<T>(std::move(out), {x}, [perm](Node<T>& self) {
    auto g = slotid::permute(self.grad, inverse_permutation(perm));
    self.parents[0]->accumulate(g);
  });
}

/// Concatenates along `axis`; all other extents must match.
template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  Shape out_shape = xs[0].shape();
  std::size_t total = 0;
  for (const auto& x : xs) {
    auto s = x.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat rank mismatch");
    s[axis] = out_shape[axis];
    if (s != out_shape) throw ShapeError("concat extent mismatch: " + shape_str(x.shape()));
    total += x.dim(axis);
  }
  out_shape[axis] = total;
  std::size_t outer, n, inner;
  detail::axis_split(out_shape, axis, outer, n, inner);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t w = x.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.value().data() + o * w, w, out.data() + o * n * inner + off * inner);
    off += x.dim(axis);
  }
  return make_result<T>(std::move(out), xs, [offsets, outer, n, inner](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& gp = p.grad_buffer();
      const std::size_t w = p.value.size() / outer;
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = self.grad.data() + o * n * inner + offsets[k] * inner;
        T* dst = gp.data() + o * w;
        for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
      }
    }
  });
}

/// Contiguous sub-range [start, start+len) along `axis`.
template <class T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner);
  if (start + len > n) throw ShapeError("slice out of range");
  Shape s = x.shape();
  s[axis] = len;
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.value().data() + (o * n + start) * inner, len * inner, out.data() + o * len * inner);
  return make_result<T>(std::move(out), {x}, [outer, n, inner, start, len](Node<T>& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = self.grad.data() + o * len * inner;
      T* dst = gp.data() + (o * n + start) * inner;
      for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
    }
  });
}

// ---- reductions ---------------------------------------------------------------------

template <class T>
Var<T> sum(const Var<T>& x) {
  return make_result<T>(Tensor<T>::scalar(x.value().sum()), {x}, [](Node<T>& self) {
    auto& gp = self.parents[0]->grad_buffer();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / T(x.value().size()));
}

/// Sum over one axis; the reduced axis is kept with extent 1.
template <class T>
Var<T> sum_axis(const Var<T>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner);
  Shape s = x.shape();
  s[axis] = 1;
  Tensor<T> out(s);
  const T* xv = x.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + k) * inner + i];
  return make_result<T>(std::move(out), {x}, [outer, n, inner](Node<T>& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) gp[(o * n + k) * inner + i] += self.grad[o * inner + i];
  });
}

template <class T>
Var<T> mean_axis(const Var<T>& x, std::size_t axis) {
  return scale(sum_axis(x, axis), T(1) / T(x.dim(axis)));
}

/// Numerically stable log-sum-exp over one axis (kept with extent 1).
template <class T>
Var<T> logsumexp_axis(const Var<T>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner);
  Shape s = x.shape();
  s[axis] = 1;
  Tensor<T> out(s);
  const T* xv = x.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < n; ++k) m = std::max(m, xv[(o * n + k) * inner + i]);
      T acc = 0;
      for (std::size_t k = 0; k < n; ++k) acc += std::exp(xv[(o * n + k) * inner + i] - m);
      out[o * inner + i] = m + std::log(acc);
    }
  return make_result<T>(std::move(out), {x}, [outer, n, inner](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const T lse = self.value[o * inner + i];
        const T g = self.grad[o * inner + i];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t j = (o * n + k) * inner + i;
          gp[j] += g * std::exp(p.value[j] - lse);
        }
      }
  });
}

/// Softmax over the last axis.
template <class T>
Var<T> softmax(const Var<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.value().size() / n;
  Tensor<T> out(x.shape());
  const T* xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv + r * n;
    T* o = out.data() + r * n;
    const T m = *std::max_element(in, in + n);
    T z = 0;
    for (std::size_t k = 0; k < n; ++k) z += (o[k] = std::exp(in[k] - m));
    for (std::size_t k = 0; k < n; ++k) o[k] /= z;
  }
  return make_result<T>(std::move(out), {x}, [n, rows](Node<T>& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T dot = 0;
      for (std::size_t k = 0; k < n; ++k) dot += y[k] * g[k];
      for (std::size_t k = 0; k < n; ++k) gp[r * n + k] += y[k] * (g[k] - dot);
    }
  });
}

// ---- normalization ------------------------------------------------------------------

/// LayerNorm over the last axis. `gamma`/`beta` may be undefined for a non-affine norm.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.value().size() / n;
  const bool affine = gamma.defined();
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  Tensor<T> inv_std(Shape{rows});
  const T* xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv + r * n;
    T mu = 0;
    for (std::size_t k = 0; k < n; ++k) mu += in[k];
    mu /= T(n);
    T var = 0;
    for (std::size_t k = 0; k < n; ++k) var += (in[k] - mu) * (in[k] - mu);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t k = 0; k < n; ++k) {
      const T h = (in[k] - mu) * is;
      xhat[r * n + k] = h;
      out[r * n + k] = affine ? h * gamma.value()[k] + beta.value()[k] : h;
    }
  }
  std::vector<Var<T>> parents{x};
  if (affine) {
    parents.push_back(gamma);
    parents.push_back(beta);
  }
  return make_result<T>(std::move(out), parents, [xhat = std::move(xhat), inv_std = std::move(inv_std), n, rows,
                                                  affine](Node<T>& self) {
    auto& px = *self.parents[0];
    const T* g = self.grad.data();
    if (affine) {
      auto& pg = *self.parents[1];
      auto& pb = *self.parents[2];
      if (pg.requires_grad) {
        auto& gg = pg.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < n; ++k) gg[k] += g[r * n + k] * xhat[r * n + k];
      }
      if (pb.requires_grad) {
        auto& gb = pb.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < n; ++k) gb[k] += g[r * n + k];
      }
    }
    if (!px.requires_grad) return;
    auto& gx = px.grad_buffer();
    std::vector<T> dh(n);
    for (std::size_t r = 0; r < rows; ++r) {
      T mean_dh = 0, mean_dh_h = 0;
      for (std::size_t k = 0; k < n; ++k) {
        dh[k] = g[r * n + k] * (affine ? self.parents[1]->value[k] : T(1));
        mean_dh += dh[k];
        mean_dh_h += dh[k] * xhat[r * n + k];
      }
      mean_dh /= T(n);
      mean_dh_h /= T(n);
      for (std::size_t k = 0; k < n; ++k)
        gx[r * n + k] += inv_std[r] * (dh[k] - mean_dh - xhat[r * n + k] * mean_dh_h);
    }
  });
}

// ---- linear algebra -----------------------------------------------------------------

/// y = x W^T + b for x of shape (..., in), W of shape (out, in), b of shape (out) or undefined.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = Var<T>()) {
  const std::size_t in = x.shape().back();
  if (w.ndim() != 2 || w.dim(1) != in)
    throw ShapeError("linear: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  const std::size_t outd = w.dim(0);
  const std::size_t rows = x.value().size() / in;
  Shape s = x.shape();
  s.back() = outd;
  Tensor<T> out(s);
  CMatMap<T> X(x.value().data(), rows, in);
  CMatMap<T> W(w.value().data(), outd, in);
  MatMap<T> Y(out.data(), rows, outd);
  Y.noalias() = X * W.transpose();
  const bool has_bias = b.defined();
  if (has_bias) {
    if (b.value().size() != outd) throw ShapeError("linear: bias size mismatch");
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(b.value().data(), outd);
    Y.rowwise() += bv;
  }
  std::vector<Var<T>> parents{x, w};
  if (has_bias) parents.push_back(b);
  return make_result<T>(std::move(out), parents, [rows, in, outd, has_bias](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    CMatMap<T> G(self.grad.data(), rows, outd);
    if (px.requires_grad) {
      MatMap<T> GX(px.grad_buffer().data(), rows, in);
      CMatMap<T> W(pw.value.data(), outd, in);
      GX.noalias() += G * W;
    }
    if (pw.requires_grad) {
      MatMap<T> GW(pw.grad_buffer().data(), outd, in);
      CMatMap<T> X(px.value.data(), rows, in);
      GW.noalias() += G.transpose() * X;
    }
    if (has_bias && self.parents[2]->requires_grad) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(self.parents[2]->grad_buffer().data(), outd);
      gb += G.colwise().sum();
    }
  });
}

/// y = x M for x of shape (..., in) and M of shape (in, out).
template <class T>
Var<T> matmul_right(const Var<T>& x, const Var<T>& m) {
  const std::size_t in = x.shape().back();
  if (m.ndim() != 2 || m.dim(0) != in) throw ShapeError("matmul_right: inner dimension mismatch");
  const std::size_t outd = m.dim(1);
  const std::size_t rows = x.value().size() / in;
  Shape s = x.shape();
  s.back() = outd;
  Tensor<T> out(s);
  MatMap<T>(out.data(), rows, outd).noalias() = CMatMap<T>(x.value().data(), rows, in) * CMatMap<T>(m.value().data(), in, outd);
  return make_result<T>(std::move(out), {x, m}, [rows, in, outd](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pm = *self.parents[1];
    CMatMap<T> G(self.grad.data(), rows, outd);
    if (px.requires_grad)
      MatMap<T>(px.grad_buffer().data(), rows, in).noalias() += G * CMatMap<T>(pm.value.data(), in, outd).transpose();
    if (pm.requires_grad)
      MatMap<T>(pm.grad_buffer().data(), in, outd).noalias() += CMatMap<T>(px.value.data(), rows, in).transpose() * G;
  });
}

/// Batched matmul on 3-d operands: (B, M, K) x (B, K, N) -> (B, M, N), with optional transposes.
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0)) throw ShapeError("bmm expects matching 3-d operands");
  const std::size_t batch = a.dim(0);
  const std::size_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t k2 = trans_b ? bc : br, n = trans_b ? br : bc;
  if (k != k2) throw ShapeError("bmm inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out(Shape{batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    CMatMap<T> A(a.value().data() + i * ar * ac, ar, ac);
    CMatMap<T> B(b.value().data() + i * br * bc, br, bc);
    MatMap<T> C(out.data() + i * m * n, m, n);
    if (!trans_a && !trans_b) C.noalias() = A * B;
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  return make_result<T>(std::move(out), {a, b}, [=](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < batch; ++i) {
      CMatMap<T> G(self.grad.data() + i * m * n, m, n);
      CMatMap<T> A(pa.value.data() + i * ar * ac, ar, ac);
      CMatMap<T> B(pb.value.data() + i * br * bc, br, bc);
      if (pa.requires_grad) {
        MatMap<T> GA(pa.grad_buffer().data() + i * ar * ac, ar, ac);
        // dC/dA for C = op(A) op(B)
        if (!trans_a && !trans_b) GA.noalias() += G * B.transpose();
        else if (!trans_a && trans_b) GA.noalias() += G * B;
        else if (trans_a && !trans_b) GA.noalias() += B * G.transpose();
        else GA.noalias() += B.transpose() * G.transpose();
      }
      if (pb.requires_grad) {
        MatMap<T> GB(pb.grad_buffer().data() + i * br * bc, br, bc);
        if (!trans_a && !trans_b) GB.noalias() += A.transpose() * G;
        else if (trans_a && !trans_b) GB.noalias() += A * G;
        else if (!trans_a && trans_b) GB.noalias() += G.transpose() * A;
        else GB.noalias() += G.transpose() * A.transpose();
      }
    }
  });
}

/// Multi-head scaled dot-product attention on (B, Lq, D) queries and (B, Lk, D) keys/values.
/// Heads are contiguous channel blocks of width D / heads.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads) {
  if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3) throw ShapeError("attention expects 3-d inputs");
  const std::size_t batch = q.dim(0), lq = q.dim(1), d = q.dim(2), lk = k.dim(1);
  if (k.dim(2) != d || v.shape() != k.shape() || k.dim(0) != batch) throw ShapeError("attention shape mismatch");
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: head count must divide channel width");
  const std::size_t dh = d / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  using Strided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
  Tensor<T> out(Shape{batch, lq, d});
  Tensor<T> probs(Shape{batch, heads, lq, lk});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      Strided Q(q.value().data() + b * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
      Strided K(k.value().data() + b * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
      Strided V(v.value().data() + b * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
      MatMap<T> P(probs.data() + (b * heads + h) * lq * lk, lq, lk);
      P.noalias() = (Q * K.transpose()) * sc;
      for (std::size_t i = 0; i < lq; ++i) {
        auto row = P.row(i);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      StridedMut O(out.data() + b * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
      O.noalias() = P * V;
    }
  return make_result<T>(std::move(out), {q, k, v}, [=, probs = std::move(probs)](Node<T>& self) {
    auto& pq = *self.parents[0];
    auto& pk = *self.parents[1];
    auto& pv = *self.parents[2];
    RowMat<T> dP(lq, lk);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        Strided G(self.grad.data() + b * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
        Strided Q(pq.value.data() + b * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
        Strided K(pk.value.data() + b * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
        Strided V(pv.value.data() + b * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
        CMatMap<T> P(probs.data() + (b * heads + h) * lq * lk, lq, lk);
        if (pv.requires_grad) {
          StridedMut GV(pv.grad_buffer().data() + b * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
          GV.noalias() += P.transpose() * G;
        }
        if (!pq.requires_grad && !pk.requires_grad) continue;
        dP.noalias() = G * V.transpose();
        for (std::size_t i = 0; i < lq; ++i) {
          const T dot = dP.row(i).dot(P.row(i));
          dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix() * sc;
        }
        if (pq.requires_grad) {
          StridedMut GQ(pq.grad_buffer().data() + b * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
          GQ.noalias() += dP * K;
        }
        if (pk.requires_grad) {
          StridedMut GK(pk.grad_buffer().data() + b * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
          GK.noalias() += dP.transpose() * Q;
        }
      }
  });
}

/// Rotates channel pairs (2p, 2p+1) of x (B, L, D) by angle[l, p]; channels beyond 2P pass through.
template <class T>
Var<T> rotate_pairs(const Var<T>& x, const Tensor<T>& cos_t, const Tensor<T>& sin_t) {
  if (x.ndim() != 3) throw ShapeError("rotate_pairs expects (B, L, D)");
  const std::size_t batch = x.dim(0), len = x.dim(1), d = x.dim(2);
  const std::size_t pairs = cos_t.dim(1);
  if (cos_t.dim(0) != len || 2 * pairs > d) throw ShapeError("rotate_pairs table mismatch");
  auto apply = [=](const T* in, T* o, const Tensor<T>& c, const Tensor<T>& s, T sign) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t l = 0; l < len; ++l) {
        const T* xi = in + (b * len + l) * d;
        T* yo = o + (b * len + l) * d;
        for (std::size_t p = 0; p < pairs; ++p) {
          const T cs = c[l * pairs + p], sn = sign * s[l * pairs + p];
          const T x0 = xi[2 * p], x1 = xi[2 * p + 1];
          yo[2 * p] += cs * x0 - sn * x1;
          yo[2 * p + 1] += sn * x0 + cs * x1;
        }
        for (std::size_t c2 = 2 * pairs; c2 < d; ++c2) yo[c2] += xi[c2];
      }
  };
  Tensor<T> out(x.shape());
  apply(x.value().data(), out.data(), cos_t, sin_t, T(1));
  return make_result<T>(std::move(out), {x}, [apply, cos_t, sin_t](Node<T>& self) {
    apply(self.grad.data(), self.parents[0]->grad_buffer().data(), cos_t, sin_t, T(-1));
  });
}

/// Mean squared error over all elements.
template <class T>
Var<T> mse(const Var<T>& pred, const Var<T>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("mse shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const std::size_t n = pred.value().size();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T e = pred.value()[i] - target.value()[i];
    acc += e * e;
  }
  return make_result<T>(Tensor<T>::scalar(acc / T(n)), {pred, target}, [n](Node<T>& self) {
    auto& pp = *self.parents[0];
    auto& pt = *self.parents[1];
    const T g = self.grad[0] * T(2) / T(n);
    if (pp.requires_grad) {
      auto& gp = pp.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gp[i] += g * (pp.value[i] - pt.value[i]);
    }
    if (pt.requires_grad) {
      auto& gt = pt.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gt[i] -= g * (pp.value[i] - pt.value[i]);
    }
  });
}

}  // namespace slotid::ad
