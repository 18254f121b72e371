#pragma once

// Independent reference implementations used only by the tests: plain loops in extended
// precision, no shared code with the library beyond the Tensor container.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "slotid/tensor.hpp"

namespace oracle {

using Mat = std::vector<std::vector<long double>>;

/// Plain-domain iterative proportional fitting with explicit scaling vectors, uniform marginals.
/// Same update order as the log-domain solver: u from row sums, then v from column sums.
inline Mat ipf(const std::vector<std::vector<double>>& logits, int iters) {
  const std::size_t s = logits.size(), l = logits[0].size();
  Mat k(s, std::vector<long double>(l));
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < l; ++j) k[i][j] = std::exp(static_cast<long double>(logits[i][j]));
  std::vector<long double> u(s, 1.0L), v(l, 1.0L);
  const long double a = 1.0L / s, b = 1.0L / l;
  for (int it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < s; ++i) {
      long double r = 0;
      for (std::size_t j = 0; j < l; ++j) r += k[i][j] * v[j];
      u[i] = a / r;
    }
    for (std::size_t j = 0; j < l; ++j) {
      long double c = 0;
      for (std::size_t i = 0; i < s; ++i) c += k[i][j] * u[i];
      v[j] = b / c;
    }
  }
  Mat p(s, std::vector<long double>(l));
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < l; ++j) p[i][j] = u[i] * k[i][j] * v[j];
  return p;
}

/// Exhaustive search for the permutation maximizing sum_i score[i][perm[i]].
inline std::vector<std::size_t> best_assignment(const std::vector<std::vector<double>>& score) {
  std::vector<std::size_t> perm(score.size()), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_v = -INFINITY;
  do {
    double v = 0;
    for (std::size_t i = 0; i < perm.size(); ++i) v += score[i][perm[i]];
    if (v > best_v) best_v = v, best = perm;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Best and second-best permutation values, for checking that an optimum is unique.
inline std::pair<double, double> top_two_assignments(const std::vector<std::vector<double>>& score) {
  std::vector<std::size_t> perm(score.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<double> vals;
  do {
    double v = 0;
    for (std::size_t i = 0; i < perm.size(); ++i) v += score[i][perm[i]];
    vals.push_back(v);
  } while (std::next_permutation(perm.begin(), perm.end()));
  std::sort(vals.rbegin(), vals.rend());
  return {vals[0], vals[1]};
}

/// Row-then-column division with epsilon guards, in long double.
inline Mat renormalize(const Mat& p, long double eps) {
  Mat r = p;
  for (auto& row : r) {
    long double s = 0;
    for (auto x : row) s += x;
    for (auto& x : row) x /= (s + eps);
  }
  for (std::size_t j = 0; j < r[0].size(); ++j) {
    long double s = 0;
    for (auto& row : r) s += row[j];
    for (auto& row : r) row[j] /= (s + eps);
  }
  return r;
}

inline long double sigmoid(long double x) { return 1.0L / (1.0L + std::exp(-x)); }

/// y = W x + b with W stored (out, in).
inline std::vector<long double> affine(const slotid::Tensor<double>& w, const slotid::Tensor<double>& b,
                                       const std::vector<long double>& x) {
  const std::size_t out = w.dim(0), in = w.dim(1);
  std::vector<long double> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    long double acc = b.size() ? b[o] : 0.0L;
    for (std::size_t i = 0; i < in; ++i) acc += static_cast<long double>(w[o * in + i]) * x[i];
    y[o] = acc;
  }
  return y;
}

inline std::vector<long double> layer_norm(const std::vector<long double>& x, const slotid::Tensor<double>& g,
                                           const slotid::Tensor<double>& b, long double eps = 1e-5L) {
  long double m = 0, v = 0;
  for (auto e : x) m += e;
  m /= x.size();
  for (auto e : x) v += (e - m) * (e - m);
  v /= x.size();
  std::vector<long double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const long double n = (x[i] - m) / std::sqrt(v + eps);
    y[i] = g.size() ? n * g[i] + b[i] : n;
  }
  return y;
}

inline long double max_abs(const Mat& a, const Mat& b) {
  long double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  return m;
}

}  // namespace oracle
