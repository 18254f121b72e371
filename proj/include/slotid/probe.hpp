#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace slotid::eval {

struct ProbeResult {
  std::vector<double> r2;  // held-out R^2 per target dimension
  double lambda = 0;       // selected ridge strength

  double mean_r2() const { return r2.empty() ? 0.0 : std::accumulate(r2.begin(), r2.end(), 0.0) / double(r2.size()); }
  double mean_r2(const std::vector<std::size_t>& dims) const {
    double s = 0;
    for (auto d : dims) s += r2.at(d);
    return dims.empty() ? 0.0 : s / double(dims.size());
  }
};

/// Ridge regression with standardized features and centered targets, solved in whichever of the
/// primal/dual forms is smaller.
class RidgeModel {
 public:
  void fit(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lambda) {
    mu_ = x.colwise().mean();
    sd_ = ((x.rowwise() - mu_).array().square().colwise().sum() / double(x.rows())).sqrt();
    for (Eigen::Index j = 0; j < sd_.size(); ++j)
      if (sd_(j) < 1e-12) sd_(j) = 1.0;
    ymu_ = y.colwise().mean();
    const Eigen::MatrixXd xs = standardize(x);
    const Eigen::MatrixXd yc = y.rowwise() - ymu_;
    const auto n = xs.rows(), p = xs.cols();
    if (p <= n) {
      Eigen::MatrixXd a = xs.transpose() * xs;
      a.diagonal().array() += lambda;
      w_ = a.ldlt().solve(xs.transpose() * yc);
    } else {
      Eigen::MatrixXd k = xs * xs.transpose();
      k.diagonal().array() += lambda;
      w_ = xs.transpose() * k.ldlt().solve(yc);
    }
  }

  Eigen::MatrixXd predict(const Eigen::MatrixXd& x) const { return (standardize(x) * w_).rowwise() + ymu_; }

 private:
  Eigen::MatrixXd standardize(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - mu_).array().rowwise() / sd_.array();
  }

  Eigen::RowVectorXd mu_, sd_, ymu_;
  Eigen::MatrixXd w_;
};

inline std::vector<double> r2_scores(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& y) {
  std::vector<double> r2(static_cast<std::size_t>(y.cols()));
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    const double mean = y.col(j).mean();
    const double sst = (y.col(j).array() - mean).square().sum();
    const double sse = (y.col(j) - pred.col(j)).squaredNorm();
    r2[static_cast<std::size_t>(j)] = sst > 0 ? 1.0 - sse / sst : 0.0;
  }
  return r2;
}

inline const std::vector<double>& default_lambda_grid() {
  static const std::vector<double> grid{1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3, 1e4};
  return grid;
}

/// Fits a ridge map from features to targets on the train split (ridge strength by 5-fold CV)
/// and reports held-out R^2 per target dimension.
inline ProbeResult ridge_probe(const Eigen::MatrixXd& x_train, const Eigen::MatrixXd& y_train,
                               const Eigen::MatrixXd& x_test, const Eigen::MatrixXd& y_test,
                               const std::vector<double>& lambdas = default_lambda_grid(), int folds = 5) {
  if (x_train.rows() != y_train.rows() || x_test.rows() != y_test.rows() || x_train.cols() != x_test.cols())
    throw std::invalid_argument("ridge_probe: inconsistent shapes");
  if (x_train.rows() < folds) throw std::invalid_argument("ridge_probe: too few training rows");
  const auto n = x_train.rows();
  double best_lambda = lambdas.front(), best_err = std::numeric_limits<double>::infinity();
  for (double lam : lambdas) {
    double err = 0;
    for (int f = 0; f < folds; ++f) {
      std::vector<Eigen::Index> tr, va;
      for (Eigen::Index i = 0; i < n; ++i) (i % folds == f ? va : tr).push_back(i);
      Eigen::MatrixXd xt(tr.size(), x_train.cols()), yt(tr.size(), y_train.cols());
      Eigen::MatrixXd xv(va.size(), x_train.cols()), yv(va.size(), y_train.cols());
      for (std::size_t i = 0; i < tr.size(); ++i) xt.row(i) = x_train.row(tr[i]), yt.row(i) = y_train.row(tr[i]);
      for (std::size_t i = 0; i < va.size(); ++i) xv.row(i) = x_train.row(va[i]), yv.row(i) = y_train.row(va[i]);
      RidgeModel m;
      m.fit(xt, yt, lam);
      err += (m.predict(xv) - yv).squaredNorm();
    }
    if (err < best_err) best_err = err, best_lambda = lam;
  }
  RidgeModel m;
  m.fit(x_train, y_train, best_lambda);
  ProbeResult r;
  r.lambda = best_lambda;
  r.r2 = r2_scores(m.predict(x_test), y_test);
  return r;
}

}  // namespace slotid::eval
