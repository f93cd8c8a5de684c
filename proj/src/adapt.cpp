// Copyright 2026 The mtmpc Authors
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

#include "mtmpc/adapt.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "mtmpc/errors.hpp"

namespace mtmpc::adapt {

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;
constexpr double kSigmaRMin = 1e-4;
constexpr double kSigmaRMax = 1e2;

// Negative marginal log likelihood of the batch as a function of sigma_R,
// evaluated from the sufficient statistics (gram, a = Phi^T y, y^T y, N):
//
//   C = sigma_R I + Phi diag(lambda) Phi^T
//   log det C = (N - F) log sigma_R + log det(sigma_R diag(1/lambda) + G)
//               + sum log lambda
//   y^T C^-1 y = (y^T y - a^T (sigma_R diag(1/lambda) + G)^-1 a) / sigma_R
struct MarginalStats {
  Eigen::MatrixXd gram;
  Eigen::VectorXd a;
  double yy = 0.0;
  int n = 0;
  Eigen::VectorXd inv_lambda;
  double sum_log_lambda = 0.0;
};

double negative_marginal_ll(const MarginalStats& st, double sigma_r) {
  Eigen::MatrixXd b = st.gram;
  b.diagonal() += sigma_r * st.inv_lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(b);
  if (llt.info() != Eigen::Success) {
    throw NumericError("marginal-likelihood factorization failed");
  }
  const double logdet_b =
      2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const double logdet =
      (st.n - static_cast<int>(st.a.size())) * std::log(sigma_r) + logdet_b +
      st.sum_log_lambda;
  const double quad = (st.yy - st.a.dot(llt.solve(st.a))) / sigma_r;
  return 0.5 * (st.n * kLogTwoPi + logdet + quad);
}

}  // namespace

KalmanAdapterState init_adapter(const features::PriorSpec& prior, double sigma_Q,
                                double sigma_R) {
  if (sigma_R <= 0.0) throw std::invalid_argument("sigma_R must be positive");
  if (sigma_Q < 0.0) throw std::invalid_argument("sigma_Q must be nonnegative");
  if (prior.lambdas.size() == 0 || (prior.lambdas.array() <= 0.0).any()) {
    throw std::invalid_argument("prior variances must be positive");
  }
  KalmanAdapterState state;
  state.mean = Eigen::VectorXd::Zero(prior.lambdas.size());
  state.cov = prior.lambdas.asDiagonal();
  state.sigma_Q = sigma_Q;
  state.sigma_R = sigma_R;
  return state;
}

KalmanAdapterState kalman_step(const KalmanAdapterState& state,
                               const Eigen::VectorXd& phi, double y) {
  if (phi.size() != state.mean.size()) {
    throw std::invalid_argument("feature vector and adapter dimension disagree");
  }
  if (!std::isfinite(y)) throw std::invalid_argument("measurement must be finite");

  const Eigen::Index dim = phi.size();
  Eigen::MatrixXd p_pred = state.cov;
  p_pred.diagonal().array() += state.sigma_Q;

  const Eigen::VectorXd pphi = p_pred * phi;
  const double innovation_var = phi.dot(pphi) + state.sigma_R;
  if (!(innovation_var > 0.0)) {
    std::ostringstream msg;
    msg << "innovation variance is not positive: " << innovation_var;
    throw NumericError(msg.str());
  }
  const Eigen::VectorXd gain = pphi / innovation_var;

  KalmanAdapterState next = state;
  next.mean = state.mean + gain * (y - phi.dot(state.mean));
  const Eigen::MatrixXd ikh =
      Eigen::MatrixXd::Identity(dim, dim) - gain * phi.transpose();
  next.cov = ikh * p_pred * ikh.transpose() +
             gain * state.sigma_R * gain.transpose();
  next.cov = 0.5 * (next.cov + next.cov.transpose()).eval();
  return next;
}

NoiseEstimate estimate_measurement_noise(
    const std::vector<std::pair<Eigen::VectorXd, double>>& batch,
    const features::PriorSpec& prior) {
  if (batch.size() < 5) {
    throw std::invalid_argument("noise estimation needs a batch of at least 5");
  }
  const Eigen::Index dim = prior.lambdas.size();

  bool identical = true;
  for (const auto& [phi, y] : batch) {
    if (phi.size() != dim) {
      throw std::invalid_argument("batch feature dim and prior disagree");
    }
    if ((phi - batch.front().first).cwiseAbs().maxCoeff() > 1e-12 ||
        std::abs(y - batch.front().second) > 1e-12) {
      identical = false;
    }
  }
  if (identical) {
    return {kSigmaRMin, true, true};
  }

  MarginalStats st;
  st.gram = Eigen::MatrixXd::Zero(dim, dim);
  st.a = Eigen::VectorXd::Zero(dim);
  st.n = static_cast<int>(batch.size());
  for (const auto& [phi, y] : batch) {
    st.gram.selfadjointView<Eigen::Lower>().rankUpdate(phi);
    st.a += phi * y;
    st.yy += y * y;
  }
  st.gram.triangularView<Eigen::StrictlyUpper>() =
      st.gram.transpose().triangularView<Eigen::StrictlyUpper>();
  st.inv_lambda = prior.lambdas.cwiseInverse();
  st.sum_log_lambda = prior.lambdas.array().log().sum();

  // Coarse grid over log10 sigma_R, then golden-section in the bracketing
  // interval.
  const double lo = std::log(kSigmaRMin);
  const double hi = std::log(kSigmaRMax);
  const int grid = 121;
  int best_idx = 0;
  double best_val = std::numeric_limits<double>::infinity();
  for (int i = 0; i < grid; ++i) {
    const double log_sigma = lo + (hi - lo) * i / (grid - 1);
    const double val = negative_marginal_ll(st, std::exp(log_sigma));
    if (val < best_val) {
      best_val = val;
      best_idx = i;
    }
  }
  if (best_idx == 0) {
    return {kSigmaRMin, true, false};
  }

  double a = lo + (hi - lo) * (best_idx - 1) / (grid - 1);
  double b = lo + (hi - lo) * std::min(best_idx + 1, grid - 1) / (grid - 1);
  const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = b - ratio * (b - a);
  double x2 = a + ratio * (b - a);
  double f1 = negative_marginal_ll(st, std::exp(x1));
  double f2 = negative_marginal_ll(st, std::exp(x2));
  for (int it = 0; it < 80 && (b - a) > 1e-10; ++it) {
    if (f1 < f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - ratio * (b - a);
      f1 = negative_marginal_ll(st, std::exp(x1));
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + ratio * (b - a);
      f2 = negative_marginal_ll(st, std::exp(x2));
    }
  }
  const double sigma_r = std::exp(0.5 * (a + b));
  NoiseEstimate est;
  est.sigma_R = sigma_r;
  est.at_lower_bound = sigma_r <= kSigmaRMin * (1.0 + 1e-6);
  if (est.at_lower_bound) est.sigma_R = kSigmaRMin;
  return est;
}

AccelEstimatorState init_accel_estimator(double q_jerk,
                                         const Eigen::Matrix2d& r_meas,
                                         double initial_cov) {
  if (q_jerk < 0.0) throw std::invalid_argument("q_jerk must be nonnegative");
  AccelEstimatorState state;
  state.cov = initial_cov * Eigen::Matrix3d::Identity();
  state.q_jerk = q_jerk;
  state.r_meas = r_meas;
  return state;
}

AccelEstimatorState accel_estimator_step(const AccelEstimatorState& state,
                                         const Eigen::Vector2d& meas, double dt) {
  if (dt <= 0.0) throw std::invalid_argument("estimator step requires dt > 0");

  Eigen::Matrix3d f;
  f << 1.0, dt, 0.5 * dt * dt,  //
      0.0, 1.0, dt,             //
      0.0, 0.0, 1.0;

  // White-jerk process noise integrated over the step.
  const double d2 = dt * dt, d3 = d2 * dt, d4 = d3 * dt, d5 = d4 * dt;
  Eigen::Matrix3d q;
  q << d5 / 20.0, d4 / 8.0, d3 / 6.0,  //
      d4 / 8.0, d3 / 3.0, d2 / 2.0,    //
      d3 / 6.0, d2 / 2.0, dt;
  q *= state.q_jerk;

  const Eigen::Vector3d x_pred = f * state.state;
  const Eigen::Matrix3d p_pred = f * state.cov * f.transpose() + q;

  Eigen::Matrix<double, 2, 3> h;
  h << 1.0, 0.0, 0.0,  //
      0.0, 1.0, 0.0;
  const Eigen::Matrix2d innovation_cov =
      h * p_pred * h.transpose() + state.r_meas;
  Eigen::LLT<Eigen::Matrix2d> llt(innovation_cov);
  if (llt.info() != Eigen::Success) {
    throw NumericError("accel estimator innovation covariance is not SPD");
  }
  const Eigen::Matrix<double, 3, 2> gain =
      p_pred * h.transpose() * llt.solve(Eigen::Matrix2d::Identity());

  AccelEstimatorState next = state;
  next.state = x_pred + gain * (meas - h * x_pred);
  const Eigen::Matrix3d ikh = Eigen::Matrix3d::Identity() - gain * h;
  next.cov = ikh * p_pred * ikh.transpose() +
             gain * state.r_meas * gain.transpose();
  next.cov = 0.5 * (next.cov + next.cov.transpose()).eval();
  return next;
}

}  // namespace mtmpc::adapt
