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

#pragma once

#include <Eigen/Dense>

#include <utility>
#include <vector>

#include "mtmpc/features.hpp"

namespace mtmpc::adapt {

// Random-walk Kalman filter over the linear feature weights of one error
// channel. NOTE: unlike the features module (which takes noise *standard
// deviations*), sigma_Q and sigma_R here are *variances*, matching the
// filter's process/measurement noise parameterization.
struct KalmanAdapterState {
  Eigen::VectorXd mean;    // current weight estimate
  Eigen::MatrixXd cov;     // P, SPD
  double sigma_Q = 0.0;    // process-noise variance per weight element
  double sigma_R = 1e-2;   // measurement-noise variance
};

/// Adapter initialized at the trained prior: zero mean, diag(lambda)
/// covariance.
KalmanAdapterState init_adapter(const features::PriorSpec& prior, double sigma_Q,
                                double sigma_R);

/// One predict/update cycle with a scalar measurement y at features phi.
/// The covariance update uses the Joseph form.
KalmanAdapterState kalman_step(const KalmanAdapterState& state,
                               const Eigen::VectorXd& phi, double y);

struct NoiseEstimate {
  double sigma_R = 0.0;        // measurement-noise variance
  bool at_lower_bound = false;
  bool degenerate = false;     // batch carried no noise information
};

/// Maximizes the Gaussian marginal likelihood of an initial batch over the
/// measurement-noise variance (grid over log sigma_R in [1e-4, 1e2],
/// golden-section refinement), under the prior-weighted linear model.
NoiseEstimate estimate_measurement_noise(
    const std::vector<std::pair<Eigen::VectorXd, double>>& batch,
    const features::PriorSpec& prior);

// Constant-acceleration Kalman filter producing smooth acceleration
// estimates from (angle, rate) measurements.
struct AccelEstimatorState {
  Eigen::Vector3d state = Eigen::Vector3d::Zero();  // (alpha, rate, accel)
  Eigen::Matrix3d cov = Eigen::Matrix3d::Identity();
  double q_jerk = 1.0;                              // process-noise intensity
  Eigen::Matrix2d r_meas = Eigen::Matrix2d::Identity();
};

AccelEstimatorState init_accel_estimator(double q_jerk,
                                         const Eigen::Matrix2d& r_meas,
                                         double initial_cov = 1.0);

AccelEstimatorState accel_estimator_step(const AccelEstimatorState& state,
                                         const Eigen::Vector2d& meas, double dt);

}  // namespace mtmpc::adapt
