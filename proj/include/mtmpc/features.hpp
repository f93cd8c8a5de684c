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

#include <optional>
#include <vector>

namespace mtmpc::features {

// Trigonometric feature map over input locations z in R^d:
//
//   phi_l(z)      = sin(2 pi w_l . z)        l = 1..E
//   phi_{E+l}(z)  = cos(2 pi w_l . z)        l = 1..E
//
// The frequency rows w_l are shared across tasks; only the linear weights
// combining the features are task-specific.
struct TrigFeatureMap {
  Eigen::MatrixXd frequencies;  // E x d

  int num_frequencies() const { return static_cast<int>(frequencies.rows()); }
  int input_dim() const { return static_cast<int>(frequencies.cols()); }
  int output_dim() const { return 2 * num_frequencies(); }
};

// Two tanh hidden layers followed by a linear feature layer; the L outputs
// are the feature vector (no appended bias feature).
struct MlpWeights {
  Eigen::MatrixXd w1, w2, w3;  // h x d, h x h, L x h
  Eigen::VectorXd b1, b2, b3;  // h, h, L

  int input_dim() const { return static_cast<int>(w1.cols()); }
  int hidden_dim() const { return static_cast<int>(w1.rows()); }
  int feature_dim() const { return static_cast<int>(w3.rows()); }
};

enum class FeatureKind { kTrig, kConstant, kMlp };

struct FeatureModel {
  FeatureKind kind = FeatureKind::kConstant;
  std::optional<TrigFeatureMap> trig;
  std::optional<MlpWeights> mlp;
  int feature_dim = 1;

  static FeatureModel constant();
  static FeatureModel trig_features(Eigen::MatrixXd frequencies);
  static FeatureModel mlp_features(MlpWeights weights);

  /// Expected input-location dimension; -1 for the constant model, which
  /// accepts any.
  int input_dim() const;
};

/// Diagonal Gaussian prior over the linear weights.
struct PriorSpec {
  Eigen::VectorXd lambdas;  // prior variances, all > 0
};

/// Gaussian posterior over the linear weights of one error channel.
struct Posterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

Eigen::VectorXd eval_features(const FeatureModel& model, const Eigen::VectorXd& z);

/// phi(z) together with d phi / d z (feature_dim x d). Used by the
/// controller's analytic dynamics linearization.
void eval_features_jacobian(const FeatureModel& model, const Eigen::VectorXd& z,
                            Eigen::VectorXd& phi, Eigen::MatrixXd& dphi_dz);

/// Row-wise feature matrix for a batch of input locations (N x feature_dim).
Eigen::MatrixXd feature_matrix(const FeatureModel& model,
                               const std::vector<Eigen::VectorXd>& zs);

// Conjugate Bayesian linear regression. NOTE: sigma_w is a *standard
// deviation* at every interface in this module; the likelihood variance is
// sigma_w^2. The update factorizes the posterior precision
// diag(1/lambda) + Phi^T Phi / sigma_w^2 with a Cholesky decomposition.
Posterior posterior_update(const PriorSpec& prior, const Eigen::MatrixXd& Phi,
                           const Eigen::VectorXd& y, double sigma_w);

/// General-covariance conjugate update, letting a posterior feed forward as
/// the prior of the next batch.
Posterior posterior_update(const Posterior& prior, const Eigen::MatrixXd& Phi,
                           const Eigen::VectorXd& y, double sigma_w);

struct Prediction {
  double mean = 0.0;
  double variance = 0.0;
};

/// Predictive distribution of a new measurement at z:
/// mean = phi(z)^T mu, variance = sigma_w^2 + phi(z)^T Sigma phi(z).
Prediction predict(const Posterior& post, const FeatureModel& model,
                   const Eigen::VectorXd& z, double sigma_w);

Prediction predict_from_features(const Posterior& post, const Eigen::VectorXd& phi,
                                 double sigma_w);

}  // namespace mtmpc::features
