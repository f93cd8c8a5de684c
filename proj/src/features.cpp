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

#include "mtmpc/features.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "mtmpc/errors.hpp"

namespace mtmpc::features {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void check_input_dim(const FeatureModel& model, const Eigen::VectorXd& z) {
  const int expected = model.input_dim();
  if (expected >= 0 && z.size() != expected) {
    std::ostringstream msg;
    msg << "feature model expects input location dim " << expected << ", got "
        << z.size();
    throw std::invalid_argument(msg.str());
  }
}

Eigen::MatrixXd stack_rows(const std::vector<Eigen::VectorXd>& zs, int dim) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(zs.size()), dim);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    out.row(i) = zs[static_cast<std::size_t>(i)].transpose();
  }
  return out;
}

/// Cholesky of the posterior precision; throws with an eigenvalue diagnostic
/// when the matrix is not SPD.
Eigen::LLT<Eigen::MatrixXd> factor_precision(const Eigen::MatrixXd& precision) {
  Eigen::LLT<Eigen::MatrixXd> llt(precision);
  if (llt.info() != Eigen::Success) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(precision);
    std::ostringstream msg;
    msg << "posterior precision is not SPD: eigenvalues in ["
        << eig.eigenvalues().minCoeff() << ", " << eig.eigenvalues().maxCoeff()
        << "], condition ~ "
        << eig.eigenvalues().maxCoeff() /
               std::max(std::abs(eig.eigenvalues().minCoeff()), 1e-300);
    throw NumericError(msg.str());
  }
  return llt;
}

Posterior update_with_precision(Eigen::MatrixXd precision, Eigen::VectorXd rhs) {
  const auto llt = factor_precision(precision);
  Posterior post;
  post.covariance = llt.solve(
      Eigen::MatrixXd::Identity(precision.rows(), precision.cols()));
  post.covariance = 0.5 * (post.covariance + post.covariance.transpose()).eval();
  post.mean = llt.solve(rhs);
  return post;
}

}  // namespace

FeatureModel FeatureModel::constant() {
  FeatureModel model;
  model.kind = FeatureKind::kConstant;
  model.feature_dim = 1;
  return model;
}

FeatureModel FeatureModel::trig_features(Eigen::MatrixXd frequencies) {
  if (frequencies.rows() < 1 || !frequencies.allFinite()) {
    throw std::invalid_argument("trig features need at least one finite frequency row");
  }
  FeatureModel model;
  model.kind = FeatureKind::kTrig;
  model.trig = TrigFeatureMap{std::move(frequencies)};
  model.feature_dim = model.trig->output_dim();
  return model;
}

FeatureModel FeatureModel::mlp_features(MlpWeights weights) {
  const int h = weights.hidden_dim();
  if (weights.w2.rows() != h || weights.w2.cols() != h || weights.w3.cols() != h ||
      weights.b1.size() != h || weights.b2.size() != h ||
      weights.b3.size() != weights.w3.rows()) {
    throw std::invalid_argument("inconsistent mlp weight shapes");
  }
  FeatureModel model;
  model.kind = FeatureKind::kMlp;
  model.mlp = std::move(weights);
  model.feature_dim = model.mlp->feature_dim();
  return model;
}

int FeatureModel::input_dim() const {
  switch (kind) {
    case FeatureKind::kTrig:
      return trig->input_dim();
    case FeatureKind::kMlp:
      return mlp->input_dim();
    case FeatureKind::kConstant:
      return -1;
  }
  return -1;
}

Eigen::VectorXd eval_features(const FeatureModel& model, const Eigen::VectorXd& z) {
  check_input_dim(model, z);
  switch (model.kind) {
    case FeatureKind::kConstant:
      return Eigen::VectorXd::Ones(1);
    case FeatureKind::kTrig: {
      const int e = model.trig->num_frequencies();
      const Eigen::VectorXd arg = kTwoPi * (model.trig->frequencies * z);
      Eigen::VectorXd phi(2 * e);
      phi.head(e) = arg.array().sin();
      phi.tail(e) = arg.array().cos();
      return phi;
    }
    case FeatureKind::kMlp: {
      const auto& m = *model.mlp;
      const Eigen::VectorXd h1 = (m.w1 * z + m.b1).array().tanh();
      const Eigen::VectorXd h2 = (m.w2 * h1 + m.b2).array().tanh();
      return m.w3 * h2 + m.b3;
    }
  }
  throw std::invalid_argument("unknown feature kind");
}

void eval_features_jacobian(const FeatureModel& model, const Eigen::VectorXd& z,
                            Eigen::VectorXd& phi, Eigen::MatrixXd& dphi_dz) {
  check_input_dim(model, z);
  switch (model.kind) {
    case FeatureKind::kConstant:
      phi = Eigen::VectorXd::Ones(1);
      dphi_dz = Eigen::MatrixXd::Zero(1, z.size());
      return;
    case FeatureKind::kTrig: {
      const int e = model.trig->num_frequencies();
      const Eigen::MatrixXd& w = model.trig->frequencies;
      const Eigen::VectorXd arg = kTwoPi * (w * z);
      phi.resize(2 * e);
      phi.head(e) = arg.array().sin();
      phi.tail(e) = arg.array().cos();
      dphi_dz.resize(2 * e, z.size());
      // d sin / dz = 2 pi cos(arg) w_l ; d cos / dz = -2 pi sin(arg) w_l
      dphi_dz.topRows(e) = kTwoPi * phi.tail(e).asDiagonal() * w;
      dphi_dz.bottomRows(e) = -kTwoPi * phi.head(e).asDiagonal() * w;
      return;
    }
    case FeatureKind::kMlp: {
      const auto& m = *model.mlp;
      const Eigen::VectorXd h1 = (m.w1 * z + m.b1).array().tanh();
      const Eigen::VectorXd h2 = (m.w2 * h1 + m.b2).array().tanh();
      phi = m.w3 * h2 + m.b3;
      const Eigen::VectorXd d1 = 1.0 - h1.array().square();
      const Eigen::VectorXd d2 = 1.0 - h2.array().square();
      dphi_dz = m.w3 * d2.asDiagonal() * m.w2 * d1.asDiagonal() * m.w1;
      return;
    }
  }
  throw std::invalid_argument("unknown feature kind");
}

Eigen::MatrixXd feature_matrix(const FeatureModel& model,
                               const std::vector<Eigen::VectorXd>& zs) {
  const auto n = static_cast<Eigen::Index>(zs.size());
  if (n == 0) return Eigen::MatrixXd(0, model.feature_dim);
  switch (model.kind) {
    case FeatureKind::kConstant:
      return Eigen::MatrixXd::Ones(n, 1);
    case FeatureKind::kTrig: {
      const int e = model.trig->num_frequencies();
      const Eigen::MatrixXd z = stack_rows(zs, model.trig->input_dim());
      const Eigen::MatrixXd arg = kTwoPi * (z * model.trig->frequencies.transpose());
      Eigen::MatrixXd phi(n, 2 * e);
      phi.leftCols(e) = arg.array().sin();
      phi.rightCols(e) = arg.array().cos();
      return phi;
    }
    case FeatureKind::kMlp: {
      const auto& m = *model.mlp;
      const Eigen::MatrixXd z = stack_rows(zs, m.input_dim());
      const Eigen::MatrixXd h1 =
          ((z * m.w1.transpose()).rowwise() + m.b1.transpose()).array().tanh();
      const Eigen::MatrixXd h2 =
          ((h1 * m.w2.transpose()).rowwise() + m.b2.transpose()).array().tanh();
      return (h2 * m.w3.transpose()).rowwise() + m.b3.transpose();
    }
  }
  throw std::invalid_argument("unknown feature kind");
}

Posterior posterior_update(const PriorSpec& prior, const Eigen::MatrixXd& Phi,
                           const Eigen::VectorXd& y, double sigma_w) {
  if (sigma_w <= 0.0) throw std::invalid_argument("sigma_w must be positive");
  if ((prior.lambdas.array() <= 0.0).any()) {
    throw std::invalid_argument("prior variances must be positive");
  }
  const Eigen::Index dim = prior.lambdas.size();
  if (Phi.rows() != y.size()) {
    throw std::invalid_argument("Phi rows and y length disagree");
  }
  if (Phi.rows() == 0) {
    Posterior post;
    post.mean = Eigen::VectorXd::Zero(dim);
    post.covariance = prior.lambdas.asDiagonal();
    return post;
  }
  if (Phi.cols() != dim) {
    throw std::invalid_argument("Phi columns and prior dimension disagree");
  }
  const double inv_var = 1.0 / (sigma_w * sigma_w);
  Eigen::MatrixXd precision = prior.lambdas.cwiseInverse().asDiagonal();
  precision.selfadjointView<Eigen::Lower>().rankUpdate(Phi.transpose(), inv_var);
  precision.triangularView<Eigen::StrictlyUpper>() =
      precision.transpose().triangularView<Eigen::StrictlyUpper>();
  return update_with_precision(std::move(precision),
                               Phi.transpose() * y * inv_var);
}

Posterior posterior_update(const Posterior& prior, const Eigen::MatrixXd& Phi,
                           const Eigen::VectorXd& y, double sigma_w) {
  if (sigma_w <= 0.0) throw std::invalid_argument("sigma_w must be positive");
  const Eigen::Index dim = prior.mean.size();
  if (Phi.rows() != y.size()) {
    throw std::invalid_argument("Phi rows and y length disagree");
  }
  const auto prior_llt = factor_precision(prior.covariance);
  const Eigen::MatrixXd prior_precision =
      prior_llt.solve(Eigen::MatrixXd::Identity(dim, dim));
  if (Phi.rows() == 0) return prior;
  if (Phi.cols() != dim) {
    throw std::invalid_argument("Phi columns and prior dimension disagree");
  }
  const double inv_var = 1.0 / (sigma_w * sigma_w);
  Eigen::MatrixXd precision = prior_precision;
  precision.selfadjointView<Eigen::Lower>().rankUpdate(Phi.transpose(), inv_var);
  precision.triangularView<Eigen::StrictlyUpper>() =
      precision.transpose().triangularView<Eigen::StrictlyUpper>();
  return update_with_precision(
      std::move(precision),
      prior_precision * prior.mean + Phi.transpose() * y * inv_var);
}

Prediction predict_from_features(const Posterior& post, const Eigen::VectorXd& phi,
                                 double sigma_w) {
  if (sigma_w <= 0.0) throw std::invalid_argument("sigma_w must be positive");
  if (phi.size() != post.mean.size()) {
    throw std::invalid_argument("feature vector and posterior dimension disagree");
  }
  Prediction pred;
  pred.mean = phi.dot(post.mean);
  pred.variance = sigma_w * sigma_w + phi.dot(post.covariance * phi);
  if (!(pred.variance > 0.0)) {
    std::ostringstream msg;
    msg << "predictive variance is not positive: " << pred.variance;
    throw NumericError(msg.str());
  }
  return pred;
}

Prediction predict(const Posterior& post, const FeatureModel& model,
                   const Eigen::VectorXd& z, double sigma_w) {
  return predict_from_features(post, eval_features(model, z), sigma_w);
}

}  // namespace mtmpc::features
