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

// Straight-line reference implementations used only by tests. They share no
// code with the library paths they check: explicit matrix inverses, dense
// KKT solves, and loop-based likelihood sums.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <vector>

#include "mtmpc/features.hpp"
#include "mtmpc/metatrain.hpp"
#include "mtmpc/mpc.hpp"

namespace mtmpc::oracles {

/// Conjugate posterior by explicit inversion of the precision matrix.
inline features::Posterior naive_posterior(const features::PriorSpec& prior,
                                           const Eigen::MatrixXd& phi,
                                           const Eigen::VectorXd& y,
                                           double sigma_w) {
  const Eigen::Index dim = prior.lambdas.size();
  Eigen::MatrixXd precision = Eigen::MatrixXd::Zero(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i) precision(i, i) = 1.0 / prior.lambdas[i];
  if (phi.rows() > 0) {
    precision += phi.transpose() * phi / (sigma_w * sigma_w);
  }
  features::Posterior post;
  post.covariance = precision.inverse();
  post.mean = phi.rows() > 0
                  ? Eigen::VectorXd(post.covariance * phi.transpose() * y /
                                    (sigma_w * sigma_w))
                  : Eigen::VectorXd::Zero(dim);
  return post;
}

/// Averaged negative log predictive likelihood, written as plain loops with
/// naive inversions.
inline double naive_nll(const metatrain::Hyperparams& hp,
                        const std::vector<metatrain::SplitDataset>& splits) {
  const double two_pi = 2.0 * std::numbers::pi;
  double total = 0.0;
  for (std::size_t m = 0; m < splits.size(); ++m) {
    const auto& split = splits[m];
    const double sigma = std::exp(hp.log_sigma_w[static_cast<Eigen::Index>(m)]);
    const int e = hp.num_frequencies();
    const auto eval = [&](const Eigen::VectorXd& z) {
      Eigen::VectorXd f(2 * e);
      for (int l = 0; l < e; ++l) {
        const double arg = two_pi * hp.frequencies.row(l).dot(z);
        f[l] = std::sin(arg);
        f[e + l] = std::cos(arg);
      }
      return f;
    };
    const auto n_train = static_cast<Eigen::Index>(split.train.size());
    Eigen::MatrixXd phi(n_train, 2 * e);
    Eigen::VectorXd y(n_train);
    for (Eigen::Index i = 0; i < n_train; ++i) {
      phi.row(i) = eval(split.train.inputs[static_cast<std::size_t>(i)]);
      y[i] = split.train.targets[static_cast<std::size_t>(i)];
    }
    features::PriorSpec prior{hp.log_lambdas.array().exp()};
    const features::Posterior post = naive_posterior(prior, phi, y, sigma);

    double task_nll = 0.0;
    for (std::size_t i = 0; i < split.validation.inputs.size(); ++i) {
      const Eigen::VectorXd f = eval(split.validation.inputs[i]);
      const double mean = f.dot(post.mean);
      const double var = sigma * sigma + f.dot(post.covariance * f);
      const double r = split.validation.targets[i] - mean;
      task_nll += 0.5 * std::log(two_pi * var) + r * r / (2.0 * var);
    }
    total += task_nll / static_cast<double>(split.validation.size());
  }
  return total / static_cast<double>(splits.size());
}

/// Equality-constrained QP solved through the dense KKT system with a
/// full-pivot LU factorization.
inline mpc::LqSolution dense_lq_solve(const mpc::LqProblem& problem) {
  const auto n = static_cast<int>(problem.stages.size());
  const auto nx = static_cast<int>(problem.dx0.size());
  const auto nu = static_cast<int>(problem.stages.front().B.cols());
  const int n_var = (n + 1) * nx + n * nu;
  const int n_con = (n + 1) * nx;

  const auto x_at = [nx](int k) { return k * nx; };
  const auto u_at = [n, nx, nu](int k) { return (n + 1) * nx + k * nu; };

  Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(n_var, n_var);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(n_var);
  for (int k = 0; k < n; ++k) {
    const auto& s = problem.stages[static_cast<std::size_t>(k)];
    hess.block(x_at(k), x_at(k), nx, nx) += s.Q;
    grad.segment(x_at(k), nx) += s.q;
    hess.block(u_at(k), u_at(k), nu, nu) += s.R;
    grad.segment(u_at(k), nu) += s.r;
  }
  hess.block(x_at(n), x_at(n), nx, nx) += problem.Qf;
  grad.segment(x_at(n), nx) += problem.qf;

  Eigen::MatrixXd con = Eigen::MatrixXd::Zero(n_con, n_var);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n_con);
  con.block(0, x_at(0), nx, nx).setIdentity();
  rhs.segment(0, nx) = problem.dx0;
  for (int k = 0; k < n; ++k) {
    const auto& s = problem.stages[static_cast<std::size_t>(k)];
    con.block((k + 1) * nx, x_at(k), nx, nx) = s.A;
    con.block((k + 1) * nx, u_at(k), nx, nu) = s.B;
    con.block((k + 1) * nx, x_at(k + 1), nx, nx) =
        -Eigen::MatrixXd::Identity(nx, nx);
    rhs.segment((k + 1) * nx, nx) = -s.d;
  }

  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n_var + n_con, n_var + n_con);
  kkt.topLeftCorner(n_var, n_var) = hess;
  kkt.topRightCorner(n_var, n_con) = con.transpose();
  kkt.bottomLeftCorner(n_con, n_var) = con;
  Eigen::VectorXd kkt_rhs(n_var + n_con);
  kkt_rhs << -grad, rhs;

  const Eigen::VectorXd sol = kkt.fullPivLu().solve(kkt_rhs);

  mpc::LqSolution out;
  out.dx.resize(static_cast<std::size_t>(n) + 1);
  out.du.resize(static_cast<std::size_t>(n));
  for (int k = 0; k <= n; ++k) {
    out.dx[static_cast<std::size_t>(k)] = sol.segment(x_at(k), nx);
  }
  for (int k = 0; k < n; ++k) {
    out.du[static_cast<std::size_t>(k)] = sol.segment(u_at(k), nu);
  }
  return out;
}

}  // namespace mtmpc::oracles
