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

#include <doctest.h>

#include "mtmpc/errors.hpp"
#include "mtmpc/rng.hpp"
#include "oracles.hpp"

using namespace mtmpc;
using namespace mtmpc::features;

namespace {

FeatureModel random_trig(Rng& rng, int e, int d) {
  Eigen::MatrixXd freqs(e, d);
  for (int i = 0; i < e; ++i)
    for (int j = 0; j < d; ++j) freqs(i, j) = rng.normal();
  return FeatureModel::trig_features(freqs);
}

}  // namespace

TEST_CASE("trig features at z = 0 and the quarter period") {
  Rng rng(1);
  const FeatureModel model = random_trig(rng, 3, 2);
  const Eigen::VectorXd phi = eval_features(model, Eigen::VectorXd::Zero(2));
  CHECK(phi.head(3).cwiseAbs().maxCoeff() == 0.0);
  CHECK((phi.tail(3).array() - 1.0).abs().maxCoeff() == 0.0);

  Eigen::MatrixXd quarter(1, 1);
  quarter << 0.25;
  const FeatureModel single = FeatureModel::trig_features(quarter);
  Eigen::VectorXd z(1);
  z << 1.0;
  const Eigen::VectorXd phi1 = eval_features(single, z);
  CHECK(phi1[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(phi1[1] == doctest::Approx(0.0).epsilon(1e-12));

  const FeatureModel constant = FeatureModel::constant();
  CHECK(eval_features(constant, z)[0] == 1.0);
}

TEST_CASE("trig features are bounded by one") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const FeatureModel model = random_trig(rng, 4, 2);
    Eigen::VectorXd z(2);
    z << 10.0 * rng.normal(), 10.0 * rng.normal();
    CHECK(eval_features(model, z).cwiseAbs().maxCoeff() <= 1.0);
  }
}

TEST_CASE("posterior with no data is the prior") {
  PriorSpec prior{Eigen::Vector3d{0.5, 1.0, 2.0}};
  const Posterior post =
      posterior_update(prior, Eigen::MatrixXd(0, 3), Eigen::VectorXd(0), 0.1);
  CHECK(post.mean.norm() == 0.0);
  CHECK((post.covariance - Eigen::MatrixXd(prior.lambdas.asDiagonal())).norm() ==
        0.0);
}

TEST_CASE("uninformative data keeps the prior") {
  Rng rng(3);
  PriorSpec prior{Eigen::Vector2d{1.5, 0.7}};
  Eigen::MatrixXd phi(10, 2);
  Eigen::VectorXd y(10);
  for (int i = 0; i < 10; ++i) {
    phi(i, 0) = rng.normal();
    phi(i, 1) = rng.normal();
    y[i] = rng.normal();
  }
  const Posterior post = posterior_update(prior, phi, y, 1e6);
  CHECK(post.mean.cwiseAbs().maxCoeff() < 1e-6);
  CHECK((post.covariance - Eigen::MatrixXd(prior.lambdas.asDiagonal()))
            .cwiseAbs()
            .maxCoeff() < 1e-6);
}

TEST_CASE("posterior matches the naive-inversion oracle") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const int dim = 2 + static_cast<int>(rng.next_u64() % 5);
    const int n = 3 + static_cast<int>(rng.next_u64() % 20);
    PriorSpec prior{Eigen::VectorXd::NullaryExpr(
        dim, [&rng](Eigen::Index) { return 0.2 + rng.uniform01(); })};
    Eigen::MatrixXd phi(n, dim);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < dim; ++j) phi(i, j) = rng.normal();
      y[i] = rng.normal();
    }
    const double sigma = 0.05 + rng.uniform01();
    const Posterior fast = posterior_update(prior, phi, y, sigma);
    const Posterior slow = oracles::naive_posterior(prior, phi, y, sigma);
    CHECK((fast.mean - slow.mean).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((fast.covariance - slow.covariance).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("posterior is invariant to row permutations") {
  Rng rng(5);
  PriorSpec prior{Eigen::Vector2d{1.0, 1.0}};
  Eigen::MatrixXd phi(8, 2);
  Eigen::VectorXd y(8);
  for (int i = 0; i < 8; ++i) {
    phi(i, 0) = rng.normal();
    phi(i, 1) = rng.normal();
    y[i] = rng.normal();
  }
  Eigen::MatrixXd phi_rev = phi.colwise().reverse();
  Eigen::VectorXd y_rev = y.reverse();
  const Posterior a = posterior_update(prior, phi, y, 0.3);
  const Posterior b = posterior_update(prior, phi_rev, y_rev, 0.3);
  CHECK((a.mean - b.mean).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((a.covariance - b.covariance).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("sequential conjugate updates equal the batch posterior") {
  Rng rng(6);
  PriorSpec prior{Eigen::Vector3d{0.8, 1.2, 2.0}};
  const int n = 12;
  Eigen::MatrixXd phi(n, 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) phi(i, j) = rng.normal();
    y[i] = rng.normal();
  }
  const double sigma = 0.4;
  const Posterior batch = posterior_update(prior, phi, y, sigma);

  Posterior seq = posterior_update(prior, Eigen::MatrixXd(0, 3),
                                   Eigen::VectorXd(0), sigma);
  for (int i = 0; i < n; ++i) {
    seq = posterior_update(seq, phi.row(i), y.segment(i, 1), sigma);
  }
  CHECK((seq.mean - batch.mean).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((seq.covariance - batch.covariance).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("predictive distribution") {
  // prior predictive: variance = sigma^2 + sum lambda_i phi_i^2
  Rng rng(7);
  const FeatureModel model = random_trig(rng, 2, 1);
  PriorSpec prior{Eigen::VectorXd::Constant(4, 0.9)};
  const Posterior post =
      posterior_update(prior, Eigen::MatrixXd(0, 4), Eigen::VectorXd(0), 0.2);
  Eigen::VectorXd z(1);
  z << 0.37;
  const Eigen::VectorXd phi = eval_features(model, z);
  const Prediction pred = predict(post, model, z, 0.2);
  CHECK(pred.mean == doctest::Approx(0.0));
  CHECK(pred.variance ==
        doctest::Approx(0.04 + (prior.lambdas.array() * phi.array().square()).sum())
            .epsilon(1e-12));
  CHECK(pred.variance >= 0.04);
}

TEST_CASE("noiseless in-span data is interpolated") {
  Eigen::MatrixXd freqs(2, 1);
  freqs << 0.8, 2.3;
  const FeatureModel model = FeatureModel::trig_features(freqs);
  Eigen::VectorXd target_w(4);
  target_w << 1.3, -0.6, 0.4, 0.9;

  Rng rng(8);
  const int n = 50;
  std::vector<Eigen::VectorXd> zs;
  Eigen::MatrixXd phi(n, 4);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd z(1);
    z << rng.uniform01();
    zs.push_back(z);
    phi.row(i) = eval_features(model, z).transpose();
    y[i] = phi.row(i).dot(target_w);
  }
  PriorSpec prior{Eigen::VectorXd::Constant(4, 1.0)};
  const Posterior post = posterior_update(prior, phi, y, 1e-3);
  for (int i = 0; i < n; ++i) {
    const Prediction pred = predict(post, model, zs[static_cast<std::size_t>(i)],
                                    1e-3);
    CHECK(std::abs(pred.mean - y[i]) < 1e-2);
  }
}

TEST_CASE("constant-feature posterior matches the scalar closed form") {
  const double lambda = 2.5, sigma = 0.3;
  const int n = 17;
  Rng rng(9);
  Eigen::MatrixXd phi = Eigen::MatrixXd::Ones(n, 1);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y[i] = 1.7 + 0.2 * rng.normal();
  PriorSpec prior{Eigen::VectorXd::Constant(1, lambda)};
  const Posterior post = posterior_update(prior, phi, y, sigma);
  const double expected = lambda * n * y.mean() / (sigma * sigma + lambda * n);
  CHECK(post.mean[0] == doctest::Approx(expected).epsilon(1e-12));

  // constant model with a planted mean: 1-D predictive algebra
  Posterior planted;
  planted.mean = Eigen::VectorXd::Constant(1, 2.5);
  planted.covariance = Eigen::MatrixXd::Constant(1, 1, 0.04);
  const Prediction pred = predict(planted, FeatureModel::constant(),
                                  Eigen::VectorXd::Zero(1), 0.1);
  CHECK(pred.mean == doctest::Approx(2.5));
  CHECK(pred.variance == doctest::Approx(0.01 + 0.04));
}

TEST_CASE("mlp features and jacobian") {
  Rng rng(10);
  MlpWeights w;
  const int h = 5, l = 3, d = 2;
  const auto draw = [&rng](int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = 0.5 * rng.normal();
    return m;
  };
  w.w1 = draw(h, d);
  w.w2 = draw(h, h);
  w.w3 = draw(l, h);
  w.b1 = draw(h, 1);
  w.b2 = draw(h, 1);
  w.b3 = draw(l, 1);
  const FeatureModel model = FeatureModel::mlp_features(w);
  CHECK(model.feature_dim == l);

  Eigen::VectorXd z(2);
  z << 0.3, -0.7;
  Eigen::VectorXd phi;
  Eigen::MatrixXd jac;
  eval_features_jacobian(model, z, phi, jac);
  CHECK((phi - eval_features(model, z)).norm() == 0.0);

  const double step = 1e-6;
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd zp = z, zm = z;
    zp[j] += step;
    zm[j] -= step;
    const Eigen::VectorXd fd =
        (eval_features(model, zp) - eval_features(model, zm)) / (2.0 * step);
    CHECK((jac.col(j) - fd).cwiseAbs().maxCoeff() < 1e-7);
  }
}

TEST_CASE("feature matrix matches per-row evaluation") {
  Rng rng(11);
  const FeatureModel model = random_trig(rng, 3, 2);
  std::vector<Eigen::VectorXd> zs;
  for (int i = 0; i < 7; ++i) {
    Eigen::VectorXd z(2);
    z << rng.normal(), rng.normal();
    zs.push_back(z);
  }
  const Eigen::MatrixXd phi = feature_matrix(model, zs);
  for (int i = 0; i < 7; ++i) {
    CHECK((phi.row(i).transpose() -
           eval_features(model, zs[static_cast<std::size_t>(i)]))
              .cwiseAbs()
              .maxCoeff() < 1e-14);
  }
}

TEST_CASE("degenerate predictive variance raises") {
  Posterior post;
  post.mean = Eigen::VectorXd::Zero(1);
  post.covariance = Eigen::MatrixXd::Constant(1, 1, -1.0);  // corrupted
  Eigen::VectorXd phi(1);
  phi << 1.0;
  CHECK_THROWS_AS(predict_from_features(post, phi, 0.5), NumericError);
}
