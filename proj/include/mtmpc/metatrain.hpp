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

#include <cstdint>
#include <string>
#include <vector>

#include "mtmpc/features.hpp"
#include "mtmpc/plant.hpp"

namespace mtmpc::metatrain {

// Residual measurements for one task and one error channel: noisy
// differences between the true and nominal state derivative, recorded at
// the visited input locations.
struct TaskDataset {
  std::string task_id;
  std::vector<Eigen::VectorXd> inputs;  // input locations z
  std::vector<double> targets;
  int channel = 0;   // index into the plant's error rows
  bool diverged = false;

  int size() const { return static_cast<int>(targets.size()); }
};

struct SplitDataset {
  TaskDataset train;
  TaskDataset validation;
};

/// Interleaved split: even time indices train, odd validate, so both halves
/// span every reference segment. Requires at least 4 samples.
SplitDataset split_dataset(const TaskDataset& dataset);

// Hyperparameters shared across tasks: trig frequencies, log prior
// variances (2E), and one log noise *standard deviation* per task.
struct Hyperparams {
  Eigen::MatrixXd frequencies;  // E x d
  Eigen::VectorXd log_lambdas;  // 2E
  Eigen::VectorXd log_sigma_w;  // one per task

  int num_frequencies() const { return static_cast<int>(frequencies.rows()); }
  int input_dim() const { return static_cast<int>(frequencies.cols()); }
};

/// Averaged negative log predictive likelihood: for each task, the posterior
/// from the train half under (frequencies, lambdas, sigma_w[m]) is scored on
/// the validation half, and task scores are averaged.
double nll_objective(const Hyperparams& hp, const std::vector<SplitDataset>& splits);

struct HyperparamGradient {
  Eigen::MatrixXd frequencies;
  Eigen::VectorXd log_lambdas;
  Eigen::VectorXd log_sigma_w;
};

/// Analytic gradient of nll_objective (adjoint through the posterior
/// Cholesky factorization). Verified against central finite differences by
/// the gradcheck audit.
HyperparamGradient nll_gradient(const Hyperparams& hp,
                                const std::vector<SplitDataset>& splits);

/// Objective value, optionally with the gradient (grad may be null).
double nll_value_and_gradient(const Hyperparams& hp,
                              const std::vector<SplitDataset>& splits,
                              HyperparamGradient* grad);

struct OptimizerConfig {
  double step_size = 1e-2;
  int iterations = 2000;
  int restarts = 8;
  std::uint64_t seed = 0;
  double sigma_floor = 1e-4;  // lower bound on sigma_w (std)
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct HyperparamFit {
  Hyperparams hyperparams;
  double objective = 0.0;
  std::vector<double> restart_initial;  // objective at each initialization
  std::vector<double> restart_final;    // best objective of each restart
  bool sigma_floor_active = false;
};

/// Multi-start adaptive-moment descent on nll_objective. Returns the best
/// iterate seen across restarts; ties break toward the earlier restart.
/// Throws OptimizationFailure when every restart diverges.
HyperparamFit optimize_hyperparams(const std::vector<TaskDataset>& datasets,
                                   int num_frequencies,
                                   const OptimizerConfig& config);

struct MlpArch {
  int hidden = 20;
  int features = 9;
};

struct MlpFit {
  features::MlpWeights weights;
  Eigen::VectorXd log_lambdas;  // L
  Eigen::VectorXd log_sigma_w;  // one per task
  double objective = 0.0;
  std::vector<double> restart_initial;
  std::vector<double> restart_final;
  std::vector<double> loss_trace;  // per-iteration objective of the best restart
};

double mlp_nll_objective(const features::MlpWeights& weights,
                         const Eigen::VectorXd& log_lambdas,
                         const Eigen::VectorXd& log_sigma_w,
                         const std::vector<SplitDataset>& splits);

struct MlpGradient {
  features::MlpWeights weights;
  Eigen::VectorXd log_lambdas;
  Eigen::VectorXd log_sigma_w;
};

double mlp_nll_value_and_gradient(const features::MlpWeights& weights,
                                  const Eigen::VectorXd& log_lambdas,
                                  const Eigen::VectorXd& log_sigma_w,
                                  const std::vector<SplitDataset>& splits,
                                  MlpGradient* grad);

/// Trains network weights, prior scales, and per-task noise under the same
/// predictive-likelihood objective, with hand-derived backpropagation
/// through the posterior formula.
MlpFit train_mlp_hyperparams(const std::vector<TaskDataset>& datasets,
                             const MlpArch& arch, const OptimizerConfig& config);

struct CollectOptions {
  double dt = 0.02;
  double duration = 16.0;
  Eigen::VectorXd x0;  // empty -> zeros
};

/// Rolls out the closed loop under `policy` (by convention the nominal MPC)
/// and records residual targets y_i = true derivative - nominal derivative
/// + seeded Gaussian noise at the visited input locations. If the rollout
/// saturates the state box, the dataset is truncated there and flagged.
TaskDataset collect_dataset(const plant::PlantSpec& plant,
                            const plant::DisturbanceTask& task,
                            const plant::PolicyFn& policy,
                            const plant::ReferenceSchedule& schedule,
                            double noise_std, std::uint64_t seed,
                            const CollectOptions& options = {});

}  // namespace mtmpc::metatrain
