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

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "mtmpc/errors.hpp"
#include "mtmpc/features.hpp"
#include "mtmpc/plant.hpp"

namespace mtmpc::mpc {

// Continuous-time model with analytic Jacobians of the flow map.
struct ContinuousModel {
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)> flow;
  std::function<void(const Eigen::VectorXd&, const Eigen::VectorXd&,
                     Eigen::MatrixXd&, Eigen::MatrixXd&)>
      jacobian;  // fx (n x n), fu (n x m)
};

// One learned error channel: a feature model plus the current weight
// estimate. The weights are read through a shared pointer so the control
// loop can swap in adapted values without rebuilding the OCP; the loop owns
// the pointer and updates are not concurrent with solves.
struct ErrorChannel {
  features::FeatureModel model;
  std::shared_ptr<const Eigen::VectorXd> weights;
};

ContinuousModel nominal_model(const plant::PlantSpec& plant);
ContinuousModel ground_truth_model(const plant::PlantSpec& plant,
                                   const plant::DisturbanceTask& task);
/// Nominal flow plus per-channel compensation phi(z)^T K scattered into the
/// error rows (certainty equivalence: only the weight mean enters).
ContinuousModel compensated_model(const plant::PlantSpec& plant,
                                  std::vector<ErrorChannel> channels);

// RK4-discretized step map with chain-rule Jacobians.
struct DiscreteDynamics {
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)> step;
  std::function<void(const Eigen::VectorXd&, const Eigen::VectorXd&,
                     Eigen::MatrixXd&, Eigen::MatrixXd&)>
      jacobian;  // A (n x n), B (n x m)
};

DiscreteDynamics rk4_dynamics(const ContinuousModel& model, double dt);

struct StageCost {
  Eigen::MatrixXd Q;  // state tracking weight, PSD
  Eigen::MatrixXd R;  // input weight, PD
  std::function<Eigen::VectorXd(double)> reference;  // absolute time -> state ref
};

struct InputBounds {
  Eigen::VectorXd lo, hi;
};

// One-sided quadratic penalties w * max(0, violation)^2 per state component.
struct SoftStateBounds {
  Eigen::VectorXd lo, hi, weight;
};

struct OcpSpec {
  int horizon_steps = 0;
  double dt = 0.0;
  int state_dim = 0;
  int input_dim = 0;
  DiscreteDynamics dynamics;
  StageCost stage;
  Eigen::MatrixXd Qf;  // terminal tracking weight
  std::optional<InputBounds> input_bounds;
  std::optional<SoftStateBounds> soft_state_bounds;
};

struct CostSpec {
  Eigen::MatrixXd Q, R, Qf;
  std::function<Eigen::VectorXd(double)> reference;
  std::optional<InputBounds> input_bounds;
  std::optional<SoftStateBounds> soft_state_bounds;
};

/// Discrete OCP over `horizon` seconds at step dt. When `channels` is
/// non-null, the dynamics compensate the learned residual; otherwise they
/// are purely nominal.
OcpSpec build_ocp(const plant::PlantSpec& plant,
                  const std::vector<ErrorChannel>* channels,
                  const CostSpec& cost, double horizon, double dt);

/// Same, from an explicit model (e.g. the ground-truth flow).
OcpSpec build_ocp(const ContinuousModel& model, int state_dim, int input_dim,
                  const CostSpec& cost, double horizon, double dt);

/// Jacobians of the discrete step map at (x, u).
void linearize_dynamics(const OcpSpec& ocp, const Eigen::VectorXd& x,
                        const Eigen::VectorXd& u, Eigen::MatrixXd& a,
                        Eigen::MatrixXd& b);

struct WarmStart {
  std::vector<Eigen::VectorXd> states;  // N + 1
  std::vector<Eigen::VectorXd> inputs;  // N

  /// Receding-horizon shift: drop the first entry, duplicate the last.
  WarmStart shifted() const;
};

struct SqpSolution {
  std::vector<Eigen::VectorXd> states;
  std::vector<Eigen::VectorXd> inputs;
  double cost = 0.0;
  double kkt_residual = 0.0;
  int iterations = 0;
};

/// Thrown when every backtracking step yields a non-finite cost; carries the
/// last iterate for diagnosis.
struct SolverFailure : NumericError {
  SolverFailure(const std::string& msg, SqpSolution iterate)
      : NumericError(msg), last_iterate(std::move(iterate)) {}
  SqpSolution last_iterate;
};

// Equality-constrained LQ subproblem in deviation variables:
//   dx_{k+1} = A_k dx_k + B_k du_k + d_k,  dx_0 given,
//   cost sum_k 1/2 dx^T Q dx + q^T dx + 1/2 du^T R du + r^T du + terminal.
struct LqStage {
  Eigen::MatrixXd A, B;
  Eigen::VectorXd d;
  Eigen::MatrixXd Q, R;
  Eigen::VectorXd q, r;
};

struct LqProblem {
  std::vector<LqStage> stages;
  Eigen::MatrixXd Qf;
  Eigen::VectorXd qf;
  Eigen::VectorXd dx0;
};

struct LqSolution {
  std::vector<Eigen::VectorXd> dx;  // N + 1
  std::vector<Eigen::VectorXd> du;  // N
};

/// Backward Riccati recursion + forward rollout. O(N) in the horizon.
LqSolution solve_lq_riccati(const LqProblem& problem);

/// Total cost of a trajectory under the OCP stage/terminal costs and soft
/// penalties, with the reference read at t0 + k dt.
double trajectory_cost(const OcpSpec& ocp,
                       const std::vector<Eigen::VectorXd>& states,
                       const std::vector<Eigen::VectorXd>& inputs, double t0);

/// Gauss-Newton SQP: multiple-shooting linearization, Riccati QP subproblem,
/// full step with simple cost backtracking on rolled-out candidates, and
/// input clamping in the forward pass. A cold start (nullopt init) rolls out
/// zero inputs from x0.
SqpSolution sqp_solve(const OcpSpec& ocp, const Eigen::VectorXd& x0,
                      const std::optional<WarmStart>& init, int max_iters,
                      double tol, double t0 = 0.0);

struct RtiDiagnostics {
  double kkt_residual = 0.0;  // at the pre-step iterate
  double defect_inf = 0.0;
  double cost = 0.0;
};

struct RtiResult {
  Eigen::VectorXd u0;
  WarmStart warm;
  RtiDiagnostics diagnostics;
};

/// Exactly one Gauss-Newton iteration from the shifted warm start.
RtiResult rti_step(const OcpSpec& ocp, const Eigen::VectorXd& x0,
                   const WarmStart& warm, double t0 = 0.0);

}  // namespace mtmpc::mpc
