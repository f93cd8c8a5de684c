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
#include <string>
#include <variant>
#include <vector>

namespace mtmpc::plant {

enum class PlantKind { kVerticalLoad, kHingedDoor };

// Reduced simulated systems, both with a single error channel entering the
// acceleration row of the state derivative:
//
//   VerticalLoad: state (z, zdot), input is a vertical force.
//                 zddot = u / m - g + e
//   HingedDoor:   state (alpha, alphadot) in radians, input is a hinge
//                 torque. The nominal door has zero stiffness and damping:
//                 alphaddot = u / I + e
struct PlantSpec {
  PlantKind kind = PlantKind::kVerticalLoad;
  int state_dim = 2;
  int input_dim = 1;
  std::vector<int> error_indices;        // state-derivative rows affected by e
  std::vector<int> error_input_indices;  // components of (x, u) forming z
  double mass_or_inertia = 1.0;          // kg or kg m^2
  double gravity = 9.81;                 // m/s^2

  static PlantSpec vertical_load(double mass = 1.0, double gravity = 9.81,
                                 std::vector<int> z_indices = {0});
  static PlantSpec hinged_door(double inertia = 2.0,
                               std::vector<int> z_indices = {0, 1});

  int error_dim() const { return static_cast<int>(error_indices.size()); }
  int location_dim() const { return static_cast<int>(error_input_indices.size()); }

  /// Gathers the input location z out of the concatenated (x, u).
  Eigen::VectorXd input_location(const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& u) const;
};

struct ConstantDisturbance {
  double offset = 0.0;
};

struct SinusoidDisturbance {
  double amplitude = 0.0;
  double freq = 0.0;  // cycles per unit of z
};

struct SinPlusExpDisturbance {
  double a = 0.0;
  double b = 0.0;
  double freq = -3.0;
  Eigen::Vector2d k{1.0, 1.0};
};

// Smooth friction torque resisting the door, divided by the door inertia so
// that it enters the acceleration row directly. tanh replaces sign() so the
// ground-truth flow stays differentiable.
struct DoorFrictionDisturbance {
  double viscous = 0.0;          // c_v  [N m s / rad]
  double stiffness = 0.0;        // k_s  [N m / rad]
  double dry_friction = 0.0;     // mu_f [N m]
  double smoothing_width = 0.05; // eps  [rad/s]
  double inertia = 1.0;          // [kg m^2]
};

enum class TaskFamily { kConstant, kSinusoid, kSinPlusExp, kDoorFriction };

// One operating condition: a specific disturbance acting on the plant.
struct DisturbanceTask {
  std::string task_id;
  std::variant<ConstantDisturbance, SinusoidDisturbance, SinPlusExpDisturbance,
               DoorFrictionDisturbance>
      params;
  bool test_only = false;

  TaskFamily family() const;
  /// Dimension of the input location the disturbance reads.
  int location_dim() const;
};

struct Trajectory {
  std::vector<double> times;                    // same length as states
  std::vector<Eigen::VectorXd> states;          // inputs.size() + 1 entries
  std::vector<Eigen::VectorXd> inputs;
  std::vector<Eigen::VectorXd> true_residuals;  // per applied input; diagnostic
  bool saturated = false;                       // state hit the box at some step
  int first_saturation_step = -1;
};

using FlowFn =
    std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)>;
using PolicyFn = std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>;

Eigen::VectorXd nominal_flow(const PlantSpec& plant, const Eigen::VectorXd& x,
                             const Eigen::VectorXd& u);

/// Ground-truth disturbance value at an input location.
Eigen::VectorXd residual(const DisturbanceTask& task, const Eigen::VectorXd& z);

/// Nominal flow plus the disturbance scattered into the error rows.
Eigen::VectorXd true_flow(const PlantSpec& plant, const DisturbanceTask& task,
                          const Eigen::VectorXd& x, const Eigen::VectorXd& u);

/// Classical RK4 step with the input held constant over the step.
/// Throws NumericError if the result is non-finite.
Eigen::VectorXd step_rk4(const FlowFn& flow, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& u, double dt);

// Square-wave set-point schedule; the velocity reference is zero.
// period <= 0 holds `high` for all t >= 0.
struct ReferenceSchedule {
  double low = 0.0;
  double high = 0.5;
  double period = 2.0;  // seconds per segment

  double setpoint(double t) const;
  Eigen::VectorXd state_reference(double t, int state_dim) const;
};

Eigen::VectorXd default_state_lo(const PlantSpec& plant);
Eigen::VectorXd default_state_hi(const PlantSpec& plant);

struct RolloutOptions {
  double dt = 0.02;
  double duration = 8.0;
  Eigen::VectorXd x0;                  // empty -> zeros
  Eigen::VectorXd state_lo, state_hi;  // empty -> plant defaults
};

/// Integrates the true flow under `policy`. States leaving the box are
/// clamped and the step recorded, rather than aborting the run.
Trajectory rollout(const PlantSpec& plant, const DisturbanceTask& task,
                   const PolicyFn& policy, const RolloutOptions& options);

// Built-in task families. door_levels / door_inertia only apply to the
// door study.
struct FamilySpec {
  std::string name;  // "sinusoid_study" | "sinexp_study" | "door_study"
  int door_levels = 4;
  double door_inertia = 2.0;
};

/// Deterministic list of tasks for one of the built-in studies.
std::vector<DisturbanceTask> make_task_family(const FamilySpec& spec);

}  // namespace mtmpc::plant
