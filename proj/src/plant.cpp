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

#include "mtmpc/plant.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "mtmpc/errors.hpp"

namespace mtmpc::plant {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void check_dims(const PlantSpec& plant, const Eigen::VectorXd& x,
                const Eigen::VectorXd& u) {
  if (x.size() != plant.state_dim || u.size() != plant.input_dim) {
    std::ostringstream msg;
    msg << "plant expects state dim " << plant.state_dim << " and input dim "
        << plant.input_dim << ", got " << x.size() << " / " << u.size();
    throw std::invalid_argument(msg.str());
  }
}

}  // namespace

PlantSpec PlantSpec::vertical_load(double mass, double gravity,
                                   std::vector<int> z_indices) {
  PlantSpec spec;
  spec.kind = PlantKind::kVerticalLoad;
  spec.state_dim = 2;
  spec.input_dim = 1;
  spec.error_indices = {1};
  spec.error_input_indices = std::move(z_indices);
  spec.mass_or_inertia = mass;
  spec.gravity = gravity;
  return spec;
}

PlantSpec PlantSpec::hinged_door(double inertia, std::vector<int> z_indices) {
  PlantSpec spec;
  spec.kind = PlantKind::kHingedDoor;
  spec.state_dim = 2;
  spec.input_dim = 1;
  spec.error_indices = {1};
  spec.error_input_indices = std::move(z_indices);
  spec.mass_or_inertia = inertia;
  spec.gravity = 0.0;
  return spec;
}

Eigen::VectorXd PlantSpec::input_location(const Eigen::VectorXd& x,
                                          const Eigen::VectorXd& u) const {
  check_dims(*this, x, u);
  Eigen::VectorXd z(location_dim());
  for (int i = 0; i < z.size(); ++i) {
    const int idx = error_input_indices[static_cast<std::size_t>(i)];
    if (idx < 0 || idx >= state_dim + input_dim) {
      throw std::invalid_argument("error_input_indices out of range");
    }
    z[i] = idx < state_dim ? x[idx] : u[idx - state_dim];
  }
  return z;
}

TaskFamily DisturbanceTask::family() const {
  if (std::holds_alternative<ConstantDisturbance>(params)) return TaskFamily::kConstant;
  if (std::holds_alternative<SinusoidDisturbance>(params)) return TaskFamily::kSinusoid;
  if (std::holds_alternative<SinPlusExpDisturbance>(params)) return TaskFamily::kSinPlusExp;
  return TaskFamily::kDoorFriction;
}

int DisturbanceTask::location_dim() const {
  switch (family()) {
    case TaskFamily::kConstant:
    case TaskFamily::kSinusoid:
      return 1;
    case TaskFamily::kSinPlusExp:
    case TaskFamily::kDoorFriction:
      return 2;
  }
  return 0;
}

Eigen::VectorXd nominal_flow(const PlantSpec& plant, const Eigen::VectorXd& x,
                             const Eigen::VectorXd& u) {
  check_dims(plant, x, u);
  Eigen::VectorXd dx(2);
  dx[0] = x[1];
  switch (plant.kind) {
    case PlantKind::kVerticalLoad:
      dx[1] = u[0] / plant.mass_or_inertia - plant.gravity;
      break;
    case PlantKind::kHingedDoor:
      dx[1] = u[0] / plant.mass_or_inertia;
      break;
  }
  return dx;
}

Eigen::VectorXd residual(const DisturbanceTask& task, const Eigen::VectorXd& z) {
  if (z.size() != task.location_dim()) {
    std::ostringstream msg;
    msg << "task '" << task.task_id << "' expects input location dim "
        << task.location_dim() << ", got " << z.size();
    throw std::invalid_argument(msg.str());
  }
  Eigen::VectorXd e(1);
  if (const auto* c = std::get_if<ConstantDisturbance>(&task.params)) {
    e[0] = c->offset;
  } else if (const auto* s = std::get_if<SinusoidDisturbance>(&task.params)) {
    e[0] = s->amplitude * std::sin(kTwoPi * s->freq * z[0]);
  } else if (const auto* se = std::get_if<SinPlusExpDisturbance>(&task.params)) {
    e[0] = se->a * std::sin(-kTwoPi * se->freq * z[0]) +
           se->b * std::exp(se->k.dot(z.head<2>()));
  } else {
    const auto& d = std::get<DoorFrictionDisturbance>(task.params);
    const double torque = d.viscous * z[1] + d.stiffness * z[0] +
                          d.dry_friction * std::tanh(z[1] / d.smoothing_width);
    e[0] = -torque / d.inertia;
  }
  return e;
}

Eigen::VectorXd true_flow(const PlantSpec& plant, const DisturbanceTask& task,
                          const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
  const bool door_task = task.family() == TaskFamily::kDoorFriction;
  const bool door_plant = plant.kind == PlantKind::kHingedDoor;
  if (door_task != door_plant) {
    throw std::invalid_argument("task family '" + task.task_id +
                                "' is incompatible with this plant kind");
  }
  Eigen::VectorXd dx = nominal_flow(plant, x, u);
  const Eigen::VectorXd e = residual(task, plant.input_location(x, u));
  for (int j = 0; j < plant.error_dim(); ++j) {
    dx[plant.error_indices[static_cast<std::size_t>(j)]] += e[j];
  }
  return dx;
}

Eigen::VectorXd step_rk4(const FlowFn& flow, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& u, double dt) {
  if (dt <= 0.0) throw std::invalid_argument("rk4 step requires dt > 0");
  const Eigen::VectorXd k1 = flow(x, u);
  const Eigen::VectorXd k2 = flow(x + 0.5 * dt * k1, u);
  const Eigen::VectorXd k3 = flow(x + 0.5 * dt * k2, u);
  const Eigen::VectorXd k4 = flow(x + dt * k3, u);
  Eigen::VectorXd next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  if (!next.allFinite()) {
    std::ostringstream msg;
    msg << "rk4 step produced a non-finite state (dt=" << dt
        << ", x=" << x.transpose() << ", u=" << u.transpose() << ")";
    throw NumericError(msg.str());
  }
  return next;
}

double ReferenceSchedule::setpoint(double t) const {
  if (period <= 0.0) return high;
  const auto segment = static_cast<long long>(std::floor(t / period));
  return segment % 2 == 0 ? low : high;
}

Eigen::VectorXd ReferenceSchedule::state_reference(double t, int state_dim) const {
  Eigen::VectorXd ref = Eigen::VectorXd::Zero(state_dim);
  ref[0] = setpoint(t);
  return ref;
}

Eigen::VectorXd default_state_lo(const PlantSpec& plant) {
  Eigen::VectorXd lo(2);
  if (plant.kind == PlantKind::kVerticalLoad) {
    lo << -5.0, -20.0;
  } else {
    lo << -std::numbers::pi, -20.0;
  }
  return lo;
}

Eigen::VectorXd default_state_hi(const PlantSpec& plant) {
  Eigen::VectorXd hi(2);
  if (plant.kind == PlantKind::kVerticalLoad) {
    hi << 5.0, 20.0;
  } else {
    hi << 1.5 * std::numbers::pi, 20.0;
  }
  return hi;
}

Trajectory rollout(const PlantSpec& plant, const DisturbanceTask& task,
                   const PolicyFn& policy, const RolloutOptions& options) {
  if (options.dt <= 0.0 || options.duration <= 0.0) {
    throw std::invalid_argument("rollout requires positive dt and duration");
  }
  const int steps = static_cast<int>(std::llround(options.duration / options.dt));
  const Eigen::VectorXd lo =
      options.state_lo.size() > 0 ? options.state_lo : default_state_lo(plant);
  const Eigen::VectorXd hi =
      options.state_hi.size() > 0 ? options.state_hi : default_state_hi(plant);

  Trajectory traj;
  traj.times.reserve(static_cast<std::size_t>(steps) + 1);
  traj.states.reserve(static_cast<std::size_t>(steps) + 1);
  traj.inputs.reserve(static_cast<std::size_t>(steps));
  traj.true_residuals.reserve(static_cast<std::size_t>(steps));

  Eigen::VectorXd x = options.x0.size() > 0
                          ? options.x0
                          : Eigen::VectorXd::Zero(plant.state_dim);
  traj.times.push_back(0.0);
  traj.states.push_back(x);

  const FlowFn flow = [&plant, &task](const Eigen::VectorXd& xs,
                                      const Eigen::VectorXd& us) {
    return true_flow(plant, task, xs, us);
  };

  for (int k = 0; k < steps; ++k) {
    const double t = k * options.dt;
    const Eigen::VectorXd u = policy(t, x);
    traj.inputs.push_back(u);
    traj.true_residuals.push_back(residual(task, plant.input_location(x, u)));

    bool overflowed = false;
    Eigen::VectorXd next = x;
    try {
      next = step_rk4(flow, x, u, options.dt);
    } catch (const NumericError&) {
      overflowed = true;  // held at the previous state below; flagged
    }
    const Eigen::VectorXd clamped = next.cwiseMax(lo).cwiseMin(hi);
    if ((overflowed || (clamped - next).cwiseAbs().maxCoeff() > 0.0) &&
        !traj.saturated) {
      traj.saturated = true;
      traj.first_saturation_step = k;
    }
    x = clamped;
    traj.times.push_back((k + 1) * options.dt);
    traj.states.push_back(x);
  }
  return traj;
}

std::vector<DisturbanceTask> make_task_family(const FamilySpec& spec) {
  std::vector<DisturbanceTask> tasks;
  if (spec.name == "sinusoid_study") {
    tasks.push_back({"task1", ConstantDisturbance{-1.6}, false});
    tasks.push_back({"task2", SinusoidDisturbance{3.0, 2.0}, false});
    tasks.push_back({"task3", SinusoidDisturbance{3.0, 6.0}, false});
    tasks.push_back({"task4", SinusoidDisturbance{3.0, 4.0}, true});
  } else if (spec.name == "sinexp_study") {
    // 5 x 3 grid of (a, b); the held-out test pair (6, -8) is outside it.
    // Positive b feeds the state back into the exponential, so its grid line
    // stays small enough for the closed loop to remain stabilizable.
    const double a_grid[] = {-6.0, -3.0, 0.0, 3.0, 6.0};
    const double b_grid[] = {-7.0, -2.0, 1.0};
    int index = 1;
    for (const double a : a_grid) {
      for (const double b : b_grid) {
        DisturbanceTask task;
        task.task_id = "sinexp" + std::to_string(index++);
        task.params = SinPlusExpDisturbance{a, b, -3.0, Eigen::Vector2d{1.0, 1.0}};
        tasks.push_back(std::move(task));
      }
    }
    DisturbanceTask test;
    test.task_id = "sinexp_test";
    test.params = SinPlusExpDisturbance{6.0, -8.0, -3.0, Eigen::Vector2d{1.0, 1.0}};
    test.test_only = true;
    tasks.push_back(std::move(test));
  } else if (spec.name == "door_study") {
    if (spec.door_levels < 1) {
      throw ConfigError("door_study requires at least one friction level");
    }
    // Friction grows monotonically across tasks; viscous damping and a small
    // stiffness alternate so that the training data carries dependence on
    // both state components.
    for (int i = 0; i < spec.door_levels; ++i) {
      DoorFrictionDisturbance d;
      d.dry_friction = 0.4 * i;
      d.viscous = i % 2 == 0 ? 0.1 : 0.3;
      d.stiffness = i % 2 == 0 ? 0.0 : 1.0;
      d.smoothing_width = 0.05;
      d.inertia = spec.door_inertia;
      DisturbanceTask task;
      task.task_id = "door" + std::to_string(i + 1);
      task.params = d;
      tasks.push_back(std::move(task));
    }
  } else {
    throw ConfigError("unknown task family '" + spec.name + "'");
  }
  return tasks;
}

}  // namespace mtmpc::plant
