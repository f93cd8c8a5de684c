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

#include "mtmpc/mpc.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace mtmpc::mpc {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kHuuRegularization = 1e-10;

/// d residual / d z as a row vector, for the ground-truth model.
Eigen::RowVectorXd residual_jacobian(const plant::DisturbanceTask& task,
                                     const Eigen::VectorXd& z) {
  Eigen::RowVectorXd jac = Eigen::RowVectorXd::Zero(z.size());
  if (std::holds_alternative<plant::ConstantDisturbance>(task.params)) {
    return jac;
  }
  if (const auto* s = std::get_if<plant::SinusoidDisturbance>(&task.params)) {
    jac[0] = s->amplitude * kTwoPi * s->freq * std::cos(kTwoPi * s->freq * z[0]);
    return jac;
  }
  if (const auto* se = std::get_if<plant::SinPlusExpDisturbance>(&task.params)) {
    const double expo = se->b * std::exp(se->k.dot(z.head<2>()));
    jac[0] = -se->a * kTwoPi * se->freq * std::cos(-kTwoPi * se->freq * z[0]) +
             expo * se->k[0];
    jac[1] = expo * se->k[1];
    return jac;
  }
  const auto& d = std::get<plant::DoorFrictionDisturbance>(task.params);
  const double th = std::tanh(z[1] / d.smoothing_width);
  jac[0] = -d.stiffness / d.inertia;
  jac[1] = -(d.viscous + d.dry_friction * (1.0 - th * th) / d.smoothing_width) /
           d.inertia;
  return jac;
}

void nominal_jacobian(const plant::PlantSpec& plant, Eigen::MatrixXd& fx,
                      Eigen::MatrixXd& fu) {
  fx = Eigen::MatrixXd::Zero(plant.state_dim, plant.state_dim);
  fx(0, 1) = 1.0;
  fu = Eigen::MatrixXd::Zero(plant.state_dim, plant.input_dim);
  fu(1, 0) = 1.0 / plant.mass_or_inertia;
}

/// Scatters a residual derivative over z into the flow Jacobians through the
/// input-location selector.
void scatter_location_jacobian(const plant::PlantSpec& plant, int error_row,
                               const Eigen::RowVectorXd& de_dz,
                               Eigen::MatrixXd& fx, Eigen::MatrixXd& fu) {
  for (int j = 0; j < de_dz.size(); ++j) {
    const int idx = plant.error_input_indices[static_cast<std::size_t>(j)];
    if (idx < plant.state_dim) {
      fx(error_row, idx) += de_dz[j];
    } else {
      fu(error_row, idx - plant.state_dim) += de_dz[j];
    }
  }
}

struct StageExpansion {
  Eigen::MatrixXd Q, R;
  Eigen::VectorXd q, r;
};

void add_soft_penalty_value(const SoftStateBounds& soft, const Eigen::VectorXd& x,
                            double scale, double& cost) {
  for (int i = 0; i < x.size(); ++i) {
    if (soft.weight[i] <= 0.0) continue;
    const double over = std::max(0.0, x[i] - soft.hi[i]);
    const double under = std::max(0.0, soft.lo[i] - x[i]);
    cost += scale * soft.weight[i] * (over * over + under * under);
  }
}

void add_soft_penalty_expansion(const SoftStateBounds& soft,
                                const Eigen::VectorXd& x, double scale,
                                Eigen::MatrixXd& q_mat, Eigen::VectorXd& q_vec) {
  for (int i = 0; i < x.size(); ++i) {
    if (soft.weight[i] <= 0.0) continue;
    const double over = x[i] - soft.hi[i];
    const double under = soft.lo[i] - x[i];
    if (over > 0.0) {
      q_vec[i] += scale * 2.0 * soft.weight[i] * over;
      q_mat(i, i) += scale * 2.0 * soft.weight[i];
    } else if (under > 0.0) {
      q_vec[i] -= scale * 2.0 * soft.weight[i] * under;
      q_mat(i, i) += scale * 2.0 * soft.weight[i];
    }
  }
}

struct Linearization {
  std::vector<Eigen::MatrixXd> a, b;
  std::vector<Eigen::VectorXd> defect;
  std::vector<StageExpansion> stage;
  Eigen::MatrixXd qf_mat;
  Eigen::VectorXd qf_vec;
  double defect_inf = 0.0;
  double kkt = 0.0;
};

/// Projected stationarity residual for one input gradient entry.
double projected_residual(double grad, double u, double lo, double hi) {
  constexpr double kActive = 1e-9;
  if (u >= hi - kActive) return std::max(0.0, grad);
  if (u <= lo + kActive) return std::max(0.0, -grad);
  return std::abs(grad);
}

Linearization linearize_all(const OcpSpec& ocp,
                            const std::vector<Eigen::VectorXd>& states,
                            const std::vector<Eigen::VectorXd>& inputs,
                            double t0) {
  const int n = ocp.horizon_steps;
  Linearization lin;
  lin.a.resize(static_cast<std::size_t>(n));
  lin.b.resize(static_cast<std::size_t>(n));
  lin.defect.resize(static_cast<std::size_t>(n));
  lin.stage.resize(static_cast<std::size_t>(n));

  for (int k = 0; k < n; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    const auto& x = states[ks];
    const auto& u = inputs[ks];
    ocp.dynamics.jacobian(x, u, lin.a[ks], lin.b[ks]);
    lin.defect[ks] = ocp.dynamics.step(x, u) - states[ks + 1];
    lin.defect_inf =
        std::max(lin.defect_inf, lin.defect[ks].cwiseAbs().maxCoeff());

    const double t = t0 + k * ocp.dt;
    const Eigen::VectorXd ref = ocp.stage.reference(t);
    StageExpansion& st = lin.stage[ks];
    st.Q = ocp.dt * ocp.stage.Q;
    st.q = ocp.dt * (ocp.stage.Q * (x - ref));
    st.R = ocp.dt * ocp.stage.R;
    st.r = ocp.dt * (ocp.stage.R * u);
    if (ocp.soft_state_bounds) {
      add_soft_penalty_expansion(*ocp.soft_state_bounds, x, ocp.dt, st.Q, st.q);
    }
  }

  const Eigen::VectorXd ref_f = ocp.stage.reference(t0 + n * ocp.dt);
  lin.qf_mat = ocp.Qf;
  lin.qf_vec = ocp.Qf * (states[static_cast<std::size_t>(n)] - ref_f);
  if (ocp.soft_state_bounds) {
    add_soft_penalty_expansion(*ocp.soft_state_bounds,
                               states[static_cast<std::size_t>(n)], ocp.dt,
                               lin.qf_mat, lin.qf_vec);
  }

  // Stationarity via the adjoint recursion; input bounds enter through
  // gradient projection.
  Eigen::VectorXd lambda = lin.qf_vec;
  double stat = 0.0;
  for (int k = n - 1; k >= 0; --k) {
    const auto ks = static_cast<std::size_t>(k);
    const Eigen::VectorXd gu = lin.stage[ks].r + lin.b[ks].transpose() * lambda;
    for (int i = 0; i < gu.size(); ++i) {
      double res = std::abs(gu[i]);
      if (ocp.input_bounds) {
        res = projected_residual(gu[i], inputs[ks][i], ocp.input_bounds->lo[i],
                                 ocp.input_bounds->hi[i]);
      }
      stat = std::max(stat, res);
    }
    lambda = lin.stage[ks].q + lin.a[ks].transpose() * lambda;
  }
  lin.kkt = std::max(stat, lin.defect_inf);
  return lin;
}

struct RiccatiGains {
  std::vector<Eigen::MatrixXd> feedback;     // K_k
  std::vector<Eigen::VectorXd> feedforward;  // kff_k
};

RiccatiGains riccati_backward(const LqProblem& problem) {
  const auto n = problem.stages.size();
  RiccatiGains gains;
  gains.feedback.resize(n);
  gains.feedforward.resize(n);

  Eigen::MatrixXd value_hess = problem.Qf;
  Eigen::VectorXd value_grad = problem.qf;
  for (std::size_t k = n; k-- > 0;) {
    const auto& s = problem.stages[k];
    const Eigen::VectorXd shifted =
        value_grad + value_hess * s.d;  // gradient through the affine defect
    const Eigen::MatrixXd bt_p = s.B.transpose() * value_hess;
    Eigen::MatrixXd h_uu = s.R + bt_p * s.B;
    const Eigen::MatrixXd h_ux = bt_p * s.A;
    const Eigen::VectorXd g_u = s.r + s.B.transpose() * shifted;
    const Eigen::VectorXd g_x = s.q + s.A.transpose() * shifted;

    Eigen::LLT<Eigen::MatrixXd> llt(h_uu);
    if (llt.info() != Eigen::Success) {
      h_uu.diagonal().array() += kHuuRegularization;
      llt.compute(h_uu);
      if (llt.info() != Eigen::Success) {
        throw NumericError("Riccati H_uu block is not positive definite");
      }
    }
    gains.feedback[k] = llt.solve(h_ux);
    gains.feedforward[k] = llt.solve(g_u);

    value_hess = s.Q + s.A.transpose() * value_hess * s.A -
                 gains.feedback[k].transpose() * h_uu * gains.feedback[k];
    value_hess = 0.5 * (value_hess + value_hess.transpose()).eval();
    value_grad = g_x - gains.feedback[k].transpose() * g_u;
  }
  return gains;
}

}  // namespace

ContinuousModel nominal_model(const plant::PlantSpec& plant) {
  ContinuousModel model;
  model.flow = [plant](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
    return plant::nominal_flow(plant, x, u);
  };
  model.jacobian = [plant](const Eigen::VectorXd&, const Eigen::VectorXd&,
                           Eigen::MatrixXd& fx, Eigen::MatrixXd& fu) {
    nominal_jacobian(plant, fx, fu);
  };
  return model;
}

ContinuousModel ground_truth_model(const plant::PlantSpec& plant,
                                   const plant::DisturbanceTask& task) {
  ContinuousModel model;
  model.flow = [plant, task](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
    return plant::true_flow(plant, task, x, u);
  };
  model.jacobian = [plant, task](const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& u, Eigen::MatrixXd& fx,
                                 Eigen::MatrixXd& fu) {
    nominal_jacobian(plant, fx, fu);
    const Eigen::VectorXd z = plant.input_location(x, u);
    const Eigen::RowVectorXd de_dz = residual_jacobian(task, z);
    scatter_location_jacobian(plant, plant.error_indices.front(), de_dz, fx, fu);
  };
  return model;
}

ContinuousModel compensated_model(const plant::PlantSpec& plant,
                                  std::vector<ErrorChannel> channels) {
  if (channels.size() != plant.error_indices.size()) {
    throw ConfigError("one error channel per error row is required");
  }
  for (const auto& ch : channels) {
    if (!ch.weights) throw ConfigError("error channel weights are null");
    const int expected = ch.model.input_dim();
    if (expected >= 0 && expected != plant.location_dim()) {
      throw ConfigError("feature input dim and plant input-location dim disagree");
    }
    if (ch.weights->size() != ch.model.feature_dim) {
      throw ConfigError("weight vector and feature dim disagree");
    }
  }

  ContinuousModel model;
  model.flow = [plant, channels](const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& u) {
    Eigen::VectorXd dx = plant::nominal_flow(plant, x, u);
    const Eigen::VectorXd z = plant.input_location(x, u);
    for (std::size_t j = 0; j < channels.size(); ++j) {
      const Eigen::VectorXd phi = features::eval_features(channels[j].model, z);
      dx[plant.error_indices[j]] += phi.dot(*channels[j].weights);
    }
    return dx;
  };
  model.jacobian = [plant, channels](const Eigen::VectorXd& x,
                                     const Eigen::VectorXd& u,
                                     Eigen::MatrixXd& fx, Eigen::MatrixXd& fu) {
    nominal_jacobian(plant, fx, fu);
    const Eigen::VectorXd z = plant.input_location(x, u);
    Eigen::VectorXd phi;
    Eigen::MatrixXd dphi_dz;
    for (std::size_t j = 0; j < channels.size(); ++j) {
      features::eval_features_jacobian(channels[j].model, z, phi, dphi_dz);
      const Eigen::RowVectorXd de_dz =
          channels[j].weights->transpose() * dphi_dz;
      scatter_location_jacobian(plant, plant.error_indices[j], de_dz, fx, fu);
    }
  };
  return model;
}

DiscreteDynamics rk4_dynamics(const ContinuousModel& model, double dt) {
  if (dt <= 0.0) throw ConfigError("rk4 discretization requires dt > 0");
  DiscreteDynamics dyn;
  dyn.step = [model, dt](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
    return plant::step_rk4(model.flow, x, u, dt);
  };
  dyn.jacobian = [model, dt](const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                             Eigen::MatrixXd& a, Eigen::MatrixXd& b) {
    const Eigen::VectorXd k1 = model.flow(x, u);
    const Eigen::VectorXd x2 = x + 0.5 * dt * k1;
    const Eigen::VectorXd k2 = model.flow(x2, u);
    const Eigen::VectorXd x3 = x + 0.5 * dt * k2;
    const Eigen::VectorXd k3 = model.flow(x3, u);
    const Eigen::VectorXd x4 = x + dt * k3;

    const auto n = x.size();
    Eigen::MatrixXd fx1, fx2, fx3, fx4, fu1, fu2, fu3, fu4;
    model.jacobian(x, u, fx1, fu1);
    model.jacobian(x2, u, fx2, fu2);
    model.jacobian(x3, u, fx3, fu3);
    model.jacobian(x4, u, fx4, fu4);

    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
    const Eigen::MatrixXd k1x = fx1;
    const Eigen::MatrixXd k2x = fx2 * (eye + 0.5 * dt * k1x);
    const Eigen::MatrixXd k3x = fx3 * (eye + 0.5 * dt * k2x);
    const Eigen::MatrixXd k4x = fx4 * (eye + dt * k3x);
    a = eye + (dt / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);

    const Eigen::MatrixXd k1u = fu1;
    const Eigen::MatrixXd k2u = fx2 * (0.5 * dt * k1u) + fu2;
    const Eigen::MatrixXd k3u = fx3 * (0.5 * dt * k2u) + fu3;
    const Eigen::MatrixXd k4u = fx4 * (dt * k3u) + fu4;
    b = (dt / 6.0) * (k1u + 2.0 * k2u + 2.0 * k3u + k4u);
  };
  return dyn;
}

OcpSpec build_ocp(const ContinuousModel& model, int state_dim, int input_dim,
                  const CostSpec& cost, double horizon, double dt) {
  if (dt <= 0.0 || horizon <= 0.0) {
    throw ConfigError("horizon and dt must be positive");
  }
  const double ratio = horizon / dt;
  const auto steps = static_cast<int>(std::llround(ratio));
  if (steps < 1 || std::abs(ratio - steps) > 1e-6) {
    throw ConfigError("horizon must be an integer multiple of dt");
  }
  if (cost.Q.rows() != state_dim || cost.Q.cols() != state_dim ||
      cost.Qf.rows() != state_dim || cost.R.rows() != input_dim ||
      cost.R.cols() != input_dim) {
    throw ConfigError("cost weight dimensions disagree with the model");
  }
  if (Eigen::LLT<Eigen::MatrixXd>(cost.R).info() != Eigen::Success) {
    throw ConfigError("input weight R must be positive definite");
  }
  if (!cost.reference) throw ConfigError("a reference provider is required");
  if (cost.soft_state_bounds &&
      (cost.soft_state_bounds->weight.array() < 0.0).any()) {
    throw ConfigError("soft-constraint weights must be nonnegative");
  }

  OcpSpec ocp;
  ocp.horizon_steps = steps;
  ocp.dt = dt;
  ocp.state_dim = state_dim;
  ocp.input_dim = input_dim;
  ocp.dynamics = rk4_dynamics(model, dt);
  ocp.stage = StageCost{cost.Q, cost.R, cost.reference};
  ocp.Qf = cost.Qf;
  ocp.input_bounds = cost.input_bounds;
  ocp.soft_state_bounds = cost.soft_state_bounds;
  return ocp;
}

OcpSpec build_ocp(const plant::PlantSpec& plant,
                  const std::vector<ErrorChannel>* channels,
                  const CostSpec& cost, double horizon, double dt) {
  const ContinuousModel model = channels != nullptr
                                    ? compensated_model(plant, *channels)
                                    : nominal_model(plant);
  return build_ocp(model, plant.state_dim, plant.input_dim, cost, horizon, dt);
}

void linearize_dynamics(const OcpSpec& ocp, const Eigen::VectorXd& x,
                        const Eigen::VectorXd& u, Eigen::MatrixXd& a,
                        Eigen::MatrixXd& b) {
  ocp.dynamics.jacobian(x, u, a, b);
}

WarmStart WarmStart::shifted() const {
  WarmStart out;
  out.states.assign(states.begin() + 1, states.end());
  out.states.push_back(states.back());
  out.inputs.assign(inputs.begin() + 1, inputs.end());
  out.inputs.push_back(inputs.back());
  return out;
}

LqSolution solve_lq_riccati(const LqProblem& problem) {
  const RiccatiGains gains = riccati_backward(problem);
  const auto n = problem.stages.size();
  LqSolution sol;
  sol.dx.resize(n + 1);
  sol.du.resize(n);
  sol.dx[0] = problem.dx0;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& s = problem.stages[k];
    sol.du[k] = -gains.feedback[k] * sol.dx[k] - gains.feedforward[k];
    sol.dx[k + 1] = s.A * sol.dx[k] + s.B * sol.du[k] + s.d;
  }
  return sol;
}

double trajectory_cost(const OcpSpec& ocp,
                       const std::vector<Eigen::VectorXd>& states,
                       const std::vector<Eigen::VectorXd>& inputs, double t0) {
  const int n = ocp.horizon_steps;
  double cost = 0.0;
  for (int k = 0; k < n; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    const double t = t0 + k * ocp.dt;
    const Eigen::VectorXd err = states[ks] - ocp.stage.reference(t);
    cost += 0.5 * ocp.dt * err.dot(ocp.stage.Q * err);
    cost += 0.5 * ocp.dt * inputs[ks].dot(ocp.stage.R * inputs[ks]);
    if (ocp.soft_state_bounds) {
      add_soft_penalty_value(*ocp.soft_state_bounds, states[ks], ocp.dt, cost);
    }
  }
  const Eigen::VectorXd err_f = states[static_cast<std::size_t>(n)] -
                                ocp.stage.reference(t0 + n * ocp.dt);
  cost += 0.5 * err_f.dot(ocp.Qf * err_f);
  if (ocp.soft_state_bounds) {
    add_soft_penalty_value(*ocp.soft_state_bounds,
                           states[static_cast<std::size_t>(n)], ocp.dt, cost);
  }
  return cost;
}

namespace {

Eigen::VectorXd clamp_input(const OcpSpec& ocp, const Eigen::VectorXd& u) {
  if (!ocp.input_bounds) return u;
  return u.cwiseMax(ocp.input_bounds->lo).cwiseMin(ocp.input_bounds->hi);
}

WarmStart cold_start(const OcpSpec& ocp, const Eigen::VectorXd& x0) {
  WarmStart ws;
  ws.states.push_back(x0);
  const Eigen::VectorXd u0 =
      clamp_input(ocp, Eigen::VectorXd::Zero(ocp.input_dim));
  for (int k = 0; k < ocp.horizon_steps; ++k) {
    ws.inputs.push_back(u0);
    ws.states.push_back(ocp.dynamics.step(ws.states.back(), u0));
  }
  return ws;
}

LqProblem build_subproblem(const OcpSpec& ocp, const Linearization& lin) {
  LqProblem lq;
  lq.stages.resize(lin.a.size());
  for (std::size_t k = 0; k < lin.a.size(); ++k) {
    lq.stages[k] = LqStage{lin.a[k],        lin.b[k],        lin.defect[k],
                           lin.stage[k].Q,  lin.stage[k].R,  lin.stage[k].q,
                           lin.stage[k].r};
  }
  lq.Qf = lin.qf_mat;
  lq.qf = lin.qf_vec;
  lq.dx0 = Eigen::VectorXd::Zero(ocp.state_dim);
  return lq;
}

struct Direction {
  std::vector<Eigen::VectorXd> dx, du;
};

/// Forward LQ rollout; absolute inputs are clamped to the box and the
/// clamped deviation is propagated.
Direction forward_with_clamping(const OcpSpec& ocp, const LqProblem& lq,
                                const RiccatiGains& gains,
                                const std::vector<Eigen::VectorXd>& inputs) {
  const auto n = lq.stages.size();
  Direction dir;
  dir.dx.resize(n + 1);
  dir.du.resize(n);
  dir.dx[0] = lq.dx0;
  for (std::size_t k = 0; k < n; ++k) {
    Eigen::VectorXd du =
        -gains.feedback[k] * dir.dx[k] - gains.feedforward[k];
    du = clamp_input(ocp, inputs[k] + du) - inputs[k];
    dir.du[k] = du;
    dir.dx[k + 1] = lq.stages[k].A * dir.dx[k] + lq.stages[k].B * du +
                    lq.stages[k].d;
  }
  return dir;
}

/// States obtained by rolling the inputs out from x0. Used to keep the
/// line-search iterates dynamically consistent, so plain cost comparisons
/// are meaningful.
std::vector<Eigen::VectorXd> rollout_states(
    const OcpSpec& ocp, const Eigen::VectorXd& x0,
    const std::vector<Eigen::VectorXd>& inputs) {
  std::vector<Eigen::VectorXd> states;
  states.reserve(inputs.size() + 1);
  states.push_back(x0);
  for (const auto& u : inputs) {
    states.push_back(ocp.dynamics.step(states.back(), u));
  }
  return states;
}

SqpSolution make_solution(std::vector<Eigen::VectorXd> states,
                          std::vector<Eigen::VectorXd> inputs, double cost,
                          double kkt, int iterations) {
  SqpSolution sol;
  sol.states = std::move(states);
  sol.inputs = std::move(inputs);
  sol.cost = cost;
  sol.kkt_residual = kkt;
  sol.iterations = iterations;
  return sol;
}

}  // namespace

SqpSolution sqp_solve(const OcpSpec& ocp, const Eigen::VectorXd& x0,
                      const std::optional<WarmStart>& init, int max_iters,
                      double tol, double t0) {
  if (max_iters < 1) throw std::invalid_argument("max_iters must be >= 1");
  if (x0.size() != ocp.state_dim) {
    throw std::invalid_argument("initial state dimension mismatch");
  }
  WarmStart traj = init.value_or(cold_start(ocp, x0));
  if (static_cast<int>(traj.inputs.size()) != ocp.horizon_steps ||
      traj.states.size() != traj.inputs.size() + 1) {
    throw std::invalid_argument("warm start dimensions disagree with the OCP");
  }
  // Close any shooting gaps in the initialization so that the backtracking
  // compares costs of dynamically consistent trajectories.
  try {
    traj.states = rollout_states(ocp, x0, traj.inputs);
  } catch (const NumericError&) {
    throw SolverFailure("initialization rollout is non-finite",
                        make_solution(traj.states, traj.inputs,
                                      std::numeric_limits<double>::quiet_NaN(),
                                      0.0, 0));
  }

  double cost = trajectory_cost(ocp, traj.states, traj.inputs, t0);
  int accepted = 0;
  double kkt = 0.0;

  for (int iter = 0; iter < max_iters; ++iter) {
    const Linearization lin = linearize_all(ocp, traj.states, traj.inputs, t0);
    kkt = lin.kkt;
    if (kkt < tol) {
      return make_solution(traj.states, traj.inputs, cost, kkt, accepted);
    }
    const LqProblem lq = build_subproblem(ocp, lin);
    const RiccatiGains gains = riccati_backward(lq);
    const Direction dir = forward_with_clamping(ocp, lq, gains, traj.inputs);

    bool stepped = false;
    bool any_finite = false;
    WarmStart candidate = traj;
    for (double alpha = 1.0; alpha >= 1.0 / 4096.0; alpha *= 0.5) {
      for (std::size_t k = 0; k < traj.inputs.size(); ++k) {
        candidate.inputs[k] =
            clamp_input(ocp, traj.inputs[k] + alpha * dir.du[k]);
      }
      try {
        candidate.states = rollout_states(ocp, x0, candidate.inputs);
        const double cand_cost =
            trajectory_cost(ocp, candidate.states, candidate.inputs, t0);
        if (std::isfinite(cand_cost)) {
          any_finite = true;
          if (cand_cost < cost) {
            traj = candidate;
            cost = cand_cost;
            ++accepted;
            stepped = true;
            break;
          }
        }
      } catch (const NumericError&) {
        // non-finite rollout at this step length; shrink and retry
      }
    }
    if (!stepped) {
      if (!any_finite) {
        throw SolverFailure(
            "sqp backtracking found no finite-cost step",
            make_solution(traj.states, traj.inputs, cost, kkt, accepted));
      }
      break;  // no descent step left; return the current iterate
    }
  }

  const Linearization lin = linearize_all(ocp, traj.states, traj.inputs, t0);
  return make_solution(traj.states, traj.inputs, cost, lin.kkt, accepted);
}

RtiResult rti_step(const OcpSpec& ocp, const Eigen::VectorXd& x0,
                   const WarmStart& warm, double t0) {
  if (static_cast<int>(warm.inputs.size()) != ocp.horizon_steps ||
      warm.states.size() != warm.inputs.size() + 1) {
    throw std::invalid_argument("warm start dimensions disagree with the OCP");
  }
  WarmStart traj = warm;
  traj.states[0] = x0;

  const Linearization lin = linearize_all(ocp, traj.states, traj.inputs, t0);
  const LqProblem lq = build_subproblem(ocp, lin);
  const RiccatiGains gains = riccati_backward(lq);
  const Direction dir = forward_with_clamping(ocp, lq, gains, traj.inputs);

  for (std::size_t k = 1; k < traj.states.size(); ++k) {
    traj.states[k] += dir.dx[k];
  }
  for (std::size_t k = 0; k < traj.inputs.size(); ++k) {
    traj.inputs[k] = clamp_input(ocp, traj.inputs[k] + dir.du[k]);
  }

  RtiResult result;
  result.u0 = traj.inputs.front();
  result.warm = std::move(traj);
  result.diagnostics.kkt_residual = lin.kkt;
  result.diagnostics.defect_inf = lin.defect_inf;
  result.diagnostics.cost =
      trajectory_cost(ocp, result.warm.states, result.warm.inputs, t0);
  return result;
}

}  // namespace mtmpc::mpc
