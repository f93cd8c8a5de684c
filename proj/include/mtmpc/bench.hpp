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

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtmpc/adapt.hpp"
#include "mtmpc/metatrain.hpp"
#include "mtmpc/mpc.hpp"
#include "mtmpc/plant.hpp"

namespace mtmpc::bench {

enum class BaselineKind {
  kNominal,
  kGroundTruth,
  kOffsetCompensation,
  kSingleTask,
  kMultiTask,
  kNeuralNetwork,
};

struct Baseline {
  BaselineKind kind = BaselineKind::kNominal;
  std::string training_task;  // SingleTask only

  std::string label() const;
  bool adaptive() const;
  static Baseline parse(const std::string& label);
};

struct AdapterConfig {
  double sigma_Q = 1e-6;           // process-noise variance
  bool estimate_sigma_R = false;   // marginal-likelihood estimation on an
                                   // initial batch instead of the true value
  int estimate_batch = 100;
  double offset_prior_lambda = 100.0;  // prior variance of the adaptive bias
  double q_jerk = 50.0;                // accel-estimator process intensity
};

struct StudyConfig {
  std::string name;
  plant::PlantSpec plant_spec;
  plant::FamilySpec family;
  std::vector<plant::DisturbanceTask> extra_tasks;  // e.g. the stiff test door
  std::vector<std::string> eval_task_ids;           // empty -> every task
  std::vector<std::string> multi_task_train_ids;    // empty -> all training tasks
  std::vector<std::string> nn_train_ids;            // empty -> multi-task ids
  plant::ReferenceSchedule schedule;
  // evaluation rollouts may follow a different reference than collection
  // (e.g. a single step-and-hold); nullopt reuses `schedule`
  std::optional<plant::ReferenceSchedule> eval_schedule;
  double horizon = 1.5;
  double dt = 0.02;
  double duration = 8.0;
  double collect_duration = 16.0;
  double noise_std = 0.05;        // residual measurement noise (std)
  double angle_noise_std = 2e-3;  // door-only (alpha, rate) sensor noise
  double rate_noise_std = 2e-2;
  int num_frequencies = 3;
  metatrain::MlpArch mlp{20, 9};
  metatrain::OptimizerConfig optimizer;
  AdapterConfig adapter;
  int n_seeds = 20;
  std::uint64_t base_seed = 1234;
  Eigen::VectorXd q_weights;   // diagonal of Q_o
  Eigen::VectorXd qf_weights;  // diagonal of the terminal weight
  double r_weight = 0.1;
  std::optional<mpc::InputBounds> input_bounds;
  std::optional<mpc::SoftStateBounds> soft_state_bounds;
  std::vector<Baseline> baselines;
  int workers = 0;  // 0 -> hardware concurrency

  std::vector<plant::DisturbanceTask> all_tasks() const;
  std::vector<plant::DisturbanceTask> eval_tasks() const;
  const plant::DisturbanceTask& task_by_id(const std::string& id) const;
  mpc::CostSpec cost_spec(const plant::ReferenceSchedule& sched) const;
  plant::ReferenceSchedule evaluation_schedule() const {
    return eval_schedule.value_or(schedule);
  }
};

/// Built-in study: "sinusoid_study", "sinexp_study", or "door_study".
StudyConfig default_study(const std::string& name);
/// Study from a JSON document; fields override the named study's defaults.
StudyConfig study_from_json(const nlohmann::json& j);
/// Loads a config file, or falls back to a built-in study name.
StudyConfig load_study(const std::string& path_or_name);

// Persistable training result for one baseline family. Depending on
// feature_kind either the trig block (frequencies) or the mlp block is
// populated; log_sigma_w is aligned with task_ids.
struct ModelArtifact {
  int schema_version = 1;
  std::string study;
  std::string plant_kind;
  std::vector<int> channels;
  std::string feature_kind;  // "trig" | "mlp"
  Eigen::MatrixXd frequencies;
  features::MlpWeights mlp;
  Eigen::VectorXd log_lambdas;
  std::vector<std::string> task_ids;
  Eigen::VectorXd log_sigma_w;
  std::string training_digest;

  features::FeatureModel feature_model() const;
  features::PriorSpec prior() const;
  nlohmann::json to_json() const;
  static ModelArtifact from_json(const nlohmann::json& j);
};

using ArtifactMap = std::map<std::string, ModelArtifact>;
using DatasetMap = std::map<std::string, metatrain::TaskDataset>;

/// Rolls out every training task under the nominal MPC and records residual
/// datasets (one per task, keyed by task id).
DatasetMap collect_study(const StudyConfig& study);

/// Trains the artifacts needed by the configured baselines:
/// "multi_task", "single_task:<id>", and "neural_network".
ArtifactMap train_study(const StudyConfig& study, const DatasetMap& datasets);

struct RunResult {
  plant::Trajectory trajectory;
  double cost = 0.0;
  bool failed = false;
  std::string failure;
  // per-control-step diagnostics
  std::vector<Eigen::VectorXd> adapter_means;
  std::vector<double> adapter_cov_trace;
  std::vector<double> prediction_errors;  // one-step residual prediction
  std::vector<double> kkt;
  std::vector<double> solve_ms;
  double sigma_R_used = 0.0;
};

/// Simulates the true plant under the chosen controller. Adaptive baselines
/// interleave measurement formation, a Kalman parameter step, and one
/// real-time iteration per control period. The seed fixes the measurement
/// noise realization and is shared across baselines.
RunResult run_closed_loop(const StudyConfig& study,
                          const plant::DisturbanceTask& task,
                          const Baseline& baseline, const ArtifactMap& artifacts,
                          std::uint64_t seed);

/// Signed cost difference against the ground-truth controller on the same
/// task and noise realization.
double cost_regret(double baseline_cost, double groundtruth_cost);

struct RunRow {
  std::string baseline, task;
  int seed = 0;
  double cost = 0.0;
  double regret = 0.0;
  bool failed = false;
};

struct CellStats {
  std::string baseline, task;
  int attempted = 0;
  int succeeded = 0;
  double cost_median = 0.0;
  double regret_median = 0.0;
  double regret_q25 = 0.0;
  double regret_q75 = 0.0;
};

struct ExperimentReport {
  std::string study;
  std::vector<RunRow> rows;
  std::vector<CellStats> cells;
  nlohmann::json verdicts;

  const CellStats& cell(const std::string& baseline, const std::string& task) const;
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

/// Full cross product (baselines x eval tasks x seeds), regret statistics,
/// and the per-study ordering verdicts. Ground-truth runs are executed for
/// every (task, seed) regardless of the baseline list.
ExperimentReport run_benchmark(const StudyConfig& study,
                               const ArtifactMap& artifacts);

/// Linear-interpolation quantile of a sample (q in [0, 1]).
double quantile(std::vector<double> values, double q);

// --- file layout ------------------------------------------------------------

std::string dataset_path(const std::string& out_dir, const StudyConfig& study,
                         const std::string& task_id);
std::string artifact_path(const std::string& out_dir, const StudyConfig& study,
                          const std::string& artifact_key);

void save_datasets(const StudyConfig& study, const DatasetMap& datasets,
                   const std::string& out_dir);
DatasetMap load_datasets(const StudyConfig& study, const std::string& out_dir);
void save_artifacts(const StudyConfig& study, const ArtifactMap& artifacts,
                    const std::string& out_dir);
ArtifactMap load_artifacts(const StudyConfig& study, const std::string& out_dir);
void save_report(const ExperimentReport& report, const StudyConfig& study,
                 const std::string& out_dir);
/// Per-step adapter/solver traces of seed-0 runs, for parameter-evolution
/// plots.
void save_traces(const StudyConfig& study, const ArtifactMap& artifacts,
                 const std::string& out_dir);

// --- gradient audits ---------------------------------------------------------

struct GradCheckReport {
  double nll_max_rel_err = 0.0;
  double jacobian_max_rel_err = 0.0;
  double mlp_max_rel_err = 0.0;
  bool pass = false;
};

/// Randomized finite-difference audits of the analytic predictive-likelihood
/// gradient (tolerance 1e-4), the dynamics Jacobians (1e-5), and the mlp
/// objective gradient (1e-3).
GradCheckReport run_gradcheck(std::uint64_t seed);

/// CLI entry point: collect / train / run / report / gradcheck.
int cli_main(int argc, const char* const* argv);

}  // namespace mtmpc::bench
