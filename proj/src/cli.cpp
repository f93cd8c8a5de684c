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

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mtmpc/bench.hpp"
#include "mtmpc/errors.hpp"
#include "mtmpc/rng.hpp"

namespace mtmpc::bench {

namespace {

namespace fs = std::filesystem;

constexpr double kNllTolerance = 1e-4;
constexpr double kJacobianTolerance = 1e-5;
constexpr double kMlpTolerance = 1e-3;

double rel_err(double analytic, double reference) {
  return std::abs(analytic - reference) /
         std::max({1.0, std::abs(analytic), std::abs(reference)});
}

metatrain::TaskDataset random_dataset(Rng& rng, int n, int d) {
  metatrain::TaskDataset ds;
  ds.task_id = "audit";
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd z(d);
    for (int j = 0; j < d; ++j) z[j] = rng.normal();
    ds.inputs.push_back(z);
    ds.targets.push_back(rng.normal());
  }
  return ds;
}

double audit_nll_gradient(Rng& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 4; ++trial) {
    const int e = 1 + static_cast<int>(rng.next_u64() % 3);
    const int d = 1 + static_cast<int>(rng.next_u64() % 2);
    const int m = 1 + static_cast<int>(rng.next_u64() % 2);
    std::vector<metatrain::SplitDataset> splits;
    for (int i = 0; i < m; ++i) {
      splits.push_back(metatrain::split_dataset(random_dataset(rng, 12, d)));
    }
    metatrain::Hyperparams hp;
    hp.frequencies = Eigen::MatrixXd::NullaryExpr(
        e, d, [&rng](Eigen::Index, Eigen::Index) { return rng.normal(); });
    hp.log_lambdas = Eigen::VectorXd::NullaryExpr(
        2 * e, [&rng](Eigen::Index) { return 0.4 * rng.normal(); });
    hp.log_sigma_w = Eigen::VectorXd::NullaryExpr(
        m, [&rng](Eigen::Index) { return -1.0 + 0.3 * rng.normal(); });

    metatrain::HyperparamGradient grad;
    metatrain::nll_value_and_gradient(hp, splits, &grad);

    const double h = 1e-5;
    const auto probe = [&](double* param, double analytic) {
      const double save = *param;
      *param = save + h;
      const double fp = metatrain::nll_objective(hp, splits);
      *param = save - h;
      const double fm = metatrain::nll_objective(hp, splits);
      *param = save;
      worst = std::max(worst, rel_err(analytic, (fp - fm) / (2.0 * h)));
    };
    for (int l = 0; l < e; ++l) {
      for (int jx = 0; jx < d; ++jx) {
        probe(&hp.frequencies(l, jx), grad.frequencies(l, jx));
      }
    }
    for (int i = 0; i < 2 * e; ++i) {
      probe(&hp.log_lambdas[i], grad.log_lambdas[i]);
    }
    for (int i = 0; i < m; ++i) {
      probe(&hp.log_sigma_w[i], grad.log_sigma_w[i]);
    }
  }
  return worst;
}

double audit_jacobians(Rng& rng) {
  double worst = 0.0;
  const auto check = [&rng, &worst](const mpc::OcpSpec& ocp) {
    for (int trial = 0; trial < 5; ++trial) {
      Eigen::VectorXd x(2);
      x << 0.5 * rng.normal(), 0.7 * rng.normal();
      Eigen::VectorXd u(1);
      u << rng.normal();
      Eigen::MatrixXd a, b;
      mpc::linearize_dynamics(ocp, x, u, a, b);
      const double h = 1e-6;
      for (int j = 0; j < 2; ++j) {
        Eigen::VectorXd xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        const Eigen::VectorXd fd =
            (ocp.dynamics.step(xp, u) - ocp.dynamics.step(xm, u)) / (2.0 * h);
        for (int i = 0; i < 2; ++i) worst = std::max(worst, rel_err(a(i, j), fd[i]));
      }
      Eigen::VectorXd up = u, um = u;
      up[0] += h;
      um[0] -= h;
      const Eigen::VectorXd fd =
          (ocp.dynamics.step(x, up) - ocp.dynamics.step(x, um)) / (2.0 * h);
      for (int i = 0; i < 2; ++i) worst = std::max(worst, rel_err(b(i, 0), fd[i]));
    }
  };

  mpc::CostSpec cost;
  cost.Q = Eigen::Vector2d{10.0, 1.0}.asDiagonal();
  cost.Qf = cost.Q;
  cost.R = Eigen::MatrixXd::Constant(1, 1, 0.1);
  cost.reference = [](double) { return Eigen::VectorXd::Zero(2); };

  const plant::PlantSpec load1 = plant::PlantSpec::vertical_load(1.0, 9.81, {0});
  const plant::PlantSpec load2 = plant::PlantSpec::vertical_load(1.2, 9.81, {0, 1});
  const plant::PlantSpec door = plant::PlantSpec::hinged_door(2.0, {0, 1});

  check(mpc::build_ocp(load1, nullptr, cost, 0.1, 0.02));
  check(mpc::build_ocp(
      mpc::ground_truth_model(load1, {"c", plant::ConstantDisturbance{-1.6}, false}),
      2, 1, cost, 0.1, 0.02));
  check(mpc::build_ocp(
      mpc::ground_truth_model(load1, {"s", plant::SinusoidDisturbance{3.0, 2.0}, false}),
      2, 1, cost, 0.1, 0.02));
  check(mpc::build_ocp(
      mpc::ground_truth_model(
          load2, {"se",
                  plant::SinPlusExpDisturbance{4.0, -2.0, -3.0,
                                               Eigen::Vector2d{1.0, 1.0}},
                  false}),
      2, 1, cost, 0.1, 0.02));
  check(mpc::build_ocp(
      mpc::ground_truth_model(
          door, {"f", plant::DoorFrictionDisturbance{0.3, 0.8, 0.9, 0.05, 2.0},
                 false}),
      2, 1, cost, 0.1, 0.02));

  Eigen::MatrixXd freqs = Eigen::MatrixXd::NullaryExpr(
      3, 2, [&rng](Eigen::Index, Eigen::Index) { return rng.normal(); });
  auto trig_weights = std::make_shared<Eigen::VectorXd>(
      Eigen::VectorXd::NullaryExpr(6, [&rng](Eigen::Index) { return rng.normal(); }));
  std::vector<mpc::ErrorChannel> trig_channels{
      {features::FeatureModel::trig_features(freqs), trig_weights}};
  check(mpc::build_ocp(load2, &trig_channels, cost, 0.1, 0.02));

  features::MlpWeights w;
  const auto draw = [&rng](int rows, int cols) {
    return Eigen::MatrixXd::NullaryExpr(
        rows, cols,
        [&rng](Eigen::Index, Eigen::Index) { return 0.4 * rng.normal(); });
  };
  w.w1 = draw(5, 2);
  w.w2 = draw(5, 5);
  w.w3 = draw(3, 5);
  w.b1 = draw(5, 1);
  w.b2 = draw(5, 1);
  w.b3 = draw(3, 1);
  auto mlp_weights = std::make_shared<Eigen::VectorXd>(
      Eigen::VectorXd::NullaryExpr(3, [&rng](Eigen::Index) { return rng.normal(); }));
  std::vector<mpc::ErrorChannel> mlp_channels{
      {features::FeatureModel::mlp_features(w), mlp_weights}};
  check(mpc::build_ocp(load2, &mlp_channels, cost, 0.1, 0.02));
  return worst;
}

double audit_mlp_gradient(Rng& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 2; ++trial) {
    std::vector<metatrain::SplitDataset> splits{
        metatrain::split_dataset(random_dataset(rng, 10, 2))};
    features::MlpWeights w;
    const auto draw = [&rng](int rows, int cols) {
      return Eigen::MatrixXd::NullaryExpr(
          rows, cols,
          [&rng](Eigen::Index, Eigen::Index) { return 0.4 * rng.normal(); });
    };
    const int h = 3, l = 2;
    w.w1 = draw(h, 2);
    w.w2 = draw(h, h);
    w.w3 = draw(l, h);
    w.b1 = draw(h, 1);
    w.b2 = draw(h, 1);
    w.b3 = draw(l, 1);
    Eigen::VectorXd log_lambdas = draw(l, 1);
    Eigen::VectorXd log_sigma = Eigen::VectorXd::Constant(1, -0.8);

    metatrain::MlpGradient grad;
    metatrain::mlp_nll_value_and_gradient(w, log_lambdas, log_sigma, splits, &grad);

    const double step = 1e-5;
    const auto probe = [&](double* param, double analytic) {
      const double save = *param;
      *param = save + step;
      const double fp = metatrain::mlp_nll_objective(w, log_lambdas, log_sigma, splits);
      *param = save - step;
      const double fm = metatrain::mlp_nll_objective(w, log_lambdas, log_sigma, splits);
      *param = save;
      worst = std::max(worst, rel_err(analytic, (fp - fm) / (2.0 * step)));
    };
    for (int i = 0; i < h; ++i) {
      for (int jx = 0; jx < 2; ++jx) probe(&w.w1(i, jx), grad.weights.w1(i, jx));
      probe(&w.b1(i), grad.weights.b1(i));
      for (int jx = 0; jx < h; ++jx) probe(&w.w2(i, jx), grad.weights.w2(i, jx));
    }
    for (int i = 0; i < l; ++i) {
      for (int jx = 0; jx < h; ++jx) probe(&w.w3(i, jx), grad.weights.w3(i, jx));
      probe(&w.b3(i), grad.weights.b3(i));
      probe(&log_lambdas(i), grad.log_lambdas(i));
    }
    probe(&log_sigma(0), grad.log_sigma_w(0));
  }
  return worst;
}

void write_run_csv(const std::string& path, const RunResult& run,
                   const StudyConfig& study) {
  std::ostringstream csv;
  csv << "t";
  for (int i = 0; i < study.plant_spec.state_dim; ++i) csv << ",x" << i;
  csv << ",u,kkt\n";
  for (std::size_t k = 0; k < run.trajectory.inputs.size(); ++k) {
    csv << run.trajectory.times[k];
    for (int i = 0; i < study.plant_spec.state_dim; ++i) {
      csv << ',' << run.trajectory.states[k][i];
    }
    csv << ',' << run.trajectory.inputs[k][0] << ',' << run.kkt[k] << '\n';
  }
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary);
  out << csv.str();
}

}  // namespace

GradCheckReport run_gradcheck(std::uint64_t seed) {
  Rng rng(seed == 0 ? 2026 : seed);
  GradCheckReport report;
  report.nll_max_rel_err = audit_nll_gradient(rng);
  report.jacobian_max_rel_err = audit_jacobians(rng);
  report.mlp_max_rel_err = audit_mlp_gradient(rng);
  report.pass = report.nll_max_rel_err < kNllTolerance &&
                report.jacobian_max_rel_err < kJacobianTolerance &&
                report.mlp_max_rel_err < kMlpTolerance;
  return report;
}

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"multi-task residual-learning MPC benchmark"};
  app.require_subcommand(1);

  std::string config, out_dir = "out", baseline_label, task_id;
  std::uint64_t seed = 0;
  int n_seeds = -1;
  int run_seed = 0;

  auto* collect = app.add_subcommand("collect", "record residual datasets");
  collect->add_option("--config", config, "study config file or name")->required();
  collect->add_option("--out", out_dir, "output directory");
  collect->add_option("--seed", seed, "override the study base seed");

  auto* train = app.add_subcommand("train", "fit model artifacts");
  train->add_option("--config", config)->required();
  train->add_option("--out", out_dir);
  train->add_option("--seed", seed);

  auto* run = app.add_subcommand("run", "single closed-loop rollout");
  run->add_option("--config", config)->required();
  run->add_option("--baseline", baseline_label, "baseline label")->required();
  run->add_option("--task", task_id, "task id")->required();
  run->add_option("--seed", run_seed, "noise realization index");
  run->add_option("--out", out_dir);

  auto* report_cmd = app.add_subcommand("report", "full benchmark report");
  report_cmd->add_option("--config", config)->required();
  report_cmd->add_option("--out", out_dir);
  report_cmd->add_option("--seeds", n_seeds, "override n_seeds");
  report_cmd->add_option("--seed", seed);

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference audits");
  gradcheck->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gradcheck->parsed()) {
      const GradCheckReport rep = run_gradcheck(seed);
      std::printf("predictive-objective gradient: max rel err %.3e (tol %.0e)\n",
                  rep.nll_max_rel_err, kNllTolerance);
      std::printf("dynamics jacobians:            max rel err %.3e (tol %.0e)\n",
                  rep.jacobian_max_rel_err, kJacobianTolerance);
      std::printf("mlp objective gradient:        max rel err %.3e (tol %.0e)\n",
                  rep.mlp_max_rel_err, kMlpTolerance);
      std::printf("%s\n", rep.pass ? "gradcheck passed" : "gradcheck FAILED");
      return rep.pass ? 0 : 2;
    }

    StudyConfig study = load_study(config);
    if (seed != 0) study.base_seed = seed;
    if (n_seeds > 0) study.n_seeds = n_seeds;

    if (collect->parsed()) {
      const DatasetMap datasets = collect_study(study);
      save_datasets(study, datasets, out_dir);
      for (const auto& [id, ds] : datasets) {
        std::printf("collected %4d samples for %-12s%s\n", ds.size(), id.c_str(),
                    ds.diverged ? " (diverged, truncated)" : "");
      }
      return 0;
    }
    if (train->parsed()) {
      const DatasetMap datasets = load_datasets(study, out_dir);
      const ArtifactMap artifacts = train_study(study, datasets);
      save_artifacts(study, artifacts, out_dir);
      for (const auto& [key, artifact] : artifacts) {
        std::printf("trained %-24s (%s, %d features) -> %s\n", key.c_str(),
                    artifact.feature_kind.c_str(),
                    artifact.feature_model().feature_dim,
                    artifact_path(out_dir, study, key).c_str());
      }
      return 0;
    }
    if (run->parsed()) {
      const Baseline baseline = Baseline::parse(baseline_label);
      const ArtifactMap artifacts =
          baseline.adaptive() && baseline.kind != BaselineKind::kOffsetCompensation
              ? load_artifacts(study, out_dir)
              : ArtifactMap{};
      const std::uint64_t noise_seed =
          derive_seed(study.base_seed ^ hash_label("run:" + task_id),
                      static_cast<std::uint64_t>(run_seed));
      const RunResult result = run_closed_loop(
          study, study.task_by_id(task_id), baseline, artifacts, noise_seed);
      if (result.failed) {
        std::fprintf(stderr, "run failed: %s\n", result.failure.c_str());
        return 2;
      }
      const std::size_t stride =
          std::max<std::size_t>(1, result.trajectory.inputs.size() / 16);
      for (std::size_t k = 0; k < result.trajectory.inputs.size(); k += stride) {
        std::printf("t=%6.2f  x=[% 8.4f % 8.4f]  u=% 9.4f  kkt=%.2e\n",
                    result.trajectory.times[k], result.trajectory.states[k][0],
                    result.trajectory.states[k][1],
                    result.trajectory.inputs[k][0], result.kkt[k]);
      }
      std::printf("closed-loop cost: %.6f%s\n", result.cost,
                  result.trajectory.saturated ? " (state box saturated)" : "");
      const std::string path =
          (fs::path(out_dir) / ("run_" + study.name + "_" + baseline_label + "_" +
                                task_id + "_" + std::to_string(run_seed) + ".csv"))
              .string();
      write_run_csv(path, result, study);
      std::printf("trajectory written to %s\n", path.c_str());
      return 0;
    }
    if (report_cmd->parsed()) {
      const ArtifactMap artifacts = load_artifacts(study, out_dir);
      const ExperimentReport report = run_benchmark(study, artifacts);
      save_report(report, study, out_dir);
      save_traces(study, artifacts, out_dir);
      for (const auto& cell : report.cells) {
        std::printf("%-24s %-12s median regret %10.4f  [%.4f, %.4f]  (%d/%d ok)\n",
                    cell.baseline.c_str(), cell.task.c_str(), cell.regret_median,
                    cell.regret_q25, cell.regret_q75, cell.succeeded,
                    cell.attempted);
      }
      std::printf("verdicts: %s\n", report.verdicts.dump().c_str());
      std::printf("report written to %s\n",
                  (fs::path(out_dir) / (study.name + "_report.csv")).c_str());
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 2;
  } catch (const OptimizationFailure& e) {
    std::fprintf(stderr, "optimization failure: %s\n", e.what());
    return 2;
  }
  return 0;
}

}  // namespace mtmpc::bench
