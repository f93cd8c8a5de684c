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

#include "mtmpc/metatrain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "mtmpc/errors.hpp"
#include "mtmpc/rng.hpp"

namespace mtmpc::metatrain {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kLogTwoPi = 1.8378770664093453;
constexpr double kInf = std::numeric_limits<double>::infinity();

// Safeguards on the log-parameterized positives during descent.
constexpr double kLogLambdaMin = -30.0;
constexpr double kLogLambdaMax = 30.0;
constexpr double kLogSigmaMax = 10.0;

Eigen::MatrixXd stack_inputs(const std::vector<Eigen::VectorXd>& zs, int dim) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(zs.size()), dim);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    out.row(i) = zs[static_cast<std::size_t>(i)].transpose();
  }
  return out;
}

Eigen::VectorXd stack_targets(const std::vector<double>& ys) {
  return Eigen::Map<const Eigen::VectorXd>(ys.data(),
                                           static_cast<Eigen::Index>(ys.size()));
}

// Validation NLL of one task plus the adjoints needed by all hyperparameter
// paths: d/d log lambda, d/d log sigma, and the feature-matrix adjoints
// that the trig and mlp paths map onto their own parameters.
struct TaskCore {
  double value = 0.0;
  Eigen::VectorXd d_log_lambdas;
  double d_log_sigma = 0.0;
  Eigen::MatrixXd phi_bar_train;
  Eigen::MatrixXd phi_bar_val;
};

TaskCore task_nll_core(const Eigen::MatrixXd& phi_t, const Eigen::VectorXd& y_t,
                       const Eigen::MatrixXd& phi_v, const Eigen::VectorXd& y_v,
                       const Eigen::VectorXd& lambdas, double sigma2,
                       double scale, bool want_grad) {
  const Eigen::Index dim = lambdas.size();
  const auto n_val = static_cast<double>(y_v.size());

  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(dim, dim);
  gram.selfadjointView<Eigen::Lower>().rankUpdate(phi_t.transpose());
  gram.triangularView<Eigen::StrictlyUpper>() =
      gram.transpose().triangularView<Eigen::StrictlyUpper>();

  Eigen::MatrixXd precision = gram / sigma2;
  precision.diagonal() += lambdas.cwiseInverse();
  Eigen::LLT<Eigen::MatrixXd> llt(precision);
  if (llt.info() != Eigen::Success) {
    throw NumericError("posterior precision not SPD in predictive objective");
  }

  const Eigen::VectorXd rhs = phi_t.transpose() * y_t / sigma2;
  const Eigen::VectorXd mu = llt.solve(rhs);
  const Eigen::MatrixXd qv = llt.solve(phi_v.transpose());  // dim x Nv
  const Eigen::VectorXd s =
      (phi_v.cwiseProduct(qv.transpose())).rowwise().sum().array() + sigma2;
  const Eigen::VectorXd res = y_v - phi_v * mu;

  TaskCore core;
  core.value = scale / n_val *
               (0.5 * (s.array().log() + kLogTwoPi) +
                res.array().square() / (2.0 * s.array()))
                   .sum();
  if (!want_grad) return core;

  const double w = scale / n_val;
  const Eigen::VectorXd c =
      w * (0.5 / s.array() - res.array().square() / (2.0 * s.array().square()));
  const Eigen::VectorXd g = w * (-res.array() / s.array());

  const Eigen::VectorXd gbar = phi_v.transpose() * g;
  const Eigen::VectorXd p = llt.solve(gbar);
  const Eigen::MatrixXd w_mat = qv * c.asDiagonal() * qv.transpose();
  const Eigen::MatrixXd a_sym =
      -0.5 * (p * mu.transpose() + mu * p.transpose()) - w_mat;

  core.d_log_lambdas = -a_sym.diagonal().cwiseQuotient(lambdas);
  core.d_log_sigma = (-2.0 / sigma2) * a_sym.cwiseProduct(gram).sum() -
                     2.0 * p.dot(rhs) + 2.0 * sigma2 * c.sum();
  core.phi_bar_train = (2.0 * phi_t * a_sym + y_t * p.transpose()) / sigma2;
  core.phi_bar_val = g * mu.transpose() + (2.0 * c).asDiagonal() * qv.transpose();
  return core;
}

/// Maps a feature-matrix adjoint onto the trig frequency rows:
/// d sin(2 pi w.z)/dw = 2 pi z cos, d cos(2 pi w.z)/dw = -2 pi z sin.
void accumulate_frequency_gradient(const Eigen::MatrixXd& z,
                                   const Eigen::MatrixXd& phi,
                                   const Eigen::MatrixXd& phi_bar,
                                   Eigen::MatrixXd& d_freq) {
  const Eigen::Index e = d_freq.rows();
  for (Eigen::Index l = 0; l < e; ++l) {
    const Eigen::VectorXd coeff =
        phi_bar.col(l).cwiseProduct(phi.col(e + l)) -
        phi_bar.col(e + l).cwiseProduct(phi.col(l));
    d_freq.row(l) += kTwoPi * (coeff.transpose() * z);
  }
}

struct SplitMatrices {
  Eigen::MatrixXd z_train, z_val;
  Eigen::VectorXd y_train, y_val;
};

std::vector<SplitMatrices> to_matrices(const std::vector<SplitDataset>& splits,
                                       int input_dim) {
  std::vector<SplitMatrices> out;
  out.reserve(splits.size());
  for (const auto& split : splits) {
    if (split.train.size() == 0 || split.validation.size() == 0) {
      throw std::invalid_argument("split halves must both be nonempty");
    }
    SplitMatrices m;
    m.z_train = stack_inputs(split.train.inputs, input_dim);
    m.z_val = stack_inputs(split.validation.inputs, input_dim);
    m.y_train = stack_targets(split.train.targets);
    m.y_val = stack_targets(split.validation.targets);
    out.push_back(std::move(m));
  }
  return out;
}

Eigen::MatrixXd trig_matrix(const Eigen::MatrixXd& z,
                            const Eigen::MatrixXd& frequencies) {
  const Eigen::Index e = frequencies.rows();
  const Eigen::MatrixXd arg = kTwoPi * (z * frequencies.transpose());
  Eigen::MatrixXd phi(z.rows(), 2 * e);
  phi.leftCols(e) = arg.array().sin();
  phi.rightCols(e) = arg.array().cos();
  return phi;
}

double nll_impl(const Hyperparams& hp, const std::vector<SplitMatrices>& data,
                const std::vector<std::string>& task_ids,
                HyperparamGradient* grad) {
  const auto m_tasks = static_cast<int>(data.size());
  const Eigen::VectorXd lambdas = hp.log_lambdas.array().exp();
  if (grad != nullptr) {
    grad->frequencies = Eigen::MatrixXd::Zero(hp.frequencies.rows(),
                                              hp.frequencies.cols());
    grad->log_lambdas = Eigen::VectorXd::Zero(hp.log_lambdas.size());
    grad->log_sigma_w = Eigen::VectorXd::Zero(hp.log_sigma_w.size());
  }
  double total = 0.0;
  const double scale = 1.0 / m_tasks;
  for (int m = 0; m < m_tasks; ++m) {
    const auto& d = data[static_cast<std::size_t>(m)];
    const double sigma = std::exp(hp.log_sigma_w[m]);
    const Eigen::MatrixXd phi_t = trig_matrix(d.z_train, hp.frequencies);
    const Eigen::MatrixXd phi_v = trig_matrix(d.z_val, hp.frequencies);
    TaskCore core;
    try {
      core = task_nll_core(phi_t, d.y_train, phi_v, d.y_val, lambdas,
                           sigma * sigma, scale, grad != nullptr);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (task '" +
                         task_ids[static_cast<std::size_t>(m)] + "')");
    }
    total += core.value;
    if (grad != nullptr) {
      grad->log_lambdas += core.d_log_lambdas;
      grad->log_sigma_w[m] = core.d_log_sigma;
      accumulate_frequency_gradient(d.z_train, phi_t, core.phi_bar_train,
                                    grad->frequencies);
      accumulate_frequency_gradient(d.z_val, phi_v, core.phi_bar_val,
                                    grad->frequencies);
    }
  }
  return total;
}

void check_split_shapes(const Hyperparams& hp,
                        const std::vector<SplitDataset>& splits) {
  if (static_cast<Eigen::Index>(splits.size()) != hp.log_sigma_w.size()) {
    throw std::invalid_argument("one log_sigma_w entry per task is required");
  }
  if (hp.log_lambdas.size() != 2 * hp.frequencies.rows()) {
    throw std::invalid_argument("log_lambdas must have 2E entries");
  }
  for (const auto& split : splits) {
    for (const auto& z : split.train.inputs) {
      if (z.size() != hp.input_dim()) {
        throw std::invalid_argument("input location dim and frequency columns disagree");
      }
      break;
    }
  }
}

std::vector<std::string> split_ids(const std::vector<SplitDataset>& splits) {
  std::vector<std::string> ids;
  ids.reserve(splits.size());
  for (const auto& s : splits) ids.push_back(s.train.task_id);
  return ids;
}

// --- flat-vector packing for the optimizer ---------------------------------

struct TrigPacking {
  int e = 0, d = 0, m = 0;
  int size() const { return e * d + 2 * e + m; }

  Eigen::VectorXd pack(const Hyperparams& hp) const {
    Eigen::VectorXd x(size());
    int at = 0;
    for (int l = 0; l < e; ++l)
      for (int j = 0; j < d; ++j) x[at++] = hp.frequencies(l, j);
    x.segment(at, 2 * e) = hp.log_lambdas;
    x.tail(m) = hp.log_sigma_w;
    return x;
  }

  Hyperparams unpack(const Eigen::VectorXd& x) const {
    Hyperparams hp;
    hp.frequencies.resize(e, d);
    int at = 0;
    for (int l = 0; l < e; ++l)
      for (int j = 0; j < d; ++j) hp.frequencies(l, j) = x[at++];
    hp.log_lambdas = x.segment(at, 2 * e);
    hp.log_sigma_w = x.tail(m);
    return hp;
  }

  Eigen::VectorXd pack_grad(const HyperparamGradient& g) const {
    Hyperparams hp;
    hp.frequencies = g.frequencies;
    hp.log_lambdas = g.log_lambdas;
    hp.log_sigma_w = g.log_sigma_w;
    return pack(hp);
  }
};

struct Adam {
  Eigen::VectorXd m, v;
  int t = 0;
  void step(Eigen::VectorXd& x, const Eigen::VectorXd& g,
            const OptimizerConfig& cfg) {
    if (m.size() == 0) {
      m = Eigen::VectorXd::Zero(x.size());
      v = Eigen::VectorXd::Zero(x.size());
    }
    ++t;
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g;
    v = cfg.adam_beta2 * v.array().matrix() +
        (1.0 - cfg.adam_beta2) * g.array().square().matrix();
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
    x -= (cfg.step_size * (m / bc1).array() /
          ((v / bc2).array().sqrt() + cfg.adam_eps))
             .matrix();
  }
};

Eigen::VectorXd input_range_scales(const std::vector<TaskDataset>& datasets,
                                   int input_dim) {
  Eigen::VectorXd lo = Eigen::VectorXd::Constant(input_dim, kInf);
  Eigen::VectorXd hi = Eigen::VectorXd::Constant(input_dim, -kInf);
  for (const auto& ds : datasets) {
    for (const auto& z : ds.inputs) {
      lo = lo.cwiseMin(z);
      hi = hi.cwiseMax(z);
    }
  }
  Eigen::VectorXd scales(input_dim);
  for (int j = 0; j < input_dim; ++j) {
    scales[j] = 1.0 / std::max(hi[j] - lo[j], 1e-3);
  }
  return scales;
}

double target_std(const TaskDataset& ds) {
  const Eigen::VectorXd y = stack_targets(ds.targets);
  const double mean = y.mean();
  return std::sqrt((y.array() - mean).square().mean());
}

}  // namespace

SplitDataset split_dataset(const TaskDataset& dataset) {
  if (dataset.size() < 4) {
    throw std::invalid_argument("dataset split requires at least 4 samples");
  }
  SplitDataset out;
  out.train.task_id = out.validation.task_id = dataset.task_id;
  out.train.channel = out.validation.channel = dataset.channel;
  out.train.diverged = out.validation.diverged = dataset.diverged;
  for (int i = 0; i < dataset.size(); ++i) {
    auto& half = i % 2 == 0 ? out.train : out.validation;
    half.inputs.push_back(dataset.inputs[static_cast<std::size_t>(i)]);
    half.targets.push_back(dataset.targets[static_cast<std::size_t>(i)]);
  }
  return out;
}

double nll_value_and_gradient(const Hyperparams& hp,
                              const std::vector<SplitDataset>& splits,
                              HyperparamGradient* grad) {
  check_split_shapes(hp, splits);
  const auto data = to_matrices(splits, hp.input_dim());
  return nll_impl(hp, data, split_ids(splits), grad);
}

double nll_objective(const Hyperparams& hp, const std::vector<SplitDataset>& splits) {
  return nll_value_and_gradient(hp, splits, nullptr);
}

HyperparamGradient nll_gradient(const Hyperparams& hp,
                                const std::vector<SplitDataset>& splits) {
  HyperparamGradient grad;
  nll_value_and_gradient(hp, splits, &grad);
  return grad;
}

HyperparamFit optimize_hyperparams(const std::vector<TaskDataset>& datasets,
                                   int num_frequencies,
                                   const OptimizerConfig& config) {
  if (datasets.empty()) throw std::invalid_argument("no datasets to train on");
  if (num_frequencies < 1) throw std::invalid_argument("need at least one frequency");
  const int input_dim = static_cast<int>(datasets.front().inputs.front().size());
  const int channel = datasets.front().channel;
  for (const auto& ds : datasets) {
    if (ds.channel != channel) {
      throw std::invalid_argument("datasets must share the error channel");
    }
    for (const auto& z : ds.inputs) {
      if (static_cast<int>(z.size()) != input_dim) {
        throw std::invalid_argument("datasets must share the input dimension");
      }
    }
  }

  std::vector<SplitDataset> splits;
  splits.reserve(datasets.size());
  for (const auto& ds : datasets) splits.push_back(split_dataset(ds));
  const auto data = to_matrices(splits, input_dim);
  const auto ids = split_ids(splits);

  const TrigPacking packing{num_frequencies, input_dim,
                            static_cast<int>(datasets.size())};
  const Eigen::VectorXd scales = input_range_scales(datasets, input_dim);
  const double log_sigma_floor = std::log(config.sigma_floor);

  HyperparamFit fit;
  fit.objective = kInf;
  std::ostringstream trace;
  std::vector<Hyperparams> restart_best;

  for (int r = 0; r < config.restarts; ++r) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(r)));
    Hyperparams hp;
    hp.frequencies.resize(num_frequencies, input_dim);
    // The landscape over frequencies is multimodal and nearly flat far from
    // the data's spectral content, so descent cannot travel there; later
    // restarts widen the draw to cover frequencies well above 1/(input range).
    const double spread = static_cast<double>(1 + r);
    for (int l = 0; l < num_frequencies; ++l) {
      for (int j = 0; j < input_dim; ++j) {
        hp.frequencies(l, j) = rng.normal() * scales[j] * spread;
      }
    }
    hp.log_lambdas = Eigen::VectorXd::Zero(2 * num_frequencies);
    hp.log_sigma_w.resize(packing.m);
    for (int m = 0; m < packing.m; ++m) {
      hp.log_sigma_w[m] = std::log(
          std::max(target_std(datasets[static_cast<std::size_t>(m)]), 1e-3));
    }

    Eigen::VectorXd x = packing.pack(hp);
    double best_value = kInf;
    Eigen::VectorXd best_x = x;
    Adam adam;
    bool aborted = false;

    for (int it = 0; it <= config.iterations; ++it) {
      const Hyperparams cur = packing.unpack(x);
      double value = kInf;
      HyperparamGradient grad;
      try {
        value = nll_impl(cur, data, ids, it < config.iterations ? &grad : nullptr);
      } catch (const NumericError&) {
        aborted = true;
      }
      if (!std::isfinite(value)) aborted = true;
      if (it == 0) fit.restart_initial.push_back(aborted ? kInf : value);
      if (aborted) break;
      if (value < best_value) {
        best_value = value;
        best_x = x;
      }
      if (it == config.iterations) break;
      Eigen::VectorXd g = packing.pack_grad(grad);
      if (!g.allFinite()) break;
      adam.step(x, g, config);
      // keep the log-parameterized positives in a sane box
      auto lambdas = x.segment(num_frequencies * input_dim, 2 * num_frequencies);
      lambdas = lambdas.cwiseMax(kLogLambdaMin).cwiseMin(kLogLambdaMax);
      auto sigmas = x.tail(packing.m);
      for (int m = 0; m < packing.m; ++m) {
        if (sigmas[m] < log_sigma_floor) {
          sigmas[m] = log_sigma_floor;
          fit.sigma_floor_active = true;
        } else if (sigmas[m] > kLogSigmaMax) {
          sigmas[m] = kLogSigmaMax;
        }
      }
    }

    fit.restart_final.push_back(best_value);
    restart_best.push_back(packing.unpack(best_x));
    trace << "restart " << r << ": init="
          << fit.restart_initial[static_cast<std::size_t>(r)]
          << " best=" << best_value << (aborted ? " (diverged)" : "") << "\n";
    if (best_value < fit.objective) {
      fit.objective = best_value;
      fit.hyperparams = restart_best.back();
    }
  }

  if (!std::isfinite(fit.objective)) {
    throw OptimizationFailure("all restarts diverged:\n" + trace.str());
  }
  return fit;
}

// --- mlp variant ------------------------------------------------------------

namespace {

struct MlpPacking {
  int d = 0, h = 0, l = 0, m = 0;
  int weight_count() const { return h * d + h + h * h + h + l * h + l; }
  int size() const { return weight_count() + l + m; }

  Eigen::VectorXd pack(const features::MlpWeights& w,
                       const Eigen::VectorXd& log_lambdas,
                       const Eigen::VectorXd& log_sigma) const {
    Eigen::VectorXd x(size());
    int at = 0;
    const auto put = [&x, &at](const Eigen::MatrixXd& mat) {
      for (Eigen::Index i = 0; i < mat.rows(); ++i)
        for (Eigen::Index j = 0; j < mat.cols(); ++j) x[at++] = mat(i, j);
    };
    put(w.w1);
    put(w.b1);
    put(w.w2);
    put(w.b2);
    put(w.w3);
    put(w.b3);
    x.segment(at, l) = log_lambdas;
    x.tail(m) = log_sigma;
    return x;
  }

  void unpack(const Eigen::VectorXd& x, features::MlpWeights& w,
              Eigen::VectorXd& log_lambdas, Eigen::VectorXd& log_sigma) const {
    int at = 0;
    const auto take = [&x, &at](Eigen::MatrixXd& mat, int rows, int cols) {
      mat.resize(rows, cols);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) mat(i, j) = x[at++];
    };
    const auto take_vec = [&x, &at](Eigen::VectorXd& vec, int n) {
      vec.resize(n);
      for (int i = 0; i < n; ++i) vec[i] = x[at++];
    };
    take(w.w1, h, d);
    take_vec(w.b1, h);
    take(w.w2, h, h);
    take_vec(w.b2, h);
    take(w.w3, l, h);
    take_vec(w.b3, l);
    log_lambdas = x.segment(at, l);
    log_sigma = x.tail(m);
  }
};

struct MlpForward {
  Eigen::MatrixXd h1, h2, phi;
};

MlpForward mlp_forward(const features::MlpWeights& w, const Eigen::MatrixXd& z) {
  MlpForward f;
  f.h1 = ((z * w.w1.transpose()).rowwise() + w.b1.transpose()).array().tanh();
  f.h2 = ((f.h1 * w.w2.transpose()).rowwise() + w.b2.transpose()).array().tanh();
  f.phi = (f.h2 * w.w3.transpose()).rowwise() + w.b3.transpose();
  return f;
}

void mlp_backward(const features::MlpWeights& w, const Eigen::MatrixXd& z,
                  const MlpForward& f, const Eigen::MatrixXd& phi_bar,
                  features::MlpWeights& grad) {
  grad.w3 += phi_bar.transpose() * f.h2;
  grad.b3 += phi_bar.colwise().sum().transpose();
  const Eigen::MatrixXd da2 =
      (phi_bar * w.w3).cwiseProduct((1.0 - f.h2.array().square()).matrix());
  grad.w2 += da2.transpose() * f.h1;
  grad.b2 += da2.colwise().sum().transpose();
  const Eigen::MatrixXd da1 =
      (da2 * w.w2).cwiseProduct((1.0 - f.h1.array().square()).matrix());
  grad.w1 += da1.transpose() * z;
  grad.b1 += da1.colwise().sum().transpose();
}

features::MlpWeights zero_like(const features::MlpWeights& w) {
  features::MlpWeights g;
  g.w1 = Eigen::MatrixXd::Zero(w.w1.rows(), w.w1.cols());
  g.w2 = Eigen::MatrixXd::Zero(w.w2.rows(), w.w2.cols());
  g.w3 = Eigen::MatrixXd::Zero(w.w3.rows(), w.w3.cols());
  g.b1 = Eigen::VectorXd::Zero(w.b1.size());
  g.b2 = Eigen::VectorXd::Zero(w.b2.size());
  g.b3 = Eigen::VectorXd::Zero(w.b3.size());
  return g;
}

double mlp_nll_impl(const features::MlpWeights& weights,
                    const Eigen::VectorXd& log_lambdas,
                    const Eigen::VectorXd& log_sigma_w,
                    const std::vector<SplitMatrices>& data, MlpGradient* grad) {
  const auto m_tasks = static_cast<int>(data.size());
  const Eigen::VectorXd lambdas = log_lambdas.array().exp();
  if (grad != nullptr) {
    grad->weights = zero_like(weights);
    grad->log_lambdas = Eigen::VectorXd::Zero(log_lambdas.size());
    grad->log_sigma_w = Eigen::VectorXd::Zero(log_sigma_w.size());
  }
  double total = 0.0;
  const double scale = 1.0 / m_tasks;
  for (int m = 0; m < m_tasks; ++m) {
    const auto& d = data[static_cast<std::size_t>(m)];
    const double sigma = std::exp(log_sigma_w[m]);
    const MlpForward ft = mlp_forward(weights, d.z_train);
    const MlpForward fv = mlp_forward(weights, d.z_val);
    const TaskCore core =
        task_nll_core(ft.phi, d.y_train, fv.phi, d.y_val, lambdas,
                      sigma * sigma, scale, grad != nullptr);
    total += core.value;
    if (grad != nullptr) {
      grad->log_lambdas += core.d_log_lambdas;
      grad->log_sigma_w[m] = core.d_log_sigma;
      mlp_backward(weights, d.z_train, ft, core.phi_bar_train, grad->weights);
      mlp_backward(weights, d.z_val, fv, core.phi_bar_val, grad->weights);
    }
  }
  return total;
}

}  // namespace

double mlp_nll_objective(const features::MlpWeights& weights,
                         const Eigen::VectorXd& log_lambdas,
                         const Eigen::VectorXd& log_sigma_w,
                         const std::vector<SplitDataset>& splits) {
  return mlp_nll_value_and_gradient(weights, log_lambdas, log_sigma_w, splits,
                                    nullptr);
}

double mlp_nll_value_and_gradient(const features::MlpWeights& weights,
                                  const Eigen::VectorXd& log_lambdas,
                                  const Eigen::VectorXd& log_sigma_w,
                                  const std::vector<SplitDataset>& splits,
                                  MlpGradient* grad) {
  if (static_cast<Eigen::Index>(splits.size()) != log_sigma_w.size()) {
    throw std::invalid_argument("one log_sigma_w entry per task is required");
  }
  if (log_lambdas.size() != weights.feature_dim()) {
    throw std::invalid_argument("log_lambdas must match the mlp feature dim");
  }
  const auto data = to_matrices(splits, weights.input_dim());
  return mlp_nll_impl(weights, log_lambdas, log_sigma_w, data, grad);
}

MlpFit train_mlp_hyperparams(const std::vector<TaskDataset>& datasets,
                             const MlpArch& arch, const OptimizerConfig& config) {
  if (datasets.empty()) throw std::invalid_argument("no datasets to train on");
  if (arch.hidden < 1 || arch.features < 1) {
    throw std::invalid_argument("mlp architecture dims must be positive");
  }
  const int input_dim = static_cast<int>(datasets.front().inputs.front().size());

  std::vector<SplitDataset> splits;
  splits.reserve(datasets.size());
  for (const auto& ds : datasets) splits.push_back(split_dataset(ds));
  const auto data = to_matrices(splits, input_dim);

  const MlpPacking packing{input_dim, arch.hidden, arch.features,
                           static_cast<int>(datasets.size())};
  const double log_sigma_floor = std::log(config.sigma_floor);

  MlpFit fit;
  fit.objective = kInf;
  std::ostringstream trace;

  for (int r = 0; r < config.restarts; ++r) {
    Rng rng(derive_seed(config.seed ^ 0x6d6c70ULL, static_cast<std::uint64_t>(r)));
    features::MlpWeights w;
    const auto draw = [&rng](int rows, int cols) {
      Eigen::MatrixXd mat(rows, cols);
      const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) mat(i, j) = rng.normal() * scale;
      return mat;
    };
    w.w1 = draw(arch.hidden, input_dim);
    w.w2 = draw(arch.hidden, arch.hidden);
    w.w3 = draw(arch.features, arch.hidden);
    w.b1 = Eigen::VectorXd::Zero(arch.hidden);
    w.b2 = Eigen::VectorXd::Zero(arch.hidden);
    w.b3 = Eigen::VectorXd::Zero(arch.features);
    Eigen::VectorXd log_lambdas = Eigen::VectorXd::Zero(arch.features);
    Eigen::VectorXd log_sigma(packing.m);
    for (int m = 0; m < packing.m; ++m) {
      log_sigma[m] = std::log(
          std::max(target_std(datasets[static_cast<std::size_t>(m)]), 1e-3));
    }

    Eigen::VectorXd x = packing.pack(w, log_lambdas, log_sigma);
    double best_value = kInf;
    Eigen::VectorXd best_x = x;
    std::vector<double> restart_trace;
    Adam adam;
    bool aborted = false;

    for (int it = 0; it <= config.iterations; ++it) {
      features::MlpWeights cur;
      Eigen::VectorXd cur_lambdas, cur_sigma;
      packing.unpack(x, cur, cur_lambdas, cur_sigma);
      double value = kInf;
      MlpGradient grad;
      try {
        value = mlp_nll_impl(cur, cur_lambdas, cur_sigma, data,
                             it < config.iterations ? &grad : nullptr);
      } catch (const NumericError&) {
        aborted = true;
      }
      if (!std::isfinite(value)) aborted = true;
      if (it == 0) fit.restart_initial.push_back(aborted ? kInf : value);
      if (aborted) break;
      restart_trace.push_back(value);
      if (value < best_value) {
        best_value = value;
        best_x = x;
      }
      if (it == config.iterations) break;
      Eigen::VectorXd g = packing.pack(grad.weights, grad.log_lambdas,
                                       grad.log_sigma_w);
      if (!g.allFinite()) break;
      adam.step(x, g, config);
      auto lambdas_seg = x.segment(packing.weight_count(), packing.l);
      lambdas_seg = lambdas_seg.cwiseMax(kLogLambdaMin).cwiseMin(kLogLambdaMax);
      auto sigma_seg = x.tail(packing.m);
      sigma_seg = sigma_seg.cwiseMax(log_sigma_floor).cwiseMin(kLogSigmaMax);
    }

    fit.restart_final.push_back(best_value);
    trace << "restart " << r << ": init="
          << fit.restart_initial[static_cast<std::size_t>(r)]
          << " best=" << best_value << (aborted ? " (diverged)" : "") << "\n";
    if (best_value < fit.objective) {
      fit.objective = best_value;
      packing.unpack(best_x, fit.weights, fit.log_lambdas, fit.log_sigma_w);
      fit.loss_trace = restart_trace;
    }
  }

  if (!std::isfinite(fit.objective)) {
    throw OptimizationFailure("all mlp restarts diverged:\n" + trace.str());
  }
  return fit;
}

TaskDataset collect_dataset(const plant::PlantSpec& plant,
                            const plant::DisturbanceTask& task,
                            const plant::PolicyFn& policy,
                            const plant::ReferenceSchedule& schedule,
                            double noise_std, std::uint64_t seed,
                            const CollectOptions& options) {
  if (noise_std < 0.0) throw std::invalid_argument("noise_std must be >= 0");
  const bool has_change = schedule.period > 0.0 && schedule.low != schedule.high &&
                          options.duration > schedule.period;
  if (!has_change) {
    throw std::invalid_argument(
        "collection schedule must contain at least one set-point change");
  }

  plant::RolloutOptions ropt;
  ropt.dt = options.dt;
  ropt.duration = options.duration;
  ropt.x0 = options.x0;
  const plant::Trajectory traj = plant::rollout(plant, task, policy, ropt);

  const int row = plant.error_indices.front();
  int usable = static_cast<int>(traj.inputs.size());
  if (traj.saturated) usable = std::min(usable, traj.first_saturation_step);

  Rng rng(seed);
  TaskDataset dataset;
  dataset.task_id = task.task_id;
  dataset.channel = row;
  dataset.diverged = traj.saturated;
  dataset.inputs.reserve(static_cast<std::size_t>(usable));
  dataset.targets.reserve(static_cast<std::size_t>(usable));
  for (int i = 0; i < usable; ++i) {
    const auto& x = traj.states[static_cast<std::size_t>(i)];
    const auto& u = traj.inputs[static_cast<std::size_t>(i)];
    dataset.inputs.push_back(plant.input_location(x, u));
    const double truth = plant::true_flow(plant, task, x, u)[row];
    const double nominal = plant::nominal_flow(plant, x, u)[row];
    dataset.targets.push_back(truth - nominal + noise_std * rng.normal());
  }
  return dataset;
}

}  // namespace mtmpc::metatrain
