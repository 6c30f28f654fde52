#include "hgn/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <new>

#include "hgn/error.hpp"
#include "hgn/hierarchy.hpp"
#include "hgn/rng.hpp"

namespace hgn::train {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Usable one-step samples of a trajectory: steps t with snapshots t and t+1.
int sample_count(const sim::Trajectory& t) { return std::max(0, t.n_steps()); }

}  // namespace

double TrainConfig::lr_at(long long t) const {
  return lr_initial * std::pow(lr_decay, static_cast<double>(t / lr_decay_every));
}

void TrainConfig::validate() const {
  require(lr_initial > 0 && lr_decay > 0 && lr_decay_every > 0, ErrorCode::config,
          "train: learning-rate schedule must be positive");
  require(batch_size > 0, ErrorCode::config, "train: batch_size must be positive");
  require(total_steps >= 0, ErrorCode::config, "train: total_steps must be >= 0");
  require(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, ErrorCode::config,
          "train: Adam betas must lie in (0, 1)");
  require(adam_eps > 0, ErrorCode::config, "train: Adam epsilon must be positive");
  require(log_every > 0, ErrorCode::config, "train: log_every must be positive");
}

AdamResult adam_step(gn::ParamStore& params, const std::vector<Matrix>& grads, AdamState& state,
                     const TrainConfig& cfg, long long t) {
  require(t >= 1, ErrorCode::invalid_input, "adam_step: t must be >= 1");
  require(grads.size() == params.size(), ErrorCode::shape_mismatch,
          "adam_step: one gradient per parameter required");
  AdamResult result;
  result.lr = cfg.lr_at(t);
  for (const Matrix& g : grads) {
    if (!g.allFinite()) return result;
  }
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (size_t i = 0; i < params.size(); ++i) {
      state.m.push_back(Matrix::Zero(params.var(i).rows(), params.var(i).cols()));
      state.v.push_back(Matrix::Zero(params.var(i).rows(), params.var(i).cols()));
    }
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = grads[i];
    require(g.rows() == params.var(i).rows() && g.cols() == params.var(i).cols(),
            ErrorCode::shape_mismatch, "adam_step: gradient shape mismatch for " + params.name(i));
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseAbs2();
    Matrix& w = params.var(i).mutable_value();
    w.array() -= result.lr * (state.m[i].array() / c1) /
                 ((state.v[i].array() / c2).sqrt() + cfg.adam_eps);
  }
  result.applied = true;
  return result;
}

models::Normalization compute_normalization(const std::vector<sim::Trajectory>& data) {
  models::Normalization norm;
  double mass = 0, v2 = 0, c2 = 0, dq2 = 0, dv2 = 0, soft = 0, dt = 0;
  long long n_mass = 0, n_v = 0, n_c = 0, n_d = 0;
  for (const sim::Trajectory& t : data) {
    soft += t.config.epsilon;
    dt += t.config.dt_base;
    for (int s = 0; s <= t.n_steps(); ++s) {
      const sim::ParticleSystem& sys = t.snapshots[s];
      mass += sys.masses.sum();
      n_mass += sys.size();
      v2 += sys.velocities.squaredNorm();
      n_v += 2LL * sys.size();
      if (sys.has_charges()) {
        c2 += sys.charges.squaredNorm();
        n_c += sys.size();
      }
      if (s < t.n_steps()) {
        const sim::ParticleSystem& next = t.snapshots[s + 1];
        for (int i = 0; i < sys.size(); ++i) {
          for (int j = 0; j < 2; ++j) {
            const double dq = sim::min_image(next.positions(i, j) - sys.positions(i, j), sys.cell_size);
            const double dv = next.velocities(i, j) - sys.velocities(i, j);
            dq2 += dq * dq;
            dv2 += dv * dv;
          }
        }
        n_d += 2LL * sys.size();
      }
    }
  }
  if (data.empty()) return norm;
  const double n_traj = static_cast<double>(data.size());
  // Relative positions are measured in units of twice the softening length,
  // where the pair force varies fastest. The box size is far too coarse: with
  // it the force term barely trains at desk scale.
  norm.length = 2.0 * soft / n_traj;
  norm.dt = dt / n_traj;
  if (n_mass > 0) norm.mass = mass / static_cast<double>(n_mass);
  if (n_v > 0 && v2 > 0) norm.velocity = std::sqrt(v2 / static_cast<double>(n_v));
  if (n_c > 0 && c2 > 0) norm.charge = std::sqrt(c2 / static_cast<double>(n_c));
  if (n_d > 0 && dq2 > 0) norm.delta_q = std::sqrt(dq2 / static_cast<double>(n_d));
  if (n_d > 0 && dv2 > 0) norm.delta_v = std::sqrt(dv2 / static_cast<double>(n_d));
  norm.energy = norm.mass * norm.velocity * norm.velocity;
  return norm;
}

void check_dataset(const models::Model& model, const std::vector<sim::Trajectory>& data) {
  require(!data.empty(), ErrorCode::invalid_input, "train: empty dataset");
  const bool charges = model.spec().charges;
  int n = -1;
  for (const sim::Trajectory& t : data) {
    require(sample_count(t) > 0, ErrorCode::invalid_input,
            "train: every trajectory needs at least two snapshots");
    const bool coulomb = t.config.force_law == sim::ForceLaw::coulomb;
    require(coulomb == charges, ErrorCode::invalid_input,
            std::string("train: dataset force law is ") + std::string(sim::to_string(t.config.force_law)) +
                " but the model was configured " + (charges ? "with" : "without") + " charges");
    require(t.snapshots.front().has_charges() == charges, ErrorCode::invalid_input,
            "train: dataset charges do not match the model");
    if (model.spec().hierarchical() && model.spec().graph.depth == 0) {
      require(n < 0 || t.n_particles() == n || hier::choose_depth(t.n_particles()) ==
                                                   hier::choose_depth(n),
              ErrorCode::invalid_input,
              "train: hierarchical batches need particle counts with a common depth");
    }
    n = t.n_particles();
  }
}

TrainResult train(models::Model& model, const std::vector<sim::Trajectory>& data,
                  const TrainConfig& cfg, const std::function<void(const LossPoint&)>& on_log) {
  cfg.validate();
  check_dataset(model, data);
  model.set_norm(compute_normalization(data));

  std::vector<long long> offsets{0};
  for (const sim::Trajectory& t : data) offsets.push_back(offsets.back() + sample_count(t));
  const long long total_samples = offsets.back();

  Rng rng(mix_seed(cfg.seed, 0x7472));
  AdamState adam;
  TrainResult result;
  gn::ParamStore& params = model.params();
  std::vector<Matrix> grads(params.size());
  double loss_sum = 0.0;
  long long loss_count = 0;

  for (long long step = 1; step <= cfg.total_steps; ++step) {
    std::vector<const sim::ParticleSystem*> inputs;
    std::vector<const sim::ParticleSystem*> targets;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const long long s = static_cast<long long>(rng.below(static_cast<std::uint64_t>(total_samples)));
      const size_t ti = static_cast<size_t>(
          std::upper_bound(offsets.begin(), offsets.end(), s) - offsets.begin() - 1);
      const int t = static_cast<int>(s - offsets[ti]);
      inputs.push_back(&data[ti].snapshots[t]);
      targets.push_back(&data[ti].snapshots[t + 1]);
    }
    const models::Batch batch = model.make_batch(inputs, data.front().config.dt_base);
    Matrix q_true(batch.n_particles, 2), v_true(batch.n_particles, 2);
    for (size_t b = 0; b < targets.size(); ++b) {
      q_true.middleRows(batch.particle_offset[b], targets[b]->size()) = targets[b]->positions;
      v_true.middleRows(batch.particle_offset[b], targets[b]->size()) = targets[b]->velocities;
    }
    const ad::Var loss = model.loss(batch, model.predict(batch), q_true, v_true);
    const auto g = ad::grad(loss, params.vars());
    for (size_t i = 0; i < g.size(); ++i) {
      grads[i] = g[i].defined() ? g[i].value()
                                : Matrix::Zero(params.var(i).rows(), params.var(i).cols());
    }
    const AdamResult r = adam_step(params, grads, adam, cfg, step);
    if (!r.applied) ++result.skipped_steps;
    if (std::isfinite(loss.scalar())) {
      loss_sum += loss.scalar();
      ++loss_count;
    }
    if (step % cfg.log_every == 0 || step == cfg.total_steps) {
      const LossPoint point{step,
                            loss_count ? loss_sum / static_cast<double>(loss_count)
                                       : std::numeric_limits<double>::quiet_NaN(),
                            r.lr};
      result.curve.push_back(point);
      if (on_log) on_log(point);
      loss_sum = 0.0;
      loss_count = 0;
    }
  }
  return result;
}

sim::ParticleSystem ModelStepper::step(const sim::ParticleSystem& sys, double dt) {
  return model_.step(sys, dt);
}

sim::ParticleSystem SimulatorStepper::step(const sim::ParticleSystem& sys, double dt) {
  sim::SimConfig cfg = cfg_;
  cfg.dt_base = dt;
  return sim::advance_base_step(sys, cfg);
}

RolloutResult rollout(Stepper& stepper, const sim::ParticleSystem& init, int steps, double dt,
                      const sim::SimConfig& cfg) {
  require(steps >= 0, ErrorCode::invalid_input, "rollout: steps must be >= 0");
  require(dt > 0, ErrorCode::invalid_input, "rollout: dt must be positive");
  RolloutResult result;
  result.trajectory.config = cfg;
  result.trajectory.config.dt_base = dt;
  result.trajectory.config.n_base_steps = steps;
  result.trajectory.snapshots.push_back(init);
  const long long builds_before = stepper.graph_builds();
  for (int s = 1; s <= steps; ++s) {
    sim::ParticleSystem next;
    try {
      next = stepper.step(result.trajectory.snapshots.back(), dt);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::overflow) throw;
      result.trajectory.status = sim::TrajectoryStatus::overflow;
      result.trajectory.failed_step = s;
      break;
    }
    if (!next.all_finite()) {
      result.trajectory.status = sim::TrajectoryStatus::overflow;
      result.trajectory.failed_step = s;
      break;
    }
    sim::wrap_positions(next.positions, next.cell_size);
    result.trajectory.snapshots.push_back(std::move(next));
  }
  result.graph_builds = stepper.graph_builds() - builds_before;
  return result;
}

double squared_residual(const sim::ParticleSystem& pred, const sim::ParticleSystem& truth) {
  require(pred.size() == truth.size(), ErrorCode::shape_mismatch,
          "metrics: particle counts differ between prediction and truth");
  double sum = 0.0;
  for (int i = 0; i < pred.size(); ++i) {
    for (int j = 0; j < 2; ++j) {
      const double dq = sim::min_image(pred.positions(i, j) - truth.positions(i, j), truth.cell_size);
      const double dv = pred.velocities(i, j) - truth.velocities(i, j);
      sum += dq * dq + dv * dv;
    }
  }
  return sum;
}

double one_step_loss(const sim::ParticleSystem& pred, const sim::ParticleSystem& truth) {
  if (truth.size() == 0) return 0.0;
  return squared_residual(pred, truth) / (4.0 * truth.size());
}

double rollout_rmse(const sim::Trajectory& pred, const sim::Trajectory& truth, int tau) {
  require(tau >= 1, ErrorCode::invalid_input, "rollout_rmse: tau must be >= 1");
  require(truth.n_steps() >= tau, ErrorCode::invalid_input,
          "rollout_rmse: ground truth shorter than tau");
  if (pred.n_steps() < tau) return std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (int s = 1; s <= tau; ++s) sum += squared_residual(pred.snapshots[s], truth.snapshots[s]);
  return std::sqrt(sum / (4.0 * truth.n_particles() * tau));
}

double energy_error(const sim::Trajectory& pred, const sim::SimConfig& cfg, int tau) {
  require(tau >= 1, ErrorCode::invalid_input, "energy_error: tau must be >= 1");
  if (pred.n_steps() < tau) return std::numeric_limits<double>::quiet_NaN();
  const double h0 = sim::hamiltonian(pred.snapshots[0], cfg);
  const double ht = sim::hamiltonian(pred.snapshots[tau], cfg);
  return (h0 - ht) / h0;
}

EnergyErrorSummary energy_error(const std::vector<sim::Trajectory>& preds,
                                const sim::SimConfig& cfg, int tau) {
  require(!preds.empty(), ErrorCode::invalid_input, "energy_error: no trajectories");
  EnergyErrorSummary s;
  for (const sim::Trajectory& p : preds) {
    const double e = energy_error(p, cfg, tau);
    s.mean += e;
    s.mean_absolute += std::abs(e);
  }
  s.mean /= static_cast<double>(preds.size());
  s.mean_absolute /= static_cast<double>(preds.size());
  return s;
}

OneStepStats one_step_stats(const models::Model& model, const std::vector<sim::Trajectory>& data,
                            int max_samples, std::uint64_t seed) {
  check_dataset(model, data);
  ad::NoGradGuard no_grad;
  const models::Normalization& norm = model.norm();
  std::vector<std::pair<size_t, int>> samples;
  for (size_t ti = 0; ti < data.size(); ++ti) {
    for (int t = 0; t < sample_count(data[ti]); ++t) samples.emplace_back(ti, t);
  }
  if (max_samples > 0 && static_cast<int>(samples.size()) > max_samples) {
    Rng rng(mix_seed(seed, 0x6f6e65));
    for (int i = 0; i < max_samples; ++i) {
      const auto j = i + static_cast<int>(rng.below(samples.size() - i));
      std::swap(samples[i], samples[j]);
    }
    samples.resize(max_samples);
  }

  Eigen::Array4d sum = Eigen::Array4d::Zero(), sum2 = Eigen::Array4d::Zero();
  double residual = 0.0;
  long long count = 0;
  const Eigen::Array4d scale(norm.delta_q, norm.delta_q, norm.delta_v, norm.delta_v);
  for (const auto& [ti, t] : samples) {
    const sim::ParticleSystem& cur = data[ti].snapshots[t];
    const sim::ParticleSystem& next = data[ti].snapshots[t + 1];
    const models::Batch batch = model.make_batch(cur, data[ti].config.dt_base);
    const models::Prediction pred = model.predict(batch);
    for (int i = 0; i < cur.size(); ++i) {
      Eigen::Array4d target, predicted;
      for (int j = 0; j < 2; ++j) {
        target[j] = sim::min_image(next.positions(i, j) - cur.positions(i, j), cur.cell_size);
        target[2 + j] = next.velocities(i, j) - cur.velocities(i, j);
        predicted[j] = pred.q.value()(i, j) - cur.positions(i, j);
        predicted[2 + j] = pred.v.value()(i, j) - cur.velocities(i, j);
      }
      target /= scale;
      predicted /= scale;
      sum += target;
      sum2 += target.square();
      residual += (predicted - target).square().sum();
      ++count;
    }
  }
  OneStepStats stats;
  if (count == 0) return stats;
  const double c = static_cast<double>(count);
  stats.mse = residual / (4.0 * c);
  stats.target_variance = (sum2 / c - (sum / c).square()).sum() / 4.0;
  return stats;
}

EvalReport evaluate(Stepper& stepper, const std::vector<sim::Trajectory>& test,
                    const std::vector<int>& taus) {
  require(!test.empty(), ErrorCode::invalid_input, "evaluate: empty test set");
  require(!taus.empty(), ErrorCode::invalid_input, "evaluate: no tau given");
  const int tau_max = *std::max_element(taus.begin(), taus.end());
  for (int tau : taus) require(tau >= 1, ErrorCode::invalid_input, "evaluate: tau must be >= 1");
  for (const sim::Trajectory& t : test) {
    require(t.n_steps() >= tau_max, ErrorCode::invalid_input,
            "evaluate: test trajectory shorter than tau");
  }
  EvalReport report;
  report.taus = taus;
  const auto start = Clock::now();
  std::vector<double> sq(taus.size(), 0.0);
  std::vector<double> coords(taus.size(), 0.0);
  report.energy.assign(taus.size(), {});
  for (size_t i = 0; i < test.size(); ++i) {
    const sim::Trajectory& truth = test[i];
    const RolloutResult r =
        rollout(stepper, truth.snapshots.front(), tau_max, truth.config.dt_base, truth.config);
    report.graph_builds += r.graph_builds;
    TrajectoryMetrics row;
    row.index = static_cast<int>(i);
    row.diverged_at = r.trajectory.failed_step;
    for (size_t k = 0; k < taus.size(); ++k) {
      const double rmse = rollout_rmse(r.trajectory, truth, taus[k]);
      const double e = energy_error(r.trajectory, truth.config, taus[k]);
      row.rmse.push_back(rmse);
      row.energy_error.push_back(e);
      const double n_coords = 4.0 * truth.n_particles() * taus[k];
      sq[k] += rmse * rmse * n_coords;
      coords[k] += n_coords;
      report.energy[k].mean += e;
      report.energy[k].mean_absolute += std::abs(e);
    }
    report.rows.push_back(std::move(row));
  }
  for (size_t k = 0; k < taus.size(); ++k) {
    report.rmse.push_back(std::sqrt(sq[k] / coords[k]));
    report.energy[k].mean /= static_cast<double>(test.size());
    report.energy[k].mean_absolute /= static_cast<double>(test.size());
  }
  report.seconds = seconds_since(start);
  return report;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorCode::invalid_input,
          "loglog_slope: need at least two matching points");
  double mx = 0, my = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

std::vector<BenchRow> scaling_bench(const BenchConfig& cfg) {
  require(cfg.repeats >= 1, ErrorCode::config, "bench: repeats must be >= 1");
  std::vector<BenchRow> rows;
  const models::Model model(cfg.spec, cfg.seed);
  for (size_t k = 0; k < cfg.n_list.size(); ++k) {
    BenchRow row;
    row.n = cfg.n_list[k];
    try {
      const sim::SimConfig sc = sim::SimConfig::defaults(row.n, cfg.spec.charges
                                                                    ? sim::ForceLaw::coulomb
                                                                    : sim::ForceLaw::gravity);
      const sim::ParticleSystem sys = sim::init_system(row.n, sc, mix_seed(cfg.seed, k));
      std::vector<double> build, forward;
      for (int r = 0; r < cfg.repeats; ++r) {
        auto t0 = Clock::now();
        const models::Batch batch = model.make_batch(sys, sc.dt_base);
        build.push_back(seconds_since(t0));
        row.edges = batch.topo.n_edges();
        row.nodes = batch.n_particles;
        for (const models::CellLevel& level : batch.levels) {
          row.nodes += level.n_cells;
          row.edges += static_cast<long long>(level.near_senders->size()) +
                       static_cast<long long>(level.child_cell->size());
        }
        t0 = Clock::now();
        if (cfg.spec.variant == models::Variant::delta) {
          ad::NoGradGuard no_grad;
          const ad::Var out = model.delta_output(batch);
          (void)out;
        } else {
          Matrix p = batch.v;
          for (int i = 0; i < batch.n_particles; ++i) p.row(i) *= batch.mass[i];
          const auto d = model.hogn_derivs(batch, ad::constant(batch.q), ad::constant(p));
          (void)d;
        }
        forward.push_back(seconds_since(t0));
      }
      row.build_seconds = median(build);
      row.forward_seconds = median(forward);
    } catch (const std::bad_alloc&) {
      row.status = "oom";
    }
    rows.push_back(row);
  }
  return rows;
}

std::vector<sim::Trajectory> generate_dataset(int n, int count, int steps, sim::ForceLaw law,
                                              std::uint64_t seed) {
  require(n >= 1 && count >= 0 && steps >= 0, ErrorCode::invalid_input,
          "generate: need n >= 1, count >= 0 and steps >= 0");
  sim::SimConfig cfg = sim::SimConfig::defaults(n, law);
  cfg.n_base_steps = steps;
  std::vector<sim::Trajectory> out;
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = mix_seed(seed, static_cast<std::uint64_t>(i));
    out.push_back(sim::simulate_trajectory(sim::init_system(n, cfg, s), cfg, s));
  }
  return out;
}

std::vector<GeneralisationRow> generalisation_eval(const models::Model& model,
                                                   const std::vector<int>& n_list,
                                                   int trajectories, const std::vector<int>& taus,
                                                   sim::ForceLaw law, std::uint64_t seed) {
  require(!taus.empty(), ErrorCode::invalid_input, "generalisation: no tau given");
  const int tau_max = *std::max_element(taus.begin(), taus.end());
  std::vector<GeneralisationRow> rows;
  for (size_t k = 0; k < n_list.size(); ++k) {
    const auto test = generate_dataset(n_list[k], trajectories, tau_max, law, mix_seed(seed, k));
    ModelStepper stepper(model);
    rows.push_back({n_list[k], evaluate(stepper, test, taus)});
    rows.back().report.model = model.spec().name();
    rows.back().report.seed = seed;
  }
  return rows;
}

}  // namespace hgn::train
