#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "hgn/models.hpp"
#include "hgn/sim.hpp"

namespace hgn::train {

using ad::Matrix;

struct TrainConfig {
  double lr_initial = 3e-4;
  double lr_decay = 0.1;
  long long lr_decay_every = 200000;
  int batch_size = 10;
  long long total_steps = 0;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  long long log_every = 100;

  // lr_initial * lr_decay^floor(t / lr_decay_every)
  double lr_at(long long t) const;
  void validate() const;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

struct AdamResult {
  bool applied = false;  // false when a gradient was not finite
  double lr = 0.0;
};

// Bias-corrected Adam update for step t >= 1 with the scheduled learning rate.
AdamResult adam_step(gn::ParamStore& params, const std::vector<Matrix>& grads, AdamState& state,
                     const TrainConfig& cfg, long long t);

// Feature scales estimated from training trajectories.
models::Normalization compute_normalization(const std::vector<sim::Trajectory>& data);

struct LossPoint {
  long long step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<LossPoint> curve;  // one point per log_every steps
  long long skipped_steps = 0;   // updates dropped for non-finite gradients
};

// Throws invalid_input when the data do not fit the model (force law, charges,
// particle counts for hierarchical batches, too-short trajectories).
void check_dataset(const models::Model& model, const std::vector<sim::Trajectory>& data);

// One-step training on random (trajectory, step) pairs. Sets the model's
// normalisation from the data before the first update.
TrainResult train(models::Model& model, const std::vector<sim::Trajectory>& data,
                  const TrainConfig& cfg,
                  const std::function<void(const LossPoint&)>& on_log = {});

// ---- rollout -------------------------------------------------------------

// Anything that advances a particle system by one base step.
class Stepper {
 public:
  virtual ~Stepper() = default;
  virtual sim::ParticleSystem step(const sim::ParticleSystem& sys, double dt) = 0;
  // Number of interaction graphs built so far (0 for graph-free steppers).
  virtual long long graph_builds() const { return 0; }
};

class ModelStepper : public Stepper {
 public:
  explicit ModelStepper(const models::Model& model) : model_(model) {}
  sim::ParticleSystem step(const sim::ParticleSystem& sys, double dt) override;
  long long graph_builds() const override { return model_.graph_builds(); }

 private:
  const models::Model& model_;
};

// The reference simulator used as a model.
class SimulatorStepper : public Stepper {
 public:
  explicit SimulatorStepper(sim::SimConfig cfg) : cfg_(std::move(cfg)) {}
  sim::ParticleSystem step(const sim::ParticleSystem& sys, double dt) override;

 private:
  sim::SimConfig cfg_;
};

// Returns its input unchanged.
class IdentityStepper : public Stepper {
 public:
  sim::ParticleSystem step(const sim::ParticleSystem& sys, double) override { return sys; }
};

struct RolloutResult {
  sim::Trajectory trajectory;  // status overflow and failed_step set on divergence
  long long graph_builds = 0;  // graphs built during this rollout
  bool diverged() const { return trajectory.status == sim::TrajectoryStatus::overflow; }
};

// Autoregressive rollout of `steps` base steps, wrapping positions each step.
RolloutResult rollout(Stepper& stepper, const sim::ParticleSystem& init, int steps, double dt,
                      const sim::SimConfig& cfg);

// ---- metrics -------------------------------------------------------------

// Sum of squared phase-space residuals (min-image positions, velocities) of
// two states and the number of coordinates summed.
double squared_residual(const sim::ParticleSystem& pred, const sim::ParticleSystem& truth);

// Mean squared residual over particles and (x, y, vx, vy).
double one_step_loss(const sim::ParticleSystem& pred, const sim::ParticleSystem& truth);

// Root of the mean squared residual over steps 1..tau, particles and
// coordinates. Infinite when pred stops before tau.
double rollout_rmse(const sim::Trajectory& pred, const sim::Trajectory& truth, int tau);

// (H_0 - H_tau) / H_0 for one predicted trajectory. NaN when pred stops
// before tau.
double energy_error(const sim::Trajectory& pred, const sim::SimConfig& cfg, int tau);

struct EnergyErrorSummary {
  double mean = 0.0;           // signed mean
  double mean_absolute = 0.0;  // mean of |per-trajectory error|
};

EnergyErrorSummary energy_error(const std::vector<sim::Trajectory>& preds,
                                const sim::SimConfig& cfg, int tau);

// Fraction of target variance left unexplained by one-step predictions,
// measured in normalised units: sum of squared residuals divided by the sum of
// squared deviations of the targets from their per-coordinate mean. Targets
// are (dq, dv) with dq under min-image; dq and dv are scaled by the delta
// scales of the model so both halves count equally.
struct OneStepStats {
  double mse = 0.0;            // normalised one-step MSE
  double target_variance = 0.0;
  double ratio() const { return target_variance > 0 ? mse / target_variance : 0.0; }
};

OneStepStats one_step_stats(const models::Model& model, const std::vector<sim::Trajectory>& data,
                            int max_samples, std::uint64_t seed);

// ---- evaluation reports --------------------------------------------------

struct TrajectoryMetrics {
  int index = 0;
  std::vector<double> rmse;          // one per tau
  std::vector<double> energy_error;  // one per tau
  int diverged_at = -1;
};

struct EvalReport {
  std::string model;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<int> taus;
  std::vector<TrajectoryMetrics> rows;
  std::vector<double> rmse;                    // pooled over trajectories, per tau
  std::vector<EnergyErrorSummary> energy;      // per tau
  double seconds = 0.0;
  long long graph_builds = 0;
};

// Rolls out every test trajectory from its first snapshot for max(taus) steps.
EvalReport evaluate(Stepper& stepper, const std::vector<sim::Trajectory>& test,
                    const std::vector<int>& taus);

// ---- scaling and generalisation ------------------------------------------

struct BenchRow {
  int n = 0;
  long long nodes = 0;
  long long edges = 0;
  double build_seconds = 0.0;    // median graph build time
  double forward_seconds = 0.0;  // median forward-pass time (graph build excluded)
  std::string status = "ok";     // "ok" or "oom"
};

struct BenchConfig {
  models::ModelSpec spec;
  std::vector<int> n_list{256, 512, 1024, 2048, 4096};
  int repeats = 3;
  std::uint64_t seed = 0;
};

std::vector<BenchRow> scaling_bench(const BenchConfig& cfg);

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

struct GeneralisationRow {
  int n = 0;
  EvalReport report;
};

// Simulates `trajectories` fresh test trajectories of tau_max base steps for
// every N and evaluates the model on them.
std::vector<GeneralisationRow> generalisation_eval(const models::Model& model,
                                                   const std::vector<int>& n_list,
                                                   int trajectories, const std::vector<int>& taus,
                                                   sim::ForceLaw law, std::uint64_t seed);

// Generates `count` trajectories of `steps` base steps with per-trajectory
// seeds mix_seed(seed, i).
std::vector<sim::Trajectory> generate_dataset(int n, int count, int steps, sim::ForceLaw law,
                                              std::uint64_t seed);

}  // namespace hgn::train
