#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace hgn::sim {

using Vec2 = Eigen::Vector2d;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 2>;

enum class ForceLaw { gravity, coulomb };

std::string_view to_string(ForceLaw law);
ForceLaw parse_force_law(std::string_view name);

struct SimConfig {
  ForceLaw force_law = ForceLaw::gravity;
  double G = 2.0;
  double k = 2.0;
  double epsilon = 0.2;   // Plummer softening length
  double eta = 0.001;     // timestep safety factor
  double dt_base = 0.01;  // base timestep
  double cell_size = 0.0; // side of the periodic square
  int n_base_steps = 200;
  int max_timestep_level = 8;

  // Defaults with the box sized for one particle per twelve square units.
  static SimConfig defaults(int n_particles, ForceLaw law = ForceLaw::gravity);
  static double default_cell_size(int n_particles);

  void validate() const;
};

// State of N particles in a periodic square box [0, L)^2.
struct ParticleSystem {
  Eigen::VectorXd masses;
  Points positions;
  Points velocities;
  Eigen::VectorXd charges;  // empty unless the force law is Coulomb
  double cell_size = 0.0;

  int size() const { return static_cast<int>(masses.size()); }
  bool has_charges() const { return charges.size() > 0; }

  // Throws invalid_input if the system violates its invariants or does not
  // match the force law of cfg.
  void validate(const SimConfig& cfg) const;
  void validate() const;
  bool all_finite() const;
};

enum class TrajectoryStatus { complete, overflow };

struct Trajectory {
  SimConfig config;
  std::uint64_t seed = 0;
  std::vector<ParticleSystem> snapshots;
  TrajectoryStatus status = TrajectoryStatus::complete;
  int failed_step = -1;  // first base step that produced a non-finite state

  int n_particles() const { return snapshots.empty() ? 0 : snapshots.front().size(); }
  int n_steps() const { return static_cast<int>(snapshots.size()) - 1; }
};

// Coordinate wrapped into [0, L). A value of exactly L maps to 0.
double wrap_coord(double x, double L);

// Displacement component wrapped into [-L/2, L/2); L/2 maps to -L/2.
double min_image(double d, double L);

// Closest-copy displacement qi - qj on the torus of side L.
Vec2 min_image_disp(const Vec2& qi, const Vec2& qj, double L);

void wrap_positions(Points& positions, double L);

// Exact O(N^2) softened accelerations.
Points compute_accelerations(const ParticleSystem& sys, const SimConfig& cfg);

// Accelerations of the listed particles only (all N-1 partners each).
void compute_accelerations_for(const ParticleSystem& sys, const SimConfig& cfg,
                               const std::vector<int>& targets, Points& out);

// One time-synchronised kick-drift-kick step with a fixed dt for all particles.
ParticleSystem leapfrog_step(const ParticleSystem& sys, double dt, const SimConfig& cfg);

// Timestep level n for an acceleration: smallest n >= 0 with
// dt_base / 2^n < eta * sqrt(epsilon / |a|), clamped to max_timestep_level.
int assign_timestep_level(const Vec2& a, const SimConfig& cfg);

struct BaseStepStats {
  int finest_level = 0;
  long long pair_evaluations = 0;  // pair interactions evaluated during the step
};

// Advances every particle by one base step using individual power-of-two
// timestep levels, assigned from the accelerations at the start of the step
// and fixed for its duration. Fast particles substep 2^n times between the
// kicks of the slow ones; each pair interaction is kicked symmetrically at the
// coarser level of the two partners.
// Throws overflow if the result is not finite.
ParticleSystem advance_base_step(const ParticleSystem& sys, const SimConfig& cfg,
                                 BaseStepStats* stats = nullptr);

Trajectory simulate_trajectory(const ParticleSystem& init, const SimConfig& cfg,
                               std::uint64_t seed);

double kinetic_energy(const ParticleSystem& sys);
double potential_energy(const ParticleSystem& sys, const SimConfig& cfg);
double hamiltonian(const ParticleSystem& sys, const SimConfig& cfg);

Vec2 total_momentum(const ParticleSystem& sys);
double momentum_scale(const ParticleSystem& sys);  // sum m_i |v_i|

// Random initial state: unit masses, uniform positions in the box, velocity
// components uniform on (-1, 1), and for Coulomb charges with magnitude uniform
// on (0.5, 1.5) and a random sign.
ParticleSystem init_system(int n, const SimConfig& cfg, std::uint64_t seed);

}  // namespace hgn::sim
