#include "hgn/sim.hpp"

#include <cmath>

#include "hgn/error.hpp"
#include "hgn/rng.hpp"

namespace hgn::sim {

std::string_view to_string(ForceLaw law) {
  return law == ForceLaw::gravity ? "gravity" : "coulomb";
}

ForceLaw parse_force_law(std::string_view name) {
  if (name == "gravity") return ForceLaw::gravity;
  if (name == "coulomb") return ForceLaw::coulomb;
  fail(ErrorCode::config, "unknown force law '" + std::string(name) + "'");
}

double SimConfig::default_cell_size(int n_particles) {
  return std::sqrt(12.0 * n_particles);
}

SimConfig SimConfig::defaults(int n_particles, ForceLaw law) {
  SimConfig cfg;
  cfg.force_law = law;
  cfg.cell_size = default_cell_size(n_particles);
  return cfg;
}

void SimConfig::validate() const {
  auto positive = [](double x) { return std::isfinite(x) && x > 0.0; };
  require(positive(G) && positive(k) && positive(epsilon) && positive(eta) &&
              positive(dt_base) && positive(cell_size),
          ErrorCode::config, "simulation constants must be finite and positive");
  require(n_base_steps >= 0, ErrorCode::config, "n_base_steps must be >= 0");
  require(max_timestep_level >= 0 && max_timestep_level <= 30, ErrorCode::config,
          "max_timestep_level must be in [0, 30]");
}

bool ParticleSystem::all_finite() const {
  return masses.allFinite() && positions.allFinite() && velocities.allFinite() &&
         charges.allFinite();
}

void ParticleSystem::validate() const {
  const Eigen::Index n = masses.size();
  require(positions.rows() == n && velocities.rows() == n, ErrorCode::invalid_input,
          "particle arrays have inconsistent lengths");
  require(charges.size() == 0 || charges.size() == n, ErrorCode::invalid_input,
          "charge array has the wrong length");
  require(std::isfinite(cell_size) && cell_size > 0.0, ErrorCode::invalid_input,
          "cell size must be positive");
  require(all_finite(), ErrorCode::invalid_input, "particle state is not finite");
  require((masses.array() > 0.0).all(), ErrorCode::invalid_input,
          "particle masses must be positive");
  require((positions.array() >= 0.0).all() && (positions.array() < cell_size).all(),
          ErrorCode::invalid_input, "particle position outside [0, L)");
}

void ParticleSystem::validate(const SimConfig& cfg) const {
  validate();
  require(has_charges() == (cfg.force_law == ForceLaw::coulomb), ErrorCode::invalid_input,
          "charges must be present exactly for the Coulomb force law");
}

double wrap_coord(double x, double L) {
  double r = x - L * std::floor(x / L);
  if (r >= L || r < 0.0) r = 0.0;
  return r;
}

double min_image(double d, double L) {
  double r = d - L * std::floor(d / L + 0.5);
  const double half = 0.5 * L;
  if (r >= half) r -= L;
  if (r < -half) r += L;
  return r;
}

Vec2 min_image_disp(const Vec2& qi, const Vec2& qj, double L) {
  require(qi.allFinite() && qj.allFinite() && std::isfinite(L), ErrorCode::invalid_input,
          "min_image_disp: non-finite input");
  return {min_image(qi.x() - qj.x(), L), min_image(qi.y() - qj.y(), L)};
}

void wrap_positions(Points& positions, double L) {
  for (Eigen::Index i = 0; i < positions.rows(); ++i) {
    positions(i, 0) = wrap_coord(positions(i, 0), L);
    positions(i, 1) = wrap_coord(positions(i, 1), L);
  }
}

namespace {

// Pairwise kernel d / (|d|^2 + eps^2)^{3/2} scaled by the coupling of the pair.
struct PairCoupling {
  const ParticleSystem& sys;
  const SimConfig& cfg;

  // Acceleration contribution on particle i due to particle j, given d = q_i - q_j.
  Vec2 on(int i, int j, const Vec2& d) const {
    const double r2 = d.squaredNorm() + cfg.epsilon * cfg.epsilon;
    const double inv_r3 = 1.0 / (r2 * std::sqrt(r2));
    if (cfg.force_law == ForceLaw::gravity) return -cfg.G * sys.masses[j] * inv_r3 * d;
    return cfg.k / sys.masses[i] * sys.charges[i] * sys.charges[j] * inv_r3 * d;
  }
};

void check_consistent(const ParticleSystem& sys, const SimConfig& cfg) {
  require(sys.has_charges() == (cfg.force_law == ForceLaw::coulomb),
          ErrorCode::invalid_input, "charges must be present exactly for the Coulomb force law");
  require(sys.all_finite(), ErrorCode::invalid_input, "particle state is not finite");
}

}  // namespace

Points compute_accelerations(const ParticleSystem& sys, const SimConfig& cfg) {
  check_consistent(sys, cfg);
  const int n = sys.size();
  const double L = sys.cell_size;
  Points acc = Points::Zero(n, 2);
  const PairCoupling coupling{sys, cfg};
  for (int i = 0; i < n; ++i) {
    const Vec2 qi = sys.positions.row(i);
    for (int j = i + 1; j < n; ++j) {
      const Vec2 qj = sys.positions.row(j);
      const Vec2 d{min_image(qi.x() - qj.x(), L), min_image(qi.y() - qj.y(), L)};
      acc.row(i) += coupling.on(i, j, d).transpose();
      acc.row(j) += coupling.on(j, i, -d).transpose();
    }
  }
  return acc;
}

void compute_accelerations_for(const ParticleSystem& sys, const SimConfig& cfg,
                               const std::vector<int>& targets, Points& out) {
  const int n = sys.size();
  const double L = sys.cell_size;
  const PairCoupling coupling{sys, cfg};
  for (int i : targets) {
    const Vec2 qi = sys.positions.row(i);
    Vec2 a = Vec2::Zero();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const Vec2 qj = sys.positions.row(j);
      a += coupling.on(i, j, {min_image(qi.x() - qj.x(), L), min_image(qi.y() - qj.y(), L)});
    }
    out.row(i) = a.transpose();
  }
}

ParticleSystem leapfrog_step(const ParticleSystem& sys, double dt, const SimConfig& cfg) {
  require(std::isfinite(dt) && dt > 0.0, ErrorCode::invalid_input, "leapfrog_step: dt must be > 0");
  const Points a0 = compute_accelerations(sys, cfg);
  ParticleSystem next = sys;
  next.positions = sys.positions + sys.velocities * dt + 0.5 * a0 * (dt * dt);
  wrap_positions(next.positions, sys.cell_size);
  require(next.positions.allFinite(), ErrorCode::overflow, "leapfrog_step: position overflow");
  const Points a1 = compute_accelerations(next, cfg);
  next.velocities = sys.velocities + 0.5 * (a0 + a1) * dt;
  require(next.velocities.allFinite(), ErrorCode::overflow, "leapfrog_step: velocity overflow");
  return next;
}

int assign_timestep_level(const Vec2& a, const SimConfig& cfg) {
  require(a.allFinite(), ErrorCode::invalid_input, "assign_timestep_level: non-finite acceleration");
  const double mag = a.norm();
  if (mag == 0.0) return 0;
  const double dt_i = cfg.eta * std::sqrt(cfg.epsilon / mag);
  int n = 0;
  double dt_n = cfg.dt_base;
  while (!(dt_n < dt_i) && n < cfg.max_timestep_level) {
    ++n;
    dt_n = cfg.dt_base / std::ldexp(1.0, n);
  }
  return n;
}

namespace {

// Hierarchical splitting of the Hamiltonian over power-of-two timestep levels.
// At level l the set S splits into slow particles (level <= l) and fast ones.
// Interactions with at least one slow partner are kicked with step h/2 before
// and after; in between the slow particles drift by h while the fast subset
// is evolved recursively with two steps of h/2. Every pair impulse is applied
// to both partners with the same step, so linear momentum is conserved.
class Splitter {
 public:
  Splitter(ParticleSystem& state, const SimConfig& cfg, const std::vector<int>& level)
      : s_(state), level_(level), coupling_{state, cfg}, dv_(Points::Zero(state.size(), 2)) {}

  void evolve(const std::vector<int>& set, int l, double h) {
    std::vector<int> slow, fast;
    for (int i : set) (level_[i] <= l ? slow : fast).push_back(i);
    kick(slow, fast, 0.5 * h);
    for (int i : slow) {
      s_.positions(i, 0) = wrap_coord(s_.positions(i, 0) + h * s_.velocities(i, 0), s_.cell_size);
      s_.positions(i, 1) = wrap_coord(s_.positions(i, 1) + h * s_.velocities(i, 1), s_.cell_size);
    }
    if (!fast.empty()) {
      evolve(fast, l + 1, 0.5 * h);
      evolve(fast, l + 1, 0.5 * h);
    }
    kick(slow, fast, 0.5 * h);
    for (int i : set) {
      require(std::isfinite(s_.positions(i, 0)) && std::isfinite(s_.positions(i, 1)) &&
                  std::isfinite(s_.velocities(i, 0)) && std::isfinite(s_.velocities(i, 1)),
              ErrorCode::overflow, "non-finite particle state during integration");
    }
  }

  long long pair_evaluations() const { return pairs_; }

 private:
  // Applies dt-impulses of all slow-slow and slow-fast pairs.
  void kick(const std::vector<int>& slow, const std::vector<int>& fast, double dt) {
    if (slow.empty()) return;
    const double L = s_.cell_size;
    auto pair = [&](int i, int j) {
      const Vec2 d{min_image(s_.positions(i, 0) - s_.positions(j, 0), L),
                   min_image(s_.positions(i, 1) - s_.positions(j, 1), L)};
      dv_.row(i) += coupling_.on(i, j, d).transpose();
      dv_.row(j) += coupling_.on(j, i, -d).transpose();
      ++pairs_;
    };
    for (size_t a = 0; a < slow.size(); ++a) {
      for (size_t b = a + 1; b < slow.size(); ++b) pair(slow[a], slow[b]);
      for (int j : fast) pair(slow[a], j);
    }
    for (int i : slow) {
      s_.velocities.row(i) += dt * dv_.row(i);
      dv_.row(i).setZero();
    }
    for (int j : fast) {
      s_.velocities.row(j) += dt * dv_.row(j);
      dv_.row(j).setZero();
    }
  }

  ParticleSystem& s_;
  const std::vector<int>& level_;
  PairCoupling coupling_;
  Points dv_;
  long long pairs_ = 0;
};

}  // namespace

ParticleSystem advance_base_step(const ParticleSystem& sys, const SimConfig& cfg,
                                 BaseStepStats* stats) {
  const int n = sys.size();
  const Points acc = compute_accelerations(sys, cfg);
  std::vector<int> level(n), all(n);
  int finest = 0;
  for (int i = 0; i < n; ++i) {
    level[i] = assign_timestep_level(acc.row(i).transpose(), cfg);
    finest = std::max(finest, level[i]);
    all[i] = i;
  }
  ParticleSystem cur = sys;
  Splitter splitter(cur, cfg, level);
  splitter.evolve(all, 0, cfg.dt_base);
  if (stats) {
    stats->finest_level = finest;
    stats->pair_evaluations = splitter.pair_evaluations();
  }
  return cur;
}

Trajectory simulate_trajectory(const ParticleSystem& init, const SimConfig& cfg,
                               std::uint64_t seed) {
  cfg.validate();
  init.validate(cfg);
  Trajectory traj;
  traj.config = cfg;
  traj.seed = seed;
  traj.snapshots.reserve(cfg.n_base_steps + 1);
  traj.snapshots.push_back(init);
  for (int step = 1; step <= cfg.n_base_steps; ++step) {
    try {
      traj.snapshots.push_back(advance_base_step(traj.snapshots.back(), cfg));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::overflow) throw;
      traj.status = TrajectoryStatus::overflow;
      traj.failed_step = step;
      break;
    }
  }
  return traj;
}

double kinetic_energy(const ParticleSystem& sys) {
  return 0.5 * (sys.masses.array() * sys.velocities.rowwise().squaredNorm().array()).sum();
}

double potential_energy(const ParticleSystem& sys, const SimConfig& cfg) {
  check_consistent(sys, cfg);
  const int n = sys.size();
  const double L = sys.cell_size;
  const double eps2 = cfg.epsilon * cfg.epsilon;
  double pe = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double dx = min_image(sys.positions(i, 0) - sys.positions(j, 0), L);
      const double dy = min_image(sys.positions(i, 1) - sys.positions(j, 1), L);
      const double inv_r = 1.0 / std::sqrt(dx * dx + dy * dy + eps2);
      if (cfg.force_law == ForceLaw::gravity) {
        pe -= cfg.G * sys.masses[i] * sys.masses[j] * inv_r;
      } else {
        pe += cfg.k * sys.charges[i] * sys.charges[j] * inv_r;
      }
    }
  }
  return pe;
}

double hamiltonian(const ParticleSystem& sys, const SimConfig& cfg) {
  return kinetic_energy(sys) + potential_energy(sys, cfg);
}

Vec2 total_momentum(const ParticleSystem& sys) {
  return (sys.velocities.array().colwise() * sys.masses.array()).colwise().sum().transpose();
}

double momentum_scale(const ParticleSystem& sys) {
  return (sys.masses.array() * sys.velocities.rowwise().norm().array()).sum();
}

ParticleSystem init_system(int n, const SimConfig& cfg, std::uint64_t seed) {
  require(n >= 1, ErrorCode::invalid_input, "init_system: need at least one particle");
  cfg.validate();
  Rng rng(seed);
  ParticleSystem sys;
  sys.cell_size = cfg.cell_size;
  sys.masses = Eigen::VectorXd::Ones(n);
  sys.positions.resize(n, 2);
  sys.velocities.resize(n, 2);
  for (int i = 0; i < n; ++i) {
    sys.positions(i, 0) = wrap_coord(rng.uniform(0.0, cfg.cell_size), cfg.cell_size);
    sys.positions(i, 1) = wrap_coord(rng.uniform(0.0, cfg.cell_size), cfg.cell_size);
    sys.velocities(i, 0) = rng.uniform_open(-1.0, 1.0);
    sys.velocities(i, 1) = rng.uniform_open(-1.0, 1.0);
  }
  if (cfg.force_law == ForceLaw::coulomb) {
    sys.charges.resize(n);
    for (int i = 0; i < n; ++i) {
      const double magnitude = rng.uniform_open(0.5, 1.5);
      sys.charges[i] = rng.coin() ? -magnitude : magnitude;
    }
  }
  return sys;
}

}  // namespace hgn::sim
