#include <doctest.h>

#include "helpers.hpp"
#include "hgn/error.hpp"
#include "hgn/io.hpp"
#include "hgn/rng.hpp"
#include "hgn/sim.hpp"

using namespace hgn;
using namespace hgn::sim;
using testing::make_system;
using testing::rel_err;

TEST_SUITE("sim") {

TEST_CASE("min_image_disp wraps across the boundary") {
  CHECK(min_image_disp({9.5, 5}, {0.5, 5}, 10).isApprox(Vec2(-1, 0)));
  CHECK(min_image_disp({3, 4}, {3, 4}, 10) == Vec2(0, 0));
  CHECK(min_image_disp({3, 4}, {1, 1}, 10) == Vec2(2, 3));
  // Ties at exactly L/2 map to -L/2, so the result is not antisymmetric there.
  CHECK(min_image(5.0, 10.0) == -5.0);
  CHECK(min_image(-5.0, 10.0) == -5.0);
  CHECK_THROWS_AS(min_image_disp({NAN, 0}, {0, 0}, 10), Error);
}

TEST_CASE("min_image is antisymmetric away from the tie") {
  Rng rng(3);
  for (int k = 0; k < 1000; ++k) {
    const double d = rng.uniform(-30, 30);
    if (std::abs(std::abs(min_image(d, 10.0)) - 5.0) < 1e-9) continue;
    CHECK(min_image(-d, 10.0) == doctest::Approx(-min_image(d, 10.0)).epsilon(1e-12));
    CHECK(min_image(d, 10.0) >= -5.0);
    CHECK(min_image(d, 10.0) < 5.0);
  }
}

TEST_CASE("two-body softened gravity") {
  const SimConfig cfg = SimConfig::defaults(2);
  const ParticleSystem s = make_system(10, {{{2, 5}}, {{3, 5}}});
  const Points a = compute_accelerations(s, cfg);
  // Scalar evaluation of G m d / (d^2 + eps^2)^{3/2} with d = 1.
  const double expected = 2.0 * 1.0 / std::pow(1.0 + 0.04, 1.5);
  CHECK(a(0, 0) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(a(1, 0) == doctest::Approx(-expected).epsilon(1e-14));
  CHECK(a(0, 1) == 0.0);
  CHECK(expected == doctest::Approx(1.8857).epsilon(1e-4));

  // Across the seam the closest copy is used.
  const ParticleSystem w = make_system(10, {{{0.2, 5}}, {{9.2, 5}}});
  CHECK(compute_accelerations(w, cfg)(0, 0) == doctest::Approx(-expected).epsilon(1e-12));
}

TEST_CASE("trivial force cases") {
  const SimConfig cfg = SimConfig::defaults(2);
  CHECK(compute_accelerations(make_system(10, {{{1, 1}}}), cfg).norm() == 0.0);
  CHECK(compute_accelerations(make_system(10, {{{1, 1}}, {{1, 1}}}), cfg).norm() == 0.0);
  ParticleSystem empty;
  empty.cell_size = 10;
  CHECK(compute_accelerations(empty, cfg).rows() == 0);
  ParticleSystem bad = make_system(10, {{{1, 1}}, {{2, 2}}});
  bad.velocities(0, 0) = INFINITY;
  CHECK_THROWS_AS(compute_accelerations(bad, cfg), Error);
}

TEST_CASE("coulomb acceleration sign and mass scaling") {
  const SimConfig cfg = SimConfig::defaults(2, ForceLaw::coulomb);
  ParticleSystem s = make_system(10, {{{2, 5}}, {{3, 5}}});
  s.charges = Eigen::Vector2d(1.0, 1.0);
  s.masses = Eigen::Vector2d(1.0, 2.0);
  const Points a = compute_accelerations(s, cfg);
  const double f = 2.0 / std::pow(1.04, 1.5);
  CHECK(a(0, 0) == doctest::Approx(-f));       // like charges repel
  CHECK(a(1, 0) == doctest::Approx(f / 2.0));  // divided by the mass
  s.charges[1] = -1.0;
  CHECK(compute_accelerations(s, cfg)(0, 0) == doctest::Approx(f));
}

TEST_CASE("hamiltonian of two bodies at rest") {
  const SimConfig cfg = SimConfig::defaults(2);
  CHECK(hamiltonian(make_system(10, {{{2, 5}}, {{3, 5}}}), cfg) ==
        doctest::Approx(-2.0 / std::sqrt(1.04)).epsilon(1e-14));
  CHECK(hamiltonian(make_system(10, {{{2, 5}}}), cfg) == 0.0);
}

TEST_CASE("force is minus the potential gradient") {
  for (ForceLaw law : {ForceLaw::gravity, ForceLaw::coulomb}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const SimConfig cfg = SimConfig::defaults(6, law);
      ParticleSystem s = init_system(6, cfg, seed);
      Rng rng(seed + 100);
      for (int i = 0; i < s.size(); ++i) s.masses[i] = rng.uniform(0.5, 2.0);
      const Points a = compute_accelerations(s, cfg);
      const double h = 1e-6;
      for (int i = 0; i < s.size(); ++i) {
        for (int j = 0; j < 2; ++j) {
          ParticleSystem p = s, m = s;
          p.positions(i, j) += h;
          m.positions(i, j) -= h;
          const double grad = (potential_energy(p, cfg) - potential_energy(m, cfg)) / (2 * h);
          CHECK(rel_err(-grad, s.masses[i] * a(i, j), 1e-6) < 1e-6);
        }
      }
    }
  }
}

TEST_CASE("leapfrog step basics") {
  const SimConfig cfg = SimConfig::defaults(1);
  const ParticleSystem s = make_system(10, {{{9.99, 5}}}, {{{1.0, -0.5}}});
  const ParticleSystem n = leapfrog_step(s, 0.02, cfg);
  CHECK(n.positions(0, 0) == doctest::Approx(0.01));
  CHECK(n.positions(0, 1) == doctest::Approx(4.99));
  CHECK(n.velocities == s.velocities);
  const ParticleSystem z = leapfrog_step(make_system(10, {{{2, 5}}, {{3, 5}}}), 1e-300, cfg);
  CHECK(z.positions == make_system(10, {{{2, 5}}, {{3, 5}}}).positions);
  CHECK_THROWS_AS(leapfrog_step(s, 0.0, cfg), Error);
}

TEST_CASE("leapfrog matches a fine-step reference on a bound pair") {
  const SimConfig cfg = SimConfig::defaults(2);
  const double v = std::sqrt(0.5 * 2.0 / std::pow(1.04, 1.5));  // circular orbit about the COM
  const ParticleSystem init = make_system(10, {{{4.5, 5}}, {{5.5, 5}}}, {{{0, -v}}, {{0, v}}});
  ParticleSystem coarse = init, fine = init;
  for (int s = 0; s < 200; ++s) coarse = leapfrog_step(coarse, 0.01, cfg);
  for (int s = 0; s < 20000; ++s) fine = leapfrog_step(fine, 0.0001, cfg);
  double err = 0.0;
  for (int i = 0; i < 2; ++i) err = std::max(err, min_image_disp(coarse.positions.row(i), fine.positions.row(i), 10).norm());
  CHECK(err < 1e-3);
}

TEST_CASE("leapfrog step is time reversible") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SimConfig cfg = SimConfig::defaults(8);
    const ParticleSystem s = init_system(8, cfg, seed);
    ParticleSystem f = leapfrog_step(s, 0.01, cfg);
    f.velocities = -f.velocities;
    ParticleSystem b = leapfrog_step(f, 0.01, cfg);
    b.velocities = -b.velocities;
    for (int i = 0; i < s.size(); ++i) {
      CHECK(min_image_disp(b.positions.row(i), s.positions.row(i), s.cell_size).norm() < 1e-10);
    }
    CHECK((b.velocities - s.velocities).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("timestep levels") {
  SimConfig cfg = SimConfig::defaults(10);
  CHECK(assign_timestep_level({0, 0}, cfg) == 0);
  // eta * sqrt(eps / |a|) = 0.001; 0.01 / 2^4 = 0.000625 is the first level below it.
  CHECK(assign_timestep_level({0.2, 0}, cfg) == 4);
  CHECK(assign_timestep_level({0, -0.2}, cfg) == 4);
  cfg.max_timestep_level = 10;
  CHECK(assign_timestep_level({1e12, 0}, cfg) == 10);
  // Tiny accelerations allow the base step.
  CHECK(assign_timestep_level({1e-9, 0}, cfg) == 0);
  CHECK_THROWS_AS(assign_timestep_level({NAN, 0}, cfg), Error);
}

TEST_CASE("single particle moves uniformly on the torus") {
  SimConfig cfg = SimConfig::defaults(1);
  cfg.n_base_steps = 50;
  const ParticleSystem s = make_system(cfg.cell_size, {{{1, 1}}}, {{{0.7, -0.3}}});
  const Trajectory t = simulate_trajectory(s, cfg, 0);
  REQUIRE(t.n_steps() == 50);
  CHECK(hamiltonian(t.snapshots.back(), cfg) == hamiltonian(s, cfg));
  CHECK(t.snapshots.back().positions(0, 0) == doctest::Approx(wrap_coord(1 + 0.5 * 0.7, cfg.cell_size)));
  CHECK(t.snapshots.back().positions(0, 1) == doctest::Approx(wrap_coord(1 - 0.5 * 0.3, cfg.cell_size)));
}

TEST_CASE("trajectories are deterministic and conservative") {
  const SimConfig cfg = SimConfig::defaults(20);
  const ParticleSystem init = init_system(20, cfg, 42);
  const Trajectory a = simulate_trajectory(init, cfg, 42);
  const Trajectory b = simulate_trajectory(init_system(20, cfg, 42), cfg, 42);
  CHECK(io::encode_trajectory(a) == io::encode_trajectory(b));
  REQUIRE(a.status == TrajectoryStatus::complete);
  REQUIRE(a.n_steps() == 200);
  for (const ParticleSystem& s : a.snapshots) {
    CHECK(s.positions.minCoeff() >= 0.0);
    CHECK(s.positions.maxCoeff() < cfg.cell_size);
  }
  const double h0 = hamiltonian(a.snapshots.front(), cfg);
  CHECK(std::abs(h0 - hamiltonian(a.snapshots.back(), cfg)) / std::abs(h0) < 1e-3);
  const Vec2 drift = total_momentum(a.snapshots.back()) - total_momentum(a.snapshots.front());
  CHECK(drift.norm() < 1e-9 * momentum_scale(a.snapshots.front()));
}

TEST_CASE("block steps refine fast particles") {
  const SimConfig cfg = SimConfig::defaults(2);
  BaseStepStats stats;
  const ParticleSystem s = make_system(cfg.cell_size, {{{1, 1}}, {{1.3, 1}}});
  advance_base_step(s, cfg, &stats);
  CHECK(stats.finest_level ==
        assign_timestep_level(compute_accelerations(s, cfg).row(0).transpose(), cfg));
  CHECK(stats.pair_evaluations == 2LL << stats.finest_level);
}

TEST_CASE("init_system draws from the stated distributions") {
  const SimConfig cfg = SimConfig::defaults(100);
  const ParticleSystem s = init_system(100, cfg, 5);
  CHECK(s.cell_size == doctest::Approx(std::sqrt(1200.0)));
  CHECK((s.masses.array() == 1.0).all());
  CHECK(s.positions.minCoeff() >= 0.0);
  CHECK(s.positions.maxCoeff() < std::sqrt(1200.0));
  CHECK(s.velocities.minCoeff() > -1.0);
  CHECK(s.velocities.maxCoeff() < 1.0);
  CHECK_FALSE(s.has_charges());

  const ParticleSystem c = init_system(200, SimConfig::defaults(200, ForceLaw::coulomb), 5);
  REQUIRE(c.has_charges());
  CHECK(c.charges.cwiseAbs().minCoeff() > 0.5);
  CHECK(c.charges.cwiseAbs().maxCoeff() < 1.5);
  CHECK(c.charges.minCoeff() < 0.0);
  CHECK(c.charges.maxCoeff() > 0.0);
  CHECK_THROWS_AS(init_system(0, cfg, 1), Error);
}

TEST_CASE("mirrored pair has zero momentum") {
  const ParticleSystem s = make_system(10, {{{1, 1}}, {{2, 2}}}, {{{0.3, -0.4}}, {{-0.3, 0.4}}});
  CHECK(total_momentum(s).norm() == 0.0);
}

TEST_CASE("charges must match the force law") {
  ParticleSystem s = make_system(10, {{{1, 1}}, {{2, 2}}});
  CHECK_THROWS_AS(compute_accelerations(s, SimConfig::defaults(2, ForceLaw::coulomb)), Error);
  s.masses[0] = 0.0;
  CHECK_THROWS_AS(s.validate(), Error);
}

}
