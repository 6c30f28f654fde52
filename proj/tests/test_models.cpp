#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "hgn/models.hpp"
#include "hgn/rng.hpp"

using namespace hgn;
using namespace hgn::models;
using ad::Matrix;
using testing::rel_err;

namespace {

sim::ParticleSystem random_system(int n, std::uint64_t seed, bool charges = false) {
  const auto law = charges ? sim::ForceLaw::coulomb : sim::ForceLaw::gravity;
  return sim::init_system(n, sim::SimConfig::defaults(n, law), seed);
}

ModelSpec small_spec(Variant variant, GraphKind kind, int depth = 0, bool charges = false) {
  GraphSpec g;
  g.kind = kind;
  g.k = 4;
  g.depth = depth;
  ModelSpec s = ModelSpec::make(variant, g, charges);
  s.widths = Widths::uniform(16);
  return s;
}

Normalization unit_norm() {
  Normalization n;
  n.length = 2.0;
  n.delta_q = 0.01;
  n.delta_v = 0.05;
  return n;
}

void zero_group(Model& m, std::string_view prefix) {
  for (size_t i = 0; i < m.params().size(); ++i) {
    if (m.params().name(i).rfind(prefix, 0) == 0) m.params().var(i).mutable_value().setZero();
  }
}

double hamiltonian_at(const Model& m, const Batch& b, const Matrix& q, const Matrix& p) {
  ad::NoGradGuard guard;
  return ad::sum_all(m.hamiltonian(b, ad::constant(q), ad::constant(p))).scalar();
}

Matrix momenta(const sim::ParticleSystem& s) {
  Matrix p = s.velocities;
  for (int i = 0; i < s.size(); ++i) p.row(i) *= s.masses[i];
  return p;
}

}  // namespace

TEST_SUITE("models") {

TEST_CASE("rk4 on scalar problems") {
  const auto grow = [](double x) { return x; };
  CHECK(rk4_step(1.0, 0.1, grow) == doctest::Approx(1.1051708333333333).epsilon(1e-15));
  CHECK(rk4_step(2.0, 0.5, [](double) { return 1.0; }) == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(rk4_step(3.0, 0.0, grow) == 3.0);
  CHECK_THROWS_AS(rk4_step(1.0, 0.1, [](double) { return NAN; }), Error);
}

TEST_CASE("rk4 error shrinks sixteenfold per halving") {
  const auto f = [](const Eigen::Vector2d& x) { return Eigen::Vector2d(x[1], -x[0]); };
  const double T = 1.0;
  std::vector<double> errs;
  for (int n = 10; n <= 80; n *= 2) {
    Eigen::Vector2d x(1.0, 0.0);
    for (int i = 0; i < n; ++i) x = rk4_step(x, T / n, f);
    errs.push_back((x - Eigen::Vector2d(std::cos(T), -std::sin(T))).norm());
  }
  for (size_t i = 1; i < errs.size(); ++i) CHECK(std::abs(errs[i - 1] / errs[i] - 16.0) < 1.0);
}

TEST_CASE("names and spec validation") {
  CHECK(small_spec(Variant::delta, GraphKind::full).name() == "deltagn");
  CHECK(small_spec(Variant::delta, GraphKind::knn).name() == "deltagn-knn4");
  CHECK(small_spec(Variant::hogn, GraphKind::hier).name() == "hier-hogn");
  CHECK(ModelSpec::make(Variant::hogn, {}).activation == gn::Activation::softplus);
  CHECK(ModelSpec::make(Variant::delta, {}).activation == gn::Activation::relu);
  ModelSpec bad = small_spec(Variant::delta, GraphKind::knn);
  bad.graph.k = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("zero decoder leaves the state unchanged") {
  Model m(small_spec(Variant::delta, GraphKind::hier), 1, unit_norm());
  zero_group(m, "decoder/");
  const auto s = random_system(30, 2);
  const auto next = m.step(s, 0.01);
  CHECK(next.positions == s.positions);
  CHECK(next.velocities == s.velocities);
}

TEST_CASE("step wraps positions and counts graph builds") {
  Model m(small_spec(Variant::delta, GraphKind::full), 3, unit_norm());
  auto s = random_system(10, 4);
  for (int i = 0; i < 5; ++i) s = m.step(s, 0.01);
  CHECK(m.graph_builds() == 5);
  CHECK(s.positions.minCoeff() >= 0.0);
  CHECK(s.positions.maxCoeff() < s.cell_size);
}

TEST_CASE("relabelling particles permutes delta outputs") {
  for (GraphKind kind : {GraphKind::full, GraphKind::knn, GraphKind::hier}) {
    CAPTURE(to_string(kind));
    Model m(small_spec(Variant::delta, kind), 5, unit_norm());
    const auto s = random_system(24, 6);
    std::vector<int> perm(s.size());
    for (int i = 0; i < s.size(); ++i) perm[i] = (i * 7 + 3) % s.size();
    sim::ParticleSystem t = s;
    for (int i = 0; i < s.size(); ++i) {
      t.positions.row(perm[i]) = s.positions.row(i);
      t.velocities.row(perm[i]) = s.velocities.row(i);
      t.masses[perm[i]] = s.masses[i];
    }
    ad::NoGradGuard guard;
    const Matrix a = m.delta_output(m.make_batch(s, 0.01)).value();
    const Matrix b = m.delta_output(m.make_batch(t, 0.01)).value();
    double worst = 0.0;
    for (int i = 0; i < s.size(); ++i) worst = std::max(worst, (b.row(perm[i]) - a.row(i)).cwiseAbs().maxCoeff());
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("batched evaluation equals separate evaluation") {
  for (Variant v : {Variant::delta, Variant::hogn}) {
    Model m(small_spec(v, GraphKind::hier), 7, unit_norm());
    const auto a = random_system(20, 8), b = random_system(20, 9);
    ad::NoGradGuard guard;
    const Batch both = m.make_batch({&a, &b}, 0.01);
    CHECK(both.n_graphs == 2);
    const Prediction pb = m.predict(both);
    const Prediction pa = m.predict(m.make_batch(a, 0.01));
    const Prediction p2 = m.predict(m.make_batch(b, 0.01));
    CHECK((pb.q.value().topRows(20) - pa.q.value()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((pb.v.value().bottomRows(20) - p2.v.value()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("hierarchical messages reach every particle") {
  // Every pair is covered by a particle edge or a cell chain, so each output
  // depends on every other particle, unlike a k-nearest-neighbour graph.
  Model hier(small_spec(Variant::delta, GraphKind::hier, 3), 11, unit_norm());
  Model knn(small_spec(Variant::delta, GraphKind::knn), 11, unit_norm());
  const auto s = random_system(64, 12);
  ad::NoGradGuard guard;
  auto influence = [&](const Model& m) {
    Batch b = m.make_batch(s, 0.01);
    const Matrix base = m.delta_output(b).value();
    int reached = 0;
    for (int j = 1; j < s.size(); ++j) {
      Batch moved = b;
      moved.q(j, 0) += 1e-3;
      moved.v(j, 1) += 1e-2;
      if ((m.delta_output(moved).value().row(0) - base.row(0)).cwiseAbs().maxCoeff() > 0) ++reached;
    }
    return reached;
  };
  CHECK(influence(hier) == s.size() - 1);
  CHECK(influence(knn) < s.size() - 1);
}

TEST_CASE("cell centres of mass match a direct computation") {
  Model m(small_spec(Variant::delta, GraphKind::hier, 3), 13, unit_norm());
  auto s = random_system(50, 14);
  for (int i = 0; i < s.size(); ++i) s.masses[i] = 0.5 + 0.02 * i;
  const Batch b = m.make_batch(s, 0.01);
  const ParticleInputs in = m.inputs(b, ad::constant(b.q), ad::constant(b.v));
  HierarchyActivations acts;
  m.upward_pass(b, in, acts);
  const CellLevel& lowest = b.levels.back();
  const Matrix& com = acts.cells.back().q.value();
  const Matrix& vcom = acts.cells.back().v.value();
  const double L = s.cell_size;
  const double width = L / 8;  // depth 3: the lowest kept level is an 8 x 8 grid
  for (int c = 0; c < lowest.n_cells; ++c) {
    double mass = 0.0;
    Eigen::Vector2d sum_d(0, 0), sum_mv(0, 0);
    for (int i = 0; i < s.size(); ++i) {
      const double dx = sim::min_image(s.positions(i, 0) - lowest.centre(c, 0), L);
      const double dy = sim::min_image(s.positions(i, 1) - lowest.centre(c, 1), L);
      if (std::abs(dx) >= width / 2 || std::abs(dy) >= width / 2) continue;
      mass += s.masses[i];
      sum_d += s.masses[i] * Eigen::Vector2d(dx, dy);
      sum_mv += s.masses[i] * Eigen::Vector2d(s.velocities(i, 0), s.velocities(i, 1));
    }
    CHECK(rel_err(mass, lowest.mass[c]) < 1e-12);
    for (int j = 0; j < 2; ++j) {
      const double expect = sim::wrap_coord(lowest.centre(c, j) + sum_d[j] / mass, L);
      CHECK(std::abs(sim::min_image(com(c, j) - expect, L)) < 1e-12);
      CHECK(std::abs(vcom(c, j) - sum_mv[j] / mass) < 1e-12);
    }
  }
}

TEST_CASE("hierarchy parameters are shared across levels") {
  const Model d3(small_spec(Variant::delta, GraphKind::hier, 3), 1);
  const Model d5(small_spec(Variant::delta, GraphKind::hier, 5), 1);
  CHECK(d3.params().scalar_count() == d5.params().scalar_count());
  const Model flat(small_spec(Variant::delta, GraphKind::full), 1);
  CHECK(flat.params().scalar_count() < d3.params().scalar_count());
}

TEST_CASE("reduction to the base model") {
  Model base(small_spec(Variant::delta, GraphKind::full), 21, unit_norm());
  Model hier(small_spec(Variant::delta, GraphKind::hier), 22, unit_norm());
  hier.copy_params_from(base);
  for (size_t i = 0; i < hier.params().size(); ++i) {
    if (Model::is_hierarchy_param(hier.params().name(i))) hier.params().var(i).mutable_value().setZero();
  }
  ad::NoGradGuard guard;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = random_system(30, 100 + seed);
    const Matrix a = base.delta_output(base.make_batch(s, 0.01)).value();
    const Matrix b = hier.delta_output(hier.make_batch({&s}, 0.01, true)).value();
    CHECK(a == b);
  }
}

TEST_CASE("hogn derivatives match finite differences of H") {
  for (GraphKind kind : {GraphKind::full, GraphKind::hier}) {
    CAPTURE(to_string(kind));
    Model m(small_spec(Variant::hogn, kind, 2), 31, unit_norm());
    const auto s = random_system(12, 32);
    const Batch b = m.make_batch(s, 0.01);
    const Matrix q = b.q, p = momenta(s);
    const PhaseVars d = m.hogn_derivs(b, ad::constant(q), ad::constant(p));
    double worst = 0.0;
    for (int i = 0; i < s.size(); ++i) {
      for (int j = 0; j < 2; ++j) {
        const double dHdq = testing::derivative([&](double e) {
          Matrix x = q;
          x(i, j) += e;
          return hamiltonian_at(m, b, x, p);
        });
        const double dHdp = testing::derivative([&](double e) {
          Matrix x = p;
          x(i, j) += e;
          return hamiltonian_at(m, b, q, x);
        });
        worst = std::max({worst, rel_err(d.p.value()(i, j), -dHdq, 1e-6),
                          rel_err(d.q.value()(i, j), dHdp, 1e-6)});
      }
    }
    CHECK(worst < 1e-4);
    // dH/dt along the returned field vanishes.
    const double dHdt = (-d.p.value()).cwiseProduct(d.q.value()).sum() +
                        d.q.value().cwiseProduct(d.p.value()).sum();
    CHECK(std::abs(dHdt) < 1e-8);
  }
}

TEST_CASE("hogn velocity vanishes when H ignores momenta") {
  Model m(small_spec(Variant::hogn, GraphKind::full), 41, unit_norm());
  // Edge input [rel(2), receiver(3), sender(3)], node input [agg(16), features(3)];
  // features are (mass, p_x, p_y).
  Matrix& we = m.params().var(0).mutable_value();
  for (int r : {3, 4, 6, 7}) we.row(r).setZero();
  for (size_t i = 0; i < m.params().size(); ++i) {
    if (m.params().name(i) == "node/0/w") {
      Matrix& wn = m.params().var(i).mutable_value();
      wn.row(17).setZero();
      wn.row(18).setZero();
    }
  }
  const auto s = random_system(8, 42);
  const Batch b = m.make_batch(s, 0.01);
  const PhaseVars d = m.hogn_derivs(b, ad::constant(b.q), ad::constant(momenta(s)));
  CHECK(d.q.value().isZero());
  CHECK_FALSE(d.p.value().isZero());
}

TEST_CASE("hogn training gradient passes through the Hamiltonian derivatives") {
  Model m(small_spec(Variant::hogn, GraphKind::full), 51, unit_norm());
  const auto s = random_system(6, 52);
  auto t = s;
  t.positions.array() += 0.01;
  t.velocities.array() *= 1.01;
  auto loss_at = [&]() {
    const Batch b = m.make_batch(s, 0.01);
    return m.loss(b, m.predict(b), t.positions, t.velocities);
  };
  const Var loss = loss_at();
  const auto g = ad::grad(loss, m.params().vars());
  Rng rng(53);
  const double h = 1e-6;
  double worst = 0.0;
  for (int trial = 0; trial < 12; ++trial) {
    const size_t k = rng.below(m.params().size());
    Matrix& w = m.params().var(k).mutable_value();
    const Eigen::Index e = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(w.size())));
    const double keep = w.data()[e];
    w.data()[e] = keep + h;
    const double up = loss_at().scalar();
    w.data()[e] = keep - h;
    const double down = loss_at().scalar();
    w.data()[e] = keep;
    worst = std::max(worst, rel_err(g[k].value().data()[e], (up - down) / (2 * h), 1e-8));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("relative wraps to the nearest image") {
  Matrix a(1, 2), b(1, 2);
  a << 9.5, 1.0;
  b << 0.5, 2.0;
  const Var d = relative(ad::constant(a), ad::constant(b), Eigen::VectorXd::Constant(1, 10.0), true);
  CHECK(d.value()(0, 0) == doctest::Approx(-1.0));
  CHECK(d.value()(0, 1) == doctest::Approx(-1.0));
  const Var open = relative(ad::constant(a), ad::constant(b), Eigen::VectorXd::Constant(1, 10.0), false);
  CHECK(open.value()(0, 0) == doctest::Approx(9.0));
}

}
