// Acceptance checks. Usage: hgn_acceptance [criterion...]; no arguments runs
// all of them. Prints one PASS/FAIL line per criterion and exits nonzero if
// any failed.
#include <algorithm>
#include <array>
#include <cstdarg>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hgn/hierarchy.hpp"
#include "hgn/models.hpp"
#include "hgn/rng.hpp"
#include "hgn/sim.hpp"
#include "hgn/train.hpp"

using namespace hgn;
using ad::Matrix;
using ad::Var;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [x]");
  }
};

// Five-point central difference of f(offset) at offset 0.
template <class F>
double derivative(F&& f, double h = 1e-4) {
  return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
}

double rel(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// ---- 1: simulator conservation ---------------------------------------------

Outcome simulator_conservation() {
  Outcome out;
  for (int n : {3, 20, 100}) {
    double worst_e = 0.0, worst_p = 0.0, worst_t = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const sim::SimConfig cfg = sim::SimConfig::defaults(n, sim::ForceLaw::gravity);
      const sim::ParticleSystem init = sim::init_system(n, cfg, seed);
      const auto t0 = Clock::now();
      const sim::Trajectory traj = sim::simulate_trajectory(init, cfg, seed);
      worst_t = std::max(worst_t, seconds_since(t0));
      const double h0 = sim::hamiltonian(init, cfg);
      const sim::Vec2 p0 = sim::total_momentum(init);
      const double pscale = sim::momentum_scale(init);
      for (const sim::ParticleSystem& s : traj.snapshots) {
        worst_e = std::max(worst_e, std::abs((sim::hamiltonian(s, cfg) - h0) / h0));
        worst_p = std::max(worst_p, (sim::total_momentum(s) - p0).norm() / pscale);
      }
      if (traj.n_steps() != 200) worst_e = INFINITY;
    }
    out.require(worst_e < 1e-3 && worst_p < 1e-9 && worst_t < 60.0,
                fmt("N=%d dE=%.2e dP=%.2e t=%.2fs", n, worst_e, worst_p, worst_t));
  }
  return out;
}

// ---- 2: hierarchy size and structure ---------------------------------------

Outcome hierarchy_structure() {
  Outcome out;
  for (int n : {64, 256, 1024, 4096}) {
    const sim::SimConfig cfg = sim::SimConfig::defaults(n, sim::ForceLaw::gravity);
    const hier::HierGraph g = hier::build_hier_graph(sim::init_system(n, cfg, 7), hier::choose_depth(n));
    const hier::HierStats st = hier::compute_stats(g);
    out.require(g.node_count() < 3LL * n && st.max_near_senders <= 27 && st.adjacent_near_edges == 0,
                fmt("N=%d nodes=%lld near<=%d adjacent=%lld", n, g.node_count(), st.max_near_senders,
                    st.adjacent_near_edges));
  }
  std::vector<double> ns, hier_edges, full_edges;
  for (int n = 64; n <= 4096; n *= 2) {
    const sim::SimConfig cfg = sim::SimConfig::defaults(n, sim::ForceLaw::gravity);
    const hier::HierGraph g = hier::build_hier_graph(sim::init_system(n, cfg, 8), hier::choose_depth(n));
    ns.push_back(n);
    hier_edges.push_back(static_cast<double>(g.edge_count()));
    full_edges.push_back(static_cast<double>(hier::full_graph(n).size()));
  }
  const double sh = train::loglog_slope(ns, hier_edges);
  const double sf = train::loglog_slope(ns, full_edges);
  out.require(sh >= 0.9 && sh <= 1.1, fmt("hier edge slope %.3f", sh));
  out.require(std::abs(sf - 2.0) <= 0.05, fmt("full edge slope %.3f", sf));
  return out;
}

// ---- 3: coverage -------------------------------------------------------------

Outcome coverage() {
  Outcome out;
  for (int n : {16, 50, 64, 100}) {
    const sim::SimConfig cfg = sim::SimConfig::defaults(n, sim::ForceLaw::gravity);
    const sim::ParticleSystem s = sim::init_system(n, cfg, 9);
    const auto t0 = Clock::now();
    const hier::CoverageReport r =
        hier::interaction_coverage_check(hier::build_hier_graph(s, hier::choose_depth(n), true));
    const double t = seconds_since(t0);
    out.require(r.ok() && r.pairs_checked == static_cast<long long>(n) * (n - 1) && t < 10.0,
                fmt("N=%d violations=%zu pairs=%lld t=%.3fs", n, r.violations.size(), r.pairs_checked, t));
  }
  return out;
}

// ---- 4: gradients ------------------------------------------------------------

Matrix momenta(const models::Batch& b) {
  Matrix p = b.v;
  for (int i = 0; i < b.n_particles; ++i) p.row(i) *= b.mass[i];
  return p;
}

// Worst relative error over one random instance: directional and coordinate
// checks of the loss gradient, and for the Hamiltonian model of dH/dq, dH/dp.
double gradient_instance(models::Variant variant, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x67726164));
  const int n = 3 + static_cast<int>(rng.below(8));
  const bool charges = rng.below(2) == 1;
  const auto law = charges ? sim::ForceLaw::coulomb : sim::ForceLaw::gravity;
  models::GraphSpec g;
  g.kind = std::array{models::GraphKind::full, models::GraphKind::knn, models::GraphKind::hier}[rng.below(3)];
  g.k = std::min(3, n - 1);
  g.depth = 2;
  models::ModelSpec spec = models::ModelSpec::make(variant, g, charges);
  spec.activation = gn::Activation::softplus;
  spec.widths = models::Widths::uniform(8);
  models::Normalization norm;
  norm.length = 1.5;
  norm.delta_q = 0.02;
  norm.delta_v = 0.05;
  models::Model model(spec, seed, norm);

  const sim::SimConfig cfg = sim::SimConfig::defaults(n, law);
  const sim::ParticleSystem s = sim::init_system(n, cfg, seed);
  Matrix q_true = s.positions, v_true = s.velocities;
  for (Eigen::Index i = 0; i < q_true.size(); ++i) {
    q_true.data()[i] += rng.uniform(-0.02, 0.02);
    v_true.data()[i] += rng.uniform(-0.05, 0.05);
  }
  const models::Batch batch = model.make_batch(s, 0.01);
  auto loss_value = [&]() {
    ad::NoGradGuard guard;
    return model.loss(batch, model.predict(batch), q_true, v_true).scalar();
  };
  const Var loss = model.loss(batch, model.predict(batch), q_true, v_true);
  const auto grads = ad::grad(loss, model.params().vars());

  double worst = 0.0;
  // Directional derivative along a random direction over all parameters.
  std::vector<Matrix> dir;
  double analytic = 0.0;
  for (size_t k = 0; k < grads.size(); ++k) {
    Matrix d(grads[k].rows(), grads[k].cols());
    for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = rng.uniform(-1, 1);
    analytic += grads[k].value().cwiseProduct(d).sum();
    dir.push_back(std::move(d));
  }
  const std::vector<Matrix> base = [&] {
    std::vector<Matrix> v;
    for (size_t k = 0; k < dir.size(); ++k) v.push_back(model.params().var(k).value());
    return v;
  }();
  const double fd_dir = derivative([&](double e) {
    for (size_t k = 0; k < dir.size(); ++k) model.params().var(k).mutable_value() = base[k] + e * dir[k];
    return loss_value();
  });
  for (size_t k = 0; k < dir.size(); ++k) model.params().var(k).mutable_value() = base[k];
  worst = std::max(worst, rel(analytic, fd_dir, 1e-6));
  // A few single coordinates.
  for (int trial = 0; trial < 3; ++trial) {
    const size_t k = rng.below(grads.size());
    Matrix& w = model.params().var(k).mutable_value();
    const auto e = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(w.size())));
    const double keep = w.data()[e];
    const double fd = derivative([&](double x) {
      w.data()[e] = keep + x;
      return loss_value();
    });
    w.data()[e] = keep;
    worst = std::max(worst, rel(grads[k].value().data()[e], fd, 1e-6));
  }
  if (variant == models::Variant::hogn) {
    const Matrix q = batch.q, p = momenta(batch);
    const models::PhaseVars d = model.hogn_derivs(batch, ad::constant(q), ad::constant(p));
    auto H = [&](const Matrix& qq, const Matrix& pp) {
      ad::NoGradGuard guard;
      return ad::sum_all(model.hamiltonian(batch, ad::constant(qq), ad::constant(pp))).scalar();
    };
    for (int trial = 0; trial < 4; ++trial) {
      const int i = static_cast<int>(rng.below(n)), j = static_cast<int>(rng.below(2));
      const double dq = derivative([&](double x) {
        Matrix qq = q;
        qq(i, j) += x;
        return H(qq, p);
      });
      const double dp = derivative([&](double x) {
        Matrix pp = p;
        pp(i, j) += x;
        return H(q, pp);
      });
      worst = std::max(worst, rel(-d.p.value()(i, j), dq, 1e-6));
      worst = std::max(worst, rel(d.q.value()(i, j), dp, 1e-6));
    }
  }
  return worst;
}

Outcome gradients() {
  Outcome out;
  for (models::Variant v : {models::Variant::delta, models::Variant::hogn}) {
    double worst = 0.0;
    for (std::uint64_t i = 0; i < 100; ++i) worst = std::max(worst, gradient_instance(v, 1000 + i));
    out.require(worst < 1e-4, fmt("%s worst rel err %.2e over 100", std::string(models::to_string(v)).c_str(), worst));
  }
  return out;
}

// ---- 5: RK4 order --------------------------------------------------------------

Outcome rk4_order() {
  Outcome out;
  // H = (q^2 + p^2) / 2 through the tape; exact solution q = cos t, p = -sin t.
  auto field = [](const models::PhaseVars& s) {
    ad::GradModeGuard on(true);
    const Var q = ad::leaf(s.q.value()), p = ad::leaf(s.p.value());
    const Var H = ad::scale(ad::add(ad::sum_all(ad::mul(q, q)), ad::sum_all(ad::mul(p, p))), 0.5);
    const auto g = ad::grad(H, {q, p});
    return models::PhaseVars{ad::constant(g[1].value()), ad::constant(-g[0].value())};
  };
  const double T = 2.0;
  std::vector<double> errs;
  for (int steps = 10; steps <= 80; steps *= 2) {
    models::PhaseVars x{ad::constant(Matrix::Constant(1, 1, 1.0)), ad::constant(Matrix::Zero(1, 1))};
    for (int i = 0; i < steps; ++i) x = models::rk4_step(x, T / steps, field);
    errs.push_back(std::hypot(x.q.value()(0, 0) - std::cos(T), x.p.value()(0, 0) + std::sin(T)));
  }
  for (size_t i = 1; i < errs.size(); ++i) {
    const double r = errs[i - 1] / errs[i];
    out.require(std::abs(r - 16.0) <= 3.0, fmt("ratio %.2f", r));
  }
  return out;
}

// ---- 6: reduction identity -----------------------------------------------------

Outcome reduction_identity() {
  Outcome out;
  models::GraphSpec flat, tree;
  tree.kind = models::GraphKind::hier;
  const models::Model base(models::ModelSpec::make(models::Variant::delta, flat), 61);
  models::Model hierm(models::ModelSpec::make(models::Variant::delta, tree), 62);
  hierm.copy_params_from(base);
  for (size_t i = 0; i < hierm.params().size(); ++i) {
    if (models::Model::is_hierarchy_param(hierm.params().name(i))) {
      hierm.params().var(i).mutable_value().setZero();
    }
  }
  ad::NoGradGuard guard;
  int exact = 0;
  for (std::uint64_t k = 0; k < 20; ++k) {
    const int n = 8 + static_cast<int>(k) * 3;
    const sim::ParticleSystem s =
        sim::init_system(n, sim::SimConfig::defaults(n, sim::ForceLaw::gravity), 600 + k);
    const Matrix a = base.delta_forward(base.make_batch(s, 0.01)).value();
    const Matrix b = hierm.delta_forward(hierm.make_batch({&s}, 0.01, true)).value();
    if (a == b) ++exact;
  }
  out.require(exact == 20, fmt("%d/20 bit-identical", exact));
  return out;
}

// ---- 7: learning -----------------------------------------------------------------

Outcome learning() {
  Outcome out;
  const auto t0 = Clock::now();
  const auto train_set = train::generate_dataset(20, 100, 200, sim::ForceLaw::gravity, 701);
  const auto valid_set = train::generate_dataset(20, 20, 200, sim::ForceLaw::gravity, 702);
  const auto big_set = train::generate_dataset(200, 10, 20, sim::ForceLaw::gravity, 703);

  struct Run {
    std::string name;
    models::GraphSpec graph;
    double ratio = 0.0;
    double rmse20 = 0.0;
    double rmse20_big = 0.0;
  };
  std::vector<Run> runs(3);
  runs[0].name = "hier";
  runs[0].graph.kind = models::GraphKind::hier;
  runs[1].name = "full";
  runs[2].name = "knn8";
  runs[2].graph.kind = models::GraphKind::knn;
  runs[2].graph.k = 8;

  train::TrainConfig cfg;
  cfg.total_steps = 10000;
  cfg.lr_decay_every = 2000;
  cfg.batch_size = 10;
  cfg.log_every = 1000;
  cfg.seed = 704;
  for (Run& r : runs) {
    const auto t1 = Clock::now();
    models::Model m(models::ModelSpec::make(models::Variant::delta, r.graph), 705);
    train::train(m, train_set, cfg, [&](const train::LossPoint& p) {
      std::fprintf(stderr, "  %s step %lld loss %.4f\n", r.name.c_str(), p.step, p.loss);
    });
    r.ratio = train::one_step_stats(m, valid_set, 2000, 706).ratio();
    train::ModelStepper stepper(m);
    r.rmse20 = train::evaluate(stepper, valid_set, {20}).rmse[0];
    r.rmse20_big = train::evaluate(stepper, big_set, {20}).rmse[0];
    std::fprintf(stderr, "  %s ratio %.4f rmse20 %.4g rmse20@200 %.4g (%.0fs)\n", r.name.c_str(),
                 r.ratio, r.rmse20, r.rmse20_big, seconds_since(t1));
  }
  const double total = seconds_since(t0);
  out.require(runs[0].ratio < 0.1, fmt("hier one-step ratio %.4f", runs[0].ratio));
  out.require(runs[0].rmse20 <= 2.0 * runs[1].rmse20,
              fmt("rmse20 hier %.4g vs full %.4g", runs[0].rmse20, runs[1].rmse20));
  out.require(runs[2].rmse20_big > runs[0].rmse20_big,
              fmt("N=200 rmse20 knn8 %.4g vs hier %.4g", runs[2].rmse20_big, runs[0].rmse20_big));
  out.require(total < 4 * 3600.0, fmt("%.0fs", total));
  return out;
}

// ---- 8: scaling ----------------------------------------------------------------

Outcome scaling() {
  Outcome out;
  auto slopes = [](models::GraphKind kind, int repeats) {
    train::BenchConfig cfg;
    models::GraphSpec g;
    g.kind = kind;
    cfg.spec = models::ModelSpec::make(models::Variant::delta, g);
    cfg.n_list = {256, 512, 1024, 2048, 4096};
    cfg.repeats = repeats;
    cfg.seed = 801;
    const auto rows = train::scaling_bench(cfg);
    std::vector<double> n, fwd, build;
    for (const auto& r : rows) {
      if (r.status != "ok") continue;
      n.push_back(r.n);
      fwd.push_back(r.forward_seconds);
      build.push_back(r.build_seconds);
      std::fprintf(stderr, "  %s N=%d edges=%lld build=%.4fs forward=%.4fs\n",
                   std::string(models::to_string(kind)).c_str(), r.n, r.edges, r.build_seconds,
                   r.forward_seconds);
    }
    if (n.size() < rows.size()) return std::pair<double, double>(NAN, NAN);
    return std::pair{train::loglog_slope(n, fwd), train::loglog_slope(n, build)};
  };
  const auto [hf, hb] = slopes(models::GraphKind::hier, 3);
  const auto [ff, fb] = slopes(models::GraphKind::full, 1);
  (void)fb;
  out.require(hf >= 0.8 && hf <= 1.3, fmt("hier forward slope %.3f", hf));
  out.require(ff >= 1.7 && ff <= 2.3, fmt("full forward slope %.3f", ff));
  out.require(hb <= 1.3, fmt("hier build slope %.3f", hb));
  return out;
}

// ---- 9: metric fidelity ------------------------------------------------------------

sim::ParticleSystem pair_at(double vx0, double vx1) {
  sim::ParticleSystem s;
  s.cell_size = 10.0;
  s.masses = Eigen::VectorXd::Ones(2);
  s.positions = (sim::Points(2, 2) << 1, 1, 2, 1).finished();
  s.velocities = (sim::Points(2, 2) << vx0, 0, vx1, 0).finished();
  return s;
}

Outcome metric_fidelity() {
  Outcome out;
  sim::SimConfig cfg = sim::SimConfig::defaults(2, sim::ForceLaw::gravity);
  cfg.cell_size = 10.0;
  sim::Trajectory a, b;
  a.config = b.config = cfg;
  a.snapshots = {pair_at(0, 0), pair_at(1, 0)};
  b.snapshots = {pair_at(1, -1), pair_at(0, 0)};
  const double pot = -2.0 / std::sqrt(1.04);
  const double ea = (pot - (pot + 0.5)) / pot, eb = ((pot + 1.0) - pot) / (pot + 1.0);
  const train::EnergyErrorSummary s = train::energy_error({a, b}, cfg, 1);
  out.require(rel(s.mean, (ea + eb) / 2, 1e-300) < 1e-12,
              fmt("energy error %.15g vs %.15g", s.mean, (ea + eb) / 2));

  const int tau = 20;
  models::GraphSpec g;
  g.kind = models::GraphKind::hier;
  const models::Model m(models::ModelSpec::make(models::Variant::delta, g), 901);
  train::ModelStepper stepper(m);
  const sim::SimConfig sc = sim::SimConfig::defaults(30, sim::ForceLaw::gravity);
  const train::RolloutResult r = train::rollout(stepper, sim::init_system(30, sc, 902), tau, 0.01, sc);
  out.require(r.graph_builds == tau, fmt("graph builds %lld for tau=%d", r.graph_builds, tau));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria = {
      {1, {"simulator conservation", simulator_conservation}},
      {2, {"hierarchy size and structure", hierarchy_structure}},
      {3, {"interaction coverage", coverage}},
      {4, {"gradient correctness", gradients}},
      {5, {"rk4 order", rk4_order}},
      {6, {"reduction identity", reduction_identity}},
      {7, {"learning smoke test", learning}},
      {8, {"scaling bench", scaling}},
      {9, {"metric fidelity", metric_fidelity}},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  if (selected.empty()) {
    for (const auto& [id, c] : criteria) selected.push_back(id);
  }
  int failed = 0;
  for (int id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::fprintf(stderr, "unknown criterion %d\n", id);
      return 2;
    }
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = it->second.second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    std::printf("criterion %d (%s): %s  %s  [%.1fs]\n", id, it->second.first, o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
