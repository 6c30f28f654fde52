// hgn: data generation, graph inspection, training and evaluation.

#include <CLI11.hpp>

#include <atomic>
#include <functional>
#include <mutex>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include "hgn/config.hpp"
#include "hgn/error.hpp"
#include "hgn/hierarchy.hpp"
#include "hgn/io.hpp"
#include "hgn/models.hpp"
#include "hgn/rng.hpp"
#include "hgn/sim.hpp"
#include "hgn/train.hpp"

namespace {

using namespace hgn;
namespace fs = std::filesystem;

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kBadConfig = 3, kVersion = 4 };

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::config: return kBadConfig;
    case ErrorCode::version_mismatch: return kVersion;
    default: return kFailure;
  }
}

void error_line(std::string_view code, std::string_view message) {
  std::cerr << "error: code=" << code << " message=" << message << '\n';
}

// Options shared by every subcommand.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "experiment config (JSON)");
    app->add_option("--seed", seed, "random seed");
  }

  config::ExperimentConfig load() const {
    config::ExperimentConfig cfg =
        config_path.empty() ? config::ExperimentConfig::defaults() : config::load(config_path);
    if (seed) {
      cfg.seed = *seed;
      cfg.train.seed = *seed;
    }
    return cfg;
  }
};

// Model overrides accepted by train and bench.
struct ModelFlags {
  std::optional<std::string> variant, graph;
  std::optional<int> k, depth;
  std::optional<bool> periodic;

  void attach(CLI::App* app) {
    app->add_option("--variant", variant, "delta or hogn");
    app->add_option("--graph", graph, "full, knn or hier");
    app->add_option("--k", k, "neighbours for the knn graph");
    app->add_option("--depth", depth, "hierarchy depth (0 = automatic)");
    app->add_flag("--periodic,!--no-periodic", periodic, "toroidal cell adjacency");
  }

  void apply(config::ExperimentConfig& cfg) const {
    models::ModelSpec& spec = cfg.model;
    if (variant) {
      const models::ModelSpec fresh =
          models::ModelSpec::make(models::parse_variant(*variant), spec.graph, spec.charges);
      spec.variant = fresh.variant;
      spec.activation = fresh.activation;
    }
    if (graph) spec.graph.kind = models::parse_graph_kind(*graph);
    if (k) spec.graph.k = *k;
    if (depth) spec.graph.depth = *depth;
    if (periodic) spec.graph.periodic = *periodic;
    cfg.validate();
  }
};

std::vector<sim::Trajectory> generate_split(const config::ExperimentConfig& cfg, int count,
                                            std::uint64_t split_seed, int jobs) {
  const sim::SimConfig sc = cfg.sim_config();
  std::vector<sim::Trajectory> out(count);
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (int i = next++; i < count; i = next++) {
      try {
        const std::uint64_t s = mix_seed(split_seed, static_cast<std::uint64_t>(i));
        out[i] = sim::simulate_trajectory(sim::init_system(cfg.data.n_particles, sc, s), sc, s);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  for (int t = 1; t < jobs; ++t) threads.emplace_back(worker);
  worker();
  for (std::thread& t : threads) t.join();
  if (error) std::rethrow_exception(error);
  return out;
}

std::uint64_t split_stream(const std::string& split) {
  if (split == "train") return 0;
  if (split == "valid") return 1;
  if (split == "test") return 2;
  return 3 + io::fnv1a(split.data(), split.size());
}

void write_file(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::io, "cannot open '" + path.string() + "' for writing");
  body(out);
}

sim::Trajectory load_snapshot_source(const std::string& path) { return io::load_trajectory(path); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical graph networks for N-body dynamics"};
  app.require_subcommand(1);

  // generate
  Common gen_common;
  std::optional<std::string> gen_force;
  std::optional<int> gen_n, gen_trajectories, gen_steps;
  std::string gen_split = "train";
  std::optional<std::string> gen_out;
  bool gen_csv = false;
  int gen_jobs = 1;
  auto* gen = app.add_subcommand("generate", "simulate trajectories into a dataset directory");
  gen_common.attach(gen);
  gen->add_option("--force", gen_force, "gravity or coulomb");
  gen->add_option("--n", gen_n, "particles per system");
  gen->add_option("--trajectories", gen_trajectories,
                  "generate this many trajectories into --split only");
  gen->add_option("--split", gen_split, "split used with --trajectories");
  gen->add_option("--steps", gen_steps, "base steps per trajectory");
  gen->add_option("--out", gen_out, "dataset root (default: data.root)");
  gen->add_flag("--csv", gen_csv, "also write a CSV next to every trajectory");
  gen->add_option("--jobs", gen_jobs, "parallel trajectories")->check(CLI::PositiveNumber);

  // build-graph
  Common bg_common;
  std::string bg_input, bg_out;
  int bg_step = 0;
  std::optional<int> bg_depth;
  bool bg_periodic = true;
  auto* bg = app.add_subcommand("build-graph", "dump the hierarchical graph of one snapshot");
  bg_common.attach(bg);
  bg->add_option("--input", bg_input, "trajectory file")->required();
  bg->add_option("--step", bg_step, "snapshot index");
  bg->add_option("--depth", bg_depth, "hierarchy depth (default: round(log4 N))");
  bg->add_flag("--periodic,!--no-periodic", bg_periodic, "toroidal cell adjacency");
  bg->add_option("--out", bg_out, "graph JSON (default: stdout)");

  // train
  Common tr_common;
  ModelFlags tr_model;
  std::optional<std::string> tr_data;
  std::string tr_out = "checkpoint.bin";
  std::optional<std::string> tr_loss_csv;
  std::optional<long long> tr_steps;
  std::optional<int> tr_batch;
  auto* tr = app.add_subcommand("train", "train a model on <data>/train");
  tr_common.attach(tr);
  tr_model.attach(tr);
  tr->add_option("--data", tr_data, "dataset root (default: data.root)");
  tr->add_option("--out", tr_out, "checkpoint path");
  tr->add_option("--loss-csv", tr_loss_csv, "loss curve CSV");
  tr->add_option("--steps", tr_steps, "training steps");
  tr->add_option("--batch", tr_batch, "batch size");

  // rollout
  Common ro_common;
  std::string ro_checkpoint, ro_input, ro_out;
  int ro_step = 0;
  std::optional<int> ro_steps;
  std::optional<std::string> ro_csv;
  auto* ro = app.add_subcommand("rollout", "autoregressive rollout from one snapshot");
  ro_common.attach(ro);
  ro->add_option("--checkpoint", ro_checkpoint, "model checkpoint")->required();
  ro->add_option("--input", ro_input, "trajectory providing the initial state")->required();
  ro->add_option("--step", ro_step, "snapshot used as the initial state");
  ro->add_option("--steps", ro_steps, "base steps to roll out (default: sim.n_base_steps)");
  ro->add_option("--out", ro_out, "predicted trajectory file")->required();
  ro->add_option("--csv", ro_csv, "also write the prediction as CSV");

  // eval
  Common ev_common;
  std::string ev_checkpoint, ev_test_dir;
  std::vector<int> ev_taus;
  std::optional<std::string> ev_out, ev_json;
  bool ev_simulator = false;
  auto* ev = app.add_subcommand("eval", "rollout metrics on a test directory");
  ev_common.attach(ev);
  ev->add_option("--checkpoint", ev_checkpoint, "model checkpoint");
  ev->add_flag("--simulator", ev_simulator, "evaluate the reference simulator instead of a model");
  ev->add_option("--test-dir", ev_test_dir, "directory of test trajectories")->required();
  ev->add_option("--tau", ev_taus, "rollout horizons (default: eval.taus)");
  ev->add_option("--out", ev_out, "metrics CSV (default: stdout)");
  ev->add_option("--json", ev_json, "metrics JSON");

  // bench
  Common be_common;
  ModelFlags be_model;
  std::vector<int> be_ns{256, 512, 1024, 2048, 4096};
  int be_repeats = 3;
  std::optional<std::string> be_out;
  auto* be = app.add_subcommand("bench", "forward-pass and graph-build scaling");
  be_common.attach(be);
  be_model.attach(be);
  be->add_option("--n", be_ns, "particle counts");
  be->add_option("--repeats", be_repeats, "timing repeats per N");
  be->add_option("--out", be_out, "CSV (default: stdout)");

  // coverage-check
  Common cc_common;
  std::optional<int> cc_n, cc_depth;
  std::optional<std::string> cc_input;
  int cc_step = 0;
  bool cc_periodic = true;
  auto* cc = app.add_subcommand("coverage-check", "verify every particle pair is covered once");
  cc_common.attach(cc);
  cc->add_option("--n", cc_n, "particles of a random uniform system");
  cc->add_option("--input", cc_input, "trajectory file to check instead");
  cc->add_option("--step", cc_step, "snapshot index for --input");
  cc->add_option("--depth", cc_depth, "hierarchy depth (default: round(log4 N))");
  cc->add_flag("--periodic,!--no-periodic", cc_periodic, "toroidal cell adjacency");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    error_line("usage", e.what());
    return kUsage;
  }

  try {
    if (gen->parsed()) {
      config::ExperimentConfig cfg = gen_common.load();
      if (gen_force) cfg.data.force_law = sim::parse_force_law(*gen_force);
      cfg.model.charges = cfg.data.force_law == sim::ForceLaw::coulomb;
      if (gen_n) cfg.data.n_particles = *gen_n;
      if (gen_steps) cfg.sim.n_base_steps = *gen_steps;
      if (gen_out) cfg.data.root = *gen_out;
      cfg.validate();
      std::vector<std::pair<std::string, int>> splits;
      if (gen_trajectories) {
        require(*gen_trajectories >= 0, ErrorCode::config, "--trajectories must be >= 0");
        splits.emplace_back(gen_split, *gen_trajectories);
      } else {
        splits = {{"train", cfg.data.train}, {"valid", cfg.data.valid}, {"test", cfg.data.test}};
      }
      for (const auto& [split, count] : splits) {
        const auto trajs = generate_split(cfg, count, mix_seed(cfg.seed, split_stream(split)), gen_jobs);
        for (int i = 0; i < count; ++i) {
          const fs::path path = io::trajectory_path(cfg.data.root, split, i);
          io::save_trajectory(trajs[i], path);
          if (gen_csv) {
            write_file(fs::path(path).replace_extension(".csv"),
                       [&](std::ostream& out) { io::write_trajectory_csv(trajs[i], out); });
          }
        }
        std::cout << split << ": " << count << " trajectories in "
                  << (fs::path(cfg.data.root) / split).string() << '\n';
      }
      config::save(cfg, (fs::path(cfg.data.root) / "config.json").string());
    } else if (bg->parsed()) {
      const sim::Trajectory traj = load_snapshot_source(bg_input);
      require(bg_step >= 0 && bg_step <= traj.n_steps(), ErrorCode::invalid_input,
              "--step out of range");
      const sim::ParticleSystem& sys = traj.snapshots[bg_step];
      const int depth = bg_depth ? *bg_depth : hier::choose_depth(sys.size());
      const hier::HierGraph g = hier::build_hier_graph(sys, depth, bg_periodic);
      const std::string text = io::graph_to_json(g).dump(1) + "\n";
      if (bg_out.empty()) {
        std::cout << text;
      } else {
        io::write_text(bg_out, text);
      }
    } else if (tr->parsed()) {
      config::ExperimentConfig cfg = tr_common.load();
      tr_model.apply(cfg);
      if (tr_steps) cfg.train.total_steps = *tr_steps;
      if (tr_batch) cfg.train.batch_size = *tr_batch;
      cfg.validate();
      const fs::path root = tr_data ? fs::path(*tr_data) : fs::path(cfg.data.root);
      const auto data = io::load_trajectories(root / "train");
      models::Model model(cfg.model, mix_seed(cfg.seed, 0x696e6974));
      const auto result = train::train(model, data, cfg.train, [](const train::LossPoint& p) {
        std::cout << "step " << p.step << " loss " << p.loss << " lr " << p.lr << '\n';
      });
      io::save_checkpoint(model, tr_out);
      if (tr_loss_csv) {
        write_file(*tr_loss_csv, [&](std::ostream& out) { io::write_loss_csv(result.curve, out); });
      }
      if (result.skipped_steps > 0) {
        std::cout << "skipped " << result.skipped_steps << " steps with non-finite gradients\n";
      }
      std::cout << "checkpoint: " << tr_out << '\n';
    } else if (ro->parsed()) {
      const config::ExperimentConfig cfg = ro_common.load();
      const models::Model model = io::load_checkpoint(ro_checkpoint);
      const sim::Trajectory source = io::load_trajectory(ro_input);
      require(ro_step >= 0 && ro_step <= source.n_steps(), ErrorCode::invalid_input,
              "--step out of range");
      const int steps = ro_steps ? *ro_steps : cfg.sim.n_base_steps;
      train::ModelStepper stepper(model);
      const auto r = train::rollout(stepper, source.snapshots[ro_step], steps,
                                    source.config.dt_base, source.config);
      io::save_trajectory(r.trajectory, ro_out);
      if (ro_csv) {
        write_file(*ro_csv, [&](std::ostream& out) { io::write_trajectory_csv(r.trajectory, out); });
      }
      if (r.diverged()) {
        std::cout << "diverged at step " << r.trajectory.failed_step << '\n';
      } else {
        std::cout << "completed " << steps << " steps\n";
      }
    } else if (ev->parsed()) {
      const config::ExperimentConfig cfg = ev_common.load();
      const std::vector<int> taus = ev_taus.empty() ? cfg.eval.taus : ev_taus;
      const auto test = io::load_trajectories(ev_test_dir);
      require(!test.empty(), ErrorCode::invalid_input, "no trajectories in " + ev_test_dir);
      train::EvalReport report;
      if (ev_simulator) {
        train::SimulatorStepper stepper(test.front().config);
        report = train::evaluate(stepper, test, taus);
        report.model = "simulator";
      } else {
        require(!ev_checkpoint.empty(), ErrorCode::config, "eval needs --checkpoint or --simulator");
        const models::Model model = io::load_checkpoint(ev_checkpoint);
        train::check_dataset(model, test);
        train::ModelStepper stepper(model);
        report = train::evaluate(stepper, test, taus);
        report.model = model.spec().name();
      }
      report.seed = cfg.seed;
      report.config_hash = config::hash(cfg);
      if (ev_out) {
        write_file(*ev_out, [&](std::ostream& out) { io::write_eval_csv(report, out); });
      } else {
        io::write_eval_csv(report, std::cout);
      }
      if (ev_json) io::write_text(*ev_json, io::eval_to_json(report).dump(2) + "\n");
    } else if (be->parsed()) {
      config::ExperimentConfig cfg = be_common.load();
      be_model.apply(cfg);
      train::BenchConfig bc;
      bc.spec = cfg.model;
      bc.n_list = be_ns;
      bc.repeats = be_repeats;
      bc.seed = cfg.seed;
      const auto rows = train::scaling_bench(bc);
      if (be_out) {
        write_file(*be_out, [&](std::ostream& out) { io::write_bench_csv(rows, out); });
      } else {
        io::write_bench_csv(rows, std::cout);
      }
      std::vector<double> n, fwd, build, edges;
      for (const auto& r : rows) {
        if (r.status != "ok") continue;
        n.push_back(r.n);
        fwd.push_back(r.forward_seconds);
        build.push_back(r.build_seconds);
        edges.push_back(static_cast<double>(r.edges));
      }
      if (n.size() >= 2) {
        std::cerr << "slope forward=" << train::loglog_slope(n, fwd)
                  << " build=" << train::loglog_slope(n, build)
                  << " edges=" << train::loglog_slope(n, edges) << '\n';
      }
    } else if (cc->parsed()) {
      const config::ExperimentConfig cfg = cc_common.load();
      sim::ParticleSystem sys;
      if (cc_input) {
        const sim::Trajectory traj = io::load_trajectory(*cc_input);
        require(cc_step >= 0 && cc_step <= traj.n_steps(), ErrorCode::invalid_input,
                "--step out of range");
        sys = traj.snapshots[cc_step];
      } else {
        const int n = cc_n ? *cc_n : cfg.data.n_particles;
        sys = sim::init_system(n, sim::SimConfig::defaults(n, cfg.data.force_law), cfg.seed);
      }
      const int depth = cc_depth ? *cc_depth : hier::choose_depth(sys.size());
      const hier::HierGraph g = hier::build_hier_graph(sys, depth, cc_periodic);
      const hier::CoverageReport report = hier::interaction_coverage_check(g);
      std::cout << report.violations.size() << " violations (" << report.pairs_checked
                << " pairs checked)\n";
      for (size_t i = 0; i < std::min<size_t>(report.violations.size(), 20); ++i) {
        const auto& v = report.violations[i];
        std::cout << "  receiver " << v.receiver << " sender " << v.sender << " coverage "
                  << v.coverage << '\n';
      }
      if (!report.ok()) return kFailure;
    }
  } catch (const Error& e) {
    error_line(to_string(e.code()), e.what());
    return exit_code(e.code());
  } catch (const std::exception& e) {
    error_line("internal", e.what());
    return kFailure;
  }
  return kOk;
}
