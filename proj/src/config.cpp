#include "hgn/config.hpp"

#include <cstdio>
#include <set>

#include "hgn/error.hpp"
#include "hgn/io.hpp"

namespace hgn::config {

namespace {

void check_keys(const json& j, const char* section, std::initializer_list<const char*> allowed) {
  require(j.is_object(), ErrorCode::config, std::string(section) + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    (void)value;
    require(ok.count(key) > 0, ErrorCode::config,
            std::string(section) + ": unknown key '" + key + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig cfg;
  cfg.train.lr_decay_every = 2000;
  cfg.train.total_steps = 10000;
  return cfg;
}

sim::SimConfig ExperimentConfig::sim_config() const {
  sim::SimConfig c = sim::SimConfig::defaults(data.n_particles, data.force_law);
  c.G = sim.G;
  c.k = sim.k;
  c.epsilon = sim.epsilon;
  c.eta = sim.eta;
  c.dt_base = sim.dt_base;
  if (sim.cell_size > 0) c.cell_size = sim.cell_size;
  c.n_base_steps = sim.n_base_steps;
  c.max_timestep_level = sim.max_timestep_level;
  return c;
}

void ExperimentConfig::validate() const {
  require(data.n_particles >= 1, ErrorCode::config, "data.n_particles must be >= 1");
  require(data.train >= 0 && data.valid >= 0 && data.test >= 0, ErrorCode::config,
          "dataset sizes must be >= 0");
  require(sim.cell_size >= 0, ErrorCode::config, "sim.cell_size must be >= 0");
  try {
    sim_config().validate();
    model.validate();
    train.validate();
  } catch (const Error& e) {
    fail(ErrorCode::config, e.what());
  }
  require(model.charges == (data.force_law == sim::ForceLaw::coulomb), ErrorCode::config,
          "model.charges must be true exactly for the coulomb force law");
  require(!eval.taus.empty(), ErrorCode::config, "eval.taus must not be empty");
  for (int tau : eval.taus) require(tau >= 1, ErrorCode::config, "eval.taus must be >= 1");
}

json to_json(const ExperimentConfig& cfg) {
  const train::TrainConfig& t = cfg.train;
  return {{"version", kConfigVersion},
          {"seed", cfg.seed},
          {"data",
           {{"force_law", std::string(sim::to_string(cfg.data.force_law))},
            {"n_particles", cfg.data.n_particles},
            {"train", cfg.data.train},
            {"valid", cfg.data.valid},
            {"test", cfg.data.test},
            {"root", cfg.data.root}}},
          {"sim",
           {{"G", cfg.sim.G},
            {"k", cfg.sim.k},
            {"epsilon", cfg.sim.epsilon},
            {"eta", cfg.sim.eta},
            {"dt_base", cfg.sim.dt_base},
            {"cell_size", cfg.sim.cell_size},
            {"n_base_steps", cfg.sim.n_base_steps},
            {"max_timestep_level", cfg.sim.max_timestep_level}}},
          {"model", io::model_spec_to_json(cfg.model)},
          {"train",
           {{"lr_initial", t.lr_initial},
            {"lr_decay", t.lr_decay},
            {"lr_decay_every", t.lr_decay_every},
            {"batch_size", t.batch_size},
            {"total_steps", t.total_steps},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"adam_eps", t.adam_eps},
            {"log_every", t.log_every}}},
          {"eval", {{"taus", cfg.eval.taus}}}};
}

ExperimentConfig from_json(const json& j) {
  ExperimentConfig cfg = ExperimentConfig::defaults();
  try {
    check_keys(j, "config", {"version", "seed", "data", "sim", "model", "train", "eval"});
    if (j.contains("version")) {
      const int v = j.at("version").get<int>();
      require(v == kConfigVersion, ErrorCode::version_mismatch,
              "config: unsupported version " + std::to_string(v));
    }
    read(j, "seed", cfg.seed);
    if (j.contains("data")) {
      const json& d = j.at("data");
      check_keys(d, "data", {"force_law", "n_particles", "train", "valid", "test", "root"});
      if (d.contains("force_law")) {
        cfg.data.force_law = sim::parse_force_law(d.at("force_law").get<std::string>());
      }
      read(d, "n_particles", cfg.data.n_particles);
      read(d, "train", cfg.data.train);
      read(d, "valid", cfg.data.valid);
      read(d, "test", cfg.data.test);
      read(d, "root", cfg.data.root);
    }
    cfg.model.charges = cfg.data.force_law == sim::ForceLaw::coulomb;
    if (j.contains("sim")) {
      const json& s = j.at("sim");
      check_keys(s, "sim", {"G", "k", "epsilon", "eta", "dt_base", "cell_size", "n_base_steps",
                            "max_timestep_level"});
      read(s, "G", cfg.sim.G);
      read(s, "k", cfg.sim.k);
      read(s, "epsilon", cfg.sim.epsilon);
      read(s, "eta", cfg.sim.eta);
      read(s, "dt_base", cfg.sim.dt_base);
      read(s, "cell_size", cfg.sim.cell_size);
      read(s, "n_base_steps", cfg.sim.n_base_steps);
      read(s, "max_timestep_level", cfg.sim.max_timestep_level);
    }
    if (j.contains("model")) {
      const json& m = j.at("model");
      check_keys(m, "model", {"variant", "graph", "charges", "activation", "widths"});
      json full = io::model_spec_to_json(cfg.model);
      if (m.contains("variant")) {
        // A variant change also changes the default activation.
        const auto variant = models::parse_variant(m.at("variant").get<std::string>());
        full = io::model_spec_to_json(models::ModelSpec::make(variant, cfg.model.graph, cfg.model.charges));
      }
      if (m.contains("graph")) {
        check_keys(m.at("graph"), "model.graph", {"type", "k", "depth", "periodic"});
        full["graph"].update(m.at("graph"));
      }
      if (m.contains("widths")) {
        check_keys(m.at("widths"), "model.widths",
                   {"edge", "node", "global", "up_particle", "up_cell", "cell_cell", "cell_parent",
                    "cell_update", "cell_particle"});
        full["widths"].update(m.at("widths"));
      }
      for (const char* key : {"charges", "activation"}) {
        if (m.contains(key)) full[key] = m.at(key);
      }
      cfg.model = io::model_spec_from_json(full);
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      check_keys(t, "train", {"lr_initial", "lr_decay", "lr_decay_every", "batch_size",
                              "total_steps", "beta1", "beta2", "adam_eps", "log_every"});
      read(t, "lr_initial", cfg.train.lr_initial);
      read(t, "lr_decay", cfg.train.lr_decay);
      read(t, "lr_decay_every", cfg.train.lr_decay_every);
      read(t, "batch_size", cfg.train.batch_size);
      read(t, "total_steps", cfg.train.total_steps);
      read(t, "beta1", cfg.train.beta1);
      read(t, "beta2", cfg.train.beta2);
      read(t, "adam_eps", cfg.train.adam_eps);
      read(t, "log_every", cfg.train.log_every);
    }
    if (j.contains("eval")) {
      check_keys(j.at("eval"), "eval", {"taus"});
      read(j.at("eval"), "taus", cfg.eval.taus);
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::config, std::string("config: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::version_mismatch) throw;
    fail(ErrorCode::config, e.what());
  }
  cfg.train.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig load(const std::string& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::config, "config '" + path + "': " + e.what());
  }
  return from_json(j);
}

void save(const ExperimentConfig& cfg, const std::string& path) {
  io::write_text(path, to_json(cfg).dump(2) + "\n");
}

std::string hash(const ExperimentConfig& cfg) {
  const std::string text = to_json(cfg).dump();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(io::fnv1a(text.data(), text.size())));
  return buf;
}

}  // namespace hgn::config
