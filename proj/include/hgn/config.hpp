#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hgn/models.hpp"
#include "hgn/sim.hpp"
#include "hgn/train.hpp"

namespace hgn::config {

using json = nlohmann::json;

constexpr int kConfigVersion = 1;

struct DataConfig {
  sim::ForceLaw force_law = sim::ForceLaw::gravity;
  int n_particles = 20;
  int train = 100;
  int valid = 20;
  int test = 20;
  std::string root = "data";
};

// Overrides of the simulator defaults; cell_size 0 means sqrt(12 N).
struct SimOverrides {
  double G = 2.0;
  double k = 2.0;
  double epsilon = 0.2;
  double eta = 0.001;
  double dt_base = 0.01;
  double cell_size = 0.0;
  int n_base_steps = 200;
  int max_timestep_level = 8;
};

struct EvalConfig {
  std::vector<int> taus{20, 200};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  SimOverrides sim;
  models::ModelSpec model;
  train::TrainConfig train;
  EvalConfig eval;

  // Desk-scale defaults: decay every 2000 steps, 10 000 steps.
  static ExperimentConfig defaults();

  sim::SimConfig sim_config() const;
  // Throws config on inconsistent settings.
  void validate() const;
};

json to_json(const ExperimentConfig& cfg);
// Strict: unknown keys and wrong types are config errors; missing keys keep
// their defaults.
ExperimentConfig from_json(const json& j);

ExperimentConfig load(const std::string& path);
void save(const ExperimentConfig& cfg, const std::string& path);

// Hex FNV-1a of the canonical JSON dump.
std::string hash(const ExperimentConfig& cfg);

}  // namespace hgn::config
