#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "hgn/hierarchy.hpp"
#include "hgn/models.hpp"
#include "hgn/sim.hpp"
#include "hgn/train.hpp"

namespace hgn::io {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ad::Matrix;

constexpr std::uint32_t kTrajectoryVersion = 1;
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr int kGraphDumpVersion = 1;

// 64-bit FNV-1a.
std::uint64_t fnv1a(const void* data, size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);

// ---- trajectories ----------------------------------------------------------

std::string encode_trajectory(const sim::Trajectory& traj);
sim::Trajectory decode_trajectory(const std::string& bytes);

void save_trajectory(const sim::Trajectory& traj, const fs::path& path);
sim::Trajectory load_trajectory(const fs::path& path);

// One row per (step, particle): step,particle,m,x,y,vx,vy[,c]
void write_trajectory_csv(const sim::Trajectory& traj, std::ostream& out);

// <root>/<split>/traj_00000.bin, ...
fs::path trajectory_path(const fs::path& root, const std::string& split, int index);
// Loads every *.bin file of a directory in name order.
std::vector<sim::Trajectory> load_trajectories(const fs::path& dir);

// ---- checkpoints -----------------------------------------------------------

json model_spec_to_json(const models::ModelSpec& spec);
models::ModelSpec model_spec_from_json(const json& j);
json normalization_to_json(const models::Normalization& n);
models::Normalization normalization_from_json(const json& j);

void save_checkpoint(const models::Model& model, const fs::path& path);
// Rebuilds the model from the manifest and restores every tensor bit-exactly.
models::Model load_checkpoint(const fs::path& path);

// ---- graphs and reports ----------------------------------------------------

json graph_to_json(const hier::HierGraph& g);

void write_loss_csv(const std::vector<train::LossPoint>& curve, std::ostream& out);
void write_eval_csv(const train::EvalReport& report, std::ostream& out);
json eval_to_json(const train::EvalReport& report);
void write_bench_csv(const std::vector<train::BenchRow>& rows, std::ostream& out);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

}  // namespace hgn::io
