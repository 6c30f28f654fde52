#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "hgn/error.hpp"
#include "hgn/gn.hpp"
#include "hgn/hierarchy.hpp"
#include "hgn/sim.hpp"

namespace hgn::models {

using ad::Index;
using ad::Matrix;
using ad::Var;

enum class Variant { delta, hogn };
enum class GraphKind { full, knn, hier };

std::string_view to_string(Variant v);
std::string_view to_string(GraphKind k);
Variant parse_variant(std::string_view name);
GraphKind parse_graph_kind(std::string_view name);

struct GraphSpec {
  GraphKind kind = GraphKind::full;
  int k = 15;            // neighbours for knn
  int depth = 0;         // hierarchy depth; 0 picks choose_depth(N) per system
  bool periodic = true;  // toroidal cell adjacency

  int depth_for(int n_particles) const;
};

struct Widths {
  std::vector<int> edge{150, 150};
  std::vector<int> node{100, 100, 100};
  std::vector<int> global{100, 100};
  std::vector<int> up_particle{100, 100};
  std::vector<int> up_cell{100, 100};
  std::vector<int> cell_cell{150, 150};
  std::vector<int> cell_parent{150, 150};
  std::vector<int> cell_update{100, 100, 100};
  std::vector<int> cell_particle{150, 150};

  // Every group `hidden` wide with `layers` layers (for small test networks).
  static Widths uniform(int hidden, int layers = 2);
};

struct ModelSpec {
  Variant variant = Variant::delta;
  GraphSpec graph;
  bool charges = false;
  gn::Activation activation = gn::Activation::relu;
  Widths widths;

  // ReLU for the delta model, softplus for the Hamiltonian model.
  static ModelSpec make(Variant variant, GraphSpec graph, bool charges = false);

  bool hierarchical() const { return graph.kind == GraphKind::hier; }
  std::string name() const;
  void validate() const;
};

// Fixed input/output scales. Features are divided by these, delta outputs and
// the Hamiltonian are multiplied by them.
struct Normalization {
  double length = 1.0;
  double velocity = 1.0;
  double mass = 1.0;
  double charge = 1.0;
  double dt = 0.01;
  double delta_q = 1.0;
  double delta_v = 1.0;
  double energy = 1.0;
};

// COM position and velocity of every cell on one level.
struct CellState {
  Var q;
  Var v;
};

// One kept cell level of a (possibly batched) hierarchy.
struct CellLevel {
  int n_cells = 0;
  Index child_cell;             // per child (particle or finer cell): cell on this level
  Eigen::VectorXd child_weight; // child mass / cell mass
  Matrix centre;                // geometric cell centres
  Eigen::VectorXd box;          // per cell box size
  Eigen::VectorXd mass;
  Eigen::VectorXd charge;
  Index cell_graph;
  Index near_senders;
  Index near_receivers;
};

// Frozen graph structure plus the particle state it was built from. Several
// systems can be packed into one batch as a disjoint union.
struct Batch {
  int n_particles = 0;
  int n_graphs = 0;
  double dt = 0.01;
  bool periodic = true;
  Eigen::VectorXd mass;
  Eigen::VectorXd charge;
  Eigen::VectorXd box;  // per particle
  Matrix q;             // N x 2
  Matrix v;             // N x 2
  std::vector<int> particle_offset;  // first particle of each graph
  gn::Topology topo;                 // particle-level edges
  std::vector<CellLevel> levels;     // coarsest first, empty for flat graphs

  bool hierarchical() const { return !levels.empty(); }
};

// Activations of the upward and downward passes, one entry per level.
struct HierarchyActivations {
  std::vector<CellState> cells;
  std::vector<Var> raw;           // v_c
  std::vector<Var> up;            // v'_c
  std::vector<Var> interactions;  // e'_c
  std::vector<Var> updated;       // v''_c
  Var cell_to_particle;           // one edge feature per particle
};

// Differentiable per-particle inputs for one evaluation.
struct ParticleInputs {
  Var q;         // positions
  Var velocity;  // velocities
  Var features;  // normalised node features (mass, velocity or momentum, charge)
  Var globals;   // n_graphs x d_u
};

struct PhaseVars {
  Var q;
  Var p;
};

PhaseVars operator+(const PhaseVars& a, const PhaseVars& b);
PhaseVars operator*(double s, const PhaseVars& a);
bool is_finite(const PhaseVars& x);
inline bool is_finite(double x) { return std::isfinite(x); }
template <class Derived>
bool is_finite(const Eigen::MatrixBase<Derived>& x) {
  return x.allFinite();
}

// Classical fourth-order Runge-Kutta step for any state supporting addition
// and scaling. Throws overflow if a stage becomes non-finite.
template <class State, class Deriv>
State rk4_step(const State& x, double dt, Deriv&& f) {
  auto check = [](const State& s) {
    if (!is_finite(s)) fail(ErrorCode::overflow, "rk4_step: non-finite stage");
    return s;
  };
  const State k1 = check(f(x));
  const State k2 = check(f(x + (0.5 * dt) * k1));
  const State k3 = check(f(x + (0.5 * dt) * k2));
  const State k4 = check(f(x + dt * k3));
  return check(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
}

struct Prediction {
  Var q;  // unwrapped next positions
  Var v;  // next velocities
};

class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed, Normalization norm = {});

  const ModelSpec& spec() const { return spec_; }
  const Normalization& norm() const { return norm_; }
  void set_norm(const Normalization& norm) { norm_ = norm; }
  gn::ParamStore& params() { return params_; }
  const gn::ParamStore& params() const { return params_; }

  // Names of the parameter groups that belong to the hierarchy.
  static bool is_hierarchy_param(std::string_view name);
  // Copies every parameter that exists in both models with the same shape.
  void copy_params_from(const Model& other);

  // Builds the interaction graph of each system and packs them into a batch.
  // With full_particle_graph the particle level of a hierarchical model uses
  // all N(N-1) pairs instead of the near-field edges.
  Batch make_batch(const std::vector<const sim::ParticleSystem*>& systems, double dt,
                   bool full_particle_graph = false) const;
  Batch make_batch(const sim::ParticleSystem& sys, double dt) const;

  long long graph_builds() const { return graph_builds_; }

  // Node features use `momentum` instead of velocity when it is given.
  ParticleInputs inputs(const Batch& batch, const Var& q, const Var& velocity,
                        const Var& momentum = {}) const;

  void upward_pass(const Batch& batch, const ParticleInputs& in, HierarchyActivations& acts) const;
  void downward_pass(const Batch& batch, const ParticleInputs& in, HierarchyActivations& acts) const;

  // Relative position features q_receiver - q_sender of the particle edges.
  Var particle_edge_features(const Batch& batch, const Var& q) const;

  // Normalised (dq, dv) per particle; multiply by the delta scales for raw units.
  Var delta_output(const Batch& batch) const;
  // Raw (dq, dv) per particle, N x 4.
  Var delta_forward(const Batch& batch) const;

  // Learned Hamiltonian per graph (n_graphs x 1).
  Var hamiltonian(const Batch& batch, const Var& q, const Var& p) const;
  // (dH/dp, -dH/dq) at the given phase point.
  PhaseVars hogn_derivs(const Batch& batch, const Var& q, const Var& p,
                        bool create_graph = false) const;

  Prediction predict(const Batch& batch) const;

  // Normalised one-step training loss against the true next states.
  Var loss(const Batch& batch, const Prediction& pred, const Matrix& q_true,
           const Matrix& v_true) const;

  // Autoregressive step: builds a fresh graph for sys, predicts, wraps.
  sim::ParticleSystem step(const sim::ParticleSystem& sys, double dt) const;

  int particle_feature_dim() const;
  int cell_feature_dim() const;
  int global_dim() const;

 private:
  Var aggregated_messages(const Batch& batch, const ParticleInputs& in, const Var& edge_feats,
                          HierarchyActivations* acts) const;
  Var node_outputs(const Batch& batch, const ParticleInputs& in, Var* aggregated) const;
  std::vector<CellState> cell_states(const Batch& batch, const Var& q, const Var& velocity) const;

  ModelSpec spec_;
  Normalization norm_;
  gn::ParamStore params_;
  gn::Mlp edge_, node_, global_, decoder_;
  gn::Mlp up_particle_, up_cell_, cell_cell_, cell_parent_, cell_update_, cell_particle_;
  mutable long long graph_builds_ = 0;
};

// Relative displacement a - b per row, wrapped to the closest periodic image
// when periodic is set. The wrap enters as a constant offset, so gradients
// pass through unchanged.
Var relative(const Var& a, const Var& b, const Eigen::VectorXd& box, bool periodic);

}  // namespace hgn::models
