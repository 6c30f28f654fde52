#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "hgn/autodiff.hpp"
#include "hgn/rng.hpp"

namespace hgn::gn {

using ad::Index;
using ad::Matrix;
using ad::Var;

enum class Activation { relu, softplus };

std::string_view to_string(Activation act);
Activation parse_activation(std::string_view name);

Var activate(const Var& x, Activation act);

// Named trainable tensors in a fixed order, with gradient buffers.
class ParamStore {
 public:
  Var add(const std::string& name, Matrix value);

  size_t size() const { return vars_.size(); }
  const std::string& name(size_t i) const { return names_[i]; }
  const Var& var(size_t i) const { return vars_[i]; }
  Var& var(size_t i) { return vars_[i]; }
  const std::vector<Var>& vars() const { return vars_; }
  const Var* find(std::string_view name) const;

  std::vector<Matrix>& grads() { return grads_; }
  const std::vector<Matrix>& grads() const { return grads_; }
  void zero_grads();

  long long scalar_count() const;

 private:
  std::vector<std::string> names_;
  std::vector<Var> vars_;
  std::vector<Matrix> grads_;
};

struct MlpSpec {
  int in = 0;
  std::vector<int> widths;  // one entry per affine layer; the last is the output width
  Activation activation = Activation::relu;
  bool activate_last = true;

  int out() const { return widths.empty() ? in : widths.back(); }
};

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out
};

class Mlp {
 public:
  Mlp() = default;
  // Registers "<name>/<layer>/w" and "<name>/<layer>/b" with fan-in scaled
  // uniform initialisation U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Mlp(const MlpSpec& spec, const std::string& name, ParamStore& store, Rng& rng);

  Var forward(const Var& x) const;

  const MlpSpec& spec() const { return spec_; }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  MlpSpec spec_;
  std::vector<Linear> layers_;
};

// Dense inputs of one graph-network block, possibly a disjoint union of
// several graphs. Graph ids map edges and nodes onto rows of the globals.
struct Topology {
  Index senders;
  Index receivers;
  Index edge_graph;  // per edge
  Index node_graph;  // per node
  int n_nodes = 0;
  int n_graphs = 1;

  int n_edges() const { return static_cast<int>(senders->size()); }

  static Topology single(int n_nodes, const std::vector<int>& senders,
                         const std::vector<int>& receivers);
  void validate() const;
};

// e'_k = phi_e([e_k, v_{r_k}, v_{s_k}, u]).
Var edge_block(const Mlp& phi_e, const Var& edges, const Var& nodes, const Var& globals,
               const Topology& topo);

// Sum of incoming edge messages per node.
Var aggregate_edges(const Var& messages, const Topology& topo);

// edge_block followed by aggregate_edges. Without gradient recording, large
// edge sets are processed in chunks so the per-edge hidden activations never
// have to be held for all edges at once.
Var edge_block_aggregated(const Mlp& phi_e, const Var& edges, const Var& nodes, const Var& globals,
                          const Topology& topo, int chunk_edges = 1 << 16);

// v'_i = phi_v([agg_i, v_i, u]).
Var node_block(const Mlp& phi_v, const Var& aggregated, const Var& nodes, const Var& globals,
               const Topology& topo);

// u' = phi_u([sum_k e'_k, sum_i v'_i, u]) per graph.
Var global_block(const Mlp& phi_u, const Var& edge_sum, const Var& nodes, const Var& globals,
                 const Topology& topo);

// Globals are optional; an n_graphs x 0 matrix stands in for "no globals".
Var no_globals(int n_graphs);

// Plain data container for a single graph, mirroring the block inputs.
struct GraphData {
  Matrix node_features;
  std::vector<int> senders;
  std::vector<int> receivers;
  Matrix edge_features;
  Matrix global_features;  // 1 x d_u, possibly 1 x 0

  void validate() const;
  Topology topology() const;
};

}  // namespace hgn::gn
