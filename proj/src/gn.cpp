#include "hgn/gn.hpp"

#include <cmath>

#include "hgn/error.hpp"

namespace hgn::gn {

std::string_view to_string(Activation act) {
  return act == Activation::relu ? "relu" : "softplus";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "softplus") return Activation::softplus;
  fail(ErrorCode::config, "unknown activation '" + std::string(name) + "'");
}

Var activate(const Var& x, Activation act) {
  return act == Activation::relu ? ad::relu(x) : ad::softplus(x);
}

Var ParamStore::add(const std::string& name, Matrix value) {
  require(find(name) == nullptr, ErrorCode::invalid_input, "duplicate parameter '" + name + "'");
  grads_.push_back(Matrix::Zero(value.rows(), value.cols()));
  names_.push_back(name);
  vars_.push_back(ad::leaf(std::move(value), true));
  return vars_.back();
}

const Var* ParamStore::find(std::string_view name) const {
  for (size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return &vars_[i];
  }
  return nullptr;
}

void ParamStore::zero_grads() {
  for (Matrix& g : grads_) g.setZero();
}

long long ParamStore::scalar_count() const {
  long long n = 0;
  for (const Var& v : vars_) n += v.rows() * v.cols();
  return n;
}

Mlp::Mlp(const MlpSpec& spec, const std::string& name, ParamStore& store, Rng& rng)
    : spec_(spec) {
  require(spec.in >= 0 && !spec.widths.empty(), ErrorCode::invalid_input,
          "mlp '" + name + "': needs at least one layer");
  int fan_in = spec.in;
  for (size_t l = 0; l < spec.widths.size(); ++l) {
    const int out = spec.widths[l];
    const double bound = fan_in > 0 ? 1.0 / std::sqrt(static_cast<double>(fan_in)) : 0.0;
    Matrix w(fan_in, out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
    Matrix b(1, out);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = rng.uniform(-bound, bound);
    const std::string prefix = name + "/" + std::to_string(l);
    Linear layer;
    layer.weight = store.add(prefix + "/w", std::move(w));
    layer.bias = store.add(prefix + "/b", std::move(b));
    layers_.push_back(layer);
    fan_in = out;
  }
}

Var Mlp::forward(const Var& x) const {
  require(x.cols() == spec_.in, ErrorCode::shape_mismatch,
          "mlp: input has " + std::to_string(x.cols()) + " columns, expected " +
              std::to_string(spec_.in));
  Var h = x;
  for (size_t l = 0; l < layers_.size(); ++l) {
    h = ad::affine(h, layers_[l].weight, layers_[l].bias);
    if (l + 1 < layers_.size() || spec_.activate_last) h = activate(h, spec_.activation);
  }
  return h;
}

Topology Topology::single(int n_nodes, const std::vector<int>& senders,
                          const std::vector<int>& receivers) {
  Topology t;
  t.senders = ad::make_index(senders);
  t.receivers = ad::make_index(receivers);
  t.edge_graph = ad::make_index(std::vector<int>(senders.size(), 0));
  t.node_graph = ad::make_index(std::vector<int>(n_nodes, 0));
  t.n_nodes = n_nodes;
  t.n_graphs = 1;
  return t;
}

void Topology::validate() const {
  require(senders && receivers && edge_graph && node_graph, ErrorCode::invalid_input,
          "topology: missing index arrays");
  require(senders->size() == receivers->size() && edge_graph->size() == senders->size() &&
              static_cast<int>(node_graph->size()) == n_nodes,
          ErrorCode::shape_mismatch, "topology: inconsistent array lengths");
  for (size_t k = 0; k < senders->size(); ++k) {
    require((*senders)[k] >= 0 && (*senders)[k] < n_nodes && (*receivers)[k] >= 0 &&
                (*receivers)[k] < n_nodes,
            ErrorCode::invalid_input, "topology: edge endpoint out of range");
  }
}

Var no_globals(int n_graphs) { return ad::zeros(n_graphs, 0); }

namespace {

Var edge_inputs(const Var& edges, const Var& nodes, const Var& globals, const Index& senders,
                const Index& receivers, const Index& edge_graph) {
  std::vector<Var> parts{edges, ad::gather_rows(nodes, receivers), ad::gather_rows(nodes, senders)};
  if (globals.cols() > 0) parts.push_back(ad::gather_rows(globals, edge_graph));
  return ad::concat_cols(parts);
}

Index slice_index(const Index& ids, size_t begin, size_t end) {
  return ad::make_index(std::vector<int>(ids->begin() + begin, ids->begin() + end));
}

}  // namespace

Var edge_block(const Mlp& phi_e, const Var& edges, const Var& nodes, const Var& globals,
               const Topology& topo) {
  require(edges.rows() == topo.n_edges(), ErrorCode::shape_mismatch,
          "edge_block: one feature row per edge required");
  return phi_e.forward(
      edge_inputs(edges, nodes, globals, topo.senders, topo.receivers, topo.edge_graph));
}

Var aggregate_edges(const Var& messages, const Topology& topo) {
  return ad::scatter_add_rows(messages, topo.receivers, topo.n_nodes);
}

Var edge_block_aggregated(const Mlp& phi_e, const Var& edges, const Var& nodes, const Var& globals,
                          const Topology& topo, int chunk_edges) {
  const int n_edges = topo.n_edges();
  if (ad::grad_enabled() || n_edges <= chunk_edges) {
    return aggregate_edges(edge_block(phi_e, edges, nodes, globals, topo), topo);
  }
  Matrix total = Matrix::Zero(topo.n_nodes, phi_e.spec().out());
  for (int begin = 0; begin < n_edges; begin += chunk_edges) {
    const int end = std::min(n_edges, begin + chunk_edges);
    const Var chunk = ad::constant(edges.value().middleRows(begin, end - begin));
    const Index receivers = slice_index(topo.receivers, begin, end);
    const Var messages = phi_e.forward(
        edge_inputs(chunk, nodes, globals, slice_index(topo.senders, begin, end), receivers,
                    slice_index(topo.edge_graph, begin, end)));
    const Matrix& m = messages.value();
    for (int k = 0; k < end - begin; ++k) total.row((*receivers)[k]) += m.row(k);
  }
  return ad::constant(std::move(total));
}

Var node_block(const Mlp& phi_v, const Var& aggregated, const Var& nodes, const Var& globals,
               const Topology& topo) {
  require(aggregated.rows() == topo.n_nodes && nodes.rows() == topo.n_nodes,
          ErrorCode::shape_mismatch, "node_block: one row per node required");
  std::vector<Var> parts{aggregated, nodes};
  if (globals.cols() > 0) parts.push_back(ad::gather_rows(globals, topo.node_graph));
  return phi_v.forward(ad::concat_cols(parts));
}

Var global_block(const Mlp& phi_u, const Var& edge_sum, const Var& nodes, const Var& globals,
                 const Topology& topo) {
  require(edge_sum.rows() == topo.n_graphs, ErrorCode::shape_mismatch,
          "global_block: edge sums must have one row per graph");
  std::vector<Var> parts{edge_sum, ad::scatter_add_rows(nodes, topo.node_graph, topo.n_graphs)};
  if (globals.cols() > 0) parts.push_back(globals);
  return phi_u.forward(ad::concat_cols(parts));
}

void GraphData::validate() const {
  const auto n = node_features.rows();
  require(senders.size() == receivers.size() &&
              static_cast<Eigen::Index>(senders.size()) == edge_features.rows(),
          ErrorCode::shape_mismatch, "graph: one feature row per edge required");
  for (size_t k = 0; k < senders.size(); ++k) {
    require(senders[k] >= 0 && senders[k] < n && receivers[k] >= 0 && receivers[k] < n,
            ErrorCode::invalid_input, "graph: sender/receiver id out of range");
  }
  require(node_features.allFinite() && edge_features.allFinite() && global_features.allFinite(),
          ErrorCode::invalid_input, "graph: non-finite features");
  require(global_features.rows() == 1, ErrorCode::shape_mismatch, "graph: globals must be one row");
}

Topology GraphData::topology() const {
  return Topology::single(static_cast<int>(node_features.rows()), senders, receivers);
}

}  // namespace hgn::gn
