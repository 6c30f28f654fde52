#include "hgn/models.hpp"

#include <algorithm>

#include "hgn/error.hpp"

namespace hgn::models {

namespace {

const char* const kHierarchyGroups[] = {"up_particle", "up_cell",     "cell_cell",
                                        "cell_parent", "cell_update", "cell_particle"};

Matrix ones_column(int rows, double value) { return Matrix::Constant(rows, 1, value); }

Matrix column(const Eigen::VectorXd& v, double divisor) {
  Matrix m(v.size(), 1);
  m.col(0) = v / divisor;
  return m;
}

Matrix gather_numeric(const Matrix& src, const std::vector<int>& ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), src.cols());
  for (size_t k = 0; k < ids.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = src.row(ids[k]);
  return out;
}

Eigen::VectorXd gather_numeric(const Eigen::VectorXd& src, const std::vector<int>& ids) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(ids.size()));
  for (size_t k = 0; k < ids.size(); ++k) out[static_cast<Eigen::Index>(k)] = src[ids[k]];
  return out;
}

Index near_graph(const CellLevel& L) {
  std::vector<int> ids;
  ids.reserve(L.near_receivers->size());
  for (int r : *L.near_receivers) ids.push_back((*L.cell_graph)[r]);
  return ad::make_index(std::move(ids));
}

Var scaled(const Var& v, double divisor) { return ad::scale(v, 1.0 / divisor); }

// Appends the globals gathered by graph id when the model has any.
void push_globals(std::vector<Var>& parts, const Var& globals, const Index& graph_of_row) {
  if (globals.cols() > 0) parts.push_back(ad::gather_rows(globals, graph_of_row));
}

}  // namespace

std::string_view to_string(Variant v) { return v == Variant::delta ? "delta" : "hogn"; }

std::string_view to_string(GraphKind k) {
  switch (k) {
    case GraphKind::full: return "full";
    case GraphKind::knn: return "knn";
    case GraphKind::hier: return "hier";
  }
  return "full";
}

Variant parse_variant(std::string_view name) {
  if (name == "delta") return Variant::delta;
  if (name == "hogn") return Variant::hogn;
  fail(ErrorCode::config, "unknown model variant '" + std::string(name) + "'");
}

GraphKind parse_graph_kind(std::string_view name) {
  if (name == "full") return GraphKind::full;
  if (name == "knn") return GraphKind::knn;
  if (name == "hier") return GraphKind::hier;
  fail(ErrorCode::config, "unknown graph type '" + std::string(name) + "'");
}

int GraphSpec::depth_for(int n_particles) const {
  return depth > 0 ? depth : hier::choose_depth(n_particles);
}

Widths Widths::uniform(int hidden, int layers) {
  const std::vector<int> w(layers, hidden);
  Widths out;
  out.edge = out.node = out.global = out.up_particle = out.up_cell = w;
  out.cell_cell = out.cell_parent = out.cell_update = out.cell_particle = w;
  return out;
}

ModelSpec ModelSpec::make(Variant variant, GraphSpec graph, bool charges) {
  ModelSpec spec;
  spec.variant = variant;
  spec.graph = graph;
  spec.charges = charges;
  spec.activation = variant == Variant::delta ? gn::Activation::relu : gn::Activation::softplus;
  return spec;
}

std::string ModelSpec::name() const {
  std::string base = variant == Variant::delta ? "deltagn" : "hogn";
  switch (graph.kind) {
    case GraphKind::full: return base;
    case GraphKind::knn: return base + "-knn" + std::to_string(graph.k);
    case GraphKind::hier: return "hier-" + base;
  }
  return base;
}

void ModelSpec::validate() const {
  const Widths& w = widths;
  for (const auto* group : {&w.edge, &w.node, &w.global, &w.up_particle, &w.up_cell, &w.cell_cell,
                            &w.cell_parent, &w.cell_update, &w.cell_particle}) {
    require(!group->empty(), ErrorCode::config, "model: every MLP needs at least one layer");
    for (int width : *group) require(width > 0, ErrorCode::config, "model: widths must be positive");
  }
  if (graph.kind == GraphKind::knn) {
    require(graph.k >= 1, ErrorCode::config, "model: knn graph needs k >= 1");
  }
  if (graph.kind == GraphKind::hier) {
    require(graph.depth == 0 || graph.depth >= 2, ErrorCode::config,
            "model: hierarchy depth must be >= 2 (or 0 for automatic)");
    require(w.up_particle.back() == w.up_cell.back(), ErrorCode::config,
            "model: upward MLPs must share an output width");
    require(w.cell_cell.back() == w.cell_parent.back(), ErrorCode::config,
            "model: cell interaction MLPs must share an output width");
    require(w.cell_particle.back() == w.edge.back(), ErrorCode::config,
            "model: cell-particle edges must match the edge width");
  }
}

PhaseVars operator+(const PhaseVars& a, const PhaseVars& b) { return {a.q + b.q, a.p + b.p}; }

PhaseVars operator*(double s, const PhaseVars& a) { return {s * a.q, s * a.p}; }

bool is_finite(const PhaseVars& x) { return x.q.value().allFinite() && x.p.value().allFinite(); }

Var relative(const Var& a, const Var& b, const Eigen::VectorXd& box, bool periodic) {
  Var d = ad::sub(a, b);
  if (!periodic) return d;
  require(box.size() == d.rows(), ErrorCode::shape_mismatch, "relative: one box size per row");
  Matrix offset(d.rows(), d.cols());
  const Matrix& raw = d.value();
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    for (Eigen::Index j = 0; j < raw.cols(); ++j) {
      offset(i, j) = sim::min_image(raw(i, j), box[i]) - raw(i, j);
    }
  }
  return ad::add(d, ad::constant(std::move(offset)));
}

Model::Model(ModelSpec spec, std::uint64_t seed, Normalization norm)
    : spec_(std::move(spec)), norm_(norm) {
  spec_.validate();
  Rng rng(seed);
  const auto act = spec_.activation;
  const Widths& w = spec_.widths;
  const int dp = particle_feature_dim();
  const int dc = cell_feature_dim();
  const int du = global_dim();

  edge_ = gn::Mlp({2 + 2 * dp + du, w.edge, act, true}, "edge", params_, rng);
  node_ = gn::Mlp({w.edge.back() + dp + du, w.node, act, true}, "node", params_, rng);
  if (spec_.variant == Variant::hogn) {
    global_ = gn::Mlp({w.edge.back() + w.node.back() + du, w.global, act, true}, "global", params_, rng);
    decoder_ = gn::Mlp({w.global.back(), {1}, act, false}, "decoder", params_, rng);
  } else {
    decoder_ = gn::Mlp({w.node.back(), {4}, act, false}, "decoder", params_, rng);
  }
  if (spec_.hierarchical()) {
    const int up = dc + w.up_particle.back();    // v'_c
    const int down = dc + w.cell_update.back();  // v''_c
    up_particle_ = gn::Mlp({dc + dp + 2 + du, w.up_particle, act, true}, "up_particle", params_, rng);
    up_cell_ = gn::Mlp({dc + up + 2 + du, w.up_cell, act, true}, "up_cell", params_, rng);
    cell_cell_ = gn::Mlp({2 * up + 2 + du, w.cell_cell, act, true}, "cell_cell", params_, rng);
    cell_parent_ = gn::Mlp({up + down + 2 + du, w.cell_parent, act, true}, "cell_parent", params_, rng);
    cell_update_ = gn::Mlp({up + w.cell_cell.back() + du, w.cell_update, act, true}, "cell_update",
                           params_, rng);
    cell_particle_ = gn::Mlp({dp + down + 2 + du, w.cell_particle, act, true}, "cell_particle",
                             params_, rng);
  }
}

int Model::particle_feature_dim() const { return spec_.charges ? 4 : 3; }
int Model::cell_feature_dim() const { return spec_.charges ? 4 : 3; }
int Model::global_dim() const { return spec_.variant == Variant::delta ? 1 : 0; }

bool Model::is_hierarchy_param(std::string_view name) {
  for (const char* group : kHierarchyGroups) {
    const std::string_view g(group);
    if (name.substr(0, g.size()) == g && name.size() > g.size() && name[g.size()] == '/') return true;
  }
  return false;
}

void Model::copy_params_from(const Model& other) {
  for (size_t i = 0; i < params_.size(); ++i) {
    const Var* src = other.params().find(params_.name(i));
    if (src && src->rows() == params_.var(i).rows() && src->cols() == params_.var(i).cols()) {
      params_.var(i).mutable_value() = src->value();
    }
  }
}

Batch Model::make_batch(const sim::ParticleSystem& sys, double dt) const {
  return make_batch(std::vector<const sim::ParticleSystem*>{&sys}, dt);
}

Batch Model::make_batch(const std::vector<const sim::ParticleSystem*>& systems, double dt,
                        bool full_particle_graph) const {
  require(!systems.empty(), ErrorCode::invalid_input, "make_batch: no systems");
  Batch b;
  b.n_graphs = static_cast<int>(systems.size());
  b.dt = dt;
  b.periodic = spec_.graph.periodic;
  int total = 0;
  for (const auto* s : systems) total += s->size();
  b.n_particles = total;
  b.mass.resize(total);
  b.charge = Eigen::VectorXd::Zero(total);
  b.box.resize(total);
  b.q.resize(total, 2);
  b.v.resize(total, 2);

  std::vector<int> senders, receivers, edge_graph, node_graph;
  const bool hier = spec_.hierarchical();
  int depth = -1;
  struct LevelBuild {
    std::vector<int> child_cell, cell_graph, near_s, near_r;
    std::vector<double> weight, cx, cy, box, mass, charge;
  };
  std::vector<LevelBuild> lb;

  int offset = 0;
  for (int gi = 0; gi < b.n_graphs; ++gi) {
    const sim::ParticleSystem& sys = *systems[gi];
    sys.validate();
    require(sys.has_charges() == spec_.charges, ErrorCode::invalid_input,
            spec_.charges ? "model expects charged particles" : "model expects uncharged particles");
    const int n = sys.size();
    b.particle_offset.push_back(offset);
    b.mass.segment(offset, n) = sys.masses;
    if (sys.has_charges()) b.charge.segment(offset, n) = sys.charges;
    b.box.segment(offset, n).setConstant(sys.cell_size);
    b.q.middleRows(offset, n) = sys.positions;
    b.v.middleRows(offset, n) = sys.velocities;
    node_graph.insert(node_graph.end(), n, gi);

    std::vector<hier::Edge> edges;
    hier::HierGraph hg;
    if (hier) {
      const int d = spec_.graph.depth_for(n);
      require(depth < 0 || d == depth, ErrorCode::invalid_input,
              "make_batch: hierarchical batches need a common depth");
      depth = d;
      hg = hier::build_hier_graph(sys, d, spec_.graph.periodic);
      edges = full_particle_graph ? hier::full_graph(n) : hg.particle_edges;
    } else if (spec_.graph.kind == GraphKind::knn) {
      edges = hier::knn_graph(sys, spec_.graph.k);
    } else {
      edges = hier::full_graph(n);
    }
    ++graph_builds_;
    for (const hier::Edge& e : edges) {
      senders.push_back(e.sender + offset);
      receivers.push_back(e.receiver + offset);
      edge_graph.push_back(gi);
    }

    if (hier) {
      const int levels = hg.n_cell_levels();
      if (lb.empty()) lb.resize(levels);
      for (int li = 0; li < levels; ++li) {
        LevelBuild& L = lb[li];
        const int cell_offset = static_cast<int>(L.mass.size());
        const auto& cells = hg.cells_by_level[li];
        const double width = sys.cell_size / hg.grid_size(li + 1);
        for (const hier::Cell& c : cells) {
          L.cx.push_back((c.ix + 0.5) * width);
          L.cy.push_back((c.iy + 0.5) * width);
          L.box.push_back(sys.cell_size);
          L.mass.push_back(c.total_mass);
          L.charge.push_back(c.total_charge);
          L.cell_graph.push_back(gi);
        }
        for (const hier::Edge& e : hg.near_edges_by_level[li]) {
          L.near_s.push_back(e.sender + cell_offset);
          L.near_r.push_back(e.receiver + cell_offset);
        }
        if (li == levels - 1) {
          for (int i = 0; i < n; ++i) {
            const int c = hg.cell_of_particle[i];
            L.child_cell.push_back(c + cell_offset);
            L.weight.push_back(sys.masses[i] / cells[c].total_mass);
          }
        } else {
          for (const hier::Cell& child : hg.cells_by_level[li + 1]) {
            L.child_cell.push_back(child.parent + cell_offset);
            L.weight.push_back(child.total_mass / cells[child.parent].total_mass);
          }
        }
      }
    }
    offset += n;
  }

  b.topo.senders = ad::make_index(std::move(senders));
  b.topo.receivers = ad::make_index(std::move(receivers));
  b.topo.edge_graph = ad::make_index(std::move(edge_graph));
  b.topo.node_graph = ad::make_index(std::move(node_graph));
  b.topo.n_nodes = total;
  b.topo.n_graphs = b.n_graphs;

  for (LevelBuild& L : lb) {
    CellLevel level;
    level.n_cells = static_cast<int>(L.mass.size());
    level.child_weight = Eigen::Map<Eigen::VectorXd>(L.weight.data(), L.weight.size());
    level.centre.resize(level.n_cells, 2);
    for (int c = 0; c < level.n_cells; ++c) level.centre.row(c) << L.cx[c], L.cy[c];
    level.box = Eigen::Map<Eigen::VectorXd>(L.box.data(), L.box.size());
    level.mass = Eigen::Map<Eigen::VectorXd>(L.mass.data(), L.mass.size());
    level.charge = Eigen::Map<Eigen::VectorXd>(L.charge.data(), L.charge.size());
    level.child_cell = ad::make_index(std::move(L.child_cell));
    level.cell_graph = ad::make_index(std::move(L.cell_graph));
    level.near_senders = ad::make_index(std::move(L.near_s));
    level.near_receivers = ad::make_index(std::move(L.near_r));
    b.levels.push_back(std::move(level));
  }
  return b;
}

ParticleInputs Model::inputs(const Batch& batch, const Var& q, const Var& velocity,
                             const Var& momentum) const {
  ParticleInputs in;
  in.q = q;
  in.velocity = velocity;
  std::vector<Var> parts{ad::constant(column(batch.mass, norm_.mass)),
                         scaled(momentum.defined() ? momentum : velocity, norm_.velocity)};
  if (spec_.charges) parts.push_back(ad::constant(column(batch.charge, norm_.charge)));
  in.features = ad::concat_cols(parts);
  in.globals = spec_.variant == Variant::delta
                   ? ad::constant(ones_column(batch.n_graphs, batch.dt / norm_.dt))
                   : gn::no_globals(batch.n_graphs);
  return in;
}

std::vector<CellState> Model::cell_states(const Batch& batch, const Var& q,
                                          const Var& velocity) const {
  const int levels = static_cast<int>(batch.levels.size());
  std::vector<CellState> states(levels);
  Var child_q = q;
  Var child_v = velocity;
  Eigen::VectorXd child_box = batch.box;
  for (int li = levels - 1; li >= 0; --li) {
    const CellLevel& L = batch.levels[li];
    const Var centre = ad::constant(gather_numeric(L.centre, *L.child_cell));
    const Var rel = relative(child_q, centre, child_box, batch.periodic);
    Var com = ad::add(ad::scatter_add_rows(ad::scale_rows(rel, L.child_weight), L.child_cell, L.n_cells),
                      ad::constant(L.centre));
    if (batch.periodic) {
      Matrix offset(L.n_cells, 2);
      for (int c = 0; c < L.n_cells; ++c) {
        for (int j = 0; j < 2; ++j) {
          offset(c, j) = sim::wrap_coord(com.value()(c, j), L.box[c]) - com.value()(c, j);
        }
      }
      com = ad::add(com, ad::constant(std::move(offset)));
    }
    const Var vcom =
        ad::scatter_add_rows(ad::scale_rows(child_v, L.child_weight), L.child_cell, L.n_cells);
    states[li] = {com, vcom};
    child_q = com;
    child_v = vcom;
    child_box = L.box;
  }
  return states;
}

void Model::upward_pass(const Batch& batch, const ParticleInputs& in,
                        HierarchyActivations& acts) const {
  require(batch.hierarchical(), ErrorCode::invalid_input, "upward_pass: batch has no hierarchy");
  const int levels = static_cast<int>(batch.levels.size());
  acts.cells = cell_states(batch, in.q, in.velocity);
  acts.raw.assign(levels, Var());
  acts.up.assign(levels, Var());
  for (int li = 0; li < levels; ++li) {
    const CellLevel& L = batch.levels[li];
    std::vector<Var> parts{ad::constant(column(L.mass, norm_.mass)),
                           scaled(acts.cells[li].v, norm_.velocity)};
    if (spec_.charges) parts.push_back(ad::constant(column(L.charge, norm_.charge)));
    acts.raw[li] = ad::concat_cols(parts);
  }

  // Lowest level: particle -> cell messages.
  {
    const int li = levels - 1;
    const CellLevel& L = batch.levels[li];
    std::vector<Var> parts{
        ad::gather_rows(acts.raw[li], L.child_cell), in.features,
        scaled(relative(ad::gather_rows(acts.cells[li].q, L.child_cell), in.q, batch.box, true),
               norm_.length)};
    push_globals(parts, in.globals, batch.topo.node_graph);
    const Var messages = up_particle_.forward(ad::concat_cols(parts));
    acts.up[li] = ad::concat_cols(
        {acts.raw[li], ad::scatter_add_rows(messages, L.child_cell, L.n_cells)});
  }
  // Coarser levels: child cell -> parent cell messages, shared parameters.
  for (int li = levels - 2; li >= 0; --li) {
    const CellLevel& L = batch.levels[li];
    const CellLevel& below = batch.levels[li + 1];
    std::vector<Var> parts{
        ad::gather_rows(acts.raw[li], L.child_cell), acts.up[li + 1],
        scaled(relative(ad::gather_rows(acts.cells[li].q, L.child_cell), acts.cells[li + 1].q,
                        below.box, true),
               norm_.length)};
    push_globals(parts, in.globals, below.cell_graph);
    const Var messages = up_cell_.forward(ad::concat_cols(parts));
    acts.up[li] = ad::concat_cols(
        {acts.raw[li], ad::scatter_add_rows(messages, L.child_cell, L.n_cells)});
  }
}

void Model::downward_pass(const Batch& batch, const ParticleInputs& in,
                          HierarchyActivations& acts) const {
  const int levels = static_cast<int>(batch.levels.size());
  require(static_cast<int>(acts.up.size()) == levels && static_cast<int>(acts.cells.size()) == levels,
          ErrorCode::invalid_input, "downward_pass: run upward_pass first");
  acts.interactions.assign(levels, Var());
  acts.updated.assign(levels, Var());
  const int interaction_width = spec_.widths.cell_cell.back();

  for (int li = 0; li < levels; ++li) {
    const CellLevel& L = batch.levels[li];
    const Var& q = acts.cells[li].q;

    // Near-neighbour interactions e'_{c_j, c_i}, summed per receiving cell.
    std::vector<Var> near_parts{
        ad::gather_rows(acts.up[li], L.near_receivers), ad::gather_rows(acts.up[li], L.near_senders),
        scaled(relative(ad::gather_rows(q, L.near_receivers), ad::gather_rows(q, L.near_senders),
                        gather_numeric(L.box, *L.near_receivers), true),
               norm_.length)};
    push_globals(near_parts, in.globals, near_graph(L));
    const Var near = ad::scatter_add_rows(cell_cell_.forward(ad::concat_cols(near_parts)),
                                          L.near_receivers, L.n_cells);

    // Interactions propagated from the parent; the coarsest level has none.
    Var parent_term;
    if (li == 0) {
      parent_term = ad::zeros(L.n_cells, interaction_width);
    } else {
      const CellLevel& above = batch.levels[li - 1];
      std::vector<Var> parts{
          acts.up[li], ad::gather_rows(acts.updated[li - 1], above.child_cell),
          scaled(relative(q, ad::gather_rows(acts.cells[li - 1].q, above.child_cell), L.box, true),
                 norm_.length)};
      push_globals(parts, in.globals, L.cell_graph);
      parent_term = cell_parent_.forward(ad::concat_cols(parts));
    }
    acts.interactions[li] = ad::add(parent_term, near);

    std::vector<Var> update_parts{acts.up[li], acts.interactions[li]};
    push_globals(update_parts, in.globals, L.cell_graph);
    acts.updated[li] =
        ad::concat_cols({acts.raw[li], cell_update_.forward(ad::concat_cols(update_parts))});
  }

  const CellLevel& lowest = batch.levels.back();
  std::vector<Var> parts{
      in.features, ad::gather_rows(acts.updated.back(), lowest.child_cell),
      scaled(relative(in.q, ad::gather_rows(acts.cells.back().q, lowest.child_cell), batch.box, true),
             norm_.length)};
  push_globals(parts, in.globals, batch.topo.node_graph);
  acts.cell_to_particle = cell_particle_.forward(ad::concat_cols(parts));
}

Var Model::particle_edge_features(const Batch& batch, const Var& q) const {
  const Eigen::VectorXd box = gather_numeric(batch.box, *batch.topo.receivers);
  return scaled(relative(ad::gather_rows(q, batch.topo.receivers),
                         ad::gather_rows(q, batch.topo.senders), box, true),
                norm_.length);
}

Var Model::aggregated_messages(const Batch& batch, const ParticleInputs& in, const Var& edge_feats,
                               HierarchyActivations* acts) const {
  Var agg = gn::edge_block_aggregated(edge_, edge_feats, in.features, in.globals, batch.topo);
  if (batch.hierarchical()) {
    HierarchyActivations local;
    HierarchyActivations& a = acts ? *acts : local;
    upward_pass(batch, in, a);
    downward_pass(batch, in, a);
    agg = ad::add(agg, a.cell_to_particle);
  }
  return agg;
}

Var Model::node_outputs(const Batch& batch, const ParticleInputs& in, Var* aggregated) const {
  const Var agg = aggregated_messages(batch, in, particle_edge_features(batch, in.q), nullptr);
  if (aggregated) *aggregated = agg;
  return gn::node_block(node_, agg, in.features, in.globals, batch.topo);
}

Var Model::delta_output(const Batch& batch) const {
  require(spec_.variant == Variant::delta, ErrorCode::invalid_input,
          "delta_output: model is not a delta model");
  const Var q = ad::constant(batch.q);
  const Var v = ad::constant(batch.v);
  const ParticleInputs in = inputs(batch, q, v);
  return decoder_.forward(node_outputs(batch, in, nullptr));
}

Var Model::delta_forward(const Batch& batch) const {
  Eigen::VectorXd scales(4);
  scales << norm_.delta_q, norm_.delta_q, norm_.delta_v, norm_.delta_v;
  return ad::scale_cols(delta_output(batch), scales);
}

Var Model::hamiltonian(const Batch& batch, const Var& q, const Var& p) const {
  require(spec_.variant == Variant::hogn, ErrorCode::invalid_input,
          "hamiltonian: model is not a Hamiltonian model");
  require(q.rows() == batch.n_particles && p.rows() == batch.n_particles && q.cols() == 2 &&
              p.cols() == 2,
          ErrorCode::shape_mismatch, "hamiltonian: q and p must be N x 2");
  const Var velocity = ad::scale_rows(p, batch.mass.cwiseInverse());
  const ParticleInputs in = inputs(batch, q, velocity, p);
  Var agg;
  const Var nodes = node_outputs(batch, in, &agg);
  // Sum over all edges, including the appended cell -> particle edges.
  const Var edge_sum = ad::scatter_add_rows(agg, batch.topo.node_graph, batch.n_graphs);
  const Var u = gn::global_block(global_, edge_sum, nodes, in.globals, batch.topo);
  return ad::scale(decoder_.forward(u), norm_.energy);
}

PhaseVars Model::hogn_derivs(const Batch& batch, const Var& q, const Var& p,
                             bool create_graph) const {
  ad::GradModeGuard recording(true);
  const Var q_in = q.requires_grad() ? q : ad::leaf(q.value(), true);
  const Var p_in = p.requires_grad() ? p : ad::leaf(p.value(), true);
  const Var h = ad::sum_all(hamiltonian(batch, q_in, p_in));
  require(h.rows() == 1 && h.cols() == 1, ErrorCode::shape_mismatch,
          "hogn_derivs: Hamiltonian must be scalar");
  auto g = ad::grad(h, {q_in, p_in}, create_graph);
  return {g[1], ad::neg(g[0])};
}

Prediction Model::predict(const Batch& batch) const {
  if (spec_.variant == Variant::delta) {
    const Var delta = delta_forward(batch);
    return {ad::add(ad::constant(batch.q), ad::slice_cols(delta, 0, 2)),
            ad::add(ad::constant(batch.v), ad::slice_cols(delta, 2, 2))};
  }
  const bool create_graph = ad::grad_enabled();
  Matrix p0 = batch.v;
  for (int i = 0; i < batch.n_particles; ++i) p0.row(i) *= batch.mass[i];
  const PhaseVars x0{ad::constant(batch.q), ad::constant(std::move(p0))};
  const PhaseVars x1 = rk4_step(x0, batch.dt, [&](const PhaseVars& s) {
    return hogn_derivs(batch, s.q, s.p, create_graph);
  });
  return {x1.q, ad::scale_rows(x1.p, batch.mass.cwiseInverse())};
}

Var Model::loss(const Batch& batch, const Prediction& pred, const Matrix& q_true,
                const Matrix& v_true) const {
  require(q_true.rows() == batch.n_particles && v_true.rows() == batch.n_particles,
          ErrorCode::shape_mismatch, "loss: target particle count differs from the batch");
  const Var rq = scaled(relative(pred.q, ad::constant(q_true), batch.box, true), norm_.delta_q);
  const Var rv = scaled(ad::sub(pred.v, ad::constant(v_true)), norm_.delta_v);
  return ad::mean_square(ad::concat_cols({rq, rv}));
}

sim::ParticleSystem Model::step(const sim::ParticleSystem& sys, double dt) const {
  ad::NoGradGuard no_grad;
  const Batch batch = make_batch(sys, dt);
  const Prediction pred = predict(batch);
  sim::ParticleSystem next = sys;
  next.positions = pred.q.value();
  next.velocities = pred.v.value();
  require(next.positions.allFinite() && next.velocities.allFinite(), ErrorCode::overflow,
          "model step produced a non-finite state");
  sim::wrap_positions(next.positions, sys.cell_size);
  return next;
}

}  // namespace hgn::models
