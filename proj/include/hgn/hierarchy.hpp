#pragma once

#include <cstdint>
#include <vector>

#include "hgn/sim.hpp"

namespace hgn::hier {

using sim::Vec2;

// Directed edge sender -> receiver.
struct Edge {
  int sender = 0;
  int receiver = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

struct Cell {
  int level = 0;  // 1 = coarsest kept level
  int ix = 0;
  int iy = 0;
  double total_mass = 0.0;
  Vec2 com_position = Vec2::Zero();
  Vec2 com_velocity = Vec2::Zero();
  double total_charge = 0.0;
  std::vector<int> children;  // cells one level down, or particles for the lowest level
  int parent = -1;            // index into the level above; -1 on level 1
};

// Parent-child link. The child is a particle when the parent sits on the
// lowest cell level, otherwise a cell on parent_level + 1.
struct ParentChildEdge {
  int parent_level = 0;
  int parent = 0;
  int child = 0;
};

// Quadtree interaction graph. Level l (1-based) is a 2^(l+1) x 2^(l+1) grid,
// levels 1..depth-1 are stored, and the particles form level `depth`.
struct HierGraph {
  int depth = 0;
  bool periodic = true;
  double cell_size = 0.0;
  int n_particles = 0;
  std::vector<std::vector<Cell>> cells_by_level;       // [0] is level 1
  std::vector<std::vector<Edge>> near_edges_by_level;  // cell indices on that level
  std::vector<Edge> particle_edges;
  std::vector<int> cell_of_particle;  // index into the lowest level

  int n_cell_levels() const { return depth - 1; }
  int grid_size(int level) const { return 1 << (level + 1); }
  const std::vector<Cell>& lowest() const { return cells_by_level.back(); }

  std::vector<ParentChildEdge> parent_child_edges() const;

  long long cell_count() const;
  long long node_count() const { return cell_count() + n_particles; }
  long long near_edge_count() const;
  long long parent_child_edge_count() const;
  long long edge_count() const;
};

// round(log4 N), at least 2.
int choose_depth(int n);

// Smallest depth >= 2 whose finest grid holds at most kmax particles per cell,
// capped at max_depth.
int choose_depth_adaptive(const sim::ParticleSystem& sys, int kmax = 1, int max_depth = 12);

constexpr int kMaxDepth = 12;

HierGraph build_hier_graph(const sim::ParticleSystem& sys, int depth, bool periodic = true);

// Chebyshev adjacency of two grid cells on the same level (torus if periodic).
bool cells_adjacent(int ix, int iy, int jx, int jy, int grid, bool periodic);

struct CoverageViolation {
  int receiver = 0;
  int sender = 0;
  int coverage = 0;
};

struct CoverageReport {
  long long pairs_checked = 0;
  std::vector<CoverageViolation> violations;
  bool ok() const { return violations.empty(); }
};

// For every ordered particle pair counts the direct particle edge plus the
// number of levels whose ancestor cells are joined by a near-neighbour edge.
// Every pair must be covered exactly once.
CoverageReport interaction_coverage_check(const HierGraph& g);

struct HierStats {
  int max_near_senders = 0;
  int max_children = 0;
  int max_parents = 0;
  int max_particle_in_degree = 0;
  double mean_particle_in_degree = 0.0;
  long long adjacent_near_edges = 0;  // near edges joining adjacent cells (must be 0)
  long long non_adjacent_parent_near_edges = 0;  // near edges whose parents are not adjacent
};

HierStats compute_stats(const HierGraph& g);

// Each particle receives edges from its k nearest neighbours under the minimum
// image metric; ties broken by particle index.
std::vector<Edge> knn_graph(const sim::ParticleSystem& sys, int k);

// All N(N-1) directed edges.
std::vector<Edge> full_graph(int n);

}  // namespace hgn::hier
