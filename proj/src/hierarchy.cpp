#include "hgn/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "hgn/error.hpp"

namespace hgn::hier {

namespace {

int wrap_index(int i, int grid) { return ((i % grid) + grid) % grid; }

int grid_coord(double x, double L, int grid) {
  int i = static_cast<int>(std::floor(x / L * grid));
  return std::clamp(i, 0, grid - 1);
}

// Dense (ix, iy) -> cell index lookup for one level.
class LevelIndex {
 public:
  explicit LevelIndex(int grid) : grid_(grid), slots_(static_cast<size_t>(grid) * grid, -1) {}

  int& at(int ix, int iy) { return slots_[static_cast<size_t>(iy) * grid_ + ix]; }

  // Cell at (ix, iy), applying the torus wrap or returning -1 off the grid.
  int find(int ix, int iy, bool periodic) const {
    if (periodic) {
      ix = wrap_index(ix, grid_);
      iy = wrap_index(iy, grid_);
    } else if (ix < 0 || iy < 0 || ix >= grid_ || iy >= grid_) {
      return -1;
    }
    return slots_[static_cast<size_t>(iy) * grid_ + ix];
  }

 private:
  int grid_;
  std::vector<int> slots_;
};

Vec2 cell_centre(const Cell& c, double L, int grid) {
  const double w = L / grid;
  return {(c.ix + 0.5) * w, (c.iy + 0.5) * w};
}

Vec2 relative_to(const Vec2& q, const Vec2& centre, double L, bool periodic) {
  Vec2 d = q - centre;
  if (periodic) d = {sim::min_image(d.x(), L), sim::min_image(d.y(), L)};
  return d;
}

}  // namespace

bool cells_adjacent(int ix, int iy, int jx, int jy, int grid, bool periodic) {
  int dx = std::abs(ix - jx);
  int dy = std::abs(iy - jy);
  if (periodic) {
    dx = std::min(dx, grid - dx);
    dy = std::min(dy, grid - dy);
  }
  return dx <= 1 && dy <= 1;
}

std::vector<ParentChildEdge> HierGraph::parent_child_edges() const {
  std::vector<ParentChildEdge> out;
  out.reserve(static_cast<size_t>(parent_child_edge_count()));
  for (int li = 0; li < n_cell_levels(); ++li) {
    const auto& level = cells_by_level[li];
    for (int c = 0; c < static_cast<int>(level.size()); ++c) {
      for (int child : level[c].children) out.push_back({li + 1, c, child});
    }
  }
  return out;
}

long long HierGraph::cell_count() const {
  long long n = 0;
  for (const auto& level : cells_by_level) n += static_cast<long long>(level.size());
  return n;
}

long long HierGraph::near_edge_count() const {
  long long n = 0;
  for (const auto& level : near_edges_by_level) n += static_cast<long long>(level.size());
  return n;
}

long long HierGraph::parent_child_edge_count() const {
  // Every cell below level 1 has one parent, every particle one parent cell.
  return cell_count() - static_cast<long long>(cells_by_level.front().size()) + n_particles;
}

long long HierGraph::edge_count() const {
  return near_edge_count() + parent_child_edge_count() +
         static_cast<long long>(particle_edges.size());
}

int choose_depth(int n) {
  require(n >= 1, ErrorCode::invalid_input, "choose_depth: need at least one particle");
  const int d = static_cast<int>(std::lround(std::log(static_cast<double>(n)) / std::log(4.0)));
  return std::clamp(d, 2, kMaxDepth);
}

int choose_depth_adaptive(const sim::ParticleSystem& sys, int kmax, int max_depth) {
  require(kmax >= 1, ErrorCode::invalid_input, "choose_depth_adaptive: kmax must be >= 1");
  max_depth = std::clamp(max_depth, 2, kMaxDepth);
  const double L = sys.cell_size;
  for (int depth = 2; depth < max_depth; ++depth) {
    const int grid = 1 << depth;
    std::vector<int> keys(sys.size());
    for (int i = 0; i < sys.size(); ++i) {
      keys[i] = grid_coord(sys.positions(i, 1), L, grid) * grid +
                grid_coord(sys.positions(i, 0), L, grid);
    }
    std::sort(keys.begin(), keys.end());
    int run = 0;
    int worst = 0;
    for (size_t i = 0; i < keys.size(); ++i) {
      run = (i > 0 && keys[i] == keys[i - 1]) ? run + 1 : 1;
      worst = std::max(worst, run);
    }
    if (worst <= kmax) return depth;
  }
  return max_depth;
}

HierGraph build_hier_graph(const sim::ParticleSystem& sys, int depth, bool periodic) {
  require(depth >= 2 && depth <= kMaxDepth, ErrorCode::invalid_input,
          "build_hier_graph: depth must be in [2, 12]");
  sys.validate();
  const int n = sys.size();
  const double L = sys.cell_size;

  HierGraph g;
  g.depth = depth;
  g.periodic = periodic;
  g.cell_size = L;
  g.n_particles = n;
  g.cells_by_level.resize(depth - 1);
  g.near_edges_by_level.resize(depth - 1);
  g.cell_of_particle.assign(n, -1);

  std::vector<LevelIndex> index;
  index.reserve(depth - 1);
  for (int l = 1; l < depth; ++l) index.emplace_back(g.grid_size(l));

  // Lowest cell level from the particles, cells ordered by (iy, ix).
  {
    const int level = depth - 1;
    const int grid = g.grid_size(level);
    std::vector<std::pair<long long, int>> keyed(n);
    for (int i = 0; i < n; ++i) {
      const int ix = grid_coord(sys.positions(i, 0), L, grid);
      const int iy = grid_coord(sys.positions(i, 1), L, grid);
      keyed[i] = {static_cast<long long>(iy) * grid + ix, i};
    }
    std::sort(keyed.begin(), keyed.end());
    auto& cells = g.cells_by_level.back();
    for (const auto& [key, i] : keyed) {
      const int ix = static_cast<int>(key % grid);
      const int iy = static_cast<int>(key / grid);
      int& slot = index.back().at(ix, iy);
      if (slot < 0) {
        slot = static_cast<int>(cells.size());
        Cell c;
        c.level = level;
        c.ix = ix;
        c.iy = iy;
        cells.push_back(std::move(c));
      }
      cells[slot].children.push_back(i);
      g.cell_of_particle[i] = slot;
    }
  }

  // Coarser levels from their children.
  for (int level = depth - 2; level >= 1; --level) {
    auto& children = g.cells_by_level[level];
    auto& cells = g.cells_by_level[level - 1];
    std::vector<long long> keys;
    keys.reserve(children.size());
    const int grid = g.grid_size(level);
    for (const Cell& c : children) keys.push_back(static_cast<long long>(c.iy >> 1) * grid + (c.ix >> 1));
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    for (long long key : keys) {
      Cell c;
      c.level = level;
      c.ix = static_cast<int>(key % grid);
      c.iy = static_cast<int>(key / grid);
      index[level - 1].at(c.ix, c.iy) = static_cast<int>(cells.size());
      cells.push_back(std::move(c));
    }
    for (int ci = 0; ci < static_cast<int>(children.size()); ++ci) {
      Cell& child = children[ci];
      const int parent = index[level - 1].at(child.ix >> 1, child.iy >> 1);
      child.parent = parent;
      cells[parent].children.push_back(ci);
    }
  }

  // Summaries, bottom-up. Positions are averaged as displacements from the
  // geometric centre of the cell so that periodic images do not mix.
  for (int level = depth - 1; level >= 1; --level) {
    const int grid = g.grid_size(level);
    const bool lowest = level == depth - 1;
    for (Cell& c : g.cells_by_level[level - 1]) {
      const Vec2 centre = cell_centre(c, L, grid);
      Vec2 moment = Vec2::Zero();
      Vec2 momentum = Vec2::Zero();
      double mass = 0.0;
      double charge = 0.0;
      for (int child : c.children) {
        double m;
        Vec2 q;
        Vec2 v;
        double z = 0.0;
        if (lowest) {
          m = sys.masses[child];
          q = sys.positions.row(child).transpose();
          v = sys.velocities.row(child).transpose();
          if (sys.has_charges()) z = sys.charges[child];
        } else {
          const Cell& cc = g.cells_by_level[level][child];
          m = cc.total_mass;
          q = cc.com_position;
          v = cc.com_velocity;
          z = cc.total_charge;
        }
        mass += m;
        moment += m * relative_to(q, centre, L, periodic);
        momentum += m * v;
        charge += z;
      }
      c.total_mass = mass;
      c.com_position = centre + moment / mass;
      if (periodic) {
        c.com_position = {sim::wrap_coord(c.com_position.x(), L),
                          sim::wrap_coord(c.com_position.y(), L)};
      }
      c.com_velocity = momentum / mass;
      c.total_charge = charge;
    }
  }

  // Near neighbours: children of the parent's neighbourhood that are not
  // adjacent to the cell itself. All level-1 cells share the removed top level
  // as mutually adjacent parents.
  for (int level = 1; level < depth; ++level) {
    const int grid = g.grid_size(level);
    const auto& cells = g.cells_by_level[level - 1];
    auto& edges = g.near_edges_by_level[level - 1];
    std::vector<int> candidates;
    for (int ci = 0; ci < static_cast<int>(cells.size()); ++ci) {
      const Cell& c = cells[ci];
      candidates.clear();
      if (level == 1) {
        for (int cj = 0; cj < static_cast<int>(cells.size()); ++cj) candidates.push_back(cj);
      } else {
        const Cell& parent = g.cells_by_level[level - 2][c.parent];
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int pj = index[level - 2].find(parent.ix + dx, parent.iy + dy, periodic);
            if (pj < 0) continue;
            const auto& siblings = g.cells_by_level[level - 2][pj].children;
            candidates.insert(candidates.end(), siblings.begin(), siblings.end());
          }
        }
        std::sort(candidates.begin(), candidates.end());
      }
      for (int cj : candidates) {
        const Cell& other = cells[cj];
        if (cells_adjacent(c.ix, c.iy, other.ix, other.iy, grid, periodic)) continue;
        edges.push_back({cj, ci});
      }
    }
  }

  // Particle level: same or adjacent lowest cells.
  {
    const auto& cells = g.lowest();
    g.particle_edges.reserve(static_cast<size_t>(n) * 10);
    std::vector<int> neighbours;
    for (int i = 0; i < n; ++i) {
      const Cell& c = cells[g.cell_of_particle[i]];
      neighbours.clear();
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int cj = index.back().find(c.ix + dx, c.iy + dy, periodic);
          if (cj < 0) continue;
          for (int j : cells[cj].children) {
            if (j != i) neighbours.push_back(j);
          }
        }
      }
      std::sort(neighbours.begin(), neighbours.end());
      for (int j : neighbours) g.particle_edges.push_back({j, i});
    }
  }
  return g;
}

CoverageReport interaction_coverage_check(const HierGraph& g) {
  const int n = g.n_particles;
  const int levels = g.n_cell_levels();

  // ancestors[l][i]: cell containing particle i on level l + 1.
  std::vector<std::vector<int>> ancestors(levels, std::vector<int>(n));
  for (int i = 0; i < n; ++i) {
    int c = g.cell_of_particle[i];
    for (int l = levels - 1; l >= 0; --l) {
      ancestors[l][i] = c;
      c = g.cells_by_level[l][c].parent;
    }
  }

  auto key = [](long long s, long long r, long long count) { return s * count + r; };
  std::unordered_set<long long> direct;
  direct.reserve(g.particle_edges.size() * 2);
  for (const Edge& e : g.particle_edges) direct.insert(key(e.sender, e.receiver, n));
  std::vector<std::unordered_set<long long>> near(levels);
  for (int l = 0; l < levels; ++l) {
    const long long m = static_cast<long long>(g.cells_by_level[l].size());
    near[l].reserve(g.near_edges_by_level[l].size() * 2);
    for (const Edge& e : g.near_edges_by_level[l]) near[l].insert(key(e.sender, e.receiver, m));
  }

  CoverageReport report;
  for (int r = 0; r < n; ++r) {
    for (int s = 0; s < n; ++s) {
      if (s == r) continue;
      ++report.pairs_checked;
      int coverage = direct.count(key(s, r, n)) ? 1 : 0;
      for (int l = 0; l < levels; ++l) {
        const long long m = static_cast<long long>(g.cells_by_level[l].size());
        if (near[l].count(key(ancestors[l][s], ancestors[l][r], m))) ++coverage;
      }
      if (coverage != 1) report.violations.push_back({r, s, coverage});
    }
  }
  return report;
}

HierStats compute_stats(const HierGraph& g) {
  HierStats st;
  for (int l = 0; l < g.n_cell_levels(); ++l) {
    const auto& cells = g.cells_by_level[l];
    const int grid = g.grid_size(l + 1);
    std::vector<int> senders(cells.size(), 0);
    for (const Edge& e : g.near_edges_by_level[l]) {
      ++senders[e.receiver];
      const Cell& a = cells[e.sender];
      const Cell& b = cells[e.receiver];
      if (cells_adjacent(a.ix, a.iy, b.ix, b.iy, grid, g.periodic)) ++st.adjacent_near_edges;
      if (l > 0) {
        const Cell& pa = g.cells_by_level[l - 1][a.parent];
        const Cell& pb = g.cells_by_level[l - 1][b.parent];
        if (!cells_adjacent(pa.ix, pa.iy, pb.ix, pb.iy, grid / 2, g.periodic)) {
          ++st.non_adjacent_parent_near_edges;
        }
      }
    }
    for (size_t c = 0; c < cells.size(); ++c) {
      st.max_near_senders = std::max(st.max_near_senders, senders[c]);
      st.max_parents = std::max(st.max_parents, cells[c].parent >= 0 ? 1 : 0);
    }
  }
  // The lowest level may hold more than four particles; max_children reports
  // cell-cell links only.
  st.max_children = 0;
  for (int l = 0; l + 1 < g.n_cell_levels(); ++l) {
    for (const Cell& c : g.cells_by_level[l]) {
      st.max_children = std::max(st.max_children, static_cast<int>(c.children.size()));
    }
  }
  std::vector<int> in_degree(g.n_particles, 0);
  for (const Edge& e : g.particle_edges) ++in_degree[e.receiver];
  long long total = 0;
  for (int d : in_degree) {
    st.max_particle_in_degree = std::max(st.max_particle_in_degree, d);
    total += d;
  }
  st.mean_particle_in_degree =
      g.n_particles > 0 ? static_cast<double>(total) / g.n_particles : 0.0;
  return st;
}

std::vector<Edge> knn_graph(const sim::ParticleSystem& sys, int k) {
  const int n = sys.size();
  require(k >= 0 && k < n, ErrorCode::invalid_input, "knn_graph: k must satisfy 0 <= k < N");
  const double L = sys.cell_size;
  const int grid = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(n) / std::max(k, 1))));
  const double width = L / grid;

  std::vector<std::vector<int>> bins(static_cast<size_t>(grid) * grid);
  std::vector<int> bx(n), by(n);
  for (int i = 0; i < n; ++i) {
    bx[i] = grid_coord(sys.positions(i, 0), L, grid);
    by[i] = grid_coord(sys.positions(i, 1), L, grid);
    bins[static_cast<size_t>(by[i]) * grid + bx[i]].push_back(i);
  }

  std::vector<Edge> edges;
  edges.reserve(static_cast<size_t>(n) * k);
  std::vector<std::pair<double, int>> found;
  std::vector<int> stamp(bins.size(), -1);
  for (int i = 0; i < n; ++i) {
    found.clear();
    const Vec2 qi = sys.positions.row(i).transpose();
    for (int ring = 0;; ++ring) {
      for (int dy = -ring; dy <= ring; ++dy) {
        for (int dx = -ring; dx <= ring; ++dx) {
          if (std::max(std::abs(dx), std::abs(dy)) != ring) continue;
          const size_t b = static_cast<size_t>(wrap_index(by[i] + dy, grid)) * grid +
                           wrap_index(bx[i] + dx, grid);
          if (stamp[b] == i) continue;
          stamp[b] = i;
          for (int j : bins[b]) {
            if (j == i) continue;
            const Vec2 d = sim::min_image_disp(qi, sys.positions.row(j).transpose(), L);
            found.emplace_back(d.squaredNorm(), j);
          }
        }
      }
      const bool everything = 2 * ring + 1 >= grid;
      if (static_cast<int>(found.size()) >= k) {
        std::nth_element(found.begin(), found.begin() + (k > 0 ? k - 1 : 0), found.end());
        const double covered = ring * width;
        if (everything || k == 0 || found[k - 1].first < covered * covered * (1.0 - 1e-12)) break;
      }
      if (everything) break;
    }
    std::sort(found.begin(), found.end());
    for (int m = 0; m < k; ++m) edges.push_back({found[m].second, i});
  }
  return edges;
}

std::vector<Edge> full_graph(int n) {
  require(n >= 0, ErrorCode::invalid_input, "full_graph: negative particle count");
  std::vector<Edge> edges;
  edges.reserve(static_cast<size_t>(n) * (n > 0 ? n - 1 : 0));
  for (int r = 0; r < n; ++r) {
    for (int s = 0; s < n; ++s) {
      if (s != r) edges.push_back({s, r});
    }
  }
  return edges;
}

}  // namespace hgn::hier
