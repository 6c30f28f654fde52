#include "hgn/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "hgn/error.hpp"

namespace hgn::io {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; add byte swapping for this platform");

namespace {

constexpr char kTrajectoryMagic[4] = {'H', 'G', 'N', 'T'};
constexpr char kCheckpointMagic[4] = {'H', 'G', 'N', 'C'};

class Writer {
 public:
  void bytes(const void* p, size_t n) { buf_.append(static_cast<const char*>(p), n); }
  template <class T>
  void put(T v) {
    bytes(&v, sizeof(T));
  }
  void checksum() { put<std::uint64_t>(fnv1a(buf_.data(), buf_.size())); }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, const char* what) : buf_(buf), what_(what) {}
  void bytes(void* p, size_t n) {
    require(pos_ + n <= buf_.size(), ErrorCode::format, std::string(what_) + ": truncated file");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <class T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  size_t pos() const { return pos_; }
  size_t remaining() const { return buf_.size() - pos_; }
  // Verifies the trailing checksum over everything before it.
  void verify_checksum() {
    const size_t body = pos_;
    const auto stored = get<std::uint64_t>();
    require(stored == fnv1a(buf_.data(), body), ErrorCode::format,
            std::string(what_) + ": checksum mismatch");
    require(remaining() == 0, ErrorCode::format, std::string(what_) + ": trailing bytes");
  }

 private:
  const std::string& buf_;
  size_t pos_ = 0;
  const char* what_;
};

void check_magic(Reader& r, const char (&magic)[4], const char* what) {
  char m[4];
  r.bytes(m, 4);
  require(std::memcmp(m, magic, 4) == 0, ErrorCode::format, std::string(what) + ": bad magic");
}

json vec(const Eigen::Vector2d& v) { return json::array({v.x(), v.y()}); }

}  // namespace

std::uint64_t fnv1a(const void* data, size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string encode_trajectory(const sim::Trajectory& traj) {
  require(!traj.snapshots.empty(), ErrorCode::invalid_input, "trajectory: no snapshots");
  const sim::SimConfig& c = traj.config;
  const int n = traj.n_particles();
  const bool charges = traj.snapshots.front().has_charges();
  Writer w;
  w.bytes(kTrajectoryMagic, 4);
  w.put<std::uint32_t>(kTrajectoryVersion);
  w.put<std::uint32_t>(c.force_law == sim::ForceLaw::coulomb ? 1 : 0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(n));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(traj.snapshots.size()));
  w.put<std::int32_t>(c.n_base_steps);
  w.put<std::int32_t>(c.max_timestep_level);
  w.put<std::uint64_t>(traj.seed);
  for (double v : {c.G, c.k, c.epsilon, c.eta, c.dt_base, c.cell_size}) w.put<double>(v);
  w.put<std::uint32_t>(traj.status == sim::TrajectoryStatus::overflow ? 1 : 0);
  w.put<std::int32_t>(traj.failed_step);
  for (const sim::ParticleSystem& s : traj.snapshots) {
    require(s.size() == n && s.has_charges() == charges, ErrorCode::invalid_input,
            "trajectory: snapshots differ in particle count or charges");
    for (int i = 0; i < n; ++i) {
      w.put<double>(s.masses[i]);
      w.put<double>(s.positions(i, 0));
      w.put<double>(s.positions(i, 1));
      w.put<double>(s.velocities(i, 0));
      w.put<double>(s.velocities(i, 1));
      if (charges) w.put<double>(s.charges[i]);
    }
  }
  w.checksum();
  return w.take();
}

sim::Trajectory decode_trajectory(const std::string& bytes) {
  Reader r(bytes, "trajectory");
  check_magic(r, kTrajectoryMagic, "trajectory");
  const auto version = r.get<std::uint32_t>();
  require(version == kTrajectoryVersion, ErrorCode::version_mismatch,
          "trajectory: unsupported format version " + std::to_string(version));
  sim::Trajectory t;
  const auto law = r.get<std::uint32_t>();
  require(law <= 1, ErrorCode::format, "trajectory: unknown force law tag");
  t.config.force_law = law == 1 ? sim::ForceLaw::coulomb : sim::ForceLaw::gravity;
  const auto n = r.get<std::uint32_t>();
  const auto snapshots = r.get<std::uint32_t>();
  t.config.n_base_steps = r.get<std::int32_t>();
  t.config.max_timestep_level = r.get<std::int32_t>();
  t.seed = r.get<std::uint64_t>();
  for (double* v : {&t.config.G, &t.config.k, &t.config.epsilon, &t.config.eta, &t.config.dt_base,
                    &t.config.cell_size}) {
    *v = r.get<double>();
  }
  t.status = r.get<std::uint32_t>() ? sim::TrajectoryStatus::overflow : sim::TrajectoryStatus::complete;
  t.failed_step = r.get<std::int32_t>();
  const bool charges = law == 1;
  const size_t per = charges ? 6 : 5;
  require(r.remaining() == static_cast<size_t>(snapshots) * n * per * 8 + 8, ErrorCode::format,
          "trajectory: size does not match the header");
  t.snapshots.reserve(snapshots);
  for (std::uint32_t s = 0; s < snapshots; ++s) {
    sim::ParticleSystem p;
    p.cell_size = t.config.cell_size;
    p.masses.resize(n);
    p.positions.resize(n, 2);
    p.velocities.resize(n, 2);
    if (charges) p.charges.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      p.masses[i] = r.get<double>();
      p.positions(i, 0) = r.get<double>();
      p.positions(i, 1) = r.get<double>();
      p.velocities(i, 0) = r.get<double>();
      p.velocities(i, 1) = r.get<double>();
      if (charges) p.charges[i] = r.get<double>();
    }
    t.snapshots.push_back(std::move(p));
  }
  r.verify_checksum();
  return t;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  require(static_cast<bool>(out), ErrorCode::io, "write failed for '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_trajectory(const sim::Trajectory& traj, const fs::path& path) {
  write_text(path, encode_trajectory(traj));
}

sim::Trajectory load_trajectory(const fs::path& path) { return decode_trajectory(read_text(path)); }

void write_trajectory_csv(const sim::Trajectory& traj, std::ostream& out) {
  const bool charges = !traj.snapshots.empty() && traj.snapshots.front().has_charges();
  out << "step,particle,m,x,y,vx,vy" << (charges ? ",c" : "") << '\n';
  out << std::setprecision(17);
  for (size_t s = 0; s < traj.snapshots.size(); ++s) {
    const sim::ParticleSystem& p = traj.snapshots[s];
    for (int i = 0; i < p.size(); ++i) {
      out << s << ',' << i << ',' << p.masses[i] << ',' << p.positions(i, 0) << ','
          << p.positions(i, 1) << ',' << p.velocities(i, 0) << ',' << p.velocities(i, 1);
      if (charges) out << ',' << p.charges[i];
      out << '\n';
    }
  }
}

fs::path trajectory_path(const fs::path& root, const std::string& split, int index) {
  std::ostringstream name;
  name << "traj_" << std::setw(5) << std::setfill('0') << index << ".bin";
  return root / split / name.str();
}

std::vector<sim::Trajectory> load_trajectories(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::io, "'" + dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".bin") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<sim::Trajectory> out;
  for (const fs::path& f : files) out.push_back(load_trajectory(f));
  return out;
}

json model_spec_to_json(const models::ModelSpec& spec) {
  const models::Widths& w = spec.widths;
  return {{"variant", std::string(models::to_string(spec.variant))},
          {"graph",
           {{"type", std::string(models::to_string(spec.graph.kind))},
            {"k", spec.graph.k},
            {"depth", spec.graph.depth},
            {"periodic", spec.graph.periodic}}},
          {"charges", spec.charges},
          {"activation", std::string(gn::to_string(spec.activation))},
          {"widths",
           {{"edge", w.edge},
            {"node", w.node},
            {"global", w.global},
            {"up_particle", w.up_particle},
            {"up_cell", w.up_cell},
            {"cell_cell", w.cell_cell},
            {"cell_parent", w.cell_parent},
            {"cell_update", w.cell_update},
            {"cell_particle", w.cell_particle}}}};
}

models::ModelSpec model_spec_from_json(const json& j) {
  try {
    models::ModelSpec spec;
    spec.variant = models::parse_variant(j.at("variant").get<std::string>());
    const json& g = j.at("graph");
    spec.graph.kind = models::parse_graph_kind(g.at("type").get<std::string>());
    spec.graph.k = g.at("k").get<int>();
    spec.graph.depth = g.at("depth").get<int>();
    spec.graph.periodic = g.at("periodic").get<bool>();
    spec.charges = j.at("charges").get<bool>();
    spec.activation = gn::parse_activation(j.at("activation").get<std::string>());
    const json& w = j.at("widths");
    models::Widths& out = spec.widths;
    out.edge = w.at("edge").get<std::vector<int>>();
    out.node = w.at("node").get<std::vector<int>>();
    out.global = w.at("global").get<std::vector<int>>();
    out.up_particle = w.at("up_particle").get<std::vector<int>>();
    out.up_cell = w.at("up_cell").get<std::vector<int>>();
    out.cell_cell = w.at("cell_cell").get<std::vector<int>>();
    out.cell_parent = w.at("cell_parent").get<std::vector<int>>();
    out.cell_update = w.at("cell_update").get<std::vector<int>>();
    out.cell_particle = w.at("cell_particle").get<std::vector<int>>();
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    fail(ErrorCode::format, std::string("model spec: ") + e.what());
  }
}

json normalization_to_json(const models::Normalization& n) {
  return {{"length", n.length},   {"velocity", n.velocity}, {"mass", n.mass},
          {"charge", n.charge},   {"dt", n.dt},             {"delta_q", n.delta_q},
          {"delta_v", n.delta_v}, {"energy", n.energy}};
}

models::Normalization normalization_from_json(const json& j) {
  try {
    models::Normalization n;
    n.length = j.at("length").get<double>();
    n.velocity = j.at("velocity").get<double>();
    n.mass = j.at("mass").get<double>();
    n.charge = j.at("charge").get<double>();
    n.dt = j.at("dt").get<double>();
    n.delta_q = j.at("delta_q").get<double>();
    n.delta_v = j.at("delta_v").get<double>();
    n.energy = j.at("energy").get<double>();
    return n;
  } catch (const json::exception& e) {
    fail(ErrorCode::format, std::string("normalization: ") + e.what());
  }
}

void save_checkpoint(const models::Model& model, const fs::path& path) {
  const gn::ParamStore& params = model.params();
  json tensors = json::array();
  for (size_t i = 0; i < params.size(); ++i) {
    tensors.push_back({{"name", params.name(i)},
                       {"rows", params.var(i).rows()},
                       {"cols", params.var(i).cols()}});
  }
  const json manifest = {{"spec", model_spec_to_json(model.spec())},
                         {"normalization", normalization_to_json(model.norm())},
                         {"tensors", tensors}};
  const std::string text = manifest.dump();
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(text.size());
  w.bytes(text.data(), text.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const Matrix& m = params.var(i).value();  // row-major storage
    w.bytes(m.data(), static_cast<size_t>(m.size()) * sizeof(double));
  }
  w.checksum();
  write_text(path, w.take());
}

models::Model load_checkpoint(const fs::path& path) {
  const std::string bytes = read_text(path);
  Reader r(bytes, "checkpoint");
  check_magic(r, kCheckpointMagic, "checkpoint");
  const auto version = r.get<std::uint32_t>();
  require(version == kCheckpointVersion, ErrorCode::version_mismatch,
          "checkpoint: unsupported format version " + std::to_string(version));
  const auto len = r.get<std::uint64_t>();
  require(len <= r.remaining(), ErrorCode::format, "checkpoint: truncated manifest");
  std::string text(len, '\0');
  r.bytes(text.data(), len);
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::format, std::string("checkpoint manifest: ") + e.what());
  }
  models::Model model(model_spec_from_json(manifest.at("spec")), 0,
                      normalization_from_json(manifest.at("normalization")));
  gn::ParamStore& params = model.params();
  const json& tensors = manifest.at("tensors");
  require(tensors.size() == params.size(), ErrorCode::format,
          "checkpoint: tensor count does not match the model");
  for (size_t i = 0; i < params.size(); ++i) {
    const json& t = tensors[i];
    Matrix& m = params.var(i).mutable_value();
    require(t.at("name").get<std::string>() == params.name(i) &&
                t.at("rows").get<Eigen::Index>() == m.rows() &&
                t.at("cols").get<Eigen::Index>() == m.cols(),
            ErrorCode::format, "checkpoint: tensor " + params.name(i) + " does not match the model");
    r.bytes(m.data(), static_cast<size_t>(m.size()) * sizeof(double));
  }
  r.verify_checksum();
  return model;
}

json graph_to_json(const hier::HierGraph& g) {
  json levels = json::array();
  for (size_t li = 0; li < g.cells_by_level.size(); ++li) {
    json cells = json::array();
    for (size_t c = 0; c < g.cells_by_level[li].size(); ++c) {
      const hier::Cell& cell = g.cells_by_level[li][c];
      cells.push_back({{"id", c},
                       {"level", cell.level},
                       {"grid_index", {cell.ix, cell.iy}},
                       {"total_mass", cell.total_mass},
                       {"com_position", vec(cell.com_position)},
                       {"com_velocity", vec(cell.com_velocity)},
                       {"total_charge", cell.total_charge},
                       {"parent", cell.parent},
                       {"children", cell.children}});
    }
    json near = json::array();
    for (const hier::Edge& e : g.near_edges_by_level[li]) near.push_back({e.sender, e.receiver});
    levels.push_back({{"level", li + 1}, {"grid", g.grid_size(static_cast<int>(li) + 1)},
                      {"cells", cells}, {"near_edges", near}});
  }
  json particle_edges = json::array();
  for (const hier::Edge& e : g.particle_edges) particle_edges.push_back({e.sender, e.receiver});
  return {{"version", kGraphDumpVersion},
          {"depth", g.depth},
          {"periodic", g.periodic},
          {"cell_size", g.cell_size},
          {"n_particles", g.n_particles},
          {"levels", levels},
          {"particle_edges", particle_edges},
          {"cell_of_particle", g.cell_of_particle}};
}

void write_loss_csv(const std::vector<train::LossPoint>& curve, std::ostream& out) {
  out << "step,loss,lr\n" << std::setprecision(10);
  for (const train::LossPoint& p : curve) out << p.step << ',' << p.loss << ',' << p.lr << '\n';
}

void write_eval_csv(const train::EvalReport& report, std::ostream& out) {
  out << "trajectory";
  for (int tau : report.taus) out << ",rollout_rmse_" << tau;
  for (int tau : report.taus) out << ",energy_error_" << tau;
  out << ",diverged_at\n" << std::setprecision(10);
  for (const train::TrajectoryMetrics& row : report.rows) {
    out << row.index;
    for (double v : row.rmse) out << ',' << v;
    for (double v : row.energy_error) out << ',' << v;
    out << ',' << row.diverged_at << '\n';
  }
  out << "mean";
  for (double v : report.rmse) out << ',' << v;
  for (const auto& e : report.energy) out << ',' << e.mean;
  out << ",\nmean_absolute";
  for (size_t k = 0; k < report.rmse.size(); ++k) out << ',';
  for (const auto& e : report.energy) out << ',' << e.mean_absolute;
  out << ",\n";
}

json eval_to_json(const train::EvalReport& report) {
  // JSON has no infinity or NaN; those become null.
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json rows = json::array();
  for (const train::TrajectoryMetrics& row : report.rows) {
    json r = {{"trajectory", row.index}, {"diverged_at", row.diverged_at}};
    for (size_t k = 0; k < report.taus.size(); ++k) {
      const std::string t = std::to_string(report.taus[k]);
      r["rollout_rmse_" + t] = num(row.rmse[k]);
      r["energy_error_" + t] = num(row.energy_error[k]);
    }
    rows.push_back(r);
  }
  json summary = json::object();
  for (size_t k = 0; k < report.taus.size(); ++k) {
    const std::string t = std::to_string(report.taus[k]);
    summary["rollout_rmse_" + t] = num(report.rmse[k]);
    summary["energy_error_" + t] = num(report.energy[k].mean);
    summary["energy_error_abs_" + t] = num(report.energy[k].mean_absolute);
  }
  return {{"model", report.model},
          {"seed", report.seed},
          {"config_hash", report.config_hash},
          {"taus", report.taus},
          {"seconds", report.seconds},
          {"graph_builds", report.graph_builds},
          {"summary", summary},
          {"trajectories", rows}};
}

void write_bench_csv(const std::vector<train::BenchRow>& rows, std::ostream& out) {
  out << "n,nodes,edges,build_seconds,forward_seconds,status\n" << std::setprecision(8);
  for (const train::BenchRow& r : rows) {
    out << r.n << ',' << r.nodes << ',' << r.edges << ',' << r.build_seconds << ','
        << r.forward_seconds << ',' << r.status << '\n';
  }
}

}  // namespace hgn::io
