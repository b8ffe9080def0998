#include "xmpr/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;

namespace xmpr::data {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDeg = kPi / 180.0;

std::uint32_t f32_bits(float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  return u;
}

float bits_f32(std::uint32_t u) {
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

void put_f32(std::ostream& os, float f) {
  const std::uint32_t v = f32_bits(f);
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

float get_f32(const unsigned char* b) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return bits_f32(v);
}

/// KITTI-style camera axes expressed in lidar axes: cam z is lidar x
/// (forward), cam x is -y (right), cam y is -z (down).
geo::Pose synthetic_extrinsics() {
  geo::Pose t_lc;
  t_lc.rotation << 0, 0, 1, -1, 0, 0, 0, -1, 0;
  return t_lc;
}

void require_pose(const geo::Pose& p, const std::string& what) {
  if (!p.valid(1e-6))
    throw std::invalid_argument(what + ": rotation is not orthonormal");
}

}  // namespace

geo::PointCloud load_cloud_bin(const std::string& path, int time) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cloud: cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() % 16 != 0)
    throw std::runtime_error("cloud: '" + path + "' truncated at byte offset " +
                             std::to_string(16 * (bytes.size() / 16)));
  const Index n = static_cast<Index>(bytes.size() / 16);
  geo::PointCloud cloud;
  cloud.frame = {geo::FrameKind::Lidar, time};
  cloud.points.resize(n, 3);
  cloud.intensity.resize(n);
  for (Index i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + 16 * i;
    cloud.points(i, 0) = static_cast<double>(get_f32(rec));
    cloud.points(i, 1) = static_cast<double>(get_f32(rec + 4));
    cloud.points(i, 2) = static_cast<double>(get_f32(rec + 8));
    cloud.intensity[i] = static_cast<double>(get_f32(rec + 12));
  }
  return cloud;
}

void save_cloud_bin(const std::string& path, const geo::PointCloud& cloud) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cloud: cannot write '" + path + "'");
  for (Index i = 0; i < cloud.size(); ++i) {
    put_f32(os, static_cast<float>(cloud.points(i, 0)));
    put_f32(os, static_cast<float>(cloud.points(i, 1)));
    put_f32(os, static_cast<float>(cloud.points(i, 2)));
    put_f32(os, cloud.intensity.size() > 0 ? static_cast<float>(cloud.intensity[i])
                                           : 0.0f);
  }
  if (!os) throw std::runtime_error("cloud: write failed for '" + path + "'");
}

std::vector<geo::Pose> load_poses(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("poses: cannot open '" + path + "'");
  std::vector<geo::Pose> poses;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream row(line);
    double v[12];
    for (int k = 0; k < 12; ++k)
      if (!(row >> v[k]))
        throw std::runtime_error("poses: frame " + std::to_string(poses.size()) +
                                 " has fewer than 12 values");
    double extra;
    if (row >> extra)
      throw std::runtime_error("poses: frame " + std::to_string(poses.size()) +
                               " has more than 12 values");
    geo::Pose p;
    p.rotation << v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10];
    p.translation << v[3], v[7], v[11];
    if (!p.valid(1e-6))
      throw std::runtime_error("poses: frame " + std::to_string(poses.size()) +
                               " rotation is not orthonormal");
    poses.push_back(p);
  }
  return poses;
}

void save_poses(const std::string& path, const std::vector<geo::Pose>& poses) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("poses: cannot write '" + path + "'");
  os.precision(17);
  for (const geo::Pose& p : poses) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) os << p.rotation(r, c) << ' ';
      os << p.translation[r] << (r == 2 ? '\n' : ' ');
    }
  }
}

geo::Pose load_calib(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("calib: cannot open '" + path + "'");
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream row(line);
    std::string key;
    if (!(row >> key) || key != "Tr:") continue;
    double v[12];
    for (int k = 0; k < 12; ++k)
      if (!(row >> v[k]))
        throw std::runtime_error("calib: Tr line has fewer than 12 values");
    geo::Pose t_cl;  // lidar to camera, as stored by KITTI
    t_cl.rotation << v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10];
    t_cl.translation << v[3], v[7], v[11];
    require_pose(t_cl, "calib");
    return geo::invert(t_cl);
  }
  throw std::runtime_error("calib: no Tr line in '" + path + "'");
}

void save_calib(const std::string& path, const geo::Pose& t_lc) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("calib: cannot write '" + path + "'");
  os.precision(17);
  const geo::Pose t_cl = geo::invert(t_lc);
  os << "Tr:";
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) os << ' ' << t_cl.rotation(r, c);
    os << ' ' << t_cl.translation[r];
  }
  os << '\n';
}

std::vector<FrameRecord> load_kitti_sequence(const std::string& dir) {
  const fs::path root(dir);
  std::vector<fs::path> bins;
  for (const auto& entry : fs::directory_iterator(root / "velodyne"))
    if (entry.path().extension() == ".bin") bins.push_back(entry.path());
  std::sort(bins.begin(), bins.end());

  const std::vector<geo::Pose> poses = load_poses((root / "poses.txt").string());
  if (poses.size() != bins.size())
    throw std::runtime_error("sequence: " + std::to_string(bins.size()) +
                             " clouds but " + std::to_string(poses.size()) + " poses");
  const geo::Pose t_lc = load_calib((root / "calib.txt").string());

  std::vector<FrameRecord> frames;
  frames.reserve(bins.size());
  for (std::size_t i = 0; i < bins.size(); ++i) {
    FrameRecord rec;
    rec.frame_id = static_cast<int>(i);
    rec.time = static_cast<int>(i);
    rec.cloud = load_cloud_bin(bins[i].string(), rec.time);
    rec.t_wc = poses[i];
    rec.t_lc = t_lc;
    frames.push_back(std::move(rec));
  }
  return frames;
}

void save_kitti_sequence(const std::string& dir,
                         const std::vector<FrameRecord>& frames) {
  if (frames.empty()) throw std::invalid_argument("sequence: nothing to save");
  const fs::path root(dir);
  fs::create_directories(root / "velodyne");
  std::vector<geo::Pose> poses;
  poses.reserve(frames.size());
  for (const FrameRecord& rec : frames) {
    char name[16];
    std::snprintf(name, sizeof(name), "%06d.bin", rec.frame_id);
    save_cloud_bin((root / "velodyne" / name).string(), rec.cloud);
    poses.push_back(rec.t_wc);
  }
  save_poses((root / "poses.txt").string(), poses);
  save_calib((root / "calib.txt").string(), frames.front().t_lc);
}

void WorldConfig::validate() const {
  if (objects < 0) throw std::invalid_argument("world: negative object count");
  if (laps < 1 || frames_per_lap < 2)
    throw std::invalid_argument("world: need laps >= 1 and frames_per_lap >= 2");
  if (loop_radius < 6.0)
    throw std::invalid_argument("world: loop_radius must be at least 6 m");
  if (lap_offset < 0.0 || lap_offset >= 3.0)
    throw std::invalid_argument("world: lap_offset must be in [0, 3) for revisits");
  if (sensor_height <= 0.0) throw std::invalid_argument("world: sensor underground");
  if (max_range <= loop_radius)
    throw std::invalid_argument("world: max_range too small for the loop");
  grid.validate();
  camera.validate();
}

WorldConfig load_world_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("world: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("world: '" + path + "' is not valid JSON: " + e.what());
  }
  WorldConfig cfg;
  cfg.seed = j.value("seed", cfg.seed);
  cfg.objects = j.value("objects", cfg.objects);
  cfg.laps = j.value("laps", cfg.laps);
  cfg.frames_per_lap = j.value("frames_per_lap", cfg.frames_per_lap);
  cfg.loop_radius = j.value("loop_radius", cfg.loop_radius);
  cfg.lap_offset = j.value("lap_offset", cfg.lap_offset);
  cfg.sensor_height = j.value("sensor_height", cfg.sensor_height);
  cfg.max_range = j.value("max_range", cfg.max_range);
  cfg.ground = j.value("ground", cfg.ground);
  if (j.contains("grid")) {
    const auto& g = j["grid"];
    cfg.grid.rows = g.value("rows", cfg.grid.rows);
    cfg.grid.cols = g.value("cols", cfg.grid.cols);
    cfg.grid.fov_up_deg = g.value("fov_up", cfg.grid.fov_up_deg);
    cfg.grid.fov_down_deg = g.value("fov_down", cfg.grid.fov_down_deg);
  }
  if (j.contains("camera")) {
    const auto& c = j["camera"];
    cfg.camera.fx = c.value("fx", cfg.camera.fx);
    cfg.camera.fy = c.value("fy", cfg.camera.fy);
    cfg.camera.cx = c.value("cx", cfg.camera.cx);
    cfg.camera.cy = c.value("cy", cfg.camera.cy);
    cfg.camera.width = c.value("width", cfg.camera.width);
    cfg.camera.height = c.value("height", cfg.camera.height);
  }
  cfg.validate();
  return cfg;
}

void save_world_config(const std::string& path, const WorldConfig& cfg) {
  cfg.validate();
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["objects"] = cfg.objects;
  j["laps"] = cfg.laps;
  j["frames_per_lap"] = cfg.frames_per_lap;
  j["loop_radius"] = cfg.loop_radius;
  j["lap_offset"] = cfg.lap_offset;
  j["sensor_height"] = cfg.sensor_height;
  j["max_range"] = cfg.max_range;
  j["ground"] = cfg.ground;
  j["grid"] = {{"rows", cfg.grid.rows},
               {"cols", cfg.grid.cols},
               {"fov_up", cfg.grid.fov_up_deg},
               {"fov_down", cfg.grid.fov_down_deg}};
  j["camera"] = {{"fx", cfg.camera.fx},   {"fy", cfg.camera.fy},
                 {"cx", cfg.camera.cx},   {"cy", cfg.camera.cy},
                 {"width", cfg.camera.width}, {"height", cfg.camera.height}};
  std::ofstream os(path);
  if (!os) throw std::runtime_error("world: cannot write '" + path + "'");
  os << j.dump(2) << '\n';
}

SyntheticWorld generate_world(const WorldConfig& cfg) {
  cfg.validate();
  SyntheticWorld world;
  world.config = cfg;

  Rng rng(cfg.seed);
  const double band_out = cfg.loop_radius +
                          static_cast<double>(cfg.laps - 1) * cfg.lap_offset;
  for (Index k = 0; k < cfg.objects; ++k) {
    const double angle = rng.uniform(0.0, 2.0 * kPi);
    const bool inside = (k % 2) == 0;
    const double radial = inside ? rng.uniform(2.0, cfg.loop_radius - 2.0)
                                 : rng.uniform(band_out + 2.0, band_out + 10.0);
    const double x = radial * std::cos(angle), y = radial * std::sin(angle);
    if (k % 4 < 2) {
      Box b;
      b.half << rng.uniform(0.4, 1.2), rng.uniform(0.4, 1.2), rng.uniform(0.8, 2.0);
      b.center << x, y, b.half.z();
      world.boxes.push_back(b);
    } else {
      Cylinder c;
      c.x = x;
      c.y = y;
      c.radius = rng.uniform(0.3, 0.9);
      c.z0 = 0.0;
      c.z1 = rng.uniform(2.0, 5.0);
      world.cylinders.push_back(c);
    }
  }

  world.trajectory.reserve(static_cast<std::size_t>(cfg.frames()));
  for (Index f = 0; f < cfg.frames(); ++f) {
    const Index lap = f / cfg.frames_per_lap;
    const double theta = 2.0 * kPi * static_cast<double>(f % cfg.frames_per_lap) /
                         static_cast<double>(cfg.frames_per_lap);
    const double radius = cfg.loop_radius + static_cast<double>(lap) * cfg.lap_offset;
    geo::Pose pose;
    // camera: x right (radially out), y down, z forward (tangent, CCW)
    pose.rotation << std::cos(theta), 0.0, -std::sin(theta),
                     std::sin(theta), 0.0,  std::cos(theta),
                     0.0,            -1.0,  0.0;
    pose.translation << radius * std::cos(theta), radius * std::sin(theta),
        cfg.sensor_height;
    world.trajectory.push_back(pose);
  }
  return world;
}

bool cast_ray(const SyntheticWorld& world, const Eigen::Vector3d& origin,
              const Eigen::Vector3d& dir, double& t, int& cls) {
  constexpr double kTMin = 1e-6;
  double best = world.config.max_range;
  int best_cls = -1;

  if (world.config.ground && dir.z() < -1e-12) {
    const double tg = -origin.z() / dir.z();
    if (tg > kTMin && tg < best) {
      best = tg;
      best_cls = kGround;
    }
  }

  for (const Box& b : world.boxes) {
    double t0 = kTMin, t1 = best;
    bool miss = false;
    for (int axis = 0; axis < 3 && !miss; ++axis) {
      const double lo = b.center[axis] - b.half[axis];
      const double hi = b.center[axis] + b.half[axis];
      if (std::abs(dir[axis]) < 1e-12) {
        miss = origin[axis] < lo || origin[axis] > hi;
        continue;
      }
      double ta = (lo - origin[axis]) / dir[axis];
      double tb = (hi - origin[axis]) / dir[axis];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      miss = t0 > t1;
    }
    if (!miss && t0 > kTMin && t0 < best) {
      best = t0;
      best_cls = kBox;
    }
  }

  for (const Cylinder& c : world.cylinders) {
    const double ox = origin.x() - c.x, oy = origin.y() - c.y;
    const double a = dir.x() * dir.x() + dir.y() * dir.y();
    const double bq = 2.0 * (ox * dir.x() + oy * dir.y());
    const double cq = ox * ox + oy * oy - c.radius * c.radius;
    if (a > 1e-12) {
      const double disc = bq * bq - 4.0 * a * cq;
      if (disc >= 0.0) {
        const double sq = std::sqrt(disc);
        for (const double tc : {(-bq - sq) / (2.0 * a), (-bq + sq) / (2.0 * a)}) {
          if (tc <= kTMin || tc >= best) continue;
          const double z = origin.z() + tc * dir.z();
          if (z >= c.z0 && z <= c.z1) {
            best = tc;
            best_cls = kCylinder;
            break;
          }
        }
      }
    }
    if (std::abs(dir.z()) > 1e-12) {
      for (const double zcap : {c.z0, c.z1}) {
        const double tc = (zcap - origin.z()) / dir.z();
        if (tc <= kTMin || tc >= best) continue;
        const double x = ox + tc * dir.x(), y = oy + tc * dir.y();
        if (x * x + y * y <= c.radius * c.radius) {
          best = tc;
          best_cls = kCylinder;
        }
      }
    }
  }

  if (best_cls < 0) return false;
  t = best;
  cls = best_cls;
  return true;
}

FrameRecord simulate_sensors(const SyntheticWorld& world, Index frame,
                             geo::RangeImage* range_out) {
  if (frame < 0 || frame >= static_cast<Index>(world.trajectory.size()))
    throw std::invalid_argument("simulate: frame " + std::to_string(frame) +
                                " outside the trajectory");
  const WorldConfig& cfg = world.config;
  FrameRecord rec;
  rec.frame_id = static_cast<int>(frame);
  rec.time = static_cast<int>(frame);
  rec.t_wc = world.trajectory[static_cast<std::size_t>(frame)];
  rec.t_lc = synthetic_extrinsics();

  const geo::Pose t_wl = geo::compose(rec.t_wc, geo::invert(rec.t_lc));
  const geo::SphericalGrid& grid = cfg.grid;
  const double up = grid.fov_up_deg * kDeg, down = grid.fov_down_deg * kDeg;

  geo::RangeImage ranges(grid);
  std::vector<Eigen::Vector3d> pts;
  std::vector<double> classes;
  for (Index r = 0; r < grid.rows; ++r) {
    const double elev = up - (static_cast<double>(r) + 0.5) * (up - down) /
                                 static_cast<double>(grid.rows);
    for (Index c = 0; c < grid.cols; ++c) {
      const double az = -kPi + (static_cast<double>(c) + 0.5) * 2.0 * kPi /
                                   static_cast<double>(grid.cols);
      const Eigen::Vector3d u(std::cos(elev) * std::cos(az),
                              std::cos(elev) * std::sin(az), std::sin(elev));
      double t;
      int cls;
      if (!cast_ray(world, t_wl.translation, t_wl.rotation * u, t, cls)) continue;
      const Eigen::Vector3d p = t * u;  // lidar frame
      ranges.at(r, c) = p.norm();
      pts.push_back(p);
      classes.push_back(static_cast<double>(cls));
    }
  }

  if (range_out != nullptr) *range_out = std::move(ranges);

  rec.cloud.frame = {geo::FrameKind::Lidar, rec.time};
  rec.cloud.points.resize(static_cast<Index>(pts.size()), 3);
  rec.cloud.intensity.resize(static_cast<Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    rec.cloud.points.row(static_cast<Index>(i)) = pts[i];
    rec.cloud.intensity[static_cast<Index>(i)] = classes[i];
  }

  const geo::CameraModel& cam = cfg.camera;
  rec.image = Tensor::zeros({cam.height, cam.width, kImageChannels});
  const geo::Pose t_cl = geo::invert(rec.t_lc);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Eigen::Vector3d q = t_cl.apply(pts[i]);
    if (!(q.z() > 1e-6)) continue;
    double u, v;
    geo::pinhole_project(q, cam, u, v);
    if (!(u >= 0.0 && u < static_cast<double>(cam.width) && v >= 0.0 &&
          v < static_cast<double>(cam.height)))
      continue;
    const Index pr = static_cast<Index>(std::floor(v));
    const Index pc = static_cast<Index>(std::floor(u));
    const double depth = q.norm();
    double& slot = rec.image.at({pr, pc, 0});
    if (slot != 0.0 && slot <= depth) continue;
    slot = depth;
    for (Index ch = 1; ch < kImageChannels; ++ch) rec.image.at({pr, pc, ch}) = 0.0;
    rec.image.at({pr, pc, 1 + static_cast<Index>(classes[i])}) = 1.0;
  }
  return rec;
}

}  // namespace xmpr::data
