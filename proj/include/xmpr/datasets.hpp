#ifndef XMPR_DATASETS_HPP
#define XMPR_DATASETS_HPP

#include <string>
#include <vector>

#include "xmpr/geometry.hpp"
#include "xmpr/rng.hpp"
#include "xmpr/tensor.hpp"

namespace xmpr::data {

/// One synchronized capture: LiDAR cloud in its lidar frame, camera
/// attribute image (H x W x c, empty when no camera data), camera pose and
/// camera-to-lidar extrinsics.
struct FrameRecord {
  int frame_id = 0;
  int time = 0;
  geo::PointCloud cloud;
  Tensor image;
  geo::Pose t_wc;
  geo::Pose t_lc;
};

// ---------------------------------------------------------------------------
// KITTI-format ingestion (velodyne/*.bin, poses.txt, calib.txt)

/// Little-endian float32 (x, y, z, intensity) quadruples.
geo::PointCloud load_cloud_bin(const std::string& path, int time = -1);
void save_cloud_bin(const std::string& path, const geo::PointCloud& cloud);

/// One row per frame: a row-major 3x4 rigid transform (camera to world).
std::vector<geo::Pose> load_poses(const std::string& path);
void save_poses(const std::string& path, const std::vector<geo::Pose>& poses);

/// "Tr:" line holds the lidar-to-camera transform; returned inverted, as
/// camera-to-lidar.
geo::Pose load_calib(const std::string& path);
void save_calib(const std::string& path, const geo::Pose& t_lc);

std::vector<FrameRecord> load_kitti_sequence(const std::string& dir);
void save_kitti_sequence(const std::string& dir,
                         const std::vector<FrameRecord>& frames);

// ---------------------------------------------------------------------------
// Synthetic world: seeded config, regenerated on demand, never stored

struct WorldConfig {
  std::uint64_t seed = 1;
  Index objects = 40;       // boxes + cylinders, ground plane not counted
  Index laps = 2;           // the loop is traversed this many times
  Index frames_per_lap = 25;
  double loop_radius = 12.0;  // meters
  double lap_offset = 0.5;    // radial shift per extra lap; keeps revisits < 3 m
  double sensor_height = 1.7;
  double max_range = 120.0;
  bool ground = true;
  geo::SphericalGrid grid;
  geo::CameraModel camera{96.0, 96.0, 48.0, 32.0, 96, 64};

  Index frames() const { return laps * frames_per_lap; }
  void validate() const;
};

WorldConfig load_world_config(const std::string& path);
void save_world_config(const std::string& path, const WorldConfig& cfg);

/// Attribute image channel layout: 0 range, then one-hot surface class.
enum SurfaceClass : int { kGround = 0, kBox = 1, kCylinder = 2 };
constexpr Index kImageChannels = 4;

struct Box {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half = Eigen::Vector3d::Ones();
};

struct Cylinder {
  double x = 0.0, y = 0.0;
  double radius = 0.5;
  double z0 = 0.0, z1 = 3.0;
};

struct SyntheticWorld {
  WorldConfig config;
  std::vector<Box> boxes;
  std::vector<Cylinder> cylinders;
  std::vector<geo::Pose> trajectory;  // T_WC per frame
};

SyntheticWorld generate_world(const WorldConfig& cfg);

/// Nearest surface hit along a world-frame ray, or a miss beyond max_range.
/// Fills the distance and the surface class of the hit.
bool cast_ray(const SyntheticWorld& world, const Eigen::Vector3d& origin,
              const Eigen::Vector3d& dir, double& t, int& cls);

/// LiDAR rays at the exact spherical-grid bin centers; the range image of
/// the returned cloud reproduces *range_out cell for cell. Camera renders
/// per-pixel nearest-point attributes. Point intensity = surface class.
FrameRecord simulate_sensors(const SyntheticWorld& world, Index frame,
                             geo::RangeImage* range_out = nullptr);

}  // namespace xmpr::data

#endif  // XMPR_DATASETS_HPP
