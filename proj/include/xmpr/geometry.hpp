#ifndef XMPR_GEOMETRY_HPP
#define XMPR_GEOMETRY_HPP

#include <string>

#include "xmpr/tensor.hpp"

namespace xmpr::geo {

enum class FrameKind { World, Camera, Lidar };

/// Coordinate frame tag: which sensor/frame and which trajectory timestep.
struct Frame {
  FrameKind kind = FrameKind::World;
  int time = -1;

  bool operator==(const Frame&) const = default;
};

std::string frame_string(const Frame& f);

struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }
  static Pose from_matrix(const Eigen::Matrix4d& m);

  Eigen::Matrix4d matrix() const;
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }
  /// Orthonormal with det +1 within tol.
  bool valid(double tol = 1e-9) const;
};

Pose compose(const Pose& a, const Pose& b);  // acts as a after b: (a*b)(p) = a(b(p))
Pose invert(const Pose& a);
Pose yaw_rotation(double theta);  // about +z, radians

inline double pose_distance(const Pose& a, const Pose& b) {
  return (a.translation - b.translation).norm();
}

struct PointCloud {
  Eigen::Matrix<double, Eigen::Dynamic, 3> points;  // N x 3, meters
  Eigen::VectorXd intensity;                        // empty or length N
  Frame frame;

  Index size() const { return points.rows(); }
};

PointCloud transform_cloud(const Pose& t, const PointCloud& cloud, Frame new_frame);

struct CameraModel {
  double fx = 1.0, fy = 1.0;  // pixels
  double cx = 0.5, cy = 0.5;  // pixels
  Index width = 1, height = 1;

  void validate() const;
};

/// Azimuth convention: column 0 at -180 degrees, increasing counterclockwise
/// (toward +y); elevation row 0 at fov_up, increasing downward.
struct SphericalGrid {
  Index rows = 48, cols = 900;
  double fov_up_deg = 3.0, fov_down_deg = -25.0;

  void validate() const;
  double azimuth_resolution() const;  // radians per column
};

struct RangeImage {
  SphericalGrid grid;
  Tensor values;  // rows x cols, meters, 0 = empty cell

  RangeImage() : values(Tensor::zeros({48, 900})) {}
  explicit RangeImage(SphericalGrid g)
      : grid(g), values(Tensor::zeros({g.rows, g.cols})) {}

  double& at(Index r, Index c) { return values.at({r, c}); }
  double at(Index r, Index c) const { return values.at({r, c}); }
};

/// P (camera frame t1) -> T_LC * inv(T_WC_t2) * T_WC_t1 * P, tagged LiDAR t2.
PointCloud reproject_to_lidar(const PointCloud& points_c_t1, const Pose& t_wc_t1,
                              const Pose& t_wc_t2, const Pose& t_lc, int t1, int t2);

/// Pinhole projection; z must be > 0.
void pinhole_project(const Eigen::Vector3d& p, const CameraModel& cam, double& u,
                     double& v);

/// Keep points with z > z_min that project strictly inside the image.
PointCloud fov_filter(const PointCloud& points_c, const CameraModel& cam,
                      double z_min = 1e-6);

/// Bin points by azimuth/elevation, keeping the minimum range per cell.
RangeImage spherical_project(const PointCloud& points_l, const SphericalGrid& grid);

/// Column/row of one point; returns false when elevation is out of the fov.
bool spherical_bin(const Eigen::Vector3d& p, const SphericalGrid& grid, Index& row,
                   Index& col, double& range);

/// Little-endian float32 container: 8-float header (magic, rows, cols, fov_up,
/// fov_down, 3 zeros) then row-major cell values.
void save_range_image(const std::string& path, const RangeImage& img);
RangeImage load_range_image(const std::string& path);

}  // namespace xmpr::geo

#endif  // XMPR_GEOMETRY_HPP
