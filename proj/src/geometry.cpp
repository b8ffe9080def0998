#include "xmpr/geometry.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace xmpr::geo {

namespace {
constexpr double kPi = std::numbers::pi;
constexpr double kDeg = kPi / 180.0;
}  // namespace

std::string frame_string(const Frame& f) {
  const char* kind = f.kind == FrameKind::World    ? "world"
                     : f.kind == FrameKind::Camera ? "camera"
                                                   : "lidar";
  return std::string(kind) + "@" + std::to_string(f.time);
}

Pose Pose::from_matrix(const Eigen::Matrix4d& m) {
  Pose p;
  p.rotation = m.topLeftCorner<3, 3>();
  p.translation = m.topRightCorner<3, 1>();
  return p;
}

Eigen::Matrix4d Pose::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

bool Pose::valid(double tol) const {
  const Eigen::Matrix3d rtr = rotation.transpose() * rotation;
  return (rtr - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(rotation.determinant() - 1.0) <= tol;
}

Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

Pose invert(const Pose& a) {
  Pose out;
  out.rotation = a.rotation.transpose();
  out.translation = -(a.rotation.transpose() * a.translation);
  return out;
}

Pose yaw_rotation(double theta) {
  Pose p;
  p.rotation = Eigen::AngleAxisd(theta, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  return p;
}

PointCloud transform_cloud(const Pose& t, const PointCloud& cloud, Frame new_frame) {
  PointCloud out;
  out.points = (cloud.points * t.rotation.transpose()).rowwise() +
               t.translation.transpose();
  out.intensity = cloud.intensity;
  out.frame = new_frame;
  return out;
}

void CameraModel::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0))
    throw std::invalid_argument("camera: focal lengths must be positive");
  if (!(cx > 0.0 && cx < static_cast<double>(width)) ||
      !(cy > 0.0 && cy < static_cast<double>(height)))
    throw std::invalid_argument("camera: principal point outside the image");
}

void SphericalGrid::validate() const {
  if (rows < 1 || cols < 1)
    throw std::invalid_argument("spherical grid: rows and cols must be >= 1");
  if (!(fov_up_deg > fov_down_deg))
    throw std::invalid_argument("spherical grid: fov_up must exceed fov_down");
}

double SphericalGrid::azimuth_resolution() const {
  return 2.0 * kPi / static_cast<double>(cols);
}

PointCloud reproject_to_lidar(const PointCloud& points_c_t1, const Pose& t_wc_t1,
                              const Pose& t_wc_t2, const Pose& t_lc, int t1, int t2) {
  const Frame expect{FrameKind::Camera, t1};
  if (!(points_c_t1.frame == expect))
    throw std::invalid_argument("reproject_to_lidar: cloud tagged " +
                                frame_string(points_c_t1.frame) + ", expected " +
                                frame_string(expect));
  const Pose chain = compose(t_lc, compose(invert(t_wc_t2), t_wc_t1));
  return transform_cloud(chain, points_c_t1, Frame{FrameKind::Lidar, t2});
}

void pinhole_project(const Eigen::Vector3d& p, const CameraModel& cam, double& u,
                     double& v) {
  if (!(p.z() > 0.0))
    throw std::invalid_argument("pinhole_project: z must be positive, got " +
                                std::to_string(p.z()));
  u = cam.fx * p.x() / p.z() + cam.cx;
  v = cam.fy * p.y() / p.z() + cam.cy;
}

PointCloud fov_filter(const PointCloud& points_c, const CameraModel& cam, double z_min) {
  cam.validate();
  std::vector<Index> keep;
  keep.reserve(static_cast<std::size_t>(points_c.size()));
  for (Index i = 0; i < points_c.size(); ++i) {
    const Eigen::Vector3d p = points_c.points.row(i);
    if (!(p.z() > z_min)) continue;
    double u, v;
    pinhole_project(p, cam, u, v);
    if (u >= 0.0 && u < static_cast<double>(cam.width) && v >= 0.0 &&
        v < static_cast<double>(cam.height))
      keep.push_back(i);
  }
  PointCloud out;
  out.frame = points_c.frame;
  out.points.resize(static_cast<Index>(keep.size()), 3);
  if (points_c.intensity.size() > 0)
    out.intensity.resize(static_cast<Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.points.row(static_cast<Index>(k)) = points_c.points.row(keep[k]);
    if (points_c.intensity.size() > 0)
      out.intensity[static_cast<Index>(k)] = points_c.intensity[keep[k]];
  }
  return out;
}

bool spherical_bin(const Eigen::Vector3d& p, const SphericalGrid& grid, Index& row,
                   Index& col, double& range) {
  range = p.norm();
  if (range < 1e-9) return false;
  const double az = std::atan2(p.y(), p.x());
  const double elev = std::asin(p.z() / range);
  double colf = (az + kPi) / (2.0 * kPi) * static_cast<double>(grid.cols);
  col = static_cast<Index>(std::floor(colf));
  if (col >= grid.cols) col -= grid.cols;  // az == +pi wraps to column 0
  if (col < 0) col = 0;
  const double up = grid.fov_up_deg * kDeg, down = grid.fov_down_deg * kDeg;
  const double rowf = (up - elev) / (up - down) * static_cast<double>(grid.rows);
  row = static_cast<Index>(std::floor(rowf));
  return row >= 0 && row < grid.rows;
}

RangeImage spherical_project(const PointCloud& points_l, const SphericalGrid& grid) {
  grid.validate();
  RangeImage img(grid);
  for (Index i = 0; i < points_l.size(); ++i) {
    Index r, c;
    double range;
    if (!spherical_bin(points_l.points.row(i), grid, r, c, range)) continue;
    double& cell = img.at(r, c);
    if (cell == 0.0 || range < cell) cell = range;
  }
  return img;
}

namespace {

constexpr float kRangeMagic = 21065.0f;  // 'R'<<8 | 'I'

void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

float get_f32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void save_range_image(const std::string& path, const RangeImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("range image: cannot open '" + path + "' for writing");
  put_f32(os, kRangeMagic);
  put_f32(os, static_cast<float>(img.grid.rows));
  put_f32(os, static_cast<float>(img.grid.cols));
  put_f32(os, static_cast<float>(img.grid.fov_up_deg));
  put_f32(os, static_cast<float>(img.grid.fov_down_deg));
  for (int i = 0; i < 3; ++i) put_f32(os, 0.0f);
  for (Index i = 0; i < img.values.numel(); ++i)
    put_f32(os, static_cast<float>(img.values.data()[i]));
  if (!os) throw std::runtime_error("range image: write to '" + path + "' failed");
}

RangeImage load_range_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("range image: cannot open '" + path + "'");
  if (get_f32(is) != kRangeMagic)
    throw std::runtime_error("range image: '" + path + "' has a bad magic header");
  SphericalGrid grid;
  grid.rows = static_cast<Index>(get_f32(is));
  grid.cols = static_cast<Index>(get_f32(is));
  grid.fov_up_deg = static_cast<double>(get_f32(is));
  grid.fov_down_deg = static_cast<double>(get_f32(is));
  for (int i = 0; i < 3; ++i) get_f32(is);
  grid.validate();
  RangeImage img(grid);
  for (Index i = 0; i < img.values.numel(); ++i)
    img.values.data()[i] = static_cast<double>(get_f32(is));
  if (!is) throw std::runtime_error("range image: '" + path + "' truncated");
  return img;
}

}  // namespace xmpr::geo
