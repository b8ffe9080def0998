#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "xmpr/geometry.hpp"
#include "xmpr/rng.hpp"

using namespace xmpr;
using namespace xmpr::geo;

namespace {

constexpr double kPi = std::numbers::pi;

Pose random_pose(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  Pose p;
  p.rotation = q.toRotationMatrix();
  p.translation = Eigen::Vector3d(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
  return p;
}

PointCloud random_cloud(Rng& rng, Index n, Frame frame) {
  PointCloud c;
  c.frame = frame;
  c.points.resize(n, 3);
  for (Index i = 0; i < n; ++i)
    c.points.row(i) << rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-5, 5);
  return c;
}

}  // namespace

TEST_CASE("pose: compose and invert") {
  Rng rng(101);
  Pose t = random_pose(rng);
  CHECK(t.valid());
  Pose id = compose(t, invert(t));
  CHECK((id.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(id.translation.cwiseAbs().maxCoeff() <= 1e-12);

  Pose inv_id = invert(Pose::identity());
  CHECK((inv_id.matrix() - Eigen::Matrix4d::Identity()).cwiseAbs().maxCoeff() == 0.0);

  // 4x4 homogeneous product oracle
  for (int k = 0; k < 5; ++k) {
    Pose a = random_pose(rng), b = random_pose(rng);
    const Eigen::Matrix4d oracle = a.matrix() * b.matrix();
    CHECK((compose(a, b).matrix() - oracle).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("pose: rigid transforms preserve pairwise distances") {
  Rng rng(102);
  Pose t = random_pose(rng);
  PointCloud c = random_cloud(rng, 40, {FrameKind::World, 0});
  PointCloud moved = transform_cloud(t, c, {FrameKind::World, 0});
  for (Index i = 0; i < c.size(); i += 7)
    for (Index j = i + 1; j < c.size(); j += 5) {
      const double d0 = (c.points.row(i) - c.points.row(j)).norm();
      const double d1 = (moved.points.row(i) - moved.points.row(j)).norm();
      CHECK(std::abs(d0 - d1) <= 1e-9);
    }
}

TEST_CASE("reproject_to_lidar: identity, pure translation, random oracle") {
  Rng rng(103);
  PointCloud c = random_cloud(rng, 25, {FrameKind::Camera, 3});

  PointCloud same = reproject_to_lidar(c, Pose::identity(), Pose::identity(),
                                       Pose::identity(), 3, 9);
  CHECK((same.points - c.points).cwiseAbs().maxCoeff() == 0.0);
  CHECK(same.frame == Frame{FrameKind::Lidar, 9});

  Pose t_wc_t2;
  t_wc_t2.translation = Eigen::Vector3d(1, 0, 0);
  PointCloud shifted = reproject_to_lidar(c, Pose::identity(), t_wc_t2,
                                          Pose::identity(), 3, 9);
  CHECK((shifted.points.col(0) - (c.points.col(0).array() - 1.0).matrix())
            .cwiseAbs()
            .maxCoeff() <= 1e-12);

  Pose a = random_pose(rng), b = random_pose(rng), lc = random_pose(rng);
  PointCloud out = reproject_to_lidar(c, a, b, lc, 3, 9);
  const Eigen::Matrix4d chain = lc.matrix() * b.matrix().inverse() * a.matrix();
  for (Index i = 0; i < c.size(); ++i) {
    Eigen::Vector4d h(c.points(i, 0), c.points(i, 1), c.points(i, 2), 1.0);
    Eigen::Vector4d o = chain * h;
    CHECK((out.points.row(i).transpose() - o.head<3>()).cwiseAbs().maxCoeff() <= 1e-10);
  }

  PointCloud wrong = c;
  wrong.frame = {FrameKind::Lidar, 3};
  CHECK_THROWS(reproject_to_lidar(wrong, a, b, lc, 3, 9));
  wrong.frame = {FrameKind::Camera, 4};
  CHECK_THROWS(reproject_to_lidar(wrong, a, b, lc, 3, 9));
}

TEST_CASE("pinhole: axis, inverse construction, matrix oracle, domain") {
  CameraModel cam{450.0, 460.0, 300.5, 200.5, 600, 400};
  double u, v;
  pinhole_project({0, 0, 7.5}, cam, u, v);
  CHECK(u == doctest::Approx(cam.cx).epsilon(1e-14));
  CHECK(v == doctest::Approx(cam.cy).epsilon(1e-14));

  const double u0 = 123.25, v0 = 41.5, z = 3.75;
  pinhole_project({z * (u0 - cam.cx) / cam.fx, z * (v0 - cam.cy) / cam.fy, z}, cam, u, v);
  CHECK(u == doctest::Approx(u0).epsilon(1e-12));
  CHECK(v == doctest::Approx(v0).epsilon(1e-12));

  Rng rng(104);
  for (int k = 0; k < 10; ++k) {
    Eigen::Vector3d p(rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(0.5, 9));
    Eigen::Matrix3d kmat;
    kmat << cam.fx, 0, cam.cx, 0, cam.fy, cam.cy, 0, 0, 1;
    Eigen::Vector3d h = kmat * p;
    pinhole_project(p, cam, u, v);
    CHECK(std::abs(u - h.x() / h.z()) <= 1e-10);
    CHECK(std::abs(v - h.y() / h.z()) <= 1e-10);
  }

  CHECK_THROWS(pinhole_project({0, 0, 0.0}, cam, u, v));
  CHECK_THROWS(pinhole_project({1, 1, -5.0}, cam, u, v));
}

TEST_CASE("fov_filter: membership, brute force, idempotence") {
  CameraModel cam{450.0, 460.0, 300.5, 200.5, 600, 400};
  PointCloud c;
  c.frame = {FrameKind::Camera, 0};
  c.points.resize(2, 3);
  c.points.row(0) << 0, 0, 5;
  c.points.row(1) << 0, 0, -5;
  PointCloud kept = fov_filter(c, cam);
  REQUIRE(kept.size() == 1);
  CHECK(kept.points(0, 2) == 5.0);

  Rng rng(105);
  PointCloud big = random_cloud(rng, 300, {FrameKind::Camera, 0});
  PointCloud f = fov_filter(big, cam);
  Index expect = 0;
  for (Index i = 0; i < big.size(); ++i) {
    const Eigen::Vector3d p = big.points.row(i);
    if (!(p.z() > 1e-6)) continue;
    const double u = cam.fx * p.x() / p.z() + cam.cx;
    const double v = cam.fy * p.y() / p.z() + cam.cy;
    if (u >= 0 && u < 600 && v >= 0 && v < 400) ++expect;
  }
  CHECK(f.size() == expect);

  PointCloud ff = fov_filter(f, cam);
  CHECK(ff.size() == f.size());
  CHECK((ff.points - f.points).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("spherical_project: pinned bin, collisions, empty cloud") {
  SphericalGrid grid;  // 48x900, +3/-25 deg
  PointCloud c;
  c.frame = {FrameKind::Lidar, 0};
  c.points.resize(1, 3);
  c.points.row(0) << 10, 0, 0;
  RangeImage img = spherical_project(c, grid);
  CHECK(img.at(5, 450) == doctest::Approx(10.0).epsilon(1e-12));
  double total = 0.0;
  for (Index i = 0; i < img.values.numel(); ++i) total += img.values.data()[i];
  CHECK(total == doctest::Approx(10.0));

  c.points.resize(2, 3);
  c.points.row(0) << 5, 0, 0;
  c.points.row(1) << 9, 0, 0;
  img = spherical_project(c, grid);
  CHECK(img.at(5, 450) == doctest::Approx(5.0));

  PointCloud empty;
  empty.frame = {FrameKind::Lidar, 0};
  empty.points.resize(0, 3);
  RangeImage zero = spherical_project(empty, grid);
  CHECK(zero.values.data().abs().maxCoeff() == 0.0);
  CHECK(zero.values.shape() == Shape{48, 900});
}

TEST_CASE("spherical_project: out-of-elevation points dropped, min rule global") {
  SphericalGrid grid;
  Rng rng(106);
  PointCloud c = random_cloud(rng, 500, {FrameKind::Lidar, 0});
  RangeImage img = spherical_project(c, grid);
  double max_range = 0.0;
  for (Index i = 0; i < c.size(); ++i)
    max_range = std::max(max_range, c.points.row(i).norm());
  CHECK(img.values.data().maxCoeff() <= max_range + 1e-12);

  PointCloud high;
  high.frame = {FrameKind::Lidar, 0};
  high.points.resize(2, 3);
  high.points.row(0) << 1, 0, 10;    // ~84 deg elevation, above fov_up
  high.points.row(1) << 1, 0, -10;   // below fov_down
  RangeImage none = spherical_project(high, grid);
  CHECK(none.values.data().abs().maxCoeff() == 0.0);
}

TEST_CASE("spherical_project: yaw by k columns circularly shifts the image") {
  SphericalGrid grid;
  const double res = grid.azimuth_resolution();
  Rng rng(107);
  PointCloud c;
  c.frame = {FrameKind::Lidar, 0};
  c.points.resize(200, 3);
  for (Index i = 0; i < 200; ++i) {
    // azimuth at a bin center keeps every point off the column boundaries
    const double az = (static_cast<double>(rng.uniform_index(900)) + 0.5) * res - kPi;
    const double elev = rng.uniform(-24.0, 2.0) * kPi / 180.0;
    const double r = rng.uniform(2.0, 40.0);
    c.points.row(i) << r * std::cos(elev) * std::cos(az), r * std::cos(elev) * std::sin(az),
        r * std::sin(elev);
  }
  const Index k = 7;
  RangeImage base = spherical_project(c, grid);
  PointCloud rot = transform_cloud(yaw_rotation(static_cast<double>(k) * res), c,
                                   {FrameKind::Lidar, 0});
  RangeImage shifted = spherical_project(rot, grid);
  for (Index i = 0; i < grid.rows; ++i)
    for (Index j = 0; j < grid.cols; ++j)
      CHECK(shifted.at(i, (j + k) % grid.cols) == doctest::Approx(base.at(i, j)).epsilon(1e-9));
}

TEST_CASE("range image: float32 round trip and header validation") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "xmpr_ri_test.bin").string();
  SphericalGrid grid;
  grid.rows = 6;
  grid.cols = 20;
  RangeImage img(grid);
  Rng rng(108);
  for (Index i = 0; i < img.values.numel(); ++i)
    img.values.data()[i] = static_cast<double>(static_cast<float>(rng.uniform(0, 80)));
  save_range_image(path, img);
  RangeImage back = load_range_image(path);
  CHECK(back.grid.rows == 6);
  CHECK(back.grid.cols == 20);
  CHECK(back.grid.fov_up_deg == doctest::Approx(3.0));
  CHECK(back.grid.fov_down_deg == doctest::Approx(-25.0));
  for (Index i = 0; i < img.values.numel(); ++i)
    CHECK(back.values.data()[i] == img.values.data()[i]);

  std::ofstream bad(path, std::ios::binary);
  bad.write("garbage!", 8);
  bad.close();
  CHECK_THROWS(load_range_image(path));
  fs::remove(path);
}

TEST_CASE("camera and grid validation") {
  CameraModel cam{450.0, 460.0, 300.5, 200.5, 600, 400};
  CHECK_NOTHROW(cam.validate());
  cam.fx = -1;
  CHECK_THROWS(cam.validate());
  cam.fx = 450;
  cam.cx = 700;
  CHECK_THROWS(cam.validate());

  SphericalGrid g;
  CHECK_NOTHROW(g.validate());
  g.fov_up_deg = -30;
  CHECK_THROWS(g.validate());
}
