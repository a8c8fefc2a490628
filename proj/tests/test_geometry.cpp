#include <doctest.h>

#include <Eigen/Geometry>
#include <random>

#include "framefuse/geometry.hpp"
#include "framefuse/kdtree.hpp"

using namespace framefuse;

namespace {

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 axis(n(rng), n(rng), n(rng));
  axis.normalize();
  std::uniform_real_distribution<double> a(-M_PI, M_PI);
  return Eigen::AngleAxisd(a(rng), axis).toRotationMatrix();
}

Vec3 random_point(std::mt19937_64& rng, double span = 2.0) {
  std::uniform_real_distribution<double> u(-span, span);
  return {u(rng), u(rng), u(rng)};
}

double rotation_angle(const Mat3& a, const Mat3& b) {
  double c = ((a.transpose() * b).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

}  // namespace

TEST_CASE("backproject principal ray identity") {
  Eigen::MatrixXd depth = Eigen::MatrixXd::Ones(9, 9);
  CameraIntrinsics k{10.0, 10.0, 4.0, 4.0};
  Pointmap pm = backproject(depth, k, Pose{});
  CHECK(pm.at(4, 4).isApprox(Vec3(0, 0, 1), 1e-15));
  CHECK(pm.valid_count() == 81);
}

TEST_CASE("backproject unit offset ray") {
  // Depth 2 at pixel (cx + fx, cy) lands on (2, 0, 2) under identity pose.
  Eigen::MatrixXd depth = Eigen::MatrixXd::Zero(8, 16);
  CameraIntrinsics k{5.0, 5.0, 3.0, 4.0};
  int u = static_cast<int>(k.cx + k.fx);  // col 8
  int v = static_cast<int>(k.cy);         // row 4
  depth(v, u) = 2.0;
  Pointmap pm = backproject(depth, k, Pose{});
  CHECK(pm.is_valid(v, u));
  CHECK(pm.at(v, u).isApprox(Vec3(2, 0, 2), 1e-15));
  CHECK(pm.valid_count() == 1);  // all other depths are 0 -> invalid
}

TEST_CASE("backproject matches a scalar per-pixel oracle") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> du(0.5, 5.0);
  Eigen::MatrixXd depth(8, 8);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) depth(r, c) = du(rng);
  depth(3, 5) = -1.0;  // one invalid pixel
  CameraIntrinsics k{6.1, 5.7, 3.9, 4.2};
  Pose pose;
  pose.rotation = random_rotation(rng);
  pose.translation = random_point(rng);

  Pointmap pm = backproject(depth, k, pose);
  for (int r = 0; r < 8; ++r) {
    for (int c = 0; c < 8; ++c) {
      if (depth(r, c) <= 0) {
        CHECK_FALSE(pm.is_valid(r, c));
        continue;
      }
      // Independent scalar route.
      double x = depth(r, c) * (c - k.cx) / k.fx;
      double y = depth(r, c) * (r - k.cy) / k.fy;
      double z = depth(r, c);
      Vec3 expect = pose.rotation * Vec3(x, y, z) + pose.translation;
      CHECK((pm.at(r, c) - expect).norm() < 1e-12);
    }
  }
}

TEST_CASE("backproject rejects non-positive focal lengths") {
  Eigen::MatrixXd depth = Eigen::MatrixXd::Ones(4, 4);
  CHECK_THROWS_AS(backproject(depth, CameraIntrinsics{0.0, 1.0, 2.0, 2.0}, Pose{}), InputError);
  CHECK_THROWS_AS(backproject(depth, CameraIntrinsics{1.0, -1.0, 2.0, 2.0}, Pose{}), InputError);
}

TEST_CASE("umeyama identity case") {
  std::mt19937_64 rng(3);
  std::vector<Vec3> pts;
  for (int i = 0; i < 20; ++i) pts.push_back(random_point(rng));
  Sim3Transform t = umeyama_align(pts, pts, true);
  CHECK((t.rotation - Mat3::Identity()).norm() < 1e-12);
  CHECK(t.translation.norm() < 1e-12);
  CHECK(t.scale == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("umeyama recovers a constructed similarity") {
  std::mt19937_64 rng(11);
  Mat3 rz90 = Eigen::AngleAxisd(M_PI / 2, Vec3::UnitZ()).toRotationMatrix();
  Vec3 t(1, 2, 3);
  double s = 2.0;
  std::vector<Vec3> src, dst;
  for (int i = 0; i < 50; ++i) {
    Vec3 p = random_point(rng);
    src.push_back(p);
    dst.push_back(s * (rz90 * p) + t);
  }
  Sim3Transform est = umeyama_align(src, dst, true);
  CHECK((est.rotation - rz90).norm() < 1e-9);
  CHECK((est.translation - t).norm() < 1e-9);
  CHECK(est.scale == doctest::Approx(s).epsilon(1e-9));
}

TEST_CASE("umeyama degenerate configurations") {
  std::vector<Vec3> line = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  CHECK_THROWS_AS(umeyama_align(line, line, true), NumericError);
  std::vector<Vec3> two = {{0, 0, 0}, {1, 0, 0}};
  CHECK_THROWS_AS(umeyama_align(two, two, true), NumericError);
  std::vector<Vec3> a = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  std::vector<Vec3> b = {{0, 0, 0}, {1, 0, 0}};
  CHECK_THROWS_AS(umeyama_align(a, b, true), InputError);
}

TEST_CASE("umeyama property: reproduces random Sim3 instances") {
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> us(0.2, 5.0);
  std::uniform_int_distribution<int> un(3, 40);
  for (int trial = 0; trial < 200; ++trial) {
    Mat3 r = random_rotation(rng);
    Vec3 t = random_point(rng, 5.0);
    double s = us(rng);
    int n = un(rng);
    std::vector<Vec3> src, dst;
    for (int i = 0; i < n; ++i) src.push_back(random_point(rng));
    // Skip the measure-zero degenerate draws (nearly collinear sources).
    Mat3 cov = Mat3::Zero();
    Vec3 mu = Vec3::Zero();
    for (const Vec3& p : src) mu += p;
    mu /= n;
    for (const Vec3& p : src) cov += (p - mu) * (p - mu).transpose();
    Eigen::JacobiSVD<Mat3> svd(cov);
    if (svd.singularValues()(1) < 1e-6) continue;

    for (const Vec3& p : src) dst.push_back(s * (r * p) + t);
    Sim3Transform est = umeyama_align(src, dst, true);
    CHECK((est.rotation - r).norm() < 1e-9);
    CHECK((est.translation - t).norm() < 1e-9 * std::max(1.0, t.norm()));
    CHECK(std::abs(est.scale - s) < 1e-9 * s);
  }
}

TEST_CASE("umeyama with_scale=false fixes scale") {
  std::mt19937_64 rng(5);
  Mat3 r = random_rotation(rng);
  Vec3 t(0.3, -0.2, 0.9);
  std::vector<Vec3> src, dst;
  for (int i = 0; i < 30; ++i) {
    Vec3 p = random_point(rng);
    src.push_back(p);
    dst.push_back(r * p + t);
  }
  Sim3Transform est = umeyama_align(src, dst, false);
  CHECK(est.scale == 1.0);
  CHECK((est.rotation - r).norm() < 1e-9);
  CHECK((est.translation - t).norm() < 1e-9);
}

TEST_CASE("sim3 inverse round trip") {
  std::mt19937_64 rng(17);
  Sim3Transform t;
  t.rotation = random_rotation(rng);
  t.translation = random_point(rng);
  t.scale = 3.7;
  Sim3Transform inv = t.inverse();
  for (int i = 0; i < 20; ++i) {
    Vec3 p = random_point(rng);
    CHECK((inv.apply(t.apply(p)) - p).norm() < 1e-12);
    CHECK((t.apply(inv.apply(p)) - p).norm() < 1e-12);
  }
  Sim3Transform id = t.compose(inv);
  CHECK((id.rotation - Mat3::Identity()).norm() < 1e-12);
  CHECK(id.translation.norm() < 1e-12);
  CHECK(id.scale == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("icp fixed point converges immediately") {
  std::mt19937_64 rng(23);
  std::vector<Vec3> cloud;
  for (int i = 0; i < 200; ++i) cloud.push_back(random_point(rng));
  IcpResult res = icp_refine(cloud, cloud, Sim3Transform{}, 50, 1e-6);
  CHECK(res.iterations <= 1);
  CHECK(res.rms < 1e-12);
  CHECK((res.transform.rotation - Mat3::Identity()).norm() < 1e-9);
}

TEST_CASE("icp recovers a 5 degree misalignment") {
  std::mt19937_64 rng(29);
  std::vector<Vec3> dst;
  for (int i = 0; i < 500; ++i) dst.push_back(random_point(rng));
  Mat3 r5 = Eigen::AngleAxisd(5.0 * M_PI / 180.0, Vec3::UnitY()).toRotationMatrix();
  std::vector<Vec3> src;
  for (const Vec3& p : dst) src.push_back(r5.transpose() * p);  // dst = r5 * src
  IcpResult res = icp_refine(src, dst, Sim3Transform{}, 50, 1e-9);
  CHECK(res.rms < 1e-6);
  CHECK(rotation_angle(res.transform.rotation, r5) < 1e-6);
}

TEST_CASE("icp max_iter=0 returns init unchanged") {
  std::vector<Vec3> a = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  Sim3Transform init;
  init.translation = Vec3(9, 9, 9);
  IcpResult res = icp_refine(a, a, init, 0, 1e-6);
  CHECK(res.iterations == 0);
  CHECK((res.transform.translation - init.translation).norm() == 0.0);
}

TEST_CASE("icp objective never exceeds the objective at init") {
  std::mt19937_64 rng(31);
  std::vector<Vec3> dst;
  for (int i = 0; i < 300; ++i) dst.push_back(random_point(rng));
  Mat3 r = Eigen::AngleAxisd(0.4, Vec3::UnitX()).toRotationMatrix();
  std::vector<Vec3> src;
  for (const Vec3& p : dst) src.push_back(r.transpose() * (p - Vec3(0.2, 0, 0.1)));
  Sim3Transform init;  // identity, far from optimum
  KdTree3 tree(dst);
  double init_rms = 0;
  for (const Vec3& p : src) init_rms += tree.nearest(p).second;
  init_rms = std::sqrt(init_rms / src.size());
  IcpResult res = icp_refine(src, dst, init, 30, 1e-9);
  CHECK(res.rms <= init_rms);
}

TEST_CASE("icp rejects empty clouds") {
  std::vector<Vec3> empty, one = {{0, 0, 0}};
  CHECK_THROWS_AS(icp_refine(empty, one, Sim3Transform{}), InputError);
  CHECK_THROWS_AS(icp_refine(one, empty, Sim3Transform{}), InputError);
}

TEST_CASE("derive_pose round trip through backproject") {
  std::mt19937_64 rng(37);
  std::uniform_real_distribution<double> du(1.0, 6.0);
  Eigen::MatrixXd depth(8, 8);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) depth(r, c) = du(rng);
  CameraIntrinsics k{9.0, 9.0, 4.0, 4.0};
  Pose pose;
  pose.rotation = random_rotation(rng);
  pose.translation = random_point(rng);
  Pointmap pm = backproject(depth, k, pose);

  PoseEstimate est = derive_pose(pm, k, 256, 2.0, 99);
  CHECK(rotation_angle(est.pose.rotation, pose.rotation) < 1e-6);
  CHECK((est.pose.translation - pose.translation).norm() < 1e-6);
  CHECK(est.reproj_rms < 1e-6);
}

TEST_CASE("derive_pose handles a fronto-parallel plane with noise") {
  std::mt19937_64 rng(41);
  std::normal_distribution<double> noise(0.0, 1e-4);
  CameraIntrinsics k{40.0, 40.0, 16.0, 16.0};
  Pose pose;
  pose.rotation = Eigen::AngleAxisd(0.3, Vec3(0.2, 1.0, 0.1).normalized()).toRotationMatrix();
  pose.translation = Vec3(0.5, -0.3, 0.2);

  // All points at equal camera depth (one fronto-parallel plane).
  Pointmap pm(32, 32);
  for (int r = 0; r < 32; ++r) {
    for (int c = 0; c < 32; ++c) {
      double z = 2.0;
      Vec3 cam(z * (c - k.cx) / k.fx, z * (r - k.cy) / k.fy, z);
      Vec3 world = pose.apply(cam) + Vec3(noise(rng), noise(rng), noise(rng));
      pm.set(r, c, world, true);
    }
  }
  PoseEstimate est = derive_pose(pm, k, 256, 2.0, 7);
  CHECK(rotation_angle(est.pose.rotation, pose.rotation) < 1e-3);
  CHECK((est.pose.translation - pose.translation).norm() < 5e-3);
}

TEST_CASE("derive_pose precondition boundary") {
  Pointmap pm(3, 3);
  for (int i = 0; i < 9; ++i) pm.valid[i] = 0;
  pm.set(0, 0, {0, 0, 2}, true);
  pm.set(0, 1, {0.1, 0, 2.1}, true);
  pm.set(1, 0, {0, 0.1, 1.9}, true);
  pm.set(1, 1, {0.1, 0.1, 2.2}, true);
  pm.set(2, 2, {0.2, 0.2, 2.4}, true);
  CameraIntrinsics k{2.0, 2.0, 1.5, 1.5};
  CHECK_THROWS_AS(derive_pose(pm, k), InputError);  // only 5 valid points
}

TEST_CASE("kdtree equals brute force nearest distances") {
  std::mt19937_64 rng(43);
  std::vector<Vec3> cloud;
  for (int i = 0; i < 500; ++i) cloud.push_back(random_point(rng));
  KdTree3 tree(cloud);
  for (int i = 0; i < 200; ++i) {
    Vec3 q = random_point(rng, 2.5);
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3& p : cloud) best = std::min(best, (p - q).squaredNorm());
    CHECK(tree.nearest(q).second == best);
  }
}
