#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "framefuse/errors.hpp"

namespace framefuse {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Dense per-pixel 3D coordinates with a validity mask. Pixels are stored
/// row-major: index = row * width + col. Invalid pixels are excluded from
/// every reduction (scale, loss, metrics).
struct Pointmap {
  int height = 0;
  int width = 0;
  Eigen::Matrix<double, Eigen::Dynamic, 3> points;  // (height*width) x 3
  std::vector<std::uint8_t> valid;                  // height*width entries

  Pointmap() = default;
  Pointmap(int h, int w)
      : height(h), width(w), points(Eigen::Matrix<double, Eigen::Dynamic, 3>::Zero(h * w, 3)),
        valid(static_cast<std::size_t>(h) * w, 1) {}

  int size() const { return height * width; }
  int index(int row, int col) const { return row * width + col; }
  bool is_valid(int row, int col) const { return valid[index(row, col)] != 0; }
  Vec3 at(int row, int col) const { return points.row(index(row, col)).transpose(); }
  void set(int row, int col, const Vec3& p, bool v = true) {
    points.row(index(row, col)) = p.transpose();
    valid[index(row, col)] = v ? 1 : 0;
  }
  long valid_count() const;
};

/// Per-pixel reliability, always >= 1 so that (c-1)/c lands in [0,1).
struct ConfidenceMap {
  int height = 0;
  int width = 0;
  Eigen::VectorXd conf;  // (height*width)

  ConfidenceMap() = default;
  ConfidenceMap(int h, int w, double value = 1.0)
      : height(h), width(w), conf(Eigen::VectorXd::Constant(h * w, value)) {}

  int size() const { return height * width; }
  double at(int row, int col) const { return conf[row * width + col]; }
  double mean() const { return conf.size() > 0 ? conf.mean() : 0.0; }
};

/// Similarity transform p -> scale * rotation * p + translation.
struct Sim3Transform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }
  Sim3Transform inverse() const;
  /// this ∘ other: apply `other` first, then this.
  Sim3Transform compose(const Sim3Transform& other) const;
};

/// Pinhole intrinsics in pixels.
struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
};

/// Rigid camera-to-world transform.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Pose inverse() const {
    Pose out;
    out.rotation = rotation.transpose();
    out.translation = -(rotation.transpose() * translation);
    return out;
  }
  Pose compose(const Pose& other) const {
    Pose out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }
  Vec3 center() const { return translation; }
};

/// Throws InputError unless fx, fy > 0, cx in (0, width), cy in (0, height).
void validate_intrinsics(const CameraIntrinsics& k, int width, int height);

/// Back-projects a depth image to a world-frame pointmap. Depth is z-depth
/// along the camera axis; entries <= 0 (or non-finite) mark invalid pixels.
/// Pixel (row, col) uses image coordinates u = col, v = row.
Pointmap backproject(const Eigen::MatrixXd& depth, const CameraIntrinsics& k, const Pose& pose);

/// Least-squares similarity alignment (Umeyama): finds (s, R, t) minimizing
/// sum |s*R*src_i + t - dst_i|^2 via SVD of the 3x3 cross-covariance with
/// the determinant-sign correction. with_scale=false fixes s = 1.
/// Throws NumericError for fewer than 3 points or a rank-deficient
/// covariance (collinear sources).
Sim3Transform umeyama_align(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                            bool with_scale = true);

struct IcpResult {
  Sim3Transform transform;
  double rms = 0.0;  // final RMS correspondence distance
  int iterations = 0;
};

/// Point-to-point ICP with nearest-neighbour correspondences; each iteration
/// re-solves the transform with umeyama_align on the matched pairs. Stops
/// when the RMS correspondence change drops below tol (relative) or after
/// max_iter iterations. The returned objective never exceeds the objective
/// at init.
IcpResult icp_refine(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                     const Sim3Transform& init, int max_iter = 50, double tol = 1e-6,
                     bool with_scale = true);

struct PoseEstimate {
  Pose pose;               // camera-to-world
  double reproj_rms = 0;   // RMS reprojection error of inliers, pixels
  int inliers = 0;
};

/// Robust perspective pose from a pointmap: RANSAC hypotheses from minimal
/// samples (6-point DLT with a planar homography fallback when the sample is
/// near-coplanar), scored by reprojection inliers at inlier_px, then
/// Gauss-Newton refinement on all inliers. The generator is seedable so runs
/// are reproducible.
/// Throws InputError with fewer than 6 valid points, NumericError when no
/// hypothesis reaches 6 inliers.
PoseEstimate derive_pose(const Pointmap& pointmap, const CameraIntrinsics& k,
                         int ransac_iters = 256, double inlier_px = 2.0,
                         std::uint64_t seed = 0);

}  // namespace framefuse
