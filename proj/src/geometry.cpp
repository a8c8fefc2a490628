#include "framefuse/geometry.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <random>

#include "framefuse/kdtree.hpp"

namespace framefuse {

long Pointmap::valid_count() const {
  long n = 0;
  for (std::uint8_t v : valid) n += v ? 1 : 0;
  return n;
}

Sim3Transform Sim3Transform::inverse() const {
  Sim3Transform out;
  out.scale = 1.0 / scale;
  out.rotation = rotation.transpose();
  out.translation = -(out.scale * (out.rotation * translation));
  return out;
}

Sim3Transform Sim3Transform::compose(const Sim3Transform& other) const {
  Sim3Transform out;
  out.scale = scale * other.scale;
  out.rotation = rotation * other.rotation;
  out.translation = scale * (rotation * other.translation) + translation;
  return out;
}

void validate_intrinsics(const CameraIntrinsics& k, int width, int height) {
  if (!(k.fx > 0) || !(k.fy > 0)) throw InputError("invalid intrinsics: fx and fy must be positive");
  if (!(k.cx > 0 && k.cx < width) || !(k.cy > 0 && k.cy < height))
    throw InputError("invalid intrinsics: principal point outside image");
}

Pointmap backproject(const Eigen::MatrixXd& depth, const CameraIntrinsics& k, const Pose& pose) {
  if (!(k.fx > 0) || !(k.fy > 0)) throw InputError("invalid intrinsics: fx and fy must be positive");
  const int h = static_cast<int>(depth.rows());
  const int w = static_cast<int>(depth.cols());
  Pointmap out(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double d = depth(r, c);
      if (!(d > 0) || !std::isfinite(d)) {
        out.set(r, c, Vec3::Zero(), false);
        continue;
      }
      Vec3 ray((c - k.cx) / k.fx, (r - k.cy) / k.fy, 1.0);
      out.set(r, c, pose.apply(d * ray), true);
    }
  }
  return out;
}

Sim3Transform umeyama_align(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                            bool with_scale) {
  if (src.size() != dst.size()) throw InputError("umeyama: point counts differ");
  const std::size_t n = src.size();
  if (n < 3) throw NumericError("umeyama: degenerate configuration (need at least 3 points)");

  Vec3 mu_s = Vec3::Zero(), mu_d = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mu_s += src[i];
    mu_d += dst[i];
  }
  mu_s /= static_cast<double>(n);
  mu_d /= static_cast<double>(n);

  Mat3 cov = Mat3::Zero();
  double var_s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 ds = src[i] - mu_s;
    Vec3 dd = dst[i] - mu_d;
    cov += dd * ds.transpose();
    var_s += ds.squaredNorm();
  }
  cov /= static_cast<double>(n);
  var_s /= static_cast<double>(n);

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 d = svd.singularValues();
  // Rotation about a line is unobservable when the covariance drops to rank 1.
  if (!(d(1) > 1e-9 * d(0)) || !(d(0) > 0))
    throw NumericError("umeyama: degenerate configuration (rank-deficient covariance)");

  Vec3 sign = Vec3::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) sign(2) = -1.0;

  Sim3Transform out;
  out.rotation = svd.matrixU() * sign.asDiagonal() * svd.matrixV().transpose();
  out.scale = with_scale ? d.dot(sign) / var_s : 1.0;
  if (!(out.scale > 0)) throw NumericError("umeyama: non-positive scale");
  out.translation = mu_d - out.scale * (out.rotation * mu_s);
  return out;
}

IcpResult icp_refine(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                     const Sim3Transform& init, int max_iter, double tol, bool with_scale) {
  if (src.empty() || dst.empty()) throw InputError("icp: empty point cloud");

  KdTree3 tree(dst);
  auto rms_and_matches = [&](const Sim3Transform& t, std::vector<Vec3>& matched) {
    matched.resize(src.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) {
      Vec3 p = t.apply(src[i]);
      auto [j, d2] = tree.nearest(p);
      matched[i] = dst[static_cast<std::size_t>(j)];
      sum += d2;
    }
    return std::sqrt(sum / static_cast<double>(src.size()));
  };

  std::vector<Vec3> matched;
  IcpResult best;
  best.transform = init;
  best.rms = rms_and_matches(init, matched);
  best.iterations = 0;

  double prev_rms = best.rms;
  for (int it = 0; it < max_iter; ++it) {
    Sim3Transform next;
    try {
      next = umeyama_align(src, matched, with_scale);
    } catch (const NumericError&) {
      break;  // collapsed correspondences; keep the best transform so far
    }
    double rms = rms_and_matches(next, matched);
    if (rms <= best.rms) {
      best.transform = next;
      best.rms = rms;
      best.iterations = it + 1;
    } else {
      break;
    }
    if (std::abs(prev_rms - rms) <= tol * std::max(prev_rms, 1e-30)) break;
    prev_rms = rms;
  }
  return best;
}

namespace {

struct Correspondence {
  Vec3 world;
  double u, v;  // observed pixel
};

Eigen::Vector2d project(const CameraIntrinsics& k, const Vec3& p_cam) {
  return {k.fx * p_cam.x() / p_cam.z() + k.cx, k.fy * p_cam.y() / p_cam.z() + k.cy};
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), 0, v.x();
  return m;
}

Mat3 rodrigues(const Vec3& w) {
  double theta = w.norm();
  if (theta < 1e-12) return Mat3::Identity() + skew(w);
  Vec3 axis = w / theta;
  Mat3 k = skew(axis);
  return Mat3::Identity() + std::sin(theta) * k + (1 - std::cos(theta)) * k * k;
}

Mat3 closest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  Mat3 v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0) u.col(2) *= -1.0;
  return u * v.transpose();
}

// World-to-camera pose hypothesis from >= 6 correspondences via DLT on the
// normalized projection matrix, with Hartley-style world normalization.
bool pose_from_dlt(const std::vector<Correspondence>& pts, const std::vector<int>& sample,
                   const CameraIntrinsics& k, Mat3& r_wc, Vec3& t_wc) {
  const int n = static_cast<int>(sample.size());
  if (n < 6) return false;
  Vec3 centroid = Vec3::Zero();
  for (int idx : sample) centroid += pts[static_cast<std::size_t>(idx)].world;
  centroid /= n;
  double spread = 0.0;
  for (int idx : sample) spread += (pts[static_cast<std::size_t>(idx)].world - centroid).norm();
  spread /= n;
  if (!(spread > 1e-12)) return false;
  double inv_s = std::sqrt(3.0) / spread;

  Eigen::MatrixXd a(2 * n, 12);
  for (int i = 0; i < n; ++i) {
    const Correspondence& c = pts[static_cast<std::size_t>(sample[static_cast<std::size_t>(i)])];
    Vec3 xn = (c.world - centroid) * inv_s;
    Eigen::Vector4d xh(xn.x(), xn.y(), xn.z(), 1.0);
    double au = (c.u - k.cx) / k.fx;
    double av = (c.v - k.cy) / k.fy;
    a.row(2 * i) << Eigen::RowVector4d::Zero(), -xh.transpose(), av * xh.transpose();
    a.row(2 * i + 1) << xh.transpose(), Eigen::RowVector4d::Zero(), -au * xh.transpose();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  Eigen::VectorXd p = svd.matrixV().col(11);
  Eigen::Matrix<double, 3, 4> proj;
  proj.row(0) = p.segment<4>(0).transpose();
  proj.row(1) = p.segment<4>(4).transpose();
  proj.row(2) = p.segment<4>(8).transpose();

  // Undo world normalization: X' = inv_s * (X - centroid).
  Eigen::Matrix4d denorm = Eigen::Matrix4d::Identity();
  denorm.topLeftCorner<3, 3>() *= inv_s;
  denorm.topRightCorner<3, 1>() = -inv_s * centroid;
  proj = proj * denorm;

  Mat3 m = proj.leftCols<3>();
  double det = m.determinant();
  if (std::abs(det) < 1e-18) return false;
  if (det < 0) proj = -proj;
  m = proj.leftCols<3>();

  Eigen::JacobiSVD<Mat3> msvd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  double scale = msvd.singularValues().mean();
  if (!(scale > 1e-15)) return false;
  r_wc = closest_rotation(m);
  t_wc = proj.col(3) / scale;
  return true;
}

// Planar fallback: homography between in-plane coordinates and normalized
// image coordinates, decomposed into rotation and translation.
bool pose_from_planar(const std::vector<Correspondence>& pts, const std::vector<int>& sample,
                      const CameraIntrinsics& k, const Vec3& centroid, const Mat3& plane_basis,
                      Mat3& r_wc, Vec3& t_wc) {
  const int n = static_cast<int>(sample.size());
  if (n < 4) return false;
  const Vec3 e1 = plane_basis.col(0), e2 = plane_basis.col(1);

  Eigen::MatrixXd a(2 * n, 9);
  for (int i = 0; i < n; ++i) {
    const Correspondence& c = pts[static_cast<std::size_t>(sample[static_cast<std::size_t>(i)])];
    Vec3 d = c.world - centroid;
    Eigen::Vector3d xh(d.dot(e1), d.dot(e2), 1.0);
    double au = (c.u - k.cx) / k.fx;
    double av = (c.v - k.cy) / k.fy;
    a.row(2 * i) << Eigen::RowVector3d::Zero(), -xh.transpose(), av * xh.transpose();
    a.row(2 * i + 1) << xh.transpose(), Eigen::RowVector3d::Zero(), -au * xh.transpose();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  Eigen::VectorXd hv = svd.matrixV().col(8);
  Mat3 h;
  h << hv(0), hv(1), hv(2), hv(3), hv(4), hv(5), hv(6), hv(7), hv(8);
  if (h(2, 2) == 0 && h.col(2).norm() < 1e-15) return false;
  if (h(2, 2) < 0) h = -h;  // keep the plane centroid in front of the camera

  double lambda = 0.5 * (h.col(0).norm() + h.col(1).norm());
  if (!(lambda > 1e-15)) return false;
  Vec3 r1 = h.col(0) / lambda;
  Vec3 r2 = h.col(1) / lambda;
  Mat3 rot_cols;
  rot_cols << r1, r2, r1.cross(r2);
  Mat3 r_plane = closest_rotation(rot_cols);

  Mat3 world_basis;
  world_basis << e1, e2, e1.cross(e2);
  r_wc = r_plane * world_basis.transpose();
  t_wc = h.col(2) / lambda - r_wc * centroid;
  return true;
}

}  // namespace

PoseEstimate derive_pose(const Pointmap& pointmap, const CameraIntrinsics& k, int ransac_iters,
                         double inlier_px, std::uint64_t seed) {
  if (!(k.fx > 0) || !(k.fy > 0)) throw InputError("invalid intrinsics: fx and fy must be positive");

  std::vector<Correspondence> pts;
  pts.reserve(static_cast<std::size_t>(pointmap.size()));
  for (int r = 0; r < pointmap.height; ++r)
    for (int c = 0; c < pointmap.width; ++c)
      if (pointmap.is_valid(r, c))
        pts.push_back({pointmap.at(r, c), static_cast<double>(c), static_cast<double>(r)});
  if (pts.size() < 6) throw InputError("derive_pose: insufficient correspondences (< 6 valid points)");

  const int n = static_cast<int>(pts.size());
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, n - 1);

  auto score = [&](const Mat3& r_wc, const Vec3& t_wc, std::vector<int>* keep, double* sse_out) {
    int count = 0;
    double sse = 0.0;
    for (int i = 0; i < n; ++i) {
      Vec3 p_cam = r_wc * pts[static_cast<std::size_t>(i)].world + t_wc;
      if (!(p_cam.z() > 1e-9)) continue;
      Eigen::Vector2d proj = project(k, p_cam);
      double err = std::hypot(proj.x() - pts[static_cast<std::size_t>(i)].u,
                              proj.y() - pts[static_cast<std::size_t>(i)].v);
      if (err < inlier_px) {
        ++count;
        sse += err * err;
        if (keep) keep->push_back(i);
      }
    }
    if (sse_out) *sse_out = sse;
    return count;
  };

  Mat3 best_r;
  Vec3 best_t;
  int best_inliers = 0;
  double best_sse = std::numeric_limits<double>::infinity();
  auto consider = [&](const Mat3& r_wc, const Vec3& t_wc) {
    double sse = 0.0;
    int inliers = score(r_wc, t_wc, nullptr, &sse);
    if (inliers > best_inliers || (inliers == best_inliers && sse < best_sse)) {
      best_inliers = inliers;
      best_sse = sse;
      best_r = r_wc;
      best_t = t_wc;
    }
  };

  for (int it = 0; it < ransac_iters; ++it) {
    std::vector<int> sample;
    while (sample.size() < 6) {
      int idx = pick(rng);
      bool dup = false;
      for (int s : sample) dup = dup || s == idx;
      if (!dup) sample.push_back(idx);
    }

    // Planarity of the sample decides the minimal solver: the DLT degenerates
    // on coplanar samples, the homography route stays well-posed. Near the
    // boundary both hypotheses enter the pool.
    Vec3 centroid = Vec3::Zero();
    for (int idx : sample) centroid += pts[static_cast<std::size_t>(idx)].world;
    centroid /= static_cast<double>(sample.size());
    Mat3 scatter = Mat3::Zero();
    for (int idx : sample) {
      Vec3 d = pts[static_cast<std::size_t>(idx)].world - centroid;
      scatter += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(scatter);
    Vec3 evals = eig.eigenvalues();  // ascending
    double flatness = evals(0) / std::max(evals(2), 1e-30);

    Mat3 r_wc;
    Vec3 t_wc;
    if (flatness < 1e-2) {
      Mat3 basis;
      basis << eig.eigenvectors().col(2), eig.eigenvectors().col(1), eig.eigenvectors().col(0);
      if (pose_from_planar(pts, sample, k, centroid, basis, r_wc, t_wc)) consider(r_wc, t_wc);
    }
    if (flatness > 1e-6) {
      if (pose_from_dlt(pts, sample, k, r_wc, t_wc)) consider(r_wc, t_wc);
    }
  }

  if (best_inliers < 6) throw NumericError("derive_pose: pose failure (no hypothesis with >= 6 inliers)");

  std::vector<int> inlier_idx;
  score(best_r, best_t, &inlier_idx, nullptr);

  // Damped Gauss-Newton on reprojection error over the inlier set. Planar
  // configurations leave one pose direction nearly unobservable, so steps
  // are accepted only when they reduce the cost.
  auto cost_of = [&](const Mat3& r_wc, const Vec3& t_wc) {
    double sse = 0.0;
    for (int i : inlier_idx) {
      const Correspondence& c = pts[static_cast<std::size_t>(i)];
      Vec3 p = r_wc * c.world + t_wc;
      if (!(p.z() > 1e-9)) return std::numeric_limits<double>::infinity();
      sse += (project(k, p) - Eigen::Vector2d(c.u, c.v)).squaredNorm();
    }
    return sse;
  };

  Mat3 r_wc = best_r;
  Vec3 t_wc = best_t;
  double cost = cost_of(r_wc, t_wc);
  double lambda = 1e-6;
  for (int it = 0; it < 30; ++it) {
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (int i : inlier_idx) {
      const Correspondence& c = pts[static_cast<std::size_t>(i)];
      Vec3 p = r_wc * c.world + t_wc;
      if (!(p.z() > 1e-9)) continue;
      Eigen::Vector2d res = project(k, p) - Eigen::Vector2d(c.u, c.v);
      Eigen::Matrix<double, 2, 3> jp;
      double iz = 1.0 / p.z();
      jp << k.fx * iz, 0, -k.fx * p.x() * iz * iz, 0, k.fy * iz, -k.fy * p.y() * iz * iz;
      Eigen::Matrix<double, 2, 6> j;
      j.leftCols<3>() = -jp * skew(r_wc * c.world);
      j.rightCols<3>() = jp;
      h += j.transpose() * j;
      g += j.transpose() * res;
    }
    bool accepted = false;
    for (int attempt = 0; attempt < 8; ++attempt) {
      Eigen::Matrix<double, 6, 6> damped = h;
      damped.diagonal() += lambda * h.diagonal();
      Eigen::Matrix<double, 6, 1> delta = damped.ldlt().solve(-g);
      if (delta.allFinite()) {
        Mat3 r_try = rodrigues(delta.head<3>()) * r_wc;
        Vec3 t_try = t_wc + delta.tail<3>();
        double c_try = cost_of(r_try, t_try);
        if (c_try < cost) {
          r_wc = r_try;
          t_wc = t_try;
          cost = c_try;
          lambda = std::max(lambda / 3.0, 1e-12);
          accepted = delta.norm() > 1e-14;
          break;
        }
      }
      lambda *= 10.0;
    }
    if (!accepted) break;
  }
  r_wc = closest_rotation(r_wc);

  inlier_idx.clear();
  PoseEstimate est;
  est.inliers = score(r_wc, t_wc, &inlier_idx, nullptr);
  double sum = 0.0;
  for (int i : inlier_idx) {
    const Correspondence& c = pts[static_cast<std::size_t>(i)];
    Vec3 p = r_wc * c.world + t_wc;
    Eigen::Vector2d res = project(k, p) - Eigen::Vector2d(c.u, c.v);
    sum += res.squaredNorm();
  }
  est.reproj_rms = inlier_idx.empty() ? 0.0 : std::sqrt(sum / static_cast<double>(inlier_idx.size()));

  // Stored pose is camera-to-world.
  est.pose.rotation = r_wc.transpose();
  est.pose.translation = -(r_wc.transpose() * t_wc);
  return est;
}

}  // namespace framefuse
