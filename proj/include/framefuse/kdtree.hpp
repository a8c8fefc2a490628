#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace framefuse {

/// Exact nearest-neighbour search over 3D points. Median-split KD-tree with
/// a brute-force path below a size threshold; both return the exact nearest
/// distance, so results match brute force bit for bit.
class KdTree3 {
 public:
  static constexpr int kBruteForceBelow = 256;

  explicit KdTree3(std::span<const Eigen::Vector3d> points) : pts_(points.begin(), points.end()) {
    if (pts_.size() >= kBruteForceBelow) {
      index_.resize(pts_.size());
      for (std::size_t i = 0; i < pts_.size(); ++i) index_[i] = static_cast<int>(i);
      nodes_.reserve(2 * pts_.size());
      root_ = build(0, static_cast<int>(pts_.size()));
    }
  }

  bool empty() const { return pts_.empty(); }
  std::size_t size() const { return pts_.size(); }

  /// Index and squared distance of the nearest stored point.
  std::pair<int, double> nearest(const Eigen::Vector3d& q) const {
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    if (root_ < 0) {
      for (std::size_t i = 0; i < pts_.size(); ++i) {
        double d2 = (pts_[i] - q).squaredNorm();
        if (d2 < best_d2) {
          best_d2 = d2;
          best = static_cast<int>(i);
        }
      }
    } else {
      search(root_, q, best, best_d2);
    }
    return {best, best_d2};
  }

  double nearest_distance(const Eigen::Vector3d& q) const { return std::sqrt(nearest(q).second); }

 private:
  struct Node {
    int point = -1;   // index into pts_
    int axis = 0;
    int left = -1;
    int right = -1;
  };

  int build(int begin, int end) {
    if (begin >= end) return -1;
    // Split on the axis of largest extent for balanced query times.
    Eigen::Vector3d lo = pts_[index_[begin]], hi = lo;
    for (int i = begin + 1; i < end; ++i) {
      lo = lo.cwiseMin(pts_[index_[i]]);
      hi = hi.cwiseMax(pts_[index_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    int mid = begin + (end - begin) / 2;
    std::nth_element(index_.begin() + begin, index_.begin() + mid, index_.begin() + end,
                     [&](int a, int b) { return pts_[a][axis] < pts_[b][axis]; });
    Node node;
    node.point = index_[mid];
    node.axis = axis;
    int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    int left = build(begin, mid);
    int right = build(mid + 1, end);
    nodes_[self].left = left;
    nodes_[self].right = right;
    return self;
  }

  void search(int node_id, const Eigen::Vector3d& q, int& best, double& best_d2) const {
    const Node& node = nodes_[node_id];
    const Eigen::Vector3d& p = pts_[node.point];
    double d2 = (p - q).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = node.point;
    }
    double delta = q[node.axis] - p[node.axis];
    int near = delta < 0 ? node.left : node.right;
    int far = delta < 0 ? node.right : node.left;
    if (near >= 0) search(near, q, best, best_d2);
    if (far >= 0 && delta * delta <= best_d2) search(far, q, best, best_d2);
  }

  std::vector<Eigen::Vector3d> pts_;
  std::vector<int> index_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace framefuse
