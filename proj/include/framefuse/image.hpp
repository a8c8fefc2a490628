#pragma once

#include <Eigen/Core>

namespace framefuse {

/// RGB image with channel values in [0, 1]. Pixels row-major like Pointmap:
/// index = row * width + col.
struct Image {
  int height = 0;
  int width = 0;
  Eigen::Matrix<double, Eigen::Dynamic, 3> rgb;

  Image() = default;
  Image(int h, int w)
      : height(h), width(w), rgb(Eigen::Matrix<double, Eigen::Dynamic, 3>::Zero(h * w, 3)) {}

  int index(int row, int col) const { return row * width + col; }
  Eigen::Vector3d at(int row, int col) const { return rgb.row(index(row, col)).transpose(); }
  void set(int row, int col, const Eigen::Vector3d& c) { rgb.row(index(row, col)) = c.transpose(); }
};

}  // namespace framefuse
