#ifndef PDINTERP_SLICE_H_
#define PDINTERP_SLICE_H_

// Transaxial 2D images (y rows, x columns, x fastest) and binary masks.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pdinterp/tensor.h"

namespace pdinterp {

struct SliceImage {
  Index ny = 0;
  Index nx = 0;
  std::vector<double> values;
  std::map<std::string, std::string> provenance;

  SliceImage() = default;
  SliceImage(Index rows, Index cols, double fill = 0.0)
      : ny(rows), nx(cols), values(static_cast<std::size_t>(rows * cols), fill) {}

  Index size() const { return ny * nx; }
  double& at(Index y, Index x) { return values[static_cast<std::size_t>(y * nx + x)]; }
  double at(Index y, Index x) const { return values[static_cast<std::size_t>(y * nx + x)]; }
};

struct BinaryMask2D {
  Index ny = 0;
  Index nx = 0;
  std::vector<std::uint8_t> bits;
  std::string provenance;

  BinaryMask2D() = default;
  BinaryMask2D(Index rows, Index cols) : ny(rows), nx(cols), bits(static_cast<std::size_t>(rows * cols), 0) {}

  Index size() const { return ny * nx; }
  Index count() const {
    Index n = 0;
    for (auto b : bits) n += b != 0;
    return n;
  }
  bool at(Index y, Index x) const { return bits[static_cast<std::size_t>(y * nx + x)] != 0; }
};

}  // namespace pdinterp

#endif  // PDINTERP_SLICE_H_
