#pragma once

#include <string_view>
#include <vector>

namespace ckpm {

// Kinds of quadrilateral in a soft-body lattice. The order fixes one-hot
// attribute positions and self-interaction types.
enum class QuadKind { Rigid = 0, Soft = 1, Actuated = 2, Fixed = 3 };

inline constexpr int kQuadKindCount = 4;

std::string_view to_string(QuadKind kind);

// One unit grid cell of a lattice; (col, row) is its lower-left corner.
struct LatticeCell {
  int col = 0;
  int row = 0;
  QuadKind kind = QuadKind::Soft;

  friend bool operator==(const LatticeCell&, const LatticeCell&) = default;
};

using LatticeLayout = std::vector<LatticeCell>;

}  // namespace ckpm
