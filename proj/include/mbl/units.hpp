#pragma once

#include <numbers>

// Unit conventions used throughout:
//   - energies and coupling strengths are ordinary frequencies f = omega/2pi in MHz
//   - times are in ns
// Evolving for time t under an energy f therefore accumulates phase
// 2*pi*1e-3*f*t radians (MHz * ns = 1e-3 cycles).

namespace mbl {

inline constexpr double radians_per_mhz_ns = 2.0e-3 * std::numbers::pi;

}  // namespace mbl
