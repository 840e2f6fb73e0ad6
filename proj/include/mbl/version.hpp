#pragma once

namespace mbl {

inline constexpr const char* version = "0.1.0";

}  // namespace mbl
