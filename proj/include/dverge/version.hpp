#pragma once

namespace dverge {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace dverge
