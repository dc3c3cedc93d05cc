#pragma once

namespace altcast {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace altcast
