#pragma once

namespace fives {

inline constexpr const char* kVersion = "0.1.0";

inline constexpr int kTableFormatVersion = 1;
inline constexpr int kAdjacencyFormatVersion = 1;
inline constexpr int kCheckpointFormatVersion = 1;

}  // namespace fives
