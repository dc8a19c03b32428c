#pragma once

#include <cstdint>
#include <vector>

namespace claps {

// Token id conventions shared by every module.
using TokenSeq = std::vector<int>;

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReservedIds = 4;

}  // namespace claps
