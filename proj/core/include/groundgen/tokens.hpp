#pragma once

#include <cstdint>

namespace groundgen {

using TokenId = std::int32_t;

// Reserved vocabulary ids.
inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kPad = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kUnk = 4;
inline constexpr TokenId kNumReserved = 5;

}  // namespace groundgen
