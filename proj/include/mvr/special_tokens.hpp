#pragma once

namespace mvr {

// Reserved vocabulary ids, fixed across every corpus.
inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kMaskId = 3;
inline constexpr int kUnkId = 4;
inline constexpr int kNumReservedIds = 5;

}  // namespace mvr
