#pragma once

namespace ilmf {

// Reserved vocabulary ids, fixed across every model and file format.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReservedIds = 4;

}  // namespace ilmf
