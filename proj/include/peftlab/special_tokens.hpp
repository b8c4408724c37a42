#pragma once

namespace peftlab {

// Reserved vocabulary ids, fixed across every vocabulary this library builds
// or loads. Vocabulary files must list these four symbols on their first four
// lines.
inline constexpr int kBosId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kPadId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReservedIds = 4;

}  // namespace peftlab
