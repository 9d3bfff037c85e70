#pragma once

namespace lbi::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitStageFailure = 3;

int run(int argc, char** argv);

}  // namespace lbi::cli
