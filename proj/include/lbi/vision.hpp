#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lbi/env.hpp"

namespace lbi::vision {

inline constexpr int kFrameH = 64;
inline constexpr int kFrameW = 64;
inline constexpr int kFrameC = 3;
inline constexpr int kCellPx = 4;

// Row-major HWC float image, values in [0, 1].
struct Frame {
  std::vector<float> pixels;
  Frame() : pixels(kFrameH * kFrameW * kFrameC, 0.0f) {}
  float& at(int y, int x, int c) { return pixels[(y * kFrameW + x) * kFrameC + c]; }
  float at(int y, int x, int c) const { return pixels[(y * kFrameW + x) * kFrameC + c]; }
};

struct TaskDescription {
  int terrain_id = 0;
  int n_allies = 0;
  int n_enemies = 0;
  std::array<int, env::kNumUnitTypes> ally_type_counts{};
  std::array<int, env::kNumUnitTypes> enemy_type_counts{};
  int terminal_enemy_hp_sum = 0;
  int enemy_max_hp_sum = 0;  // normalization base for the hp coordinate

  std::string text() const;
  json to_json() const;
  static TaskDescription from_json(const json& j);
};

// terrain one-hot (3) + ally counts/8 (3) + enemy counts/8 (3) + hp fraction.
inline constexpr int kDescriptorDim = 10;
inline constexpr int kDescriptorHpIndex = 9;
using DescriptorVec = std::array<float, kDescriptorDim>;

DescriptorVec encode_description(const TaskDescription& desc);

TaskDescription describe_terminal(const env::Scenario& scn, const env::EnvState& terminal);
TaskDescription describe_from_vec(const env::Scenario& scn, const std::vector<float>& terminal_vec);
// The "wipe out every enemy" goal: terminal enemy hp pinned to zero.
TaskDescription describe_victory(const env::Scenario& scn, int terrain_id);
int enemy_hp_sum_from_vec(const env::Scenario& scn, const std::vector<float>& state_vec);

// Inverse of BattleEnv::state_vector up to rounding; used to render frames
// for model-predicted states.
env::EnvState state_from_vector(const env::Scenario& scn, const std::vector<float>& vec);

Frame render(const env::Scenario& scn, const env::EnvState& state);
Frame augment(const env::Scenario& scn, const env::EnvState& state, int new_terrain);
Frame render_vec(const env::Scenario& scn, const std::vector<float>& state_vec);

void write_png(const std::filesystem::path& path, const Frame& frame);
Frame read_png(const std::filesystem::path& path);

}  // namespace lbi::vision
