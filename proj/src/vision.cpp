#include "lbi/vision.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace lbi::vision {

namespace {

using env::kNumUnitTypes;
using env::Scenario;
using env::UnitSpec;
using env::UnitType;

constexpr std::array<std::array<float, 3>, env::kNumTerrains> kTerrainColor{{
    {0.13f, 0.35f, 0.16f},  // grassland
    {0.55f, 0.45f, 0.22f},  // desert
    {0.65f, 0.70f, 0.78f},  // icefield
}};
constexpr std::array<const char*, env::kNumTerrains> kTerrainName{"grassland", "desert",
                                                                  "icefield"};
constexpr std::array<const char*, kNumUnitTypes> kTypeName{"melee", "ranged", "healer"};

constexpr std::array<float, 3> kAllyColor{0.20f, 0.40f, 1.00f};
constexpr std::array<float, 3> kEnemyColor{1.00f, 0.25f, 0.20f};
constexpr std::array<float, 3> kBarBack{0.15f, 0.15f, 0.15f};

// 3 rows x 4 cols sprite bitmaps below the 1 px health bar row.
// Diamond stands in for the melee circle at this resolution.
constexpr std::array<std::array<uint8_t, 12>, kNumUnitTypes> kSprite{{
    {0, 1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 0},  // melee
    {0, 1, 1, 0, 0, 1, 1, 0, 1, 1, 1, 1},  // ranged
    {1, 0, 0, 1, 0, 1, 1, 0, 1, 0, 0, 1},  // healer
}};

int grid_y_offset(const Scenario& scn) { return (kFrameH - scn.grid_h * kCellPx) / 2; }
int grid_x_offset(const Scenario& scn) { return (kFrameW - scn.grid_w * kCellPx) / 2; }

void draw_unit(Frame& f, int x0, int y0, const UnitSpec& spec, float hp_frac) {
  const auto& color = spec.team == env::Team::kAlly ? kAllyColor : kEnemyColor;
  const auto& sprite = kSprite[static_cast<int>(spec.unit_type)];
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < kCellPx; ++c)
      if (sprite[r * kCellPx + c])
        for (int ch = 0; ch < 3; ++ch) f.at(y0 + 1 + r, x0 + c, ch) = color[ch];
  // Health bar: green mass proportional to hp, antialiased in the last pixel
  // so every hp level renders distinctly.
  const float mass = std::clamp(hp_frac, 0.0f, 1.0f) * kCellPx;
  for (int c = 0; c < kCellPx; ++c) {
    const float fill = std::clamp(mass - static_cast<float>(c), 0.0f, 1.0f);
    f.at(y0, x0 + c, 0) = kBarBack[0] * (1.0f - fill);
    f.at(y0, x0 + c, 1) = kBarBack[1] * (1.0f - fill) + fill;
    f.at(y0, x0 + c, 2) = kBarBack[2] * (1.0f - fill);
  }
}

std::string join_counts(const std::array<int, kNumUnitTypes>& counts) {
  std::vector<std::string> parts;
  for (int t = 0; t < kNumUnitTypes; ++t)
    if (counts[t] > 0)
      parts.push_back(std::to_string(counts[t]) + " " + kTypeName[t]);
  if (parts.empty()) return "no units";
  std::string out = parts[0];
  for (size_t i = 1; i < parts.size(); ++i)
    out += (i + 1 == parts.size() ? " and " : ", ") + parts[i];
  return out;
}

}  // namespace

std::string TaskDescription::text() const {
  std::ostringstream os;
  os << "Consider that we control " << join_counts(ally_type_counts) << " on "
     << kTerrainName[terrain_id] << ". The enemy has " << join_counts(enemy_type_counts)
     << ". Reach an outcome where the enemies' remaining health totals "
     << terminal_enemy_hp_sum << ".";
  return os.str();
}

json TaskDescription::to_json() const {
  return json{{"terrain", terrain_id},
              {"n", n_allies},
              {"m", n_enemies},
              {"ally_type_counts", ally_type_counts},
              {"enemy_type_counts", enemy_type_counts},
              {"terminal_enemy_hp_sum", terminal_enemy_hp_sum},
              {"enemy_max_hp_sum", enemy_max_hp_sum},
              {"text", text()}};
}

TaskDescription TaskDescription::from_json(const json& j) {
  TaskDescription d;
  d.terrain_id = j.at("terrain").get<int>();
  d.n_allies = j.at("n").get<int>();
  d.n_enemies = j.at("m").get<int>();
  for (int t = 0; t < kNumUnitTypes; ++t) {
    d.ally_type_counts[t] = j.at("ally_type_counts").at(t).get<int>();
    d.enemy_type_counts[t] = j.at("enemy_type_counts").at(t).get<int>();
  }
  d.terminal_enemy_hp_sum = j.at("terminal_enemy_hp_sum").get<int>();
  d.enemy_max_hp_sum = j.at("enemy_max_hp_sum").get<int>();
  return d;
}

DescriptorVec encode_description(const TaskDescription& desc) {
  DescriptorVec v{};
  v[desc.terrain_id] = 1.0f;
  for (int t = 0; t < kNumUnitTypes; ++t) {
    v[3 + t] = static_cast<float>(desc.ally_type_counts[t]) / 8.0f;
    v[6 + t] = static_cast<float>(desc.enemy_type_counts[t]) / 8.0f;
  }
  v[kDescriptorHpIndex] =
      desc.enemy_max_hp_sum > 0
          ? static_cast<float>(desc.terminal_enemy_hp_sum) / static_cast<float>(desc.enemy_max_hp_sum)
          : 0.0f;
  return v;
}

namespace {

TaskDescription describe_base(const Scenario& scn) {
  TaskDescription d;
  d.terrain_id = scn.terrain_id;
  d.n_allies = scn.n_allies();
  d.n_enemies = scn.n_enemies();
  for (const UnitSpec& u : scn.ally_units) d.ally_type_counts[static_cast<int>(u.unit_type)]++;
  for (const UnitSpec& u : scn.enemy_units) {
    d.enemy_type_counts[static_cast<int>(u.unit_type)]++;
    d.enemy_max_hp_sum += u.max_hp;
  }
  return d;
}

}  // namespace

TaskDescription describe_terminal(const Scenario& scn, const env::EnvState& terminal) {
  TaskDescription d = describe_base(scn);
  for (int e = 0; e < scn.n_enemies(); ++e)
    d.terminal_enemy_hp_sum += std::max(0, terminal.hp[scn.n_allies() + e]);
  return d;
}

int enemy_hp_sum_from_vec(const Scenario& scn, const std::vector<float>& state_vec) {
  int total = 0;
  for (int e = 0; e < scn.n_enemies(); ++e) {
    const int u = scn.n_allies() + e;
    if (state_vec[env::state_alive_index(u)] < 0.5f) continue;
    const float frac = std::clamp(state_vec[env::state_health_index(u)], 0.0f, 1.0f);
    total += static_cast<int>(std::lround(frac * scn.unit(u).max_hp));
  }
  return total;
}

TaskDescription describe_from_vec(const Scenario& scn, const std::vector<float>& terminal_vec) {
  TaskDescription d = describe_base(scn);
  d.terminal_enemy_hp_sum = enemy_hp_sum_from_vec(scn, terminal_vec);
  return d;
}

TaskDescription describe_victory(const Scenario& scn, int terrain_id) {
  TaskDescription d = describe_base(scn);
  d.terrain_id = terrain_id;
  d.terminal_enemy_hp_sum = 0;
  return d;
}

env::EnvState state_from_vector(const Scenario& scn, const std::vector<float>& vec) {
  if (static_cast<int>(vec.size()) != env::state_dim(scn))
    throw ContractViolation("state vector length mismatch for scenario '" + scn.name + "'");
  env::EnvState st;
  const int total = scn.n_units();
  st.positions.assign(total, {0, 0});
  st.hp.assign(total, 0);
  st.cooldowns.assign(total, 0);
  for (int u = 0; u < total; ++u) {
    if (vec[env::state_alive_index(u)] < 0.5f) continue;
    const UnitSpec& spec = scn.unit(u);
    const float hp_frac = std::clamp(vec[env::state_health_index(u)], 0.0f, 1.0f);
    st.hp[u] = std::clamp(static_cast<int>(std::lround(hp_frac * spec.max_hp)), 0, spec.max_hp);
    const int x = static_cast<int>(std::lround(vec[env::state_x_index(u)] * scn.grid_w));
    const int y = static_cast<int>(std::lround(vec[env::state_y_index(u)] * scn.grid_h));
    st.positions[u] = {std::clamp(x, 0, scn.grid_w - 1), std::clamp(y, 0, scn.grid_h - 1)};
    st.cooldowns[u] = vec[u * env::kStateBlock + 3] > 0.5f ? env::kCooldownSteps : 0;
  }
  int terrain = 0;
  float best = -1.0f;
  for (int t = 0; t < env::kNumTerrains; ++t)
    if (vec[env::kStateBlock * total + t] > best) {
      best = vec[env::kStateBlock * total + t];
      terrain = t;
    }
  st.terrain_id = terrain;
  return st;
}

Frame augment(const Scenario& scn, const env::EnvState& state, int new_terrain) {
  if (new_terrain < 0 || new_terrain >= env::kNumTerrains)
    throw ConfigError("terrain id " + std::to_string(new_terrain) + " out of range [0,2]");
  Frame f;
  const auto& bg = kTerrainColor[new_terrain];
  for (int y = 0; y < kFrameH; ++y)
    for (int x = 0; x < kFrameW; ++x)
      for (int c = 0; c < 3; ++c) f.at(y, x, c) = bg[c];
  const int ox = grid_x_offset(scn);
  const int oy = grid_y_offset(scn);
  for (int u = 0; u < scn.n_units(); ++u) {
    if (!state.alive(u)) continue;
    const UnitSpec& spec = scn.unit(u);
    const float hp_frac =
        static_cast<float>(state.hp[u]) / static_cast<float>(spec.max_hp);
    draw_unit(f, ox + state.positions[u].first * kCellPx,
              oy + state.positions[u].second * kCellPx, spec, hp_frac);
  }
  return f;
}

Frame render(const Scenario& scn, const env::EnvState& state) {
  return augment(scn, state, state.terrain_id);
}

Frame render_vec(const Scenario& scn, const std::vector<float>& state_vec) {
  return render(scn, state_from_vector(scn, state_vec));
}

void write_png(const std::filesystem::path& path, const Frame& frame) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw ConfigError("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw ConfigError("png write failed for '" + path.string() + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, kFrameW, kFrameH, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<uint8_t> row(kFrameW * 3);
  for (int y = 0; y < kFrameH; ++y) {
    for (int x = 0; x < kFrameW; ++x)
      for (int c = 0; c < 3; ++c)
        row[x * 3 + c] = static_cast<uint8_t>(
            std::lround(std::clamp(frame.at(y, x, c), 0.0f, 1.0f) * 255.0f));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Frame read_png(const std::filesystem::path& path) {
  std::FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw ConfigError("cannot open '" + path.string() + "' for reading");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw ConfigError("png read failed for '" + path.string() + "'");
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  if (w != kFrameW || h != kFrameH)
    throw ConfigError("png '" + path.string() + "' is not 64x64");
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  Frame f;
  std::vector<uint8_t> row(png_get_rowbytes(png, info));
  for (int y = 0; y < kFrameH; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < kFrameW; ++x)
      for (int c = 0; c < 3; ++c) f.at(y, x, c) = static_cast<float>(row[x * 3 + c]) / 255.0f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return f;
}

}  // namespace lbi::vision
