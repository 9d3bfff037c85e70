#include "lbi/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

namespace lbi::data {

static_assert(std::endian::native == std::endian::little,
              "payload format is little-endian");

using env::BattleEnv;
using env::EnvState;
using env::Scenario;

double Trajectory::episode_return() const {
  return std::accumulate(rewards.begin(), rewards.end(), 0.0);
}

json Stats::to_json() const {
  json hist = json::object();
  for (auto [len, count] : length_histogram) hist[std::to_string(len)] = count;
  return json{{"mean_return", mean_return},
              {"std_return", std_return},
              {"win_rate", win_rate},
              {"length_histogram", hist}};
}

void EpisodeStore::append(Trajectory traj) {
  if (traj.states.size() != traj.actions.size() + 1)
    throw ContractViolation("trajectory must hold T+1 states for T actions");
  descriptions_.push_back(vision::describe_from_vec(scenario_, traj.states.back()));
  episodes_.push_back(std::move(traj));
}

Stats EpisodeStore::stats() const {
  if (episodes_.empty()) throw DomainError("stats() on an empty episode store");
  Stats s;
  double sum = 0.0, sq = 0.0;
  for (const Trajectory& t : episodes_) {
    const double r = t.episode_return();
    sum += r;
    sq += r * r;
    s.win_rate += t.won ? 1.0 : 0.0;
    s.length_histogram[t.T()] += 1;
  }
  const double n = static_cast<double>(episodes_.size());
  s.mean_return = sum / n;
  s.std_return = std::sqrt(std::max(0.0, sq / n - s.mean_return * s.mean_return));
  s.win_rate /= n;
  return s;
}

std::pair<EpisodeStore, EpisodeStore> EpisodeStore::split(double train_frac, double val_frac,
                                                          uint64_t seed) const {
  if (train_frac <= 0.0 || val_frac <= 0.0 || std::abs(train_frac + val_frac - 1.0) > 1e-9)
    throw ConfigError("split fractions must be positive and sum to 1");
  std::vector<int> order(episodes_.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x51A7));
  std::shuffle(order.begin(), order.end(), rng);
  const int n_train = static_cast<int>(std::llround(train_frac * static_cast<double>(size())));
  EpisodeStore train(scenario_), val(scenario_);
  for (int i = 0; i < size(); ++i) {
    const Trajectory& t = episodes_[order[i]];
    (i < n_train ? train : val).append(t);
  }
  return {std::move(train), std::move(val)};
}

namespace {

void put_f32(std::vector<char>& buf, float v) {
  const size_t at = buf.size();
  buf.resize(at + 4);
  std::memcpy(buf.data() + at, &v, 4);
}

void put_i32(std::vector<char>& buf, int32_t v) {
  const size_t at = buf.size();
  buf.resize(at + 4);
  std::memcpy(buf.data() + at, &v, 4);
}

float take_f32(const std::vector<char>& buf, size_t& at) {
  float v;
  std::memcpy(&v, buf.data() + at, 4);
  at += 4;
  return v;
}

int32_t take_i32(const std::vector<char>& buf, size_t& at) {
  int32_t v;
  std::memcpy(&v, buf.data() + at, 4);
  at += 4;
  return v;
}

}  // namespace

void EpisodeStore::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path payload_path = dir / "payload.bin";
  const fs::path manifest_path = dir / "manifest.json";
  try {
    std::vector<char> payload;
    json episodes = json::array();
    for (int e = 0; e < size(); ++e) {
      const Trajectory& t = episodes_[e];
      const size_t offset = payload.size();
      for (const auto& row : t.states)
        for (float v : row) put_f32(payload, v);
      for (const auto& step : t.obs)
        for (const auto& agent : step)
          for (float v : agent) put_f32(payload, v);
      for (const auto& row : t.actions)
        for (int32_t a : row) put_i32(payload, a);
      for (const auto& step : t.avail)
        for (const auto& agent : step)
          for (uint8_t b : agent) put_i32(payload, b);
      for (const auto& row : t.done)
        for (uint8_t b : row) put_i32(payload, b);
      for (float r : t.rewards) put_f32(payload, r);
      episodes.push_back(json{{"T", t.T()},
                              {"won", t.won},
                              {"return", t.episode_return()},
                              {"offset_bytes", offset},
                              {"description", descriptions_[e].to_json()}});
    }
    std::ofstream out(payload_path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + payload_path.string() + "'");
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.close();
    if (!out) throw ConfigError("short write to '" + payload_path.string() + "'");

    json manifest{{"format_version", 1},
                  {"scenario", scenario_.to_json()},
                  {"dims",
                   {{"state_dim", env::state_dim(scenario_)},
                    {"obs_dim", env::obs_dim(scenario_)},
                    {"n_agents", scenario_.n_allies()},
                    {"action_count", scenario_.action_count()}}},
                  {"payload_bytes", payload.size()},
                  {"checksum_crc32", crc32_tag(payload.data(), payload.size())},
                  {"episodes", episodes}};
    write_json_file(manifest_path, manifest);
  } catch (...) {
    std::error_code ec;
    fs::remove(payload_path, ec);
    fs::remove(manifest_path, ec);
    throw;
  }
}

EpisodeStore EpisodeStore::load(const std::filesystem::path& dir) {
  const json manifest = read_json_file(dir / "manifest.json");
  EpisodeStore store(Scenario::from_json(manifest.at("scenario")));
  const Scenario& scn = store.scenario_;
  const int S = env::state_dim(scn);
  const int O = env::obs_dim(scn);
  const int n = scn.n_allies();
  const int A = scn.action_count();

  std::ifstream in(dir / "payload.bin", std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + (dir / "payload.bin").string() + "'");
  std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  if (payload.size() != manifest.at("payload_bytes").get<size_t>())
    throw ConfigError("payload size mismatch in '" + dir.string() + "'");
  if (crc32_tag(payload.data(), payload.size()) !=
      manifest.at("checksum_crc32").get<std::string>())
    throw ConfigError("payload checksum mismatch in '" + dir.string() + "'");

  for (const json& ep : manifest.at("episodes")) {
    const int T = ep.at("T").get<int>();
    size_t at = ep.at("offset_bytes").get<size_t>();
    Trajectory t;
    t.won = ep.at("won").get<bool>();
    t.states.assign(T + 1, std::vector<float>(S));
    for (auto& row : t.states)
      for (float& v : row) v = take_f32(payload, at);
    t.obs.assign(T + 1, std::vector<std::vector<float>>(n, std::vector<float>(O)));
    for (auto& step : t.obs)
      for (auto& agent : step)
        for (float& v : agent) v = take_f32(payload, at);
    t.actions.assign(T, std::vector<int32_t>(n));
    for (auto& row : t.actions)
      for (int32_t& a : row) a = take_i32(payload, at);
    t.avail.assign(T + 1, std::vector<std::vector<uint8_t>>(n, std::vector<uint8_t>(A)));
    for (auto& step : t.avail)
      for (auto& agent : step)
        for (uint8_t& b : agent) b = static_cast<uint8_t>(take_i32(payload, at));
    t.done.assign(T + 1, std::vector<uint8_t>(n));
    for (auto& row : t.done)
      for (uint8_t& b : row) b = static_cast<uint8_t>(take_i32(payload, at));
    t.rewards.assign(T, 0.0f);
    for (float& r : t.rewards) r = take_f32(payload, at);
    store.episodes_.push_back(std::move(t));
    store.descriptions_.push_back(
        vision::TaskDescription::from_json(ep.at("description")));
  }
  return store;
}

PolicyKind parse_policy_kind(const std::string& s) {
  if (s == "random") return PolicyKind::kRandom;
  if (s == "scripted") return PolicyKind::kScripted;
  if (s == "qlearn") return PolicyKind::kQLearn;
  if (s == "mixed") return PolicyKind::kMixed;
  throw ConfigError("unknown policy '" + s + "' (expected random|scripted|qlearn|mixed)");
}

std::vector<int> random_actions(const BattleEnv& env, const EnvState& st,
                                std::mt19937_64& rng) {
  const int n = env.scenario().n_allies();
  std::vector<int> actions(n, env::kActionNoop);
  for (int i = 0; i < n; ++i) {
    const env::ActionMask mask = env.available_actions(st, i);
    std::vector<int> options;
    for (int a = 0; a < static_cast<int>(mask.mask.size()); ++a)
      if (mask.available(a)) options.push_back(a);
    std::uniform_int_distribution<size_t> pick(0, options.size() - 1);
    actions[i] = options[pick(rng)];
  }
  return actions;
}

namespace {

int sq_dist(std::pair<int, int> a, std::pair<int, int> b) {
  const int dx = a.first - b.first;
  const int dy = a.second - b.second;
  return dx * dx + dy * dy;
}

int move_toward(std::pair<int, int> from, std::pair<int, int> to) {
  const int dx = to.first - from.first;
  const int dy = to.second - from.second;
  if (std::abs(dx) >= std::abs(dy) && dx != 0)
    return dx > 0 ? env::kActionMoveE : env::kActionMoveW;
  if (dy != 0) return dy > 0 ? env::kActionMoveS : env::kActionMoveN;
  return env::kActionStop;
}

int nearest_visible_enemy(const BattleEnv& env, const EnvState& st, int agent) {
  const Scenario& scn = env.scenario();
  const env::UnitSpec& spec = scn.unit(agent);
  int best = -1, best_d2 = spec.sight_range * spec.sight_range + 1;
  for (int e = 0; e < scn.n_enemies(); ++e) {
    const int uid = scn.n_allies() + e;
    if (!st.alive(uid)) continue;
    const int d2 = sq_dist(st.positions[agent], st.positions[uid]);
    if (d2 < best_d2) {
      best_d2 = d2;
      best = e;
    }
  }
  return best;
}

int checked(const BattleEnv& env, const EnvState& st, int agent, int action) {
  return env.available_actions(st, agent).available(action) ? action : env::kActionStop;
}

}  // namespace

std::vector<int> scripted_actions(const BattleEnv& env, const EnvState& st) {
  const Scenario& scn = env.scenario();
  const int n = scn.n_allies();
  std::vector<int> actions(n, env::kActionNoop);
  for (int i = 0; i < n; ++i) {
    if (!st.alive(i)) continue;
    const env::UnitSpec& spec = scn.unit(i);
    if (spec.unit_type == env::UnitType::kHealer) {
      int target = -1;
      float worst = 1.0f;
      for (int j = 0; j < n; ++j) {
        if (j == i || !st.alive(j)) continue;
        if (sq_dist(st.positions[i], st.positions[j]) >
            spec.attack_range * spec.attack_range)
          continue;
        const float frac =
            static_cast<float>(st.hp[j]) / static_cast<float>(scn.unit(j).max_hp);
        if (frac < worst) {
          worst = frac;
          target = j;
        }
      }
      if (target >= 0 && worst < 1.0f) {
        actions[i] = checked(env, st, i, env::kAttackBase + target);
        continue;
      }
      // Stay with the squad: trail the nearest living ally.
      int buddy = -1, buddy_d2 = std::numeric_limits<int>::max();
      for (int j = 0; j < n; ++j) {
        if (j == i || !st.alive(j)) continue;
        const int d2 = sq_dist(st.positions[i], st.positions[j]);
        if (d2 < buddy_d2) {
          buddy_d2 = d2;
          buddy = j;
        }
      }
      if (buddy >= 0 && buddy_d2 > 2)
        actions[i] = checked(env, st, i, move_toward(st.positions[i], st.positions[buddy]));
      else
        actions[i] = env::kActionStop;
      continue;
    }
    // Focus fire: among enemies in range, hit the lowest-hp one; otherwise
    // close on the nearest visible enemy, or advance east to find one.
    int attack = -1, attack_hp = std::numeric_limits<int>::max();
    for (int e = 0; e < scn.n_enemies(); ++e) {
      const int uid = scn.n_allies() + e;
      if (!st.alive(uid)) continue;
      if (sq_dist(st.positions[i], st.positions[uid]) > spec.attack_range * spec.attack_range)
        continue;
      if (st.hp[uid] < attack_hp) {
        attack_hp = st.hp[uid];
        attack = e;
      }
    }
    if (attack >= 0) {
      actions[i] = checked(env, st, i, env::kAttackBase + attack);
      continue;
    }
    const int e = nearest_visible_enemy(env, st, i);
    if (e >= 0) {
      actions[i] =
          checked(env, st, i, move_toward(st.positions[i], st.positions[scn.n_allies() + e]));
      continue;
    }
    // Regroup with stragglers before advancing so the squad engages together.
    int buddy = -1, buddy_d2 = std::numeric_limits<int>::max();
    for (int j = 0; j < n; ++j) {
      if (j == i || !st.alive(j)) continue;
      const int d2 = sq_dist(st.positions[i], st.positions[j]);
      if (d2 < buddy_d2) {
        buddy_d2 = d2;
        buddy = j;
      }
    }
    if (buddy >= 0 && buddy_d2 > 8)
      actions[i] = checked(env, st, i, move_toward(st.positions[i], st.positions[buddy]));
    else
      actions[i] = checked(env, st, i, env::kActionMoveE);
  }
  return actions;
}

int64_t TabularQ::key(const BattleEnv& env, const EnvState& st, int agent) const {
  const Scenario& scn = env.scenario();
  const env::UnitSpec& spec = scn.unit(agent);
  const int e = nearest_visible_enemy(env, st, agent);
  int sx = 1, sy = 1, dist_bucket = 2;
  if (e >= 0) {
    const int uid = scn.n_allies() + e;
    const int dx = st.positions[uid].first - st.positions[agent].first;
    const int dy = st.positions[uid].second - st.positions[agent].second;
    sx = dx == 0 ? 1 : (dx > 0 ? 2 : 0);
    sy = dy == 0 ? 1 : (dy > 0 ? 2 : 0);
    const int d2 = dx * dx + dy * dy;
    dist_bucket = d2 <= spec.attack_range * spec.attack_range ? 0 : 1;
  }
  const int hp_bucket =
      std::min(2, st.hp[agent] * 3 / std::max(1, spec.max_hp));
  const int cd = st.cooldowns[agent] > 0 ? 1 : 0;
  int64_t k = sx;
  k = k * 3 + sy;
  k = k * 3 + dist_bucket;
  k = k * 3 + hp_bucket;
  k = k * 2 + cd;
  return k;
}

int TabularQ::concrete_action(const BattleEnv& env, const EnvState& st, int agent,
                              int abstract) const {
  const Scenario& scn = env.scenario();
  const int e = nearest_visible_enemy(env, st, agent);
  if (e < 0)
    return abstract == 1 ? checked(env, st, agent, env::kActionMoveE) : env::kActionStop;
  const int uid = scn.n_allies() + e;
  switch (abstract) {
    case 0:
      return checked(env, st, agent, env::kAttackBase + e);
    case 1:
      return checked(env, st, agent, move_toward(st.positions[agent], st.positions[uid]));
    case 2: {
      const int toward = move_toward(st.positions[agent], st.positions[uid]);
      int away = env::kActionStop;
      if (toward == env::kActionMoveN) away = env::kActionMoveS;
      if (toward == env::kActionMoveS) away = env::kActionMoveN;
      if (toward == env::kActionMoveE) away = env::kActionMoveW;
      if (toward == env::kActionMoveW) away = env::kActionMoveE;
      return checked(env, st, agent, away);
    }
    default:
      return env::kActionStop;
  }
}

int TabularQ::select(const BattleEnv& env, const EnvState& st, int agent, double eps,
                     std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < eps) {
    std::uniform_int_distribution<int> pick(0, abstract_action_count() - 1);
    return pick(rng);
  }
  const int64_t k = key(env, st, agent);
  int best = 0;
  double best_q = -1e18;
  for (int a = 0; a < abstract_action_count(); ++a) {
    const auto it = q_.find({k, a});
    const double v = it == q_.end() ? 0.0 : it->second;
    if (v > best_q) {
      best_q = v;
      best = a;
    }
  }
  return best;
}

void TabularQ::update(int64_t key, int abstract, double reward,
                      std::optional<int64_t> next_key) {
  double target = reward;
  if (next_key) {
    double best = -1e18;
    for (int a = 0; a < abstract_action_count(); ++a) {
      const auto it = q_.find({*next_key, a});
      best = std::max(best, it == q_.end() ? 0.0 : it->second);
    }
    target += gamma_ * best;
  }
  double& q = q_[{key, abstract}];
  q += lr_ * (target - q);
}

EpisodeStore collect(const Scenario& scenario, PolicyKind kind, int episodes, uint64_t seed) {
  if (episodes < 1) throw ConfigError("episode count must be >= 1");
  BattleEnv env(scenario);
  EpisodeStore store(scenario);
  TabularQ learner(0.2, 0.99);
  const int n = scenario.n_allies();

  int qlearn_total = 0;
  for (int e = 0; e < episodes; ++e) {
    PolicyKind k = kind;
    if (kind == PolicyKind::kMixed)
      k = (e % 5 <= 1) ? PolicyKind::kScripted
                       : (e % 5 <= 3 ? PolicyKind::kQLearn : PolicyKind::kRandom);
    if (k == PolicyKind::kQLearn) qlearn_total += 1;
  }

  int qlearn_seen = 0;
  for (int e = 0; e < episodes; ++e) {
    PolicyKind k = kind;
    if (kind == PolicyKind::kMixed)
      k = (e % 5 <= 1) ? PolicyKind::kScripted
                       : (e % 5 <= 3 ? PolicyKind::kQLearn : PolicyKind::kRandom);
    std::mt19937_64 rng(mix_seed(seed, 2 * static_cast<uint64_t>(e) + 1));
    double eps = 0.1;
    if (k == PolicyKind::kQLearn) {
      const double frac =
          qlearn_total > 1 ? static_cast<double>(qlearn_seen) / (qlearn_total - 1) : 1.0;
      eps = 1.0 - 0.9 * frac;
      qlearn_seen += 1;
    }

    env::ResetResult reset = env.reset(mix_seed(seed, 2 * static_cast<uint64_t>(e)));
    EnvState st = std::move(reset.state);
    Trajectory traj;
    auto record_state = [&](const EnvState& s, const std::vector<uint8_t>& done_row) {
      traj.states.push_back(env.state_vector(s));
      std::vector<std::vector<float>> obs_row;
      std::vector<std::vector<uint8_t>> avail_row;
      for (int i = 0; i < n; ++i) {
        obs_row.push_back(env.observe(s, i));
        avail_row.push_back(env.available_actions(s, i).mask);
      }
      traj.obs.push_back(std::move(obs_row));
      traj.avail.push_back(std::move(avail_row));
      traj.done.push_back(done_row);
    };
    record_state(st, std::vector<uint8_t>(n, 0));

    bool terminated = false;
    while (!terminated) {
      std::vector<int> actions;
      std::vector<int64_t> keys(n, 0);
      std::vector<int> abstracts(n, 3);
      switch (k) {
        case PolicyKind::kRandom:
          actions = random_actions(env, st, rng);
          break;
        case PolicyKind::kScripted:
          actions = scripted_actions(env, st);
          break;
        default: {
          actions.assign(n, env::kActionNoop);
          for (int i = 0; i < n; ++i) {
            if (!st.alive(i)) continue;
            keys[i] = learner.key(env, st, i);
            abstracts[i] = learner.select(env, st, i, eps, rng);
            actions[i] = learner.concrete_action(env, st, i, abstracts[i]);
          }
          break;
        }
      }
      env::StepResult step = env.step(st, actions);
      if (k == PolicyKind::kQLearn) {
        for (int i = 0; i < n; ++i) {
          if (!st.alive(i)) continue;
          std::optional<int64_t> next;
          if (!step.terminated && step.state.alive(i))
            next = learner.key(env, step.state, i);
          learner.update(keys[i], abstracts[i], step.global_reward, next);
        }
      }
      st = std::move(step.state);
      traj.actions.push_back(std::vector<int32_t>(actions.begin(), actions.end()));
      traj.rewards.push_back(static_cast<float>(step.global_reward));
      record_state(st, step.per_agent_done);
      terminated = step.terminated;
      traj.won = step.won;
    }
    store.append(std::move(traj));
  }
  return store;
}

void materialize_frames(const EpisodeStore& store, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  char name[64];
  for (int e = 0; e < store.size(); ++e) {
    const Trajectory& t = store.episode(e);
    for (size_t i = 0; i < t.states.size(); ++i) {
      std::snprintf(name, sizeof(name), "ep%05d_t%03zu.png", e, i);
      vision::write_png(dir / name, vision::render_vec(store.scenario(), t.states[i]));
    }
  }
}

}  // namespace lbi::data
