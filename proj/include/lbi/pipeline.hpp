#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lbi/common.hpp"
#include "lbi/data.hpp"
#include "lbi/dynamics.hpp"
#include "lbi/env.hpp"
#include "lbi/reward.hpp"
#include "lbi/solver.hpp"
#include "lbi/vision.hpp"
#include "lbi/vqvae.hpp"

namespace lbi::pipeline {

// Scenario lookup: the literal path, then `<name>.json`, then
// `$LBI_SCENARIO_DIR/<name>.json`, then `scenarios/<name>.json`.
env::Scenario resolve_scenario(const std::string& name);

struct PipelineConfig {
  std::vector<std::string> scenarios = {"m3v3"};  // collection + world-model training
  std::string solve_scenario;                     // defaults to scenarios[0]
  uint64_t seed = 0;
  std::vector<uint64_t> solve_seeds = {0};        // one policy per arm per entry
  int episodes = 200;                             // collected per scenario
  std::string collect_policy = "mixed";
  int eval_episodes = 16;
  double train_frac = 0.9;  // train/val split for the world-model stages

  vq::VqConfig tokenizer;
  dyn::DynamicsConfig dynamics;
  reward::RewardConfig reward;
  solver::SolverConfig solver;
  solver::BcConfig bc;

  bool with_bc = true;      // behavior-cloning comparison arm
  bool with_gtr = false;    // offline ground-truth-reward comparison arm
  bool with_random = true;  // uniform-random row in the evaluation block

  // Ablation switches; tags() lists the active ones.
  bool no_residual = false;          // wo-RT
  bool no_image_ref = false;         // wo-IR
  bool gt_image = false;             // GTI
  bool no_reward_constraint = false; // wo-RC
  bool no_behavior_reg = false;      // wo-BR
  bool gt_reward = false;            // GTR (primary arm trains on stored rewards)

  std::filesystem::path out_dir;

  std::vector<std::string> tags() const;
  void validate() const;  // throws ConfigError
  json to_json() const;
  static PipelineConfig from_json(const json& j);
};

// Runs collect -> tokenizer -> dynamics -> reward -> solve -> eval, caching
// each stage behind a content hash so identical reruns skip completed work.
// Writes resolved_config.json, report.json, and report.schema.json under
// cfg.out_dir and returns the report. A failing stage throws DomainError
// naming the stage; artifacts from completed stages stay on disk.
json run_pipeline(const PipelineConfig& cfg);

// --- answers ----------------------------------------------------------------

struct Answer {
  vision::TaskDescription description;
  std::vector<vision::Frame> frames;             // horizon + 1; terminal frame repeats
  std::vector<std::vector<int>> actions;         // [horizon][n]; no-op once frozen
  std::vector<std::vector<std::string>> labels;  // [horizon][n]
  std::vector<std::vector<float>> rewards;       // [horizon][n] relabeled
  int simulated_steps = 0;                       // steps before the rollout froze
  std::string frame_source;                      // "tokens" or "state"
  json to_json() const;                          // everything except pixels
};

// One greedy policy rollout inside the dynamics model, decoded to frames and
// annotated with action labels and relabeled per-step rewards.
Answer make_answer(dyn::DynamicsModel& dynamics, vq::VqVae& tokenizer,
                   reward::RewardModel& reward_model, solver::PolicyHandle& policy,
                   const env::Scenario& scn, const vision::TaskDescription& task, int horizon,
                   uint64_t seed);

// frame_000.png .. frame_<horizon>.png plus answer.json under out_dir.
void write_answer(const Answer& answer, const std::filesystem::path& out_dir);

// --- evaluation reports -------------------------------------------------------

solver::EvalResult random_eval(const env::Scenario& scn, int episodes, uint64_t seed);

// One row per policy checkpoint plus an optional uniform-random baseline;
// win rate and return are aggregated across >= 2 seeds. Soft-Q rows need
// dynamics and tokenizer; pass null when every row acts from its own head.
json eval_report(const std::vector<std::filesystem::path>& policies,
                 dyn::DynamicsModel* dynamics, vq::VqVae* tokenizer, const env::Scenario& scn,
                 const vision::TaskDescription& task, const std::vector<uint64_t>& seeds,
                 int episodes, bool with_random);

// Fixed-precision text table whose cells are formatted from the JSON values.
std::string render_table(const json& report);

// --- report schema ------------------------------------------------------------

// Schema for run_pipeline reports (JSON-schema subset: type, properties,
// required, items, enum, additionalProperties).
json report_schema();

// Throws DomainError naming the offending path on the first violation.
void validate_schema(const json& value, const json& schema, const std::string& path = "$");

}  // namespace lbi::pipeline
