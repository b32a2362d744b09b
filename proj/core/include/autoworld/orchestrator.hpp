#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "autoworld/conditioning.hpp"
#include "autoworld/diffusion.hpp"
#include "autoworld/flow.hpp"
#include "autoworld/grid.hpp"
#include "autoworld/scenario.hpp"
#include "autoworld/traffic.hpp"

namespace autoworld::sim {

enum class MapTopology { kStraight, kCurve, kIntersection };

struct SynthParams {
  int agent_count = 4;
  MapTopology topology = MapTopology::kStraight;
  double speed_min = 5.0;
  double speed_max = 12.0;
  int history_steps = 10;  // frames of history before the current one
  int horizon = 80;
  double dt = 0.1;
};

// Seed-deterministic synthetic scene: agents placed on lanes with
// kinematically consistent histories (constant controls integrated
// forward), ground-truth futures, roadside posts and a per-frame point
// stream in the ego frame.
Scenario synth_scenario(std::uint64_t seed, const SynthParams& params);

// Points on each agent's rectangle boundary (world frame, several
// heights). Spacing is fixed so regeneration is deterministic.
std::vector<std::array<double, 3>> agent_boundary_points(
    const std::vector<traffic::AgentState>& states,
    const std::vector<traffic::Footprint>& footprints);

// Vertical point stacks at the static post bases.
std::vector<std::array<double, 3>> post_points(
    const std::vector<std::array<double, 2>>& posts);

// Full synthetic sweep for one frame, transformed into the ego frame.
std::vector<std::array<double, 3>> sensor_points(
    const std::vector<traffic::AgentState>& states,
    const std::vector<traffic::Footprint>& footprints,
    const std::vector<std::array<double, 2>>& posts,
    const traffic::AgentState& ego);

// Joint agent states at an absolute frame index; 0..T_h are history,
// later frames come from the ground-truth future.
std::vector<traffic::AgentState> joint_states_at(const Scenario& scenario,
                                                 int frame);

struct TrainConfig {
  occ::GridConfig grid = occ::GridConfig::desk();
  double lambda = 0.2;
  int transition_offset = 1;  // frame offset for occupancy transitions
  int flow_bins = 8;
  int denoiser_bins = 4;
  int flow_steps = 20;
  int noise_steps = 50;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int embed_dim = 32;
  int pooler_stride = 10;
  int flow_draws_per_scene = 6;
  int denoiser_draws_per_scene = 6;
  std::uint64_t seed = 0;
  traffic::KinematicLimits limits;
};

struct ModelBundle {
  occ::GridConfig grid;
  flow::VelocityFieldSpec velocity;
  diff::DenoiserSpec denoiser;
  cond::PoolerParams pooler;
  diff::NoiseSchedule schedule;
  int flow_steps = 20;
  int horizon = 80;
  int history_steps = 10;
  double dt = 0.1;
  double lambda = 0.2;
  traffic::KinematicLimits limits;
  bool weights_degenerate = false;  // all-static data, weight map was 1
};

// Full training pass: occupancy/latent construction, motion-aware weight
// aggregation, closed-form velocity fit, one world rollout per scene for
// conditioning, denoiser fit. Deterministic per config seed.
ModelBundle train_toy(const std::vector<Scenario>& scenarios,
                      const TrainConfig& cfg);

struct Rollout {
  int world_index = 0;
  int motion_index = 0;
  diff::JointActions actions;
  std::vector<std::vector<traffic::AgentState>> states;  // per agent, future
  traffic::ViolationRates metrics;
  double quality = 1.0;
};

struct RolloutSet {
  int n = 1;
  int m = 1;
  double dt = 0.1;
  std::uint64_t seed = 0;
  std::vector<Rollout> rollouts;
};

// Two-stage guided generation: n world rollouts, m motion samples per
// rollout, n*m joint futures. Guidance strengths 0/0 reproduce the
// independent pipeline bit-exactly for the same seed.
RolloutSet cascaded_inference(const Scenario& scenario,
                              const ModelBundle& models, int n, int m,
                              double gamma_world, double gamma_motion,
                              std::uint64_t seed);

// History latents and ego poses for the world-model condition.
flow::WorldCondition world_condition(const Scenario& scenario,
                                     const occ::GridConfig& grid);

enum class SelectionPolicy { kBestQuality, kFirst };

struct ReplanLog {
  int replan_index = 0;
  int world_index = 0;
  int motion_index = 0;
  double quality = 1.0;
};

struct ClosedLoopResult {
  std::vector<std::vector<traffic::AgentState>> committed;  // per agent
  std::vector<diff::JointActions> committed_actions;        // per replan
  std::vector<ReplanLog> replans;
  double dt = 0.1;
};

// Receding-horizon execution: every replan interval run cascaded
// inference from the current state, commit the selected rollout's next
// sim_hz/replan_hz steps for all agents, advance histories and the
// regenerated point stream.
ClosedLoopResult closed_loop_simulate(const Scenario& scenario,
                                      const ModelBundle& models,
                                      int replan_hz, int sim_hz,
                                      double total_s, int n, int m,
                                      double gamma_world, double gamma_motion,
                                      SelectionPolicy selection,
                                      std::uint64_t seed);

// JSON round trips (field names documented in docs/formats.md).
void save_scenario(const std::string& path, const Scenario& scenario);
Scenario load_scenario(const std::string& path);
void save_rollouts(const std::string& path, const RolloutSet& set);
RolloutSet load_rollouts(const std::string& path);

// Model bundle text round trip (17-significant-digit decimals).
void save_models(const std::string& path, const ModelBundle& bundle);
ModelBundle load_models(const std::string& path);

}  // namespace autoworld::sim
