#include "autoworld/orchestrator.hpp"

#include "autoworld/model_io.hpp"
#include "autoworld/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace autoworld::sim {

using json = nlohmann::ordered_json;
using traffic::AgentState;

namespace {

constexpr double kLaneWidth = 3.6;
constexpr double kAgentSpacing = 16.0;

struct LaneSlot {
  AgentState start;    // state at the oldest history frame
  double yawrate = 0;  // constant control realizing the lane geometry
};

struct SynthWorld {
  traffic::LaneMap map;
  std::vector<LaneSlot> slots;  // lane-major placement slots
};

SynthWorld build_straight(int lanes, int slots_per_lane, Rng& rng,
                          double speed_min, double speed_max) {
  SynthWorld world;
  for (int l = 0; l < lanes; ++l) {
    traffic::LanePolyline lane;
    lane.half_width = 0.5 * kLaneWidth;
    const double y = (l - (lanes - 1) * 0.5) * kLaneWidth;
    for (double x = -60.0; x <= 150.0; x += 10.0) lane.points.push_back({x, y});
    world.map.polylines.push_back(lane);
  }
  for (int s = 0; s < slots_per_lane; ++s) {
    for (int l = 0; l < lanes; ++l) {
      const double y = (l - (lanes - 1) * 0.5) * kLaneWidth;
      const double v = rng.uniform(speed_min, speed_max);
      LaneSlot slot;
      slot.start =
          AgentState{-45.0 + s * kAgentSpacing + rng.uniform(0.0, 4.0), y, v, 0.0};
      world.slots.push_back(slot);
    }
  }
  return world;
}

SynthWorld build_curve(int lanes, int slots_per_lane, Rng& rng,
                       double speed_min, double speed_max) {
  SynthWorld world;
  const double cx = 0.0, cy = 60.0;
  for (int l = 0; l < lanes; ++l) {
    traffic::LanePolyline lane;
    lane.half_width = 0.5 * kLaneWidth;
    const double r = 60.0 - (l - (lanes - 1) * 0.5) * kLaneWidth;
    for (double phi = -2.0; phi <= -0.2; phi += 0.05)
      lane.points.push_back({cx + r * std::cos(phi), cy + r * std::sin(phi)});
    world.map.polylines.push_back(lane);
  }
  for (int s = 0; s < slots_per_lane; ++s) {
    for (int l = 0; l < lanes; ++l) {
      const double r = 60.0 - (l - (lanes - 1) * 0.5) * kLaneWidth;
      const double v = rng.uniform(speed_min, speed_max);
      const double phi =
          -2.0 + (s * kAgentSpacing + rng.uniform(0.0, 4.0)) / r;
      LaneSlot slot;
      slot.start = AgentState{cx + r * std::cos(phi), cy + r * std::sin(phi), v,
                              occ::wrap_angle(phi + 0.5 * std::numbers::pi)};
      slot.yawrate = v / r;  // counterclockwise arc
      world.slots.push_back(slot);
    }
  }
  return world;
}

SynthWorld build_intersection(int slots_per_lane, Rng& rng, double speed_min,
                              double speed_max) {
  SynthWorld world;
  // Two eastbound lanes and two northbound lanes crossing at the origin.
  for (int l = 0; l < 2; ++l) {
    traffic::LanePolyline lane;
    lane.half_width = 0.5 * kLaneWidth;
    const double y = (l - 0.5) * kLaneWidth;
    for (double x = -80.0; x <= 120.0; x += 10.0) lane.points.push_back({x, y});
    world.map.polylines.push_back(lane);
  }
  for (int l = 0; l < 2; ++l) {
    traffic::LanePolyline lane;
    lane.half_width = 0.5 * kLaneWidth;
    const double x = (l - 0.5) * kLaneWidth;
    for (double y = -80.0; y <= 120.0; y += 10.0) lane.points.push_back({x, y});
    world.map.polylines.push_back(lane);
  }
  for (int s = 0; s < slots_per_lane; ++s) {
    for (int l = 0; l < 4; ++l) {
      const double v = rng.uniform(speed_min, speed_max);
      const double offset = -55.0 + s * kAgentSpacing + rng.uniform(0.0, 4.0);
      LaneSlot slot;
      if (l < 2) {
        const double y = (l - 0.5) * kLaneWidth;
        slot.start = AgentState{offset, y, v, 0.0};
      } else {
        const double x = (l - 2 - 0.5) * kLaneWidth;
        slot.start =
            AgentState{x, offset, v, 0.5 * std::numbers::pi};
      }
      world.slots.push_back(slot);
    }
  }
  return world;
}

}  // namespace

std::vector<std::array<double, 3>> agent_boundary_points(
    const std::vector<AgentState>& states,
    const std::vector<traffic::Footprint>& footprints) {
  constexpr double kSpacing = 0.8;
  constexpr double kHeights[2] = {0.5, 1.4};

  std::vector<std::array<double, 3>> points;
  for (std::size_t a = 0; a < states.size(); ++a) {
    const auto& s = states[a];
    const auto f = a < footprints.size() ? footprints[a] : traffic::Footprint{};
    const double c = std::cos(s.theta), sn = std::sin(s.theta);
    const double hx = 0.5 * f.length, hy = 0.5 * f.width;
    // Four corners, counterclockwise in the body frame.
    const double corners[4][2] = {
        {hx, hy}, {-hx, hy}, {-hx, -hy}, {hx, -hy}};
    for (int e = 0; e < 4; ++e) {
      const double* p0 = corners[e];
      const double* p1 = corners[(e + 1) % 4];
      const double len = std::hypot(p1[0] - p0[0], p1[1] - p0[1]);
      const int steps = std::max(1, static_cast<int>(len / kSpacing));
      for (int i = 0; i < steps; ++i) {
        const double t = static_cast<double>(i) / steps;
        const double bx = p0[0] + t * (p1[0] - p0[0]);
        const double by = p0[1] + t * (p1[1] - p0[1]);
        for (double z : kHeights)
          points.push_back({s.x + c * bx - sn * by, s.y + sn * bx + c * by, z});
      }
    }
  }
  return points;
}

std::vector<std::array<double, 3>> post_points(
    const std::vector<std::array<double, 2>>& posts) {
  std::vector<std::array<double, 3>> points;
  for (const auto& p : posts)
    for (double z = 0.4; z <= 2.3; z += 0.6)
      points.push_back({p[0], p[1], z});
  return points;
}

std::vector<std::array<double, 3>> sensor_points(
    const std::vector<AgentState>& states,
    const std::vector<traffic::Footprint>& footprints,
    const std::vector<std::array<double, 2>>& posts,
    const AgentState& ego) {
  auto points = agent_boundary_points(states, footprints);
  const auto fixed = post_points(posts);
  points.insert(points.end(), fixed.begin(), fixed.end());

  const double c = std::cos(ego.theta), s = std::sin(ego.theta);
  for (auto& p : points) {
    const double dx = p[0] - ego.x;
    const double dy = p[1] - ego.y;
    p[0] = c * dx + s * dy;
    p[1] = -s * dx + c * dy;
  }
  return points;
}

std::vector<AgentState> joint_states_at(const Scenario& scenario, int frame) {
  std::vector<AgentState> states;
  states.reserve(scenario.agents.size());
  const int history = scenario.history_frames();
  for (const auto& agent : scenario.agents) {
    if (frame < history) {
      states.push_back(agent.history[static_cast<std::size_t>(frame)]);
    } else {
      const int fut = frame - history;
      if (fut >= static_cast<int>(agent.gt_future.size()))
        throw std::invalid_argument("joint_states_at: frame beyond horizon");
      states.push_back(agent.gt_future[static_cast<std::size_t>(fut)]);
    }
  }
  return states;
}

Scenario synth_scenario(std::uint64_t seed, const SynthParams& params) {
  if (params.agent_count < 1)
    throw std::invalid_argument("synth_scenario: agent_count < 1");
  if (!(params.speed_max >= params.speed_min) || params.speed_min < 0.0)
    throw std::invalid_argument("synth_scenario: bad speed range");

  Rng rng(derive_seed(seed, "scenario"));
  constexpr int kSlotsPerLane = 4;
  SynthWorld world;
  switch (params.topology) {
    case MapTopology::kStraight:
      world = build_straight(3, kSlotsPerLane, rng, params.speed_min,
                             params.speed_max);
      break;
    case MapTopology::kCurve:
      world = build_curve(3, kSlotsPerLane, rng, params.speed_min,
                          params.speed_max);
      break;
    case MapTopology::kIntersection:
      world = build_intersection(kSlotsPerLane, rng, params.speed_min,
                                 params.speed_max);
      break;
  }
  if (params.agent_count > static_cast<int>(world.slots.size()))
    throw std::invalid_argument("synth_scenario: agent count exceeds lane capacity");

  Scenario scenario;
  scenario.seed = seed;
  scenario.horizon = params.horizon;
  scenario.dt = params.dt;
  scenario.ego_index = 0;
  scenario.map = world.map;

  for (int i = 0; i < params.agent_count; ++i) {
    const auto& slot = world.slots[static_cast<std::size_t>(i)];
    ScenarioAgent agent;
    traffic::ActionSequence controls;
    controls.actions.assign(
        static_cast<std::size_t>(params.history_steps + params.horizon),
        {0.0, slot.yawrate});
    const auto trajectory =
        traffic::unicycle_rollout(slot.start, controls, params.dt);
    agent.history.assign(trajectory.begin(),
                         trajectory.begin() + params.history_steps + 1);
    agent.gt_future.assign(trajectory.begin() + params.history_steps + 1,
                           trajectory.end());
    scenario.agents.push_back(std::move(agent));
  }

  // Lights near the downstream end of the first lanes.
  const int light_count = 2;
  for (int i = 0; i < light_count; ++i) {
    const auto& lane = scenario.map.polylines[static_cast<std::size_t>(
        i % scenario.map.polylines.size())];
    TrafficLight light;
    light.x = lane.points.back()[0];
    light.y = lane.points.back()[1] + lane.half_width + 1.0;
    light.state = static_cast<int>(rng.below(4));
    scenario.lights.push_back(light);
  }

  // Static posts alternating along the first lane.
  const auto& ref_lane = scenario.map.polylines.front();
  for (std::size_t i = 0; i + 1 < ref_lane.points.size(); i += 2) {
    const double side = (i / 2) % 2 == 0 ? 1.0 : -1.0;
    scenario.posts.push_back(
        {ref_lane.points[i][0],
         ref_lane.points[i][1] + side * (ref_lane.half_width + 2.5)});
    if (scenario.posts.size() >= 10) break;
  }

  std::vector<traffic::Footprint> footprints;
  for (const auto& a : scenario.agents) footprints.push_back(a.footprint);
  for (int f = 0; f <= params.history_steps; ++f) {
    const auto states = joint_states_at(scenario, f);
    scenario.point_stream.push_back(sensor_points(
        states, footprints, scenario.posts,
        states[static_cast<std::size_t>(scenario.ego_index)]));
  }
  return scenario;
}

namespace {

traffic::AgentState ego_state_at(const Scenario& scenario, int frame) {
  return joint_states_at(scenario, frame)[static_cast<std::size_t>(
      scenario.ego_index)];
}

occ::EgoPose2D ego_pose(const AgentState& s) {
  return occ::EgoPose2D{s.x, s.y, s.theta};
}

std::vector<traffic::Footprint> footprints_of(const Scenario& scenario) {
  std::vector<traffic::Footprint> f;
  f.reserve(scenario.agents.size());
  for (const auto& a : scenario.agents) f.push_back(a.footprint);
  return f;
}

// Actions recovering the ground-truth future by finite differences.
diff::JointActions gt_actions(const Scenario& scenario) {
  const int agents = static_cast<int>(scenario.agents.size());
  const int horizon = static_cast<int>(scenario.agents.front().gt_future.size());
  diff::JointActions tau(agents, horizon);
  for (int a = 0; a < agents; ++a) {
    const auto& agent = scenario.agents[static_cast<std::size_t>(a)];
    AgentState prev = agent.history.back();
    for (int t = 0; t < horizon; ++t) {
      const AgentState& next = agent.gt_future[static_cast<std::size_t>(t)];
      tau.at(a, t, 0) = (next.v - prev.v) / scenario.dt;
      tau.at(a, t, 1) = occ::wrap_angle(next.theta - prev.theta) / scenario.dt;
      prev = next;
    }
  }
  return tau;
}

std::vector<occ::LatentGrid> tensor_frames(const flow::FlowTensor& z,
                                           int first_frame_time) {
  std::vector<occ::LatentGrid> frames;
  frames.reserve(static_cast<std::size_t>(z.frames));
  for (int f = 0; f < z.frames; ++f)
    frames.push_back(z.frame(f, first_frame_time + f));
  return frames;
}

}  // namespace

flow::WorldCondition world_condition(const Scenario& scenario,
                                     const occ::GridConfig& grid) {
  if (scenario.point_stream.size() !=
      static_cast<std::size_t>(scenario.history_frames()))
    throw std::invalid_argument("world_condition: point stream incomplete");

  flow::WorldCondition wc;
  const int history = scenario.history_frames();
  for (int f = 0; f < history; ++f) {
    const auto vox =
        occ::voxelize(scenario.point_stream[static_cast<std::size_t>(f)], grid);
    occ::LatentGrid z = occ::encode_latent(vox.grid, grid);
    z.frame_time = f - (history - 1);
    wc.latent_history.push_back(std::move(z));
    wc.ego_history.push_back(ego_pose(ego_state_at(scenario, f)));
  }
  return wc;
}

ModelBundle train_toy(const std::vector<Scenario>& scenarios,
                      const TrainConfig& cfg) {
  if (scenarios.empty())
    throw std::invalid_argument("train_toy: empty training set");
  cfg.grid.validate();

  const int history = scenarios.front().history_frames();
  const int horizon = scenarios.front().horizon;
  const double dt = scenarios.front().dt;
  const int delta = cfg.transition_offset;
  const Eigen::Index latent_dim = static_cast<Eigen::Index>(cfg.grid.latent_h) *
                                  cfg.grid.latent_w * cfg.grid.latent_c;

  std::vector<double> cbar_sum(
      static_cast<std::size_t>(cfg.grid.latent_h) * cfg.grid.latent_w, 0.0);
  std::size_t cbar_frames = 0;

  std::vector<flow::RFSample> flow_data;
  std::vector<flow::WorldCondition> world_conds;

  int scene_index = 0;
  for (const auto& scenario : scenarios) {
    if (scenario.history_frames() != history || scenario.horizon != horizon)
      throw std::invalid_argument("train_toy: inconsistent scenario shapes");
    if (scenario.agents.front().gt_future.size() !=
        static_cast<std::size_t>(horizon))
      throw std::invalid_argument("train_toy: scenarios need ground-truth futures");

    const int frames_total = history + horizon;
    const auto footprints = footprints_of(scenario);

    std::vector<occ::OccupancyGrid> grids;
    std::vector<occ::ValidityMask> masks;
    std::vector<occ::EgoPose2D> egos;
    std::vector<occ::LatentGrid> latents;
    grids.reserve(static_cast<std::size_t>(frames_total));
    for (int f = 0; f < frames_total; ++f) {
      const auto states = joint_states_at(scenario, f);
      const auto& ego = states[static_cast<std::size_t>(scenario.ego_index)];
      const auto points =
          f < history
              ? scenario.point_stream[static_cast<std::size_t>(f)]
              : sensor_points(states, footprints, scenario.posts, ego);
      auto vox = occ::voxelize(points, cfg.grid);
      occ::LatentGrid z = occ::encode_latent(vox.grid, cfg.grid);
      z.frame_time = f - (history - 1);
      grids.push_back(std::move(vox.grid));
      masks.push_back(std::move(vox.mask));
      egos.push_back(ego_pose(ego));
      latents.push_back(std::move(z));
    }

    for (int f = 0; f + delta < frames_total; ++f) {
      const auto warped = occ::warp_occupancy(
          grids[static_cast<std::size_t>(f)],
          masks[static_cast<std::size_t>(f)], egos[static_cast<std::size_t>(f)],
          egos[static_cast<std::size_t>(f + delta)]);
      const auto c = occ::transition_map(
          grids[static_cast<std::size_t>(f + delta)],
          masks[static_cast<std::size_t>(f + delta)], warped.grid, warped.mask,
          delta);
      const auto frac = occ::pooled_change_fraction(c, cfg.grid);
      for (std::size_t i = 0; i < frac.size(); ++i) cbar_sum[i] += frac[i];
      ++cbar_frames;
    }

    flow::WorldCondition wc;
    for (int f = 0; f < history; ++f) {
      wc.latent_history.push_back(latents[static_cast<std::size_t>(f)]);
      wc.ego_history.push_back(egos[static_cast<std::size_t>(f)]);
    }
    world_conds.push_back(wc);
    const Eigen::VectorXd cond_vec = flow::condition_vector(wc);

    std::vector<occ::LatentGrid> future(latents.begin() + history,
                                        latents.end());
    const flow::FlowTensor target = flow::FlowTensor::from_frames(future);

    Rng rng(derive_seed(cfg.seed, "flow-data",
                        static_cast<std::uint64_t>(scene_index)));
    for (int d = 0; d < cfg.flow_draws_per_scene; ++d) {
      flow::RFSample sample;
      sample.z_target = target;
      sample.t = rng.uniform(0.0, 1.0);
      sample.cond = cond_vec;
      sample.z0 = target;
      for (Eigen::Index i = 0; i < sample.z0.size(); ++i)
        sample.z0.data[i] = rng.normal();
      flow_data.push_back(std::move(sample));
    }
    ++scene_index;
  }

  std::vector<double> cbar_mean(cbar_sum.size(), 0.0);
  bool degenerate = true;
  for (std::size_t i = 0; i < cbar_sum.size(); ++i) {
    cbar_mean[i] = cbar_frames ? cbar_sum[i] / static_cast<double>(cbar_frames)
                               : 0.0;
    if (cbar_mean[i] > 0.0) degenerate = false;
  }
  if (degenerate)
    std::cerr << "train_toy: no occupancy transitions observed; "
                 "weight map falls back to uniform\n";
  const occ::LatentWeightMap weights = occ::weight_map_from_fraction(
      cbar_mean, cfg.grid.latent_h, cfg.grid.latent_w, cfg.lambda);

  ModelBundle bundle;
  bundle.grid = cfg.grid;
  bundle.velocity = flow::fit_linear_velocity(flow_data, weights, cfg.flow_bins);
  bundle.schedule =
      diff::NoiseSchedule::linear(cfg.noise_steps, cfg.beta_start, cfg.beta_end);
  bundle.pooler = cond::PoolerParams::seeded(
      cfg.embed_dim, static_cast<int>(latent_dim),
      derive_seed(cfg.seed, "pooler"), cfg.pooler_stride);
  bundle.flow_steps = cfg.flow_steps;
  bundle.horizon = horizon;
  bundle.history_steps = history - 1;
  bundle.dt = dt;
  bundle.lambda = cfg.lambda;
  bundle.limits = cfg.limits;
  bundle.weights_degenerate = degenerate;

  // One unguided world rollout per scene conditions the denoiser fit.
  std::deque<cond::StepConditionSet> condition_store;
  std::vector<std::pair<diff::DenoiserSample, const cond::StepConditionSet*>>
      denoiser_data;
  scene_index = 0;
  for (const auto& scenario : scenarios) {
    flow::FlowSamplerConfig fcfg;
    fcfg.num_steps = cfg.flow_steps;
    fcfg.seed = derive_seed(cfg.seed, "train-rollout",
                            static_cast<std::uint64_t>(scene_index));
    fcfg.horizon = horizon;
    const auto rollout =
        flow::sample_flow_guided(bundle.velocity,
                                 world_conds[static_cast<std::size_t>(
                                     scene_index)],
                                 1, fcfg, nullptr)
            .front();
    const auto frames = tensor_frames(rollout, 1);
    const auto g = cond::attention_pool(frames, bundle.pooler);
    const auto h = cond::toy_scene_encode(scenario, cfg.embed_dim);
    condition_store.push_back(
        cond::build_step_conditions(frames, g, h, bundle.pooler));
    const cond::StepConditionSet* conds = &condition_store.back();

    const diff::JointActions tau0 = gt_actions(scenario);
    Rng rng(derive_seed(cfg.seed, "diff-data",
                        static_cast<std::uint64_t>(scene_index)));
    for (int d = 0; d < cfg.denoiser_draws_per_scene; ++d) {
      const int k = 1 + static_cast<int>(rng.below(
                            static_cast<std::uint64_t>(cfg.noise_steps)));
      const auto noisy =
          diff::forward_noise(tau0, k, bundle.schedule, rng.next_u64());
      diff::DenoiserSample sample;
      sample.tau_k = noisy.actions;
      sample.k = k;
      sample.target_mean =
          diff::posterior_mean(tau0, noisy.actions, k, bundle.schedule);
      denoiser_data.emplace_back(std::move(sample), conds);
    }
    ++scene_index;
  }
  bundle.denoiser = diff::fit_linear_denoiser(denoiser_data, bundle.schedule,
                                              cfg.denoiser_bins);
  return bundle;
}

RolloutSet cascaded_inference(const Scenario& scenario,
                              const ModelBundle& models, int n, int m,
                              double gamma_world, double gamma_motion,
                              std::uint64_t seed) {
  if (n < 1 || m < 1)
    throw std::invalid_argument("cascaded_inference: n and m must be >= 1");

  const auto wc = world_condition(scenario, models.grid);

  flow::FlowSamplerConfig fcfg;
  fcfg.num_steps = models.flow_steps;
  fcfg.seed = derive_seed(seed, "world");
  fcfg.horizon = scenario.horizon;
  fcfg.guidance.base_strength = gamma_world;

  const auto& history_latents = wc.latent_history;
  flow::LatentQualityFn world_quality =
      [&history_latents](const flow::FlowTensor& z) {
        const auto frames = tensor_frames(z, 1);
        return std::clamp(
            std::exp(-occ::latent_frechet(frames, history_latents)), 1e-6,
            1.0);
      };

  const auto world_rollouts = flow::sample_flow_guided(
      models.velocity, wc, n, fcfg, world_quality);

  const auto h = cond::toy_scene_encode(scenario, models.pooler.dim());
  const auto footprints = footprints_of(scenario);
  std::vector<AgentState> initial_states;
  for (const auto& a : scenario.agents) initial_states.push_back(a.history.back());

  const auto& map = scenario.map;
  const auto& limits = models.limits;
  const double dt = scenario.dt;
  diff::MotionQualityFn motion_quality =
      [&](const std::vector<std::vector<AgentState>>& states) {
        return traffic::quality_score(
            traffic::violation_rates(states, footprints, map, limits, dt));
      };

  RolloutSet set;
  set.n = n;
  set.m = m;
  set.dt = dt;
  set.seed = seed;
  set.rollouts.reserve(static_cast<std::size_t>(n) * m);

  for (int i = 0; i < n; ++i) {
    const auto frames =
        tensor_frames(world_rollouts[static_cast<std::size_t>(i)], 1);
    const auto g = cond::attention_pool(frames, models.pooler);
    const auto conditions =
        cond::build_step_conditions(frames, g, h, models.pooler);

    diff::MotionSamplerConfig mcfg;
    mcfg.seed = derive_seed(seed, "motion", static_cast<std::uint64_t>(i));
    mcfg.dt = dt;
    mcfg.guidance.base_strength = gamma_motion;

    auto actions = diff::sample_motions_guided(models.denoiser, conditions, m,
                                               models.schedule, mcfg,
                                               initial_states, motion_quality);
    for (int j = 0; j < m; ++j) {
      Rollout r;
      r.world_index = i;
      r.motion_index = j;
      r.actions = std::move(actions[static_cast<std::size_t>(j)]);
      r.states = diff::integrate_joint_actions(r.actions, initial_states, dt);
      r.metrics =
          traffic::violation_rates(r.states, footprints, map, limits, dt);
      r.quality = traffic::quality_score(r.metrics);
      set.rollouts.push_back(std::move(r));
    }
  }
  return set;
}

ClosedLoopResult closed_loop_simulate(const Scenario& scenario,
                                      const ModelBundle& models,
                                      int replan_hz, int sim_hz,
                                      double total_s, int n, int m,
                                      double gamma_world, double gamma_motion,
                                      SelectionPolicy selection,
                                      std::uint64_t seed) {
  if (replan_hz < 1 || sim_hz < 1 || sim_hz % replan_hz != 0)
    throw std::invalid_argument(
        "closed_loop_simulate: sim_hz must be a positive multiple of replan_hz");
  if (std::abs(scenario.dt - 1.0 / sim_hz) > 1e-9)
    throw std::invalid_argument(
        "closed_loop_simulate: scenario dt does not match sim_hz");

  const int steps_per_replan = sim_hz / replan_hz;
  const int total_steps = static_cast<int>(std::lround(total_s * sim_hz));
  const int replans = (total_steps + steps_per_replan - 1) / steps_per_replan;
  const std::size_t agent_count = scenario.agents.size();

  Scenario state = scenario;
  const auto footprints = footprints_of(scenario);

  ClosedLoopResult result;
  result.dt = scenario.dt;
  result.committed.resize(agent_count);

  for (int r = 0; r < replans; ++r) {
    auto set = cascaded_inference(state, models, n, m, gamma_world,
                                  gamma_motion, derive_seed(seed, "replan",
                                                            static_cast<std::uint64_t>(r)));
    std::size_t chosen = 0;
    if (selection == SelectionPolicy::kBestQuality) {
      for (std::size_t idx = 1; idx < set.rollouts.size(); ++idx)
        if (set.rollouts[idx].quality > set.rollouts[chosen].quality)
          chosen = idx;
    }
    const auto& pick = set.rollouts[chosen];
    result.replans.push_back(ReplanLog{r, pick.world_index, pick.motion_index,
                                       pick.quality});

    const int commit =
        std::min(steps_per_replan,
                 total_steps - r * steps_per_replan);
    diff::JointActions committed_actions(static_cast<int>(agent_count), commit);
    for (std::size_t a = 0; a < agent_count; ++a) {
      for (int t = 0; t < commit; ++t) {
        result.committed[a].push_back(pick.states[a][static_cast<std::size_t>(t)]);
        committed_actions.at(static_cast<int>(a), t, 0) =
            pick.actions.at(static_cast<int>(a), t, 0);
        committed_actions.at(static_cast<int>(a), t, 1) =
            pick.actions.at(static_cast<int>(a), t, 1);
      }
    }
    result.committed_actions.push_back(std::move(committed_actions));

    // Advance histories by the committed steps and refresh the point
    // stream from the new window.
    const int history = state.history_frames();
    for (std::size_t a = 0; a < agent_count; ++a) {
      auto& hist = state.agents[a].history;
      for (int t = 0; t < commit; ++t) {
        hist.push_back(pick.states[a][static_cast<std::size_t>(t)]);
        hist.erase(hist.begin());
      }
      state.agents[a].gt_future.clear();
    }
    state.point_stream.clear();
    for (int f = 0; f < history; ++f) {
      std::vector<AgentState> frame_states;
      for (std::size_t a = 0; a < agent_count; ++a)
        frame_states.push_back(state.agents[a].history[static_cast<std::size_t>(f)]);
      state.point_stream.push_back(sensor_points(
          frame_states, footprints, state.posts,
          frame_states[static_cast<std::size_t>(state.ego_index)]));
    }
  }
  return result;
}

namespace {

json state_to_json(const AgentState& s) {
  return json::array({s.x, s.y, s.v, s.theta});
}

AgentState state_from_json(const json& j) {
  return AgentState{j.at(0).get<double>(), j.at(1).get<double>(),
                    j.at(2).get<double>(), j.at(3).get<double>()};
}

}  // namespace

void save_scenario(const std::string& path, const Scenario& scenario) {
  json j;
  j["seed"] = scenario.seed;
  j["horizon"] = scenario.horizon;
  j["dt"] = scenario.dt;
  j["ego_index"] = scenario.ego_index;
  j["agents"] = json::array();
  for (const auto& agent : scenario.agents) {
    json a;
    a["length"] = agent.footprint.length;
    a["width"] = agent.footprint.width;
    a["states"] = json::array();
    for (const auto& s : agent.history) a["states"].push_back(state_to_json(s));
    a["gt_future"] = json::array();
    for (const auto& s : agent.gt_future)
      a["gt_future"].push_back(state_to_json(s));
    j["agents"].push_back(std::move(a));
  }
  j["map"]["polylines"] = json::array();
  j["map"]["half_widths"] = json::array();
  for (const auto& lane : scenario.map.polylines) {
    json pts = json::array();
    for (const auto& p : lane.points) pts.push_back(json::array({p[0], p[1]}));
    j["map"]["polylines"].push_back(std::move(pts));
    j["map"]["half_widths"].push_back(lane.half_width);
  }
  j["lights"] = json::array();
  for (const auto& light : scenario.lights)
    j["lights"].push_back(json::array({light.x, light.y, light.state}));
  j["posts"] = json::array();
  for (const auto& p : scenario.posts)
    j["posts"].push_back(json::array({p[0], p[1]}));

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::invalid_argument("cannot open for write: " + path);
  os << j.dump(2) << '\n';
}

Scenario load_scenario(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("cannot open for read: " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("scenario file: " + std::string(e.what()));
  }

  Scenario scenario;
  try {
    scenario.seed = j.at("seed").get<std::uint64_t>();
    scenario.horizon = j.at("horizon").get<int>();
    scenario.dt = j.at("dt").get<double>();
    scenario.ego_index = j.at("ego_index").get<int>();
    for (const auto& a : j.at("agents")) {
      ScenarioAgent agent;
      agent.footprint.length = a.at("length").get<double>();
      agent.footprint.width = a.at("width").get<double>();
      for (const auto& s : a.at("states"))
        agent.history.push_back(state_from_json(s));
      if (a.contains("gt_future"))
        for (const auto& s : a.at("gt_future"))
          agent.gt_future.push_back(state_from_json(s));
      scenario.agents.push_back(std::move(agent));
    }
    const auto& polylines = j.at("map").at("polylines");
    const auto& half_widths = j.at("map").at("half_widths");
    for (std::size_t i = 0; i < polylines.size(); ++i) {
      traffic::LanePolyline lane;
      lane.half_width = half_widths.at(i).get<double>();
      for (const auto& p : polylines.at(i))
        lane.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      scenario.map.polylines.push_back(std::move(lane));
    }
    for (const auto& l : j.at("lights"))
      scenario.lights.push_back(TrafficLight{l.at(0).get<double>(),
                                             l.at(1).get<double>(),
                                             l.at(2).get<int>()});
    if (j.contains("posts"))
      for (const auto& p : j.at("posts"))
        scenario.posts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  } catch (const json::exception& e) {
    throw std::invalid_argument("scenario file: " + std::string(e.what()));
  }

  if (scenario.agents.empty())
    throw std::invalid_argument("scenario file: no agents");
  if (scenario.ego_index < 0 ||
      scenario.ego_index >= static_cast<int>(scenario.agents.size()))
    throw std::invalid_argument("scenario file: ego_index out of range");

  // The point stream is a pure function of the stored geometry.
  std::vector<traffic::Footprint> footprints = footprints_of(scenario);
  for (int f = 0; f < scenario.history_frames(); ++f) {
    const auto states = joint_states_at(scenario, f);
    scenario.point_stream.push_back(sensor_points(
        states, footprints, scenario.posts,
        states[static_cast<std::size_t>(scenario.ego_index)]));
  }
  return scenario;
}

void save_rollouts(const std::string& path, const RolloutSet& set) {
  json j;
  j["n"] = set.n;
  j["m"] = set.m;
  j["dt"] = set.dt;
  j["seed"] = set.seed;
  j["rollouts"] = json::array();
  for (const auto& r : set.rollouts) {
    json jr;
    jr["world_index"] = r.world_index;
    jr["motion_index"] = r.motion_index;
    jr["agents"] = json::array();
    for (std::size_t a = 0; a < r.states.size(); ++a) {
      json ja;
      json flat = json::array();
      for (const auto& s : r.states[a]) {
        flat.push_back(s.x);
        flat.push_back(s.y);
        flat.push_back(s.v);
        flat.push_back(s.theta);
      }
      ja["states"] = std::move(flat);
      json fa = json::array();
      const int horizon = r.actions.horizon;
      for (int t = 0; t < horizon; ++t) {
        fa.push_back(r.actions.at(static_cast<int>(a), t, 0));
        fa.push_back(r.actions.at(static_cast<int>(a), t, 1));
      }
      ja["actions"] = std::move(fa);
      jr["agents"].push_back(std::move(ja));
    }
    jr["metrics"] = {{"kin", r.metrics.kin},
                     {"col", r.metrics.col},
                     {"off", r.metrics.off},
                     {"wro", r.metrics.wro},
                     {"quality", r.quality}};
    j["rollouts"].push_back(std::move(jr));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::invalid_argument("cannot open for write: " + path);
  os << j.dump(2) << '\n';
}

RolloutSet load_rollouts(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("cannot open for read: " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("rollout file: " + std::string(e.what()));
  }

  RolloutSet set;
  try {
    set.n = j.at("n").get<int>();
    set.m = j.at("m").get<int>();
    set.dt = j.at("dt").get<double>();
    set.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& jr : j.at("rollouts")) {
      Rollout r;
      r.world_index = jr.at("world_index").get<int>();
      r.motion_index = jr.at("motion_index").get<int>();
      const auto& agents = jr.at("agents");
      const int agent_count = static_cast<int>(agents.size());
      int horizon = 0;
      if (agent_count > 0)
        horizon = static_cast<int>(agents.at(0).at("states").size()) / 4;
      r.actions = diff::JointActions(agent_count, horizon);
      r.states.resize(static_cast<std::size_t>(agent_count));
      for (int a = 0; a < agent_count; ++a) {
        const auto& flat = agents.at(a).at("states");
        for (int t = 0; t < horizon; ++t)
          r.states[static_cast<std::size_t>(a)].push_back(
              AgentState{flat.at(4 * t).get<double>(),
                         flat.at(4 * t + 1).get<double>(),
                         flat.at(4 * t + 2).get<double>(),
                         flat.at(4 * t + 3).get<double>()});
        const auto& fa = agents.at(a).at("actions");
        for (int t = 0; t < horizon; ++t) {
          r.actions.at(a, t, 0) = fa.at(2 * t).get<double>();
          r.actions.at(a, t, 1) = fa.at(2 * t + 1).get<double>();
        }
      }
      const auto& metrics = jr.at("metrics");
      r.metrics.kin = metrics.at("kin").get<double>();
      r.metrics.col = metrics.at("col").get<double>();
      r.metrics.off = metrics.at("off").get<double>();
      r.metrics.wro = metrics.at("wro").get<double>();
      r.quality = metrics.at("quality").get<double>();
      set.rollouts.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument("rollout file: " + std::string(e.what()));
  }
  return set;
}

void save_models(const std::string& path, const ModelBundle& bundle) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::invalid_argument("cannot open for write: " + path);
  os << "autoworld-models 1\n";
  io::write_grid_config(os, bundle.grid);
  os << "meta\n";
  os << "flow_steps " << bundle.flow_steps << '\n';
  os << "horizon " << bundle.horizon << '\n';
  os << "history_steps " << bundle.history_steps << '\n';
  os << "dt " << io::format_double(bundle.dt) << '\n';
  os << "lambda " << io::format_double(bundle.lambda) << '\n';
  os << "a_max " << io::format_double(bundle.limits.a_max) << '\n';
  os << "yawrate_max " << io::format_double(bundle.limits.yawrate_max) << '\n';
  os << "v_max " << io::format_double(bundle.limits.v_max) << '\n';
  os << "weights_degenerate " << (bundle.weights_degenerate ? 1 : 0) << '\n';
  os << "end_meta\n";
  io::write_velocity_spec(os, bundle.velocity);
  io::write_denoiser_spec(os, bundle.denoiser);
  io::write_pooler(os, bundle.pooler);
  io::write_noise_schedule(os, bundle.schedule);
}

namespace {

void expect_token(std::istream& is, const std::string& token) {
  std::string got;
  is >> got;
  if (!is || got != token)
    throw std::invalid_argument("model file: expected '" + token + "'");
}

}  // namespace

ModelBundle load_models(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("cannot open for read: " + path);
  expect_token(is, "autoworld-models");
  int version = 0;
  is >> version;
  if (version != 1)
    throw std::invalid_argument("model file: unsupported version");

  ModelBundle bundle;
  bundle.grid = io::read_grid_config(is);
  expect_token(is, "meta");
  expect_token(is, "flow_steps");
  is >> bundle.flow_steps;
  expect_token(is, "horizon");
  is >> bundle.horizon;
  expect_token(is, "history_steps");
  is >> bundle.history_steps;
  expect_token(is, "dt");
  is >> bundle.dt;
  expect_token(is, "lambda");
  is >> bundle.lambda;
  expect_token(is, "a_max");
  is >> bundle.limits.a_max;
  expect_token(is, "yawrate_max");
  is >> bundle.limits.yawrate_max;
  expect_token(is, "v_max");
  is >> bundle.limits.v_max;
  expect_token(is, "weights_degenerate");
  int degenerate = 0;
  is >> degenerate;
  bundle.weights_degenerate = degenerate != 0;
  expect_token(is, "end_meta");
  if (!is) throw std::invalid_argument("model file: truncated meta section");

  bundle.velocity = io::read_velocity_spec(is);
  bundle.denoiser = io::read_denoiser_spec(is);
  bundle.pooler = io::read_pooler(is);
  bundle.schedule = io::read_noise_schedule(is);
  return bundle;
}

}  // namespace autoworld::sim
