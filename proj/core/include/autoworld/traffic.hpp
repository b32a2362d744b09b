#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace autoworld::traffic {

// Planar vehicle state; theta wrapped to (-pi, pi].
struct AgentState {
  double x = 0.0;
  double y = 0.0;
  double v = 0.0;
  double theta = 0.0;
};

// Per-agent control trajectory: (acceleration m/s^2, yaw rate rad/s).
struct ActionSequence {
  std::vector<std::array<double, 2>> actions;

  std::size_t horizon() const { return actions.size(); }
};

struct LanePolyline {
  std::vector<std::array<double, 2>> points;  // directed, >= 2 points
  double half_width = 2.0;
};

struct LaneMap {
  std::vector<LanePolyline> polylines;

  bool empty() const { return polylines.empty(); }
};

struct KinematicLimits {
  double a_max = 8.0;        // m/s^2
  double yawrate_max = 1.5;  // rad/s
  double v_max = 35.0;       // m/s
};

struct Footprint {
  double length = 4.6;
  double width = 2.0;
};

struct ViolationRates {
  double kin = 0.0;
  double col = 0.0;
  double off = 0.0;
  double wro = 0.0;
  bool map_missing = false;  // off/wro were defined as 0 for lack of a map
};

// Integrates constant per-step controls with trapezoidal speed and
// midpoint heading; exact for straight constant-acceleration motion.
// Returns horizon+1 states including the initial one.
std::vector<AgentState> unicycle_rollout(const AgentState& s0,
                                         const ActionSequence& actions,
                                         double dt);

// Reverse-mode derivative of unicycle_rollout: given d(loss)/d(states) for
// states 1..T (the initial state is fixed), accumulates d(loss)/d(actions).
// Gradients are with respect to (x, y, v, theta) per state.
std::vector<std::array<double, 2>> unicycle_rollout_backward(
    const AgentState& s0, const ActionSequence& actions, double dt,
    const std::vector<std::array<double, 4>>& grad_states);

// Fraction-of-agents violation rates over joint state sequences:
// collision (oriented-rectangle overlap), off-road (outside the nearest
// lane corridor), wrong-way (heading off the nearest lane direction by
// more than pi/2) and kinematic (finite-differenced controls or speed
// beyond limits). An empty map yields off = wro = 0 with a warning flag.
ViolationRates violation_rates(
    const std::vector<std::vector<AgentState>>& states,
    const std::vector<Footprint>& footprints, const LaneMap& map,
    const KinematicLimits& limits, double dt = 0.1);

// Q = 1 - (0.20 kin + 0.45 col + 0.35 (off + wro)/2), floored at 1e-6 so
// it can serve as a DPP quality weight.
double quality_score(const ViolationRates& r);

// Weighted realism aggregate: 0.20 kinematic + 0.45 interactive +
// 0.35 map-based.
double rmm_aggregate(double kinematic, double interactive, double map_based);

// Minimum over rollouts of the mean position error (over agents and
// timesteps) against the reference joint sequence.
double minade(const std::vector<std::vector<std::vector<AgentState>>>& rollouts,
              const std::vector<std::vector<AgentState>>& gt);

// Oriented-rectangle overlap test (separating axes), exposed for tests.
bool rectangles_overlap(const AgentState& a, const Footprint& fa,
                        const AgentState& b, const Footprint& fb);

// Distance from a point to a polyline plus the direction of the nearest
// segment; used by the off-road and wrong-way checks.
struct NearestLaneResult {
  double distance = 0.0;
  double direction = 0.0;  // heading of the closest segment
  double half_width = 0.0;
};
NearestLaneResult nearest_lane(const LaneMap& map, double x, double y);

}  // namespace autoworld::traffic
