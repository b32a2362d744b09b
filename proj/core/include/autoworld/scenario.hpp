#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "autoworld/traffic.hpp"

namespace autoworld::sim {

struct TrafficLight {
  double x = 0.0;
  double y = 0.0;
  int state = 0;  // 0 unknown, 1 red, 2 yellow, 3 green
};

struct ScenarioAgent {
  std::vector<traffic::AgentState> history;    // T_h + 1 states, oldest first
  std::vector<traffic::AgentState> gt_future;  // optional, T_f states
  traffic::Footprint footprint;
};

// Initial scene: agent histories, lane map, lights and the synthetic point
// stream observed over the history window (ego frame per frame).
struct Scenario {
  std::uint64_t seed = 0;
  int horizon = 80;  // future frames to generate
  double dt = 0.1;
  int ego_index = 0;
  std::vector<ScenarioAgent> agents;
  traffic::LaneMap map;
  std::vector<TrafficLight> lights;
  std::vector<std::array<double, 2>> posts;  // static roadside post bases
  std::vector<std::vector<std::array<double, 3>>> point_stream;

  int history_frames() const {
    return agents.empty() ? 0 : static_cast<int>(agents.front().history.size());
  }
  const traffic::AgentState& current_state(int agent) const {
    return agents[static_cast<std::size_t>(agent)].history.back();
  }
};

}  // namespace autoworld::sim
