#pragma once

#include <string>

#include "autoworld/orchestrator.hpp"

namespace autoworld::viz {

// Deterministic SVG: lane corridors, agent rectangles sampled along the
// first rollout, and the full trajectory fan. Stroke color encodes the
// world-rollout index, opacity the motion index.
std::string render_rollouts_svg(const sim::Scenario& scenario,
                                const sim::RolloutSet& rollouts);

}  // namespace autoworld::viz
