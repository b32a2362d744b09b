#include "autoworld/traffic.hpp"

#include "autoworld/grid.hpp"  // wrap_angle

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace autoworld::traffic {

using occ::wrap_angle;

std::vector<AgentState> unicycle_rollout(const AgentState& s0,
                                         const ActionSequence& actions,
                                         double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("unicycle_rollout: dt <= 0");
  std::vector<AgentState> states;
  states.reserve(actions.horizon() + 1);
  states.push_back(s0);
  AgentState s = s0;
  for (const auto& a : actions.actions) {
    const double accel = a[0];
    const double yawrate = a[1];
    const double v_mid = s.v + 0.5 * accel * dt;
    const double theta_mid = s.theta + 0.5 * yawrate * dt;
    s.x += v_mid * std::cos(theta_mid) * dt;
    s.y += v_mid * std::sin(theta_mid) * dt;
    s.v += accel * dt;
    s.theta = wrap_angle(s.theta + yawrate * dt);
    states.push_back(s);
  }
  return states;
}

std::vector<std::array<double, 2>> unicycle_rollout_backward(
    const AgentState& s0, const ActionSequence& actions, double dt,
    const std::vector<std::array<double, 4>>& grad_states) {
  const std::size_t t_f = actions.horizon();
  if (grad_states.size() != t_f)
    throw std::invalid_argument(
        "unicycle_rollout_backward: need one state gradient per step");

  // Recompute the forward pass (cheap) to get the per-step linearization
  // points; theta is kept unwrapped here since wrap has unit derivative.
  std::vector<AgentState> pre(t_f);  // state before step k
  AgentState s = s0;
  for (std::size_t k = 0; k < t_f; ++k) {
    pre[k] = s;
    const double accel = actions.actions[k][0];
    const double yawrate = actions.actions[k][1];
    const double v_mid = s.v + 0.5 * accel * dt;
    const double theta_mid = s.theta + 0.5 * yawrate * dt;
    s.x += v_mid * std::cos(theta_mid) * dt;
    s.y += v_mid * std::sin(theta_mid) * dt;
    s.v += accel * dt;
    s.theta = wrap_angle(s.theta + yawrate * dt);
  }

  std::vector<std::array<double, 2>> grad_actions(t_f, {0.0, 0.0});
  // Adjoint of (x, y, v, theta) after the current step.
  double gx = 0.0, gy = 0.0, gv = 0.0, gth = 0.0;
  for (std::size_t k = t_f; k-- > 0;) {
    gx += grad_states[k][0];
    gy += grad_states[k][1];
    gv += grad_states[k][2];
    gth += grad_states[k][3];

    const double accel = actions.actions[k][0];
    const double yawrate = actions.actions[k][1];
    const double v_mid = pre[k].v + 0.5 * accel * dt;
    const double theta_mid = pre[k].theta + 0.5 * yawrate * dt;
    const double c = std::cos(theta_mid), sn = std::sin(theta_mid);

    // x' = x + v_mid c dt ; y' = y + v_mid sn dt ; v' = v + a dt ;
    // theta' = theta + w dt.
    grad_actions[k][0] = gv * dt + (gx * c + gy * sn) * 0.5 * dt * dt;
    grad_actions[k][1] =
        gth * dt + (-gx * sn + gy * c) * v_mid * 0.5 * dt * dt;

    // Propagate to the pre-step state.
    const double gth_new =
        gth + (-gx * sn + gy * c) * v_mid * dt;
    const double gv_new = gv + (gx * c + gy * sn) * dt;
    gv = gv_new;
    gth = gth_new;
    // gx, gy carry through unchanged.
  }
  return grad_actions;
}

namespace {

struct Rect {
  // Center, half extents and axis unit vectors.
  double cx, cy;
  double hx, hy;
  double ax_x, ax_y;  // heading axis
  double ay_x, ay_y;  // lateral axis
};

Rect make_rect(const AgentState& s, const Footprint& f) {
  Rect r;
  r.cx = s.x;
  r.cy = s.y;
  r.hx = 0.5 * f.length;
  r.hy = 0.5 * f.width;
  r.ax_x = std::cos(s.theta);
  r.ax_y = std::sin(s.theta);
  r.ay_x = -r.ax_y;
  r.ay_y = r.ax_x;
  return r;
}

bool separated_on_axis(const Rect& a, const Rect& b, double ux, double uy) {
  const double dist = std::abs((b.cx - a.cx) * ux + (b.cy - a.cy) * uy);
  const double ra = a.hx * std::abs(a.ax_x * ux + a.ax_y * uy) +
                    a.hy * std::abs(a.ay_x * ux + a.ay_y * uy);
  const double rb = b.hx * std::abs(b.ax_x * ux + b.ax_y * uy) +
                    b.hy * std::abs(b.ay_x * ux + b.ay_y * uy);
  return dist > ra + rb;
}

}  // namespace

bool rectangles_overlap(const AgentState& a, const Footprint& fa,
                        const AgentState& b, const Footprint& fb) {
  const Rect ra = make_rect(a, fa);
  const Rect rb = make_rect(b, fb);
  if (separated_on_axis(ra, rb, ra.ax_x, ra.ax_y)) return false;
  if (separated_on_axis(ra, rb, ra.ay_x, ra.ay_y)) return false;
  if (separated_on_axis(ra, rb, rb.ax_x, rb.ax_y)) return false;
  if (separated_on_axis(ra, rb, rb.ay_x, rb.ay_y)) return false;
  return true;
}

NearestLaneResult nearest_lane(const LaneMap& map, double x, double y) {
  NearestLaneResult best;
  best.distance = std::numeric_limits<double>::infinity();
  for (const auto& lane : map.polylines) {
    for (std::size_t i = 0; i + 1 < lane.points.size(); ++i) {
      const double x0 = lane.points[i][0], y0 = lane.points[i][1];
      const double x1 = lane.points[i + 1][0], y1 = lane.points[i + 1][1];
      const double ex = x1 - x0, ey = y1 - y0;
      const double len2 = ex * ex + ey * ey;
      double t = 0.0;
      if (len2 > 0.0)
        t = std::clamp(((x - x0) * ex + (y - y0) * ey) / len2, 0.0, 1.0);
      const double px = x0 + t * ex, py = y0 + t * ey;
      const double d = std::hypot(x - px, y - py);
      if (d < best.distance) {
        best.distance = d;
        best.direction = std::atan2(ey, ex);
        best.half_width = lane.half_width;
      }
    }
  }
  return best;
}

ViolationRates violation_rates(
    const std::vector<std::vector<AgentState>>& states,
    const std::vector<Footprint>& footprints, const LaneMap& map,
    const KinematicLimits& limits, double dt) {
  const std::size_t n_agents = states.size();
  if (n_agents == 0) return {};
  const std::size_t horizon = states.front().size();
  for (const auto& seq : states)
    if (seq.size() != horizon)
      throw std::invalid_argument("violation_rates: ragged state sequences");
  if (!footprints.empty() && footprints.size() != n_agents)
    throw std::invalid_argument("violation_rates: footprint count mismatch");

  auto footprint_of = [&](std::size_t i) {
    return footprints.empty() ? Footprint{} : footprints[i];
  };

  std::vector<bool> hit_col(n_agents, false), hit_off(n_agents, false),
      hit_wro(n_agents, false), hit_kin(n_agents, false);

  for (std::size_t t = 0; t < horizon; ++t) {
    for (std::size_t i = 0; i < n_agents; ++i) {
      for (std::size_t j = i + 1; j < n_agents; ++j) {
        if (hit_col[i] && hit_col[j]) continue;
        if (rectangles_overlap(states[i][t], footprint_of(i), states[j][t],
                               footprint_of(j))) {
          hit_col[i] = true;
          hit_col[j] = true;
        }
      }
    }
  }

  const bool map_missing = map.empty();
  if (!map_missing) {
    for (std::size_t i = 0; i < n_agents; ++i) {
      for (std::size_t t = 0; t < horizon; ++t) {
        const auto near = nearest_lane(map, states[i][t].x, states[i][t].y);
        if (near.distance > near.half_width) hit_off[i] = true;
        if (std::abs(wrap_angle(states[i][t].theta - near.direction)) >
            0.5 * std::numbers::pi)
          hit_wro[i] = true;
        if (hit_off[i] && hit_wro[i]) break;
      }
    }
  }

  for (std::size_t i = 0; i < n_agents; ++i) {
    for (std::size_t t = 0; t < horizon && !hit_kin[i]; ++t) {
      if (std::abs(states[i][t].v) > limits.v_max) hit_kin[i] = true;
      if (t + 1 < horizon) {
        const double accel = (states[i][t + 1].v - states[i][t].v) / dt;
        const double yawrate =
            wrap_angle(states[i][t + 1].theta - states[i][t].theta) / dt;
        if (std::abs(accel) > limits.a_max ||
            std::abs(yawrate) > limits.yawrate_max)
          hit_kin[i] = true;
      }
    }
  }

  auto fraction = [&](const std::vector<bool>& flags) {
    std::size_t c = 0;
    for (bool f : flags) c += f ? 1 : 0;
    return static_cast<double>(c) / static_cast<double>(n_agents);
  };

  ViolationRates r;
  r.col = fraction(hit_col);
  r.off = fraction(hit_off);
  r.wro = fraction(hit_wro);
  r.kin = fraction(hit_kin);
  r.map_missing = map_missing;
  return r;
}

double quality_score(const ViolationRates& r) {
  const double q =
      1.0 - (0.20 * r.kin + 0.45 * r.col + 0.35 * 0.5 * (r.off + r.wro));
  return std::clamp(q, 1e-6, 1.0);
}

double rmm_aggregate(double kinematic, double interactive, double map_based) {
  return 0.20 * kinematic + 0.45 * interactive + 0.35 * map_based;
}

double minade(const std::vector<std::vector<std::vector<AgentState>>>& rollouts,
              const std::vector<std::vector<AgentState>>& gt) {
  if (rollouts.empty()) throw std::invalid_argument("minade: no rollouts");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& rollout : rollouts) {
    if (rollout.size() != gt.size())
      throw std::invalid_argument("minade: agent count mismatch");
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t a = 0; a < rollout.size(); ++a) {
      if (rollout[a].size() != gt[a].size())
        throw std::invalid_argument("minade: horizon mismatch");
      for (std::size_t t = 0; t < rollout[a].size(); ++t) {
        sum += std::hypot(rollout[a][t].x - gt[a][t].x,
                          rollout[a][t].y - gt[a][t].y);
        ++count;
      }
    }
    best = std::min(best, sum / static_cast<double>(count));
  }
  return best;
}

}  // namespace autoworld::traffic
