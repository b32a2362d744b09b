#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <vector>

#include "autoworld/conditioning.hpp"
#include "autoworld/dpp.hpp"
#include "autoworld/traffic.hpp"

namespace autoworld::diff {

// Joint action tensor over (agents, horizon, 2), channel fastest.
struct JointActions {
  int agents = 0;
  int horizon = 0;
  Eigen::VectorXd data;

  JointActions() = default;
  JointActions(int agents_, int horizon_)
      : agents(agents_), horizon(horizon_),
        data(Eigen::VectorXd::Zero(
            static_cast<Eigen::Index>(agents_) * horizon_ * 2)) {}

  Eigen::Index index(int a, int t, int ch) const {
    return (static_cast<Eigen::Index>(a) * horizon + t) * 2 + ch;
  }
  double at(int a, int t, int ch) const { return data[index(a, t, ch)]; }
  double& at(int a, int t, int ch) { return data[index(a, t, ch)]; }

  traffic::ActionSequence agent_actions(int a) const;
  bool same_shape(const JointActions& o) const {
    return agents == o.agents && horizon == o.horizon;
  }
};

// Variance-preserving noising chain. Steps are 1-based (1..steps()); the
// cumulative signal fraction alpha_bar decreases monotonically.
struct NoiseSchedule {
  Eigen::VectorXd betas;      // betas[k-1] for step k
  Eigen::VectorXd alphas;     // 1 - beta
  Eigen::VectorXd alpha_bar;  // cumulative product

  int steps() const { return static_cast<int>(betas.size()); }
  double beta(int k) const { return betas[k - 1]; }
  double alpha(int k) const { return alphas[k - 1]; }
  double abar(int k) const { return alpha_bar[k - 1]; }
  double abar_prev(int k) const { return k > 1 ? alpha_bar[k - 2] : 1.0; }
  // Reverse-step noise variance; no noise is injected at k = 1.
  double reverse_var(int k) const { return k > 1 ? beta(k) : 0.0; }

  static NoiseSchedule linear(int k_f = 50, double beta_start = 1e-4,
                              double beta_end = 0.02);
  void validate() const;
};

struct NoisyTrajectory {
  JointActions actions;
  int step = 0;  // 0 = clean
};

enum class DenoiserKind { kLinearConditional, kGaussianOracle };

// Shared per-(agent, timestep) affine map for one step bin:
// mean(a, t) = a_mat * tau(a, t) + b_cond * cond_row(a, t) + offset.
struct LinearDenoiserBin {
  Eigen::Matrix2d a_mat;
  Eigen::MatrixXd b_cond;  // 2 x cond_dim
  Eigen::Vector2d offset;
};

struct DenoiserSpec {
  DenoiserKind kind = DenoiserKind::kLinearConditional;
  int cond_dim = 0;
  std::vector<LinearDenoiserBin> bins;

  // Gaussian oracle over a known action distribution N(mean, var I);
  // size-1 mean broadcasts, size-2 applies per action channel.
  Eigen::VectorXd oracle_mean;
  double oracle_var = 1.0;

  int bin_count() const { return static_cast<int>(bins.size()); }
};

// tau_k = sqrt(abar_k) tau_0 + sqrt(1 - abar_k) eps, deterministic per seed.
NoisyTrajectory forward_noise(const JointActions& tau0, int k,
                              const NoiseSchedule& sched, std::uint64_t seed);

// Exact posterior mean of tau_{k-1} given (tau_k, tau_0); the regression
// target for denoiser fitting.
JointActions posterior_mean(const JointActions& tau0, const JointActions& tau_k,
                            int k, const NoiseSchedule& sched);

// Posterior mean of the reverse transition for the given denoiser. For the
// oracle this is the exact Gaussian-conjugacy mean; the linear denoiser
// reads its per-(agent, step) conditioning row from the step conditions.
JointActions denoiser_mean(const DenoiserSpec& denoiser,
                           const JointActions& tau_k, int k,
                           const NoiseSchedule& sched,
                           const cond::StepConditionSet& conditions);

// One reverse step: mean + guidance shift + N(0, reverse_var(k)) noise
// (none at k = 1). The shift must be empty or match the state size.
NoisyTrajectory reverse_step_guided(const DenoiserSpec& denoiser,
                                    const NoisyTrajectory& tau_k,
                                    const cond::StepConditionSet& conditions,
                                    const NoiseSchedule& sched,
                                    const Eigen::VectorXd& guidance_shift,
                                    std::uint64_t seed);

using MotionQualityFn =
    std::function<double(const std::vector<std::vector<traffic::AgentState>>&)>;

struct MotionSamplerConfig {
  dpp::GuidanceSchedule guidance;
  std::uint64_t seed = 0;
  double dt = 0.1;
};

// Full guided reverse chain for m joint-action candidates. The DPP runs
// over candidates embedded as integrated state deltas; its gradient is
// pulled back to action space through the rollout derivative. Guidance
// strength 0 reproduces independent sampling bit-exactly per seed.
std::vector<JointActions> sample_motions_guided(
    const DenoiserSpec& denoiser, const cond::StepConditionSet& conditions,
    int m, const NoiseSchedule& sched, const MotionSamplerConfig& cfg,
    const std::vector<traffic::AgentState>& initial_states,
    const MotionQualityFn& quality_fn);

// Integrates one candidate's actions for all agents.
std::vector<std::vector<traffic::AgentState>> integrate_joint_actions(
    const JointActions& actions,
    const std::vector<traffic::AgentState>& initial_states, double dt);

struct DenoiserSample {
  JointActions tau_k;
  int k = 1;
  JointActions target_mean;
};

// Ridge least squares for the linear denoiser over step bins (default 4),
// mirroring the flow fit. Samples may come from different scenes, each
// with its own conditioning.
DenoiserSpec fit_linear_denoiser(
    const std::vector<std::pair<DenoiserSample, const cond::StepConditionSet*>>&
        dataset,
    const NoiseSchedule& sched, int bins = 4);

}  // namespace autoworld::diff
