#include "autoworld/diffusion.hpp"

#include "autoworld/grid.hpp"
#include "autoworld/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace autoworld::diff {

traffic::ActionSequence JointActions::agent_actions(int a) const {
  traffic::ActionSequence seq;
  seq.actions.resize(static_cast<std::size_t>(horizon));
  for (int t = 0; t < horizon; ++t)
    seq.actions[static_cast<std::size_t>(t)] = {at(a, t, 0), at(a, t, 1)};
  return seq;
}

NoiseSchedule NoiseSchedule::linear(int k_f, double beta_start,
                                    double beta_end) {
  if (k_f < 1) throw std::invalid_argument("NoiseSchedule: k_f < 1");
  NoiseSchedule s;
  s.betas.resize(k_f);
  for (int k = 0; k < k_f; ++k)
    s.betas[k] = k_f == 1 ? beta_start
                          : beta_start + (beta_end - beta_start) * k / (k_f - 1);
  s.alphas = 1.0 - s.betas.array();
  s.alpha_bar.resize(k_f);
  double prod = 1.0;
  for (int k = 0; k < k_f; ++k) {
    prod *= s.alphas[k];
    s.alpha_bar[k] = prod;
  }
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  for (int k = 0; k < steps(); ++k) {
    if (!(betas[k] > 0.0) || !(betas[k] < 1.0))
      throw std::invalid_argument("NoiseSchedule: betas must lie in (0,1)");
    if (k > 0 && !(alpha_bar[k] < alpha_bar[k - 1]))
      throw std::invalid_argument("NoiseSchedule: alpha_bar must decrease");
  }
}

NoisyTrajectory forward_noise(const JointActions& tau0, int k,
                              const NoiseSchedule& sched, std::uint64_t seed) {
  if (k < 1 || k > sched.steps())
    throw std::invalid_argument("forward_noise: step out of range");
  const double signal = std::sqrt(sched.abar(k));
  const double noise = std::sqrt(1.0 - sched.abar(k));
  NoisyTrajectory out{tau0, k};
  Rng rng(seed);
  for (Eigen::Index i = 0; i < out.actions.data.size(); ++i)
    out.actions.data[i] = signal * tau0.data[i] + noise * rng.normal();
  return out;
}

namespace {

// Reverse posterior mean coefficients: mean = c0 * x0_hat + ct * tau_k.
void posterior_coeffs(const NoiseSchedule& sched, int k, double& c0,
                      double& ct) {
  const double abar = sched.abar(k);
  const double abar_prev = sched.abar_prev(k);
  const double beta = sched.beta(k);
  const double alpha = sched.alpha(k);
  c0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
  ct = std::sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar);
}

double oracle_mean_at(const Eigen::VectorXd& mean, int ch, Eigen::Index flat,
                      Eigen::Index total) {
  if (mean.size() == 1) return mean[0];
  if (mean.size() == 2) return mean[ch];
  if (mean.size() == total) return mean[flat];
  throw std::invalid_argument("denoiser oracle: mean size mismatch");
}

}  // namespace

JointActions posterior_mean(const JointActions& tau0,
                            const JointActions& tau_k, int k,
                            const NoiseSchedule& sched) {
  if (!tau0.same_shape(tau_k))
    throw std::invalid_argument("posterior_mean: shape mismatch");
  if (k < 1 || k > sched.steps())
    throw std::invalid_argument("posterior_mean: step out of range");
  double c0 = 0.0, ct = 0.0;
  posterior_coeffs(sched, k, c0, ct);
  JointActions out = tau0;
  out.data = c0 * tau0.data + ct * tau_k.data;
  return out;
}

JointActions denoiser_mean(const DenoiserSpec& denoiser,
                           const JointActions& tau_k, int k,
                           const NoiseSchedule& sched,
                           const cond::StepConditionSet& conditions) {
  if (k < 1 || k > sched.steps())
    throw std::invalid_argument("denoiser_mean: step out of range");
  JointActions mean = tau_k;

  if (denoiser.kind == DenoiserKind::kGaussianOracle) {
    // E[tau0 | tau_k] by Gaussian conjugacy, then the posterior mean of
    // tau_{k-1} given (tau_k, tau0) with tau0 replaced by its estimate.
    const double abar = sched.abar(k);
    const double var = denoiser.oracle_var;
    const double denom = abar * var + (1.0 - abar);
    const double gain = std::sqrt(abar) * var / denom;
    double c0 = 0.0, ct = 0.0;
    posterior_coeffs(sched, k, c0, ct);
    const Eigen::Index total = tau_k.data.size();
    for (int a = 0; a < tau_k.agents; ++a)
      for (int t = 0; t < tau_k.horizon; ++t)
        for (int ch = 0; ch < 2; ++ch) {
          const Eigen::Index i = tau_k.index(a, t, ch);
          const double m = oracle_mean_at(denoiser.oracle_mean, ch, i, total);
          const double x0_hat =
              m + gain * (tau_k.data[i] - std::sqrt(abar) * m);
          mean.data[i] = c0 * x0_hat + ct * tau_k.data[i];
        }
    return mean;
  }

  // Linear conditional denoiser.
  if (denoiser.bin_count() < 1)
    throw std::invalid_argument("denoiser_mean: no fitted bins");
  const int bin = std::min((k - 1) * denoiser.bin_count() / sched.steps(),
                           denoiser.bin_count() - 1);
  const auto& lin = denoiser.bins[static_cast<std::size_t>(bin)];
  const bool use_cond = denoiser.cond_dim > 0;
  if (use_cond) {
    if (conditions.horizon() != tau_k.horizon)
      throw std::invalid_argument("denoiser_mean: condition horizon mismatch");
    for (const auto& c : conditions.conditions)
      if (c.rows() < tau_k.agents || c.cols() != denoiser.cond_dim)
        throw std::invalid_argument("denoiser_mean: condition shape mismatch");
  }

  Eigen::Vector2d tau_cell;
  for (int a = 0; a < tau_k.agents; ++a)
    for (int t = 0; t < tau_k.horizon; ++t) {
      tau_cell << tau_k.at(a, t, 0), tau_k.at(a, t, 1);
      Eigen::Vector2d out = lin.a_mat * tau_cell + lin.offset;
      if (use_cond)
        out += lin.b_cond *
               conditions.conditions[static_cast<std::size_t>(t)]
                   .row(a)
                   .transpose();
      mean.at(a, t, 0) = out[0];
      mean.at(a, t, 1) = out[1];
    }
  return mean;
}

NoisyTrajectory reverse_step_guided(const DenoiserSpec& denoiser,
                                    const NoisyTrajectory& tau_k,
                                    const cond::StepConditionSet& conditions,
                                    const NoiseSchedule& sched,
                                    const Eigen::VectorXd& guidance_shift,
                                    std::uint64_t seed) {
  const int k = tau_k.step;
  if (k < 1) throw std::invalid_argument("reverse_step_guided: step < 1");
  if (guidance_shift.size() != 0 &&
      guidance_shift.size() != tau_k.actions.data.size())
    throw std::invalid_argument("reverse_step_guided: shift size mismatch");

  NoisyTrajectory out;
  out.actions = denoiser_mean(denoiser, tau_k.actions, k, sched, conditions);
  out.step = k - 1;
  if (guidance_shift.size() != 0) out.actions.data += guidance_shift;

  const double var = sched.reverse_var(k);
  if (var > 0.0) {
    const double sd = std::sqrt(var);
    Rng rng(seed);
    for (Eigen::Index i = 0; i < out.actions.data.size(); ++i)
      out.actions.data[i] += sd * rng.normal();
  }
  return out;
}

std::vector<std::vector<traffic::AgentState>> integrate_joint_actions(
    const JointActions& actions,
    const std::vector<traffic::AgentState>& initial_states, double dt) {
  if (static_cast<int>(initial_states.size()) != actions.agents)
    throw std::invalid_argument("integrate_joint_actions: agent count");
  std::vector<std::vector<traffic::AgentState>> states(
      static_cast<std::size_t>(actions.agents));
  for (int a = 0; a < actions.agents; ++a) {
    auto full = traffic::unicycle_rollout(
        initial_states[static_cast<std::size_t>(a)], actions.agent_actions(a),
        dt);
    // Keep the future states only; the initial state is shared context.
    states[static_cast<std::size_t>(a)].assign(full.begin() + 1, full.end());
  }
  return states;
}

namespace {

// Embedding for the DPP over motion candidates: per (agent, timestep)
// deltas of (x, y, v, theta) relative to the agent's initial state.
Eigen::VectorXd embed_states(
    const std::vector<std::vector<traffic::AgentState>>& states,
    const std::vector<traffic::AgentState>& initial_states) {
  const std::size_t agents = states.size();
  const std::size_t horizon = states.empty() ? 0 : states[0].size();
  Eigen::VectorXd e(static_cast<Eigen::Index>(agents * horizon * 4));
  Eigen::Index i = 0;
  for (std::size_t a = 0; a < agents; ++a) {
    const auto& s0 = initial_states[a];
    for (std::size_t t = 0; t < horizon; ++t) {
      e[i++] = states[a][t].x - s0.x;
      e[i++] = states[a][t].y - s0.y;
      e[i++] = states[a][t].v - s0.v;
      e[i++] = occ::wrap_angle(states[a][t].theta - s0.theta);
    }
  }
  return e;
}

// Pulls an embedding-space gradient back to action space through the
// unicycle rollout.
Eigen::VectorXd pullback_to_actions(
    const Eigen::VectorXd& grad_embed, const JointActions& actions,
    const std::vector<traffic::AgentState>& initial_states, double dt) {
  Eigen::VectorXd grad_actions =
      Eigen::VectorXd::Zero(actions.data.size());
  const int horizon = actions.horizon;
  for (int a = 0; a < actions.agents; ++a) {
    std::vector<std::array<double, 4>> gs(static_cast<std::size_t>(horizon));
    for (int t = 0; t < horizon; ++t) {
      const Eigen::Index base =
          (static_cast<Eigen::Index>(a) * horizon + t) * 4;
      gs[static_cast<std::size_t>(t)] = {grad_embed[base], grad_embed[base + 1],
                                         grad_embed[base + 2],
                                         grad_embed[base + 3]};
    }
    const auto ga = traffic::unicycle_rollout_backward(
        initial_states[static_cast<std::size_t>(a)], actions.agent_actions(a),
        dt, gs);
    for (int t = 0; t < horizon; ++t) {
      grad_actions[actions.index(a, t, 0)] = ga[static_cast<std::size_t>(t)][0];
      grad_actions[actions.index(a, t, 1)] = ga[static_cast<std::size_t>(t)][1];
    }
  }
  return grad_actions;
}

}  // namespace

std::vector<JointActions> sample_motions_guided(
    const DenoiserSpec& denoiser, const cond::StepConditionSet& conditions,
    int m, const NoiseSchedule& sched, const MotionSamplerConfig& cfg,
    const std::vector<traffic::AgentState>& initial_states,
    const MotionQualityFn& quality_fn) {
  if (m < 1) throw std::invalid_argument("sample_motions_guided: m < 1");
  const int agents = static_cast<int>(initial_states.size());
  const int horizon =
      conditions.empty() ? 0 : conditions.horizon();
  if (agents < 1 || horizon < 1)
    throw std::invalid_argument("sample_motions_guided: empty problem");

  std::vector<NoisyTrajectory> cands(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) {
    NoisyTrajectory t;
    t.actions = JointActions(agents, horizon);
    t.step = sched.steps();
    Rng rng(derive_seed(cfg.seed, "motion-init", static_cast<std::uint64_t>(j)));
    for (Eigen::Index i = 0; i < t.actions.data.size(); ++i)
      t.actions.data[i] = rng.normal();
    cands[static_cast<std::size_t>(j)] = std::move(t);
  }

  const int total = sched.steps();
  const bool guided = cfg.guidance.active() && m > 1;
  const Eigen::VectorXd no_shift;

  for (int k = total; k >= 1; --k) {
    std::vector<Eigen::VectorXd> shifts;
    if (guided) {
      // Integrate the current candidates once; the embeddings feed the
      // kernel and the integrated states feed the quality weights.
      dpp::CandidateSet x;
      dpp::QualityWeights q;
      x.vectors.reserve(static_cast<std::size_t>(m));
      if (quality_fn) q.q.resize(m);
      std::vector<std::vector<std::vector<traffic::AgentState>>> all_states(
          static_cast<std::size_t>(m));
      for (int j = 0; j < m; ++j) {
        all_states[static_cast<std::size_t>(j)] = integrate_joint_actions(
            cands[static_cast<std::size_t>(j)].actions, initial_states,
            cfg.dt);
        x.vectors.push_back(embed_states(
            all_states[static_cast<std::size_t>(j)], initial_states));
        if (quality_fn)
          q.q[j] = std::clamp(
              quality_fn(all_states[static_cast<std::size_t>(j)]), 1e-6, 1.0);
      }
      const auto grads_embed =
          dpp::dpp_log_prob_grad(x, quality_fn ? &q : nullptr);
      std::vector<Eigen::VectorXd> grads_actions(static_cast<std::size_t>(m));
      for (int j = 0; j < m; ++j)
        grads_actions[static_cast<std::size_t>(j)] = pullback_to_actions(
            grads_embed[static_cast<std::size_t>(j)],
            cands[static_cast<std::size_t>(j)].actions, initial_states,
            cfg.dt);
      shifts = dpp::guidance_term(grads_actions, cfg.guidance, total - k,
                                  total);
    }

    for (int j = 0; j < m; ++j) {
      const auto seed = derive_seed(cfg.seed, "motion-noise",
                                    static_cast<std::uint64_t>(j) * (total + 1) +
                                        static_cast<std::uint64_t>(k));
      cands[static_cast<std::size_t>(j)] = reverse_step_guided(
          denoiser, cands[static_cast<std::size_t>(j)], conditions, sched,
          guided ? shifts[static_cast<std::size_t>(j)] : no_shift, seed);
    }
  }

  std::vector<JointActions> out;
  out.reserve(static_cast<std::size_t>(m));
  for (auto& c : cands) out.push_back(std::move(c.actions));
  return out;
}

DenoiserSpec fit_linear_denoiser(
    const std::vector<std::pair<DenoiserSample, const cond::StepConditionSet*>>&
        dataset,
    const NoiseSchedule& sched, int bins) {
  if (dataset.empty())
    throw std::invalid_argument("fit_linear_denoiser: empty dataset");
  if (bins < 1) throw std::invalid_argument("fit_linear_denoiser: bins < 1");

  int cond_dim = 0;
  for (const auto& [sample, conds] : dataset)
    if (conds && !conds->empty()) {
      cond_dim = static_cast<int>(conds->conditions.front().cols());
      break;
    }
  const int p = 2 + cond_dim + 1;

  std::vector<Eigen::MatrixXd> gram(static_cast<std::size_t>(bins),
                                    Eigen::MatrixXd::Zero(p, p));
  std::vector<Eigen::MatrixXd> rhs(static_cast<std::size_t>(bins),
                                   Eigen::MatrixXd::Zero(p, 2));
  std::vector<std::size_t> rows(static_cast<std::size_t>(bins), 0);

  Eigen::VectorXd phi(p);
  for (const auto& [sample, conds] : dataset) {
    const int bin = std::min((sample.k - 1) * bins / sched.steps(), bins - 1);
    const auto& tau = sample.tau_k;
    for (int a = 0; a < tau.agents; ++a)
      for (int t = 0; t < tau.horizon; ++t) {
        phi[0] = tau.at(a, t, 0);
        phi[1] = tau.at(a, t, 1);
        if (cond_dim > 0) {
          if (conds && !conds->empty())
            phi.segment(2, cond_dim) =
                conds->conditions[static_cast<std::size_t>(t)]
                    .row(a)
                    .transpose();
          else
            phi.segment(2, cond_dim).setZero();
        }
        phi[p - 1] = 1.0;
        Eigen::Vector2d y(sample.target_mean.at(a, t, 0),
                          sample.target_mean.at(a, t, 1));
        gram[static_cast<std::size_t>(bin)].noalias() += phi * phi.transpose();
        rhs[static_cast<std::size_t>(bin)].noalias() += phi * y.transpose();
        ++rows[static_cast<std::size_t>(bin)];
      }
  }

  DenoiserSpec spec;
  spec.kind = DenoiserKind::kLinearConditional;
  spec.cond_dim = cond_dim;
  spec.bins.resize(static_cast<std::size_t>(bins));
  constexpr double kRidge = 1e-6;
  for (int b = 0; b < bins; ++b) {
    auto& lin = spec.bins[static_cast<std::size_t>(b)];
    if (rows[static_cast<std::size_t>(b)] == 0) {
      lin.a_mat.setZero();
      lin.b_cond = Eigen::MatrixXd::Zero(2, cond_dim);
      lin.offset.setZero();
      continue;
    }
    const double n = static_cast<double>(rows[static_cast<std::size_t>(b)]);
    const Eigen::MatrixXd g = gram[static_cast<std::size_t>(b)] / n +
                              kRidge * Eigen::MatrixXd::Identity(p, p);
    const Eigen::MatrixXd theta =
        g.ldlt().solve(rhs[static_cast<std::size_t>(b)] / n);
    lin.a_mat = theta.topRows(2).transpose();
    lin.b_cond = theta.middleRows(2, cond_dim).transpose();
    lin.offset = theta.row(p - 1).transpose();
  }
  return spec;
}

}  // namespace autoworld::diff
