#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <vector>

namespace autoworld::dpp {

// Jointly generated sample vectors forming the DPP ground set.
struct CandidateSet {
  std::vector<Eigen::VectorXd> vectors;

  std::size_t size() const { return vectors.size(); }
  Eigen::Index dim() const {
    return vectors.empty() ? 0 : vectors.front().size();
  }
};

// Per-sample quality weights in (0, 1].
struct QualityWeights {
  Eigen::VectorXd q;
};

struct KernelMatrix {
  Eigen::MatrixXd lambda;
};

enum class GuidanceProfile { kConstant, kLinearDecay };

// Strength schedule for the diversity shift over sampler timesteps.
// multiplier(step, total) follows the chosen profile; with base_strength 0
// the shift is exactly zero and sampling degenerates to the IID case.
struct GuidanceSchedule {
  double base_strength = 0.0;
  GuidanceProfile profile = GuidanceProfile::kConstant;
  bool normalize_by_grad_norm = true;

  double multiplier(int step, int total_steps) const;
  double strength(int step, int total_steps) const {
    return base_strength * multiplier(step, total_steps);
  }
  bool active() const { return base_strength > 0.0; }
};

// Cosine-similarity kernel, optionally conjugated by the quality weights:
// lambda_q = diag(q) * lambda * diag(q). Zero vectors are handled through
// a norm floor instead of an error.
KernelMatrix build_kernel(const CandidateSet& x,
                          const QualityWeights* q = nullptr);

// log P = log det(lambda) - log det(lambda + I). Returns the clamp value
// log(1e-300) when the kernel is singular within tolerance (duplicates).
double dpp_log_prob(const KernelMatrix& k);

// Exact gradient of log det(lambda_q + eps I) - log det(lambda_q + I)
// with respect to each candidate vector; quality weights are treated as
// constants. One gradient vector per candidate.
std::vector<Eigen::VectorXd> dpp_log_prob_grad(
    const CandidateSet& x, const QualityWeights* q = nullptr);

// The jittered objective the gradient differentiates (exposed so tests can
// finite-difference it directly).
double dpp_objective(const CandidateSet& x, const QualityWeights* q = nullptr);

// Repulsive shift applied by the guided samplers. The gradients are scaled
// by strength(step) and, when enabled, normalized by the joint norm over
// the stacked gradient block. Zero strength yields exactly zero shifts.
std::vector<Eigen::VectorXd> guidance_term(
    const std::vector<Eigen::VectorXd>& grads, const GuidanceSchedule& schedule,
    int step, int total_steps);

}  // namespace autoworld::dpp
