#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <vector>

#include "autoworld/dpp.hpp"
#include "autoworld/grid.hpp"

namespace autoworld::flow {

// Dense latent sequence of shape (frames, h, w, c), row-major with the
// channel fastest. frames = 1 holds a single latent grid.
struct FlowTensor {
  int frames = 0, h = 0, w = 0, c = 0;
  Eigen::VectorXd data;

  FlowTensor() = default;
  FlowTensor(int frames_, int h_, int w_, int c_)
      : frames(frames_), h(h_), w(w_), c(c_),
        data(Eigen::VectorXd::Zero(
            static_cast<Eigen::Index>(frames_) * h_ * w_ * c_)) {}

  Eigen::Index size() const { return data.size(); }
  Eigen::Index cell_offset(int f, int i, int j) const {
    return ((static_cast<Eigen::Index>(f) * h + i) * w + j) * c;
  }
  bool same_shape(const FlowTensor& o) const {
    return frames == o.frames && h == o.h && w == o.w && c == o.c;
  }

  occ::LatentGrid frame(int f, int frame_time = 0) const;
  static FlowTensor from_frames(const std::vector<occ::LatentGrid>& frames);
};

enum class VelocityKind { kLinearPerBin, kGaussianOracle, kTabulated };

// Shared per-cell affine map for one time bin:
// v(cell) = a * z(cell) + b_cond * cond + offset.
struct LinearVelocityBin {
  Eigen::MatrixXd a;       // c x c
  Eigen::MatrixXd b_cond;  // c x condition_dim
  Eigen::VectorXd offset;  // c
};

struct VelocityFieldSpec {
  VelocityKind kind = VelocityKind::kLinearPerBin;
  int condition_dim = 0;
  int channels = 0;  // latent channels the per-cell map acts on

  std::vector<LinearVelocityBin> bins;  // kLinearPerBin

  Eigen::VectorXd oracle_mean;  // kGaussianOracle; size 1 broadcasts
  double oracle_var = 1.0;

  std::vector<Eigen::VectorXd> table;  // kTabulated: constant field per bin

  int bin_count() const {
    return kind == VelocityKind::kTabulated ? static_cast<int>(table.size())
                                            : static_cast<int>(bins.size());
  }
};

// Conditioning for the world model: latent history plus ego trajectory
// over the same horizon.
struct WorldCondition {
  std::vector<occ::LatentGrid> latent_history;
  std::vector<occ::EgoPose2D> ego_history;
};

// Per-frame latent means concatenated with ego pose deltas.
Eigen::VectorXd condition_vector(const WorldCondition& cond);

struct FlowSamplerConfig {
  int num_steps = 20;
  std::uint64_t seed = 0;
  dpp::GuidanceSchedule guidance;
  int horizon = 80;  // frames generated per rollout
};

// Convex interpolation (1 - t) z0 + t z_target; t must lie in [0, 1].
FlowTensor interpolate(const FlowTensor& z0, const FlowTensor& z_target,
                       double t);

// v(z, t) = E[z_target - z0 | z_t = z] for z0 ~ N(0, I) and
// z_target ~ N(m, var I) under the straight-line interpolation coupling.
Eigen::VectorXd gaussian_oracle_velocity(const Eigen::VectorXd& m, double var,
                                         const Eigen::VectorXd& z, double t);

// Evaluates any velocity field spec on a latent state.
FlowTensor evaluate_velocity(const VelocityFieldSpec& spec,
                             const FlowTensor& z, double t,
                             const Eigen::VectorXd& cond);

struct RFSample {
  FlowTensor z0;
  FlowTensor z_target;
  double t = 0.0;
  Eigen::VectorXd cond;
};

// Mean over the batch of sum_{f,i,j} w(i,j) || v(z_t)_{f,i,j,:} -
// (z_target - z0)_{f,i,j,:} ||^2 with z_t the interpolation at t.
double motion_aware_rf_loss(const VelocityFieldSpec& spec,
                            const std::vector<RFSample>& batch,
                            const occ::LatentWeightMap& w);

// Closed-form weighted ridge least squares per time bin (ridge 1e-6 on the
// sample-mean Gram). Empty bins fall back to the zero map.
VelocityFieldSpec fit_linear_velocity(const std::vector<RFSample>& dataset,
                                      const occ::LatentWeightMap& weights,
                                      int bins);

using LatentQualityFn = std::function<double(const FlowTensor&)>;

// Euler integration of the flow ODE from Gaussian noise with a DPP
// repulsion shift over the n candidates at every step. With guidance
// strength 0 the output is bit-identical to independent Euler sampling
// under the same seed.
std::vector<FlowTensor> sample_flow_guided(const VelocityFieldSpec& model,
                                           const Eigen::VectorXd& cond,
                                           const FlowTensor& shape, int n,
                                           const FlowSamplerConfig& cfg,
                                           const LatentQualityFn& quality_fn);

// Convenience overload deriving the condition vector and state shape from
// a world condition (frames = cfg.horizon, spatial dims from the history).
std::vector<FlowTensor> sample_flow_guided(const VelocityFieldSpec& model,
                                           const WorldCondition& cond, int n,
                                           const FlowSamplerConfig& cfg,
                                           const LatentQualityFn& quality_fn);

}  // namespace autoworld::flow
