#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "autoworld/grid.hpp"
#include "autoworld/scenario.hpp"

namespace autoworld::cond {

// Token matrix for one scene: agent rows, then lane rows, then light rows.
struct SceneEncoding {
  Eigen::MatrixXd tokens;
  int agent_rows = 0;
  int lane_rows = 0;
  int light_rows = 0;

  int rows() const { return static_cast<int>(tokens.rows()); }
  int dim() const { return static_cast<int>(tokens.cols()); }
};

// Attention pooling parameters. proj_in maps flattened latents to the
// embedding space for context pooling; proj_cond does the same for the
// step-condition tokens.
struct PoolerParams {
  Eigen::RowVectorXd query;   // 1 x D
  Eigen::MatrixXd proj_in;    // latent_dim x D
  Eigen::MatrixXd proj_cond;  // latent_dim x D
  int num_heads = 1;
  int stride = 10;

  int dim() const { return static_cast<int>(query.cols()); }
  int latent_dim() const { return static_cast<int>(proj_in.rows()); }

  // Seeded standard-normal init scaled by 1/sqrt(D); not trained.
  static PoolerParams seeded(int embed_dim, int latent_dim, std::uint64_t seed,
                             int stride = 10, int num_heads = 1);
};

// Per-future-timestep conditioning tokens plus the pooled scene context.
struct StepConditionSet {
  std::vector<Eigen::MatrixXd> conditions;  // horizon entries, rows x D
  Eigen::RowVectorXd context;               // 1 x D

  bool empty() const { return conditions.empty(); }
  int horizon() const { return static_cast<int>(conditions.size()); }
};

// Deterministic parameter-free scene features in the focal (ego) frame:
// agent history positions/speed/heading, lane endpoints and direction,
// light position and state. Rows are zero-padded to embed_dim.
SceneEncoding toy_scene_encode(const sim::Scenario& scenario,
                               int embed_dim = 32);

// Scaled dot-product attention of the learned query over the projected,
// stride-subsampled rollout latents (frames stride, 2*stride, ...).
// Falls back to the last frame when the rollout is shorter than the stride.
Eigen::RowVectorXd attention_pool(const std::vector<occ::LatentGrid>& latents,
                                  const PoolerParams& params);

// Per timestep, the rows of the scene encoding attend over the two
// projected tokens {z_t, lift(g)}; lift pads the context vector into the
// flattened latent space so both tokens pass through proj_cond.
StepConditionSet build_step_conditions(
    const std::vector<occ::LatentGrid>& rollout, const Eigen::RowVectorXd& g,
    const SceneEncoding& h, const PoolerParams& params);

}  // namespace autoworld::cond
