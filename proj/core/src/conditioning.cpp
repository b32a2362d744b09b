#include "autoworld/conditioning.hpp"

#include "autoworld/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace autoworld::cond {

using occ::wrap_angle;

PoolerParams PoolerParams::seeded(int embed_dim, int latent_dim,
                                  std::uint64_t seed, int stride,
                                  int num_heads) {
  if (embed_dim < 1 || latent_dim < 1 || stride < 1 || num_heads < 1)
    throw std::invalid_argument("PoolerParams: bad dims");
  if (embed_dim % num_heads != 0)
    throw std::invalid_argument("PoolerParams: heads must divide dim");

  PoolerParams p;
  p.num_heads = num_heads;
  p.stride = stride;
  const double scale = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  Rng rng(derive_seed(seed, "pooler-params"));
  p.query.resize(embed_dim);
  for (int i = 0; i < embed_dim; ++i) p.query[i] = scale * rng.normal();
  p.proj_in.resize(latent_dim, embed_dim);
  for (int i = 0; i < latent_dim; ++i)
    for (int j = 0; j < embed_dim; ++j) p.proj_in(i, j) = scale * rng.normal();
  p.proj_cond.resize(latent_dim, embed_dim);
  for (int i = 0; i < latent_dim; ++i)
    for (int j = 0; j < embed_dim; ++j)
      p.proj_cond(i, j) = scale * rng.normal();
  return p;
}

namespace {

// Rotate a world displacement into the focal frame.
std::array<double, 2> to_focal(double dx, double dy, double c, double s) {
  return {c * dx + s * dy, -s * dx + c * dy};
}

void put(Eigen::MatrixXd& tokens, int row, int& col, double v) {
  if (col < tokens.cols()) tokens(row, col++) = v;
}

Eigen::RowVectorXd flatten_latent(const occ::LatentGrid& z) {
  Eigen::RowVectorXd f(static_cast<Eigen::Index>(z.data.size()));
  for (std::size_t i = 0; i < z.data.size(); ++i)
    f[static_cast<Eigen::Index>(i)] = z.data[i];
  return f;
}

// Multi-head scaled dot-product attention with a single query row.
Eigen::RowVectorXd single_query_attention(const Eigen::RowVectorXd& query,
                                          const Eigen::MatrixXd& keys,
                                          int num_heads) {
  const int dim = static_cast<int>(query.cols());
  const int head_dim = dim / num_heads;
  Eigen::RowVectorXd out(dim);
  for (int h = 0; h < num_heads; ++h) {
    const int off = h * head_dim;
    const Eigen::RowVectorXd qh = query.segment(off, head_dim);
    const Eigen::MatrixXd kh = keys.middleCols(off, head_dim);
    Eigen::VectorXd scores =
        kh * qh.transpose() / std::sqrt(static_cast<double>(head_dim));
    scores.array() -= scores.maxCoeff();
    Eigen::VectorXd weights = scores.array().exp();
    weights /= weights.sum();
    out.segment(off, head_dim) = weights.transpose() * kh;
  }
  return out;
}

}  // namespace

SceneEncoding toy_scene_encode(const sim::Scenario& scenario, int embed_dim) {
  if (scenario.agents.empty())
    throw std::invalid_argument("toy_scene_encode: no agents");
  const auto& focal = scenario.current_state(scenario.ego_index);
  const double c = std::cos(focal.theta), s = std::sin(focal.theta);

  SceneEncoding enc;
  enc.agent_rows = static_cast<int>(scenario.agents.size());
  enc.lane_rows = static_cast<int>(scenario.map.polylines.size());
  enc.light_rows = static_cast<int>(scenario.lights.size());
  enc.tokens = Eigen::MatrixXd::Zero(
      enc.agent_rows + enc.lane_rows + enc.light_rows, embed_dim);

  int row = 0;
  for (const auto& agent : scenario.agents) {
    int col = 0;
    for (const auto& st : agent.history) {
      const auto rel = to_focal(st.x - focal.x, st.y - focal.y, c, s);
      put(enc.tokens, row, col, rel[0]);
      put(enc.tokens, row, col, rel[1]);
    }
    const auto& now = agent.history.back();
    put(enc.tokens, row, col, now.v);
    put(enc.tokens, row, col, std::sin(now.theta - focal.theta));
    put(enc.tokens, row, col, std::cos(now.theta - focal.theta));
    ++row;
  }

  for (const auto& lane : scenario.map.polylines) {
    int col = 0;
    const auto& p0 = lane.points.front();
    const auto& p1 = lane.points.back();
    const auto r0 = to_focal(p0[0] - focal.x, p0[1] - focal.y, c, s);
    const auto r1 = to_focal(p1[0] - focal.x, p1[1] - focal.y, c, s);
    const double dir = std::atan2(p1[1] - p0[1], p1[0] - p0[0]) - focal.theta;
    put(enc.tokens, row, col, r0[0]);
    put(enc.tokens, row, col, r0[1]);
    put(enc.tokens, row, col, r1[0]);
    put(enc.tokens, row, col, r1[1]);
    put(enc.tokens, row, col, std::sin(dir));
    put(enc.tokens, row, col, std::cos(dir));
    put(enc.tokens, row, col, std::hypot(p1[0] - p0[0], p1[1] - p0[1]));
    put(enc.tokens, row, col, lane.half_width);
    ++row;
  }

  for (const auto& light : scenario.lights) {
    int col = 0;
    const auto rel = to_focal(light.x - focal.x, light.y - focal.y, c, s);
    put(enc.tokens, row, col, rel[0]);
    put(enc.tokens, row, col, rel[1]);
    for (int k = 0; k < 4; ++k)
      put(enc.tokens, row, col, light.state == k ? 1.0 : 0.0);
    ++row;
  }
  return enc;
}

Eigen::RowVectorXd attention_pool(const std::vector<occ::LatentGrid>& latents,
                                  const PoolerParams& params) {
  if (latents.empty())
    throw std::invalid_argument("attention_pool: empty rollout");

  const int t_f = static_cast<int>(latents.size());
  std::vector<int> selected;
  for (int e = 1; e * params.stride <= t_f; ++e)
    selected.push_back(e * params.stride - 1);
  if (selected.empty()) selected.push_back(t_f - 1);  // single-frame fallback

  Eigen::MatrixXd keys(static_cast<Eigen::Index>(selected.size()),
                       params.dim());
  for (std::size_t i = 0; i < selected.size(); ++i) {
    const auto& z = latents[static_cast<std::size_t>(selected[i])];
    if (static_cast<int>(z.data.size()) != params.latent_dim())
      throw std::invalid_argument("attention_pool: latent dim mismatch");
    keys.row(static_cast<Eigen::Index>(i)) =
        flatten_latent(z) * params.proj_in;
  }
  return single_query_attention(params.query, keys, params.num_heads);
}

StepConditionSet build_step_conditions(
    const std::vector<occ::LatentGrid>& rollout, const Eigen::RowVectorXd& g,
    const SceneEncoding& h, const PoolerParams& params) {
  if (g.cols() != params.dim() || h.dim() != params.dim())
    throw std::invalid_argument("build_step_conditions: dim mismatch");
  if (params.latent_dim() < params.dim())
    throw std::invalid_argument(
        "build_step_conditions: latent dim smaller than embed dim");

  // Lift the context into the flattened-latent space by zero padding so
  // both tokens go through the same projection.
  Eigen::RowVectorXd g_lift = Eigen::RowVectorXd::Zero(params.latent_dim());
  g_lift.head(params.dim()) = g;
  const Eigen::RowVectorXd token_g = g_lift * params.proj_cond;

  StepConditionSet out;
  out.context = g;
  out.conditions.reserve(rollout.size());

  const int head_dim = params.dim() / params.num_heads;
  Eigen::MatrixXd keys(2, params.dim());
  for (const auto& z : rollout) {
    if (static_cast<int>(z.data.size()) != params.latent_dim())
      throw std::invalid_argument("build_step_conditions: latent dim");
    keys.row(0) = flatten_latent(z) * params.proj_cond;
    keys.row(1) = token_g;

    Eigen::MatrixXd cond(h.rows(), params.dim());
    for (int head = 0; head < params.num_heads; ++head) {
      const int off = head * head_dim;
      const Eigen::MatrixXd kh = keys.middleCols(off, head_dim);
      const Eigen::MatrixXd qh = h.tokens.middleCols(off, head_dim);
      Eigen::MatrixXd scores =
          qh * kh.transpose() / std::sqrt(static_cast<double>(head_dim));
      for (int r = 0; r < scores.rows(); ++r) {
        Eigen::RowVectorXd srow = scores.row(r);
        srow.array() -= srow.maxCoeff();
        Eigen::RowVectorXd wrow = srow.array().exp();
        wrow /= wrow.sum();
        cond.block(r, off, 1, head_dim) = wrow * kh;
      }
    }
    out.conditions.push_back(std::move(cond));
  }
  return out;
}

}  // namespace autoworld::cond
