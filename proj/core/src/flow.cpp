#include "autoworld/flow.hpp"

#include "autoworld/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace autoworld::flow {

occ::LatentGrid FlowTensor::frame(int f, int frame_time) const {
  occ::LatentGrid g(h, w, c, frame_time);
  const Eigen::Index off = static_cast<Eigen::Index>(f) * h * w * c;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(g.data.size()); ++i)
    g.data[static_cast<std::size_t>(i)] = data[off + i];
  return g;
}

FlowTensor FlowTensor::from_frames(const std::vector<occ::LatentGrid>& frames) {
  if (frames.empty())
    throw std::invalid_argument("FlowTensor::from_frames: empty");
  FlowTensor t(static_cast<int>(frames.size()), frames[0].h, frames[0].w,
               frames[0].c);
  Eigen::Index off = 0;
  for (const auto& g : frames) {
    if (g.h != t.h || g.w != t.w || g.c != t.c)
      throw std::invalid_argument("FlowTensor::from_frames: ragged frames");
    for (double v : g.data) t.data[off++] = v;
  }
  return t;
}

Eigen::VectorXd condition_vector(const WorldCondition& cond) {
  if (cond.latent_history.size() != cond.ego_history.size())
    throw std::invalid_argument("WorldCondition: history length mismatch");
  const std::size_t n = cond.latent_history.size();
  if (n == 0) return Eigen::VectorXd();

  Eigen::VectorXd out(static_cast<Eigen::Index>(n + 3 * (n - 1)));
  Eigen::Index k = 0;
  for (const auto& z : cond.latent_history) {
    double s = 0.0;
    for (double v : z.data) s += v;
    out[k++] = z.data.empty() ? 0.0 : s / static_cast<double>(z.data.size());
  }
  for (std::size_t i = 1; i < n; ++i) {
    out[k++] = cond.ego_history[i].x - cond.ego_history[i - 1].x;
    out[k++] = cond.ego_history[i].y - cond.ego_history[i - 1].y;
    out[k++] = occ::wrap_angle(cond.ego_history[i].heading -
                               cond.ego_history[i - 1].heading);
  }
  return out;
}

FlowTensor interpolate(const FlowTensor& z0, const FlowTensor& z_target,
                       double t) {
  if (!z0.same_shape(z_target))
    throw std::invalid_argument("interpolate: shape mismatch");
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument("interpolate: t outside [0, 1]");
  FlowTensor out = z0;
  out.data = (1.0 - t) * z0.data + t * z_target.data;
  return out;
}

Eigen::VectorXd gaussian_oracle_velocity(const Eigen::VectorXd& m, double var,
                                         const Eigen::VectorXd& z, double t) {
  if (!(var > 0.0))
    throw std::invalid_argument("gaussian_oracle_velocity: var <= 0");
  const double omt = 1.0 - t;
  const double coef = (t * var - omt) / (omt * omt + t * t * var);
  Eigen::VectorXd mean;
  if (m.size() == 1)
    mean = Eigen::VectorXd::Constant(z.size(), m[0]);
  else if (m.size() == z.size())
    mean = m;
  else
    throw std::invalid_argument("gaussian_oracle_velocity: mean size");
  return mean + coef * (z - t * mean);
}

namespace {

int time_bin(double t, int bins) {
  const int b = static_cast<int>(t * bins);
  return std::clamp(b, 0, bins - 1);
}

void check_cond(const VelocityFieldSpec& spec, const Eigen::VectorXd& cond) {
  if (spec.kind == VelocityKind::kLinearPerBin &&
      cond.size() != spec.condition_dim)
    throw std::invalid_argument("evaluate_velocity: condition size mismatch");
}

}  // namespace

FlowTensor evaluate_velocity(const VelocityFieldSpec& spec,
                             const FlowTensor& z, double t,
                             const Eigen::VectorXd& cond) {
  check_cond(spec, cond);
  FlowTensor v = z;

  switch (spec.kind) {
    case VelocityKind::kGaussianOracle: {
      v.data = gaussian_oracle_velocity(spec.oracle_mean, spec.oracle_var,
                                        z.data, t);
      return v;
    }
    case VelocityKind::kTabulated: {
      const int b = time_bin(t, spec.bin_count());
      if (spec.table[static_cast<std::size_t>(b)].size() != z.size())
        throw std::invalid_argument("evaluate_velocity: table size mismatch");
      v.data = spec.table[static_cast<std::size_t>(b)];
      return v;
    }
    case VelocityKind::kLinearPerBin: {
      if (z.c != spec.channels)
        throw std::invalid_argument("evaluate_velocity: channel mismatch");
      const auto& bin = spec.bins[static_cast<std::size_t>(
          time_bin(t, spec.bin_count()))];
      const Eigen::VectorXd cond_term =
          spec.condition_dim > 0 ? Eigen::VectorXd(bin.b_cond * cond)
                                 : Eigen::VectorXd::Zero(z.c);
      const Eigen::Index cells =
          static_cast<Eigen::Index>(z.frames) * z.h * z.w;
      for (Eigen::Index cell = 0; cell < cells; ++cell) {
        const Eigen::Index off = cell * z.c;
        v.data.segment(off, z.c) =
            bin.a * z.data.segment(off, z.c) + cond_term + bin.offset;
      }
      return v;
    }
  }
  throw std::logic_error("evaluate_velocity: unknown kind");
}

double motion_aware_rf_loss(const VelocityFieldSpec& spec,
                            const std::vector<RFSample>& batch,
                            const occ::LatentWeightMap& w) {
  if (batch.empty()) return 0.0;
  double total = 0.0;
  for (const auto& sample : batch) {
    const FlowTensor z_t = interpolate(sample.z0, sample.z_target, sample.t);
    const FlowTensor v = evaluate_velocity(spec, z_t, sample.t, sample.cond);
    if (z_t.h != w.h || z_t.w != w.w)
      throw std::invalid_argument("motion_aware_rf_loss: weight map shape");
    double loss = 0.0;
    for (int f = 0; f < z_t.frames; ++f)
      for (int i = 0; i < z_t.h; ++i)
        for (int j = 0; j < z_t.w; ++j) {
          const Eigen::Index off = z_t.cell_offset(f, i, j);
          const double r2 =
              (v.data.segment(off, z_t.c) -
               (sample.z_target.data.segment(off, z_t.c) -
                sample.z0.data.segment(off, z_t.c)))
                  .squaredNorm();
          loss += w.at(i, j) * r2;
        }
    total += loss;
  }
  return total / static_cast<double>(batch.size());
}

VelocityFieldSpec fit_linear_velocity(const std::vector<RFSample>& dataset,
                                      const occ::LatentWeightMap& weights,
                                      int bins) {
  if (dataset.empty())
    throw std::invalid_argument("fit_linear_velocity: empty dataset");
  if (bins < 1) throw std::invalid_argument("fit_linear_velocity: bins < 1");

  const int c = dataset.front().z0.c;
  const int cond_dim = static_cast<int>(dataset.front().cond.size());
  const int p = c + cond_dim + 1;  // [z cell ; cond ; 1]

  std::vector<Eigen::MatrixXd> gram(static_cast<std::size_t>(bins),
                                    Eigen::MatrixXd::Zero(p, p));
  std::vector<Eigen::MatrixXd> rhs(static_cast<std::size_t>(bins),
                                   Eigen::MatrixXd::Zero(p, c));
  std::vector<double> row_weight(static_cast<std::size_t>(bins), 0.0);

  Eigen::VectorXd phi(p);
  for (const auto& sample : dataset) {
    if (sample.z0.c != c || sample.cond.size() != cond_dim)
      throw std::invalid_argument("fit_linear_velocity: ragged dataset");
    const int b = time_bin(sample.t, bins);
    const FlowTensor z_t = interpolate(sample.z0, sample.z_target, sample.t);
    if (z_t.h != weights.h || z_t.w != weights.w)
      throw std::invalid_argument("fit_linear_velocity: weight map shape");
    for (int f = 0; f < z_t.frames; ++f)
      for (int i = 0; i < z_t.h; ++i)
        for (int j = 0; j < z_t.w; ++j) {
          const Eigen::Index off = z_t.cell_offset(f, i, j);
          phi.head(c) = z_t.data.segment(off, c);
          if (cond_dim > 0) phi.segment(c, cond_dim) = sample.cond;
          phi[p - 1] = 1.0;
          const Eigen::VectorXd y =
              sample.z_target.data.segment(off, c) -
              sample.z0.data.segment(off, c);
          const double wij = weights.at(i, j);
          gram[static_cast<std::size_t>(b)].noalias() +=
              wij * phi * phi.transpose();
          rhs[static_cast<std::size_t>(b)].noalias() +=
              wij * phi * y.transpose();
          row_weight[static_cast<std::size_t>(b)] += wij;
        }
  }

  VelocityFieldSpec spec;
  spec.kind = VelocityKind::kLinearPerBin;
  spec.condition_dim = cond_dim;
  spec.channels = c;
  spec.bins.resize(static_cast<std::size_t>(bins));
  constexpr double kRidge = 1e-6;
  for (int b = 0; b < bins; ++b) {
    auto& bin = spec.bins[static_cast<std::size_t>(b)];
    if (row_weight[static_cast<std::size_t>(b)] <= 0.0) {
      bin.a = Eigen::MatrixXd::Zero(c, c);
      bin.b_cond = Eigen::MatrixXd::Zero(c, cond_dim);
      bin.offset = Eigen::VectorXd::Zero(c);
      continue;
    }
    const double scale = row_weight[static_cast<std::size_t>(b)];
    const Eigen::MatrixXd g =
        gram[static_cast<std::size_t>(b)] / scale +
        kRidge * Eigen::MatrixXd::Identity(p, p);
    const Eigen::MatrixXd theta =
        g.ldlt().solve(rhs[static_cast<std::size_t>(b)] / scale);
    // theta is p x c; rows: [z-cell block ; cond block ; offset].
    bin.a = theta.topRows(c).transpose();
    bin.b_cond = theta.middleRows(c, cond_dim).transpose();
    bin.offset = theta.row(p - 1).transpose();
  }
  return spec;
}

std::vector<FlowTensor> sample_flow_guided(const VelocityFieldSpec& model,
                                           const Eigen::VectorXd& cond,
                                           const FlowTensor& shape, int n,
                                           const FlowSamplerConfig& cfg,
                                           const LatentQualityFn& quality_fn) {
  if (n < 1) throw std::invalid_argument("sample_flow_guided: n < 1");
  if (cfg.num_steps < 1)
    throw std::invalid_argument("sample_flow_guided: num_steps < 1");

  std::vector<FlowTensor> states(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    FlowTensor z = shape;
    Rng rng(derive_seed(cfg.seed, "flow-init", static_cast<std::uint64_t>(i)));
    for (Eigen::Index k = 0; k < z.size(); ++k) z.data[k] = rng.normal();
    states[static_cast<std::size_t>(i)] = std::move(z);
  }

  const int total = cfg.num_steps;
  const double dt = 1.0 / total;
  const bool guided = cfg.guidance.active() && n > 1;

  for (int s = 0; s < total; ++s) {
    const double t = static_cast<double>(s) / total;

    std::vector<Eigen::VectorXd> shifts;
    if (guided) {
      dpp::CandidateSet x;
      x.vectors.reserve(states.size());
      for (const auto& z : states) x.vectors.push_back(z.data);
      dpp::QualityWeights q;
      const dpp::QualityWeights* q_ptr = nullptr;
      if (quality_fn) {
        q.q.resize(n);
        for (int i = 0; i < n; ++i)
          q.q[i] = std::clamp(quality_fn(states[static_cast<std::size_t>(i)]),
                              1e-6, 1.0);
        q_ptr = &q;
      }
      const auto grads = dpp::dpp_log_prob_grad(x, q_ptr);
      shifts = dpp::guidance_term(grads, cfg.guidance, s, total);
    }

    for (int i = 0; i < n; ++i) {
      auto& z = states[static_cast<std::size_t>(i)];
      const FlowTensor v = evaluate_velocity(model, z, t, cond);
      z.data += dt * v.data;
      if (guided) z.data += shifts[static_cast<std::size_t>(i)];
    }
  }
  return states;
}

std::vector<FlowTensor> sample_flow_guided(const VelocityFieldSpec& model,
                                           const WorldCondition& cond, int n,
                                           const FlowSamplerConfig& cfg,
                                           const LatentQualityFn& quality_fn) {
  if (cond.latent_history.empty())
    throw std::invalid_argument("sample_flow_guided: empty latent history");
  const auto& last = cond.latent_history.back();
  const FlowTensor shape(cfg.horizon, last.h, last.w, last.c);
  return sample_flow_guided(model, condition_vector(cond), shape, n, cfg,
                            quality_fn);
}

}  // namespace autoworld::flow
