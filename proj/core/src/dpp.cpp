#include "autoworld/dpp.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <stdexcept>

namespace autoworld::dpp {

namespace {

constexpr double kNormFloor = 1e-12;    // cosine denominator floor
constexpr double kJitter = 1e-8;        // log-det jitter on the gradient path
constexpr double kLogClamp = -690.77552789821368;  // log(1e-300)
constexpr double kSingularRelTol = 1e-12;
constexpr double kSymmetryTol = 1e-10;

void check_inputs(const CandidateSet& x, const QualityWeights* q) {
  if (x.vectors.empty())
    throw std::invalid_argument("dpp: candidate set is empty");
  const Eigen::Index d = x.vectors.front().size();
  if (d < 1) throw std::invalid_argument("dpp: zero-dimensional candidates");
  for (const auto& v : x.vectors) {
    if (v.size() != d)
      throw std::invalid_argument("dpp: candidate dimensions differ");
    if (!v.allFinite())
      throw std::invalid_argument("dpp: non-finite candidate entries");
  }
  if (q) {
    if (static_cast<std::size_t>(q->q.size()) != x.size())
      throw std::invalid_argument("dpp: quality weight count mismatch");
    for (Eigen::Index i = 0; i < q->q.size(); ++i)
      if (!(q->q[i] > 0.0) || q->q[i] > 1.0)
        throw std::invalid_argument("dpp: quality weights must lie in (0,1]");
  }
}

// Normalized candidate matrix (columns) plus the per-candidate raw norms.
void normalized_columns(const CandidateSet& x, Eigen::MatrixXd& u,
                        Eigen::VectorXd& norms) {
  const Eigen::Index d = x.dim();
  const Eigen::Index k = static_cast<Eigen::Index>(x.size());
  u.resize(d, k);
  norms.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const double n = x.vectors[static_cast<std::size_t>(i)].norm();
    norms[i] = n;
    u.col(i) = x.vectors[static_cast<std::size_t>(i)] / std::max(n, kNormFloor);
  }
}

}  // namespace

double GuidanceSchedule::multiplier(int step, int total_steps) const {
  if (step < 0 || step >= total_steps)
    throw std::invalid_argument("GuidanceSchedule: step outside schedule");
  switch (profile) {
    case GuidanceProfile::kConstant:
      return 1.0;
    case GuidanceProfile::kLinearDecay:
      // 1 at the first step, decaying linearly toward 1/total at the last.
      return static_cast<double>(total_steps - step) /
             static_cast<double>(total_steps);
  }
  return 1.0;
}

KernelMatrix build_kernel(const CandidateSet& x, const QualityWeights* q) {
  check_inputs(x, q);
  Eigen::MatrixXd u;
  Eigen::VectorXd norms;
  normalized_columns(x, u, norms);

  KernelMatrix k;
  k.lambda = u.transpose() * u;
  // Symmetrize away accumulation asymmetry from the matrix product.
  k.lambda = 0.5 * (k.lambda + k.lambda.transpose()).eval();
  if (q) {
    const auto dq = q->q.asDiagonal();
    k.lambda = dq * k.lambda * dq;
  }
  return k;
}

double dpp_log_prob(const KernelMatrix& k) {
  const Eigen::MatrixXd& m = k.lambda;
  if (m.rows() != m.cols() || m.rows() == 0)
    throw std::invalid_argument("dpp_log_prob: kernel must be square");
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > kSymmetryTol)
    throw std::invalid_argument("dpp_log_prob: kernel is not symmetric");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double ev_max = ev.maxCoeff();
  const double ev_min = ev.minCoeff();
  if (ev_min < -1e-8)
    throw std::invalid_argument("dpp_log_prob: kernel is not PSD");
  if (ev_min <= kSingularRelTol * std::max(ev_max, 1e-300)) return kLogClamp;

  double log_p = 0.0;
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    log_p += std::log(ev[i]) - std::log1p(ev[i]);
  return log_p;
}

double dpp_objective(const CandidateSet& x, const QualityWeights* q) {
  const KernelMatrix k = build_kernel(x, q);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(k.lambda);
  const Eigen::VectorXd& ev = es.eigenvalues();
  double f = 0.0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    f += std::log(std::max(ev[i] + kJitter, 1e-300));
    f -= std::log1p(std::max(ev[i], 0.0));
  }
  return f;
}

std::vector<Eigen::VectorXd> dpp_log_prob_grad(const CandidateSet& x,
                                               const QualityWeights* q) {
  check_inputs(x, q);
  const Eigen::Index k_s = static_cast<Eigen::Index>(x.size());
  const Eigen::Index d = x.dim();

  Eigen::MatrixXd u;
  Eigen::VectorXd norms;
  normalized_columns(x, u, norms);

  Eigen::VectorXd qv = Eigen::VectorXd::Ones(k_s);
  if (q) qv = q->q;

  Eigen::MatrixXd lambda_q =
      qv.asDiagonal() * (u.transpose() * u) * qv.asDiagonal();
  lambda_q = 0.5 * (lambda_q + lambda_q.transpose()).eval();

  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(k_s, k_s);
  // G = (lambda_q + eps I)^-1 - (lambda_q + I)^-1; both SPD after the shift.
  const Eigen::MatrixXd g =
      (lambda_q + kJitter * id).ldlt().solve(id) -
      (lambda_q + id).ldlt().solve(id);

  // grad_k = 2 q_k J_k^T sum_j G_kj q_j u_j, with J_k the normalization
  // Jacobian (I - u u^T)/||x|| (or I/floor when the norm is clamped).
  const Eigen::MatrixXd uw = u * qv.asDiagonal();  // columns q_j u_j
  const Eigen::MatrixXd m = uw * g;                // column k: sum_j G_kj q_j u_j

  std::vector<Eigen::VectorXd> grads(static_cast<std::size_t>(k_s));
  for (Eigen::Index k = 0; k < k_s; ++k) {
    const Eigen::VectorXd mk = m.col(k);
    Eigen::VectorXd jk;
    if (norms[k] > kNormFloor) {
      jk = (mk - u.col(k) * (u.col(k).dot(mk))) / norms[k];
    } else {
      jk = mk / kNormFloor;
    }
    grads[static_cast<std::size_t>(k)] = 2.0 * qv[k] * jk;
  }
  return grads;
}

std::vector<Eigen::VectorXd> guidance_term(
    const std::vector<Eigen::VectorXd>& grads, const GuidanceSchedule& schedule,
    int step, int total_steps) {
  std::vector<Eigen::VectorXd> shifts(grads.size());
  const double gamma = schedule.strength(step, total_steps);
  if (gamma == 0.0) {
    for (std::size_t i = 0; i < grads.size(); ++i)
      shifts[i] = Eigen::VectorXd::Zero(grads[i].size());
    return shifts;
  }

  double scale = gamma;
  if (schedule.normalize_by_grad_norm) {
    double sq = 0.0;
    for (const auto& g : grads) sq += g.squaredNorm();
    scale = gamma / std::max(std::sqrt(sq), kNormFloor);
  }
  for (std::size_t i = 0; i < grads.size(); ++i) shifts[i] = scale * grads[i];
  return shifts;
}

}  // namespace autoworld::dpp
