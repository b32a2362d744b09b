#include "autoworld/grid.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace autoworld::occ {

namespace {

constexpr std::uint16_t kFormatVersion = 1;

int bin_index(double v, double lo, double pitch) {
  return static_cast<int>(std::floor((v - lo) / pitch));
}

}  // namespace

double wrap_angle(double a) {
  a = std::fmod(a + std::numbers::pi, 2.0 * std::numbers::pi);
  if (a <= 0.0) a += 2.0 * std::numbers::pi;
  return a - std::numbers::pi;
}

bool GridConfig::valid() const {
  if (nx <= 0 || ny <= 0 || nz <= 0) return false;
  if (latent_h <= 0 || latent_w <= 0 || latent_c <= 0) return false;
  const int dims[3] = {nx, ny, nz};
  for (int i = 0; i < 3; ++i) {
    if (!(voxel_size[i] > 0.0)) return false;
    if (!(range_max[i] > range_min[i])) return false;
    const double extent = range_max[i] - range_min[i];
    if (dims[i] != static_cast<int>(std::lround(extent / voxel_size[i])))
      return false;
  }
  if (nx % latent_h != 0 || ny % latent_w != 0) return false;
  return true;
}

void GridConfig::validate() const {
  if (!valid())
    throw std::invalid_argument(
        "GridConfig: dims inconsistent with range/voxel_size or latent dims");
}

GridConfig GridConfig::desk() {
  GridConfig cfg;
  cfg.voxel_size = {1.2, 1.2, 0.8};
  cfg.range_min = {-38.4, -38.4, -1.0};
  cfg.range_max = {38.4, 38.4, 5.4};
  cfg.nx = 64;
  cfg.ny = 64;
  cfg.nz = 8;
  cfg.latent_h = 16;
  cfg.latent_w = 16;
  cfg.latent_c = 8;
  return cfg;
}

GridConfig GridConfig::full_scale() {
  GridConfig cfg;
  cfg.voxel_size = {0.4, 0.4, 0.4};
  cfg.range_min = {-38.4, -38.4, -1.0};
  cfg.range_max = {38.4, 38.4, 5.4};
  cfg.nx = 192;
  cfg.ny = 192;
  cfg.nz = 16;
  cfg.latent_h = 16;
  cfg.latent_w = 16;
  cfg.latent_c = 50;
  return cfg;
}

std::size_t OccupancyGrid::count_occupied() const {
  return static_cast<std::size_t>(
      std::count(data.begin(), data.end(), std::uint8_t{1}));
}

double LatentWeightMap::spatial_mean() const {
  if (data.empty()) return 0.0;
  return std::accumulate(data.begin(), data.end(), 0.0) /
         static_cast<double>(data.size());
}

VoxelizeResult voxelize(const std::vector<std::array<double, 3>>& points,
                        const GridConfig& config) {
  config.validate();
  VoxelizeResult out{OccupancyGrid(config), ValidityMask(config, 1)};
  const int dims[3] = {config.nx, config.ny, config.nz};
  for (const auto& p : points) {
    int idx[3];
    bool inside = true;
    for (int i = 0; i < 3; ++i) {
      if (!std::isfinite(p[i]))
        throw std::invalid_argument("voxelize: non-finite point coordinate");
      idx[i] = bin_index(p[i], config.range_min[i], config.voxel_size[i]);
      if (idx[i] < 0 || idx[i] >= dims[i]) {
        inside = false;
        break;
      }
    }
    if (inside) out.grid.set(idx[0], idx[1], idx[2], 1);
  }
  return out;
}

WarpResult warp_occupancy(const OccupancyGrid& grid, const ValidityMask& mask,
                          const EgoPose2D& pose_src,
                          const EgoPose2D& pose_dst) {
  if (grid.data.size() != mask.data.size() ||
      grid.config.nx != mask.config.nx || grid.config.ny != mask.config.ny ||
      grid.config.nz != mask.config.nz)
    throw std::invalid_argument("warp_occupancy: grid/mask config mismatch");

  const GridConfig& cfg = grid.config;
  WarpResult out{OccupancyGrid(cfg), ValidityMask(cfg, 0)};

  // Destination voxel center -> world -> source frame.
  const double cd = std::cos(pose_dst.heading), sd = std::sin(pose_dst.heading);
  const double cs = std::cos(pose_src.heading), ss = std::sin(pose_src.heading);

  for (int ix = 0; ix < cfg.nx; ++ix) {
    const double x = cfg.range_min[0] + (ix + 0.5) * cfg.voxel_size[0];
    for (int iy = 0; iy < cfg.ny; ++iy) {
      const double y = cfg.range_min[1] + (iy + 0.5) * cfg.voxel_size[1];
      const double wx = pose_dst.x + cd * x - sd * y;
      const double wy = pose_dst.y + sd * x + cd * y;
      const double dx = wx - pose_src.x;
      const double dy = wy - pose_src.y;
      const double sx = cs * dx + ss * dy;
      const double sy = -ss * dx + cs * dy;
      const int jx = bin_index(sx, cfg.range_min[0], cfg.voxel_size[0]);
      const int jy = bin_index(sy, cfg.range_min[1], cfg.voxel_size[1]);
      if (jx < 0 || jx >= cfg.nx || jy < 0 || jy >= cfg.ny) continue;
      for (int iz = 0; iz < cfg.nz; ++iz) {
        out.grid.set(ix, iy, iz, grid.at(jx, jy, iz));
        out.mask.data[out.mask.index(ix, iy, iz)] =
            mask.data[mask.index(jx, jy, iz)];
      }
    }
  }
  return out;
}

TransitionMap transition_map(const OccupancyGrid& y_future,
                             const ValidityMask& m_future,
                             const OccupancyGrid& y_warped,
                             const ValidityMask& m_warped, int delta) {
  const std::size_t n = y_future.data.size();
  if (m_future.data.size() != n || y_warped.data.size() != n ||
      m_warped.data.size() != n)
    throw std::invalid_argument("transition_map: shape mismatch");

  TransitionMap out(y_future.config, delta);
  for (std::size_t v = 0; v < n; ++v) {
    const std::uint8_t changed = y_future.data[v] != y_warped.data[v] ? 1 : 0;
    out.data[v] = changed & m_warped.data[v] & m_future.data[v];
  }
  return out;
}

std::vector<double> pooled_change_fraction(const TransitionMap& c,
                                           const GridConfig& config) {
  config.validate();
  const int bh = config.nx / config.latent_h;
  const int bw = config.ny / config.latent_w;
  const double block = static_cast<double>(bh) * bw * config.nz;

  std::vector<double> cbar(
      static_cast<std::size_t>(config.latent_h) * config.latent_w, 0.0);
  for (int i = 0; i < config.latent_h; ++i)
    for (int j = 0; j < config.latent_w; ++j) {
      std::size_t changed = 0;
      for (int ix = i * bh; ix < (i + 1) * bh; ++ix)
        for (int iy = j * bw; iy < (j + 1) * bw; ++iy)
          for (int iz = 0; iz < config.nz; ++iz)
            changed += c.data[c.index(ix, iy, iz)];
      cbar[static_cast<std::size_t>(i) * config.latent_w + j] =
          static_cast<double>(changed) / block;
    }
  return cbar;
}

LatentWeightMap weight_map_from_fraction(const std::vector<double>& cbar,
                                         int h, int w, double lambda) {
  if (lambda < 0.0)
    throw std::invalid_argument("weight_map: lambda must be nonnegative");
  if (cbar.size() != static_cast<std::size_t>(h) * w)
    throw std::invalid_argument("weight_map: fraction size mismatch");

  LatentWeightMap map;
  map.h = h;
  map.w = w;
  map.lambda = lambda;
  map.data.resize(cbar.size());
  for (std::size_t i = 0; i < cbar.size(); ++i)
    map.data[i] = 1.0 + lambda * cbar[i];
  const double mean = map.spatial_mean();
  for (double& v : map.data) v /= mean;
  return map;
}

LatentWeightMap weight_map(const TransitionMap& c, double lambda,
                           const GridConfig& config) {
  return weight_map_from_fraction(pooled_change_fraction(c, config),
                                  config.latent_h, config.latent_w, lambda);
}

LatentGrid encode_latent(const OccupancyGrid& grid, const GridConfig& config) {
  config.validate();
  LatentGrid z(config.latent_h, config.latent_w, config.latent_c);

  const int bh = config.nx / config.latent_h;
  const int bw = config.ny / config.latent_w;
  // Partition the z-layers into min(C, nz) contiguous slabs; channels
  // beyond the defined slabs stay zero.
  const int c_eff = std::min(config.latent_c, config.nz);

  for (int ch = 0; ch < c_eff; ++ch) {
    const int z0 = ch * config.nz / c_eff;
    const int z1 = (ch + 1) * config.nz / c_eff;
    const double block = static_cast<double>(bh) * bw * (z1 - z0);
    for (int i = 0; i < config.latent_h; ++i) {
      for (int j = 0; j < config.latent_w; ++j) {
        std::size_t occupied = 0;
        for (int ix = i * bh; ix < (i + 1) * bh; ++ix)
          for (int iy = j * bw; iy < (j + 1) * bw; ++iy)
            for (int iz = z0; iz < z1; ++iz)
              occupied += grid.at(ix, iy, iz);
        z.at(i, j, ch) = static_cast<double>(occupied) / block;
      }
    }
  }
  return z;
}

OccupancyIoU occupancy_metrics(const OccupancyGrid& pred,
                               const OccupancyGrid& gt,
                               const TransitionMap& motion) {
  const std::size_t n = pred.data.size();
  if (gt.data.size() != n || motion.data.size() != n)
    throw std::invalid_argument("occupancy_metrics: shape mismatch");

  std::size_t inter[3] = {0, 0, 0};  // static, dynamic, all
  std::size_t uni[3] = {0, 0, 0};
  for (std::size_t v = 0; v < n; ++v) {
    const bool p = pred.data[v] != 0;
    const bool g = gt.data[v] != 0;
    const int region = motion.data[v] != 0 ? 1 : 0;
    if (p && g) {
      ++inter[region];
      ++inter[2];
    }
    if (p || g) {
      ++uni[region];
      ++uni[2];
    }
  }
  auto iou = [](std::size_t i, std::size_t u) {
    return u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u);
  };
  return OccupancyIoU{iou(inter[0], uni[0]), iou(inter[1], uni[1]),
                      iou(inter[2], uni[2])};
}

namespace {

// Pooled feature for the Frechet stand-in: mean over channels, then block
// mean down to at most 4x4 spatial cells.
Eigen::VectorXd frechet_feature(const LatentGrid& z) {
  const int ph = std::min(z.h, 4);
  const int pw = std::min(z.w, 4);
  Eigen::VectorXd f = Eigen::VectorXd::Zero(ph * pw);
  Eigen::MatrixXd chan_mean = Eigen::MatrixXd::Zero(z.h, z.w);
  for (int i = 0; i < z.h; ++i)
    for (int j = 0; j < z.w; ++j) {
      double s = 0.0;
      for (int ch = 0; ch < z.c; ++ch) s += z.at(i, j, ch);
      chan_mean(i, j) = s / z.c;
    }
  for (int i = 0; i < z.h; ++i)
    for (int j = 0; j < z.w; ++j) {
      const int pi = i * ph / z.h;
      const int pj = j * pw / z.w;
      f[pi * pw + pj] += chan_mean(i, j);
    }
  // Each pooled cell averages the block that mapped onto it.
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(ph * pw);
  for (int i = 0; i < z.h; ++i)
    for (int j = 0; j < z.w; ++j)
      counts[(i * ph / z.h) * pw + (j * pw / z.w)] += 1.0;
  return f.cwiseQuotient(counts);
}

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

GaussianFit fit_gaussian(const std::vector<LatentGrid>& seq, bool diagonal) {
  const std::size_t n = seq.size();
  const Eigen::VectorXd f0 = frechet_feature(seq[0]);
  const Eigen::Index d = f0.size();
  Eigen::MatrixXd feats(d, static_cast<Eigen::Index>(n));
  feats.col(0) = f0;
  for (std::size_t i = 1; i < n; ++i) feats.col(static_cast<Eigen::Index>(i)) = frechet_feature(seq[i]);

  GaussianFit fit;
  fit.mean = feats.rowwise().mean();
  Eigen::MatrixXd centered = feats.colwise() - fit.mean;
  fit.cov = centered * centered.transpose() / static_cast<double>(n);
  if (diagonal) fit.cov = fit.cov.diagonal().asDiagonal();
  return fit;
}

double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  // tr((a b)^{1/2}) = sum sqrt(eig(a^{1/2} b a^{1/2})); symmetric PSD route.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(a);
  Eigen::VectorXd sq = es_a.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Eigen::MatrixXd a_half =
      es_a.eigenvectors() * sq.asDiagonal() * es_a.eigenvectors().transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a_half * b * a_half);
  return es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

}  // namespace

double latent_frechet(const std::vector<LatentGrid>& seq_a,
                      const std::vector<LatentGrid>& seq_b) {
  if (seq_a.empty() || seq_b.empty())
    throw std::invalid_argument("latent_frechet: empty sequence");

  const Eigen::Index d = frechet_feature(seq_a[0]).size();
  // Diagonal fallback applies to both fits so the distance stays symmetric.
  const bool diagonal =
      std::min(seq_a.size(), seq_b.size()) < static_cast<std::size_t>(d);

  const GaussianFit ga = fit_gaussian(seq_a, diagonal);
  const GaussianFit gb = fit_gaussian(seq_b, diagonal);
  if (ga.mean.size() != gb.mean.size())
    throw std::invalid_argument("latent_frechet: feature dims differ");

  const double mean_term = (ga.mean - gb.mean).squaredNorm();
  double trace_term;
  if (diagonal) {
    const Eigen::VectorXd da = ga.cov.diagonal().cwiseMax(0.0);
    const Eigen::VectorXd db = gb.cov.diagonal().cwiseMax(0.0);
    trace_term = (da.cwiseSqrt() - db.cwiseSqrt()).squaredNorm();
  } else {
    trace_term = ga.cov.trace() + gb.cov.trace() -
                 2.0 * trace_sqrt_product(ga.cov, gb.cov);
  }
  return mean_term + std::max(trace_term, 0.0);
}

namespace {

void write_header(std::ostream& os, const char magic[4], const GridConfig& cfg) {
  os.write(magic, 4);
  const std::uint16_t version = kFormatVersion;
  const std::uint16_t reserved = 0;
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(cfg.nx),
                                 static_cast<std::uint32_t>(cfg.ny),
                                 static_cast<std::uint32_t>(cfg.nz)};
  os.write(reinterpret_cast<const char*>(&version), sizeof(version));
  os.write(reinterpret_cast<const char*>(&reserved), sizeof(reserved));
  os.write(reinterpret_cast<const char*>(dims), sizeof(dims));
}

void write_bits(std::ostream& os, const std::vector<std::uint8_t>& data) {
  std::vector<std::uint8_t> packed((data.size() + 7) / 8, 0);
  for (std::size_t v = 0; v < data.size(); ++v)
    if (data[v]) packed[v / 8] |= static_cast<std::uint8_t>(1u << (v % 8));
  os.write(reinterpret_cast<const char*>(packed.data()),
           static_cast<std::streamsize>(packed.size()));
}

std::vector<std::uint8_t> read_payload(std::istream& is, const char magic[4],
                                       const GridConfig& cfg) {
  char m[4];
  is.read(m, 4);
  if (!is || std::memcmp(m, magic, 4) != 0)
    throw std::invalid_argument("occupancy file: bad magic");
  std::uint16_t version = 0, reserved = 0;
  std::uint32_t dims[3];
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  is.read(reinterpret_cast<char*>(&reserved), sizeof(reserved));
  is.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!is || version != kFormatVersion)
    throw std::invalid_argument("occupancy file: unsupported version");
  if (dims[0] != static_cast<std::uint32_t>(cfg.nx) ||
      dims[1] != static_cast<std::uint32_t>(cfg.ny) ||
      dims[2] != static_cast<std::uint32_t>(cfg.nz))
    throw std::invalid_argument("occupancy file: dims do not match config");

  const std::size_t n = cfg.voxel_count();
  std::vector<std::uint8_t> packed((n + 7) / 8);
  is.read(reinterpret_cast<char*>(packed.data()),
          static_cast<std::streamsize>(packed.size()));
  if (!is) throw std::invalid_argument("occupancy file: truncated payload");

  std::vector<std::uint8_t> data(n, 0);
  for (std::size_t v = 0; v < n; ++v)
    data[v] = (packed[v / 8] >> (v % 8)) & 1u;
  return data;
}

}  // namespace

void write_occupancy(std::ostream& os, const OccupancyGrid& grid) {
  write_header(os, "OCCG", grid.config);
  write_bits(os, grid.data);
}

OccupancyGrid read_occupancy(std::istream& is, const GridConfig& config) {
  OccupancyGrid grid(config);
  grid.data = read_payload(is, "OCCG", config);
  return grid;
}

void write_mask(std::ostream& os, const ValidityMask& mask) {
  write_header(os, "OCCM", mask.config);
  write_bits(os, mask.data);
}

ValidityMask read_mask(std::istream& is, const GridConfig& config) {
  ValidityMask mask(config);
  mask.data = read_payload(is, "OCCM", config);
  return mask;
}

void save_occupancy(const std::string& path, const OccupancyGrid& grid) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::invalid_argument("cannot open for write: " + path);
  write_occupancy(os, grid);
}

OccupancyGrid load_occupancy(const std::string& path,
                             const GridConfig& config) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("cannot open for read: " + path);
  return read_occupancy(is, config);
}

}  // namespace autoworld::occ
