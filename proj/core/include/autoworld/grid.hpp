#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace autoworld::occ {

// Axis-aligned voxel lattice description. dims[i] must equal
// round(extent_i / voxel_i); the latent grid (H, W) must evenly divide
// the voxel grid (nx, ny) so block pooling is exact.
struct GridConfig {
  std::array<double, 3> voxel_size{0.4, 0.4, 0.4};
  std::array<double, 3> range_min{-38.4, -38.4, -1.0};
  std::array<double, 3> range_max{38.4, 38.4, 5.4};
  int nx = 192, ny = 192, nz = 16;   // voxel counts along x, y, z
  int latent_h = 16, latent_w = 16;  // latent spatial resolution
  int latent_c = 50;                 // latent channels

  bool valid() const;
  void validate() const;  // throws std::invalid_argument on inconsistency

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(nx) * ny * nz;
  }

  // Small grid for fast simulation runs: 64x64x8 voxels, 16x16x8 latent.
  static GridConfig desk();
  // Full-resolution variant: 0.4 m voxels over +-38.4 m, 16x16x50 latent.
  static GridConfig full_scale();
};

// Binary voxel volume, x-major layout (x slowest, z fastest).
struct OccupancyGrid {
  GridConfig config;
  std::vector<std::uint8_t> data;  // one byte per voxel, values in {0,1}

  OccupancyGrid() = default;
  explicit OccupancyGrid(const GridConfig& cfg)
      : config(cfg), data(cfg.voxel_count(), 0) {}

  std::size_t index(int ix, int iy, int iz) const {
    return (static_cast<std::size_t>(ix) * config.ny + iy) * config.nz + iz;
  }
  std::uint8_t at(int ix, int iy, int iz) const {
    return data[index(ix, iy, iz)];
  }
  void set(int ix, int iy, int iz, std::uint8_t v) {
    data[index(ix, iy, iz)] = v;
  }
  std::size_t count_occupied() const;
};

// Per-voxel validity flags; same layout as the grid it accompanies.
struct ValidityMask {
  GridConfig config;
  std::vector<std::uint8_t> data;

  ValidityMask() = default;
  explicit ValidityMask(const GridConfig& cfg, std::uint8_t fill = 1)
      : config(cfg), data(cfg.voxel_count(), fill) {}

  std::size_t index(int ix, int iy, int iz) const {
    return (static_cast<std::size_t>(ix) * config.ny + iy) * config.nz + iz;
  }
};

// Planar ego pose; heading wrapped to (-pi, pi].
struct EgoPose2D {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
};

double wrap_angle(double a);

// Voxel-wise occupancy change indicator between a warped past frame and a
// future frame, zero wherever either validity mask is zero.
struct TransitionMap {
  GridConfig config;
  std::vector<std::uint8_t> data;
  int delta = 1;  // frame offset between the compared grids

  TransitionMap() = default;
  explicit TransitionMap(const GridConfig& cfg, int d = 1)
      : config(cfg), data(cfg.voxel_count(), 0), delta(d) {}

  std::size_t index(int ix, int iy, int iz) const {
    return (static_cast<std::size_t>(ix) * config.ny + iy) * config.nz + iz;
  }
};

// Positive spatial weights over the latent grid, unit spatial mean.
struct LatentWeightMap {
  int h = 0, w = 0;
  std::vector<double> data;  // row-major (h, w)
  double lambda = 0.0;

  double at(int i, int j) const { return data[static_cast<std::size_t>(i) * w + j]; }
  double spatial_mean() const;
};

// Real-valued pooled representation of one scene frame, row-major (H, W, C).
struct LatentGrid {
  int h = 0, w = 0, c = 0;
  std::vector<double> data;
  int frame_time = 0;

  LatentGrid() = default;
  LatentGrid(int h_, int w_, int c_, int t = 0)
      : h(h_), w(w_), c(c_),
        data(static_cast<std::size_t>(h_) * w_ * c_, 0.0), frame_time(t) {}

  std::size_t index(int i, int j, int ch) const {
    return (static_cast<std::size_t>(i) * w + j) * c + ch;
  }
  double at(int i, int j, int ch) const { return data[index(i, j, ch)]; }
  double& at(int i, int j, int ch) { return data[index(i, j, ch)]; }
};

struct VoxelizeResult {
  OccupancyGrid grid;
  ValidityMask mask;
};

// Bins points (ego frame) into the voxel lattice. A voxel is occupied iff
// at least one point falls inside it; the mask is 1 everywhere in range
// (visibility model: full coverage, no ray casting).
VoxelizeResult voxelize(const std::vector<std::array<double, 3>>& points,
                        const GridConfig& config);

struct WarpResult {
  OccupancyGrid grid;
  ValidityMask mask;
};

// Resamples (grid, mask) from the source ego frame into the destination
// ego frame through the relative SE(2) transform, nearest voxel, z
// untouched. Out-of-bounds samples become unoccupied and invalid.
WarpResult warp_occupancy(const OccupancyGrid& grid, const ValidityMask& mask,
                          const EgoPose2D& pose_src, const EgoPose2D& pose_dst);

// C(v) = 1[future(v) != warped(v)] * mask_warped(v) * mask_future(v).
TransitionMap transition_map(const OccupancyGrid& y_future,
                             const ValidityMask& m_future,
                             const OccupancyGrid& y_warped,
                             const ValidityMask& m_warped, int delta = 1);

// Fraction of changed voxels per latent cell (block mean over the
// (nx/H) x (ny/W) x nz block), row-major (H, W).
std::vector<double> pooled_change_fraction(const TransitionMap& c,
                                           const GridConfig& config);

// w = 1 + lambda * cbar normalized to unit spatial mean.
LatentWeightMap weight_map_from_fraction(const std::vector<double>& cbar,
                                         int h, int w, double lambda);

// Pools the transition map to latent resolution (block mean of changed
// fraction), applies w = 1 + lambda * cbar, then normalizes to unit
// spatial mean.
LatentWeightMap weight_map(const TransitionMap& c, double lambda,
                           const GridConfig& config);

// Deterministic VAE stand-in: channel k holds the occupancy fraction of
// the k-th vertical slab pooled over each latent-cell block. When there
// are more channels than z-layers the trailing channels stay zero.
LatentGrid encode_latent(const OccupancyGrid& grid, const GridConfig& config);

struct OccupancyIoU {
  double iou_static = 1.0;
  double iou_dynamic = 1.0;
  double iou_all = 1.0;
};

// Intersection-over-union restricted to static (motion == 0), dynamic
// (motion == 1) and all voxels. Empty unions count as perfect agreement.
OccupancyIoU occupancy_metrics(const OccupancyGrid& pred,
                               const OccupancyGrid& gt,
                               const TransitionMap& motion);

// Frechet distance between Gaussian fits of pooled latent features
// (channel mean, then spatial pooling to at most 4x4). Falls back to
// diagonal covariances when either sequence has fewer samples than the
// feature dimension.
double latent_frechet(const std::vector<LatentGrid>& seq_a,
                      const std::vector<LatentGrid>& seq_b);

// Flat binary serialization. 20-byte header: magic ("OCCG" grids, "OCCM"
// masks), u16 version, u16 reserved, u32 nx/ny/nz little-endian, then
// bit-packed voxels in x-major order (LSB first within each byte).
void write_occupancy(std::ostream& os, const OccupancyGrid& grid);
OccupancyGrid read_occupancy(std::istream& is, const GridConfig& config);
void write_mask(std::ostream& os, const ValidityMask& mask);
ValidityMask read_mask(std::istream& is, const GridConfig& config);

void save_occupancy(const std::string& path, const OccupancyGrid& grid);
OccupancyGrid load_occupancy(const std::string& path, const GridConfig& config);

}  // namespace autoworld::occ
