#pragma once

#include <iosfwd>
#include <string>

#include "autoworld/conditioning.hpp"
#include "autoworld/diffusion.hpp"
#include "autoworld/flow.hpp"
#include "autoworld/grid.hpp"

namespace autoworld::io {

// Self-describing text serialization with 17-significant-digit decimals so
// doubles reload bit-exactly. Each value stream is row-major.

std::string format_double(double v);

void write_velocity_spec(std::ostream& os, const flow::VelocityFieldSpec& spec);
flow::VelocityFieldSpec read_velocity_spec(std::istream& is);

void write_denoiser_spec(std::ostream& os, const diff::DenoiserSpec& spec);
diff::DenoiserSpec read_denoiser_spec(std::istream& is);

void write_pooler(std::ostream& os, const cond::PoolerParams& params);
cond::PoolerParams read_pooler(std::istream& is);

void write_noise_schedule(std::ostream& os, const diff::NoiseSchedule& sched);
diff::NoiseSchedule read_noise_schedule(std::istream& is);

void write_grid_config(std::ostream& os, const occ::GridConfig& cfg);
occ::GridConfig read_grid_config(std::istream& is);

}  // namespace autoworld::io
