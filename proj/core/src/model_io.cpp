#include "autoworld/model_io.hpp"

#include <cstdio>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace autoworld::io {

namespace {

void expect(std::istream& is, const std::string& token) {
  std::string got;
  is >> got;
  if (!is || got != token)
    throw std::invalid_argument("model file: expected '" + token + "', got '" +
                                got + "'");
}

double read_double(std::istream& is) {
  std::string s;
  is >> s;
  if (!is) throw std::invalid_argument("model file: truncated value stream");
  return std::strtod(s.c_str(), nullptr);
}

long read_long(std::istream& is) {
  long v;
  is >> v;
  if (!is) throw std::invalid_argument("model file: expected integer");
  return v;
}

void write_matrix(std::ostream& os, const std::string& name,
                  const Eigen::MatrixXd& m) {
  os << "matrix " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) os << ' ';
      os << format_double(m(i, j));
    }
    os << '\n';
  }
}

Eigen::MatrixXd read_matrix(std::istream& is, const std::string& name) {
  expect(is, "matrix");
  expect(is, name);
  const long rows = read_long(is);
  const long cols = read_long(is);
  Eigen::MatrixXd m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = read_double(is);
  return m;
}

void write_vector(std::ostream& os, const std::string& name,
                  const Eigen::VectorXd& v) {
  os << "vector " << name << ' ' << v.size() << '\n';
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) os << ' ';
    os << format_double(v[i]);
  }
  os << '\n';
}

Eigen::VectorXd read_vector(std::istream& is, const std::string& name) {
  expect(is, "vector");
  expect(is, name);
  const long n = read_long(is);
  Eigen::VectorXd v(n);
  for (long i = 0; i < n; ++i) v[i] = read_double(is);
  return v;
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_velocity_spec(std::ostream& os,
                         const flow::VelocityFieldSpec& spec) {
  os << "velocity_field\n";
  switch (spec.kind) {
    case flow::VelocityKind::kLinearPerBin: {
      os << "kind linear_per_bin\n";
      os << "condition_dim " << spec.condition_dim << '\n';
      os << "channels " << spec.channels << '\n';
      os << "bins " << spec.bins.size() << '\n';
      for (std::size_t b = 0; b < spec.bins.size(); ++b) {
        os << "bin " << b << '\n';
        write_matrix(os, "a", spec.bins[b].a);
        write_matrix(os, "b_cond", spec.bins[b].b_cond);
        write_vector(os, "offset", spec.bins[b].offset);
      }
      break;
    }
    case flow::VelocityKind::kGaussianOracle: {
      os << "kind gaussian_oracle\n";
      write_vector(os, "mean", spec.oracle_mean);
      os << "var " << format_double(spec.oracle_var) << '\n';
      break;
    }
    case flow::VelocityKind::kTabulated: {
      os << "kind tabulated\n";
      os << "bins " << spec.table.size() << '\n';
      for (std::size_t b = 0; b < spec.table.size(); ++b) {
        os << "bin " << b << '\n';
        write_vector(os, "value", spec.table[b]);
      }
      break;
    }
  }
  os << "end_velocity_field\n";
}

flow::VelocityFieldSpec read_velocity_spec(std::istream& is) {
  expect(is, "velocity_field");
  expect(is, "kind");
  std::string kind;
  is >> kind;

  flow::VelocityFieldSpec spec;
  if (kind == "linear_per_bin") {
    spec.kind = flow::VelocityKind::kLinearPerBin;
    expect(is, "condition_dim");
    spec.condition_dim = static_cast<int>(read_long(is));
    expect(is, "channels");
    spec.channels = static_cast<int>(read_long(is));
    expect(is, "bins");
    const long bins = read_long(is);
    spec.bins.resize(static_cast<std::size_t>(bins));
    for (long b = 0; b < bins; ++b) {
      expect(is, "bin");
      read_long(is);
      auto& bin = spec.bins[static_cast<std::size_t>(b)];
      bin.a = read_matrix(is, "a");
      bin.b_cond = read_matrix(is, "b_cond");
      bin.offset = read_vector(is, "offset");
    }
  } else if (kind == "gaussian_oracle") {
    spec.kind = flow::VelocityKind::kGaussianOracle;
    spec.oracle_mean = read_vector(is, "mean");
    expect(is, "var");
    spec.oracle_var = read_double(is);
  } else if (kind == "tabulated") {
    spec.kind = flow::VelocityKind::kTabulated;
    expect(is, "bins");
    const long bins = read_long(is);
    spec.table.resize(static_cast<std::size_t>(bins));
    for (long b = 0; b < bins; ++b) {
      expect(is, "bin");
      read_long(is);
      spec.table[static_cast<std::size_t>(b)] = read_vector(is, "value");
    }
  } else {
    throw std::invalid_argument("model file: unknown velocity kind " + kind);
  }
  expect(is, "end_velocity_field");
  return spec;
}

void write_denoiser_spec(std::ostream& os, const diff::DenoiserSpec& spec) {
  os << "denoiser\n";
  if (spec.kind == diff::DenoiserKind::kGaussianOracle) {
    os << "kind gaussian_oracle\n";
    write_vector(os, "mean", spec.oracle_mean);
    os << "var " << format_double(spec.oracle_var) << '\n';
  } else {
    os << "kind linear_conditional\n";
    os << "cond_dim " << spec.cond_dim << '\n';
    os << "bins " << spec.bins.size() << '\n';
    for (std::size_t b = 0; b < spec.bins.size(); ++b) {
      os << "bin " << b << '\n';
      write_matrix(os, "a", spec.bins[b].a_mat);
      write_matrix(os, "b_cond", spec.bins[b].b_cond);
      write_vector(os, "offset", spec.bins[b].offset);
    }
  }
  os << "end_denoiser\n";
}

diff::DenoiserSpec read_denoiser_spec(std::istream& is) {
  expect(is, "denoiser");
  expect(is, "kind");
  std::string kind;
  is >> kind;

  diff::DenoiserSpec spec;
  if (kind == "gaussian_oracle") {
    spec.kind = diff::DenoiserKind::kGaussianOracle;
    spec.oracle_mean = read_vector(is, "mean");
    expect(is, "var");
    spec.oracle_var = read_double(is);
  } else if (kind == "linear_conditional") {
    spec.kind = diff::DenoiserKind::kLinearConditional;
    expect(is, "cond_dim");
    spec.cond_dim = static_cast<int>(read_long(is));
    expect(is, "bins");
    const long bins = read_long(is);
    spec.bins.resize(static_cast<std::size_t>(bins));
    for (long b = 0; b < bins; ++b) {
      expect(is, "bin");
      read_long(is);
      auto& bin = spec.bins[static_cast<std::size_t>(b)];
      bin.a_mat = read_matrix(is, "a");
      bin.b_cond = read_matrix(is, "b_cond");
      bin.offset = read_vector(is, "offset");
    }
  } else {
    throw std::invalid_argument("model file: unknown denoiser kind " + kind);
  }
  expect(is, "end_denoiser");
  return spec;
}

void write_pooler(std::ostream& os, const cond::PoolerParams& params) {
  os << "pooler\n";
  os << "heads " << params.num_heads << '\n';
  os << "stride " << params.stride << '\n';
  write_vector(os, "query", params.query.transpose());
  write_matrix(os, "proj_in", params.proj_in);
  write_matrix(os, "proj_cond", params.proj_cond);
  os << "end_pooler\n";
}

cond::PoolerParams read_pooler(std::istream& is) {
  expect(is, "pooler");
  cond::PoolerParams p;
  expect(is, "heads");
  p.num_heads = static_cast<int>(read_long(is));
  expect(is, "stride");
  p.stride = static_cast<int>(read_long(is));
  p.query = read_vector(is, "query").transpose();
  p.proj_in = read_matrix(is, "proj_in");
  p.proj_cond = read_matrix(is, "proj_cond");
  expect(is, "end_pooler");
  return p;
}

void write_noise_schedule(std::ostream& os, const diff::NoiseSchedule& sched) {
  os << "noise_schedule\n";
  write_vector(os, "betas", sched.betas);
  os << "end_noise_schedule\n";
}

diff::NoiseSchedule read_noise_schedule(std::istream& is) {
  expect(is, "noise_schedule");
  const Eigen::VectorXd betas = read_vector(is, "betas");
  expect(is, "end_noise_schedule");

  diff::NoiseSchedule s;
  s.betas = betas;
  s.alphas = 1.0 - betas.array();
  s.alpha_bar.resize(betas.size());
  double prod = 1.0;
  for (Eigen::Index k = 0; k < betas.size(); ++k) {
    prod *= s.alphas[k];
    s.alpha_bar[k] = prod;
  }
  s.validate();
  return s;
}

void write_grid_config(std::ostream& os, const occ::GridConfig& cfg) {
  os << "grid\n";
  os << "voxel " << format_double(cfg.voxel_size[0]) << ' '
     << format_double(cfg.voxel_size[1]) << ' '
     << format_double(cfg.voxel_size[2]) << '\n';
  os << "range_min " << format_double(cfg.range_min[0]) << ' '
     << format_double(cfg.range_min[1]) << ' '
     << format_double(cfg.range_min[2]) << '\n';
  os << "range_max " << format_double(cfg.range_max[0]) << ' '
     << format_double(cfg.range_max[1]) << ' '
     << format_double(cfg.range_max[2]) << '\n';
  os << "dims " << cfg.nx << ' ' << cfg.ny << ' ' << cfg.nz << '\n';
  os << "latent " << cfg.latent_h << ' ' << cfg.latent_w << ' '
     << cfg.latent_c << '\n';
  os << "end_grid\n";
}

occ::GridConfig read_grid_config(std::istream& is) {
  expect(is, "grid");
  occ::GridConfig cfg;
  expect(is, "voxel");
  for (auto& v : cfg.voxel_size) v = read_double(is);
  expect(is, "range_min");
  for (auto& v : cfg.range_min) v = read_double(is);
  expect(is, "range_max");
  for (auto& v : cfg.range_max) v = read_double(is);
  expect(is, "dims");
  cfg.nx = static_cast<int>(read_long(is));
  cfg.ny = static_cast<int>(read_long(is));
  cfg.nz = static_cast<int>(read_long(is));
  expect(is, "latent");
  cfg.latent_h = static_cast<int>(read_long(is));
  cfg.latent_w = static_cast<int>(read_long(is));
  cfg.latent_c = static_cast<int>(read_long(is));
  expect(is, "end_grid");
  cfg.validate();
  return cfg;
}

}  // namespace autoworld::io
