// SPDX-License-Identifier: Apache-2.0

#include "deskpt/optim/newton_schulz.hpp"

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "deskpt/error.hpp"

namespace deskpt {

namespace {

constexpr NsCoefficients kQuintic{3.4445, -4.7750, 2.0315};

// Raw minimax table; each step is divided by (1.01, 1.01^3, 1.01^5).
constexpr NsCoefficients kPolarExpress[] = {
    {8.28721201814563, -23.595886519098837, 17.300387312530933},
    {4.107059111542203, -2.9478499167379106, 0.5448431082926601},
    {3.9486908534822946, -2.908902115962949, 0.5518191394370137},
    {3.3184196573706015, -2.488488024314874, 0.51004894012372},
    {2.300652019954817, -1.6689039845747493, 0.4188073119525673},
    {1.891301407787398, -1.2679958271945868, 0.37680408948524835},
    {1.8750014808534479, -1.2500016453999487, 0.3750001645474248},
};

constexpr double kNormEps = 1e-7;

}  // namespace

std::string_view ns_schedule_name(NsSchedule schedule) {
  return schedule == NsSchedule::polar_express ? "polar_express" : "standard_quintic";
}

NsSchedule parse_ns_schedule(std::string_view name) {
  if (name == "polar_express") return NsSchedule::polar_express;
  if (name == "standard_quintic") return NsSchedule::standard_quintic;
  throw ConfigError("unknown Newton-Schulz schedule '" + std::string(name) + "'");
}

std::vector<NsCoefficients> ns_coefficients(NsSchedule schedule, int steps) {
  if (steps < 1) throw ConfigError("Newton-Schulz needs at least one step");
  std::vector<NsCoefficients> out;
  out.reserve(static_cast<std::size_t>(steps));
  constexpr int table_len = static_cast<int>(std::size(kPolarExpress));
  for (int i = 0; i < steps; ++i) {
    if (schedule == NsSchedule::standard_quintic) {
      out.push_back(kQuintic);
    } else {
      const auto& raw = kPolarExpress[std::min(i, table_len - 1)];
      out.push_back({raw.a / 1.01, raw.b / std::pow(1.01, 3), raw.c / std::pow(1.01, 5)});
    }
  }
  return out;
}

double ns_normalization_slack(NsSchedule schedule) {
  return schedule == NsSchedule::polar_express ? 1.01 : 1.0;
}

template <Real T>
Tensor<T> ns_orthogonalize(const Tensor<T>& m, const NsOptions& options, bool* zero_input) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (m.rank() != 2) throw ShapeError("ns_orthogonalize expects a matrix, got " + shape_str(m.shape()));
  const auto coeffs = ns_coefficients(options.schedule, options.steps);
  const auto rows = m.dim(0), cols = m.dim(1);
  Eigen::Map<const Mat> in(m.data().data(), rows, cols);

  const double norm = static_cast<double>(in.norm());
  if (zero_input) *zero_input = norm == 0.0;
  if (norm == 0.0) return m.clone();

  // Iterate on the wide orientation so the Gram matrix is the small one.
  const bool tall = rows > cols;
  Mat x = tall ? Mat(in.transpose()) : Mat(in);
  x /= static_cast<T>(norm * ns_normalization_slack(options.schedule) + kNormEps);
  Mat gram, poly;
  for (const auto& c : coeffs) {
    gram.noalias() = x * x.transpose();
    poly.noalias() = static_cast<T>(c.b) * gram + static_cast<T>(c.c) * (gram * gram);
    x = static_cast<T>(c.a) * x + poly * x;
  }
  Tensor<T> out({rows, cols});
  Eigen::Map<Mat> dst(out.mutable_data().data(), rows, cols);
  if (tall) {
    dst = x.transpose();
  } else {
    dst = x;
  }
  return out;
}

double ns_scalar_map(double sigma, const NsOptions& options) {
  for (const auto& c : ns_coefficients(options.schedule, options.steps)) {
    const double s2 = sigma * sigma;
    sigma = c.a * sigma + c.b * s2 * sigma + c.c * s2 * s2 * sigma;
  }
  return sigma;
}

template Tensor<float> ns_orthogonalize(const Tensor<float>&, const NsOptions&, bool*);
template Tensor<double> ns_orthogonalize(const Tensor<double>&, const NsOptions&, bool*);

}  // namespace deskpt
