// SPDX-License-Identifier: Apache-2.0

#include "deskpt/diagnostics/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "deskpt/error.hpp"
#include "deskpt/tensor/graph.hpp"

namespace deskpt {

void Moments::add(double x) {
  const double n1 = static_cast<double>(n);
  ++n;
  const double nn = static_cast<double>(n);
  const double delta = x - mean;
  const double dn = delta / nn;
  const double dn2 = dn * dn;
  const double term1 = delta * dn * n1;
  mean += dn;
  m4 += term1 * dn2 * (nn * nn - 3.0 * nn + 3.0) + 6.0 * dn2 * m2 - 4.0 * dn * m3;
  m3 += term1 * dn * (nn - 2.0) - 3.0 * dn * m2;
  m2 += term1;
}

void Moments::merge(const Moments& o) {
  if (o.n == 0) return;
  if (n == 0) {
    *this = o;
    return;
  }
  const double na = static_cast<double>(n), nb = static_cast<double>(o.n), nt = na + nb;
  const double d = o.mean - mean, d2 = d * d, d3 = d2 * d, d4 = d2 * d2;
  Moments r;
  r.n = n + o.n;
  r.mean = mean + d * nb / nt;
  r.m2 = m2 + o.m2 + d2 * na * nb / nt;
  r.m3 = m3 + o.m3 + d3 * na * nb * (na - nb) / (nt * nt) + 3.0 * d * (na * o.m2 - nb * m2) / nt;
  r.m4 = m4 + o.m4 + d4 * na * nb * (na * na - na * nb + nb * nb) / (nt * nt * nt) +
         6.0 * d2 * (na * na * o.m2 + nb * nb * m2) / (nt * nt) + 4.0 * d * (na * o.m3 - nb * m3) / nt;
  *this = r;
}

double Moments::variance() const { return n > 0 ? m2 / static_cast<double>(n) : 0.0; }

double Moments::kurtosis() const {
  if (n < 4) throw NumericError("kurtosis needs at least 4 samples");
  if (!(m2 > 0.0)) throw NumericError("kurtosis undefined: zero variance");
  return static_cast<double>(n) * m4 / (m2 * m2);
}

template <Real T>
double kurtosis(std::span<const T> samples) {
  Moments m;
  for (T x : samples) m.add(static_cast<double>(x));
  return m.kurtosis();
}

std::string_view probe_name(Probe probe) {
  return probe == Probe::attention_logits ? "attention_logits" : "residual_stream";
}

Probe parse_probe(std::string_view name) {
  if (name == "attention_logits") return Probe::attention_logits;
  if (name == "residual_stream") return Probe::residual_stream;
  throw ConfigError("unknown probe '" + std::string(name) + "'");
}

template <Real T>
std::vector<double> sink_mass_from_probs(const Tensor<T>& probs) {
  if (probs.rank() != 4 || probs.dim(2) != probs.dim(3)) throw ShapeError("sink mass expects (B, H, T, T)");
  const std::int64_t b_n = probs.dim(0), h_n = probs.dim(1), t_n = probs.dim(2);
  if (t_n < 2) throw ShapeError("sink mass needs T >= 2");
  const auto p = probs.data();
  std::vector<double> out(static_cast<std::size_t>(h_n), 0.0);
  for (std::int64_t b = 0; b < b_n; ++b) {
    for (std::int64_t h = 0; h < h_n; ++h) {
      for (std::int64_t t = 1; t < t_n; ++t) {
        out[static_cast<std::size_t>(h)] += static_cast<double>(p[static_cast<std::size_t>(((b * h_n + h) * t_n + t) * t_n)]);
      }
    }
  }
  for (auto& v : out) v /= static_cast<double>(b_n * (t_n - 1));
  return out;
}

template <Real T>
double z_statistic(const Tensor<T>& logits) {
  const std::int64_t v = logits.dim(-1);
  const std::int64_t rows = logits.numel() / v;
  const auto z = logits.data();
  double sum = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto row = z.subspan(static_cast<std::size_t>(r * v), static_cast<std::size_t>(v));
    double mx = -INFINITY;
    for (T x : row) mx = std::max(mx, static_cast<double>(x));
    double s = 0.0;
    for (T x : row) s += std::exp(static_cast<double>(x) - mx);
    const double lse = mx + std::log(s);
    sum += lse * lse;
  }
  return sum / static_cast<double>(rows);
}

namespace {

// One traced forward per batch feeds every statistic.
template <Real T>
struct Collector {
  std::vector<Moments> logit_moments, residual_moments;
  std::vector<std::vector<double>> sink_sum;
  std::vector<double> max_attn;
  std::int64_t sink_count = 0;
  double max_out = 0.0;
  double z_sum = 0.0;
  std::int64_t z_rows = 0;

  void run(const Transformer<T>& model, std::span<const PackedBatch> batches) {
    if (batches.empty()) throw Error("diagnostics need at least one batch");
    const auto layers = static_cast<std::size_t>(model.config().n_layers);
    const auto heads = static_cast<std::size_t>(model.config().n_heads);
    logit_moments.assign(layers, {});
    residual_moments.assign(layers, {});
    sink_sum.assign(layers, std::vector<double>(heads, 0.0));
    max_attn.assign(layers, 0.0);
    NoGradScope<T> no_grad;
    for (const auto& b : batches) {
      ForwardTrace<T> trace;
      const auto logits = model.forward(b.tokens, b.batch, b.seq, &trace);
      if (trace.attention_logits.size() != layers) throw Error("forward trace unavailable");
      for (std::size_t l = 0; l < layers; ++l) {
        const auto& a = trace.attention_logits[l];
        const std::int64_t t_n = a.dim(2);
        const std::int64_t planes = a.numel() / (t_n * t_n);
        const auto data = a.data();
        for (std::int64_t pl = 0; pl < planes; ++pl) {
          for (std::int64_t i = 0; i < t_n; ++i) {
            for (std::int64_t j = 0; j <= i; ++j) {
              const double x = static_cast<double>(data[static_cast<std::size_t>((pl * t_n + i) * t_n + j)]);
              logit_moments[l].add(x);
              max_attn[l] = std::max(max_attn[l], std::abs(x));
            }
          }
        }
        for (T x : trace.residual[l].data()) residual_moments[l].add(static_cast<double>(x));
        if (t_n >= 2) {
          const auto mass = sink_mass_from_probs(trace.attention_probs[l]);
          const double weight = static_cast<double>(b.batch * (t_n - 1));
          for (std::size_t h = 0; h < heads; ++h) sink_sum[l][h] += mass[h] * weight;
        }
      }
      if (b.seq >= 2) sink_count += b.batch * (b.seq - 1);
      for (T x : logits.data()) max_out = std::max(max_out, std::abs(static_cast<double>(x)));
      const std::int64_t rows = logits.numel() / logits.dim(-1);
      z_sum += z_statistic(logits) * static_cast<double>(rows);
      z_rows += rows;
    }
  }
};

LayerStats layer_stats(std::int64_t layer, const Moments& m) {
  LayerStats s;
  s.layer = layer;
  s.mean = m.mean;
  s.variance = m.variance();
  s.sample_count = m.n;
  s.kurtosis = (m.n >= 4 && m.m2 > 0.0) ? m.kurtosis() : NAN;
  return s;
}

}  // namespace

template <Real T>
std::vector<LayerStats> kurtosis_profile(const Transformer<T>& model, std::span<const PackedBatch> batches,
                                         Probe probe) {
  Collector<T> c;
  c.run(model, batches);
  const auto& moments = probe == Probe::attention_logits ? c.logit_moments : c.residual_moments;
  std::vector<LayerStats> out;
  for (std::size_t l = 0; l < moments.size(); ++l) out.push_back(layer_stats(static_cast<std::int64_t>(l + 1), moments[l]));
  return out;
}

template <Real T>
std::vector<std::vector<double>> attention_sink_mass(const Transformer<T>& model,
                                                     std::span<const PackedBatch> batches) {
  Collector<T> c;
  c.run(model, batches);
  if (c.sink_count == 0) throw ShapeError("sink mass needs T >= 2");
  for (auto& layer : c.sink_sum) {
    for (auto& v : layer) v /= static_cast<double>(c.sink_count);
  }
  return c.sink_sum;
}

template <Real T>
LogitStats logit_stats(const Transformer<T>& model, std::span<const PackedBatch> batches) {
  Collector<T> c;
  c.run(model, batches);
  return {c.max_attn, c.max_out, c.z_sum / static_cast<double>(c.z_rows)};
}

template <Real T>
std::vector<nlohmann::json> diagnostics_report(const Transformer<T>& model, std::span<const PackedBatch> batches) {
  Collector<T> c;
  c.run(model, batches);
  const auto& cfg = model.config();
  std::vector<nlohmann::json> out;
  std::int64_t tokens = 0;
  for (const auto& b : batches) tokens += b.batch * b.seq;
  out.push_back({{"record", "header"},
                 {"kurtosis_convention", "non-excess, m4 / m2^2 (normal = 3)"},
                 {"attention_logit_samples", "causal entries only"},
                 {"n_layers", cfg.n_layers},
                 {"n_heads", cfg.n_heads},
                 {"head_dim", cfg.head_dim},
                 {"toggles", cfg.toggles},
                 {"batches", batches.size()},
                 {"tokens", tokens}});
  auto rec = [&](nlohmann::json layer, nlohmann::json head, const std::string& stat, double value) {
    out.push_back({{"layer", std::move(layer)},
                   {"head", std::move(head)},
                   {"statistic", stat},
                   {"value", std::isfinite(value) ? nlohmann::json(value) : nlohmann::json(nullptr)}});
  };
  for (std::size_t l = 0; l < c.logit_moments.size(); ++l) {
    const auto layer = static_cast<std::int64_t>(l + 1);
    const auto la = layer_stats(layer, c.logit_moments[l]);
    const auto lr = layer_stats(layer, c.residual_moments[l]);
    rec(layer, nullptr, "kurtosis_attention_logits", la.kurtosis);
    rec(layer, nullptr, "variance_attention_logits", la.variance);
    rec(layer, nullptr, "kurtosis_residual_stream", lr.kurtosis);
    rec(layer, nullptr, "variance_residual_stream", lr.variance);
    rec(layer, nullptr, "max_abs_attention_logit", c.max_attn[l]);
    for (std::size_t h = 0; h < c.sink_sum[l].size(); ++h) {
      const double mass = c.sink_count > 0 ? c.sink_sum[l][h] / static_cast<double>(c.sink_count) : NAN;
      rec(layer, static_cast<std::int64_t>(h), "sink_mass", mass);
    }
  }
  rec(nullptr, nullptr, "max_abs_output_logit", c.max_out);
  rec(nullptr, nullptr, "mean_log2_partition", c.z_sum / static_cast<double>(c.z_rows));
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& r : records) out << r.dump() << '\n';
}

#define DESKPT_INSTANTIATE(T)                                                                                  \
  template double kurtosis<T>(std::span<const T>);                                                             \
  template std::vector<LayerStats> kurtosis_profile<T>(const Transformer<T>&, std::span<const PackedBatch>,   \
                                                       Probe);                                                 \
  template std::vector<double> sink_mass_from_probs<T>(const Tensor<T>&);                                      \
  template std::vector<std::vector<double>> attention_sink_mass<T>(const Transformer<T>&,                     \
                                                                   std::span<const PackedBatch>);              \
  template double z_statistic<T>(const Tensor<T>&);                                                            \
  template LogitStats logit_stats<T>(const Transformer<T>&, std::span<const PackedBatch>);                     \
  template std::vector<nlohmann::json> diagnostics_report<T>(const Transformer<T>&, std::span<const PackedBatch>);

DESKPT_INSTANTIATE(float)
DESKPT_INSTANTIATE(double)
#undef DESKPT_INSTANTIATE

}  // namespace deskpt
