// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "deskpt/data/mixture.hpp"
#include "deskpt/model/transformer.hpp"
#include "json.hpp"

namespace deskpt {

// Running central moments up to order 4 (single-pass, mergeable).
struct Moments {
  std::int64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;
  double m3 = 0.0;
  double m4 = 0.0;

  void add(double x);
  void merge(const Moments& other);
  double variance() const;  // population variance
  // m4 / m2^2 of the population (normal = 3). NumericError with fewer than
  // 4 samples or zero variance.
  double kurtosis() const;
};

template <Real T>
double kurtosis(std::span<const T> samples);

struct LayerStats {
  std::int64_t layer = 0;  // 1-based
  double kurtosis = 0.0;   // NaN when the variance is zero
  double mean = 0.0;
  double variance = 0.0;
  std::int64_t sample_count = 0;
};

enum class Probe { attention_logits, residual_stream };

std::string_view probe_name(Probe probe);
Probe parse_probe(std::string_view name);

// Attention logits count causal entries only (key position <= query).
template <Real T>
std::vector<LayerStats> kurtosis_profile(const Transformer<T>& model, std::span<const PackedBatch> batches,
                                         Probe probe = Probe::attention_logits);

// probs: (B, H, T, T). Per head, mean over b and t >= 1 of probs[b, h, t, 0].
template <Real T>
std::vector<double> sink_mass_from_probs(const Tensor<T>& probs);

// [layer][head] mean attention mass on position 0.
template <Real T>
std::vector<std::vector<double>> attention_sink_mass(const Transformer<T>& model,
                                                     std::span<const PackedBatch> batches);

struct LogitStats {
  std::vector<double> max_abs_attention_logit;  // per layer, causal entries
  double max_abs_output_logit = 0.0;
  double mean_log2_partition = 0.0;  // mean over positions of (log sum exp z)^2
};

// Mean over rows of (logsumexp of the row)^2; logits (..., V).
template <Real T>
double z_statistic(const Tensor<T>& logits);

template <Real T>
LogitStats logit_stats(const Transformer<T>& model, std::span<const PackedBatch> batches);

// JSON-lines records: a header, then one record per (layer, head,
// statistic). head is null for per-layer statistics and layer is null for
// model-wide ones.
template <Real T>
std::vector<nlohmann::json> diagnostics_report(const Transformer<T>& model, std::span<const PackedBatch> batches);

void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records);

}  // namespace deskpt
