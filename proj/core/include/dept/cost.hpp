#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dept/backbone.hpp"
#include "dept/peft.hpp"
#include "dept/tasks.hpp"

namespace dept {

// Forward-pass cost of one sequence of composed length n, per layer:
//   attention scores + weighted sum   4 n^2 d
//   q/k/v/out projections             8 n d^2
//   feed-forward                      4 n d d_ff
// Softmax, layer norm, embedding lookups and the output head are left out.
// The constants are this model's own; only ratios are ever reported.
struct FlopCount {
  std::uint64_t attention = 0;
  std::uint64_t projection = 0;
  std::uint64_t feed_forward = 0;
  std::uint64_t linear() const { return projection + feed_forward; }
  std::uint64_t total() const { return attention + linear(); }
};

FlopCount flop_count(const BackboneConfig& cfg, std::uint64_t n);

// Activation elements kept for backward: n_layers * (n_heads n^2 + 12 n d),
// times the batch.
std::uint64_t memory_estimate(const BackboneConfig& cfg, std::uint64_t n, std::uint64_t batch);

struct ThroughputStats {
  double median_sps = 0.0;
  std::vector<double> samples_per_second;  // one per timed repeat
  // Largest relative gap between consecutive repeats.
  double max_consecutive_gap = 0.0;
  bool noisy = false;  // max_consecutive_gap >= 10%
};

// Median samples/second over `repeats` timed full passes over `examples`
// (forward only), after one untimed warm-up pass. With pad_to_len > 0 every
// text is right-padded to that length.
ThroughputStats measure_throughput(const Backbone<float>& backbone,
                                   const PeftVariant<float>& variant,
                                   const std::vector<Example>& examples, std::size_t batch,
                                   std::size_t repeats, std::size_t pad_to_len = 0);

struct CostReport {
  VariantTag variant = VariantTag::kDePT;
  std::size_t m = 0;
  std::size_t r = 0;
  std::size_t composed_len = 0;
  std::size_t trainable_params = 0;
  std::size_t slack = 0;
  std::uint64_t attn_flops = 0;
  std::uint64_t linear_flops = 0;
  std::uint64_t total_flops = 0;
  std::uint64_t act_elems = 0;
  double throughput_sps = 0.0;  // 0 when not measured
  bool throughput_noisy = false;
  double rel_time_pct = 0.0;  // total FLOPs vs the m = l row
  double rel_mem_pct = 0.0;   // activation elements vs the m = l row
  double rel_throughput_pct = 0.0;
};

struct SweepOptions {
  std::size_t l = 100;
  std::vector<std::size_t> m_values = {0, 20, 40, 60, 80, 100};
  std::size_t batch = 16;
  bool measure = false;
  std::size_t repeats = 5;
  bool pad_to_max_len = true;
  std::uint64_t seed = 1;
};

// One row per m (the baseline m = l is always included), in descending m.
// Composed length is m + max_seq_len. Measurement uses `backbone` and
// `examples` when opts.measure is set.
std::vector<CostReport> sweep(const BackboneConfig& cfg, const SweepOptions& opts,
                              const Backbone<float>* backbone = nullptr,
                              const std::vector<Example>* examples = nullptr);

std::string sweep_csv(const std::vector<CostReport>& rows);
std::string sweep_json(const std::vector<CostReport>& rows);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Reference inference speeds for PT and DePT (m = 20), samples/second.
struct ReferenceThroughputPoint {
  const char* model;
  double pt_sps;
  double dept_sps;
};
inline constexpr ReferenceThroughputPoint kReferenceThroughput[] = {
    {"T5-small", 167.3, 178.3},
    {"T5-large", 21.0, 24.8},
};

}  // namespace dept
