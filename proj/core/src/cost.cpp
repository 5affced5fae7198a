#include "dept/cost.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "dept/ops.hpp"
#include "json.hpp"

namespace dept {
namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
    i = j + 1;
  }
  return rank;
}

// Runs the frozen model over every example once.
void forward_pass(const Backbone<float>& backbone, const PeftVariant<float>& variant,
                  const std::vector<Example>& examples, std::size_t batch, std::size_t pad_to_len) {
  for (std::size_t start = 0; start < examples.size(); start += batch) {
    const std::size_t end = std::min(examples.size(), start + batch);
    std::vector<std::vector<std::int32_t>> seqs;
    for (std::size_t i = start; i < end; ++i) {
      seqs.push_back(examples[i].tokens);
      if (seqs.back().size() < pad_to_len) seqs.back().resize(pad_to_len, kPadId);
    }
    const auto ids = TokenBatch::from_sequences(seqs);
    const auto in = variant.compose(backbone, ids);
    const auto hidden = backbone.hidden_states(in.embeds, in.key_is_pad);
    const auto logits = backbone.logits_at(hidden, in.last_rows);
    if (!std::isfinite(logits.data()[0])) throw TrainingError("throughput pass produced non-finite logits");
  }
}

}  // namespace

FlopCount flop_count(const BackboneConfig& cfg, std::uint64_t n) {
  const std::uint64_t d = cfg.d_model, ff = cfg.d_ff, layers = cfg.n_layers;
  FlopCount f;
  f.attention = layers * 4 * n * n * d;
  f.projection = layers * 8 * n * d * d;
  f.feed_forward = layers * 4 * n * d * ff;
  return f;
}

std::uint64_t memory_estimate(const BackboneConfig& cfg, std::uint64_t n, std::uint64_t batch) {
  return batch * cfg.n_layers * (cfg.n_heads * n * n + 12 * n * cfg.d_model);
}

ThroughputStats measure_throughput(const Backbone<float>& backbone,
                                   const PeftVariant<float>& variant,
                                   const std::vector<Example>& examples, std::size_t batch,
                                   std::size_t repeats, std::size_t pad_to_len) {
  if (examples.empty()) throw DegenerateInputError("measure_throughput: no examples");
  if (repeats < 3) throw ConfigError("measure_throughput: repeats must be >= 3");
  if (batch == 0) throw ConfigError("measure_throughput: batch must be positive");
  const auto frozen = variant.detached();
  forward_pass(backbone, frozen, examples, batch, pad_to_len);  // warm-up

  ThroughputStats stats;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    forward_pass(backbone, frozen, examples, batch, pad_to_len);
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    stats.samples_per_second.push_back(static_cast<double>(examples.size()) / dt.count());
  }
  for (std::size_t r = 1; r < repeats; ++r) {
    const double a = stats.samples_per_second[r - 1], b = stats.samples_per_second[r];
    stats.max_consecutive_gap = std::max(stats.max_consecutive_gap, std::abs(a - b) / std::max(a, b));
  }
  stats.noisy = stats.max_consecutive_gap >= 0.10;
  stats.median_sps = median(stats.samples_per_second);
  return stats;
}

std::vector<CostReport> sweep(const BackboneConfig& cfg, const SweepOptions& opts,
                              const Backbone<float>* backbone,
                              const std::vector<Example>* examples) {
  std::vector<std::size_t> ms = opts.m_values;
  for (auto m : ms) {
    if (m > opts.l) {
      throw BudgetError("sweep: m=" + std::to_string(m) + " exceeds l=" + std::to_string(opts.l));
    }
  }
  if (std::find(ms.begin(), ms.end(), opts.l) == ms.end()) ms.push_back(opts.l);
  std::sort(ms.begin(), ms.end(), std::greater<>());
  ms.erase(std::unique(ms.begin(), ms.end()), ms.end());
  if (opts.measure && (!backbone || !examples)) {
    throw ConfigError("sweep: measurement needs a backbone and examples");
  }

  const std::size_t s = cfg.max_seq_len, d = cfg.d_model;
  std::vector<CostReport> rows;
  for (auto m : ms) {
    CostReport row;
    const auto budget = solve_budget(opts.l, d, s, m);
    row.variant = m == opts.l ? VariantTag::kVanillaPT : VariantTag::kDePT;
    row.m = m;
    row.r = budget.r;
    row.trainable_params = budget.trainable_params;
    row.slack = budget.slack;
    row.composed_len = m + s;
    const auto flops = flop_count(cfg, row.composed_len);
    row.attn_flops = flops.attention;
    row.linear_flops = flops.linear();
    row.total_flops = flops.total();
    row.act_elems = memory_estimate(cfg, row.composed_len, opts.batch);
    if (opts.measure) {
      PeftVariant<float> variant =
          row.variant == VariantTag::kVanillaPT
              ? PeftVariant<float>::vanilla(
                    {init_prompt(backbone->token_embedding(), m, PromptInit::kSampleVocabRows,
                                 opts.seed)},
                    3e-1)
              : PeftVariant<float>::dept(init_dept(*backbone, m, row.r, kDefaultInitSigma, opts.seed),
                                         3e-1, 5e-4, opts.l);
      const auto stats = measure_throughput(*backbone, variant, *examples, opts.batch, opts.repeats,
                                            opts.pad_to_max_len ? s : 0);
      row.throughput_sps = stats.median_sps;
      row.throughput_noisy = stats.noisy;
    }
    rows.push_back(row);
  }
  const auto& base = *std::find_if(rows.begin(), rows.end(),
                                   [&](const CostReport& r) { return r.m == opts.l; });
  for (auto& row : rows) {
    row.rel_time_pct = 100.0 * static_cast<double>(row.total_flops) / static_cast<double>(base.total_flops);
    row.rel_mem_pct = 100.0 * static_cast<double>(row.act_elems) / static_cast<double>(base.act_elems);
    if (base.throughput_sps > 0) row.rel_throughput_pct = 100.0 * row.throughput_sps / base.throughput_sps;
  }
  return rows;
}

std::string sweep_csv(const std::vector<CostReport>& rows) {
  std::ostringstream os;
  os << "variant,m,r,composed_len,trainable_params,attn_flops,linear_flops,total_flops,act_elems,"
        "throughput_sps,rel_time_pct,rel_mem_pct\n";
  os.setf(std::ios::fixed);
  for (const auto& r : rows) {
    os << to_string(r.variant) << ',' << r.m << ',' << r.r << ',' << r.composed_len << ','
       << r.trainable_params << ',' << r.attn_flops << ',' << r.linear_flops << ','
       << r.total_flops << ',' << r.act_elems << ',';
    os.precision(3);
    os << r.throughput_sps << ',';
    os.precision(4);
    os << r.rel_time_pct << ',' << r.rel_mem_pct << '\n';
  }
  return os.str();
}

std::string sweep_json(const std::vector<CostReport>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"variant", to_string(r.variant)},
                   {"m", r.m},
                   {"r", r.r},
                   {"composed_len", r.composed_len},
                   {"trainable_params", r.trainable_params},
                   {"attn_flops", r.attn_flops},
                   {"linear_flops", r.linear_flops},
                   {"total_flops", r.total_flops},
                   {"act_elems", r.act_elems},
                   {"throughput_sps", r.throughput_sps},
                   {"rel_time_pct", r.rel_time_pct},
                   {"rel_mem_pct", r.rel_mem_pct}});
  }
  return arr.dump(2);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw DegenerateInputError("spearman: need two equally sized samples of length >= 2");
  }
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - mean) * (rb[i] - mean);
    va += (ra[i] - mean) * (ra[i] - mean);
    vb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (va == 0 || vb == 0) return 0.0;
  return cov / std::sqrt(va * vb);
}

}  // namespace dept
