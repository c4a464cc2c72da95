#include "rarecell/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rarecell/errors.hpp"

namespace rarecell {

RankedList::RankedList(std::vector<RankedEntry> entries) : entries_(std::move(entries)) {
  for (const auto& e : entries_) {
    if (e.y != 0 && e.y != 1) throw ArgumentError("relevance must be 0 or 1");
    if (std::isnan(e.score)) throw ArgumentError("NaN score for '" + e.instance_id + "'");
  }
  std::sort(entries_.begin(), entries_.end(), [](const RankedEntry& a, const RankedEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.instance_id < b.instance_id;
  });
}

std::size_t RankedList::positives() const {
  return static_cast<std::size_t>(
      std::count_if(entries_.begin(), entries_.end(), [](const RankedEntry& e) { return e.y == 1; }));
}

std::size_t tp_at_k(const RankedList& list, std::size_t K) {
  const std::size_t n = std::min(K, list.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) tp += static_cast<std::size_t>(list[i].y);
  return tp;
}

double recall_at_k(const RankedList& list, std::size_t K, std::size_t T) {
  if (T == 0) return 0.0;
  return static_cast<double>(tp_at_k(list, K)) / static_cast<double>(T);
}

double autk_at_k(const RankedList& list, std::size_t K, std::size_t T) {
  if (T == 0) throw ArgumentError("AUTK is undefined without positives (T = 0)");
  const std::size_t n = std::min(K, list.size());
  std::size_t running = 0;
  std::size_t area = 0;
  for (std::size_t k = 0; k < n; ++k) {
    running += static_cast<std::size_t>(list[k].y);
    area += running;
  }
  return static_cast<double>(area) / static_cast<double>(T);
}

double dcg_at_k(const RankedList& list, std::size_t K) {
  const std::size_t n = std::min(K, list.size());
  double dcg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (list[i].y == 1) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  return dcg;
}

double ndcg_at_k(const RankedList& list, std::size_t K, std::size_t T) {
  if (T == 0) throw ArgumentError("nDCG is undefined without positives (T = 0)");
  const std::size_t ideal = std::min(T, K);
  double idcg = 0.0;
  for (std::size_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg_at_k(list, K) / idcg;
}

double aufroc_norm(const RankedList& list, std::size_t K, std::size_t T_max) {
  if (T_max == 0) throw ArgumentError("normalized AUFROC needs T_max >= 1");
  const std::size_t k_eff = std::min(K, list.size());
  if (k_eff == 0) return 0.0;
  const double denom_fp = static_cast<double>(k_eff);
  const double denom_tp = static_cast<double>(T_max);
  double area = 0.0;
  double prev_fpi = 0.0, prev_tpr = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < k_eff; ++k) {
    if (list[k].y == 1) {
      ++tp;
    } else {
      ++fp;
    }
    const double fpi = static_cast<double>(fp) / denom_fp;
    const double tpr = static_cast<double>(tp) / denom_tp;
    area += (fpi - prev_fpi) * (tpr + prev_tpr) / 2.0;
    prev_fpi = fpi;
    prev_tpr = tpr;
  }
  return area;
}

double auroc(const RankedList& list) {
  const std::size_t pos = list.positives();
  const std::size_t neg = list.size() - pos;
  if (pos == 0 || neg == 0) throw ArgumentError("AUROC needs both classes");
  // Walk ascending by score, grouping ties.
  const auto& e = list.entries();
  double rank_sum = 0.0;
  std::size_t i = e.size();
  double rank = 1.0;
  while (i > 0) {
    std::size_t j = i;
    while (j > 0 && e[j - 1].score == e[i - 1].score) --j;
    const std::size_t group = i - j;
    const double mid = rank + (static_cast<double>(group) - 1.0) / 2.0;
    for (std::size_t k = j; k < i; ++k) {
      if (e[k].y == 1) rank_sum += mid;
    }
    rank += static_cast<double>(group);
    i = j;
  }
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

MeanStd aggregate_trials(const std::vector<double>& values) {
  if (values.empty()) throw ArgumentError("no trial values to aggregate");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

MetricSet evaluate_all(const RankedList& list, const EvalConfig& config) {
  MetricSet m;
  m.tp = static_cast<double>(tp_at_k(list, config.K));
  m.recall = recall_at_k(list, config.K, config.T);
  m.dcg = dcg_at_k(list, config.K);
  if (config.T > 0) {
    m.autk = autk_at_k(list, config.K, config.T);
    m.ndcg = ndcg_at_k(list, config.K, config.T);
  }
  m.aufroc = aufroc_norm(list, config.K, config.T_max > 0 ? config.T_max : std::max<std::size_t>(config.T, 1));
  return m;
}

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> kNames{"tp_at_k", "recall_at_k", "autk_at_k",
                                               "dcg_at_k", "ndcg_at_k", "aufroc_norm"};
  return kNames;
}

std::vector<std::pair<std::string, double>> as_rows(const MetricSet& m) {
  const auto& n = metric_names();
  return {{n[0], m.tp}, {n[1], m.recall}, {n[2], m.autk}, {n[3], m.dcg}, {n[4], m.ndcg}, {n[5], m.aufroc}};
}

}  // namespace rarecell
