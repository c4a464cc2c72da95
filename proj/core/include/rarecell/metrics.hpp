#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace rarecell {

struct RankedEntry {
  std::string instance_id;
  double score = 0.0;
  int y = 0;  // 1 = abnormal
};

/// Entries ordered by (score desc, instance_id asc).
///
/// The ordering is total, so the same multiset of entries always yields the
/// same list regardless of input order.
class RankedList {
 public:
  RankedList() = default;
  explicit RankedList(std::vector<RankedEntry> entries);

  const std::vector<RankedEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const RankedEntry& operator[](std::size_t i) const { return entries_[i]; }
  std::size_t positives() const;

 private:
  std::vector<RankedEntry> entries_;
};

struct EvalConfig {
  std::size_t K = 400;
  std::size_t T = 0;
  std::size_t T_max = 0;
};

// Count of positives among the first min(K, |list|) entries.
std::size_t tp_at_k(const RankedList& list, std::size_t K);
// TP_K / T; 0 when T == 0.
double recall_at_k(const RankedList& list, std::size_t K, std::size_t T);
// sum_{k<=K} TP_{<=k} / T with K clipped to |list|. Throws ArgumentError for T == 0.
double autk_at_k(const RankedList& list, std::size_t K, std::size_t T);
// sum_{i<=K} (2^y_i - 1) / log2(i + 1)
double dcg_at_k(const RankedList& list, std::size_t K);
// IDCG places min(T, K) positives at the head. Throws for T == 0.
double ndcg_at_k(const RankedList& list, std::size_t K, std::size_t T);
// Trapezoidal area of TP(k)/T_max over FP(k)/K for k = 0..min(K, |list|),
// starting from (0, 0). Throws for T_max == 0.
double aufroc_norm(const RankedList& list, std::size_t K, std::size_t T_max);

// Mann-Whitney AUROC with ties counted as one half.
double auroc(const RankedList& list);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample (n - 1); zero for a single value
};
MeanStd aggregate_trials(const std::vector<double>& values);

struct MetricSet {
  double tp = 0.0;
  double recall = 0.0;
  double autk = 0.0;
  double dcg = 0.0;
  double ndcg = 0.0;
  double aufroc = 0.0;
};
MetricSet evaluate_all(const RankedList& list, const EvalConfig& config);
// Names in the order of MetricSet members.
const std::vector<std::string>& metric_names();
std::vector<std::pair<std::string, double>> as_rows(const MetricSet& m);

}  // namespace rarecell
