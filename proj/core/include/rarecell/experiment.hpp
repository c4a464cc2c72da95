#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rarecell/augment.hpp"
#include "rarecell/dataset.hpp"
#include "rarecell/droc.hpp"
#include "rarecell/dsvdd.hpp"
#include "rarecell/its2clr.hpp"
#include "rarecell/report.hpp"
#include "rarecell/sil.hpp"

namespace rarecell {

enum class Method { dsvdd, droc, fs_sil, ws_sil, its2clr };

std::string_view to_string(Method m);
// Accepts "dsvdd", "droc", "fs-sil", "ws-sil", "its2clr".
Method parse_method(std::string_view s);
const std::vector<Method>& all_methods();
bool is_one_class(Method m);

struct HarnessConfig {
  int n_bags = 10;
  int n_mixed = 5;
  std::uint64_t seed = 0;
  int trials = 10;
  // Entries without explicit counts take the bone-marrow table values.
  std::vector<WitnessRateSpec> witness_rates = WitnessRateSpec::table();
  // "wr": witness-rate simulation; "slides": one bag per training slide and
  // one pool per test slide (instance labels unknown); "auto": slides when
  // any instance label is unknown.
  std::string mode = "auto";
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::filesystem::path manifest;
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;
  std::size_t K = 400;
  std::size_t grid_K = 100;
  AugmentationPolicy augmentation;
  HarnessConfig harness;
  DsvddConfig dsvdd;
  DrocConfig droc;
  SilConfig fs_sil;
  SilConfig ws_sil;
  Its2clrConfig its2clr;
  // One-class models train on the negative bags, which are shared by every
  // witness rate; reuse lets one checkpoint serve all rates.
  bool reuse_encoder = false;
  // Image sets below this estimate are decoded once and kept in memory.
  std::size_t preload_bytes = std::size_t{1} << 30;

  // Throws ArgumentError when method encoders disagree with the
  // augmentation target side.
  void validate() const;
};

void to_json(nlohmann::json& j, const HarnessConfig& c);
void from_json(const nlohmann::json& j, HarnessConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Reads a JSON config; a relative manifest path is resolved against the
// config file's directory.
ExperimentConfig load_config(const std::filesystem::path& path);

// output_dir if absolute; otherwise joined onto $RARECELL_OUTPUT_ROOT (or
// `fallback_root` when unset), with `name` when output_dir is empty.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config, const std::filesystem::path& fallback_root);

struct RunOptions {
  std::vector<double> wr;  // empty = every configured rate
  bool force = false;
  bool reuse_encoder = false;
  bool verbose = false;
  std::ostream* out = nullptr;
};

/// Directory-per-experiment runner.
///
///   config.json                         resolved config snapshot
///   harness/partition.json              fixed 10-bag partition of train normals
///   harness/wr_<r>/bags.json            injected bag set
///   harness/wr_<r>/pool_trial_<t>.json  merged evaluation pools
///   models/<method>/wr_<r>/             checkpoints + training log
///   scores/<method>/wr_<r>/trial_<t>.csv
///   metrics/per_trial.csv, metrics/aggregated.csv
///   report/grids/, report/curves/, reviews/<grid_id>/
///   logs/<method>.jsonl                 append-only epoch log
///
/// Slide-supervised data uses "slides" in place of wr_<r> and one pool per
/// test slide.
class Experiment {
 public:
  Experiment(ExperimentConfig config, std::filesystem::path dir);

  const ExperimentConfig& config() const noexcept { return config_; }
  const std::filesystem::path& dir() const noexcept { return dir_; }
  const Dataset& dataset();
  bool slide_mode();

  // Dataset manifest + harness section.
  std::string harness_hash();
  // Harness hash + seed + augmentation + the method's section.
  std::string method_hash(Method m);

  // Refuses (StateError) to replace an existing partition built from a
  // different harness unless options.force.
  void harness_build(const RunOptions& options);
  void train(Method m, const RunOptions& options);
  void score(Method m, const RunOptions& options);
  // Writes metrics/per_trial.csv and metrics/aggregated.csv (rows for other
  // methods / rates are kept). Refuses slide-supervised data.
  void evaluate(const std::vector<Method>& methods, const RunOptions& options);
  void report(const std::vector<Method>& methods, const RunOptions& options);
  // Validates review records against their grid, stores them and, with two
  // or more records, writes agreement.json and an overlay mosaic.
  AgreementStats review_export(const std::vector<std::filesystem::path>& records, const RunOptions& options);

  static std::string wr_tag(double wr_percent);
  std::filesystem::path harness_dir(const std::string& tag) const;
  std::filesystem::path model_dir(Method m, const std::string& tag) const;
  std::filesystem::path score_dir(Method m, const std::string& tag) const;

  // Tags (wr_<r> or "slides") selected by `options`.
  std::vector<std::string> tags(const RunOptions& options);
  const WitnessRateSpec& spec_for(double wr_percent) const;

 private:
  struct PoolFile {
    std::filesystem::path path;
    EvalPool pool;
  };
  std::vector<PoolFile> pools(const std::string& tag);
  std::vector<Bag> bags(const std::string& tag);
  std::unique_ptr<ImageSource> images(const std::vector<std::string>& ids);
  void log_epoch(Method m, const std::string& tag, const std::string& stage, const EpochRecord& rec);
  std::ostream& out(const RunOptions& options) const;
  void train_one(Method m, const std::string& tag, const RunOptions& options);

  ExperimentConfig config_;
  std::filesystem::path dir_;
  std::optional<Dataset> dataset_;
  std::optional<std::string> harness_hash_;
};

}  // namespace rarecell
