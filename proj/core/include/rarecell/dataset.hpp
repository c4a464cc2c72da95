#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace rarecell {

enum class Label { normal, abnormal, unknown };
enum class Split { train, test };
enum class BagLabel { negative, positive };

std::string_view to_string(Label l);
std::string_view to_string(Split s);
std::string_view to_string(BagLabel b);
Label parse_label(std::string_view s);
Split parse_split(std::string_view s);
BagLabel parse_bag_label(std::string_view s);

struct PatchInstance {
  std::string instance_id;
  std::string image_ref;
  Label true_label = Label::unknown;
  std::string slide_id;
  Split split = Split::train;
  // Only present for slide-supervised data (no instance labels).
  std::optional<BagLabel> slide_label;
};

class Dataset {
 public:
  Dataset() = default;
  // Throws IntegrityError on duplicate ids.
  explicit Dataset(std::vector<PatchInstance> instances);

  const std::vector<PatchInstance>& instances() const noexcept { return instances_; }
  std::size_t size() const noexcept { return instances_.size(); }
  const PatchInstance& at(std::string_view id) const;
  const PatchInstance* find(std::string_view id) const;

  std::vector<std::string> ids(Split split, Label label) const;
  std::size_t count(Split split, Label label) const;
  // True when any instance carries an unknown label (slide-level supervision).
  bool has_unknown_labels() const;

  // Directory that relative image_refs are resolved against.
  std::filesystem::path base_dir;
  std::filesystem::path resolve(const PatchInstance& p) const;

 private:
  std::vector<PatchInstance> instances_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Reads a JSON-lines manifest; one object per instance.
///
/// Required keys: instance_id, image_ref, split. Optional: true_label
/// (default "unknown"), slide_id, slide_label. Malformed lines raise
/// ParseError naming the line; repeated ids raise IntegrityError.
Dataset load_manifest(const std::filesystem::path& path);
Dataset parse_manifest(std::istream& in);
void write_manifest(const std::filesystem::path& path, const std::vector<PatchInstance>& instances);

struct Bag {
  std::string bag_id;
  BagLabel bag_label = BagLabel::negative;
  std::vector<std::string> members;
  double nominal_wr = 0.0;  // fraction, not percent
  // Subset of members that were injected as abnormal.
  std::vector<std::string> injected;
};

struct WitnessRateSpec {
  double wr_percent = 0.0;
  int train_abnormal_count = 0;
  int test_abnormal_count = 0;

  // Counts used for the bone-marrow sweep; throws ArgumentError for a rate
  // outside {0.05, 0.1, 0.5, 1, 5, 9}.
  static WitnessRateSpec from_table(double wr_percent);
  static const std::vector<WitnessRateSpec>& table();
};

struct EvalPool {
  std::string pool_id;
  std::vector<std::string> instances;
  std::uint64_t trial_seed = 0;
  int abnormal_count = 0;  // T
  double wr_percent = 0.0;
};

// Shuffles `normals` with `seed` and deals them into `n_bags` bags whose
// sizes differ by at most one (the first |normals| % n_bags bags get the extra).
std::vector<Bag> partition_bags(const std::vector<std::string>& normals, int n_bags, std::uint64_t seed);

// Turns `n_mixed` bags positive and spreads spec.train_abnormal_count
// abnormals across them; remainders go to the lowest-indexed mixed bags.
std::vector<Bag> inject_witness_rate(const std::vector<Bag>& bags, const std::vector<std::string>& abnormal_pool,
                                     const WitnessRateSpec& spec, int n_mixed, std::uint64_t seed);

EvalPool build_eval_pool(const std::vector<std::string>& test_normals,
                         const std::vector<std::string>& test_abnormal_pool, const WitnessRateSpec& spec,
                         std::uint64_t trial_seed);

// Bags from slides for slide-supervised data: one bag per training slide,
// labeled by slide_label.
std::vector<Bag> bags_from_slides(const Dataset& dataset, Split split);

void to_json(nlohmann::json& j, const Bag& b);
void from_json(const nlohmann::json& j, Bag& b);
void to_json(nlohmann::json& j, const EvalPool& p);
void from_json(const nlohmann::json& j, EvalPool& p);
void to_json(nlohmann::json& j, const WitnessRateSpec& s);
void from_json(const nlohmann::json& j, WitnessRateSpec& s);

}  // namespace rarecell
