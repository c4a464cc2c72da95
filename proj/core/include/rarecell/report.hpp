#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rarecell/dataset.hpp"
#include "rarecell/metrics.hpp"

namespace rarecell {

struct GridCell {
  std::string instance_id;
  std::string image_ref;
  std::optional<Label> ground_truth;
};

struct GridLayout {
  int rows = 10;
  int cols = 10;
};

/// Unordered top-K presentation handed to reviewers.
struct GridManifest {
  std::string grid_id;
  std::string pool_id;  // pool id or slide id
  std::size_t K = 100;
  std::vector<GridCell> cells;
  std::uint64_t shuffle_seed = 0;
  GridLayout layout;
  std::string config_hash;
};

struct ReviewRecord {
  std::string grid_id;
  std::string reviewer_id;
  std::set<std::string> marked;
  std::string timestamp;
};

struct AgreementStats {
  std::size_t both = 0;
  std::size_t only_a = 0;
  std::size_t only_b = 0;
  std::size_t none = 0;
};

// Takes the top-K of `list`, shuffles them with `shuffle_seed` and lays them
// out row-major. Lists shorter than K are clipped (and K shrinks with them);
// the layout is then recomputed to the smallest near-square grid.
GridManifest build_grid_manifest(const RankedList& list, const Dataset& dataset, std::size_t K,
                                 std::uint64_t shuffle_seed, std::optional<GridLayout> layout,
                                 std::string grid_id, std::string pool_id);

// Counts over the manifest cells for the first two records. Throws
// ArgumentError when a record belongs to another grid or marks a cell that is
// not in it.
AgreementStats agreement_stats(const GridManifest& manifest, const std::vector<ReviewRecord>& records);

struct MosaicOptions {
  int tile = 96;
  int gap = 2;
  bool show_ground_truth = true;
};

// Renders the grid with review overlays (corner box, one diagonal stroke per
// reviewer, a cross on agreement) or the ground-truth box variant when no
// reviews are given. Missing images become gray placeholder tiles. Returns
// the number of placeholders used.
std::size_t render_mosaic(const GridManifest& manifest, const std::vector<ReviewRecord>& reviews,
                          const std::filesystem::path& image_root, const std::filesystem::path& output,
                          const MosaicOptions& options = {});

struct CurvePoint {
  std::string method;
  double wr_percent = 0.0;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
};

// One log-log SVG per metric with a series (mean line + std band) per method.
// Returns the written files. Throws ArgumentError for an empty table.
std::vector<std::filesystem::path> plot_wr_curves(const std::vector<CurvePoint>& table,
                                                  const std::filesystem::path& output_dir, std::size_t K);

void to_json(nlohmann::json& j, const GridManifest& m);
void from_json(const nlohmann::json& j, GridManifest& m);
void to_json(nlohmann::json& j, const ReviewRecord& r);
void from_json(const nlohmann::json& j, ReviewRecord& r);
void to_json(nlohmann::json& j, const AgreementStats& s);

}  // namespace rarecell
