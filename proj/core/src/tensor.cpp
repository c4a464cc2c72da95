#include "rarecell/tensor.hpp"

#include <cmath>

#include "rarecell/errors.hpp"
#include "rarecell/io.hpp"
#include "rarecell/random.hpp"

namespace rarecell {

void seed_torch(std::uint64_t seed) {
  torch::set_num_threads(1);
  torch::manual_seed(seed);
}

torch::Tensor to_tensor(const Image& image) {
  if (image.empty()) throw FormatError("empty image");
  const cv::Mat& m = image.mat();
  cv::Mat contiguous = m.isContinuous() ? m : m.clone();
  auto hwc = torch::from_blob(contiguous.data, {m.rows, m.cols, 3}, torch::kFloat32);
  return hwc.permute({2, 0, 1}).clone();
}

torch::Tensor to_batch(const std::vector<Image>& images, int side) {
  auto out = torch::empty({static_cast<std::int64_t>(images.size()), 3, side, side}, torch::kFloat32);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].width() != side || images[i].height() != side) {
      throw FormatError("expected " + std::to_string(side) + "x" + std::to_string(side) + " input, got " +
                        std::to_string(images[i].width()) + "x" + std::to_string(images[i].height()));
    }
    out[static_cast<std::int64_t>(i)].copy_(to_tensor(images[i]));
  }
  return out;
}

torch::Tensor normalize_rows(const torch::Tensor& v) { return v / (v.norm(2, 1, true) + 1e-12); }

std::vector<float> row_vector(const torch::Tensor& t, std::int64_t row) {
  auto r = t[row].contiguous().to(torch::kFloat32);
  return {r.data_ptr<float>(), r.data_ptr<float>() + r.numel()};
}

nlohmann::json TrainingLog::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json row = e.values;
    row["epoch"] = e.epoch;
    rows.push_back(row);
  }
  return {{"stage", stage}, {"epochs", rows}};
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed) {
  if (batch == 0) throw ArgumentError("batch size must be positive");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t end = std::min(n, start + batch);
    if (end - start == 1 && !out.empty()) {
      out.back().push_back(order[start]);
    } else {
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return out;
}

void check_finite(double loss, const std::string& stage, int epoch) {
  if (!std::isfinite(loss)) throw DivergenceError(stage, epoch);
}

void save_checkpoint(const std::filesystem::path& path, const torch::nn::Module& module, const nlohmann::json& meta) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  torch::serialize::OutputArchive archive;
  module.save(archive);
  auto tmp = path;
  tmp += ".tmp";
  archive.save_to(tmp.string());
  std::filesystem::rename(tmp, path);
  nlohmann::json m = meta;
  m["format_version"] = kCheckpointFormat;
  auto sidecar = path;
  sidecar += ".json";
  write_json_atomic(sidecar, m);
}

nlohmann::json read_checkpoint_meta(const std::filesystem::path& path) {
  auto sidecar = path;
  sidecar += ".json";
  if (!std::filesystem::exists(path) || !std::filesystem::exists(sidecar)) {
    throw FormatError("missing checkpoint " + path.string());
  }
  auto meta = read_json(sidecar);
  if (meta.value("format_version", -1) != kCheckpointFormat) {
    throw FormatError("unsupported checkpoint format in " + sidecar.string());
  }
  return meta;
}

nlohmann::json load_checkpoint(const std::filesystem::path& path, torch::nn::Module& module) {
  auto meta = read_checkpoint_meta(path);
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  module.load(archive);
  return meta;
}

}  // namespace rarecell
