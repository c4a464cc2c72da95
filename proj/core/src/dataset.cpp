#include "rarecell/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "rarecell/errors.hpp"
#include "rarecell/io.hpp"
#include "rarecell/random.hpp"

namespace rarecell {

std::string_view to_string(Label l) {
  switch (l) {
    case Label::normal: return "normal";
    case Label::abnormal: return "abnormal";
    case Label::unknown: return "unknown";
  }
  return "unknown";
}

std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }
std::string_view to_string(BagLabel b) { return b == BagLabel::negative ? "negative" : "positive"; }

Label parse_label(std::string_view s) {
  if (s == "normal") return Label::normal;
  if (s == "abnormal") return Label::abnormal;
  if (s == "unknown") return Label::unknown;
  throw ArgumentError("unknown label '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ArgumentError("unknown split '" + std::string(s) + "'");
}

BagLabel parse_bag_label(std::string_view s) {
  if (s == "negative" || s == "normal" || s == "healthy") return BagLabel::negative;
  if (s == "positive" || s == "abnormal" || s == "malignant") return BagLabel::positive;
  throw ArgumentError("unknown bag label '" + std::string(s) + "'");
}

Dataset::Dataset(std::vector<PatchInstance> instances) : instances_(std::move(instances)) {
  index_.reserve(instances_.size());
  for (std::size_t i = 0; i < instances_.size(); ++i) {
    auto [it, inserted] = index_.emplace(instances_[i].instance_id, i);
    if (!inserted) throw IntegrityError("duplicate instance_id '" + instances_[i].instance_id + "'");
  }
}

const PatchInstance* Dataset::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  return it == index_.end() ? nullptr : &instances_[it->second];
}

const PatchInstance& Dataset::at(std::string_view id) const {
  const auto* p = find(id);
  if (!p) throw ArgumentError("unknown instance_id '" + std::string(id) + "'");
  return *p;
}

std::vector<std::string> Dataset::ids(Split split, Label label) const {
  std::vector<std::string> out;
  for (const auto& p : instances_) {
    if (p.split == split && p.true_label == label) out.push_back(p.instance_id);
  }
  return out;
}

std::size_t Dataset::count(Split split, Label label) const {
  return static_cast<std::size_t>(std::count_if(instances_.begin(), instances_.end(), [&](const PatchInstance& p) {
    return p.split == split && p.true_label == label;
  }));
}

bool Dataset::has_unknown_labels() const {
  return std::any_of(instances_.begin(), instances_.end(),
                     [](const PatchInstance& p) { return p.true_label == Label::unknown; });
}

std::filesystem::path Dataset::resolve(const PatchInstance& p) const {
  std::filesystem::path ref(p.image_ref);
  return ref.is_absolute() ? ref : base_dir / ref;
}

namespace {

std::string required_string(const nlohmann::json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(std::string("missing field '") + key + "'", line);
  if (!it->is_string()) throw ParseError(std::string("field '") + key + "' must be a string", line);
  auto s = it->get<std::string>();
  if (s.empty()) throw ParseError(std::string("field '") + key + "' is empty", line);
  return s;
}

}  // namespace

Dataset parse_manifest(std::istream& in) {
  std::vector<PatchInstance> out;
  std::map<std::string, std::size_t> first_seen;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line);
    }
    if (!j.is_object()) throw ParseError("record is not a JSON object", line);
    PatchInstance p;
    p.instance_id = required_string(j, "instance_id", line);
    p.image_ref = required_string(j, "image_ref", line);
    try {
      p.split = parse_split(required_string(j, "split", line));
      if (auto it = j.find("true_label"); it != j.end() && !it->is_null()) {
        p.true_label = parse_label(it->get<std::string>());
      }
      if (auto it = j.find("slide_id"); it != j.end() && !it->is_null()) p.slide_id = it->get<std::string>();
      if (auto it = j.find("slide_label"); it != j.end() && !it->is_null()) {
        p.slide_label = parse_bag_label(it->get<std::string>());
      }
    } catch (const ArgumentError& e) {
      throw ParseError(e.what(), line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), line);
    }
    auto [it, inserted] = first_seen.emplace(p.instance_id, line);
    if (!inserted) {
      throw IntegrityError("duplicate instance_id '" + p.instance_id + "' on lines " + std::to_string(it->second) +
                           " and " + std::to_string(line));
    }
    out.push_back(std::move(p));
  }
  return Dataset(std::move(out));
}

Dataset load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open manifest: " + path.string());
  Dataset d = parse_manifest(in);
  d.base_dir = path.parent_path();
  return d;
}

void write_manifest(const std::filesystem::path& path, const std::vector<PatchInstance>& instances) {
  std::ostringstream out;
  for (const auto& p : instances) {
    nlohmann::json j;
    j["instance_id"] = p.instance_id;
    j["image_ref"] = p.image_ref;
    j["true_label"] = std::string(to_string(p.true_label));
    j["slide_id"] = p.slide_id;
    j["split"] = std::string(to_string(p.split));
    if (p.slide_label) j["slide_label"] = std::string(to_string(*p.slide_label));
    out << j.dump() << '\n';
  }
  write_file_atomic(path, out.str());
}

const std::vector<WitnessRateSpec>& WitnessRateSpec::table() {
  static const std::vector<WitnessRateSpec> kTable{
      {0.05, 5, 2}, {0.1, 10, 4}, {0.5, 45, 20}, {1.0, 90, 40}, {5.0, 455, 198}, {9.0, 910, 396},
  };
  return kTable;
}

WitnessRateSpec WitnessRateSpec::from_table(double wr_percent) {
  for (const auto& s : table()) {
    if (std::abs(s.wr_percent - wr_percent) < 1e-9) return s;
  }
  throw ArgumentError("witness rate " + format_double(wr_percent) + "% is not in {0.05, 0.1, 0.5, 1, 5, 9}");
}

std::vector<Bag> partition_bags(const std::vector<std::string>& normals, int n_bags, std::uint64_t seed) {
  if (n_bags < 2) throw ArgumentError("n_bags must be at least 2");
  if (static_cast<std::size_t>(n_bags) > normals.size()) {
    throw ArgumentError("n_bags (" + std::to_string(n_bags) + ") exceeds the number of instances (" +
                        std::to_string(normals.size()) + ")");
  }
  std::vector<std::string> order = normals;
  std::sort(order.begin(), order.end());
  Rng rng(derive_seed(seed, {0x62616773}));
  rng.shuffle(order);

  const std::size_t n = order.size();
  const std::size_t base = n / n_bags;
  const std::size_t extra = n % n_bags;
  std::vector<Bag> bags(n_bags);
  std::size_t cursor = 0;
  for (int b = 0; b < n_bags; ++b) {
    const std::size_t take = base + (static_cast<std::size_t>(b) < extra ? 1 : 0);
    bags[b].bag_id = "bag_" + std::to_string(b);
    bags[b].bag_label = BagLabel::negative;
    bags[b].members.assign(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                           order.begin() + static_cast<std::ptrdiff_t>(cursor + take));
    cursor += take;
  }
  return bags;
}

std::vector<Bag> inject_witness_rate(const std::vector<Bag>& bags, const std::vector<std::string>& abnormal_pool,
                                     const WitnessRateSpec& spec, int n_mixed, std::uint64_t seed) {
  if (n_mixed < 1 || static_cast<std::size_t>(n_mixed) >= bags.size()) {
    throw ArgumentError("n_mixed must be in [1, |bags|)");
  }
  if (spec.train_abnormal_count < 0) throw ArgumentError("negative abnormal count");
  if (static_cast<std::size_t>(spec.train_abnormal_count) > abnormal_pool.size()) {
    throw CapacityError("witness rate " + format_double(spec.wr_percent) + "% needs " +
                        std::to_string(spec.train_abnormal_count) + " abnormals, pool has " +
                        std::to_string(abnormal_pool.size()));
  }
  for (const auto& b : bags) {
    if (b.bag_label != BagLabel::negative || !b.injected.empty()) {
      throw ArgumentError("injection expects an un-injected negative partition");
    }
  }

  Rng rng(derive_seed(seed, {0x696e6a}));
  std::vector<std::size_t> bag_order(bags.size());
  for (std::size_t i = 0; i < bag_order.size(); ++i) bag_order[i] = i;
  rng.shuffle(bag_order);
  std::vector<std::size_t> mixed(bag_order.begin(), bag_order.begin() + n_mixed);
  std::sort(mixed.begin(), mixed.end());

  std::vector<std::string> pool = abnormal_pool;
  std::sort(pool.begin(), pool.end());
  rng.shuffle(pool);

  std::vector<Bag> out = bags;
  const int base = spec.train_abnormal_count / n_mixed;
  const int extra = spec.train_abnormal_count % n_mixed;
  std::size_t cursor = 0;
  for (int m = 0; m < n_mixed; ++m) {
    Bag& bag = out[mixed[m]];
    const int take = base + (m < extra ? 1 : 0);
    bag.bag_label = BagLabel::positive;
    bag.nominal_wr = spec.wr_percent / 100.0;
    for (int k = 0; k < take; ++k) {
      bag.members.push_back(pool[cursor]);
      bag.injected.push_back(pool[cursor]);
      ++cursor;
    }
  }
  return out;
}

EvalPool build_eval_pool(const std::vector<std::string>& test_normals,
                         const std::vector<std::string>& test_abnormal_pool, const WitnessRateSpec& spec,
                         std::uint64_t trial_seed) {
  if (spec.test_abnormal_count < 0) throw ArgumentError("negative abnormal count");
  if (static_cast<std::size_t>(spec.test_abnormal_count) > test_abnormal_pool.size()) {
    throw CapacityError("witness rate " + format_double(spec.wr_percent) + "% needs " +
                        std::to_string(spec.test_abnormal_count) + " test abnormals, pool has " +
                        std::to_string(test_abnormal_pool.size()));
  }
  // Sort first so the sample depends only on the pool's contents.
  std::vector<std::string> pool = test_abnormal_pool;
  std::sort(pool.begin(), pool.end());
  Rng rng(derive_seed(trial_seed, {0x706f6f6c}));
  rng.shuffle(pool);
  pool.resize(static_cast<std::size_t>(spec.test_abnormal_count));
  std::sort(pool.begin(), pool.end());

  EvalPool out;
  out.pool_id = "wr" + format_double(spec.wr_percent) + "_trial" + std::to_string(trial_seed);
  out.trial_seed = trial_seed;
  out.abnormal_count = spec.test_abnormal_count;
  out.wr_percent = spec.wr_percent;
  out.instances = test_normals;
  out.instances.insert(out.instances.end(), pool.begin(), pool.end());
  return out;
}

std::vector<Bag> bags_from_slides(const Dataset& dataset, Split split) {
  std::map<std::string, Bag> by_slide;
  for (const auto& p : dataset.instances()) {
    if (p.split != split) continue;
    if (!p.slide_label) throw PreconditionError("instance '" + p.instance_id + "' has no slide_label");
    auto& bag = by_slide[p.slide_id];
    if (bag.members.empty()) {
      bag.bag_id = p.slide_id;
      bag.bag_label = *p.slide_label;
    } else if (bag.bag_label != *p.slide_label) {
      throw IntegrityError("slide '" + p.slide_id + "' has conflicting slide labels");
    }
    bag.members.push_back(p.instance_id);
  }
  std::vector<Bag> out;
  for (auto& [id, bag] : by_slide) out.push_back(std::move(bag));
  return out;
}

void to_json(nlohmann::json& j, const Bag& b) {
  j = nlohmann::json{{"bag_id", b.bag_id},
                     {"bag_label", std::string(to_string(b.bag_label))},
                     {"members", b.members},
                     {"nominal_wr", b.nominal_wr},
                     {"injected", b.injected}};
}

void from_json(const nlohmann::json& j, Bag& b) {
  b.bag_id = j.at("bag_id").get<std::string>();
  b.bag_label = parse_bag_label(j.at("bag_label").get<std::string>());
  b.members = j.at("members").get<std::vector<std::string>>();
  b.nominal_wr = j.value("nominal_wr", 0.0);
  b.injected = j.value("injected", std::vector<std::string>{});
}

void to_json(nlohmann::json& j, const EvalPool& p) {
  j = nlohmann::json{{"pool_id", p.pool_id},
                     {"instances", p.instances},
                     {"trial_seed", p.trial_seed},
                     {"abnormal_count", p.abnormal_count},
                     {"wr_percent", p.wr_percent}};
}

void from_json(const nlohmann::json& j, EvalPool& p) {
  p.pool_id = j.at("pool_id").get<std::string>();
  p.instances = j.at("instances").get<std::vector<std::string>>();
  p.trial_seed = j.at("trial_seed").get<std::uint64_t>();
  p.abnormal_count = j.at("abnormal_count").get<int>();
  p.wr_percent = j.value("wr_percent", 0.0);
}

void to_json(nlohmann::json& j, const WitnessRateSpec& s) {
  j = nlohmann::json{{"wr_percent", s.wr_percent},
                     {"train_abnormal_count", s.train_abnormal_count},
                     {"test_abnormal_count", s.test_abnormal_count}};
}

void from_json(const nlohmann::json& j, WitnessRateSpec& s) {
  s.wr_percent = j.at("wr_percent").get<double>();
  s.train_abnormal_count = j.at("train_abnormal_count").get<int>();
  s.test_abnormal_count = j.at("test_abnormal_count").get<int>();
}

}  // namespace rarecell
