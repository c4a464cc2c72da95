#include "rarecell/experiment.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "rarecell/errors.hpp"
#include "rarecell/io.hpp"
#include "rarecell/metrics.hpp"
#include "rarecell/random.hpp"
#include "rarecell/report.hpp"

namespace rarecell {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Method m) {
  switch (m) {
    case Method::dsvdd: return "dsvdd";
    case Method::droc: return "droc";
    case Method::fs_sil: return "fs-sil";
    case Method::ws_sil: return "ws-sil";
    case Method::its2clr: return "its2clr";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  for (auto m : all_methods()) {
    if (to_string(m) == s) return m;
  }
  throw ArgumentError("unknown method '" + std::string(s) + "' (dsvdd, droc, fs-sil, ws-sil, its2clr)");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> v{Method::dsvdd, Method::droc, Method::fs_sil, Method::ws_sil, Method::its2clr};
  return v;
}

bool is_one_class(Method m) { return m == Method::dsvdd || m == Method::droc; }

void to_json(json& j, const HarnessConfig& c) {
  j = {{"n_bags", c.n_bags}, {"n_mixed", c.n_mixed},          {"seed", c.seed},
       {"trials", c.trials}, {"witness_rates", c.witness_rates}, {"mode", c.mode}};
}

void from_json(const json& j, HarnessConfig& c) {
  c.n_bags = j.value("n_bags", c.n_bags);
  c.n_mixed = j.value("n_mixed", c.n_mixed);
  c.seed = j.value("seed", c.seed);
  c.trials = j.value("trials", c.trials);
  c.mode = j.value("mode", c.mode);
  if (j.contains("witness_rates")) {
    c.witness_rates.clear();
    for (const auto& e : j.at("witness_rates")) {
      if (e.is_number()) {
        c.witness_rates.push_back(WitnessRateSpec::from_table(e.get<double>()));
      } else if (e.contains("train_abnormal_count")) {
        c.witness_rates.push_back(e.get<WitnessRateSpec>());
      } else {
        c.witness_rates.push_back(WitnessRateSpec::from_table(e.at("wr_percent").get<double>()));
      }
    }
  }
  if (c.n_bags < 2) throw ArgumentError("harness.n_bags must be >= 2");
  if (c.n_mixed < 1 || c.n_mixed >= c.n_bags) throw ArgumentError("harness.n_mixed must lie in [1, n_bags)");
  if (c.trials < 1) throw ArgumentError("harness.trials must be >= 1");
  if (c.mode != "auto" && c.mode != "wr" && c.mode != "slides") {
    throw ArgumentError("harness.mode must be auto, wr or slides");
  }
}

void to_json(json& j, const ExperimentConfig& c) {
  j = {{"name", c.name},
       {"manifest", c.manifest.string()},
       {"output_dir", c.output_dir.string()},
       {"seed", c.seed},
       {"K", c.K},
       {"grid_K", c.grid_K},
       {"augmentation", c.augmentation},
       {"harness", c.harness},
       {"dsvdd", c.dsvdd},
       {"droc", c.droc},
       {"fs_sil", c.fs_sil},
       {"ws_sil", c.ws_sil},
       {"its2clr", c.its2clr},
       {"reuse_encoder", c.reuse_encoder},
       {"preload_bytes", c.preload_bytes}};
}

void from_json(const json& j, ExperimentConfig& c) {
  c.name = j.value("name", c.name);
  c.manifest = j.value("manifest", std::string{});
  c.output_dir = j.value("output_dir", std::string{});
  c.seed = j.value("seed", c.seed);
  c.K = j.value("K", c.K);
  c.grid_K = j.value("grid_K", c.grid_K);
  c.reuse_encoder = j.value("reuse_encoder", c.reuse_encoder);
  c.preload_bytes = j.value("preload_bytes", c.preload_bytes);
  if (j.contains("harness")) c.harness = j.at("harness").get<HarnessConfig>();

  // A top-level "encoder" block supplies backbone / input side defaults that
  // method sections may override.
  const json shared = j.value("encoder", json::object());
  auto section = [&](const char* key) {
    json s = j.value(key, json::object());
    json enc = shared;
    if (s.contains("encoder")) enc.update(s.at("encoder"));
    if (!enc.empty()) s["encoder"] = enc;
    return s;
  };
  // Method defaults differ per section (latent width, bias), so each starts
  // from its own defaults before the overrides are applied.
  auto with_defaults = [](json s, const EncoderConfig& d) {
    if (s.contains("encoder")) {
      json base = d;
      base.update(s.at("encoder"));
      s["encoder"] = base;
    }
    return s;
  };
  c.dsvdd = with_defaults(section("dsvdd"), DsvddConfig{}.encoder).get<DsvddConfig>();
  c.droc = with_defaults(section("droc"), DrocConfig{}.encoder).get<DrocConfig>();
  c.fs_sil = with_defaults(section("fs_sil"), SilConfig{}.encoder).get<SilConfig>();
  c.ws_sil = with_defaults(section("ws_sil"), SilConfig{}.encoder).get<SilConfig>();
  c.its2clr = with_defaults(section("its2clr"), Its2clrConfig{}.encoder).get<Its2clrConfig>();

  json aug = j.value("augmentation", json::object());
  if (!aug.contains("target_side") && shared.contains("input_side")) aug["target_side"] = shared.at("input_side");
  c.augmentation = aug.get<AugmentationPolicy>();
  c.validate();
}

void ExperimentConfig::validate() const {
  const int side = augmentation.target_side;
  auto check = [&](const char* name, const EncoderConfig& e) {
    if (e.input_side != side) {
      throw ArgumentError(std::string(name) + ".encoder.input_side (" + std::to_string(e.input_side) +
                          ") differs from augmentation.target_side (" + std::to_string(side) + ")");
    }
    backbone_spec(e.backbone);
  };
  check("dsvdd", dsvdd.encoder);
  check("droc", droc.encoder);
  check("fs_sil", fs_sil.encoder);
  check("ws_sil", ws_sil.encoder);
  check("its2clr", its2clr.encoder);
  if (K < 1) throw ArgumentError("K must be >= 1");
  if (grid_K < 1) throw ArgumentError("grid_K must be >= 1");
  if (dsvdd.n_views > augmentation.tta.n_views) {
    throw ArgumentError("dsvdd.n_views exceeds augmentation.tta.n_views");
  }
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ArgumentError("config file not found: " + path.string());
  auto c = read_json(path).get<ExperimentConfig>();
  if (c.manifest.empty()) throw ArgumentError("config has no manifest path");
  if (c.manifest.is_relative()) c.manifest = fs::absolute(path).parent_path() / c.manifest;
  return c;
}

fs::path resolve_output_dir(const ExperimentConfig& config, const fs::path& fallback_root) {
  if (config.output_dir.is_absolute()) return config.output_dir;
  fs::path root = fallback_root;
  if (const char* env = std::getenv("RARECELL_OUTPUT_ROOT"); env && *env) root = env;
  return root / (config.output_dir.empty() ? fs::path(config.name) : config.output_dir);
}

// ---------------------------------------------------------------------------

namespace {

class NullBuffer : public std::streambuf {
 public:
  int overflow(int c) override { return c; }
};

std::vector<std::string> members_of(const std::vector<Bag>& bags, bool negatives_only) {
  std::vector<std::string> out;
  for (const auto& b : bags) {
    if (negatives_only && b.bag_label == BagLabel::positive) continue;
    out.insert(out.end(), b.members.begin(), b.members.end());
  }
  return out;
}

std::string method_key(Method m) {
  std::string k(to_string(m));
  std::replace(k.begin(), k.end(), '-', '_');
  return k;
}

struct ScoreRow {
  std::string instance_id;
  double score = 0.0;
};

std::vector<ScoreRow> read_scores(const fs::path& path, const std::string& expected_hash) {
  if (!fs::exists(path)) throw PreconditionError("missing score file " + path.string() + "; run score first");
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  std::vector<ScoreRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = parse_csv_line(line, line_no);
    if (f.size() != 5) throw ParseError("expected 5 fields", line_no);
    if (f[4] != expected_hash) {
      throw IntegrityError(path.string() + " was produced under config " + f[4] + ", current is " + expected_hash);
    }
    rows.push_back({f[0], std::stod(f[1])});
  }
  return rows;
}

}  // namespace

Experiment::Experiment(ExperimentConfig config, fs::path dir) : config_(std::move(config)), dir_(std::move(dir)) {
  config_.validate();
}

std::ostream& Experiment::out(const RunOptions& options) const {
  static NullBuffer null_buffer;
  static std::ostream null_stream(&null_buffer);
  return options.out ? *options.out : null_stream;
}

const Dataset& Experiment::dataset() {
  if (!dataset_) dataset_ = load_manifest(config_.manifest);
  return *dataset_;
}

bool Experiment::slide_mode() {
  if (config_.harness.mode == "slides") return true;
  if (config_.harness.mode == "wr") return false;
  return dataset().has_unknown_labels();
}

std::string Experiment::harness_hash() {
  if (!harness_hash_) {
    harness_hash_ = content_hash(json{{"manifest", content_hash_bytes(read_file(config_.manifest))},
                                      {"harness", config_.harness}});
  }
  return *harness_hash_;
}

std::string Experiment::method_hash(Method m) {
  json j = config_;
  return content_hash(json{{"harness", harness_hash()},
                           {"seed", config_.seed},
                           {"augmentation", config_.augmentation},
                           {"method", std::string(to_string(m))},
                           {"section", j.at(method_key(m))}});
}

std::string Experiment::wr_tag(double wr_percent) { return "wr_" + format_double(wr_percent); }

fs::path Experiment::harness_dir(const std::string& tag) const { return dir_ / "harness" / tag; }
fs::path Experiment::model_dir(Method m, const std::string& tag) const {
  return dir_ / "models" / std::string(to_string(m)) / tag;
}
fs::path Experiment::score_dir(Method m, const std::string& tag) const {
  return dir_ / "scores" / std::string(to_string(m)) / tag;
}

const WitnessRateSpec& Experiment::spec_for(double wr_percent) const {
  for (const auto& s : config_.harness.witness_rates) {
    if (std::abs(s.wr_percent - wr_percent) < 1e-12) return s;
  }
  throw ArgumentError("witness rate " + format_double(wr_percent) + "% is not configured");
}

std::vector<std::string> Experiment::tags(const RunOptions& options) {
  if (slide_mode()) {
    if (!options.wr.empty()) throw ArgumentError("--wr does not apply to slide-supervised data");
    return {"slides"};
  }
  std::vector<std::string> out;
  if (options.wr.empty()) {
    for (const auto& s : config_.harness.witness_rates) out.push_back(wr_tag(s.wr_percent));
  } else {
    for (double w : options.wr) out.push_back(wr_tag(spec_for(w).wr_percent));
  }
  return out;
}

std::vector<Bag> Experiment::bags(const std::string& tag) {
  const auto path = harness_dir(tag) / "bags.json";
  if (!fs::exists(path)) throw PreconditionError("harness for " + tag + " is missing; run harness-build first");
  auto j = read_json(path);
  if (j.value("config_hash", "") != harness_hash()) {
    throw IntegrityError(path.string() + " does not match the current dataset/harness config; rebuild with --force");
  }
  return j.at("bags").get<std::vector<Bag>>();
}

std::vector<Experiment::PoolFile> Experiment::pools(const std::string& tag) {
  std::vector<PoolFile> out;
  const auto dir = harness_dir(tag);
  if (!fs::exists(dir)) throw PreconditionError("harness for " + tag + " is missing; run harness-build first");
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("pool_", 0) != 0 || e.path().extension() != ".json") continue;
    auto j = read_json(e.path());
    if (j.value("config_hash", "") != harness_hash()) {
      throw IntegrityError(e.path().string() + " does not match the current dataset/harness config");
    }
    out.push_back({e.path(), j.at("pool").get<EvalPool>()});
  }
  std::sort(out.begin(), out.end(), [](const PoolFile& a, const PoolFile& b) {
    const auto sa = a.path.stem().string(), sb = b.path.stem().string();
    return sa.size() != sb.size() ? sa.size() < sb.size() : sa < sb;
  });
  if (out.empty()) throw PreconditionError("no evaluation pools under " + dir.string());
  return out;
}

std::unique_ptr<ImageSource> Experiment::images(const std::vector<std::string>& ids) {
  const auto& ds = dataset();
  std::vector<fs::path> paths;
  paths.reserve(ids.size());
  for (const auto& id : ids) paths.push_back(ds.resolve(ds.at(id)));
  auto files = std::make_unique<FileImages>(ids, paths);
  if (ids.empty()) return files;
  const Image probe = files->at(0);
  const std::size_t per = static_cast<std::size_t>(probe.width()) * probe.height() * 3 * sizeof(float);
  if (per * ids.size() > config_.preload_bytes) return files;
  std::vector<std::size_t> all(ids.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return std::make_unique<InMemoryImages>(gather(*files, all));
}

void Experiment::log_epoch(Method m, const std::string& tag, const std::string& stage, const EpochRecord& rec) {
  json line = rec.values;
  line["method"] = std::string(to_string(m));
  line["tag"] = tag;
  line["stage"] = stage;
  line["epoch"] = rec.epoch;
  line["time"] = std::chrono::duration_cast<std::chrono::seconds>(
                     std::chrono::system_clock::now().time_since_epoch())
                     .count();
  fs::create_directories(dir_ / "logs");
  std::ofstream f(dir_ / "logs" / (std::string(to_string(m)) + ".jsonl"), std::ios::app);
  f << line.dump() << '\n';
}

// ---------------------------------------------------------------------------

void Experiment::harness_build(const RunOptions& options) {
  auto& o = out(options);
  const auto partition_path = dir_ / "harness" / "partition.json";
  if (fs::exists(partition_path) && !options.force) {
    throw StateError("harness already built at " + partition_path.string() + "; pass --force to rebuild");
  }
  if (fs::exists(dir_ / "harness")) fs::remove_all(dir_ / "harness");
  write_json_atomic(dir_ / "config.json", json(config_));
  const auto& ds = dataset();
  const auto hh = harness_hash();
  const auto& h = config_.harness;

  if (slide_mode()) {
    auto bags = bags_from_slides(ds, Split::train);
    write_json_atomic(partition_path, {{"config_hash", hh}, {"mode", "slides"}, {"bags", bags}});
    write_json_atomic(harness_dir("slides") / "bags.json", {{"config_hash", hh}, {"bags", bags}});
    std::map<std::string, std::vector<std::string>> by_slide;
    for (const auto& p : ds.instances()) {
      if (p.split == Split::test) by_slide[p.slide_id].push_back(p.instance_id);
    }
    std::size_t i = 0;
    for (auto& [slide, ids] : by_slide) {
      std::sort(ids.begin(), ids.end());
      EvalPool pool{slide, ids, 0, 0, 0.0};
      write_json_atomic(harness_dir("slides") / ("pool_" + std::to_string(i++) + ".json"),
                        {{"config_hash", hh}, {"trial", 0}, {"pool", pool}});
    }
    o << "harness: " << bags.size() << " slide bags, " << by_slide.size() << " test slides\n";
    return;
  }

  const auto normals = ds.ids(Split::train, Label::normal);
  const auto train_abn = ds.ids(Split::train, Label::abnormal);
  const auto test_normals = ds.ids(Split::test, Label::normal);
  const auto test_abn = ds.ids(Split::test, Label::abnormal);
  const auto partition = partition_bags(normals, h.n_bags, h.seed);
  write_json_atomic(partition_path,
                    {{"config_hash", hh}, {"mode", "wr"}, {"seed", h.seed}, {"n_bags", h.n_bags}, {"bags", partition}});
  o << "partition: " << normals.size() << " normals into " << h.n_bags << " bags\n";

  for (const auto& tag : tags(options)) {
    const auto& spec = spec_for(std::stod(tag.substr(3)));
    const auto bags = inject_witness_rate(partition, train_abn, spec, h.n_mixed, h.seed);
    write_json_atomic(harness_dir(tag) / "bags.json",
                      {{"config_hash", hh}, {"spec", spec}, {"n_mixed", h.n_mixed}, {"bags", bags}});
    for (int t = 0; t < h.trials; ++t) {
      const std::uint64_t trial_seed = derive_seed(h.seed, {0x706f6f6c, std::bit_cast<std::uint64_t>(spec.wr_percent),
                                                            static_cast<std::uint64_t>(t)});
      auto pool = build_eval_pool(test_normals, test_abn, spec, trial_seed);
      write_json_atomic(harness_dir(tag) / ("pool_trial_" + std::to_string(t) + ".json"),
                        {{"config_hash", hh}, {"trial", t}, {"pool", pool}});
    }
    o << tag << ": " << spec.train_abnormal_count << " train / " << spec.test_abnormal_count
      << " test abnormals, " << h.trials << " pools\n";
  }
}

void Experiment::train(Method m, const RunOptions& options) {
  for (const auto& tag : tags(options)) train_one(m, tag, options);
}

void Experiment::train_one(Method m, const std::string& tag, const RunOptions& options) {
  auto& o = out(options);
  if (m == Method::fs_sil && slide_mode()) {
    throw PreconditionError("fs-sil needs instance labels and is not applicable to slide-supervised data");
  }
  const auto bag_set = bags(tag);
  const auto mdir = model_dir(m, tag);
  const auto hash = method_hash(m);
  const json meta{{"config_hash", hash},
                  {"harness_hash", harness_hash()},
                  {"method", std::string(to_string(m))},
                  {"tag", tag},
                  {"seed", config_.seed}};

  if (!options.force && fs::exists(mdir / "model.json")) {
    auto existing = read_json(mdir / "model.json");
    if (existing.value("config_hash", "") == hash && existing.value("harness_hash", "") == harness_hash()) {
      o << to_string(m) << " " << tag << ": checkpoint up to date\n";
      return;
    }
  }

  if ((options.reuse_encoder || config_.reuse_encoder) && is_one_class(m)) {
    const auto root = dir_ / "models" / std::string(to_string(m));
    if (fs::exists(root)) {
      for (const auto& e : fs::directory_iterator(root)) {
        if (e.path() == mdir || !fs::exists(e.path() / "model.json")) continue;
        auto other = read_json(e.path() / "model.json");
        if (other.value("config_hash", "") != hash || other.value("harness_hash", "") != harness_hash()) continue;
        fs::create_directories(mdir);
        for (const auto& f : fs::directory_iterator(e.path())) {
          fs::copy_file(f.path(), mdir / f.path().filename(), fs::copy_options::overwrite_existing);
        }
        other["tag"] = tag;
        other["reused_from"] = e.path().filename().string();
        write_json_atomic(mdir / "model.json", other);
        o << to_string(m) << " " << tag << ": reusing checkpoint from " << e.path().filename().string() << "\n";
        return;
      }
    }
    o << to_string(m) << " " << tag << ": no checkpoint to reuse, training\n";
  }

  const std::uint64_t seed = derive_seed(config_.seed, {0x747261696e, static_cast<std::uint64_t>(m)});
  const Augmenter augmenter(config_.augmentation);
  EpochCallback on_epoch = [&](const std::string& stage, const EpochRecord& rec) {
    log_epoch(m, tag, stage, rec);
    if (options.verbose) {
      o << to_string(m) << " " << tag << " " << stage << " epoch " << rec.epoch;
      for (const auto& [k, v] : rec.values) o << " " << k << "=" << v;
      o << "\n";
    }
  };
  fs::create_directories(mdir);
  json train_log = json::array();

  switch (m) {
    case Method::dsvdd: {
      auto src = images(members_of(bag_set, true));
      std::vector<TrainingLog> logs;
      auto ensemble = fit_dsvdd(*src, augmenter, config_.dsvdd, seed, &logs, on_epoch);
      save_dsvdd(mdir, ensemble, config_.dsvdd, meta);
      for (const auto& l : logs) train_log.push_back(l.to_json());
      break;
    }
    case Method::droc: {
      auto src = images(members_of(bag_set, true));
      seed_torch(seed);
      auto model = make_droc_model(config_.droc);
      const auto& c = config_.droc;
      auto log = train_droc(model, *src, augmenter, {c.epochs, c.lr, c.batch, 0.0, seed, on_epoch});
      auto detector = fit_detector(model, *src, augmenter, {c.nu, c.gamma});
      save_droc(mdir, model, detector, c, meta);
      train_log.push_back(log.to_json());
      break;
    }
    case Method::fs_sil: {
      const auto ids = members_of(bag_set, false);
      auto src = images(ids);
      std::vector<Label> labels;
      for (const auto& id : ids) labels.push_back(dataset().at(id).true_label);
      TrainingLog log;
      auto model = train_fs_sil(*src, labels, augmenter, config_.fs_sil, seed, &log, on_epoch,
                                [&](int epoch, SilModel& snap) {
                                  save_sil(mdir, snap, config_.fs_sil, meta, "sil_epoch" + std::to_string(epoch) + ".pt");
                                });
      save_sil(mdir, model, config_.fs_sil, meta);
      train_log.push_back(log.to_json());
      break;
    }
    case Method::ws_sil: {
      auto src = images(members_of(bag_set, false));
      TrainingLog log;
      auto model = train_ws_sil(bag_set, *src, augmenter, config_.ws_sil, seed, &log, on_epoch,
                                [&](int epoch, SilModel& snap) {
                                  save_sil(mdir, snap, config_.ws_sil, meta, "sil_epoch" + std::to_string(epoch) + ".pt");
                                });
      save_sil(mdir, model, config_.ws_sil, meta);
      train_log.push_back(log.to_json());
      break;
    }
    case Method::its2clr: {
      auto src = images(members_of(bag_set, false));
      std::vector<Its2clrRound> rounds;
      auto model = train_its2clr(bag_set, *src, augmenter, config_.its2clr, seed, &rounds, on_epoch);
      save_its2clr(mdir, model, config_.its2clr, meta);
      write_json_atomic(mdir / "pseudo_labels.json", to_json(rounds));
      break;
    }
  }
  write_json_atomic(mdir / "train_log.json", {{"config_hash", hash}, {"stages", train_log}});
  o << to_string(m) << " " << tag << ": trained\n";
}

// ---------------------------------------------------------------------------

void Experiment::score(Method m, const RunOptions& options) {
  auto& o = out(options);
  const auto hash = method_hash(m);
  const Augmenter augmenter(config_.augmentation);
  for (const auto& tag : tags(options)) {
    const auto mdir = model_dir(m, tag);
    if (!fs::exists(mdir / "model.json")) {
      throw PreconditionError("no " + std::string(to_string(m)) + " checkpoint for " + tag + "; run train first");
    }
    const auto meta = read_json(mdir / "model.json");
    if (meta.value("harness_hash", "") != harness_hash()) {
      throw IntegrityError("checkpoint " + mdir.string() + " was trained on a different harness");
    }
    if (meta.value("config_hash", "") != hash) {
      throw IntegrityError("checkpoint " + mdir.string() + " was trained under config " +
                           meta.value("config_hash", std::string("?")) + ", current is " + hash);
    }
    const auto pool_files = pools(tag);
    std::vector<std::string> ids;
    {
      std::set<std::string> seen;
      for (const auto& p : pool_files) seen.insert(p.pool.instances.begin(), p.pool.instances.end());
      ids.assign(seen.begin(), seen.end());
    }
    auto src = images(ids);
    std::vector<double> scores;
    int seed_count = 1;
    json slide_predictions = json::object();
    switch (m) {
      case Method::dsvdd: {
        auto ensemble = load_dsvdd(mdir);
        seed_count = static_cast<int>(ensemble.members.size());
        scores = ensemble_scores(ensemble, *src, augmenter);
        break;
      }
      case Method::droc: {
        OneClassSvm detector;
        auto model = load_droc(mdir, detector);
        scores = score_droc(detector, model, *src, augmenter);
        break;
      }
      case Method::fs_sil:
      case Method::ws_sil: {
        auto model = load_sil(mdir);
        scores = score_sil(model, *src, augmenter);
        break;
      }
      case Method::its2clr: {
        auto model = load_its2clr(mdir);
        auto emb = its2clr_embeddings(model, *src, augmenter);
        torch::NoGradGuard no_grad;
        auto conf = model.aggregator->instance_confidence(emb).to(torch::kFloat64).contiguous();
        scores.assign(conf.data_ptr<double>(), conf.data_ptr<double>() + conf.numel());
        if (slide_mode()) {
          std::unordered_map<std::string, std::int64_t> row;
          for (std::size_t i = 0; i < ids.size(); ++i) row.emplace(ids[i], static_cast<std::int64_t>(i));
          for (const auto& p : pool_files) {
            std::vector<std::int64_t> rows;
            for (const auto& id : p.pool.instances) rows.push_back(row.at(id));
            auto h = emb.index({torch::tensor(rows, torch::kLong)});
            slide_predictions[p.pool.pool_id] = torch::sigmoid(model.aggregator(h)).item<double>();
          }
        }
        break;
      }
    }
    std::unordered_map<std::string, double> by_id;
    for (std::size_t i = 0; i < ids.size(); ++i) by_id.emplace(ids[i], scores[i]);

    const auto sdir = score_dir(m, tag);
    for (const auto& p : pool_files) {
      std::vector<ScoreRow> rows;
      for (const auto& id : p.pool.instances) rows.push_back({id, by_id.at(id)});
      std::sort(rows.begin(), rows.end(), [](const ScoreRow& a, const ScoreRow& b) {
        return a.score != b.score ? a.score > b.score : a.instance_id < b.instance_id;
      });
      std::string body = "instance_id,score,method,seed_count,config_hash\n";
      for (const auto& r : rows) {
        body += csv_field(r.instance_id) + "," + format_double(r.score) + "," + std::string(to_string(m)) + "," +
                std::to_string(seed_count) + "," + hash + "\n";
      }
      write_file_atomic(sdir / (p.path.stem().string() + ".csv"), body);
    }
    if (!slide_predictions.empty()) {
      write_json_atomic(sdir / "slide_predictions.json", {{"config_hash", hash}, {"predictions", slide_predictions}});
    }
    o << to_string(m) << " " << tag << ": scored " << ids.size() << " instances across " << pool_files.size()
      << " pools\n";
  }
}

// ---------------------------------------------------------------------------

namespace {

struct MetricRow {
  std::string method;
  double wr = 0.0;
  int trial = 0;
  std::string metric;
  double value = 0.0;
  std::string config_hash;
};

int method_rank(const std::string& m) {
  const auto& all = all_methods();
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (to_string(all[i]) == m) return static_cast<int>(i);
  }
  return static_cast<int>(all.size());
}

int metric_rank(const std::string& m) {
  const auto& names = metric_names();
  return static_cast<int>(std::find(names.begin(), names.end(), m) - names.begin());
}

std::vector<MetricRow> read_metric_rows(const fs::path& path) {
  std::vector<MetricRow> rows;
  if (!fs::exists(path)) return rows;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = parse_csv_line(line, line_no);
    if (f.size() != 6) throw ParseError("expected 6 fields in " + path.string(), line_no);
    rows.push_back({f[0], std::stod(f[1]), std::stoi(f[2]), f[3], std::stod(f[4]), f[5]});
  }
  return rows;
}

}  // namespace

void Experiment::evaluate(const std::vector<Method>& methods, const RunOptions& options) {
  auto& o = out(options);
  if (slide_mode()) {
    throw PreconditionError("instance labels are unknown for this dataset; evaluation is not possible (use report)");
  }
  const auto& ds = dataset();
  const auto per_trial_path = dir_ / "metrics" / "per_trial.csv";
  auto rows = read_metric_rows(per_trial_path);
  for (auto m : methods) {
    const auto hash = method_hash(m);
    for (const auto& tag : tags(options)) {
      const auto& spec = spec_for(std::stod(tag.substr(3)));
      const std::string name(to_string(m));
      std::erase_if(rows, [&](const MetricRow& r) { return r.method == name && r.wr == spec.wr_percent; });
      for (const auto& p : pools(tag)) {
        std::vector<RankedEntry> entries;
        for (const auto& r : read_scores(score_dir(m, tag) / (p.path.stem().string() + ".csv"), hash)) {
          const auto label = ds.at(r.instance_id).true_label;
          if (label == Label::unknown) {
            throw PreconditionError("instance '" + r.instance_id + "' has no ground-truth label; evaluation refused");
          }
          entries.push_back({r.instance_id, r.score, label == Label::abnormal ? 1 : 0});
        }
        if (entries.size() != p.pool.instances.size()) {
          throw IntegrityError("score file for " + p.pool.pool_id + " does not cover its pool");
        }
        RankedList list(std::move(entries));
        if (list.positives() != static_cast<std::size_t>(p.pool.abnormal_count)) {
          throw IntegrityError("pool " + p.pool.pool_id + " positives disagree with its record");
        }
        EvalConfig ec{config_.K, static_cast<std::size_t>(p.pool.abnormal_count),
                      static_cast<std::size_t>(std::max(spec.test_abnormal_count, p.pool.abnormal_count))};
        const int trial = read_json(p.path).value("trial", 0);
        for (const auto& [metric, value] : as_rows(evaluate_all(list, ec))) {
          rows.push_back({name, spec.wr_percent, trial, metric, value, hash});
        }
      }
      o << name << " " << tag << ": evaluated\n";
    }
  }
  std::sort(rows.begin(), rows.end(), [](const MetricRow& a, const MetricRow& b) {
    return std::tuple(method_rank(a.method), a.method, a.wr, a.trial, metric_rank(a.metric)) <
           std::tuple(method_rank(b.method), b.method, b.wr, b.trial, metric_rank(b.metric));
  });
  std::string body = "method,wr_percent,trial,metric,value,config_hash\n";
  for (const auto& r : rows) {
    body += r.method + "," + format_double(r.wr) + "," + std::to_string(r.trial) + "," + r.metric + "," +
            format_double(r.value) + "," + r.config_hash + "\n";
  }
  write_file_atomic(per_trial_path, body);

  std::map<std::tuple<int, std::string, double, int, std::string>, std::vector<double>> groups;
  std::map<std::tuple<int, std::string, double, int, std::string>, std::string> hashes;
  for (const auto& r : rows) {
    auto key = std::tuple(method_rank(r.method), r.method, r.wr, metric_rank(r.metric), r.metric);
    groups[key].push_back(r.value);
    hashes[key] = r.config_hash;
  }
  std::string agg = "method,wr_percent,metric,mean,std,n_trials,config_hash\n";
  for (const auto& [key, values] : groups) {
    const auto ms = aggregate_trials(values);
    agg += std::get<1>(key) + "," + format_double(std::get<2>(key)) + "," + std::get<4>(key) + "," +
           format_double(ms.mean) + "," + format_double(ms.std) + "," + std::to_string(values.size()) + "," +
           hashes[key] + "\n";
  }
  write_file_atomic(dir_ / "metrics" / "aggregated.csv", agg);
  write_json_atomic(dir_ / "metrics" / "metadata.json",
                    {{"K", config_.K},
                     {"recall", "TP@K / T"},
                     {"ndcg_ideal", "min(T, K) positives at the head"},
                     {"aufroc", "TPR = TP(k)/T_max over FPI = FP(k)/min(K, N), starting at (0, 0)"},
                     {"std", "sample (n - 1)"},
                     {"ties", "score desc, instance_id asc"}});
}

// ---------------------------------------------------------------------------

void Experiment::report(const std::vector<Method>& methods, const RunOptions& options) {
  auto& o = out(options);
  const auto& ds = dataset();
  const auto grid_dir = dir_ / "report" / "grids";
  for (auto m : methods) {
    const auto hash = method_hash(m);
    for (const auto& tag : tags(options)) {
      if (!fs::exists(score_dir(m, tag))) continue;
      json predictions;
      if (slide_mode() && fs::exists(score_dir(m, tag) / "slide_predictions.json")) {
        predictions = read_json(score_dir(m, tag) / "slide_predictions.json").at("predictions");
      }
      auto pool_files = pools(tag);
      // Witness-rate runs get one grid (first trial); slide runs one per slide.
      if (!slide_mode()) pool_files.resize(1);
      for (const auto& p : pool_files) {
        if (!predictions.is_null() && predictions.value(p.pool.pool_id, 1.0) < 0.5) {
          o << to_string(m) << " " << p.pool.pool_id << ": predicted negative, no grid\n";
          continue;
        }
        std::vector<RankedEntry> entries;
        for (const auto& r : read_scores(score_dir(m, tag) / (p.path.stem().string() + ".csv"), hash)) {
          entries.push_back({r.instance_id, r.score, ds.at(r.instance_id).true_label == Label::abnormal ? 1 : 0});
        }
        std::string grid_id = std::string(to_string(m)) + "_" + tag + "_" + p.path.stem().string().substr(5);
        auto manifest = build_grid_manifest(RankedList(std::move(entries)), ds, config_.grid_K,
                                            derive_seed(config_.seed, {0x67726964}), std::nullopt, grid_id,
                                            p.pool.pool_id);
        manifest.config_hash = hash;
        write_json_atomic(grid_dir / (grid_id + ".json"), json(manifest));
        const auto missing = render_mosaic(manifest, {}, ds.base_dir, grid_dir / (grid_id + ".png"));
        if (missing) o << grid_id << ": " << missing << " images missing, placeholders used\n";
        const auto review_dir = dir_ / "reviews" / grid_id;
        if (fs::exists(review_dir)) {
          std::vector<ReviewRecord> records;
          for (const auto& e : fs::directory_iterator(review_dir)) {
            if (e.path().filename() != "agreement.json" && e.path().extension() == ".json") {
              records.push_back(read_json(e.path()).get<ReviewRecord>());
            }
          }
          std::sort(records.begin(), records.end(),
                    [](const ReviewRecord& a, const ReviewRecord& b) { return a.reviewer_id < b.reviewer_id; });
          render_mosaic(manifest, records, ds.base_dir, grid_dir / (grid_id + "_review.png"));
        }
        o << "grid " << grid_id << ": " << manifest.cells.size() << " cells\n";
      }
    }
  }

  if (slide_mode()) return;
  const auto agg_path = dir_ / "metrics" / "aggregated.csv";
  if (!fs::exists(agg_path)) {
    o << "curves skipped: no aggregated metrics (run evaluate)\n";
    return;
  }
  std::set<std::string> wanted;
  for (auto m : methods) wanted.insert(std::string(to_string(m)));
  std::vector<CurvePoint> points;
  std::map<std::string, std::set<double>> rates;
  std::istringstream in(read_file(agg_path));
  std::string line;
  std::getline(in, line);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = parse_csv_line(line, line_no);
    if (f.size() != 7) throw ParseError("expected 7 fields in " + agg_path.string(), line_no);
    if (!wanted.count(f[0])) continue;
    points.push_back({f[0], std::stod(f[1]), f[2], std::stod(f[3]), std::stod(f[4])});
    rates[f[0]].insert(std::stod(f[1]));
  }
  std::erase_if(points, [&](const CurvePoint& p) { return rates[p.method].size() < 2; });
  if (points.empty()) {
    o << "curves skipped: need at least two witness rates per method\n";
    return;
  }
  for (const auto& f : plot_wr_curves(points, dir_ / "report" / "curves", config_.K)) o << "curve " << f.string() << "\n";
}

AgreementStats Experiment::review_export(const std::vector<fs::path>& record_paths, const RunOptions& options) {
  auto& o = out(options);
  if (record_paths.empty()) throw ArgumentError("review-export needs at least one review record");
  std::vector<ReviewRecord> incoming;
  for (const auto& p : record_paths) {
    if (!fs::exists(p)) throw ArgumentError("review record not found: " + p.string());
    incoming.push_back(read_json(p).get<ReviewRecord>());
  }
  const auto grid_id = incoming.front().grid_id;
  const auto manifest_path = dir_ / "report" / "grids" / (grid_id + ".json");
  if (!fs::exists(manifest_path)) throw PreconditionError("unknown grid '" + grid_id + "'; run report first");
  const auto manifest = read_json(manifest_path).get<GridManifest>();
  std::unordered_set<std::string> cells;
  for (const auto& c : manifest.cells) cells.insert(c.instance_id);
  const auto review_dir = dir_ / "reviews" / grid_id;
  for (const auto& r : incoming) {
    if (r.grid_id != grid_id) throw ArgumentError("review records belong to different grids");
    if (r.reviewer_id.empty()) throw ArgumentError("review record has no reviewer_id");
    for (const auto& id : r.marked) {
      if (!cells.count(id)) throw ArgumentError("reviewer " + r.reviewer_id + " marked '" + id + "', not in the grid");
    }
    write_json_atomic(review_dir / (r.reviewer_id + ".json"), json(r));
    o << "stored review by " << r.reviewer_id << " (" << r.marked.size() << " marks)\n";
  }
  std::vector<ReviewRecord> stored;
  for (const auto& e : fs::directory_iterator(review_dir)) {
    if (e.path().filename() != "agreement.json" && e.path().extension() == ".json") {
      stored.push_back(read_json(e.path()).get<ReviewRecord>());
    }
  }
  std::sort(stored.begin(), stored.end(),
            [](const ReviewRecord& a, const ReviewRecord& b) { return a.reviewer_id < b.reviewer_id; });
  if (stored.size() < 2) {
    o << "one review stored; agreement needs two reviewers\n";
    return AgreementStats{0, 0, 0, manifest.cells.size()};
  }
  const auto stats = agreement_stats(manifest, stored);
  json j = stats;
  j["grid_id"] = grid_id;
  j["reviewers"] = {stored[0].reviewer_id, stored[1].reviewer_id};
  write_json_atomic(review_dir / "agreement.json", j);
  render_mosaic(manifest, stored, dataset().base_dir, dir_ / "report" / "grids" / (grid_id + "_review.png"));
  o << "agreement: both=" << stats.both << " only_a=" << stats.only_a << " only_b=" << stats.only_b
    << " none=" << stats.none << "\n";
  return stats;
}

}  // namespace rarecell
