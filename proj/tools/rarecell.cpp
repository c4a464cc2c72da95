// rarecell: experiment runner for rare abnormal-cell retrieval.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rarecell/errors.hpp"
#include "rarecell/experiment.hpp"
#include "rarecell/synthetic.hpp"

namespace fs = std::filesystem;
using namespace rarecell;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> methods;
  std::vector<double> wr;
  std::optional<int> trials;
  std::optional<std::size_t> k;
  std::optional<std::uint64_t> seed;
  bool force = false;
  bool reuse_encoder = false;
  bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c, bool methods) {
  cmd->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  if (methods) cmd->add_option("--method", c.methods, "dsvdd, droc, fs-sil, ws-sil, its2clr or all (repeatable)");
  cmd->add_option("--wr", c.wr, "witness rate in percent (repeatable; default: all configured)");
  cmd->add_option("--trials", c.trials, "override harness.trials");
  cmd->add_option("--k", c.k, "override K for the metrics");
  cmd->add_option("--seed", c.seed, "override the experiment seed");
  cmd->add_flag("--verbose", c.verbose, "print per-epoch losses");
}

Experiment open(const Common& c) {
  auto config = load_config(c.config);
  if (c.trials) config.harness.trials = *c.trials;
  if (c.k) config.K = *c.k;
  if (c.seed) config.seed = *c.seed;
  config.validate();
  auto dir = resolve_output_dir(config, fs::current_path());
  return Experiment(std::move(config), dir);
}

RunOptions options(const Common& c) {
  RunOptions o;
  o.wr = c.wr;
  o.force = c.force;
  o.reuse_encoder = c.reuse_encoder;
  o.verbose = c.verbose;
  o.out = &std::cout;
  return o;
}

std::vector<Method> methods(const Common& c, bool default_all) {
  std::vector<Method> out;
  if (c.methods.empty()) {
    if (!default_all) throw ArgumentError("--method is required");
    return all_methods();
  }
  for (const auto& m : c.methods) {
    if (m == "all") return all_methods();
    out.push_back(parse_method(m));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rarecell: one-class retrieval of rare abnormal cells"};
  app.require_subcommand(1);
  Common c;
  std::vector<std::string> review_inputs;

  auto* harness = app.add_subcommand("harness-build", "partition bags, inject witness rates, draw evaluation pools");
  add_common(harness, c, false);
  harness->add_flag("--force", c.force, "rebuild an existing partition");

  auto* train = app.add_subcommand("train", "train a method on the harness");
  add_common(train, c, true);
  train->add_flag("--force", c.force, "retrain even when the checkpoint is up to date");
  train->add_flag("--reuse-encoder", c.reuse_encoder, "one-class methods: copy a checkpoint from another rate");

  auto* score = app.add_subcommand("score", "score every evaluation pool with a trained method");
  add_common(score, c, true);

  auto* evaluate = app.add_subcommand("evaluate", "compute retrieval metrics from score files");
  add_common(evaluate, c, true);

  auto* report = app.add_subcommand("report", "emit review grids, mosaics and witness-rate curves");
  add_common(report, c, true);

  auto* review = app.add_subcommand("review-export", "ingest reviewer records for a grid");
  review->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  review->add_option("--input", review_inputs, "ReviewRecord JSON file (repeatable)")->required();

  std::string synth_out;
  double synth_scale = 1.0;
  int synth_side = 32;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "write a synthetic patch dataset (blob normals, ring/texture abnormals)");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--scale", synth_scale, "fraction of the bone-marrow cardinalities")->check(CLI::Range(1e-4, 1.0));
  synth->add_option("--side", synth_side, "patch side in pixels")->check(CLI::Range(8, 512));
  synth->add_option("--seed", synth_seed, "render seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      auto counts = synthetic::bone_marrow_counts();
      auto scale = [&](int n) { return std::max(1, static_cast<int>(n * synth_scale + 0.5)); };
      counts = {scale(counts.train_normal), scale(counts.train_abnormal), scale(counts.test_normal),
                scale(counts.test_abnormal)};
      synthetic::write_dataset(synth_out, counts, synth_side, synth_seed);
      std::cout << "wrote " << counts.train_normal + counts.train_abnormal + counts.test_normal + counts.test_abnormal
                << " patches to " << synth_out << "\n";
      return 0;
    }
    auto exp = open(c);
    const auto o = options(c);
    if (harness->parsed()) exp.harness_build(o);
    if (train->parsed()) {
      for (auto m : methods(c, false)) exp.train(m, o);
    }
    if (score->parsed()) {
      for (auto m : methods(c, false)) exp.score(m, o);
    }
    if (evaluate->parsed()) exp.evaluate(methods(c, false), o);
    if (report->parsed()) exp.report(methods(c, true), o);
    if (review->parsed()) {
      std::vector<fs::path> paths(review_inputs.begin(), review_inputs.end());
      exp.review_export(paths, o);
    }
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const PreconditionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const StateError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const IntegrityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
