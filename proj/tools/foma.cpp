#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "foma/image.hpp"
#include "foma/plot.hpp"
#include "foma/training.hpp"

using namespace foma;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "1.0.0";
constexpr int kReportSchema = 1;
constexpr int kWeightLogSchema = 1;

// Exit codes: 0 success, 1 validation error, 2 runtime failure or NaN abort.
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void say(const std::string& s) { std::cerr << s << std::endl; }

// ---- run directory ---------------------------------------------------------

struct RunDir {
  fs::path path;
  std::string command;
  std::vector<std::string> argv;
};

fs::path output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("FOMA_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

RunDir open_run(const std::string& command, const std::string& root_flag, const std::string& exact,
                const std::vector<std::string>& argv) {
  RunDir r{exact, command, argv};
  if (r.path.empty()) {
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", std::localtime(&now));
    const fs::path base = output_root(root_flag) / (command + "-" + stamp);
    r.path = base;
    for (int n = 2; fs::exists(r.path); ++n) r.path = base.string() + "-" + std::to_string(n);
  }
  fs::create_directories(r.path);
  return r;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw RuntimeFailure("failed writing " + path.string());
}

nlohmann::json schema_versions() {
  return {{"checkpoint", kCheckpointVersion}, {"report", kReportSchema}, {"weight_log", kWeightLogSchema},
          {"manifest", kManifestName}};
}

void write_header(const RunDir& run, const nlohmann::json& config, std::uint64_t seed) {
  write_json(run.path / "run.json", {{"command", run.command},
                                     {"argv", run.argv},
                                     {"version", kVersion},
                                     {"seed", seed},
                                     {"schema_versions", schema_versions()},
                                     {"config", config}});
}

std::string file_digest(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(stable_hash(ss.str())));
  return buf;
}

// Lists every produced file with its size and a content hash.
void write_file_manifest(const RunDir& run) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(run.path)) {
    if (e.is_regular_file() && e.path().filename() != "files.tsv") files.push_back(fs::relative(e.path(), run.path));
  }
  std::sort(files.begin(), files.end());
  std::ofstream out(run.path / "files.tsv");
  out << "path\tbytes\tfnv1a64\n";
  for (const auto& f : files) out << f.generic_string() << '\t' << fs::file_size(run.path / f) << '\t' << file_digest(run.path / f) << '\n';
  if (!out) throw RuntimeFailure("failed writing the file manifest");
}

// ---- config assembly -------------------------------------------------------

struct ConfigFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> direct;  // flag value per config key

  void add_to(CLI::App* app) {
    app->add_option("--config", config_file, "Config file of `key = value` lines")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override a config key, `key=value` (repeatable)");
    for (const char* k : {"alpha", "tau", "lr", "epochs", "seed", "strategy", "pooling", "levels"}) {
      app->add_option("--" + std::string(k), direct[k], "Config key `" + std::string(k) + "`");
    }
    app->add_option("--batch-size", direct["batch_size"], "Config key `batch_size`");
    app->add_option("--focus-loss", direct["focus_loss"], "on | off");
    app->add_option("--detach-maps", direct["detach_maps"], "on | off");
    app->add_option("--weight-decay", direct["weight_decay"], "Config key `weight_decay`");
    app->add_option("--freeze-node-init", direct["freeze_node_init"], "on | off: keep graph node embeddings fixed");
  }

  // Returns the assembled config; `image_size` follows the data unless set.
  TrainConfig build(const DatasetManifest& manifest) const {
    TrainConfig cfg;
    bool size_given = false;
    auto apply = [&](const std::string& k, const std::string& v) {
      cfg.set(k, v);
      if (k == "image_size") size_given = true;
    };
    if (!config_file.empty()) {
      cfg = load_train_config(config_file, cfg);
      std::ifstream in(config_file);
      for (std::string line; std::getline(in, line);) {
        if (line.substr(0, line.find('#')).find("image_size") != std::string::npos) size_given = true;
      }
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      apply(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [k, v] : direct) {
      if (!v.empty()) apply(k, v);
    }
    if (!size_given) {
      for (const auto& r : manifest.records) {
        if (r.split != Split::train) continue;
        cfg.model.backbone.input_size = read_png(manifest.root / r.image).shape[1];
        break;
      }
    }
    cfg.validate();
    return cfg;
  }
};

std::pair<LabelSpace, DatasetManifest> open_data(const std::string& path) {
  fs::path p = path;
  if (fs::is_directory(p)) p /= kManifestName;
  auto data = load_manifest(p);
  data.first.validate(true);
  return data;
}

// ---- shared experiment steps -------------------------------------------------

void write_eval_outputs(const CheckpointEvaluation& ev, const fs::path& dir, const std::string& prefix,
                        const std::vector<std::size_t>& levels) {
  write_report_json(dir / (prefix + "report.json"), ev.report.fused);
  write_curve_csv(dir / (prefix + "curve.csv"), ev.report.fused.curve);
  write_report_json(dir / (prefix + "composition_report.json"), ev.report.composition);
  write_curve_csv(dir / (prefix + "composition_curve.csv"), ev.report.composition.curve);
  write_weight_log(dir / (prefix + "weights.csv"), ev.scores.weights, levels);
}

struct ExperimentResult {
  TrainResult train;
  CheckpointEvaluation test;
};

// Trains under `dir`, then evaluates the best-validation checkpoint on test.
ExperimentResult run_experiment(const TrainConfig& cfg, const LabelSpace& labels, const DatasetManifest& manifest,
                                const fs::path& dir) {
  ExperimentResult r;
  TrainIO io{dir, say, true};
  r.train = train(cfg, labels, manifest, io);
  r.test = evaluate_checkpoint(r.train.best_checkpoint, manifest, Split::test);
  write_eval_outputs(r.test, dir, "test_", cfg.model.backbone.levels);
  say("test: S " + std::to_string(r.test.report.fused.S) + " U " + std::to_string(r.test.report.fused.U) + " AUC " +
      std::to_string(r.test.report.fused.AUC) + " HM " + std::to_string(r.test.report.fused.HM) +
      " (composition only HM " + std::to_string(r.test.report.composition.HM) + ")");
  return r;
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-level feature aggregation with focus-consistent constraints for compositional zero-shot learning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  std::string out_root, run_dir;
  app.add_option("--output-root", out_root, "Root for run directories (default $FOMA_OUTPUT_ROOT, else ./runs)");
  app.add_option("--run-dir", run_dir, "Exact run directory instead of a timestamped one");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render the synthetic shapes-and-colors dataset");
  SyntheticSpec spec;
  gen->add_option("--attrs", spec.n_attrs, "Number of attributes (fill styles)")->capture_default_str();
  gen->add_option("--objs", spec.n_objs, "Number of objects (shapes)")->capture_default_str();
  gen->add_option("--seen-fraction", spec.seen_fraction, "Fraction of pairs that are seen")->capture_default_str();
  gen->add_option("--images-per-pair", spec.images_per_pair, "Training images per seen pair")->capture_default_str();
  gen->add_option("--image-size", spec.image_size, "Image side in pixels")->capture_default_str();
  gen->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "Train and evaluate the best-validation checkpoint on test");
  std::string data_path;
  ConfigFlags train_flags;
  tr->add_option("--data", data_path, "Dataset directory or manifest.tsv")->required();
  train_flags.add_to(tr);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  std::string ckpt, split_name = "test";
  std::size_t grid = 0;
  ev->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_path, "Dataset directory or manifest.tsv")->required();
  ev->add_option("--split", split_name, "train | val | test")->capture_default_str();
  ev->add_option("--grid", grid, "Evenly spaced bias grid of this many points instead of exact thresholds");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and evaluate a grid of ablation cells");
  ConfigFlags ablate_flags;
  std::string strategies = "learned,standard,mean,random", poolings = "attention,gap", focus_modes = "on,off",
              level_sets = "1,2,3";
  ab->add_option("--data", data_path, "Dataset directory or manifest.tsv")->required();
  ab->add_option("--strategies", strategies, "Comma-separated strategies")->capture_default_str();
  ab->add_option("--poolings", poolings, "Comma-separated pooling kinds")->capture_default_str();
  ab->add_option("--focus", focus_modes, "Comma-separated focus modes")->capture_default_str();
  ab->add_option("--level-sets", level_sets, "Level subsets separated by ';', e.g. \"3;2,3;1,2,3\"")->capture_default_str();
  ablate_flags.add_to(ab);

  // sweep
  auto* sw = app.add_subcommand("sweep", "Train once per value of alpha or tau");
  ConfigFlags sweep_flags;
  std::string param, values;
  sw->add_option("--data", data_path, "Dataset directory or manifest.tsv")->required();
  sw->add_option("--param", param, "alpha | tau")->required()->check(CLI::IsMember({"alpha", "tau"}));
  sw->add_option("--values", values, "Comma-separated values")->required();
  sweep_flags.add_to(sw);

  // plot-weights
  auto* pw = app.add_subcommand("plot-weights", "Scatter of per-branch aggregation weights");
  std::string weight_log;
  pw->add_option("--log", weight_log, "Weight log CSV (sample,branch,level,weight)")->check(CLI::ExistingFile);
  pw->add_option("--checkpoint", ckpt, "Checkpoint (with --data) instead of a log")->check(CLI::ExistingFile);
  pw->add_option("--data", data_path, "Dataset directory or manifest.tsv");
  pw->add_option("--split", split_name, "Split to score with --checkpoint")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  const std::vector<std::string> args(argv + 1, argv + argc);
  try {
    if (gen->parsed()) {
      const RunDir run = open_run("gen-data", out_root, run_dir, args);
      write_header(run, {{"attrs", spec.n_attrs}, {"objs", spec.n_objs}, {"seen_fraction", spec.seen_fraction},
                         {"images_per_pair", spec.images_per_pair}, {"image_size", spec.image_size}}, spec.seed);
      const DatasetManifest m = generate_synthetic(spec, run.path / "data");
      write_file_manifest(run);
      say("wrote " + std::to_string(m.records.size()) + " images");
      std::cout << (run.path / "data" / kManifestName).string() << std::endl;
    } else if (tr->parsed()) {
      const auto [labels, manifest] = open_data(data_path);
      const TrainConfig cfg = train_flags.build(manifest);
      const RunDir run = open_run("train", out_root, run_dir, args);
      write_header(run, cfg.to_json(), cfg.seed);
      run_experiment(cfg, labels, manifest, run.path);
      write_file_manifest(run);
      std::cout << run.path.string() << std::endl;
    } else if (ev->parsed()) {
      const auto [labels, manifest] = open_data(data_path);
      const Split split = parse_split(split_name);
      const RunDir run = open_run("eval", out_root, run_dir, args);
      const CheckpointEvaluation res =
          evaluate_checkpoint(ckpt, manifest, split, grid ? std::optional<std::size_t>(grid) : std::nullopt);
      write_header(run, res.config.to_json(), res.config.seed);
      write_eval_outputs(res, run.path, "", res.config.model.backbone.levels);
      write_file_manifest(run);
      std::cout << res.report.fused.to_json().dump() << std::endl;
    } else if (ab->parsed()) {
      const auto [labels, manifest] = open_data(data_path);
      const TrainConfig base = ablate_flags.build(manifest);
      const auto strat = split_list(strategies, ','), pool = split_list(poolings, ','),
                 focus = split_list(focus_modes, ','), lsets = split_list(level_sets, ';');
      if (strat.empty() || pool.empty() || focus.empty() || lsets.empty()) throw ConfigError("empty ablation axis");
      // Validate every cell before spending time on training.
      std::vector<TrainConfig> cells;
      for (const auto& s : strat)
        for (const auto& p : pool)
          for (const auto& f : focus)
            for (const auto& l : lsets) {
              TrainConfig c = base;
              c.set("strategy", s);
              c.set("pooling", p);
              c.set("focus_loss", f);
              c.set("levels", l);
              c.set("seed", std::to_string(base.seed + cells.size()));
              c.validate();
              cells.push_back(c);
            }
      const RunDir run = open_run("ablate", out_root, run_dir, args);
      write_header(run, {{"base", base.to_json()}, {"cells", cells.size()}}, base.seed);
      std::ofstream csv(run.path / "ablation.csv");
      csv << "cell,strategy,pooling,focus,levels,seed,S,U,AUC,HM\n";
      for (std::size_t i = 0; i < cells.size(); ++i) {
        const nlohmann::json cj = cells[i].to_json();
        say("cell " + std::to_string(i + 1) + "/" + std::to_string(cells.size()) + ": " + cj["strategy"].get<std::string>() +
            " " + cj["pooling"].get<std::string>() + " focus " + cj["focus_loss"].get<std::string>() + " levels " +
            cj["levels"].get<std::string>());
        char name[32];
        std::snprintf(name, sizeof name, "cell_%03zu", i);
        const ExperimentResult r = run_experiment(cells[i], labels, manifest, run.path / name);
        const EvalReport& rep = r.test.report.fused;
        csv << i << ',' << cj["strategy"].get<std::string>() << ',' << cj["pooling"].get<std::string>() << ','
            << cj["focus_loss"].get<std::string>() << ",\"" << cj["levels"].get<std::string>() << "\","
            << cells[i].seed << ',' << fmt(rep.S) << ',' << fmt(rep.U) << ',' << fmt(rep.AUC) << ',' << fmt(rep.HM)
            << '\n';
        csv.flush();
      }
      if (!csv) throw RuntimeFailure("failed writing ablation.csv");
      csv.close();
      write_file_manifest(run);
      std::cout << (run.path / "ablation.csv").string() << std::endl;
    } else if (sw->parsed()) {
      const auto [labels, manifest] = open_data(data_path);
      const TrainConfig base = sweep_flags.build(manifest);
      const auto vals = split_list(values, ',');
      if (vals.empty()) throw ConfigError("--values is empty");
      std::vector<TrainConfig> cfgs;
      for (const auto& v : vals) {
        TrainConfig c = base;
        c.set(param, v);
        c.validate();
        cfgs.push_back(c);
      }
      const RunDir run = open_run("sweep", out_root, run_dir, args);
      write_header(run, {{"base", base.to_json()}, {"param", param}, {"values", vals}}, base.seed);
      std::ofstream csv(run.path / "sweep.csv");
      csv << "param,value,S,U,AUC,HM\n";
      PlotSeries hm, auc;
      hm.name = "HM";
      hm.color = "#d62728";
      auc.name = "AUC";
      for (std::size_t i = 0; i < cfgs.size(); ++i) {
        say(param + " = " + vals[i]);
        const ExperimentResult r = run_experiment(cfgs[i], labels, manifest, run.path / (param + "_" + vals[i]));
        const EvalReport& rep = r.test.report.fused;
        const double x = param == "alpha" ? cfgs[i].alpha : cfgs[i].model.tau;
        csv << param << ',' << fmt(x) << ',' << fmt(rep.S) << ',' << fmt(rep.U) << ',' << fmt(rep.AUC) << ','
            << fmt(rep.HM) << '\n';
        hm.x.push_back(x);
        hm.y.push_back(rep.HM);
        auc.x.push_back(x);
        auc.y.push_back(rep.AUC);
      }
      if (!csv) throw RuntimeFailure("failed writing sweep.csv");
      csv.close();
      PlotSpec ps;
      ps.title = "Test HM and AUC against " + param;
      ps.xlabel = param;
      ps.ylabel = "score";
      ps.log_x = param == "tau";
      write_svg(run.path / "sweep.svg", ps, {hm, auc});
      write_file_manifest(run);
      std::cout << (run.path / "sweep.csv").string() << std::endl;
    } else if (pw->parsed()) {
      if (weight_log.empty() == ckpt.empty()) throw ConfigError("give either --log or --checkpoint with --data");
      const RunDir run = open_run("plot-weights", out_root, run_dir, args);
      fs::path log_path = weight_log;
      if (!ckpt.empty()) {
        if (data_path.empty()) throw ConfigError("--checkpoint needs --data");
        const auto [labels, manifest] = open_data(data_path);
        const CheckpointEvaluation res = evaluate_checkpoint(ckpt, manifest, parse_split(split_name));
        write_header(run, res.config.to_json(), res.config.seed);
        log_path = run.path / "weights.csv";
        write_weight_log(log_path, res.scores.weights, res.config.model.backbone.levels);
      } else {
        write_header(run, {{"log", weight_log}}, 0);
      }
      const auto points = weight_points(read_weight_log(log_path));
      plot_weight_scatter(points, run.path / "weights_scatter");
      write_file_manifest(run);
      std::cout << (run.path / "weights_scatter.svg").string() << std::endl;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << std::endl;
    return 1;
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << std::endl;
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << std::endl;
    return 1;
  } catch (const TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
