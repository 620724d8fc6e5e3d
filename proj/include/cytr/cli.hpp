#pragma once

// Command-line surface. Subcommands:
//   synth               generate a synthetic two-modality dataset
//   train               optimize a model on a manifest
//   eval                cross-modal retrieval metrics from a checkpoint
//   gradcheck           finite-difference audit of the full objective
//   export-embeddings   dump a split's retrieval rows as CSV
//
// Flags are `--key value` with the keys of RunConfig; `--preset name` and
// `--config path` load value bundles first. Every run echoes its effective
// configuration (seed included) into its output directory for replay.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "cytr/config.hpp"
#include "cytr/data_io.hpp"
#include "cytr/evaluator.hpp"
#include "cytr/gradcheck_suite.hpp"
#include "cytr/pipeline.hpp"
#include "cytr/trainer.hpp"

namespace cytr::cli {

inline constexpr const char* kUsage =
    "usage: cytrans <synth|train|eval|gradcheck|export-embeddings> [--preset name]\n"
    "               [--config file] [--key value ...]\n";

namespace detail {

inline RunConfig parse_config(const std::vector<std::string>& args, std::size_t begin) {
  RunConfig cfg;
  std::vector<std::pair<std::string, std::string>> flags;
  for (std::size_t i = begin; i < args.size(); i += 2) {
    const std::string& key = args[i];
    if (key.size() < 3 || key.substr(0, 2) != "--")
      throw ConfigError("expected --key, got '" + key + "'");
    if (i + 1 >= args.size()) throw ConfigError("flag " + key + " is missing a value");
    flags.push_back({key.substr(2), args[i + 1]});
  }
  for (const auto& [key, value] : flags)
    if (key == "preset") cfg.apply_preset(value);
  for (const auto& [key, value] : flags)
    if (key == "config") cfg.load_file(value);
  for (const auto& [key, value] : flags)
    if (key != "preset" && key != "config") cfg.assign(key, value);
  return cfg;
}

template <typename S>
Model<S> build_model(const RunConfig& cfg, const Manifest& manifest) {
  const int classes = manifest.num_identities();
  if (classes < 2) throw ContractError("manifest holds fewer than two identities");
  return Model<S>(cfg.model_dims(std::size_t(classes)), variant_from_string(cfg.str("variant")),
                  cfg.seed());
}

inline std::string checkpoint_stem(const RunConfig& cfg) {
  if (!cfg.str("checkpoint").empty()) return cfg.str("checkpoint");
  return (std::filesystem::path(cfg.str("out_dir")) / "checkpoint_final").string();
}

inline void ensure_out_dir(const RunConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(cfg.str("out_dir"), ec);
  if (ec) throw IoError("cannot create output directory: " + cfg.str("out_dir"));
}

inline int cmd_synth(const RunConfig& cfg) {
  Manifest manifest = synth_generate(cfg.synthetic_spec(), cfg.str("data_root"));
  cfg.echo((std::filesystem::path(cfg.str("data_root")) / "config.echo").string());
  std::cout << "wrote " << manifest.records.size() << " samples under " << cfg.str("data_root")
            << "\n";
  return 0;
}

inline int cmd_train(const RunConfig& cfg) {
  const std::string root = cfg.str("data_root");
  Manifest manifest = Manifest::read_csv((std::filesystem::path(root) / "manifest.csv").string());
  Model<f32> model = build_model<f32>(cfg, manifest);
  ensure_out_dir(cfg);
  cfg.echo((std::filesystem::path(cfg.str("out_dir")) / "config.echo").string());
  TrainResult result = train(model, manifest, root, cfg.str("out_dir"), cfg.train_options<f32>());
  std::cout << "trained " << result.steps << " steps\n"
            << "checkpoint: " << result.checkpoint_stem << "\n"
            << "loss log:   " << result.loss_csv_path << "\n";
  return 0;
}

inline int cmd_eval(const RunConfig& cfg) {
  const std::string root = cfg.str("data_root");
  Manifest manifest = Manifest::read_csv((std::filesystem::path(root) / "manifest.csv").string());
  Model<f32> model = build_model<f32>(cfg, manifest);
  load_model_state(model, load_checkpoint<f32>(checkpoint_stem(cfg)));

  EmbeddingSet queries = embed(model, manifest, Split::query, root);
  EmbeddingSet gallery = embed(model, manifest, Split::gallery, root);
  const Metric metric = metric_from_string(cfg.str("metric"));

  std::vector<EvalReport> reports;
  const std::string protocol = cfg.str("protocol");
  if (protocol == "multi-shot" || protocol == "both")
    reports.push_back(cmc_map(queries, gallery, metric));
  if (protocol == "single-shot" || protocol == "both")
    reports.push_back(single_shot_eval(queries, gallery, cfg.integer("draws"), cfg.seed(), metric));
  if (reports.empty()) throw ConfigError("unknown protocol: " + protocol);

  ensure_out_dir(cfg);
  for (const auto& r : reports) std::cout << format_report(r) << "\n";
  write_report_csv((std::filesystem::path(cfg.str("out_dir")) / "report.csv").string(), reports);
  cfg.echo((std::filesystem::path(cfg.str("out_dir")) / "config.echo").string());
  return 0;
}

inline int cmd_gradcheck(const RunConfig& cfg) {
  ensure_out_dir(cfg);
  cfg.echo((std::filesystem::path(cfg.str("out_dir")) / "config.echo").string());
  const auto rows = full_objective_gradcheck();
  bool ok = true;
  std::printf("%-8s %14s\n", "loss", "max_rel_err");
  for (const auto& row : rows) {
    std::printf("%-8s %14.3e\n", row.loss_name.c_str(), row.max_rel_err);
    ok = ok && row.max_rel_err < 1e-3;
  }
  std::printf("gradcheck %s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : 2;
}

inline int cmd_export(const RunConfig& cfg) {
  const std::string root = cfg.str("data_root");
  Manifest manifest = Manifest::read_csv((std::filesystem::path(root) / "manifest.csv").string());
  Model<f32> model = build_model<f32>(cfg, manifest);
  load_model_state(model, load_checkpoint<f32>(checkpoint_stem(cfg)));

  const Split split = split_from_string(cfg.str("split"));
  EmbeddingSet set = embed(model, manifest, split, root);
  ensure_out_dir(cfg);
  const std::string path =
      (std::filesystem::path(cfg.str("out_dir")) / ("embeddings_" + cfg.str("split") + ".csv"))
          .string();
  export_embeddings_csv(path, set);
  cfg.echo((std::filesystem::path(cfg.str("out_dir")) / "config.echo").string());
  std::cout << "wrote " << set.size() << " rows to " << path << "\n";
  return 0;
}

}  // namespace detail

inline int run(const std::vector<std::string>& args) {
  try {
    if (args.empty()) {
      std::cerr << kUsage;
      return 1;
    }
    const std::string& command = args[0];
    RunConfig cfg = detail::parse_config(args, 1);
    if (command == "synth") return detail::cmd_synth(cfg);
    if (command == "train") return detail::cmd_train(cfg);
    if (command == "eval") return detail::cmd_eval(cfg);
    if (command == "gradcheck") return detail::cmd_gradcheck(cfg);
    if (command == "export-embeddings") return detail::cmd_export(cfg);
    std::cerr << "unknown command: " << command << "\n" << kUsage;
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.push_back(argv[i]);
  return run(args);
}

}  // namespace cytr::cli
