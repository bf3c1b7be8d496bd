#include "pvseg/cli.hpp"

#include <csignal>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pvseg/data_synth.hpp"
#include "pvseg/errors.hpp"
#include "pvseg/evaluation.hpp"
#include "pvseg/model.hpp"
#include "pvseg/service.hpp"
#include "pvseg/training.hpp"

namespace pvseg {

namespace fs = std::filesystem;

namespace {

nlohmann::json read_json_file(const fs::path& path, const char* field) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path.string(), field);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what(), field);
  }
}

// {"model": {"preset": "desk" | "default", ...overrides}, "train": {...}}
ModelConfig model_config_from(const nlohmann::json& j) {
  const auto preset = j.value("preset", std::string("desk"));
  ModelConfig cfg;
  if (preset == "desk") {
    cfg = desk_model_config();
  } else if (preset != "default") {
    throw ConfigError("model preset must be desk or default", "model.preset");
  }
  from_json(j, cfg);
  cfg.validate();
  return cfg;
}

HttpService* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int run_cli(int argc, char** argv) { return run_cli(argc, argv, std::cout, std::cerr); }

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Promptable video segmentation on synthetic clips"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_config;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--config", gen_config, "JSON dataset recipe (defaults apply to missing keys)");
  gen->add_option("--seed", gen_seed, "Generator seed")->required();
  gen->add_option("--out", gen_out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a model");
  std::string tr_config;
  std::string tr_data;
  std::string tr_out;
  std::optional<int> tr_steps;
  std::optional<std::uint64_t> tr_seed;
  tr->add_option("--config", tr_config, "JSON with optional 'model' and 'train' sections");
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--out", tr_out, "Directory for checkpoints and metrics.ndjson")->required();
  tr->add_option("--steps", tr_steps, "Override the number of optimisation steps");
  tr->add_option("--seed", tr_seed, "Override the training seed");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_mode;
  std::string ev_ckpt;
  std::string ev_data;
  std::string ev_report;
  std::string ev_prompt = "3-click";
  EvalConfig ev_cfg;
  int ev_object = 0;
  ev->add_option("--mode", ev_mode, "online | offline | semivos")
      ->required()
      ->check(CLI::IsMember({"online", "offline", "semivos"}));
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--clicks", ev_cfg.n_click, "Clicks per interaction (N_click)")->check(CLI::PositiveNumber);
  ev->add_option("--frames", ev_cfg.n_frame, "Maximum online pauses (N_frame)")->check(CLI::NonNegativeNumber);
  ev->add_option("--passes", ev_cfg.n_pass, "Offline passes (N_pass)")->check(CLI::PositiveNumber);
  ev->add_option("--prompt", ev_prompt, "Semi-VOS prompt: 3-click | box | gt-mask")
      ->check(CLI::IsMember({"3-click", "box", "gt-mask"}));
  ev->add_option("--object", ev_object, "Object id evaluated in every clip");
  ev->add_option("--report", ev_report, "Write the JSON report here");

  auto* sv = app.add_subcommand("serve", "Run the HTTP session service");
  std::string sv_ckpt;
  std::optional<int> sv_port;
  std::string sv_host = "127.0.0.1";
  std::string sv_ui;
  sv->add_option("--checkpoint", sv_ckpt, "Checkpoint file")->required();
  sv->add_option("--port", sv_port, "Port (default: PVSEG_PORT or 8080)");
  sv->add_option("--host", sv_host, "Bind address");
  sv->add_option("--ui-dir", sv_ui, "Directory with the built browser client, served at /");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  try {
    if (*gen) {
      DatasetRecipe recipe;
      if (!gen_config.empty()) recipe = read_json_file(gen_config, "config").get<DatasetRecipe>();
      const auto data = generate_dataset(recipe, gen_seed);
      const auto manifest = write_dataset(data, gen_out);
      out << "wrote " << data.size() << " clips, manifest " << manifest.string() << '\n';
    } else if (*tr) {
      nlohmann::json cfg = tr_config.empty() ? nlohmann::json::object() : read_json_file(tr_config, "config");
      const auto model_cfg = model_config_from(cfg.value("model", nlohmann::json::object()));
      auto train_cfg = cfg.value("train", nlohmann::json::object()).get<TrainConfig>();
      if (tr_steps) train_cfg.max_steps = *tr_steps;
      if (tr_seed) train_cfg.seed = *tr_seed;
      train_cfg.validate();
      const auto data = read_dataset(tr_data);
      TrainOutput output;
      output.directory = tr_out;
      output.on_step = [&out](const StepMetrics& m) {
        if (m.step % 10 == 0) {
          out << "step " << m.step << " loss " << std::fixed << std::setprecision(4) << m.total << '\n';
        }
      };
      train(model_cfg, train_cfg, data, output);
      out << "checkpoint " << (fs::path(tr_out) / "checkpoint.pt").string() << '\n';
    } else if (*ev) {
      ev_cfg.validate();
      auto model = load_checkpoint(ev_ckpt);
      const auto data = read_dataset(ev_data);
      ModelTracker tracker(model);
      const auto report = evaluate_dataset(tracker, data, protocol_from_string(ev_mode), ev_cfg,
                                           ev_object, semivos_prompt_from_string(ev_prompt));
      const auto j = to_json(report);
      if (!ev_report.empty()) std::ofstream(ev_report) << j.dump(2) << '\n';
      out << std::left << std::setw(10) << "mode" << std::setw(8) << "clips" << std::setw(8) << "J"
          << std::setw(8) << "F" << "J&F\n";
      out << std::setw(10) << ev_mode << std::setw(8) << report.evaluated << std::fixed
          << std::setprecision(4) << std::setw(8) << report.mean.j << std::setw(8) << report.mean.f
          << report.mean.jf << '\n';
      out << "config " << j["config"].dump() << '\n';
    } else if (*sv) {
      ServiceOptions options;
      options.host = sv_host;
      options.port = sv_port ? *sv_port : port_from_env(8080);
      options.ui_dir = sv_ui;
      auto sessions = std::make_shared<SessionManager>(load_checkpoint(sv_ckpt));
      HttpService service(sessions, options);
      const int port = service.bind();
      if (port < 0) {
        err << "error: cannot bind " << options.host << ":" << options.port << '\n';
        return kExitRuntime;
      }
      out << "listening on http://" << options.host << ":" << port << "/v1" << std::endl;
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      service.serve();
      g_service = nullptr;
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what();
    if (!e.field().empty()) err << " (" << e.field() << ")";
    err << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace pvseg
