#pragma once

// Command-line front end. `run_cli` never throws: failures print one JSON
// error record to stderr (and to <out>/error.json when an output directory
// is known) and map to exit codes 2 (usage/config), 3 (training aborted) or
// 1 (anything else).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "qdr/trainer.hpp"

namespace qdr {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitAborted = 3;

namespace cli_detail {

struct Failure {
  int code;
  json record;
};

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

inline void add_common(CLI::App* sub, Common& c, bool with_config = true) {
  if (with_config) sub->add_option("--config", c.config, "flat key=value config file");
  sub->add_option("--out", c.out, "output directory")->required();
  sub->add_option("--set", c.sets, "override a config key (key=value), repeatable");
  sub->add_option("--seed", c.seed, "seed override");
  sub->add_flag("--force", c.force, "overwrite an existing manifest");
}

inline TrainConfig load_config(const Common& c) {
  TrainConfig cfg;
  if (!c.config.empty()) cfg.apply(read_key_values(c.config));
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(s, "--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

inline void prepare_out(const Common& c) {
  const fs::path out(c.out);
  fs::create_directories(out);
  if (fs::exists(out / "manifest.json") && !c.force)
    throw Failure{kExitConfig,
                  {{"error", "manifest_exists"},
                   {"message", "refusing to overwrite " + (out / "manifest.json").string() +
                                   " without --force"},
                   {"path", (out / "manifest.json").string()}}};
}

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot read '" + p.string() + "'");
  return json::parse(in);
}

inline void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2) << '\n'; }

inline json command_manifest(const std::string& cmd, const std::vector<std::string>& argv) {
  return {{"command", cmd}, {"argv", argv}, {"environment", environment_fingerprint()}};
}

}  // namespace cli_detail

/// Entry point; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  using namespace cli_detail;
  std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Quantization-aware distilled image restoration toolkit"};
  app.require_subcommand(1);

  Common tt, ts, ev, ab, al, ex;
  std::string ts_regime, ts_teacher, ts_manifest;
  auto* c_tt = app.add_subcommand("train-teacher", "train the full-precision model");
  add_common(c_tt, tt);
  std::string tt_manifest;
  c_tt->add_option("--from-manifest", tt_manifest, "re-run a previous run from its manifest");

  auto* c_ts = app.add_subcommand("train-student", "train a quantized student (ptq, qat, qat_kd_fixed, qdr)");
  add_common(c_ts, ts);
  c_ts->add_option("--regime", ts_regime, "training regime");
  c_ts->add_option("--teacher", ts_teacher, "teacher checkpoint (FP32)");
  c_ts->add_option("--from-manifest", ts_manifest, "re-run a previous run from its manifest");

  std::string ev_manifest, ev_ckpt;
  auto* c_ev = app.add_subcommand("eval", "evaluate a checkpoint on the held-out set");
  add_common(c_ev, ev);
  c_ev->add_option("--manifest", ev_manifest, "run manifest (uses its final checkpoint and config)");
  c_ev->add_option("--checkpoint", ev_ckpt, "checkpoint to evaluate (with --config)");

  std::string ab_teacher;
  std::vector<std::string> ab_axes;
  auto* c_ab = app.add_subcommand("ablate", "train one cell per axis value and tabulate PSNR/SSIM");
  add_common(c_ab, ab);
  c_ab->add_option("--axis", ab_axes, "key=v1,v2,... (repeatable; cells are the union of axes)")
      ->required();
  c_ab->add_option("--teacher", ab_teacher, "teacher checkpoint");

  std::string al_student, al_teacher;
  auto* c_al = app.add_subcommand("report-alignment", "student vs teacher feature alignment");
  add_common(c_al, al);
  c_al->add_option("--student", al_student, "student checkpoint")->required();
  c_al->add_option("--teacher", al_teacher, "teacher checkpoint")->required();

  std::string ex_manifest;
  auto* c_ex = app.add_subcommand("export", "write per-layer quantization parameters");
  add_common(c_ex, ex, false);
  c_ex->add_option("--manifest", ex_manifest, "run manifest of a quantized run")->required();

  std::string out_dir;
  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      json rec{{"error", "usage"}, {"message", e.what()}};
      // Name the missing option when CLI11 reports one.
      const std::string msg = e.what();
      if (auto p = msg.find("--"); p != std::string::npos && msg.find("required") != std::string::npos)
        rec["missing_argument"] = msg.substr(p, msg.find_first_of(" \n", p) - p);
      throw Failure{kExitConfig, rec};
    }

    if (c_tt->parsed()) {
      out_dir = tt.out;
      prepare_out(tt);
      RunResult r = [&] {
        if (!tt_manifest.empty()) return rerun_from_manifest(tt_manifest, tt.out);
        TrainConfig cfg = load_config(tt);
        if (cfg.regime != Regime::fp32)
          throw ConfigError("regime", "train-teacher trains regime fp32, config says " +
                                          std::string(to_string(cfg.regime)));
        return train(cfg, tt.out);
      }();
      out << r.manifest["final_metrics"].dump() << '\n';
      return kExitOk;
    }

    if (c_ts->parsed()) {
      out_dir = ts.out;
      prepare_out(ts);
      RunResult r = [&] {
        if (!ts_manifest.empty()) return rerun_from_manifest(ts_manifest, ts.out);
        TrainConfig cfg = load_config(ts);
        if (!ts_regime.empty()) cfg.set("regime", ts_regime);
        if (cfg.regime == Regime::fp32)
          throw ConfigError("regime", "train-student needs a quantized regime; use train-teacher for fp32");
        if (cfg.regime == Regime::qdr) cfg.balancer = Balancer::lmr;
        if (cfg.needs_teacher() && ts_teacher.empty())
          throw Failure{kExitConfig,
                        {{"error", "missing_argument"},
                         {"missing_argument", "--teacher"},
                         {"message", std::string("regime ") + to_string(cfg.regime) +
                                         " requires --teacher"}}};
        std::optional<fs::path> teacher;
        if (!ts_teacher.empty()) teacher = ts_teacher;
        return train(cfg, ts.out, teacher);
      }();
      out << r.manifest["final_metrics"].dump() << '\n';
      return kExitOk;
    }

    if (c_ev->parsed()) {
      out_dir = ev.out;
      prepare_out(ev);
      TrainConfig cfg;
      fs::path ckpt;
      if (!ev_manifest.empty()) {
        const json m = read_json(ev_manifest);
        cfg = train_config_from_json(m.at("config"));
        ckpt = fs::path(ev_manifest).parent_path() / m.at("final_checkpoint").get<std::string>();
        for (const auto& s : ev.sets) {
          const auto eq = s.find('=');
          if (eq == std::string::npos) throw ConfigError(s, "--set expects key=value");
          cfg.set(s.substr(0, eq), s.substr(eq + 1));
        }
        if (ev.seed) cfg.seed = *ev.seed;
      } else {
        if (ev_ckpt.empty())
          throw Failure{kExitConfig,
                        {{"error", "missing_argument"},
                         {"missing_argument", "--manifest or --checkpoint"},
                         {"message", "eval needs --manifest or --checkpoint"}}};
        cfg = load_config(ev);
        ckpt = ev_ckpt;
      }
      auto model = load_checkpoint<float>(ckpt).model;
      const EvalReport rep = evaluate(model, make_eval_set(cfg), cfg.eval_luma);
      json m = command_manifest("eval", args);
      m["config"] = to_json(cfg);
      m["checkpoint"] = fs::absolute(ckpt).string();
      m["final_metrics"] = to_json(rep);
      write_json(fs::path(ev.out) / "manifest.json", m);
      std::ofstream csv(fs::path(ev.out) / "metrics.csv", std::ios::app);
      csv << "checkpoint,psnr_db,ssim,n_samples,psnr_infinite\n"
          << ckpt.string() << ',' << rep.psnr_db << ',' << rep.ssim << ',' << rep.n_samples << ','
          << (rep.psnr_infinite ? 1 : 0) << '\n';
      out << m["final_metrics"].dump() << '\n';
      return kExitOk;
    }

    if (c_ab->parsed()) {
      out_dir = ab.out;
      prepare_out(ab);
      const TrainConfig base = load_config(ab);
      std::vector<AblationCell> cells;
      for (const auto& a : ab_axes) {
        const auto eq = a.find('=');
        if (eq == std::string::npos) throw ConfigError(a, "--axis expects key=v1,v2,...");
        std::vector<std::string> vals;
        std::stringstream ss(a.substr(eq + 1));
        for (std::string v; std::getline(ss, v, ',');) vals.push_back(v);
        for (auto& c : ablation_axis(base, a.substr(0, eq), vals)) cells.push_back(std::move(c));
      }
      for (const auto& c : cells) {
        c.config.validate();
        if (c.config.needs_teacher() && ab_teacher.empty())
          throw Failure{kExitConfig,
                        {{"error", "missing_argument"},
                         {"missing_argument", "--teacher"},
                         {"message", "ablation cell " + c.name + " requires --teacher"}}};
      }
      std::optional<fs::path> teacher;
      if (!ab_teacher.empty()) teacher = ab_teacher;
      const auto rows = ablate(cells, ab.out, teacher);
      json m = command_manifest("ablate", args);
      m["base_config"] = to_json(base);
      json cells_j = json::array();
      for (const auto& r : rows)
        cells_j.push_back({{"cell", r.name}, {"run_dir", r.run_dir.string()}, {"metrics", to_json(r.report)}});
      m["cells"] = cells_j;
      m["table"] = "ablation.csv";
      write_json(fs::path(ab.out) / "manifest.json", m);
      out << cells_j.dump() << '\n';
      return kExitOk;
    }

    if (c_al->parsed()) {
      out_dir = al.out;
      prepare_out(al);
      const TrainConfig cfg = load_config(al);
      auto student = load_checkpoint<float>(al_student).model;
      auto teacher = load_checkpoint<float>(al_teacher).model;
      teacher.detach_quantizers();
      const auto eval_set = make_eval_set(cfg);
      std::vector<Tensor<float>> probes;
      for (const auto& b : eval_set) probes.push_back(b.degraded);
      const auto sites = alignment_report(student, teacher, stack(probes));
      write_alignment(fs::path(al.out) / "alignment", sites);
      json m = command_manifest("report-alignment", args);
      m["config"] = to_json(cfg);
      m["student"] = fs::absolute(al_student).string();
      m["teacher"] = fs::absolute(al_teacher).string();
      m["summary"] = "alignment/summary.json";
      write_json(fs::path(al.out) / "manifest.json", m);
      out << read_json(fs::path(al.out) / "alignment" / "summary.json").dump() << '\n';
      return kExitOk;
    }

    if (c_ex->parsed()) {
      out_dir = ex.out;
      prepare_out(ex);
      const json m = read_json(ex_manifest);
      const fs::path ckpt =
          fs::path(ex_manifest).parent_path() / m.at("final_checkpoint").get<std::string>();
      auto model = load_checkpoint<float>(ckpt).model;
      if (!model.quant_config())
        throw ConfigError("regime", "export needs a quantized run; '" + ex_manifest +
                                        "' has no quantizers");
      const json exp = export_quantization(model);
      write_json(fs::path(ex.out) / "quant_export.json", exp);
      json cm = command_manifest("export", args);
      cm["source_manifest"] = fs::absolute(ex_manifest).string();
      cm["export"] = "quant_export.json";
      cm["layer_count"] = exp["layers"].size();
      write_json(fs::path(ex.out) / "manifest.json", cm);
      out << json{{"layers", exp["layers"].size()}}.dump() << '\n';
      return kExitOk;
    }
    throw Failure{kExitConfig, {{"error", "usage"}, {"message", "no subcommand"}}};
  } catch (Failure& f) {
    f.record["exit_code"] = f.code;
    err << f.record.dump() << '\n';
    if (!out_dir.empty() && fs::is_directory(out_dir)) write_json(fs::path(out_dir) / "error.json", f.record);
    return f.code;
  } catch (const TrainingAborted& e) {
    json rec{{"error", "training_aborted"},
             {"message", e.what()},
             {"step", e.step()},
             {"last_checkpoint", e.last_good_checkpoint().string()},
             {"exit_code", kExitAborted}};
    err << rec.dump() << '\n';
    if (!out_dir.empty()) write_json(fs::path(out_dir) / "error.json", rec);
    return kExitAborted;
  } catch (const ConfigError& e) {
    json rec{{"error", "config"}, {"message", e.what()}, {"key", e.key()}, {"exit_code", kExitConfig}};
    err << rec.dump() << '\n';
    if (!out_dir.empty() && fs::is_directory(out_dir)) write_json(fs::path(out_dir) / "error.json", rec);
    return kExitConfig;
  } catch (const std::exception& e) {
    json rec{{"error", "runtime"}, {"message", e.what()}, {"exit_code", kExitFailure}};
    err << rec.dump() << '\n';
    if (!out_dir.empty() && fs::is_directory(out_dir)) write_json(fs::path(out_dir) / "error.json", rec);
    return kExitFailure;
  }
}

}  // namespace qdr
