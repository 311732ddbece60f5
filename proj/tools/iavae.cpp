// iavae: command-line driver for the synthetic experiments.
//
// Exit codes: 0 success, 1 a run or command failed, 2 bad configuration.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "iavae/checkpoint.hpp"
#include "iavae/experiments.hpp"
#include "iavae/format.hpp"
#include "iavae/stats.hpp"

namespace fs = std::filesystem;
using namespace iavae;
using namespace iavae::experiments;
using nlohmann::ordered_json;

namespace {

constexpr int kRunFailure = 1;
constexpr int kConfigError = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> jobs;
};

void add_common(CLI::App* cmd, Common& c, const std::string& seed_help) {
  cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, seed_help);
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--jobs", c.jobs, "parallel workers");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.out) cfg.out = *c.out;
  if (c.jobs) cfg.jobs = *c.jobs;
  return cfg;
}

void write_json(const fs::path& path, const ordered_json& doc) { write_text(path, doc.dump(2) + "\n"); }

InferenceModel load_model(const std::string& path, Mode expected) {
  InferenceModel m = load_checkpoint(path);
  if (m.mode() != expected)
    throw ConfigError(path + ": expected a " + std::string(mode_name(expected)) + " checkpoint");
  return m;
}

int cmd_generate(const ExperimentConfig& cfg) {
  const SyntheticDataset data = generate(cfg.dataset.n, cfg.dataset.sigma, cfg.dataset.seed);
  fs::create_directories(cfg.out);
  write_dataset(data, cfg.out / "dataset.csv", cfg.out / "dataset.json");
  write_json(cfg.out / "config.json", config_to_json(cfg));
  std::cout << "wrote " << data.size() << " points to " << (cfg.out / "dataset.csv").string() << "\n";
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& mode, const std::string& base_path,
              std::uint64_t seed, bool with_map) {
  const SyntheticDataset data = dataset_for(cfg);
  std::optional<PosteriorReference> ref;
  if (with_map) ref = build_reference(data, cfg.posterior, cfg.jobs);
  const PosteriorReference* rp = ref ? &*ref : nullptr;
  RunOutcome out;
  if (mode == "vae") {
    out = run_vae(data, cfg.train, seed, cfg.train.hidden_width, rp, cfg.out / "train" / std::to_string(seed) / "vae");
  } else {
    if (base_path.empty()) throw ConfigError("train --mode iavae needs --base CHECKPOINT");
    const InferenceModel base = load_model(base_path, Mode::kVae);
    const std::uint64_t base_seed = load_checkpoint_seed(base_path);
    out = run_iavae(data, cfg.train, base.encoder, base_seed, seed, rp,
                    cfg.out / "train" / std::to_string(base_seed) / std::to_string(seed));
  }
  std::cout << to_json(out.record).dump(2) << "\n";
  return out.record.status == "ok" ? 0 : kRunFailure;
}

int cmd_robustness(const ExperimentConfig& cfg, bool with_map) {
  const SyntheticDataset data = dataset_for(cfg);
  std::optional<PosteriorReference> ref;
  if (with_map) ref = build_reference(data, cfg.posterior, cfg.jobs);
  const RobustnessReport report = robustness(cfg, data, ref ? &*ref : nullptr, &std::cerr);
  std::cout << robustness_text(report);
  bool ok = true;
  for (const RobustnessRow& r : report.rows) ok = ok && r.ok;
  return ok ? 0 : kRunFailure;
}

int cmd_posterior_eval(const ExperimentConfig& cfg, const std::string& vae_path, const std::string& ia_path) {
  const SyntheticDataset data = dataset_for(cfg);
  for (std::size_t i : cfg.posterior.example_points)
    if (i >= data.size())
      throw ConfigError("posterior.example_points: index " + std::to_string(i) + " outside dataset");
  const InferenceModel vae = load_model(vae_path, Mode::kVae);
  const InferenceModel ia = load_model(ia_path, Mode::kIaVae);
  const PosteriorReference ref = build_reference(data, cfg.posterior, cfg.jobs);
  const PosteriorEvalReport report = posterior_eval(data, vae, ia, ref, cfg.train);
  const fs::path dir = cfg.out / "posterior-eval";
  write_text(dir / "summary.csv", posterior_csv(report));
  write_text(dir / "summary.txt", posterior_text(report));
  write_text(dir / "points.csv", points_csv(report));
  ordered_json j;
  j["vae"] = {{"elbo", report.vae.elbo}, {"kl", report.vae.kl}, {"d_map", report.vae.d_map}, {"r_map", report.vae.r_map}};
  j["iavae"] = {{"elbo", report.iavae.elbo},
                {"kl", report.iavae.kl},
                {"d_map", report.iavae.d_map},
                {"r_map", report.iavae.r_map}};
  j["excluded"] = report.excluded;
  j["points"] = data.size();
  write_json(dir / "summary.json", j);
  for (std::size_t i : cfg.posterior.example_points)
    write_grid(dir / ("grid_" + std::to_string(i) + ".csv"), dir / ("grid_" + std::to_string(i) + ".json"), data, i,
               vae, ia, ref, cfg.posterior);
  std::cout << posterior_text(report);
  return 0;
}

int cmd_capacity(const ExperimentConfig& cfg) {
  const SyntheticDataset data = dataset_for(cfg);
  const CapacityReport report = capacity_sweep(cfg, data, &std::cerr);
  ordered_json j;
  j["iavae"] = {{"parameters", report.iavae_parameters}, {"elbo", report.iavae_elbo}, {"runs", report.iavae_runs}};
  ordered_json best = ordered_json::array();
  for (const SweepEntry& e : report.best)
    best.push_back({{"width", e.width}, {"parameters", e.parameters}, {"seed", e.seed}, {"elbo", e.elbo}, {"kl", e.kl}});
  j["vae_best"] = best;
  write_json(cfg.out / "capacity-sweep" / "summary.json", j);
  std::printf("%-6s %-10s %-10s\n", "width", "params", "best ELBO");
  for (const SweepEntry& e : report.best) std::printf("%-6zu %-10zu %.4f\n", e.width, e.parameters, e.elbo);
  std::printf("IA-VAE %-10zu %.4f\n", report.iavae_parameters, report.iavae_elbo);
  return report.best.size() == cfg.widths.size() && !report.iavae_runs.empty() ? 0 : kRunFailure;
}

int cmd_significance(const ExperimentConfig& cfg, const std::string& records_dir) {
  const fs::path dir = records_dir.empty() ? cfg.out / "robustness" : fs::path(records_dir);
  const PairedSample pairs = pair_records(collect_records(dir));
  if (pairs.seeds.size() < 5)
    throw std::runtime_error("significance needs at least 5 paired seeds, found " + std::to_string(pairs.seeds.size()));
  const stats::ProtocolReport report = stats::paired_protocol(pairs.baseline, pairs.treatment, cfg.alpha);
  ordered_json j = stats::to_json(report);
  j["seeds"] = pairs.seeds;
  j["baseline"] = pairs.baseline;
  j["treatment"] = pairs.treatment;
  const std::string text = stats::to_text(report, "vae", "iavae");
  write_json(cfg.out / "significance" / "report.json", j);
  write_text(cfg.out / "significance" / "report.txt", text);
  std::cout << text;
  return 0;
}

int cmd_gap(const ExperimentConfig& cfg, const std::string& vae_path, const std::string& ia_path) {
  const SyntheticDataset data = dataset_for(cfg);
  const InferenceModel vae = load_model(vae_path, Mode::kVae);
  const InferenceModel ia = load_model(ia_path, Mode::kIaVae);
  const GapReport report = amortization_gap(data, vae, ia, cfg.gap, cfg.jobs);
  write_text(cfg.out / "gap" / "gap.csv", gap_csv(report));
  ordered_json j;
  j["points"] = report.points.size();
  j["mean_gap_vae"] = report.mean_gap_vae;
  j["mean_gap_iavae"] = report.mean_gap_iavae;
  j["min_gap"] = report.min_gap;
  write_json(cfg.out / "gap" / "summary.json", j);
  std::printf("mean gap  VAE %.4f  IA-VAE %.4f  (min per-point %.4f over %zu points)\n", report.mean_gap_vae,
              report.mean_gap_iavae, report.min_gap, report.points.size());
  return 0;
}

// Rebuilds the robustness tables from record files and gathers every summary
// present under the output directory.
int cmd_report(const ExperimentConfig& cfg) {
  ordered_json j;
  const fs::path rob = cfg.out / "robustness";
  if (fs::exists(rob)) {
    const RobustnessReport report = summarize_records(collect_records(rob), cfg.base_seeds);
    write_text(rob / "summary.csv", robustness_csv(report));
    write_text(rob / "summary.txt", robustness_text(report));
    ordered_json rows = ordered_json::array();
    for (const RobustnessRow& r : report.rows) {
      ordered_json row;
      row["base_seed"] = r.base_seed;
      row["ok"] = r.ok;
      if (r.ok) {
        row["vae_elbo"] = r.vae_elbo;
        row["vae_kl"] = r.vae_kl;
        row["iavae_elbo_mean"] = r.iavae_elbo_mean;
        row["iavae_elbo_std"] = r.iavae_elbo_std;
        row["iavae_kl_mean"] = r.iavae_kl_mean;
        row["iavae_kl_std"] = r.iavae_kl_std;
        row["runs"] = r.runs;
      } else {
        row["reason"] = r.reason;
      }
      rows.push_back(row);
    }
    j["robustness"] = rows;
    std::cout << robustness_text(report);
  }
  const std::pair<const char*, fs::path> parts[] = {
      {"posterior_eval", cfg.out / "posterior-eval" / "summary.json"},
      {"capacity_sweep", cfg.out / "capacity-sweep" / "summary.json"},
      {"significance", cfg.out / "significance" / "report.json"},
      {"gap", cfg.out / "gap" / "summary.json"},
  };
  for (const auto& [key, path] : parts) {
    if (!fs::exists(path)) continue;
    std::ifstream in(path);
    j[key] = ordered_json::parse(in);
  }
  if (j.empty()) throw std::runtime_error("nothing to report under " + cfg.out.string());
  write_json(cfg.out / "report.json", j);
  std::cout << "wrote " << (cfg.out / "report.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance-adaptive amortized inference on the synthetic benchmark"};
  app.require_subcommand(1);

  Common c;
  std::string mode = "vae";
  std::string base_path;
  std::string vae_path;
  std::string ia_path;
  std::string records_dir;
  bool with_map = true;

  CLI::App* gen = app.add_subcommand("generate", "write dataset.csv and dataset.json");
  add_common(gen, c, "dataset seed");
  std::optional<std::size_t> n;
  gen->add_option("-N,--points", n, "number of points");

  CLI::App* tr = app.add_subcommand("train", "train one VAE or IA-VAE run");
  add_common(tr, c, "training seed (VAE: base seed, IA-VAE: run seed)");
  tr->add_option("--mode", mode, "vae or iavae")->check(CLI::IsMember({"vae", "iavae"}));
  tr->add_option("--base", base_path, "base VAE checkpoint for --mode iavae");
  tr->add_flag("!--no-map", with_map, "skip d_MAP / r_MAP");

  CLI::App* rob = app.add_subcommand("robustness", "base seeds x run seeds protocol");
  add_common(rob, c, "run a single base seed");
  rob->add_flag("!--no-map", with_map, "skip d_MAP / r_MAP");

  CLI::App* pe = app.add_subcommand("posterior-eval", "posterior accuracy of two checkpoints");
  add_common(pe, c, "dataset seed");
  pe->add_option("--vae", vae_path, "VAE checkpoint")->required()->check(CLI::ExistingFile);
  pe->add_option("--iavae", ia_path, "IA-VAE checkpoint")->required()->check(CLI::ExistingFile);

  CLI::App* cap = app.add_subcommand("capacity-sweep", "VAE width sweep against the IA-VAE reference");
  add_common(cap, c, "dataset seed");

  CLI::App* sig = app.add_subcommand("significance", "paired test over run records");
  add_common(sig, c, "unused");
  sig->add_option("--records", records_dir, "directory holding record.json files (default <out>/robustness)");

  CLI::App* gap = app.add_subcommand("gap", "amortization gap of two checkpoints");
  add_common(gap, c, "dataset seed");
  gap->add_option("--vae", vae_path, "VAE checkpoint")->required()->check(CLI::ExistingFile);
  gap->add_option("--iavae", ia_path, "IA-VAE checkpoint")->required()->check(CLI::ExistingFile);

  CLI::App* rep = app.add_subcommand("report", "collect summaries under the output directory");
  add_common(rep, c, "unused");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    ExperimentConfig cfg = resolve(c);
    std::uint64_t train_seed = 0;
    if (gen->parsed()) {
      if (c.seed) cfg.dataset.seed = *c.seed;
      if (n) cfg.dataset.n = *n;
    } else if (tr->parsed()) {
      train_seed = c.seed.value_or(0);
    } else if (rob->parsed()) {
      if (c.seed) cfg.base_seeds = {*c.seed};
    } else if (pe->parsed() || cap->parsed() || gap->parsed()) {
      if (c.seed) cfg.dataset.seed = *c.seed;
    }
    cfg.validate();

    if (gen->parsed()) return cmd_generate(cfg);
    if (tr->parsed()) return cmd_train(cfg, mode, base_path, train_seed, with_map);
    if (rob->parsed()) return cmd_robustness(cfg, with_map);
    if (pe->parsed()) return cmd_posterior_eval(cfg, vae_path, ia_path);
    if (cap->parsed()) return cmd_capacity(cfg);
    if (sig->parsed()) return cmd_significance(cfg, records_dir);
    if (gap->parsed()) return cmd_gap(cfg, vae_path, ia_path);
    return cmd_report(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRunFailure;
  }
}
