#pragma once

// Experiment protocols on the synthetic benchmark and their file outputs.
//
// Layout under the output directory:
//   dataset.csv, dataset.json
//   <experiment>/<base_seed>/vae/{checkpoint.json, epochs.csv, record.json}
//   <experiment>/<base_seed>/<run_seed>/{checkpoint.json, epochs.csv, record.json}
//   <experiment>/... reports (CSV + JSON/text)
// A run directory whose record.json matches the current configuration is
// reused instead of retrained, so interrupted sweeps resume.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "iavae/posterior.hpp"
#include "iavae/stats.hpp"
#include "iavae/synthetic.hpp"
#include "iavae/vae.hpp"

namespace iavae::experiments {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::size_t n = 5000;
  double sigma = 0.1;
  std::uint64_t seed = 0;
};

struct PosteriorEvalConfig {
  std::size_t grid_resolution = 400;
  double grid_lo = -5.0;
  double grid_hi = 5.0;
  std::vector<std::size_t> example_points{0, 1};
  std::size_t map_restarts = 5;
  std::size_t map_steps = 200;
  double map_lr = 1e-3;
  std::uint64_t map_seed = 0;
};

struct GapConfig {
  std::size_t steps = 300;
  double lr = 1e-2;
  std::size_t samples = 64;
  std::uint64_t seed = 777;
  std::size_t max_points = 0;  // 0: every point
};

struct ExperimentConfig {
  DatasetConfig dataset;
  TrainConfig train;
  std::vector<std::uint64_t> base_seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<std::uint64_t> run_seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<std::size_t> widths{2, 4, 6, 8, 10, 12, 14, 16, 18, 20};
  std::size_t sweep_seeds = 3;
  PosteriorEvalConfig posterior;
  GapConfig gap;
  double alpha = 0.05;
  std::size_t jobs = 1;
  std::filesystem::path out = "out";

  // Throws ConfigError.
  void validate() const;
};

// Unknown keys and wrongly typed values raise ConfigError; missing keys keep
// their defaults.
ExperimentConfig config_from_json(const nlohmann::json& doc);
nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

// The dataset described by cfg.dataset, read from <out>/dataset.csv when a
// matching file exists, generated otherwise.
SyntheticDataset dataset_for(const ExperimentConfig& cfg);

// Training seed of the IA-VAE run `run_seed` on top of base `base_seed`.
std::uint64_t iavae_train_seed(std::uint64_t base_seed, std::uint64_t run_seed);

// MAP and Laplace fit per point; shared by every model evaluated on a dataset.
struct PointReference {
  bool usable = false;  // MAP converged and the Hessian is negative definite
  MapResult map;
  LaplaceFit laplace;
};

struct PosteriorReference {
  OracleModel model;
  std::vector<PointReference> points;
  std::size_t excluded() const;
};

PosteriorReference build_reference(const SyntheticDataset& data, const PosteriorEvalConfig& cfg,
                                   std::size_t jobs = 1);

struct MapMetrics {
  double d_map = 0.0;
  double r_map = 0.0;
  std::size_t used = 0;
  std::vector<double> d_per_point;  // NaN at excluded points
  std::vector<double> r_per_point;
};

MapMetrics map_metrics(const SyntheticDataset& data, const InferenceModel& model,
                       const PosteriorReference& ref);

struct RunRecord {
  std::string mode;
  std::uint64_t base_seed = 0;
  std::optional<std::uint64_t> run_seed;
  std::size_t hidden_width = 2;
  std::string status = "ok";
  std::string error;
  double elbo = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  double d_map = 0.0;
  double r_map = 0.0;
  std::size_t map_excluded = 0;
  std::size_t encoder_parameters = 0;
  std::size_t hypernet_parameters = 0;
  std::size_t embedding_parameters = 0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  bool stopped_early = false;
  double wall_ms = 0.0;
  std::string fingerprint;
};

nlohmann::ordered_json to_json(const RunRecord& r);
RunRecord record_from_json(const nlohmann::json& j);

// Counts every trainable leaf of the model by walking its tensors.
std::size_t count_trainable(const InferenceModel& model);

struct RunOutcome {
  RunRecord record;
  InferenceModel model;
  std::vector<EpochMetrics> history;  // empty when reused from disk
  bool reused = false;
};

// Trains (or reloads) one run. `dir` empty: nothing is written. A `ref` of
// nullptr skips d_MAP / r_MAP.
RunOutcome run_vae(const SyntheticDataset& data, const TrainConfig& cfg, std::uint64_t base_seed,
                   std::size_t hidden_width, const PosteriorReference* ref,
                   const std::filesystem::path& dir);
RunOutcome run_iavae(const SyntheticDataset& data, const TrainConfig& cfg, const EncoderParams& base,
                     std::uint64_t base_seed, std::uint64_t run_seed, const PosteriorReference* ref,
                     const std::filesystem::path& dir);

void write_epochs_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history);

// Runs tasks 0..n-1 on `jobs` threads. Exceptions from tasks are rethrown
// after all workers finish (the first one by task index).
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& task);

// Robustness summary: one row per base seed.
struct RobustnessRow {
  std::uint64_t base_seed = 0;
  bool ok = true;
  std::string reason;
  double vae_elbo = 0.0;
  double vae_kl = 0.0;
  double iavae_elbo_mean = 0.0;
  double iavae_elbo_std = 0.0;
  double iavae_kl_mean = 0.0;
  double iavae_kl_std = 0.0;
  std::size_t runs = 0;
};

struct RobustnessReport {
  std::vector<RobustnessRow> rows;
  std::vector<RunRecord> records;
};

RobustnessReport robustness(const ExperimentConfig& cfg, const SyntheticDataset& data,
                            const PosteriorReference* ref, std::ostream* log);
RobustnessReport summarize_records(const std::vector<RunRecord>& records,
                                   const std::vector<std::uint64_t>& base_seeds);
std::string robustness_csv(const RobustnessReport& report);
std::string robustness_text(const RobustnessReport& report);
// Reads every record.json under dir.
std::vector<RunRecord> collect_records(const std::filesystem::path& dir);

// Posterior quality summary and per-point diagnostics.
struct ModelSummary {
  double elbo = 0.0;
  double kl = 0.0;
  double d_map = 0.0;
  double r_map = 0.0;
};

struct PointDiagnostics {
  std::size_t index = 0;
  double d_map_vae = 0.0;
  double d_map_iavae = 0.0;
  double r_map_vae = 0.0;
  double r_map_iavae = 0.0;
  double elbo_gap = 0.0;  // ELBO_iavae(x) - ELBO_vae(x)
};

struct PosteriorEvalReport {
  ModelSummary vae;
  ModelSummary iavae;
  std::size_t excluded = 0;
  std::vector<PointDiagnostics> points;  // usable points only
};

PosteriorEvalReport posterior_eval(const SyntheticDataset& data, const InferenceModel& vae,
                                   const InferenceModel& iavae, const PosteriorReference& ref,
                                   const TrainConfig& train);
std::string posterior_csv(const PosteriorEvalReport& report);
std::string posterior_text(const PosteriorEvalReport& report);
std::string points_csv(const PosteriorEvalReport& report);

// Lattice of the unnormalized log posterior for one point, plus its JSON header
// {index, x, z_true, z_map, mean_vae, mean_iavae, lo, hi, resolution}.
void write_grid(const std::filesystem::path& csv, const std::filesystem::path& header,
                const SyntheticDataset& data, std::size_t index, const InferenceModel& vae,
                const InferenceModel& iavae, const PosteriorReference& ref,
                const PosteriorEvalConfig& cfg);

// Capacity sweep.
struct SweepEntry {
  std::size_t width = 0;
  std::size_t parameters = 0;
  std::uint64_t seed = 0;
  double elbo = 0.0;
  double kl = 0.0;
};

struct CapacityReport {
  std::vector<SweepEntry> entries;
  std::vector<SweepEntry> best;  // best seed per width, in width order
  std::size_t iavae_parameters = 0;
  double iavae_elbo = 0.0;  // best over the IA-VAE reference runs
  std::vector<double> iavae_runs;
};

CapacityReport capacity_sweep(const ExperimentConfig& cfg, const SyntheticDataset& data,
                              std::ostream* log);
std::string capacity_csv(const CapacityReport& report);

// Seed-paired ELBOs: baseline = VAE, treatment = mean IA-VAE over run seeds.
struct PairedSample {
  std::vector<std::uint64_t> seeds;
  std::vector<double> baseline;
  std::vector<double> treatment;
};

// Throws std::runtime_error naming seeds that lack a partner.
PairedSample pair_records(const std::vector<RunRecord>& records);

// Amortization gap per point.
struct GapPoint {
  std::size_t index = 0;
  double elbo_vae = 0.0;
  double elbo_star_vae = 0.0;
  double elbo_iavae = 0.0;
  double elbo_star_iavae = 0.0;
  double gap_vae() const { return elbo_star_vae - elbo_vae; }
  double gap_iavae() const { return elbo_star_iavae - elbo_iavae; }
};

struct GapReport {
  std::vector<GapPoint> points;
  double mean_gap_vae = 0.0;
  double mean_gap_iavae = 0.0;
  double min_gap = 0.0;
};

GapReport amortization_gap(const SyntheticDataset& data, const InferenceModel& vae,
                           const InferenceModel& iavae, const GapConfig& cfg, std::size_t jobs = 1);
std::string gap_csv(const GapReport& report);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace iavae::experiments
