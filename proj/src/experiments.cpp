#include "iavae/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "iavae/checkpoint.hpp"
#include "iavae/format.hpp"
#include "iavae/rng.hpp"

namespace iavae::experiments {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------- config

namespace {

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known = known || it.key() == k;
    if (!known) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <typename T>
void read(const json& obj, const char* key, const std::string& where, T& target) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    }
    target = v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError(where + "." + key + ": invalid value " + v.dump());
  }
}

const char* engine_name(GradientEngine e) { return e == GradientEngine::kFused ? "fused" : "graph"; }

ordered_json train_json(const TrainConfig& t) {
  ordered_json j;
  j["learning_rate"] = t.learning_rate;
  j["batch_size"] = t.batch_size;
  j["max_epochs"] = t.max_epochs;
  j["patience"] = t.patience;
  j["num_mc_samples"] = t.num_mc_samples;
  j["eval_samples"] = t.eval_samples;
  j["eval_seed"] = t.eval_seed;
  j["hypernet_init_std"] = t.hypernet_init_std;
  j["embedding_dim"] = t.embedding_dim;
  j["hidden_width"] = t.hidden_width;
  j["engine"] = engine_name(t.engine);
  return j;
}

std::string dataset_key(const SyntheticDataset& data) {
  ordered_json j;
  j["N"] = data.size();
  j["sigma"] = data.sigma;
  j["seed"] = data.seed;
  return j.dump();
}

}  // namespace

void ExperimentConfig::validate() const {
  auto seeds_ok = [](const std::vector<std::uint64_t>& s, const char* name) {
    if (s.empty()) throw ConfigError(std::string(name) + ": must not be empty");
    std::set<std::uint64_t> unique(s.begin(), s.end());
    if (unique.size() != s.size()) throw ConfigError(std::string(name) + ": duplicate seeds");
  };
  seeds_ok(base_seeds, "base_seeds");
  seeds_ok(run_seeds, "run_seeds");
  if (dataset.n == 0) throw ConfigError("dataset.N: must be at least 1");
  if (!(dataset.sigma > 0.0)) throw ConfigError("dataset.sigma: must be positive");
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (widths.empty()) throw ConfigError("widths: must not be empty");
  for (std::size_t w : widths)
    if (w == 0) throw ConfigError("widths: entries must be positive");
  if (sweep_seeds == 0) throw ConfigError("sweep_seeds: must be at least 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha: must lie in (0, 1)");
  if (jobs == 0) throw ConfigError("jobs: must be at least 1");
  if (posterior.grid_resolution < 2) throw ConfigError("posterior.grid_resolution: must be at least 2");
  if (!(posterior.grid_hi > posterior.grid_lo)) throw ConfigError("posterior: grid_hi must exceed grid_lo");
  if (posterior.map_restarts == 0) throw ConfigError("posterior.map_restarts: must be at least 1");
  if (!(posterior.map_lr > 0.0)) throw ConfigError("posterior.map_lr: must be positive");
  if (gap.samples == 0) throw ConfigError("gap.samples: must be at least 1");
  if (!(gap.lr > 0.0)) throw ConfigError("gap.lr: must be positive");
}

ExperimentConfig config_from_json(const json& doc) {
  ExperimentConfig cfg;
  check_keys(doc, "config",
             {"dataset", "train", "base_seeds", "run_seeds", "widths", "sweep_seeds", "posterior", "gap",
              "alpha", "jobs", "out"});
  if (doc.contains("dataset")) {
    const json& d = doc.at("dataset");
    check_keys(d, "dataset", {"N", "sigma", "seed"});
    read(d, "N", "dataset", cfg.dataset.n);
    read(d, "sigma", "dataset", cfg.dataset.sigma);
    read(d, "seed", "dataset", cfg.dataset.seed);
  }
  if (doc.contains("train")) {
    const json& t = doc.at("train");
    check_keys(t, "train",
               {"learning_rate", "batch_size", "max_epochs", "patience", "num_mc_samples", "eval_samples",
                "eval_seed", "hypernet_init_std", "embedding_dim", "hidden_width", "engine"});
    read(t, "learning_rate", "train", cfg.train.learning_rate);
    read(t, "batch_size", "train", cfg.train.batch_size);
    read(t, "max_epochs", "train", cfg.train.max_epochs);
    read(t, "patience", "train", cfg.train.patience);
    read(t, "num_mc_samples", "train", cfg.train.num_mc_samples);
    read(t, "eval_samples", "train", cfg.train.eval_samples);
    read(t, "eval_seed", "train", cfg.train.eval_seed);
    read(t, "hypernet_init_std", "train", cfg.train.hypernet_init_std);
    read(t, "embedding_dim", "train", cfg.train.embedding_dim);
    read(t, "hidden_width", "train", cfg.train.hidden_width);
    if (t.contains("engine")) {
      const json& e = t.at("engine");
      if (e == "fused") cfg.train.engine = GradientEngine::kFused;
      else if (e == "graph") cfg.train.engine = GradientEngine::kGraph;
      else throw ConfigError("train.engine: expected \"fused\" or \"graph\", got " + e.dump());
    }
  }
  read(doc, "base_seeds", "config", cfg.base_seeds);
  read(doc, "run_seeds", "config", cfg.run_seeds);
  read(doc, "widths", "config", cfg.widths);
  read(doc, "sweep_seeds", "config", cfg.sweep_seeds);
  if (doc.contains("posterior")) {
    const json& p = doc.at("posterior");
    check_keys(p, "posterior",
               {"grid_resolution", "grid_lo", "grid_hi", "example_points", "map_restarts", "map_steps",
                "map_lr", "map_seed"});
    read(p, "grid_resolution", "posterior", cfg.posterior.grid_resolution);
    read(p, "grid_lo", "posterior", cfg.posterior.grid_lo);
    read(p, "grid_hi", "posterior", cfg.posterior.grid_hi);
    read(p, "example_points", "posterior", cfg.posterior.example_points);
    read(p, "map_restarts", "posterior", cfg.posterior.map_restarts);
    read(p, "map_steps", "posterior", cfg.posterior.map_steps);
    read(p, "map_lr", "posterior", cfg.posterior.map_lr);
    read(p, "map_seed", "posterior", cfg.posterior.map_seed);
  }
  if (doc.contains("gap")) {
    const json& g = doc.at("gap");
    check_keys(g, "gap", {"steps", "lr", "samples", "seed", "max_points"});
    read(g, "steps", "gap", cfg.gap.steps);
    read(g, "lr", "gap", cfg.gap.lr);
    read(g, "samples", "gap", cfg.gap.samples);
    read(g, "seed", "gap", cfg.gap.seed);
    read(g, "max_points", "gap", cfg.gap.max_points);
  }
  read(doc, "alpha", "config", cfg.alpha);
  read(doc, "jobs", "config", cfg.jobs);
  if (doc.contains("out")) {
    if (!doc.at("out").is_string()) throw ConfigError("config.out: expected a string");
    cfg.out = doc.at("out").get<std::string>();
  }
  return cfg;
}

ordered_json config_to_json(const ExperimentConfig& cfg) {
  ordered_json j;
  j["dataset"] = {{"N", cfg.dataset.n}, {"sigma", cfg.dataset.sigma}, {"seed", cfg.dataset.seed}};
  j["train"] = train_json(cfg.train);
  j["base_seeds"] = cfg.base_seeds;
  j["run_seeds"] = cfg.run_seeds;
  j["widths"] = cfg.widths;
  j["sweep_seeds"] = cfg.sweep_seeds;
  const PosteriorEvalConfig& p = cfg.posterior;
  j["posterior"] = {{"grid_resolution", p.grid_resolution}, {"grid_lo", p.grid_lo},
                    {"grid_hi", p.grid_hi},                 {"example_points", p.example_points},
                    {"map_restarts", p.map_restarts},       {"map_steps", p.map_steps},
                    {"map_lr", p.map_lr},                   {"map_seed", p.map_seed}};
  const GapConfig& g = cfg.gap;
  j["gap"] = {{"steps", g.steps}, {"lr", g.lr}, {"samples", g.samples}, {"seed", g.seed},
              {"max_points", g.max_points}};
  j["alpha"] = cfg.alpha;
  j["jobs"] = cfg.jobs;
  j["out"] = cfg.out.string();
  return j;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(doc);
}

SyntheticDataset dataset_for(const ExperimentConfig& cfg) {
  const fs::path csv = cfg.out / "dataset.csv";
  const fs::path side = cfg.out / "dataset.json";
  if (!cfg.out.empty() && fs::exists(csv) && fs::exists(side)) {
    std::ifstream in(side);
    const json meta = json::parse(in, nullptr, false);
    if (!meta.is_discarded() && meta.value("N", std::size_t{0}) == cfg.dataset.n &&
        meta.value("sigma", -1.0) == cfg.dataset.sigma && meta.value("seed", ~std::uint64_t{0}) == cfg.dataset.seed)
      return read_dataset(csv, side);
  }
  return generate(cfg.dataset.n, cfg.dataset.sigma, cfg.dataset.seed);
}

std::uint64_t iavae_train_seed(std::uint64_t base_seed, std::uint64_t run_seed) {
  return splitmix64(splitmix64(base_seed) + run_seed);
}

// ---------------------------------------------------------------- reference

std::size_t PosteriorReference::excluded() const {
  return static_cast<std::size_t>(std::count_if(points.begin(), points.end(),
                                                [](const PointReference& p) { return !p.usable; }));
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& task) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t width = std::max<std::size_t>(1, std::min(jobs, n));
  if (width == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < width; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

PosteriorReference build_reference(const SyntheticDataset& data, const PosteriorEvalConfig& cfg,
                                   std::size_t jobs) {
  PosteriorReference ref;
  ref.model.sigma = data.sigma;
  ref.points.resize(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) {
    MapOptions opts;
    opts.restarts = cfg.map_restarts;
    opts.steps = cfg.map_steps;
    opts.lr = cfg.map_lr;
    opts.seed = cfg.map_seed + i;
    PointReference& p = ref.points[i];
    p.map = find_map(data.x[i], ref.model, opts);
    if (!p.map.converged) return;
    try {
      p.laplace = laplace_fit(data.x[i], p.map.z, ref.model);
      p.usable = true;
    } catch (const NotPositiveDefinite&) {
    }
  });
  return ref;
}

MapMetrics map_metrics(const SyntheticDataset& data, const InferenceModel& model,
                       const PosteriorReference& ref) {
  if (ref.points.size() != data.size()) throw std::invalid_argument("map_metrics: reference size mismatch");
  MapMetrics m;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  m.d_per_point.assign(data.size(), nan);
  m.r_per_point.assign(data.size(), nan);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const PointReference& p = ref.points[i];
    if (!p.usable) continue;
    const PosteriorParams q = model.posterior(data.x[i]);
    m.d_per_point[i] = mahalanobis(q.mean, p.laplace);
    m.r_per_point[i] = density_ratio(q.mean, data.x[i], p.map.z, ref.model);
    m.d_map += m.d_per_point[i];
    m.r_map += m.r_per_point[i];
    ++m.used;
  }
  if (m.used > 0) {
    m.d_map /= static_cast<double>(m.used);
    m.r_map /= static_cast<double>(m.used);
  }
  return m;
}

// ---------------------------------------------------------------- runs

ordered_json to_json(const RunRecord& r) {
  ordered_json j;
  j["mode"] = r.mode;
  j["base_seed"] = r.base_seed;
  j["run_seed"] = r.run_seed ? ordered_json(*r.run_seed) : ordered_json(nullptr);
  j["hidden_width"] = r.hidden_width;
  j["status"] = r.status;
  j["error"] = r.error;
  j["elbo"] = r.elbo;
  j["reconstruction"] = r.reconstruction;
  j["kl"] = r.kl;
  j["d_map"] = r.d_map;
  j["r_map"] = r.r_map;
  j["map_excluded"] = r.map_excluded;
  j["parameters"] = {{"encoder", r.encoder_parameters},
                     {"hypernet", r.hypernet_parameters},
                     {"embeddings", r.embedding_parameters}};
  j["best_epoch"] = r.best_epoch;
  j["epochs_run"] = r.epochs_run;
  j["stopped_early"] = r.stopped_early;
  j["wall_ms"] = r.wall_ms;
  j["fingerprint"] = r.fingerprint;
  return j;
}

RunRecord record_from_json(const json& j) {
  RunRecord r;
  r.mode = j.at("mode").get<std::string>();
  r.base_seed = j.at("base_seed").get<std::uint64_t>();
  if (!j.at("run_seed").is_null()) r.run_seed = j.at("run_seed").get<std::uint64_t>();
  r.hidden_width = j.at("hidden_width").get<std::size_t>();
  r.status = j.at("status").get<std::string>();
  r.error = j.value("error", std::string());
  r.elbo = j.at("elbo").get<double>();
  r.reconstruction = j.at("reconstruction").get<double>();
  r.kl = j.at("kl").get<double>();
  r.d_map = j.at("d_map").get<double>();
  r.r_map = j.at("r_map").get<double>();
  r.map_excluded = j.at("map_excluded").get<std::size_t>();
  const json& p = j.at("parameters");
  r.encoder_parameters = p.at("encoder").get<std::size_t>();
  r.hypernet_parameters = p.at("hypernet").get<std::size_t>();
  r.embedding_parameters = p.at("embeddings").get<std::size_t>();
  r.best_epoch = j.at("best_epoch").get<std::size_t>();
  r.epochs_run = j.at("epochs_run").get<std::size_t>();
  r.stopped_early = j.at("stopped_early").get<bool>();
  r.wall_ms = j.at("wall_ms").get<double>();
  r.fingerprint = j.value("fingerprint", std::string());
  return r;
}

std::size_t count_trainable(const InferenceModel& model) {
  std::vector<ad::Tensor> leaves = model.hypernet ? model.hypernet->tensors() : model.encoder.tensors();
  std::size_t n = 0;
  for (const ad::Tensor& t : leaves) n += t.size();
  return n;
}

void write_epochs_csv(const fs::path& path, const std::vector<EpochMetrics>& history) {
  std::ostringstream out;
  out << "epoch,elbo,recon,kl,wall_ms\n";
  for (const EpochMetrics& m : history)
    out << m.epoch << ',' << fmt_double(m.elbo) << ',' << fmt_double(m.reconstruction) << ','
        << fmt_double(m.kl) << ',' << fmt_fixed(m.wall_ms, 3) << '\n';
  write_text(path, out.str());
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

namespace {

std::optional<RunOutcome> try_reuse(const fs::path& dir, const std::string& fingerprint) {
  if (dir.empty() || !fs::exists(dir / "record.json") || !fs::exists(dir / "checkpoint.json")) return std::nullopt;
  std::ifstream in(dir / "record.json");
  const json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) return std::nullopt;
  try {
    RunOutcome out;
    out.record = record_from_json(doc);
    if (out.record.status != "ok" || out.record.fingerprint != fingerprint) return std::nullopt;
    out.model = load_checkpoint(dir / "checkpoint.json");
    out.reused = true;
    return out;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

RunOutcome finish_run(const SyntheticDataset& data, const TrainConfig& cfg, Mode mode,
                      const std::optional<EncoderParams>& base, RunRecord record,
                      const PosteriorReference* ref, const fs::path& dir) {
  RunOutcome out;
  const auto start = std::chrono::steady_clock::now();
  try {
    TrainResult result = train(data, mode, base, cfg);
    out.model = std::move(result.model);
    out.history = std::move(result.history);
    const EpochMetrics& best = out.history[result.best_epoch];
    record.elbo = best.elbo;
    record.reconstruction = best.reconstruction;
    record.kl = best.kl;
    record.best_epoch = result.best_epoch;
    record.epochs_run = out.history.size() - 1;
    record.stopped_early = result.stopped_early;
    record.encoder_parameters = out.model.encoder.parameter_count();
    record.hypernet_parameters = out.model.hypernet ? out.model.hypernet->projection_parameter_count() : 0;
    record.embedding_parameters = out.model.embedding_parameter_count();
    if (!std::isfinite(record.elbo) || !std::isfinite(record.kl))
      throw std::runtime_error("non-finite ELBO at the best epoch");
    if (ref) {
      const MapMetrics m = map_metrics(data, out.model, *ref);
      record.d_map = m.d_map;
      record.r_map = m.r_map;
      record.map_excluded = data.size() - m.used;
    }
  } catch (const std::exception& e) {
    record.status = "failed";
    record.error = e.what();
  }
  record.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  out.record = record;
  if (!dir.empty()) {
    fs::create_directories(dir);
    if (record.status == "ok") {
      save_checkpoint(dir / "checkpoint.json", out.model, mode == Mode::kVae ? record.base_seed : cfg.seed);
      write_epochs_csv(dir / "epochs.csv", out.history);
    }
    write_text(dir / "record.json", to_json(record).dump(2) + "\n");
  }
  return out;
}

}  // namespace

RunOutcome run_vae(const SyntheticDataset& data, const TrainConfig& cfg, std::uint64_t base_seed,
                   std::size_t hidden_width, const PosteriorReference* ref, const fs::path& dir) {
  TrainConfig c = cfg;
  c.seed = base_seed;
  c.hidden_width = hidden_width;
  RunRecord record;
  record.mode = "vae";
  record.base_seed = base_seed;
  record.hidden_width = hidden_width;
  ordered_json fp;
  fp["mode"] = "vae";
  fp["dataset"] = dataset_key(data);
  fp["train"] = train_json(c);
  fp["reference"] = ref != nullptr;
  record.fingerprint = fp.dump();
  if (auto reused = try_reuse(dir, record.fingerprint)) return std::move(*reused);
  return finish_run(data, c, Mode::kVae, std::nullopt, record, ref, dir);
}

RunOutcome run_iavae(const SyntheticDataset& data, const TrainConfig& cfg, const EncoderParams& base,
                     std::uint64_t base_seed, std::uint64_t run_seed, const PosteriorReference* ref,
                     const fs::path& dir) {
  TrainConfig c = cfg;
  c.seed = iavae_train_seed(base_seed, run_seed);
  c.hidden_width = base.arch.hidden_width;
  RunRecord record;
  record.mode = "iavae";
  record.base_seed = base_seed;
  record.run_seed = run_seed;
  record.hidden_width = base.arch.hidden_width;
  ordered_json fp;
  fp["mode"] = "iavae";
  fp["dataset"] = dataset_key(data);
  fp["train"] = train_json(c);
  fp["base"] = checkpoint_json(InferenceModel{base, std::nullopt}, base_seed).dump();
  fp["reference"] = ref != nullptr;
  record.fingerprint = fp.dump();
  if (auto reused = try_reuse(dir, record.fingerprint)) return std::move(*reused);
  return finish_run(data, c, Mode::kIaVae, base, record, ref, dir);
}

// ---------------------------------------------------------------- robustness

namespace {

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

void say(std::ostream* log, const std::string& line) {
  static std::mutex mu;
  if (!log) return;
  std::lock_guard<std::mutex> lock(mu);
  *log << line << std::endl;
}

std::string describe(const RunRecord& r) {
  std::string s = r.mode + " base " + std::to_string(r.base_seed);
  if (r.run_seed) s += " run " + std::to_string(*r.run_seed);
  if (r.status != "ok") return s + ": FAILED (" + r.error + ")";
  return s + ": elbo " + fmt_fixed(r.elbo, 4) + " kl " + fmt_fixed(r.kl, 4) + " best epoch " +
         std::to_string(r.best_epoch);
}

}  // namespace

RobustnessReport robustness(const ExperimentConfig& cfg, const SyntheticDataset& data,
                            const PosteriorReference* ref, std::ostream* log) {
  const fs::path root = cfg.out.empty() ? fs::path() : cfg.out / "robustness";
  auto dir = [&](std::uint64_t base, const std::string& leaf) {
    return root.empty() ? fs::path() : root / std::to_string(base) / leaf;
  };

  std::vector<RunOutcome> bases(cfg.base_seeds.size());
  parallel_for(bases.size(), cfg.jobs, [&](std::size_t i) {
    const std::uint64_t b = cfg.base_seeds[i];
    bases[i] = run_vae(data, cfg.train, b, cfg.train.hidden_width, ref, dir(b, "vae"));
    say(log, describe(bases[i].record) + (bases[i].reused ? " (reused)" : ""));
  });

  struct Task {
    std::size_t base_index;
    std::uint64_t run_seed;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < bases.size(); ++i)
    if (bases[i].record.status == "ok")
      for (std::uint64_t r : cfg.run_seeds) tasks.push_back({i, r});
  std::vector<RunRecord> runs(tasks.size());
  parallel_for(tasks.size(), cfg.jobs, [&](std::size_t t) {
    const Task& task = tasks[t];
    const std::uint64_t b = cfg.base_seeds[task.base_index];
    RunOutcome o = run_iavae(data, cfg.train, bases[task.base_index].model.encoder, b, task.run_seed, ref,
                             dir(b, std::to_string(task.run_seed)));
    say(log, describe(o.record) + (o.reused ? " (reused)" : ""));
    runs[t] = std::move(o.record);
  });

  std::vector<RunRecord> records;
  for (const RunOutcome& o : bases) records.push_back(o.record);
  records.insert(records.end(), runs.begin(), runs.end());
  RobustnessReport report = summarize_records(records, cfg.base_seeds);
  if (!root.empty()) {
    write_text(root / "summary.csv", robustness_csv(report));
    write_text(root / "summary.txt", robustness_text(report));
  }
  return report;
}

RobustnessReport summarize_records(const std::vector<RunRecord>& records,
                                   const std::vector<std::uint64_t>& base_seeds) {
  RobustnessReport report;
  report.records = records;
  for (std::uint64_t b : base_seeds) {
    RobustnessRow row;
    row.base_seed = b;
    const RunRecord* vae = nullptr;
    std::vector<const RunRecord*> runs;
    for (const RunRecord& r : records) {
      if (r.base_seed != b) continue;
      if (r.mode == "vae") vae = &r;
      else runs.push_back(&r);
    }
    if (!vae) {
      row.ok = false;
      row.reason = "missing VAE run";
    } else if (vae->status != "ok") {
      row.ok = false;
      row.reason = "VAE run failed: " + vae->error;
    } else {
      row.vae_elbo = vae->elbo;
      row.vae_kl = vae->kl;
    }
    std::vector<double> elbos;
    std::vector<double> kls;
    for (const RunRecord* r : runs) {
      if (r->status != "ok") {
        row.ok = false;
        row.reason += (row.reason.empty() ? "" : "; ") + std::string("IA-VAE run ") +
                      std::to_string(r->run_seed.value_or(0)) + " failed: " + r->error;
        continue;
      }
      elbos.push_back(r->elbo);
      kls.push_back(r->kl);
    }
    if (row.ok && elbos.empty()) {
      row.ok = false;
      row.reason = "no IA-VAE runs";
    }
    row.runs = elbos.size();
    row.iavae_elbo_mean = mean_of(elbos);
    row.iavae_elbo_std = sample_std(elbos, row.iavae_elbo_mean);
    row.iavae_kl_mean = mean_of(kls);
    row.iavae_kl_std = sample_std(kls, row.iavae_kl_mean);
    report.rows.push_back(row);
  }
  return report;
}

std::string robustness_csv(const RobustnessReport& report) {
  std::ostringstream out;
  out << "base_seed,status,vae_elbo,vae_kl,iavae_elbo_mean,iavae_elbo_std,iavae_kl_mean,iavae_kl_std,runs,reason\n";
  for (const RobustnessRow& r : report.rows) {
    out << r.base_seed << ',' << (r.ok ? "ok" : "failed") << ',';
    if (r.ok)
      out << fmt_double(r.vae_elbo) << ',' << fmt_double(r.vae_kl) << ',' << fmt_double(r.iavae_elbo_mean) << ','
          << fmt_double(r.iavae_elbo_std) << ',' << fmt_double(r.iavae_kl_mean) << ','
          << fmt_double(r.iavae_kl_std);
    else
      out << ",,,,,";
    std::string reason = r.reason;
    std::replace(reason.begin(), reason.end(), ',', ';');
    std::replace(reason.begin(), reason.end(), '\n', ' ');
    out << ',' << r.runs << ',' << reason << '\n';
  }
  return out.str();
}

std::string robustness_text(const RobustnessReport& report) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s  %-18s  %-34s\n", "base seed", "VAE ELBO (KL)", "IA-VAE ELBO (KL)");
  out << line;
  for (const RobustnessRow& r : report.rows) {
    if (!r.ok) {
      std::snprintf(line, sizeof line, "%-10llu  failed: %s\n", static_cast<unsigned long long>(r.base_seed),
                    r.reason.c_str());
      out << line;
      continue;
    }
    const std::string vae = fmt_fixed(r.vae_elbo, 2) + " (" + fmt_fixed(r.vae_kl, 2) + ")";
    const std::string ia = fmt_fixed(r.iavae_elbo_mean, 2) + " +/- " + fmt_fixed(r.iavae_elbo_std, 2) + " (" +
                           fmt_fixed(r.iavae_kl_mean, 2) + " +/- " + fmt_fixed(r.iavae_kl_std, 2) + ")";
    std::snprintf(line, sizeof line, "%-10llu  %-18s  %-34s\n", static_cast<unsigned long long>(r.base_seed),
                  vae.c_str(), ia.c_str());
    out << line;
  }
  return out.str();
}

std::vector<RunRecord> collect_records(const fs::path& dir) {
  std::vector<fs::path> files;
  if (!fs::exists(dir)) throw std::runtime_error("no such directory " + dir.string());
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().filename() == "record.json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> out;
  for (const fs::path& f : files) {
    std::ifstream in(f);
    try {
      out.push_back(record_from_json(json::parse(in)));
    } catch (const std::exception& e) {
      throw std::runtime_error(f.string() + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- posterior eval

PosteriorEvalReport posterior_eval(const SyntheticDataset& data, const InferenceModel& vae,
                                   const InferenceModel& iavae, const PosteriorReference& ref,
                                   const TrainConfig& train) {
  PosteriorEvalReport report;
  const DatasetEvaluation ev = evaluate(data, vae, train.eval_samples, train.eval_seed);
  const DatasetEvaluation ei = evaluate(data, iavae, train.eval_samples, train.eval_seed);
  const MapMetrics mv = map_metrics(data, vae, ref);
  const MapMetrics mi = map_metrics(data, iavae, ref);
  report.vae = {ev.elbo, ev.kl, mv.d_map, mv.r_map};
  report.iavae = {ei.elbo, ei.kl, mi.d_map, mi.r_map};
  report.excluded = ref.excluded();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!ref.points[i].usable) continue;
    report.points.push_back({i, mv.d_per_point[i], mi.d_per_point[i], mv.r_per_point[i], mi.r_per_point[i],
                             ei.points[i].elbo - ev.points[i].elbo});
  }
  return report;
}

std::string posterior_csv(const PosteriorEvalReport& r) {
  std::ostringstream out;
  out << "model,elbo,kl,d_map,r_map,excluded\n";
  out << "vae," << fmt_double(r.vae.elbo) << ',' << fmt_double(r.vae.kl) << ',' << fmt_double(r.vae.d_map) << ','
      << fmt_double(r.vae.r_map) << ',' << r.excluded << '\n';
  out << "iavae," << fmt_double(r.iavae.elbo) << ',' << fmt_double(r.iavae.kl) << ','
      << fmt_double(r.iavae.d_map) << ',' << fmt_double(r.iavae.r_map) << ',' << r.excluded << '\n';
  return out.str();
}

std::string posterior_text(const PosteriorEvalReport& r) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-8s  %-16s  %-8s  %-8s\n", "model", "ELBO (KL)", "d_MAP", "r_MAP");
  out << line;
  auto row = [&](const char* name, const ModelSummary& m) {
    const std::string e = fmt_fixed(m.elbo, 2) + " (" + fmt_fixed(m.kl, 2) + ")";
    std::snprintf(line, sizeof line, "%-8s  %-16s  %-8s  %-8s\n", name, e.c_str(), fmt_fixed(m.d_map, 2).c_str(),
                  fmt_fixed(m.r_map, 2).c_str());
    out << line;
  };
  row("VAE", r.vae);
  row("IA-VAE", r.iavae);
  out << "points excluded (MAP not converged or not a local maximum): " << r.excluded << '\n';
  return out.str();
}

std::string points_csv(const PosteriorEvalReport& r) {
  std::ostringstream out;
  out << "index,d_map_vae,d_map_iavae,r_map_vae,r_map_iavae,elbo_gap\n";
  for (const PointDiagnostics& p : r.points)
    out << p.index << ',' << fmt_double(p.d_map_vae) << ',' << fmt_double(p.d_map_iavae) << ','
        << fmt_double(p.r_map_vae) << ',' << fmt_double(p.r_map_iavae) << ',' << fmt_double(p.elbo_gap) << '\n';
  return out.str();
}

void write_grid(const fs::path& csv, const fs::path& header, const SyntheticDataset& data, std::size_t index,
                const InferenceModel& vae, const InferenceModel& iavae, const PosteriorReference& ref,
                const PosteriorEvalConfig& cfg) {
  if (index >= data.size()) throw std::invalid_argument("write_grid: index outside dataset");
  const PosteriorGrid grid = posterior_grid(data.x[index], ref.model, cfg.grid_lo, cfg.grid_hi, cfg.grid_resolution);
  std::ostringstream out;
  out << "z1,z2,log_density\n";
  for (std::size_t i = 0; i < grid.resolution; ++i)
    for (std::size_t j = 0; j < grid.resolution; ++j)
      out << fmt_double(grid.coordinate(i)) << ',' << fmt_double(grid.coordinate(j)) << ','
          << fmt_double(grid.at(i, j)) << '\n';
  write_text(csv, out.str());

  ordered_json h;
  h["index"] = index;
  h["x"] = data.x[index];
  h["z_true"] = data.z_true[index];
  h["z_map"] = ref.points[index].map.z;
  h["map_converged"] = ref.points[index].map.converged;
  h["mean_vae"] = vae.posterior(data.x[index]).mean;
  h["mean_iavae"] = iavae.posterior(data.x[index]).mean;
  h["lo"] = grid.lo;
  h["hi"] = grid.hi;
  h["resolution"] = grid.resolution;
  h["log_evidence"] = grid.log_integral();
  write_text(header, h.dump(2) + "\n");
}

// ---------------------------------------------------------------- capacity sweep

CapacityReport capacity_sweep(const ExperimentConfig& cfg, const SyntheticDataset& data, std::ostream* log) {
  const fs::path root = cfg.out.empty() ? fs::path() : cfg.out / "capacity-sweep";
  std::vector<std::size_t> widths = cfg.widths;
  const bool has_base_width = std::find(widths.begin(), widths.end(), cfg.train.hidden_width) != widths.end();
  if (!has_base_width) widths.push_back(cfg.train.hidden_width);

  struct Task {
    std::size_t width;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (std::size_t w : widths)
    for (std::uint64_t s = 0; s < cfg.sweep_seeds; ++s) tasks.push_back({w, s});
  std::vector<RunOutcome> outcomes(tasks.size());
  parallel_for(tasks.size(), cfg.jobs, [&](std::size_t t) {
    const fs::path dir =
        root.empty() ? fs::path() : root / std::to_string(tasks[t].seed) / ("vae-h" + std::to_string(tasks[t].width));
    outcomes[t] = run_vae(data, cfg.train, tasks[t].seed, tasks[t].width, nullptr, dir);
    say(log, "h=" + std::to_string(tasks[t].width) + " " + describe(outcomes[t].record));
  });

  CapacityReport report;
  std::vector<std::size_t> base_tasks;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const RunRecord& r = outcomes[t].record;
    if (tasks[t].width == cfg.train.hidden_width && r.status == "ok") base_tasks.push_back(t);
    if (r.status != "ok") continue;
    if (!has_base_width && tasks[t].width == cfg.train.hidden_width) continue;
    report.entries.push_back({tasks[t].width, r.encoder_parameters, tasks[t].seed, r.elbo, r.kl});
  }
  for (std::size_t w : cfg.widths) {
    const SweepEntry* best = nullptr;
    for (const SweepEntry& e : report.entries)
      if (e.width == w && (!best || e.elbo > best->elbo)) best = &e;
    if (best) report.best.push_back(*best);
  }

  // IA-VAE reference: one run on top of each base-width VAE.
  std::vector<RunRecord> ia(base_tasks.size());
  parallel_for(base_tasks.size(), cfg.jobs, [&](std::size_t k) {
    const Task& task = tasks[base_tasks[k]];
    const std::uint64_t run_seed = cfg.run_seeds.front();
    const fs::path dir = root.empty() ? fs::path() : root / std::to_string(task.seed) / std::to_string(run_seed);
    RunOutcome o = run_iavae(data, cfg.train, outcomes[base_tasks[k]].model.encoder, task.seed, run_seed, nullptr, dir);
    say(log, describe(o.record));
    ia[k] = o.record;
  });
  report.iavae_elbo = -std::numeric_limits<double>::infinity();
  for (const RunRecord& r : ia) {
    if (r.status != "ok") continue;
    report.iavae_parameters = r.encoder_parameters + r.hypernet_parameters;
    report.iavae_runs.push_back(r.elbo);
    report.iavae_elbo = std::max(report.iavae_elbo, r.elbo);
  }
  if (!root.empty()) write_text(root / "capacity.csv", capacity_csv(report));
  return report;
}

std::string capacity_csv(const CapacityReport& report) {
  std::ostringstream out;
  out << "model,width,parameters,seed,elbo,kl,best\n";
  for (const SweepEntry& e : report.entries) {
    bool best = false;
    for (const SweepEntry& b : report.best) best = best || (b.width == e.width && b.seed == e.seed);
    out << "vae," << e.width << ',' << e.parameters << ',' << e.seed << ',' << fmt_double(e.elbo) << ','
        << fmt_double(e.kl) << ',' << (best ? 1 : 0) << '\n';
  }
  for (std::size_t k = 0; k < report.iavae_runs.size(); ++k)
    out << "iavae,," << report.iavae_parameters << ',' << k << ',' << fmt_double(report.iavae_runs[k]) << ",,"
        << (report.iavae_runs[k] == report.iavae_elbo ? 1 : 0) << '\n';
  return out.str();
}

// ---------------------------------------------------------------- significance

PairedSample pair_records(const std::vector<RunRecord>& records) {
  std::map<std::uint64_t, double> vae;
  std::map<std::uint64_t, std::vector<double>> ia;
  for (const RunRecord& r : records) {
    if (r.status != "ok") continue;
    if (r.mode == "vae") vae[r.base_seed] = r.elbo;
    else ia[r.base_seed].push_back(r.elbo);
  }
  std::vector<std::string> missing;
  for (const auto& [seed, v] : vae)
    if (!ia.count(seed)) missing.push_back("base seed " + std::to_string(seed) + " has no IA-VAE run");
  for (const auto& [seed, v] : ia)
    if (!vae.count(seed)) missing.push_back("base seed " + std::to_string(seed) + " has no VAE run");
  if (!missing.empty()) {
    std::string msg = "unpaired records:";
    for (const std::string& m : missing) msg += "\n  " + m;
    throw std::runtime_error(msg);
  }
  PairedSample out;
  for (const auto& [seed, v] : vae) {
    out.seeds.push_back(seed);
    out.baseline.push_back(v);
    out.treatment.push_back(mean_of(ia[seed]));
  }
  return out;
}

// ---------------------------------------------------------------- gap

GapReport amortization_gap(const SyntheticDataset& data, const InferenceModel& vae, const InferenceModel& iavae,
                           const GapConfig& cfg, std::size_t jobs) {
  const std::size_t n = cfg.max_points == 0 ? data.size() : std::min(cfg.max_points, data.size());
  GapReport report;
  report.points.resize(n);
  parallel_for(n, jobs, [&](std::size_t i) {
    const ad::Tensor noise = draw_noise(cfg.seed, i, cfg.samples, 2);
    GapPoint& p = report.points[i];
    p.index = i;
    const PosteriorParams qv = vae.posterior(data.x[i]);
    const PosteriorParams qi = iavae.posterior(data.x[i]);
    p.elbo_vae = elbo_estimate(data.x[i], qv, noise, data.sigma).elbo;
    p.elbo_iavae = elbo_estimate(data.x[i], qi, noise, data.sigma).elbo;
    p.elbo_star_vae = per_instance_optimal_elbo(data.x[i], qv, cfg.steps, cfg.lr, noise, data.sigma).elbo;
    p.elbo_star_iavae = per_instance_optimal_elbo(data.x[i], qi, cfg.steps, cfg.lr, noise, data.sigma).elbo;
  });
  report.min_gap = std::numeric_limits<double>::infinity();
  for (const GapPoint& p : report.points) {
    report.mean_gap_vae += p.gap_vae();
    report.mean_gap_iavae += p.gap_iavae();
    report.min_gap = std::min({report.min_gap, p.gap_vae(), p.gap_iavae()});
  }
  if (n > 0) {
    report.mean_gap_vae /= static_cast<double>(n);
    report.mean_gap_iavae /= static_cast<double>(n);
  }
  return report;
}

std::string gap_csv(const GapReport& report) {
  std::ostringstream out;
  out << "index,elbo_vae,elbo_star_vae,gap_vae,elbo_iavae,elbo_star_iavae,gap_iavae\n";
  for (const GapPoint& p : report.points)
    out << p.index << ',' << fmt_double(p.elbo_vae) << ',' << fmt_double(p.elbo_star_vae) << ','
        << fmt_double(p.gap_vae()) << ',' << fmt_double(p.elbo_iavae) << ',' << fmt_double(p.elbo_star_iavae) << ','
        << fmt_double(p.gap_iavae()) << '\n';
  return out.str();
}

}  // namespace iavae::experiments
